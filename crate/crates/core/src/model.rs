//! Text-to-graph event parser.
//!
//! A sentence is embedded token by token, every token is mapped to
//! `n_queries_per_token` queries, a stack of transformer layers without
//! positional encoding mixes the queries, and three classifiers read the
//! result: node presence (linear), node anchors (deep biaffine between
//! queries and tokens), and edges (two deep biaffine modules between the
//! queries plus a virtual top row and the queries). Training matches gold
//! nodes to queries with the Hungarian algorithm before computing the loss.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use itertools::Itertools;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Ontology;
use crate::graph::{normalize_anchors, Edge, EventGraph, Node, NodeId, Sentence, Span};
use crate::matching::{hungarian, Assignment, MatchingError};
use crate::tensor::ops::{AttentionBlock, DeepBiaffine, DropoutRates, Linear};
use crate::tensor::{sigmoid, ParamGroup, ParamId, ParamStore, Scalar, ShapeError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Matching(#[from] MatchingError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("sentence `{0}` has no tokens")]
    EmptySentence(String),
    #[error("no external embeddings for sentence `{0}`")]
    MissingEmbedding(String),
    #[error("sentence `{id}`: expected {expected} vectors of width {width}, found {found_rows} of width {found_width}")]
    EmbeddingShape {
        id: String,
        expected: usize,
        width: usize,
        found_rows: usize,
        found_width: usize,
    },
    #[error("external embeddings required for sentence `{0}` but none were supplied")]
    NoEmbeddingSource(String),
    #[error("label `{0}` is not in the model vocabulary")]
    UnknownLabel(String),
    #[error("pooling needs at least one subword vector")]
    NoSubwords,
    #[error("embedding file line {line}: {detail}")]
    EmbeddingFile { line: usize, detail: String },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderKind {
    /// Hash-bucketed subword embeddings, attention pooling, and transformer
    /// layers with positional encoding.
    Toy { buckets: usize, layers: usize },
    /// Pre-computed per-token vectors of the given width, linearly projected.
    External { width: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub node: f64,
    pub anchor: f64,
    pub edge_presence: f64,
    pub edge_label: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            node: 1.0,
            anchor: 1.0,
            edge_presence: 1.0,
            edge_label: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_queries_per_token: usize,
    pub n_decoder_layers: usize,
    pub n_heads: usize,
    pub hidden_size_anchor: usize,
    pub hidden_size_edge_presence: usize,
    pub hidden_size_edge_label: usize,
    pub dropout_transformer: f64,
    pub dropout_transformer_attention: f64,
    pub event_types: Vec<String>,
    pub roles: Vec<String>,
    pub encoder: EncoderKind,
    /// Probability threshold for presence, anchors and edges (strict).
    pub threshold: f64,
    pub loss_weights: LossWeights,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_queries_per_token: 2,
            n_decoder_layers: 3,
            n_heads: 4,
            hidden_size_anchor: 256,
            hidden_size_edge_presence: 256,
            hidden_size_edge_label: 256,
            dropout_transformer: 0.25,
            dropout_transformer_attention: 0.1,
            event_types: Vec::new(),
            roles: Vec::new(),
            encoder: EncoderKind::Toy {
                buckets: 4096,
                layers: 2,
            },
            threshold: 0.5,
            loss_weights: LossWeights::default(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn with_ontology(mut self, ontology: &Ontology) -> Self {
        self.event_types = ontology.event_types.iter().cloned().collect();
        self.roles = ontology.roles.iter().cloned().collect();
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let sizes = [
            ("d_model", self.d_model),
            ("n_queries_per_token", self.n_queries_per_token),
            ("n_heads", self.n_heads),
            ("hidden_size_anchor", self.hidden_size_anchor),
            ("hidden_size_edge_presence", self.hidden_size_edge_presence),
            ("hidden_size_edge_label", self.hidden_size_edge_label),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.event_types.is_empty() {
            return Err(ModelError::Config("label vocabulary is empty".into()));
        }
        match self.encoder {
            EncoderKind::Toy { buckets: 0, .. } | EncoderKind::External { width: 0 } => {
                return Err(ModelError::Config("encoder size must be at least 1".into()))
            }
            _ => {}
        }
        for (name, p) in [
            ("dropout_transformer", self.dropout_transformer),
            ("dropout_transformer_attention", self.dropout_transformer_attention),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(ModelError::Config(format!("{name} must be in [0, 1)")));
            }
        }
        Ok(())
    }

    /// Edge-label vocabulary: event types and roles, sorted and deduplicated.
    pub fn labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = self.event_types.iter().chain(&self.roles).cloned().collect();
        labels.sort();
        labels.dedup();
        labels
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("serializable config");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Per-token vectors loaded from a line-delimited JSON file of
/// `{"sent_id": str, "vectors": [[float, ...], ...]}` records.
#[derive(Debug, Clone, Default)]
pub struct ExternalEmbeddings {
    vectors: HashMap<String, Vec<Vec<f32>>>,
}

#[derive(Deserialize)]
struct EmbeddingRecord {
    sent_id: String,
    vectors: Vec<Vec<f32>>,
}

impl ExternalEmbeddings {
    pub fn parse(reader: impl BufRead) -> Result<Self, ModelError> {
        let mut vectors = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EmbeddingRecord =
                serde_json::from_str(&line).map_err(|e| ModelError::EmbeddingFile {
                    line: i + 1,
                    detail: e.to_string(),
                })?;
            vectors.insert(rec.sent_id, rec.vectors);
        }
        Ok(ExternalEmbeddings { vectors })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::parse(BufReader::new(File::open(path)?))
    }

    pub fn insert(&mut self, sent_id: impl Into<String>, vectors: Vec<Vec<f32>>) {
        self.vectors.insert(sent_id.into(), vectors);
    }

    pub fn get(&self, sent_id: &str) -> Option<&[Vec<f32>]> {
        self.vectors.get(sent_id).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone)]
enum Encoder {
    Toy {
        table: ParamId,
        buckets: usize,
        scorer: Linear,
        layers: Vec<AttentionBlock>,
    },
    External {
        width: usize,
        projection: Linear,
    },
}

/// Classifier outputs for one sentence of `T` tokens with `Q = T·n`
/// queries. Row 0 of the edge tensors is the virtual top node; row `q + 1`
/// is query `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParseOutput<T> {
    /// `(Q)`
    pub node_presence: Tensor<T>,
    /// `(Q, T)`
    pub anchors: Tensor<T>,
    /// `(Q + 1, Q)`
    pub edge_presence: Tensor<T>,
    /// `(Q + 1, Q, L)`
    pub edge_labels: Tensor<T>,
}

impl<T: Scalar> ParseOutput<T> {
    pub fn n_queries(&self) -> usize {
        self.node_presence.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.anchors.cols()
    }

    pub fn n_labels(&self) -> usize {
        self.edge_labels.shape()[2]
    }

    pub fn zeros(n_tokens: usize, n_queries: usize, n_labels: usize) -> Self {
        ParseOutput {
            node_presence: Tensor::zeros(&[n_queries]),
            anchors: Tensor::zeros(&[n_queries, n_tokens]),
            edge_presence: Tensor::zeros(&[n_queries + 1, n_queries]),
            edge_labels: Tensor::zeros(&[n_queries + 1, n_queries, n_labels]),
        }
    }
}

/// Tape handles of the classifier outputs.
#[derive(Debug, Clone, Copy)]
pub struct OutputVars {
    pub node_presence: Var,
    pub anchors: Var,
    pub edge_presence: Var,
    pub edge_labels: Var,
}

impl OutputVars {
    pub fn values<T: Scalar>(&self, tape: &Tape<'_, T>) -> ParseOutput<T> {
        ParseOutput {
            node_presence: tape.value(self.node_presence).clone(),
            anchors: tape.value(self.anchors).clone(),
            edge_presence: tape.value(self.edge_presence).clone(),
            edge_labels: tape.value(self.edge_labels).clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Parser {
    config: ModelConfig,
    labels: Vec<String>,
    label_index: BTreeMap<String, usize>,
    type_labels: Vec<usize>,
    role_labels: Vec<usize>,
    encoder: Encoder,
    queries: Linear,
    decoder: Vec<AttentionBlock>,
    node: Linear,
    anchor: DeepBiaffine,
    edge_presence: DeepBiaffine,
    edge_label: DeepBiaffine,
    top: ParamId,
}

const SUBWORD_SALTS: [u64; 3] = [0x11, 0x22, 0x33];

fn fnv1a(salt: u64, s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ salt.wrapping_mul(0x100_0000_01b3);
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Subword pieces of a token: the whole word, its prefix, and its suffix.
pub fn subword_pieces(token: &str) -> [String; 3] {
    let chars: Vec<char> = token.chars().collect();
    let n = chars.len();
    let prefix: String = chars[..n.min(3)].iter().collect();
    let suffix: String = chars[n.saturating_sub(3)..].iter().collect();
    [token.to_string(), format!("<{prefix}"), format!("{suffix}>")]
}

/// Softmax-weighted sum of subword vectors `(S, d)` with scalar scores from
/// `scorer`; returns `(1, d)`.
pub fn pool_subwords<T: Scalar>(
    tape: &mut Tape<'_, T>,
    subwords: Var,
    scorer: &Linear,
) -> Result<Var, ModelError> {
    if tape.value(subwords).rows() == 0 || tape.value(subwords).is_empty() {
        return Err(ModelError::NoSubwords);
    }
    let scores = scorer.forward(tape, subwords)?;
    let scores = tape.transpose(scores);
    let weights = tape.softmax_rows(scores);
    Ok(tape.matmul(weights, subwords)?)
}

/// Starts every query as a noisy copy of its token state and ties the
/// anchor head's source and target projections, with a small identity added
/// to its bilinear term.
fn locality_init<T: Scalar>(store: &mut ParamStore<T>, queries: &Linear, anchor: &DeepBiaffine, d: usize, n: usize) {
    let w = store.get_mut(queries.w).data_mut();
    for j in 0..d {
        for i in 0..n {
            let k = j * n * d + i * d + j;
            w[k] = w[k] + T::lit(1.0);
        }
    }
    let source = store.get(anchor.source.w).clone();
    *store.get_mut(anchor.target.w) = source;
    let u = store.get_mut(anchor.u);
    let h = u.shape()[0];
    let data = u.data_mut();
    for j in 0..h {
        data[j * h + j] = data[j * h + j] + T::lit(0.1);
    }
}

impl Parser {
    /// Builds the parser and its freshly initialized parameters. The
    /// parameter layout depends only on the configuration.
    pub fn new<T: Scalar>(config: ModelConfig) -> Result<(Parser, ParamStore<T>), ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let d = config.d_model;
        let ffn = 4 * d;
        let heads = config.n_heads;

        let encoder = match config.encoder {
            EncoderKind::Toy { buckets, layers } => {
                let table = store.add_normal(
                    "encoder.embedding",
                    ParamGroup::Encoder,
                    &[buckets, d],
                    1.0,
                    &mut rng,
                );
                let scorer = Linear::new(&mut store, "encoder.subword_scorer", ParamGroup::Encoder, d, 1, &mut rng);
                let layers = (0..layers)
                    .map(|i| {
                        AttentionBlock::new(
                            &mut store,
                            &format!("encoder.layer{i}"),
                            ParamGroup::Encoder,
                            d,
                            heads,
                            ffn,
                            1000 * (i as u64 + 1),
                            &mut rng,
                        )
                    })
                    .collect();
                Encoder::Toy {
                    table,
                    buckets,
                    scorer,
                    layers,
                }
            }
            EncoderKind::External { width } => Encoder::External {
                width,
                projection: Linear::new(&mut store, "encoder.projection", ParamGroup::Encoder, width, d, &mut rng),
            },
        };

        let n = config.n_queries_per_token;
        let queries = Linear::new(&mut store, "query_generator", ParamGroup::Decoder, d, n * d, &mut rng);
        let decoder = (0..config.n_decoder_layers)
            .map(|i| {
                AttentionBlock::new(
                    &mut store,
                    &format!("decoder.layer{i}"),
                    ParamGroup::Decoder,
                    d,
                    heads,
                    ffn,
                    100_000 + 1000 * i as u64,
                    &mut rng,
                )
            })
            .collect();
        let labels = config.labels();
        let node = Linear::new(&mut store, "head.node", ParamGroup::Decoder, d, 1, &mut rng);
        let anchor = DeepBiaffine::new(&mut store, "head.anchor", d, d, config.hidden_size_anchor, 1, 200_000, &mut rng);
        let edge_presence = DeepBiaffine::new(
            &mut store,
            "head.edge_presence",
            d,
            d,
            config.hidden_size_edge_presence,
            1,
            200_010,
            &mut rng,
        );
        let edge_label = DeepBiaffine::new(
            &mut store,
            "head.edge_label",
            d,
            d,
            config.hidden_size_edge_label,
            labels.len(),
            200_020,
            &mut rng,
        );
        let top = store.add_normal("head.top", ParamGroup::Decoder, &[1, d], 1.0, &mut rng);
        locality_init(&mut store, &queries, &anchor, d, n);

        let label_index: BTreeMap<String, usize> =
            labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        let type_labels = config.event_types.iter().map(|l| label_index[l]).collect();
        let role_labels = config.roles.iter().map(|l| label_index[l]).collect();
        Ok((
            Parser {
                config,
                labels,
                label_index,
                type_labels,
                role_labels,
                encoder,
                queries,
                decoder,
                node,
                anchor,
                edge_presence,
                edge_label,
                top,
            },
            store,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label_id(&self, label: &str) -> Option<usize> {
        self.label_index.get(label).copied()
    }

    fn dropout_rates(&self) -> DropoutRates {
        DropoutRates {
            hidden: self.config.dropout_transformer,
            attention: self.config.dropout_transformer_attention,
        }
    }

    /// Contextual token embeddings `(T, d_model)`.
    pub fn embed_sentence<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        sentence: &Sentence,
        external: Option<&ExternalEmbeddings>,
    ) -> Result<Var, ModelError> {
        if sentence.tokens.is_empty() {
            return Err(ModelError::EmptySentence(sentence.id.clone()));
        }
        match &self.encoder {
            Encoder::Toy {
                table,
                buckets,
                scorer,
                layers,
            } => {
                let table = tape.param(*table);
                let index: Vec<usize> = sentence
                    .tokens
                    .iter()
                    .flat_map(|token| {
                        subword_pieces(token)
                            .into_iter()
                            .zip(SUBWORD_SALTS)
                            .map(|(piece, salt)| (fnv1a(salt, &piece) % *buckets as u64) as usize)
                    })
                    .collect();
                let pieces = tape.gather_rows(table, &index)?;
                let per_token = SUBWORD_SALTS.len();
                let mut rows = Vec::with_capacity(sentence.len());
                for t in 0..sentence.len() {
                    let own: Vec<usize> = (t * per_token..(t + 1) * per_token).collect();
                    let subwords = tape.gather_rows(pieces, &own)?;
                    rows.push(pool_subwords(tape, subwords, scorer)?);
                }
                let mut x = tape.concat_rows(&rows)?;
                for (i, layer) in layers.iter().enumerate() {
                    x = layer.forward(tape, x, i == 0, self.dropout_rates())?;
                }
                Ok(x)
            }
            Encoder::External { width, projection } => {
                let source = external.ok_or_else(|| ModelError::NoEmbeddingSource(sentence.id.clone()))?;
                let vectors = source
                    .get(&sentence.id)
                    .ok_or_else(|| ModelError::MissingEmbedding(sentence.id.clone()))?;
                let bad_width = vectors.iter().find(|v| v.len() != *width).map(Vec::len);
                if vectors.len() != sentence.len() || bad_width.is_some() {
                    return Err(ModelError::EmbeddingShape {
                        id: sentence.id.clone(),
                        expected: sentence.len(),
                        width: *width,
                        found_rows: vectors.len(),
                        found_width: bad_width.unwrap_or(*width),
                    });
                }
                let data = vectors.iter().flatten().map(|&v| T::lit(v as f64)).collect();
                let x = tape.constant(Tensor::from_vec(&[sentence.len(), *width], data)?);
                Ok(projection.forward(tape, x)?)
            }
        }
    }

    /// One linear map `d → n·d` per token, reshaped so that query `i` of
    /// token `t` is row `t·n + i`.
    pub fn generate_queries<T: Scalar>(&self, tape: &mut Tape<'_, T>, tokens: Var) -> Result<Var, ModelError> {
        let t = tape.value(tokens).rows();
        let q = self.queries.forward(tape, tokens)?;
        Ok(tape.reshape(q, &[t * self.config.n_queries_per_token, self.config.d_model])?)
    }

    pub fn run_decoder<T: Scalar>(&self, tape: &mut Tape<'_, T>, queries: Var) -> Result<Var, ModelError> {
        let mut x = queries;
        for layer in &self.decoder {
            x = layer.forward(tape, x, false, self.dropout_rates())?;
        }
        Ok(x)
    }

    pub fn score_heads<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        augmented: Var,
        tokens: Var,
    ) -> Result<OutputVars, ModelError> {
        let q = tape.value(augmented).rows();
        let t = tape.value(tokens).rows();
        let drop = self.config.dropout_transformer;
        let presence = self.node.forward(tape, augmented)?;
        let node_presence = tape.reshape(presence, &[q])?;
        let anchors = self.anchor.forward(tape, augmented, tokens, drop)?;
        let anchors = tape.reshape(anchors, &[q, t])?;
        let top = tape.param(self.top);
        let sources = tape.concat_rows(&[top, augmented])?;
        let edge_presence = self.edge_presence.forward(tape, sources, augmented, drop)?;
        let edge_presence = tape.reshape(edge_presence, &[q + 1, q])?;
        let edge_labels = self.edge_label.forward(tape, sources, augmented, drop)?;
        Ok(OutputVars {
            node_presence,
            anchors,
            edge_presence,
            edge_labels,
        })
    }

    /// Full forward pass for one sentence.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        sentence: &Sentence,
        external: Option<&ExternalEmbeddings>,
    ) -> Result<OutputVars, ModelError> {
        let tokens = self.embed_sentence(tape, sentence, external)?;
        let queries = self.generate_queries(tape, tokens)?;
        let augmented = self.run_decoder(tape, queries)?;
        self.score_heads(tape, augmented, tokens)
    }

    /// Translates a gold graph into per-node anchor masks and labeled
    /// edges over node positions. Nodes are ordered by (anchors, event type)
    /// and edges by position, so the result does not depend on the order of
    /// nodes or edges in `graph`.
    pub fn gold_targets(&self, graph: &EventGraph, n_tokens: usize) -> Result<GoldTargets, ModelError> {
        let top_label = |id: NodeId| {
            graph
                .edges
                .iter()
                .find(|e| e.source == graph.top && e.target == id)
                .map(|e| e.label.as_str())
        };
        let mut nodes: Vec<&Node> = graph.nodes.iter().filter(|n| n.id != graph.top).collect();
        nodes.sort_by(|a, b| (&a.anchors, top_label(a.id)).cmp(&(&b.anchors, top_label(b.id))));
        let position: HashMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
        let anchors = nodes
            .iter()
            .map(|n| {
                let mut mask = vec![false; n_tokens];
                for s in &n.anchors {
                    for m in mask.iter_mut().take(s.end.min(n_tokens)).skip(s.start) {
                        *m = true;
                    }
                }
                mask
            })
            .collect();
        let mut edges = Vec::with_capacity(graph.edges.len());
        for e in &graph.edges {
            let label = self
                .label_id(&e.label)
                .ok_or_else(|| ModelError::UnknownLabel(e.label.clone()))?;
            let source = if e.source == graph.top {
                None
            } else {
                Some(position[&e.source])
            };
            edges.push(GoldEdge {
                source,
                target: position[&e.target],
                label,
            });
        }
        edges.sort_by_key(|e| (e.source, e.target, e.label));
        Ok(GoldTargets { anchors, edges })
    }

    /// Injective gold-node → query assignment minimizing presence plus
    /// anchor cost. Gold nodes with identical anchors have identical costs;
    /// among those equal-cost choices the one with the lowest edge loss is
    /// kept.
    pub fn match_targets<T: Scalar>(
        &self,
        output: &ParseOutput<T>,
        gold: &GoldTargets,
    ) -> Result<Assignment, ModelError> {
        let mut assignment = hungarian(&matching_cost(output, gold))?;
        let mut start = 0;
        while start < gold.n_nodes() {
            let mut end = start + 1;
            while end < gold.n_nodes() && gold.anchors[end] == gold.anchors[start] {
                end += 1;
            }
            if (2..=MAX_TIE_GROUP).contains(&(end - start)) {
                let cols: Vec<usize> = assignment.row_to_col[start..end].to_vec();
                let mut best = (edge_cost(output, gold, &assignment.row_to_col, self.config.loss_weights), cols.clone());
                for perm in cols.iter().copied().permutations(cols.len()) {
                    assignment.row_to_col[start..end].copy_from_slice(&perm);
                    let cost = edge_cost(output, gold, &assignment.row_to_col, self.config.loss_weights);
                    if cost < best.0 {
                        best = (cost, perm);
                    }
                }
                assignment.row_to_col[start..end].copy_from_slice(&best.1);
            }
            start = end;
        }
        Ok(assignment)
    }

    /// Weighted training loss and its terms.
    pub fn training_loss<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        vars: &OutputVars,
        gold: &GoldTargets,
        assignment: &Assignment,
    ) -> Result<(Var, LossTerms), ModelError> {
        let q = tape.value(vars.node_presence).len();
        let t = tape.value(vars.anchors).cols();
        let l = self.labels.len();
        let matched = &assignment.row_to_col;

        let mut node_targets = vec![T::zero(); q];
        for &col in matched {
            node_targets[col] = T::one();
        }
        let node = tape.bce_with_logits(vars.node_presence, &node_targets, &vec![true; q])?;

        let mut anchor_targets = vec![T::zero(); q * t];
        let mut anchor_mask = vec![false; q * t];
        for (g, &col) in matched.iter().enumerate() {
            for tok in 0..t {
                anchor_mask[col * t + tok] = true;
                if gold.anchors[g][tok] {
                    anchor_targets[col * t + tok] = T::one();
                }
            }
        }
        let anchor = tape.bce_with_logits(vars.anchors, &anchor_targets, &anchor_mask)?;

        // Edge rows: 0 is top, query q sits at row q + 1.
        let row_of = |src: Option<usize>| src.map_or(0, |g| matched[g] + 1);
        let mut sources = vec![0usize];
        sources.extend(matched.iter().map(|&c| c + 1));
        let mut edge_targets = vec![T::zero(); (q + 1) * q];
        let mut edge_mask = vec![false; (q + 1) * q];
        for &row in &sources {
            for &col in matched {
                if row != col + 1 {
                    edge_mask[row * q + col] = true;
                }
            }
        }
        let mut label_targets = Vec::with_capacity(gold.edges.len());
        for e in &gold.edges {
            let cell = row_of(e.source) * q + matched[e.target];
            edge_targets[cell] = T::one();
            label_targets.push((cell, e.label));
        }
        let edge_presence = tape.bce_with_logits(vars.edge_presence, &edge_targets, &edge_mask)?;
        let edge_label = tape.softmax_ce(vars.edge_labels, l, &label_targets)?;

        let w = self.config.loss_weights;
        let total = tape.weighted_sum(&[
            (node, T::lit(w.node)),
            (anchor, T::lit(w.anchor)),
            (edge_presence, T::lit(w.edge_presence)),
            (edge_label, T::lit(w.edge_label)),
        ]);
        let f = |v: Var| tape.value(v).item().as_f64();
        let terms = LossTerms {
            total: f(total),
            node: f(node),
            anchor: f(anchor),
            edge_presence: f(edge_presence),
            edge_label: f(edge_label),
        };
        Ok((total, terms))
    }

    /// Classifier outputs for a sentence without dropout.
    pub fn parse<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        sentence: &Sentence,
        external: Option<&ExternalEmbeddings>,
    ) -> Result<ParseOutput<T>, ModelError> {
        let mut tape = Tape::new(store);
        let vars = self.forward(&mut tape, sentence, external)?;
        Ok(vars.values(&tape))
    }

    pub fn predict_graph<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        sentence: &Sentence,
        external: Option<&ExternalEmbeddings>,
    ) -> Result<EventGraph, ModelError> {
        let output = self.parse(store, sentence, external)?;
        Ok(self.decode_output(&output, sentence))
    }

    /// Deterministic decoding of classifier outputs into a valid graph.
    pub fn decode_output<T: Scalar>(&self, output: &ParseOutput<T>, sentence: &Sentence) -> EventGraph {
        let threshold = self.config.threshold;
        let on = |x: T| sigmoid(x).as_f64() > threshold;
        let q = output.n_queries();
        let t = output.n_tokens();
        let l = output.n_labels();

        // (1) presence and (2) anchors
        let mut spans: Vec<Option<Span>> = vec![None; q];
        for (qi, span) in spans.iter_mut().enumerate() {
            if !on(output.node_presence.data()[qi]) {
                continue;
            }
            *span = longest_run((0..t).map(|tok| on(output.anchors.at(qi, tok))));
        }

        let argmax = |row: usize, col: usize, allowed: &[usize]| -> usize {
            let base = (row * q + col) * l;
            let mut best = allowed[0];
            for &c in allowed {
                if output.edge_labels.data()[base + c] > output.edge_labels.data()[base + best] {
                    best = c;
                }
            }
            best
        };

        // (3) top edges pick triggers, then trigger → node edges
        let mut trigger_type: Vec<Option<usize>> = vec![None; q];
        for qi in 0..q {
            if spans[qi].is_some() && on(output.edge_presence.at(0, qi)) {
                trigger_type[qi] = Some(argmax(0, qi, &self.type_labels));
            }
        }
        let mut arg_edges: Vec<(usize, usize, usize)> = Vec::new();
        if !self.role_labels.is_empty() {
            for s in (0..q).filter(|&s| trigger_type[s].is_some()) {
                for tq in 0..q {
                    if tq == s || spans[tq].is_none() || trigger_type[tq].is_some() {
                        continue;
                    }
                    if on(output.edge_presence.at(s + 1, tq)) {
                        arg_edges.push((s, tq, argmax(s + 1, tq, &self.role_labels)));
                    }
                }
            }
        }

        // (4) keep triggers and attached arguments, merging duplicate nodes
        let mut graph = EventGraph::empty(sentence.id.clone());
        let mut trigger_node: BTreeMap<(Span, usize), NodeId> = BTreeMap::new();
        let mut query_trigger: Vec<Option<NodeId>> = vec![None; q];
        for qi in 0..q {
            if let (Some(span), Some(ty)) = (spans[qi], trigger_type[qi]) {
                let next = graph.nodes.len();
                let id = *trigger_node.entry((span, ty)).or_insert_with(|| {
                    graph.nodes.push(Node::new(next, [span]));
                    graph.edges.push(Edge {
                        source: graph.top,
                        target: next,
                        label: self.labels[ty].clone(),
                    });
                    next
                });
                query_trigger[qi] = Some(id);
            }
        }
        let mut arg_node: BTreeMap<Span, NodeId> = BTreeMap::new();
        let mut seen = std::collections::BTreeSet::new();
        for (s, tq, role) in arg_edges {
            let span = spans[tq].expect("kept node");
            let next = graph.nodes.len();
            let target = *arg_node.entry(span).or_insert_with(|| {
                graph.nodes.push(Node::new(next, normalize_anchors([span])));
                next
            });
            let source = query_trigger[s].expect("trigger");
            if seen.insert((source, target, role)) {
                graph.edges.push(Edge {
                    source,
                    target,
                    label: self.labels[role].clone(),
                });
            }
        }
        debug_assert!(graph.validate_for(sentence).is_ok(), "{:?}", graph.validate_for(sentence));
        graph
    }
}

/// Longest run of `true`, earliest on ties.
fn longest_run(mask: impl Iterator<Item = bool>) -> Option<Span> {
    let mut best: Option<Span> = None;
    let mut start = None;
    let mut i = 0;
    for (idx, on) in mask.enumerate() {
        i = idx + 1;
        match (on, start) {
            (true, None) => start = Some(idx),
            (false, Some(s)) => {
                if best.is_none_or(|b| idx - s > b.len()) {
                    best = Some(Span { start: s, end: idx });
                }
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        if best.is_none_or(|b| i - s > b.len()) {
            best = Some(Span { start: s, end: i });
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoldEdge {
    /// Gold node position, or `None` for the top node.
    pub source: Option<usize>,
    pub target: usize,
    pub label: usize,
}

/// Gold graph in node positions (top excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct GoldTargets {
    pub anchors: Vec<Vec<bool>>,
    pub edges: Vec<GoldEdge>,
}

impl GoldTargets {
    pub fn n_nodes(&self) -> usize {
        self.anchors.len()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub node: f64,
    pub anchor: f64,
    pub edge_presence: f64,
    pub edge_label: f64,
}

impl std::ops::AddAssign for LossTerms {
    fn add_assign(&mut self, o: LossTerms) {
        self.total += o.total;
        self.node += o.node;
        self.anchor += o.anchor;
        self.edge_presence += o.edge_presence;
        self.edge_label += o.edge_label;
    }
}

impl LossTerms {
    pub fn scaled(self, s: f64) -> LossTerms {
        LossTerms {
            total: self.total * s,
            node: self.node * s,
            anchor: self.anchor * s,
            edge_presence: self.edge_presence * s,
            edge_label: self.edge_label * s,
        }
    }
}

fn bce(x: f64, target: bool) -> f64 {
    let t = if target { 1.0 } else { 0.0 };
    x.max(0.0) - x * t + (1.0 + (-x.abs()).exp()).ln()
}

/// Largest group of same-anchor gold nodes whose query order is refined.
const MAX_TIE_GROUP: usize = 5;

/// Weighted edge-presence and edge-label loss under an assignment.
fn edge_cost<T: Scalar>(output: &ParseOutput<T>, gold: &GoldTargets, matched: &[usize], w: LossWeights) -> f64 {
    let q = output.n_queries();
    let l = output.n_labels();
    let row_of = |src: Option<usize>| src.map_or(0, |g| matched[g] + 1);
    let mut positive = std::collections::HashSet::new();
    let mut label_cost = 0.0;
    for e in &gold.edges {
        let (row, col) = (row_of(e.source), matched[e.target]);
        positive.insert((row, col));
        let logits = &output.edge_labels.data()[(row * q + col) * l..(row * q + col + 1) * l];
        let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let lse = max + logits.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
        label_cost += lse - logits[e.label].as_f64();
    }
    let (mut presence_cost, mut pairs) = (0.0, 0usize);
    let sources = std::iter::once(0).chain(matched.iter().map(|&c| c + 1));
    for row in sources {
        for &col in matched {
            if row != col + 1 {
                let target = positive.contains(&(row, col));
                presence_cost += bce(output.edge_presence.at(row, col).as_f64(), target);
                pairs += 1;
            }
        }
    }
    w.edge_presence * presence_cost / pairs.max(1) as f64 + w.edge_label * label_cost / gold.edges.len().max(1) as f64
}

/// `cost[g][q]`: presence BCE towards 1 plus mean anchor BCE against the
/// gold node's token mask.
pub fn matching_cost<T: Scalar>(output: &ParseOutput<T>, gold: &GoldTargets) -> Vec<Vec<f64>> {
    let q = output.n_queries();
    let t = output.n_tokens();
    let f = |v: T| v.as_f64();
    gold.anchors
        .iter()
        .map(|mask| {
            (0..q)
                .map(|qi| {
                    let presence = bce(f(output.node_presence.data()[qi]), true);
                    let anchor = (0..t)
                        .map(|tok| bce(f(output.anchors.at(qi, tok)), mask[tok]))
                        .sum::<f64>()
                        / t.max(1) as f64;
                    presence + anchor
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn longest_run_prefers_earliest() {
        let m = |v: &[u8]| longest_run(v.iter().map(|&b| b == 1));
        assert_eq!(m(&[0, 1, 1, 0, 1, 1]), Some(Span { start: 1, end: 3 }));
        assert_eq!(m(&[1, 0, 1, 1, 1]), Some(Span { start: 2, end: 5 }));
        assert_eq!(m(&[0, 0]), None);
        assert_eq!(m(&[1]), Some(Span { start: 0, end: 1 }));
    }

    #[test]
    fn pieces() {
        assert_eq!(subword_pieces("died"), ["died".to_string(), "<die".into(), "ied>".into()]);
        assert_eq!(subword_pieces("a"), ["a".to_string(), "<a".into(), "a>".into()]);
    }

    #[test]
    fn config_checks() {
        let base = ModelConfig {
            event_types: vec!["E".into()],
            ..Default::default()
        };
        assert!(base.validate().is_ok());
        assert!(ModelConfig::default().validate().is_err());
        let bad = ModelConfig {
            d_model: 30,
            ..base.clone()
        };
        assert!(bad.validate().is_err());
        assert_eq!(base.hash(), base.clone().hash());
        let other = ModelConfig {
            init_seed: 3,
            ..base.clone()
        };
        assert_ne!(base.hash(), other.hash());
    }
}
