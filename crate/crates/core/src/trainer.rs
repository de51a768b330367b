//! Deterministic training loop, evaluation, and model selection.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{check_vocabulary, Checkpoint, CheckpointError};
use crate::corpus::{Corpus, Example};
use crate::graph::{decode_graph, encode_graph, GraphError};
use crate::model::{EncoderKind, ExternalEmbeddings, GoldTargets, LossTerms, ModelConfig, ModelError, Parser};
use crate::scoring::{score_corpus, ScoreError, ScoreReport};
use crate::tensor::{lr_at_step, AdamW, AdamWConfig, Dropout, Gradients, OptimState, ParamGroup, ParamStore, ScheduleError, Tape};

pub const THREADS_ENV: &str = "EVGRAPH_THREADS";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training corpus has no usable sentences")]
    EmptyTrain,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// `None` picks 4e-6 for external encoders and 1e-4 for the toy encoder.
    pub encoder_lr: Option<f64>,
    pub decoder_lr: f64,
    pub encoder_weight_decay: f64,
    pub decoder_weight_decay: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Evaluate on the dev set every this many epochs (and after the last).
    pub eval_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 180,
            encoder_lr: None,
            decoder_lr: 1e-4,
            encoder_weight_decay: 0.1,
            decoder_weight_decay: 1.2e-6,
            warmup_steps: 1000,
            beta1: 0.9,
            beta2: 0.98,
            seed: 0,
            eval_every: 1,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn encoder_lr_for(&self, model: &ModelConfig) -> f64 {
        self.encoder_lr.unwrap_or(match model.encoder {
            EncoderKind::Toy { .. } => 1e-4,
            EncoderKind::External { .. } => 4e-6,
        })
    }

    pub fn steps_per_epoch(&self, n_examples: usize) -> u64 {
        n_examples.div_ceil(self.batch_size.max(1)) as u64
    }

    pub fn validate(&self, n_examples: usize) -> Result<u64, TrainError> {
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every == 0 {
            return Err(TrainError::Config(
                "batch_size, epochs and eval_every must be positive".into(),
            ));
        }
        let total = self.epochs as u64 * self.steps_per_epoch(n_examples);
        if self.warmup_steps >= total {
            return Err(TrainError::Config(format!(
                "warmup_steps {} must be below the {total} total steps",
                self.warmup_steps
            )));
        }
        Ok(total)
    }
}

/// Example order for one epoch; depends only on `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrPoint {
    pub step: u64,
    pub encoder: f64,
    pub decoder: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    /// Mean per-sentence loss terms over the epoch.
    pub loss: LossTerms,
    pub dev: Option<ScoreReport>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub parser: Parser,
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub lr_trace: Vec<LrPoint>,
    /// Training sentences skipped because their gold graph has more nodes
    /// than queries.
    pub rejected: usize,
}

struct Prepared<'a> {
    index: usize,
    example: &'a Example,
    targets: GoldTargets,
}

fn example_gradients(
    parser: &Parser,
    store: &ParamStore<f32>,
    item: &Prepared<'_>,
    dropout: Dropout,
    external: Option<&ExternalEmbeddings>,
) -> Result<(Gradients<f32>, LossTerms), ModelError> {
    let mut tape = Tape::new(store).with_dropout(Some(dropout));
    let vars = parser.forward(&mut tape, &item.example.sentence, external)?;
    let assignment = parser.match_targets(&vars.values(&tape), &item.targets)?;
    let (loss, terms) = parser.training_loss(&mut tape, &vars, &item.targets, &assignment)?;
    Ok((tape.backward(loss).params(&tape), terms))
}

/// Better by Arg-C F1, then Trg-C F1; ties keep the earlier epoch.
fn improves(candidate: &ScoreReport, best: &ScoreReport) -> bool {
    let key = |r: &ScoreReport| (r.arg_c_perfect.f1, r.trg_c.f1);
    key(candidate) > key(best)
}

pub fn train(
    train_corpus: &Corpus,
    dev_corpus: &Corpus,
    model_config: &ModelConfig,
    config: &TrainConfig,
    external: Option<&ExternalEmbeddings>,
) -> Result<TrainOutcome, TrainError> {
    check_vocabulary(model_config, &train_corpus.ontology)?;
    check_vocabulary(model_config, &dev_corpus.ontology)?;
    let (parser, mut store) = Parser::new::<f32>(model_config.clone())?;

    let n_queries = model_config.n_queries_per_token;
    let mut prepared = Vec::with_capacity(train_corpus.len());
    let mut rejected = 0;
    for (index, example) in train_corpus.examples.iter().enumerate() {
        let graph = encode_graph(&example.sentence, &example.mentions)?;
        let targets = parser.gold_targets(&graph, example.sentence.len())?;
        if targets.n_nodes() > example.sentence.len() * n_queries {
            rejected += 1;
            warn!(
                "skipping `{}`: {} gold nodes exceed {} queries",
                example.sentence.id,
                targets.n_nodes(),
                example.sentence.len() * n_queries
            );
            continue;
        }
        prepared.push(Prepared {
            index,
            example,
            targets,
        });
    }
    if rejected > 0 {
        warn!("{rejected} training sentences rejected for exceeding query capacity");
    }
    if prepared.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    let total_steps = config.validate(prepared.len())?;
    let encoder_lr = config.encoder_lr_for(model_config);
    let groups: Vec<ParamGroup> = store.iter().map(|(_, p)| p.group).collect();

    if let Some(dir) = &config.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    // The output location is not part of the run, so checkpoints written to
    // different directories stay byte-identical.
    let recorded = TrainConfig {
        checkpoint_dir: None,
        ..config.clone()
    };
    let hyperparameters = serde_json::to_value(&recorded).expect("serializable config");
    let snapshot = |store: &ParamStore<f32>, step: u64, epoch: usize| Checkpoint {
        config: model_config.clone(),
        hyperparameters: hyperparameters.clone(),
        step,
        epoch,
        params: store.clone(),
    };

    let mut optim = OptimState::new(&store);
    let mut history = Vec::with_capacity(config.epochs);
    let mut lr_trace = Vec::with_capacity(total_steps as usize);
    let mut best: Option<(ScoreReport, Checkpoint)> = None;
    let mut step = 0u64;

    for epoch in 1..=config.epochs {
        let order = epoch_order(config.seed, epoch, prepared.len());
        let mut epoch_loss = LossTerms::default();
        for batch in order.chunks(config.batch_size) {
            let lr = LrPoint {
                step,
                encoder: lr_at_step(step, config.warmup_steps, total_steps, encoder_lr)?,
                decoder: lr_at_step(step, config.warmup_steps, total_steps, config.decoder_lr)?,
            };
            lr_trace.push(lr);
            let results: Vec<_> = batch
                .par_iter()
                .map(|&i| {
                    let item = &prepared[i];
                    let dropout = Dropout {
                        seed: config.seed,
                        step,
                        example: item.index as u64,
                    };
                    example_gradients(&parser, &store, item, dropout, external)
                })
                .collect();
            let mut grads = Gradients::empty(store.len());
            for r in results {
                let (g, terms) = r?;
                grads.merge(g);
                epoch_loss += terms;
            }
            grads.scale(1.0 / batch.len() as f32);
            let adam = |i: usize| {
                let (lr, decay) = match groups[i] {
                    ParamGroup::Encoder => (lr.encoder, config.encoder_weight_decay),
                    ParamGroup::Decoder => (lr.decoder, config.decoder_weight_decay),
                };
                AdamWConfig {
                    lr,
                    beta1: config.beta1,
                    beta2: config.beta2,
                    weight_decay: decay,
                    ..AdamWConfig::default()
                }
            };
            AdamW::step(&mut store, &grads, &mut optim, adam, true)?;
            step += 1;
        }
        let loss = epoch_loss.scaled(1.0 / prepared.len() as f64);

        let evaluate = !dev_corpus.is_empty() && (epoch % config.eval_every == 0 || epoch == config.epochs);
        let dev = if evaluate {
            let (report, _) = evaluate_model(&parser, &store, dev_corpus, external)?;
            Some(report)
        } else {
            None
        };
        info!(
            "epoch {epoch}/{}: loss {:.5}{}",
            config.epochs,
            loss.total,
            dev.map_or(String::new(), |r| format!(
                ", dev Trg-C {:.4} Arg-C {:.4}",
                r.trg_c.f1, r.arg_c_perfect.f1
            ))
        );
        if let Some(report) = dev {
            if best.as_ref().is_none_or(|(b, _)| improves(&report, b)) {
                best = Some((report, snapshot(&store, step, epoch)));
                if let Some(dir) = &config.checkpoint_dir {
                    best.as_ref().unwrap().1.save(dir.join("best.ckpt"))?;
                }
            }
        }
        history.push(EpochRecord {
            epoch,
            steps: step,
            loss,
            dev,
        });
    }

    let best = match best {
        Some((_, ckpt)) => ckpt,
        None => {
            let ckpt = snapshot(&store, step, config.epochs);
            if let Some(dir) = &config.checkpoint_dir {
                ckpt.save(dir.join("best.ckpt"))?;
            }
            ckpt
        }
    };
    if let Some(dir) = &config.checkpoint_dir {
        snapshot(&store, step, config.epochs).save(dir.join("last.ckpt"))?;
        write_history(&history, dir.join("history.jsonl"))?;
    }
    Ok(TrainOutcome {
        parser,
        best,
        history,
        lr_trace,
        rejected,
    })
}

pub fn write_history(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<(), std::io::Error> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for record in history {
        writeln!(w, "{}", serde_json::to_string(record).expect("serializable record"))?;
    }
    w.flush()
}

/// Predicted mentions for every sentence, in corpus order.
pub fn predict_corpus(
    parser: &Parser,
    store: &ParamStore<f32>,
    corpus: &Corpus,
    external: Option<&ExternalEmbeddings>,
) -> Result<Corpus, TrainError> {
    let examples = corpus
        .examples
        .par_iter()
        .map(|ex| {
            let graph = parser.predict_graph(store, &ex.sentence, external)?;
            Ok(Example {
                sentence: ex.sentence.clone(),
                mentions: decode_graph(&graph, &ex.sentence)?,
            })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(Corpus::new(examples))
}

/// Scores the parser's predictions against the gold corpus.
pub fn evaluate_model(
    parser: &Parser,
    store: &ParamStore<f32>,
    gold: &Corpus,
    external: Option<&ExternalEmbeddings>,
) -> Result<(ScoreReport, Corpus), TrainError> {
    let predicted = predict_corpus(parser, store, gold, external)?;
    Ok((score_corpus(&predicted, gold)?, predicted))
}

/// Loads a checkpoint, checks that it knows every label of `gold`, and
/// scores it.
pub fn evaluate_checkpoint(
    path: impl AsRef<Path>,
    gold: &Corpus,
    external: Option<&ExternalEmbeddings>,
) -> Result<ScoreReport, TrainError> {
    let (parser, ckpt) = Checkpoint::load(path)?;
    check_vocabulary(&ckpt.config, &gold.ontology)?;
    Ok(evaluate_model(&parser, &ckpt.params, gold, external)?.0)
}

/// Sizes the global thread pool from `EVGRAPH_THREADS` when set. Returns the
/// number of threads in use.
pub fn init_thread_pool() -> Result<usize, TrainError> {
    if let Ok(value) = std::env::var(THREADS_ENV) {
        let n: usize = value
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| TrainError::Config(format!("{THREADS_ENV} must be a positive integer, got `{value}`")))?;
        // A pool built earlier in the process wins; that is not an error.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}
