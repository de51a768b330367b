//! Line-delimited JSON readers and writers for mention corpora and event
//! graphs.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    Argument, Edge, EventGraph, EventMention, GraphError, Node, Sentence, Span, Violation,
};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: malformed JSON: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line}: {source}")]
    Invalid { line: usize, source: GraphError },
    #[error("line {line}: invalid graph: {source}")]
    Violation { line: usize, source: Violation },
    #[error("line {line}: duplicate sentence id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: label `{label}` is not in the ontology")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: graph must have exactly one top node, found {found}")]
    TopCount { line: usize, found: usize },
    #[error("ontology file: {0}")]
    Ontology(serde_json::Error),
}

/// Event types and argument roles known to a corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ontology {
    pub event_types: BTreeSet<String>,
    pub roles: BTreeSet<String>,
}

impl Ontology {
    pub fn from_mentions<'a>(mentions: impl IntoIterator<Item = &'a EventMention>) -> Self {
        let mut ontology = Ontology::default();
        for m in mentions {
            ontology.observe(m);
        }
        ontology
    }

    pub fn observe(&mut self, mention: &EventMention) {
        self.event_types.insert(mention.event_type.clone());
        for a in &mention.arguments {
            self.roles.insert(a.role.clone());
        }
    }

    /// First label of `mention` missing from this ontology.
    pub fn unknown_label<'a>(&self, mention: &'a EventMention) -> Option<&'a str> {
        if !self.event_types.contains(&mention.event_type) {
            return Some(&mention.event_type);
        }
        mention
            .arguments
            .iter()
            .find(|a| !self.roles.contains(&a.role))
            .map(|a| a.role.as_str())
    }

    pub fn merge(&mut self, other: &Ontology) {
        self.event_types.extend(other.event_types.iter().cloned());
        self.roles.extend(other.roles.iter().cloned());
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let file = File::open(path)?;
        serde_json::from_reader(BufReader::new(file)).map_err(CorpusError::Ontology)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub sentence: Sentence,
    pub mentions: Vec<EventMention>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub examples: Vec<Example>,
    pub ontology: Ontology,
}

impl Corpus {
    /// Builds a corpus, inferring the ontology from the mentions.
    pub fn new(examples: Vec<Example>) -> Self {
        let ontology = Ontology::from_mentions(examples.iter().flat_map(|e| &e.mentions));
        Corpus { examples, ontology }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn event_count(&self) -> usize {
        self.examples.iter().map(|e| e.mentions.len()).sum()
    }

    pub fn sentences(&self) -> impl Iterator<Item = &Sentence> {
        self.examples.iter().map(|e| &e.sentence)
    }

    /// Same sentences with every mention removed.
    pub fn without_mentions(&self) -> Corpus {
        Corpus {
            examples: self
                .examples
                .iter()
                .map(|e| Example {
                    sentence: e.sentence.clone(),
                    mentions: Vec::new(),
                })
                .collect(),
            ontology: self.ontology.clone(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TriggerRecord {
    start: usize,
    end: usize,
    #[serde(rename = "type")]
    event_type: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArgumentRecord {
    start: usize,
    end: usize,
    role: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct EventRecord {
    trigger: TriggerRecord,
    #[serde(default)]
    arguments: Vec<ArgumentRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SentenceRecord {
    sent_id: String,
    tokens: Vec<String>,
    #[serde(default)]
    events: Vec<EventRecord>,
}

impl SentenceRecord {
    fn from_example(example: &Example) -> Self {
        SentenceRecord {
            sent_id: example.sentence.id.clone(),
            tokens: example.sentence.tokens.clone(),
            events: example
                .mentions
                .iter()
                .map(|m| EventRecord {
                    trigger: TriggerRecord {
                        start: m.trigger.start,
                        end: m.trigger.end,
                        event_type: m.event_type.clone(),
                    },
                    arguments: m
                        .arguments
                        .iter()
                        .map(|a| ArgumentRecord {
                            start: a.span.start,
                            end: a.span.end,
                            role: a.role.clone(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    fn into_example(self) -> Result<Example, GraphError> {
        let sentence = Sentence::new(self.sent_id, self.tokens)?;
        let n = sentence.len();
        let mut mentions = Vec::with_capacity(self.events.len());
        for ev in self.events {
            let trigger = bounded_span(ev.trigger.start, ev.trigger.end, n)?;
            let mut mention = EventMention::new(trigger, ev.trigger.event_type);
            for a in ev.arguments {
                mention.arguments.push(Argument {
                    role: a.role,
                    span: bounded_span(a.start, a.end, n)?,
                });
            }
            mention.check(n)?;
            mentions.push(mention);
        }
        Ok(Example { sentence, mentions })
    }
}

fn bounded_span(start: usize, end: usize, n_tokens: usize) -> Result<Span, GraphError> {
    if start >= end || end > n_tokens {
        return Err(GraphError::OutOfBounds {
            span: Span { start, end },
            n_tokens,
        });
    }
    Ok(Span { start, end })
}

/// Line-delimited JSON record for one sentence, as a string without the
/// trailing newline.
pub fn example_to_json(example: &Example) -> String {
    serde_json::to_string(&SentenceRecord::from_example(example)).expect("serializable record")
}

/// Parses a corpus from any reader. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_corpus(
    reader: impl BufRead,
    ontology: Option<&Ontology>,
) -> Result<Corpus, CorpusError> {
    let mut examples = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SentenceRecord = serde_json::from_str(&line).map_err(|source| {
            CorpusError::Json {
                line: line_no,
                source,
            }
        })?;
        let example = record.into_example().map_err(|source| CorpusError::Invalid {
            line: line_no,
            source,
        })?;
        if !ids.insert(example.sentence.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: line_no,
                id: example.sentence.id,
            });
        }
        if let Some(ont) = ontology {
            if let Some(label) = example.mentions.iter().find_map(|m| ont.unknown_label(m)) {
                return Err(CorpusError::UnknownLabel {
                    line: line_no,
                    label: label.to_owned(),
                });
            }
        }
        examples.push(example);
    }
    let mut corpus = Corpus::new(examples);
    if let Some(ont) = ontology {
        corpus.ontology.merge(ont);
    }
    Ok(corpus)
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    parse_corpus(BufReader::new(File::open(path)?), None)
}

/// Reads a corpus whose labels must all appear in `ontology`.
pub fn read_corpus_with_ontology(
    path: impl AsRef<Path>,
    ontology: &Ontology,
) -> Result<Corpus, CorpusError> {
    parse_corpus(BufReader::new(File::open(path)?), Some(ontology))
}

pub fn write_corpus_to(corpus: &Corpus, mut writer: impl Write) -> io::Result<()> {
    for example in &corpus.examples {
        writer.write_all(example_to_json(example).as_bytes())?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    write_corpus_to(corpus, BufWriter::new(File::create(path)?))?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct AnchorRecord {
    start: usize,
    end: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeRecord {
    id: usize,
    #[serde(default)]
    anchors: Vec<AnchorRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphRecord {
    id: String,
    tops: Vec<usize>,
    nodes: Vec<NodeRecord>,
    #[serde(default)]
    edges: Vec<Edge>,
}

impl GraphRecord {
    fn from_graph(graph: &EventGraph) -> Self {
        GraphRecord {
            id: graph.sentence_id.clone(),
            tops: vec![graph.top],
            nodes: graph
                .nodes
                .iter()
                .map(|n| NodeRecord {
                    id: n.id,
                    anchors: n
                        .anchors
                        .iter()
                        .map(|s| AnchorRecord {
                            start: s.start,
                            end: s.end,
                        })
                        .collect(),
                })
                .collect(),
            edges: graph.edges.clone(),
        }
    }
}

pub fn graph_to_json(graph: &EventGraph) -> String {
    serde_json::to_string(&GraphRecord::from_graph(graph)).expect("serializable record")
}

/// Parses one graph line and checks the structural invariants that do not
/// need the sentence.
pub fn graph_from_json(line: &str, line_no: usize) -> Result<EventGraph, CorpusError> {
    let record: GraphRecord = serde_json::from_str(line).map_err(|source| CorpusError::Json {
        line: line_no,
        source,
    })?;
    if record.tops.len() != 1 {
        return Err(CorpusError::TopCount {
            line: line_no,
            found: record.tops.len(),
        });
    }
    let mut nodes = Vec::with_capacity(record.nodes.len());
    for n in record.nodes {
        let mut anchors = Vec::with_capacity(n.anchors.len());
        for a in n.anchors {
            anchors.push(Span::new(a.start, a.end).map_err(|source| CorpusError::Invalid {
                line: line_no,
                source,
            })?);
        }
        nodes.push(Node::new(n.id, anchors));
    }
    let graph = EventGraph {
        sentence_id: record.id,
        nodes,
        edges: record.edges,
        top: record.tops[0],
    };
    graph.validate().map_err(|source| CorpusError::Violation {
        line: line_no,
        source,
    })?;
    Ok(graph)
}

pub fn parse_graphs(reader: impl BufRead) -> Result<Vec<EventGraph>, CorpusError> {
    let mut graphs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        graphs.push(graph_from_json(&line, i + 1)?);
    }
    Ok(graphs)
}

pub fn read_graphs(path: impl AsRef<Path>) -> Result<Vec<EventGraph>, CorpusError> {
    parse_graphs(BufReader::new(File::open(path)?))
}

pub fn write_graphs_to(graphs: &[EventGraph], mut writer: impl Write) -> io::Result<()> {
    for g in graphs {
        writer.write_all(graph_to_json(g).as_bytes())?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn write_graphs(graphs: &[EventGraph], path: impl AsRef<Path>) -> Result<(), CorpusError> {
    write_graphs_to(graphs, BufWriter::new(File::create(path)?))?;
    Ok(())
}

/// Which of the two line formats a JSON line uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineSchema {
    Mentions,
    Graph,
}

/// Sniffs the schema of the first non-blank line: graph lines carry `tops`,
/// mention lines carry `sent_id`.
pub fn detect_schema(first_line: &str) -> Option<LineSchema> {
    let value: serde_json::Value = serde_json::from_str(first_line).ok()?;
    let obj = value.as_object()?;
    if obj.contains_key("tops") {
        Some(LineSchema::Graph)
    } else if obj.contains_key("sent_id") {
        Some(LineSchema::Mentions)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::encode_graph;

    const FRIENDLY_FIRE: &str = r#"{"sent_id":"ff","tokens":["A","Kurdish","journalist","died","in","a","U.S.","friendly-fire","accident","in","the","north","."],"events":[{"trigger":{"start":3,"end":4,"type":"Die"},"arguments":[{"start":6,"end":7,"role":"Agent"}]},{"trigger":{"start":7,"end":8,"type":"Attack"},"arguments":[{"start":6,"end":7,"role":"Attacker"}]}]}"#;

    #[test]
    fn reads_shared_argument_line() {
        let corpus = parse_corpus(FRIENDLY_FIRE.as_bytes(), None).unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(corpus.event_count(), 2);
        assert_eq!(
            corpus.ontology.event_types,
            ["Attack", "Die"].iter().map(|s| s.to_string()).collect()
        );
        assert_eq!(example_to_json(&corpus.examples[0]), FRIENDLY_FIRE);
    }

    #[test]
    fn empty_input_is_empty_corpus() {
        let corpus = parse_corpus("".as_bytes(), None).unwrap();
        assert!(corpus.is_empty());
        assert!(corpus.ontology.event_types.is_empty());
    }

    #[test]
    fn out_of_bounds_trigger_names_line() {
        let bad = r#"{"sent_id":"b","tokens":["a","b"],"events":[{"trigger":{"start":1,"end":3,"type":"X"},"arguments":[]}]}"#;
        let input = format!("{FRIENDLY_FIRE}\n{bad}\n");
        let err = parse_corpus(input.as_bytes(), None).unwrap_err();
        assert!(matches!(
            err,
            CorpusError::Invalid {
                line: 2,
                source: GraphError::OutOfBounds { .. }
            }
        ));
        assert!(err.to_string().starts_with("line 2:"));
    }

    #[test]
    fn malformed_json_and_duplicate_ids() {
        let err = parse_corpus("{not json".as_bytes(), None).unwrap_err();
        assert!(matches!(err, CorpusError::Json { line: 1, .. }));
        let input = format!("{FRIENDLY_FIRE}\n\n{FRIENDLY_FIRE}\n");
        let err = parse_corpus(input.as_bytes(), None).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateId { line: 3, .. }));
    }

    #[test]
    fn explicit_ontology_rejects_unseen_labels() {
        let ont = Ontology {
            event_types: ["Die".to_string()].into(),
            roles: ["Agent".to_string(), "Attacker".to_string()].into(),
        };
        let err = parse_corpus(FRIENDLY_FIRE.as_bytes(), Some(&ont)).unwrap_err();
        assert!(matches!(err, CorpusError::UnknownLabel { ref label, .. } if label == "Attack"));
    }

    #[test]
    fn graph_lines_are_byte_stable() {
        let corpus = parse_corpus(FRIENDLY_FIRE.as_bytes(), None).unwrap();
        let ex = &corpus.examples[0];
        let g = encode_graph(&ex.sentence, &ex.mentions).unwrap();
        let once = graph_to_json(&g);
        let back = graph_from_json(&once, 1).unwrap();
        assert_eq!(back, g);
        assert_eq!(graph_to_json(&back), once);
        assert_eq!(detect_schema(&once), Some(LineSchema::Graph));
        assert_eq!(detect_schema(FRIENDLY_FIRE), Some(LineSchema::Mentions));
    }

    #[test]
    fn graph_violations_fail_on_load() {
        let bad = r#"{"id":"x","tops":[0],"nodes":[{"id":0,"anchors":[]},{"id":1,"anchors":[{"start":0,"end":1}]},{"id":2,"anchors":[{"start":1,"end":2}]},{"id":3,"anchors":[{"start":2,"end":3}]}],"edges":[{"source":0,"target":1,"label":"E"},{"source":1,"target":2,"label":"R"},{"source":2,"target":3,"label":"R"}]}"#;
        let err = parse_graphs(format!("\n{bad}").as_bytes()).unwrap_err();
        assert!(matches!(
            err,
            CorpusError::Violation {
                line: 2,
                source: Violation::BadEdgeSource { .. }
            }
        ));
        let two_tops = r#"{"id":"x","tops":[0,1],"nodes":[{"id":0},{"id":1}],"edges":[]}"#;
        assert!(matches!(
            parse_graphs(two_tops.as_bytes()).unwrap_err(),
            CorpusError::TopCount { found: 2, .. }
        ));
    }
}
