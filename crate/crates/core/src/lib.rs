//! Event extraction as labeled-edge semantic graph parsing.

pub mod checkpoint;
pub mod corpus;
pub mod graph;
pub mod matching;
pub mod model;
pub mod scoring;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use corpus::{Corpus, Example, Ontology};
pub use graph::{decode_graph, encode_graph, validate_graph, EventGraph, EventMention, Sentence, Span};
pub use model::{ModelConfig, Parser};
pub use scoring::{ScoreReport, SpanMode};
pub use stats::compute_stats;
pub use synth::gen_synthetic;
pub use trainer::{evaluate_model, train, TrainConfig};
