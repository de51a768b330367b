use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;

/// Length and count statistics over a corpus. Percentages are in `[0, 100]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sentence_count: usize,
    pub event_count: usize,
    pub role_count: usize,
    pub avg_trigger_len: f64,
    pub avg_arg_len: f64,
    pub single_token_arg_pct: f64,
    pub multi_token_arg_pct: f64,
}

pub fn compute_stats(corpus: &Corpus) -> CorpusStats {
    let mut stats = CorpusStats {
        sentence_count: corpus.len(),
        ..Default::default()
    };
    let mut trigger_tokens = 0usize;
    let mut arg_tokens = 0usize;
    let mut single = 0usize;
    for m in corpus.examples.iter().flat_map(|e| &e.mentions) {
        stats.event_count += 1;
        trigger_tokens += m.trigger.len();
        for a in &m.arguments {
            stats.role_count += 1;
            arg_tokens += a.span.len();
            if a.span.len() == 1 {
                single += 1;
            }
        }
    }
    if stats.event_count > 0 {
        stats.avg_trigger_len = trigger_tokens as f64 / stats.event_count as f64;
    }
    if stats.role_count > 0 {
        let n = stats.role_count as f64;
        stats.avg_arg_len = arg_tokens as f64 / n;
        stats.single_token_arg_pct = 100.0 * single as f64 / n;
        stats.multi_token_arg_pct = 100.0 * (stats.role_count - single) as f64 / n;
    }
    stats
}

impl CorpusStats {
    pub fn to_table(&self) -> String {
        let rows = [
            ("sentences", self.sentence_count.to_string()),
            ("events", self.event_count.to_string()),
            ("arguments", self.role_count.to_string()),
            ("avg trigger length", format!("{:.3}", self.avg_trigger_len)),
            ("avg argument length", format!("{:.3}", self.avg_arg_len)),
            ("single-token args %", format!("{:.2}", self.single_token_arg_pct)),
            ("multi-token args %", format!("{:.2}", self.multi_token_arg_pct)),
        ];
        let mut out = String::new();
        for (name, value) in rows {
            out.push_str(&format!("{name:<22}{value:>10}\n"));
        }
        out
    }
}
