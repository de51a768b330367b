//! Trigger and argument classification scores with one-to-one matching per
//! sentence, plus sentence-level event presence accuracy.

use std::collections::HashMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Example};
use crate::graph::Span;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScoreError {
    #[error("sentence `{0}` is in the gold corpus but not in the predictions")]
    MissingPrediction(String),
    #[error("sentence `{0}` is predicted but not in the gold corpus")]
    UnexpectedPrediction(String),
}

/// Raw counts; sums are associative so sentence scores can be merged in any
/// grouping.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub n_pred: usize,
    pub n_gold: usize,
}

impl std::ops::Add for Counts {
    type Output = Counts;
    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            n_pred: self.n_pred + o.n_pred,
            n_gold: self.n_gold + o.n_gold,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    #[serde(rename = "p")]
    pub precision: f64,
    #[serde(rename = "r")]
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub n_pred: usize,
    pub n_gold: usize,
}

impl From<Counts> for Prf {
    fn from(c: Counts) -> Prf {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(c.tp, c.n_pred);
        let recall = ratio(c.tp, c.n_gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
            tp: c.tp,
            n_pred: c.n_pred,
            n_gold: c.n_gold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanMode {
    Perfect,
    Overlap80,
}

/// Gold spans longer than this many tokens may match partially.
pub const OVERLAP_MIN_GOLD_LEN: usize = 5;
pub const OVERLAP_RATIO: f64 = 0.8;

/// Whether a predicted argument span counts as the gold span.
pub fn span_matches(pred: Span, gold: Span, mode: SpanMode) -> bool {
    match mode {
        SpanMode::Perfect => pred == gold,
        SpanMode::Overlap80 => {
            if gold.len() <= OVERLAP_MIN_GOLD_LEN {
                pred == gold
            } else {
                pred.intersection_len(&gold) as f64 / gold.len() as f64 >= OVERLAP_RATIO
            }
        }
    }
}

/// Size of a maximum bipartite matching where `compatible(i, j)` says pred
/// `i` may be credited with gold `j`. Kuhn's augmenting paths.
pub fn max_matching(
    n_pred: usize,
    n_gold: usize,
    compatible: impl Fn(usize, usize) -> bool,
) -> usize {
    let adj: Vec<Vec<usize>> = (0..n_pred)
        .map(|i| (0..n_gold).filter(|&j| compatible(i, j)).collect())
        .collect();
    let mut gold_owner: Vec<Option<usize>> = vec![None; n_gold];

    fn augment(
        i: usize,
        adj: &[Vec<usize>],
        owner: &mut [Option<usize>],
        visited: &mut [bool],
    ) -> bool {
        for &j in &adj[i] {
            if visited[j] {
                continue;
            }
            visited[j] = true;
            let free = match owner[j] {
                None => true,
                Some(k) => augment(k, adj, owner, visited),
            };
            if free {
                owner[j] = Some(i);
                return true;
            }
        }
        false
    }

    let mut size = 0;
    for i in 0..n_pred {
        let mut visited = vec![false; n_gold];
        if augment(i, &adj, &mut gold_owner, &mut visited) {
            size += 1;
        }
    }
    size
}

fn trigger_items(ex: &Example) -> Vec<(Span, &str)> {
    ex.mentions
        .iter()
        .map(|m| (m.trigger, m.event_type.as_str()))
        .collect()
}

fn argument_items(ex: &Example) -> Vec<(&str, &str, Span)> {
    ex.mentions
        .iter()
        .flat_map(|m| {
            m.arguments
                .iter()
                .map(move |a| (m.event_type.as_str(), a.role.as_str(), a.span))
        })
        .collect()
}

pub fn sentence_trigger_counts(pred: &Example, gold: &Example) -> Counts {
    let p = trigger_items(pred);
    let g = trigger_items(gold);
    Counts {
        tp: max_matching(p.len(), g.len(), |i, j| p[i] == g[j]),
        n_pred: p.len(),
        n_gold: g.len(),
    }
}

pub fn sentence_argument_counts(pred: &Example, gold: &Example, mode: SpanMode) -> Counts {
    let p = argument_items(pred);
    let g = argument_items(gold);
    let tp = max_matching(p.len(), g.len(), |i, j| {
        let (pt, pr, ps) = p[i];
        let (gt, gr, gs) = g[j];
        pt == gt && pr == gr && span_matches(ps, gs, mode)
    });
    Counts {
        tp,
        n_pred: p.len(),
        n_gold: g.len(),
    }
}

/// Pairs each gold example with the prediction of the same sentence id.
pub fn align<'a>(
    pred: &'a Corpus,
    gold: &'a Corpus,
) -> Result<Vec<(&'a Example, &'a Example)>, ScoreError> {
    let by_id: HashMap<&str, &Example> = pred
        .examples
        .iter()
        .map(|e| (e.sentence.id.as_str(), e))
        .collect();
    let mut pairs = Vec::with_capacity(gold.len());
    for g in &gold.examples {
        let p = by_id
            .get(g.sentence.id.as_str())
            .ok_or_else(|| ScoreError::MissingPrediction(g.sentence.id.clone()))?;
        pairs.push((*p, g));
    }
    if pred.len() != gold.len() {
        let gold_ids: std::collections::HashSet<&str> =
            gold.sentences().map(|s| s.id.as_str()).collect();
        if let Some(extra) = pred.sentences().find(|s| !gold_ids.contains(s.id.as_str())) {
            return Err(ScoreError::UnexpectedPrediction(extra.id.clone()));
        }
    }
    Ok(pairs)
}

fn sum_counts(
    pairs: &[(&Example, &Example)],
    f: impl Fn(&Example, &Example) -> Counts + Sync,
) -> Counts {
    pairs
        .par_iter()
        .map(|(p, g)| f(p, g))
        .reduce(Counts::default, |a, b| a + b)
}

pub fn score_triggers(pred: &Corpus, gold: &Corpus) -> Result<Prf, ScoreError> {
    let pairs = align(pred, gold)?;
    Ok(sum_counts(&pairs, sentence_trigger_counts).into())
}

pub fn score_arguments(pred: &Corpus, gold: &Corpus, mode: SpanMode) -> Result<Prf, ScoreError> {
    let pairs = align(pred, gold)?;
    Ok(sum_counts(&pairs, |p, g| sentence_argument_counts(p, g, mode)).into())
}

/// Fraction of sentences where the prediction agrees with gold on whether
/// any event is present. Zero for an empty corpus.
pub fn presence_accuracy(pred: &Corpus, gold: &Corpus) -> Result<f64, ScoreError> {
    let pairs = align(pred, gold)?;
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let agree = pairs
        .iter()
        .filter(|(p, g)| p.mentions.is_empty() == g.mentions.is_empty())
        .count();
    Ok(agree as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub trg_c: Prf,
    pub arg_c_perfect: Prf,
    pub arg_c_overlap: Prf,
    pub presence_accuracy: f64,
}

pub fn score_corpus(pred: &Corpus, gold: &Corpus) -> Result<ScoreReport, ScoreError> {
    Ok(ScoreReport {
        trg_c: score_triggers(pred, gold)?,
        arg_c_perfect: score_arguments(pred, gold, SpanMode::Perfect)?,
        arg_c_overlap: score_arguments(pred, gold, SpanMode::Overlap80)?,
        presence_accuracy: presence_accuracy(pred, gold)?,
    })
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<22}{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}",
            "metric", "P", "R", "F1", "tp", "pred", "gold"
        )?;
        for (name, prf) in [
            ("Trg-C", &self.trg_c),
            ("Arg-C perfect", &self.arg_c_perfect),
            ("Arg-C 80% overlap", &self.arg_c_overlap),
        ] {
            writeln!(
                f,
                "{:<22}{:>8.3}{:>8.3}{:>8.3}{:>8}{:>8}{:>8}",
                name, prf.precision, prf.recall, prf.f1, prf.tp, prf.n_pred, prf.n_gold
            )?;
        }
        writeln!(f, "{:<22}{:>8.3}", "presence accuracy", self.presence_accuracy)
    }
}

/// Mean and sample standard deviation of one metric across runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> MeanStd {
        if values.is_empty() {
            return MeanStd { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        MeanStd { mean, std }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

/// F1 (and presence accuracy) aggregated over runs with different seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub runs: usize,
    pub trg_c_f1: MeanStd,
    pub arg_c_perfect_f1: MeanStd,
    pub arg_c_overlap_f1: MeanStd,
    pub presence_accuracy: MeanStd,
}

pub fn summarize_runs(reports: &[ScoreReport]) -> RunSummary {
    let col = |f: fn(&ScoreReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    RunSummary {
        runs: reports.len(),
        trg_c_f1: col(|r| r.trg_c.f1),
        arg_c_perfect_f1: col(|r| r.arg_c_perfect.f1),
        arg_c_overlap_f1: col(|r| r.arg_c_overlap.f1),
        presence_accuracy: col(|r| r.presence_accuracy),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{EventMention, Sentence};

    fn sp(a: usize, b: usize) -> Span {
        Span::new(a, b).unwrap()
    }

    fn corpus(items: Vec<(&str, Vec<EventMention>)>) -> Corpus {
        Corpus::new(
            items
                .into_iter()
                .map(|(id, mentions)| Example {
                    sentence: Sentence::from_text(id, "t0 t1 t2 t3 t4 t5 t6 t7 t8 t9 t10 t11")
                        .unwrap(),
                    mentions,
                })
                .collect(),
        )
    }

    fn friendly_fire() -> Vec<EventMention> {
        vec![
            EventMention::new(sp(3, 4), "Die").with_argument("Agent", sp(6, 7)),
            EventMention::new(sp(7, 8), "Attack").with_argument("Attacker", sp(6, 7)),
        ]
    }

    #[test]
    fn identity_scores_one() {
        let gold = corpus(vec![("a", friendly_fire())]);
        let r = score_corpus(&gold, &gold).unwrap();
        for prf in [r.trg_c, r.arg_c_perfect, r.arg_c_overlap] {
            assert_eq!((prf.precision, prf.recall, prf.f1), (1.0, 1.0, 1.0));
        }
        assert_eq!(r.presence_accuracy, 1.0);
    }

    #[test]
    fn half_right_triggers() {
        let gold = corpus(vec![("a", friendly_fire())]);
        let pred = corpus(vec![(
            "a",
            vec![
                EventMention::new(sp(3, 4), "Die"),
                EventMention::new(sp(8, 9), "Attack"),
            ],
        )]);
        let prf = score_triggers(&pred, &gold).unwrap();
        assert_eq!((prf.precision, prf.recall, prf.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn duplicate_prediction_credited_once() {
        let gold = corpus(vec![("a", vec![EventMention::new(sp(3, 4), "Die")])]);
        let pred = corpus(vec![(
            "a",
            vec![
                EventMention::new(sp(3, 4), "Die"),
                EventMention::new(sp(3, 4), "Die"),
            ],
        )]);
        let prf = score_triggers(&pred, &gold).unwrap();
        assert_eq!(prf.tp, 1);
        assert_eq!((prf.precision, prf.recall), (0.5, 1.0));
    }

    #[test]
    fn long_argument_overlap() {
        let gold = corpus(vec![(
            "a",
            vec![EventMention::new(sp(0, 1), "Attack").with_argument("Target", sp(3, 10))],
        )]);
        let pred = corpus(vec![(
            "a",
            vec![EventMention::new(sp(0, 1), "Attack").with_argument("Target", sp(3, 9))],
        )]);
        assert_eq!(score_arguments(&pred, &gold, SpanMode::Perfect).unwrap().tp, 0);
        assert_eq!(score_arguments(&pred, &gold, SpanMode::Overlap80).unwrap().tp, 1);
    }

    #[test]
    fn short_argument_needs_exact_span() {
        let gold = corpus(vec![(
            "a",
            vec![EventMention::new(sp(0, 1), "Attack").with_argument("Target", sp(3, 7))],
        )]);
        let pred = corpus(vec![(
            "a",
            vec![EventMention::new(sp(0, 1), "Attack").with_argument("Target", sp(3, 6))],
        )]);
        assert_eq!(score_arguments(&pred, &gold, SpanMode::Perfect).unwrap().tp, 0);
        assert_eq!(score_arguments(&pred, &gold, SpanMode::Overlap80).unwrap().tp, 0);
    }

    #[test]
    fn five_token_gold_uses_perfect_match() {
        // 4 of 5 tokens is exactly 0.8, but five-token spans are not relaxed.
        assert!(!span_matches(sp(0, 4), sp(0, 5), SpanMode::Overlap80));
        assert!(span_matches(sp(0, 5), sp(0, 6), SpanMode::Overlap80));
        assert!(!span_matches(sp(0, 4), sp(0, 6), SpanMode::Overlap80));
    }

    #[test]
    fn argument_needs_role_and_event_type() {
        let gold = corpus(vec![("a", friendly_fire())]);
        let mut wrong = friendly_fire();
        wrong[0].arguments[0].role = "Victim".into();
        wrong[1].event_type = "Die".into();
        let pred = corpus(vec![("a", wrong)]);
        assert_eq!(score_arguments(&pred, &gold, SpanMode::Perfect).unwrap().tp, 0);
    }

    #[test]
    fn presence_counts() {
        let e = || vec![EventMention::new(sp(0, 1), "X")];
        let gold = corpus(vec![("a", e()), ("b", vec![]), ("c", e()), ("d", vec![])]);
        let pred = corpus(vec![("a", e()), ("b", vec![]), ("c", vec![]), ("d", vec![])]);
        assert_eq!(presence_accuracy(&pred, &gold).unwrap(), 0.75);
        let all = corpus(vec![("a", e()), ("b", e()), ("c", e()), ("d", e())]);
        assert_eq!(presence_accuracy(&all, &gold).unwrap(), 0.5);
    }

    #[test]
    fn misaligned_ids_fail() {
        let gold = corpus(vec![("a", vec![]), ("b", vec![])]);
        let pred = corpus(vec![("a", vec![])]);
        assert_eq!(
            score_triggers(&pred, &gold),
            Err(ScoreError::MissingPrediction("b".into()))
        );
        let pred = corpus(vec![("a", vec![]), ("b", vec![]), ("c", vec![])]);
        assert_eq!(
            score_triggers(&pred, &gold),
            Err(ScoreError::UnexpectedPrediction("c".into()))
        );
    }

    #[test]
    fn report_json_keys() {
        let gold = corpus(vec![("a", friendly_fire())]);
        let v = serde_json::to_value(score_corpus(&gold, &gold).unwrap()).unwrap();
        for key in ["trg_c", "arg_c_perfect", "arg_c_overlap"] {
            let obj = v[key].as_object().unwrap();
            let keys: Vec<&str> = obj.keys().map(String::as_str).collect();
            for k in ["p", "r", "f1", "tp", "n_pred", "n_gold"] {
                assert!(keys.contains(&k), "{key}.{k}");
            }
        }
        assert_eq!(v["presence_accuracy"], 1.0);
    }

    #[test]
    fn mean_std_over_runs() {
        let m = MeanStd::of(&[0.5, 0.7, 0.9]);
        assert!((m.mean - 0.7).abs() < 1e-12);
        assert!((m.std - 0.2).abs() < 1e-12);
        assert_eq!(MeanStd::of(&[0.4]).std, 0.0);
    }
}
