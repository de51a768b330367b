//! Test oracles shared by the integration suites. Nothing here calls the
//! code paths it is used to check.
#![allow(dead_code)]

use eventgraph::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Reduces a tensor-valued output to a scalar through a fixed random
/// projection, so every output entry carries a distinct weight.
pub fn project(tape: &mut Tape<'_, f64>, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let r = random_tensor(&mut rng(seed ^ 0xABCD), &shape, 1.0);
    let weighted = tape.mul_const(out, r).unwrap();
    tape.sum(weighted)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Worst relative error between tape gradients and central finite
/// differences, over every parameter entry (capped at `max_per_param`
/// sampled entries for large parameters).
pub fn max_grad_error(
    store: &ParamStore<f64>,
    f: impl Fn(&mut Tape<'_, f64>) -> Var,
    max_per_param: usize,
) -> f64 {
    let h = 1e-4;
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape);
        tape.backward(loss).params(&tape)
    };
    let eval = |s: &ParamStore<f64>| {
        let mut tape = Tape::new(s);
        let loss = f(&mut tape);
        tape.value(loss).item()
    };
    let mut pick = rng(99);
    let mut worst = 0.0f64;
    let mut work = store.clone();
    for i in 0..store.len() {
        let id = ParamId(i);
        let n = store.get(id).len();
        let entries: Vec<usize> = if n <= max_per_param {
            (0..n).collect()
        } else {
            (0..max_per_param).map(|_| pick.gen_range(0..n)).collect()
        };
        for j in entries {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let up = eval(&work);
            work.get_mut(id).data_mut()[j] = orig - h;
            let down = eval(&work);
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[j]);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

/// Minimum total cost over all injective assignments of rows to columns,
/// by exhaustive enumeration.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    fn go(row: usize, cost: &[Vec<f64>], used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                go(row + 1, cost, used, acc + cost[row][j], best);
                used[j] = false;
            }
        }
    }
    let cols = cost.first().map_or(0, Vec::len);
    let mut best = f64::INFINITY;
    go(0, cost, &mut vec![false; cols], 0.0, &mut best);
    if cost.is_empty() {
        0.0
    } else {
        best
    }
}

/// Largest number of pairs in a one-to-one matching, by trying every
/// injective partial assignment.
pub fn brute_force_matching(n_pred: usize, n_gold: usize, ok: &dyn Fn(usize, usize) -> bool) -> usize {
    fn go(i: usize, n_pred: usize, used: &mut Vec<bool>, ok: &dyn Fn(usize, usize) -> bool) -> usize {
        if i == n_pred {
            return 0;
        }
        let mut best = go(i + 1, n_pred, used, ok);
        for j in 0..used.len() {
            if !used[j] && ok(i, j) {
                used[j] = true;
                best = best.max(1 + go(i + 1, n_pred, used, ok));
                used[j] = false;
            }
        }
        best
    }
    go(0, n_pred, &mut vec![false; n_gold], ok)
}

/// A random sentence of `len` tokens with up to `max_events` mentions over
/// labels `E0..` and `R0..`; spans are short so nodes often share tokens.
pub fn random_example(
    rng: &mut ChaCha8Rng,
    len: usize,
    max_events: usize,
    n_types: usize,
    n_roles: usize,
) -> (eventgraph::Sentence, Vec<eventgraph::EventMention>) {
    use eventgraph::{EventMention, Sentence, Span};
    let tokens = (0..len).map(|i| format!("w{}", rng.gen_range(0..50) + 100 * i)).collect();
    let sentence = Sentence::new(format!("s{}", rng.gen::<u32>()), tokens).unwrap();
    let span = |rng: &mut ChaCha8Rng| {
        let start = rng.gen_range(0..len);
        let end = (start + rng.gen_range(1..=2)).min(len);
        Span::new(start, end).unwrap()
    };
    let mut mentions: Vec<EventMention> = Vec::new();
    for _ in 0..rng.gen_range(0..=max_events) {
        let trigger = span(rng);
        let ty = format!("E{}", rng.gen_range(0..n_types));
        if mentions.iter().any(|m| m.trigger == trigger && m.event_type == ty) {
            continue;
        }
        let mut m = EventMention::new(trigger, ty);
        for _ in 0..rng.gen_range(0..=2) {
            let (role, s) = (format!("R{}", rng.gen_range(0..n_roles)), span(rng));
            if !m.arguments.iter().any(|a| a.role == role && a.span == s) {
                m = m.with_argument(role, s);
            }
        }
        mentions.push(m);
    }
    (sentence, mentions)
}

/// Mentions with deliberately shared and nested argument spans.
pub fn rich_mentions(
    r: &mut ChaCha8Rng,
) -> (eventgraph::Sentence, Vec<eventgraph::EventMention>, bool, bool) {
    use eventgraph::{EventMention, Sentence, Span};
    use rand::seq::SliceRandom;
    let len = r.gen_range(4..16);
    let tokens = (0..len).map(|i| format!("t{i}")).collect();
    let sentence = Sentence::new(format!("s{}", r.gen::<u32>()), tokens).unwrap();
    let random_span = |r: &mut ChaCha8Rng| {
        let start = r.gen_range(0..len);
        Span::new(start, (start + r.gen_range(1..=4)).min(len)).unwrap()
    };
    let mut mentions: Vec<EventMention> = Vec::new();
    let mut used: Vec<Span> = Vec::new();
    let (mut shared, mut nested) = (false, false);
    for _ in 0..r.gen_range(0..=4) {
        let trigger = random_span(r);
        let ty = format!("E{}", r.gen_range(0..3));
        if mentions.iter().any(|m| m.trigger == trigger && m.event_type == ty) {
            continue;
        }
        let mut m = EventMention::new(trigger, ty);
        for _ in 0..r.gen_range(0..=3) {
            let span = match r.gen_range(0..3) {
                0 if !used.is_empty() => {
                    shared = true;
                    *used.choose(r).unwrap()
                }
                1 if used.iter().any(|s| s.len() > 1) => {
                    let outer = *used.iter().filter(|s| s.len() > 1).collect::<Vec<_>>().choose(r).unwrap();
                    let start = r.gen_range(outer.start..outer.end);
                    nested = true;
                    Span::new(start, r.gen_range(start + 1..=outer.end)).unwrap()
                }
                _ => random_span(r),
            };
            let role = format!("R{}", r.gen_range(0..4));
            if !m.arguments.iter().any(|a| a.role == role && a.span == span) {
                used.push(span);
                m = m.with_argument(role, span);
            }
        }
        mentions.push(m);
    }
    (sentence, mentions, shared, nested)
}
