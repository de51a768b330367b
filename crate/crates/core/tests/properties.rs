mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{rich_mentions, rng};
use eventgraph::corpus::{parse_corpus, parse_graphs, write_corpus_to, write_graphs_to};
use eventgraph::graph::{decode_graph, encode_graph, mention_multiset, EventGraph, Node};
use eventgraph::scoring::{score_corpus, Prf};
use eventgraph::{compute_stats, gen_synthetic, Corpus, EventMention, Example, Sentence, Span};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn example(seed: u64) -> Example {
    let (sentence, mentions, _, _) = rich_mentions(&mut rng(seed));
    Example { sentence, mentions }
}

/// Identity of a node independent of its id: anchors plus the labels of
/// its incoming top edges.
type NodeKey = (Vec<Span>, Vec<String>);

type IdFreeForm = (BTreeSet<NodeKey>, Vec<(NodeKey, NodeKey, String)>);

/// Edge multiset over id-free node keys; `None` if two nodes share a key.
fn id_free_form(g: &EventGraph) -> Option<IdFreeForm> {
    let mut keys: BTreeMap<usize, NodeKey> = BTreeMap::new();
    for n in &g.nodes {
        let mut tops: Vec<String> = g
            .edges
            .iter()
            .filter(|e| e.source == g.top && e.target == n.id)
            .map(|e| e.label.clone())
            .collect();
        tops.sort();
        let mut anchors = n.anchors.clone();
        anchors.sort();
        keys.insert(n.id, (anchors, tops));
    }
    let distinct: BTreeSet<NodeKey> = keys.values().cloned().collect();
    if distinct.len() != keys.len() {
        return None;
    }
    let mut edges: Vec<_> = g
        .edges
        .iter()
        .map(|e| (keys[&e.source].clone(), keys[&e.target].clone(), e.label.clone()))
        .collect();
    edges.sort();
    Some((distinct, edges))
}

/// The same graph under a random renaming of node ids and edge order.
fn relabel(g: &EventGraph, seed: u64) -> EventGraph {
    let mut r = rng(seed);
    let mut ids: Vec<usize> = (0..g.nodes.len()).map(|i| i * 3 + 7).collect();
    ids.shuffle(&mut r);
    let map: BTreeMap<usize, usize> = g.nodes.iter().zip(&ids).map(|(n, &i)| (n.id, i)).collect();
    let mut nodes: Vec<Node> = g.nodes.iter().map(|n| Node::new(map[&n.id], n.anchors.clone())).collect();
    nodes.shuffle(&mut r);
    let mut edges = g.edges.clone();
    for e in &mut edges {
        e.source = map[&e.source];
        e.target = map[&e.target];
    }
    edges.shuffle(&mut r);
    EventGraph {
        sentence_id: g.sentence_id.clone(),
        nodes,
        edges,
        top: map[&g.top],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn encode_then_decode_is_identity(seed in any::<u64>()) {
        let ex = example(seed);
        let graph = encode_graph(&ex.sentence, &ex.mentions).unwrap();
        prop_assert!(graph.validate_for(&ex.sentence).is_ok());
        let back = decode_graph(&graph, &ex.sentence).unwrap();
        prop_assert_eq!(mention_multiset(&back), mention_multiset(&ex.mentions));
    }

    #[test]
    fn argument_nodes_equal_distinct_argument_spans(seed in any::<u64>()) {
        let ex = example(seed);
        let graph = encode_graph(&ex.sentence, &ex.mentions).unwrap();
        let spans: BTreeSet<Span> = ex.mentions.iter().flat_map(|m| m.arguments.iter().map(|a| a.span)).collect();
        prop_assert_eq!(graph.nodes.len(), 1 + ex.mentions.len() + spans.len());
    }

    #[test]
    fn canonical_form_is_idempotent_up_to_isomorphism(seed in any::<u64>()) {
        let ex = example(seed);
        let g = relabel(&encode_graph(&ex.sentence, &ex.mentions).unwrap(), seed);
        prop_assert!(g.validate_for(&ex.sentence).is_ok());
        let again = encode_graph(&ex.sentence, &decode_graph(&g, &ex.sentence).unwrap()).unwrap();
        let (a, b) = (id_free_form(&g).unwrap(), id_free_form(&again).unwrap());
        prop_assert_eq!(a, b);
        prop_assert_eq!(g.nodes.len(), again.nodes.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn corpus_serialization_round_trips(seed in any::<u64>(), n in 0usize..6) {
        let examples: Vec<Example> = (0..n)
            .map(|i| {
                let mut ex = example(seed.wrapping_add(i as u64));
                ex.sentence.id = format!("s{i}");
                ex
            })
            .collect();
        let corpus = Corpus::new(examples);
        let mut bytes = Vec::new();
        write_corpus_to(&corpus, &mut bytes).unwrap();
        let back = parse_corpus(bytes.as_slice(), None).unwrap();
        prop_assert_eq!(&back, &corpus);
        let mut again = Vec::new();
        write_corpus_to(&back, &mut again).unwrap();
        prop_assert_eq!(bytes, again);
    }

    #[test]
    fn graph_serialization_round_trips(seed in any::<u64>(), n in 0usize..6) {
        let graphs: Vec<EventGraph> = (0..n)
            .map(|i| {
                let ex = example(seed.wrapping_add(i as u64));
                encode_graph(&ex.sentence, &ex.mentions).unwrap()
            })
            .collect();
        let mut bytes = Vec::new();
        write_graphs_to(&graphs, &mut bytes).unwrap();
        let back = parse_graphs(bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &graphs);
        let mut again = Vec::new();
        write_graphs_to(&back, &mut again).unwrap();
        prop_assert_eq!(bytes, again);
    }

    #[test]
    fn swapping_pred_and_gold_swaps_precision_and_recall(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.gen_range(1..5);
        let (mut pred, mut gold) = (Vec::new(), Vec::new());
        for i in 0..n {
            let (mut a, mut b) = (example(r.gen()), example(r.gen()));
            b.sentence = a.sentence.clone();
            a.sentence.id = format!("s{i}");
            b.sentence.id = format!("s{i}");
            let len = a.sentence.len();
            b.mentions.retain(|m| m.trigger.end <= len && m.arguments.iter().all(|x| x.span.end <= len));
            pred.push(a);
            gold.push(b);
        }
        let (p, g) = (Corpus::new(pred), Corpus::new(gold));
        let forward = score_corpus(&p, &g).unwrap();
        let backward = score_corpus(&g, &p).unwrap();
        for (x, y) in [
            (forward.trg_c, backward.trg_c),
            (forward.arg_c_perfect, backward.arg_c_perfect),
            (forward.arg_c_overlap, backward.arg_c_overlap),
        ] {
            prop_assert_eq!(x.precision, y.recall);
            prop_assert_eq!(x.recall, y.precision);
            prop_assert_eq!(x.f1, y.f1);
            check_prf_bounds(&x)?;
        }
        prop_assert_eq!(forward.presence_accuracy, backward.presence_accuracy);
    }
}

fn check_prf_bounds(x: &Prf) -> Result<(), TestCaseError> {
    for v in [x.precision, x.recall, x.f1] {
        prop_assert!((0.0..=1.0).contains(&v));
    }
    if x.precision > 0.0 && x.recall > 0.0 {
        prop_assert!(x.f1 >= x.precision.min(x.recall) - 1e-12);
        prop_assert!(x.f1 <= x.precision.max(x.recall) + 1e-12);
    }
    Ok(())
}

#[test]
fn synthetic_corpus_shows_every_phenomenon() {
    let corpus = gen_synthetic(7, 1000, (5, 6));
    let n = corpus.len() as f64;
    let share = |f: &dyn Fn(&Example) -> bool| corpus.examples.iter().filter(|e| f(e)).count() as f64 / n;
    let arg_spans = |e: &Example| -> Vec<(usize, Span)> {
        e.mentions
            .iter()
            .enumerate()
            .flat_map(|(i, m)| m.arguments.iter().map(move |a| (i, a.span)))
            .collect()
    };
    let shared = share(&|e| {
        let spans = arg_spans(e);
        spans.iter().any(|(i, s)| spans.iter().any(|(j, t)| i != j && s == t))
    });
    let nested = share(&|e| {
        let spans = arg_spans(e);
        spans.iter().any(|(_, s)| {
            spans
                .iter()
                .any(|(_, t)| s != t && t.start >= s.start && t.end <= s.end)
        })
    });
    let multi_token_trigger = share(&|e| e.mentions.iter().any(|m| m.trigger.len() > 1));
    let multi_event = share(&|e| e.mentions.len() > 1);
    let no_event = share(&|e| e.mentions.is_empty());
    let three_events = share(&|e| e.mentions.len() == 3);
    for (name, value) in [
        ("shared argument", shared),
        ("nested arguments", nested),
        ("multi-token trigger", multi_token_trigger),
        ("several events", multi_event),
        ("three events", three_events),
        ("no event", no_event),
    ] {
        assert!(value >= 0.01, "{name}: {value}");
    }
    assert!(corpus.examples.iter().all(|e| e.mentions.len() <= 3));
}

#[test]
fn stats_match_a_recount_on_single_sentences() {
    for seed in 0..200 {
        let ex = example(seed);
        let stats = compute_stats(&Corpus::new(vec![ex.clone()]));
        let args: Vec<usize> = ex.mentions.iter().flat_map(|m| m.arguments.iter().map(|a| a.span.end - a.span.start)).collect();
        assert_eq!(stats.event_count, ex.mentions.len());
        assert_eq!(stats.role_count, args.len());
        if !ex.mentions.is_empty() {
            let total: usize = ex.mentions.iter().map(|m| m.trigger.end - m.trigger.start).sum();
            assert!((stats.avg_trigger_len - total as f64 / ex.mentions.len() as f64).abs() < 1e-12);
        }
        if !args.is_empty() {
            let singles = args.iter().filter(|&&l| l == 1).count() as f64;
            assert!((stats.avg_arg_len - args.iter().sum::<usize>() as f64 / args.len() as f64).abs() < 1e-12);
            assert!((stats.single_token_arg_pct - 100.0 * singles / args.len() as f64).abs() < 1e-9);
            assert!((stats.single_token_arg_pct + stats.multi_token_arg_pct - 100.0).abs() < 1e-9);
        }
    }
}

#[test]
fn shared_argument_example_shares_the_us_node() {
    let s = Sentence::from_text("ff", "A Kurdish journalist died in a U.S. friendly-fire accident in the north .").unwrap();
    let span = |a, b| Span::new(a, b).unwrap();
    let mentions = vec![
        EventMention::new(span(3, 4), "Die").with_argument("Agent", span(6, 7)),
        EventMention::new(span(7, 8), "Attack").with_argument("Attacker", span(6, 7)),
    ];
    let g = encode_graph(&s, &mentions).unwrap();
    assert_eq!(g.nodes.len(), 4);
    let us: Vec<_> = g.edges.iter().filter(|e| e.source != g.top).map(|e| e.target).collect();
    assert_eq!(us, vec![3, 3]);
}
