use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use eventgraph::corpus::{read_corpus, read_graphs};
use eventgraph::graph::{decode_graph, mention_multiset};

const FRIENDLY_FIRE: &str = r#"{"sent_id":"ff","tokens":["A","Kurdish","journalist","died","in","a","U.S.","friendly-fire","accident","in","the","north","."],"events":[{"trigger":{"start":3,"end":4,"type":"Die"},"arguments":[{"start":1,"end":3,"role":"Victim"},{"start":6,"end":7,"role":"Agent"},{"start":10,"end":12,"role":"Place"}]},{"trigger":{"start":7,"end":8,"type":"Attack"},"arguments":[{"start":1,"end":3,"role":"Target"},{"start":6,"end":7,"role":"Attacker"},{"start":10,"end":12,"role":"Place"}]}]}"#;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_eventgraph"));
    cmd.env("EVGRAPH_THREADS", "1").env("RUST_LOG", "warn");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, content: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, content).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn convert_shared_argument_sentence_to_graph_and_back() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "ff.jsonl", &format!("{FRIENDLY_FIRE}\n"));
    let graph_path = dir.path().join("ff.graph.jsonl");
    let out = run(&["convert", "--to=graph", s(&input), s(&graph_path)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let corpus = read_corpus(&input).unwrap();
    let graphs = read_graphs(&graph_path).unwrap();
    assert_eq!(graphs.len(), 1);
    // Top, two triggers and three shared argument nodes.
    assert_eq!(graphs[0].nodes.len(), 6);
    let ex = &corpus.examples[0];
    let decoded = decode_graph(&graphs[0], &ex.sentence).unwrap();
    assert_eq!(mention_multiset(&decoded), mention_multiset(&ex.mentions));

    let back = dir.path().join("back.jsonl");
    let out = run(&["convert", s(&graph_path), s(&back), "--sentences", s(&input)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let round = read_corpus(&back).unwrap();
    assert_eq!(mention_multiset(&round.examples[0].mentions), mention_multiset(&ex.mentions));

    let out = run(&["convert", s(&graph_path), s(&back)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_gold_against_itself_prints_ones() {
    let dir = tempfile::tempdir().unwrap();
    let gold = write(dir.path(), "g.jsonl", &format!("{FRIENDLY_FIRE}\n"));
    let pred = write(dir.path(), "p.jsonl", &format!("{FRIENDLY_FIRE}\n"));
    let out = run(&["evaluate", "--pred", s(&pred), "--gold", s(&gold)]);
    assert_eq!(out.status.code(), Some(0));
    let table = String::from_utf8(out.stdout).unwrap();
    for row in ["Trg-C", "Arg-C perfect", "Arg-C 80% overlap"] {
        let line = table.lines().find(|l| l.starts_with(row)).unwrap();
        assert_eq!(line.matches("1.000").count(), 3, "{line}");
    }
    assert!(table.lines().any(|l| l.starts_with("presence accuracy") && l.ends_with("1.000")));

    let out = run(&["evaluate", "--pred", s(&pred), "--gold", s(&gold), "--json"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["arg_c_overlap"]["f1"], 1.0);
}

#[test]
fn validate_reports_top_anchored_node_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let good = r#"{"id":"a","tops":[0],"nodes":[{"id":0,"anchors":[]},{"id":1,"anchors":[{"start":0,"end":1}]}],"edges":[{"source":0,"target":1,"label":"Die"}]}"#;
    let bad = r#"{"id":"b","tops":[0],"nodes":[{"id":0,"anchors":[{"start":0,"end":1}]}],"edges":[]}"#;
    let path = write(dir.path(), "g.jsonl", &format!("{good}\n{bad}\n"));
    let out = run(&["validate", s(&path)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("line 2"), "{err}");

    let ok = write(dir.path(), "ok.jsonl", &format!("{good}\n"));
    assert!(run(&["validate", s(&ok)]).status.success());
    let mentions = write(dir.path(), "m.jsonl", &format!("{FRIENDLY_FIRE}\n"));
    assert!(run(&["validate", s(&mentions)]).status.success());
}

#[test]
fn usage_errors_exit_two_and_every_subcommand_has_help() {
    assert_eq!(run(&["stats", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&[]).status.code(), Some(2));
    for sub in ["convert", "validate", "stats", "gen-synthetic", "train", "predict", "evaluate"] {
        let out = run(&[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{sub}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"), "{sub}");
    }
}

#[test]
fn gen_synthetic_is_deterministic_and_stats_reads_it() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for p in [&a, &b] {
        let out = run(&["gen-synthetic", "--seed", "7", "-n", "20", s(p)]);
        assert!(out.status.success());
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let out = run(&["stats", s(&a), "--json"]);
    let stats: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stats["sentence_count"], 20);
}

#[test]
fn train_predict_evaluate_round() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("train.jsonl");
    assert!(run(&["gen-synthetic", "--seed", "3", "-n", "8", "--event-types", "3", "--roles", "4", s(&data)])
        .status
        .success());
    let config = write(
        dir.path(),
        "config.json",
        r#"{"d_model": 8, "n_heads": 2, "n_decoder_layers": 1, "hidden_size_anchor": 8,
            "hidden_size_edge_presence": 8, "hidden_size_edge_label": 8,
            "encoder": {"kind": "toy", "buckets": 64, "layers": 1}, "batch_size": 4}"#,
    );
    let train = |out: &Path| {
        run(&[
            "train", "--train", s(&data), "--dev", s(&data), "--out", s(out), "--config", s(&config),
            "--set", "epochs=3", "--set", "warmup_steps=2", "--seed", "1", "--json",
        ])
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = train(out);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for file in ["best.ckpt", "last.ckpt", "history.jsonl"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }

    let pred = dir.path().join("pred.graph.jsonl");
    let out = run(&["predict", "--checkpoint", s(&a.join("best.ckpt")), s(&data), s(&pred), "--to", "graph"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&["evaluate", "--pred", s(&pred), "--gold", s(&data), "--json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let bad_key = run(&["train", "--train", s(&data), "--out", s(&a), "--set", "no_such_key=1"]);
    assert_eq!(bad_key.status.code(), Some(2));
    let bad_value = run(&["train", "--train", s(&data), "--out", s(&a), "--set", "epochs=many"]);
    assert_eq!(bad_value.status.code(), Some(2));
}
