use std::path::Path;
use std::process::{Command, Output};

use hypercqa::synthetic::{random_hypergraph, SyntheticSpec};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hypercqa"))
        .args(args)
        .env_remove("HYPERCQA_OUT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn every_subcommand_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let facts = root.join("facts.tsv");
    let graph = random_hypergraph(&SyntheticSpec {
        entities: 40,
        arities: vec![2, 3],
        edges: 200,
        seed: 3,
    });
    std::fs::write(&facts, graph.to_facts_text()).unwrap();
    let (data, model, report) = (root.join("data"), root.join("model"), root.join("report"));

    let stats = ok(&["stats", "--seed", "0", "--facts", p(&facts)]);
    assert!(stats.contains("edges\t200"), "{stats}");

    ok(&[
        "sample", "--seed", "1", "--facts", p(&facts), "--out", p(&data),
        "--train-count", "8", "--valid-count", "2", "--test-count", "2",
    ]);
    for f in ["vocab.txt", "facts_train.tsv", "train_1P.jsonl", "test_PNI.jsonl", "manifest.json"] {
        assert!(data.join(f).exists(), "missing {f}");
    }

    ok(&["oracle", "--seed", "0", "--data", p(&data), "--out", p(&root.join("audit"))]);
    assert!(root.join("audit/oracle.tsv").exists());

    ok(&[
        "train", "--seed", "2", "--data", p(&data), "--out", p(&model),
        "--d", "8", "--heads", "2", "--layers", "1", "--epochs", "1", "--ood",
    ]);
    assert!(model.join("model.ckpt").exists());
    let log = std::fs::read_to_string(model.join("train_log.tsv")).unwrap();
    assert!(log.starts_with("epoch\tloss"));

    let table = ok(&[
        "eval", "--seed", "0", "--checkpoint", p(&model.join("model.ckpt")),
        "--data", p(&data), "--out", p(&report),
    ]);
    assert!(table.starts_with("model\t1P"), "{table}");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report.join("report.json")).unwrap()).unwrap();
    assert!(json.get("per_type").is_some());

    ok(&[
        "baseline", "--seed", "0", "--data", p(&data), "--out", p(&root.join("baseline")),
        "--family", "hsimple", "--d", "8", "--epochs", "2",
    ]);
    assert!(root.join("baseline/baseline.ckpt").exists());

    ok(&[
        "ablate", "--seed", "0", "--data", p(&data), "--out", p(&root.join("ablation")),
        "--seeds", "0", "--d", "8", "--heads", "2", "--layers", "1", "--epochs", "1",
    ]);
    let ablation = std::fs::read_to_string(root.join("ablation/ablation.tsv")).unwrap();
    for v in ["full", "fuzzy"] {
        assert!(ablation.contains(v), "{ablation}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // unknown flag and missing seed are configuration errors
    assert_eq!(run(&["stats", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["stats"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    // unreadable input is a data error
    let missing = dir.path().join("nope.tsv");
    assert_eq!(run(&["stats", "--seed", "0", "--facts", p(&missing)]).status.code(), Some(2));
    let bad = dir.path().join("bad.tsv");
    std::fs::write(&bad, "r\ta\tb\nr\ta\n").unwrap();
    assert_eq!(run(&["stats", "--seed", "0", "--facts", p(&bad)]).status.code(), Some(2));
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[model]\nnot_a_key = 1\n").unwrap();
    assert_eq!(
        run(&["stats", "--seed", "0", "--config", p(&cfg), "--facts", p(&bad)]).status.code(),
        Some(1)
    );
}
