use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn icst(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icst"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = icst(args);
    assert!(
        o.status.success(),
        "icst {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: PathBuf) -> String {
    std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

const TINY: &str = r#"{
  "slot_minutes": 60, "epochs": 2, "batch_size": 16, "recent": 4, "daily": 1, "weekly": 0,
  "horizon": 3, "heads": 2, "head_dim": 4, "embedding_dim": 8, "tcl_blocks": 2, "nf_layers": 2
}"#;

/// Synthetic hourly data plus a tiny configuration.
fn tiny_setup(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    ok(&["synth", "--roads", "4", "--days", "10", "--slot", "60", "--seed", "3", "--out", s(&data)]);
    let cfg = dir.join("cfg.json");
    std::fs::write(&cfg, TINY).unwrap();
    (data, cfg)
}

#[test]
fn synth_writes_expected_rows_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["synth", "--roads", "6", "--days", "28", "--slot", "5", "--seed", "11", "--out", s(out)]);
    }
    let csv = read(a.join("speeds.csv"));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 8064);
    assert_eq!(lines[1].split(',').count(), 6);
    for f in ["speeds.csv", "network.csv", "truth.json"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
    let m: serde_json::Value = serde_json::from_str(&read(a.join("manifest.json"))).unwrap();
    assert_eq!(m["seed"], 11);
    assert_eq!(m["command"], "synth");

    let again = icst(&["synth", "--roads", "6", "--days", "28", "--seed", "11", "--out", s(&a)]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(&["synth", "--roads", "6", "--days", "5", "--seed", "11", "--out", s(&a), "--force"]);
}

#[test]
fn synth_rejects_two_roads() {
    let dir = tempfile::tempdir().unwrap();
    let o = icst(&["synth", "--roads", "2", "--out", s(&dir.path().join("x"))]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("at least 3 roads"));
}

#[test]
fn config_schema_violation_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = tiny_setup(dir.path());
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"epochz": 3}"#).unwrap();
    let o = icst(&[
        "train",
        "--data",
        s(&data.join("speeds.csv")),
        "--network",
        s(&data.join("network.csv")),
        "--config",
        s(&bad),
        "--out",
        s(&dir.path().join("t")),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));
}

#[test]
fn missing_checkpoint_is_actionable() {
    let dir = tempfile::tempdir().unwrap();
    let o = icst(&[
        "causal-graph",
        "--checkpoint",
        s(&dir.path().join("none.ckpt")),
        "--out",
        s(&dir.path().join("g")),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("icst train"));
}

#[test]
fn train_evaluate_predict_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = tiny_setup(dir.path());
    let speeds = data.join("speeds.csv");
    let network = data.join("network.csv");
    let mut runs = Vec::new();
    for name in ["t1", "t2"] {
        let out = dir.path().join(name);
        ok(&[
            "train",
            "--data",
            s(&speeds),
            "--network",
            s(&network),
            "--config",
            s(&cfg),
            "--seed",
            "1",
            "--out",
            s(&out),
        ]);
        runs.push(out);
    }
    let val = |p: &Path| -> Vec<String> {
        read(p.join("train_log.csv"))
            .lines()
            .skip(1)
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    assert_eq!(val(&runs[0]), val(&runs[1]));
    assert!(read(runs[0].join("train_log.csv")).starts_with("epoch,train_loss,val_mae,val_rmse,val_mape,seconds\n"));
    let m: serde_json::Value = serde_json::from_str(&read(runs[0].join("manifest.json"))).unwrap();
    assert_eq!(m["seed"], 1);
    assert_eq!(m["config"]["train"]["epochs"], 2);
    assert_eq!(m["inputs"].as_object().unwrap().len(), 2);

    let ck = runs[0].join("model.ckpt");
    let ev = dir.path().join("ev");
    ok(&["evaluate", "--checkpoint", s(&ck), "--data", s(&speeds), "--out", s(&ev)]);
    let metrics: serde_json::Value = serde_json::from_str(&read(ev.join("metrics.json"))).unwrap();
    for k in ["model", "historical_average", "persistence"] {
        assert!(metrics[k]["h3"]["mae"].as_f64().unwrap() > 0.0, "{k}");
        assert!(metrics[k]["avg"]["rmse"].as_f64().unwrap() >= metrics[k]["avg"]["mae"].as_f64().unwrap());
    }
    let trained: serde_json::Value = serde_json::from_str(&read(runs[0].join("metrics.json"))).unwrap();
    assert_eq!(trained["test"]["avg"]["mae"], metrics["model"]["avg"]["mae"]);

    let pr = dir.path().join("pr");
    ok(&["predict", "--checkpoint", s(&ck), "--data", s(&speeds), "--out", s(&pr)]);
    let preds = read(pr.join("predictions.csv"));
    let mut lines = preds.lines();
    assert_eq!(lines.next().unwrap(), "origin,horizon,road_0,road_1,road_2,road_3");
    let first: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(first[1], 1.0);
    assert!(first[2..].iter().all(|v| (10.0..120.0).contains(v)));

    let cg = dir.path().join("cg");
    ok(&["causal-graph", "--checkpoint", s(&ck), "--format", "all", "--out", s(&cg)]);
    let dot = read(cg.join("causal_graph.dot"));
    let graph: serde_json::Value = serde_json::from_str(&read(cg.join("causal_graph.json"))).unwrap();
    let mut from_json: Vec<(u64, u64)> = graph["pairs"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|p| p["edges"].as_array().unwrap().iter())
        .map(|e| (e["src"].as_u64().unwrap(), e["dst"].as_u64().unwrap()))
        .collect();
    from_json.sort();
    let mut from_dot = parse_dot_edges(&dot);
    from_dot.sort();
    assert_eq!(from_dot, from_json);
    let heat = std::fs::read_dir(cg.join("time_causality")).unwrap().count();
    assert_eq!(heat, graph["pairs"].as_array().unwrap().len());
}

/// Minimal DOT reader for `digraph causal { a -> b [label="x"]; }`.
fn parse_dot_edges(dot: &str) -> Vec<(u64, u64)> {
    let body = dot.trim();
    assert!(body.starts_with("digraph causal {") && body.ends_with('}'));
    body.lines()
        .filter_map(|l| {
            let l = l.trim().trim_end_matches(';');
            let (lhs, rest) = l.split_once("->")?;
            let rhs = rest.split('[').next().unwrap();
            let label = rest.split("label=\"").nth(1).unwrap().trim_end_matches("\"]");
            assert!(label.parse::<f64>().unwrap() > 0.0);
            Some((lhs.trim().parse().unwrap(), rhs.trim().parse().unwrap()))
        })
        .collect()
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = tiny_setup(dir.path());
    let out = dir.path().join("ab");
    ok(&[
        "ablate",
        "--data",
        s(&data.join("speeds.csv")),
        "--network",
        s(&data.join("network.csv")),
        "--config",
        s(&cfg),
        "--epochs",
        "1",
        "--variants",
        "Basic,+TA,full",
        "--out",
        s(&out),
    ]);
    let csv = read(out.join("ablation.csv"));
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("variant,mae,rmse,mape"));
    assert!(rows[1].starts_with("Basic,") && rows[2].starts_with("+TA,") && rows[3].starts_with("full,"));
    let bad = icst(&[
        "ablate",
        "--data",
        s(&data.join("speeds.csv")),
        "--network",
        s(&data.join("network.csv")),
        "--variants",
        "Basic,+XYZ",
        "--out",
        s(&dir.path().join("ab2")),
    ]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("valid tags"));
}
