use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn edgeopt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgeopt"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn edgeopt")
}

fn json(dir: &Path, args: &[&str]) -> Value {
    let mut full = vec!["--json"];
    full.extend_from_slice(args);
    let out = edgeopt(dir, &full);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

const SHAPE: &[&str] = &["--shape", "1,3,8,8"];

fn with_shape<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(SHAPE);
    v
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    json(
        d,
        &[
            "gen-data",
            "--samples",
            "120",
            "--seed",
            "7",
            "--dc-share",
            "0.25",
            "--out",
            "train.csv",
        ],
    );
    json(
        d,
        &[
            "gen-data",
            "--samples",
            "40",
            "--seed",
            "7",
            "--split",
            "1",
            "--dc-share",
            "0.25",
            "--out",
            "eval.csv",
        ],
    );
    let m = json(
        d,
        &[
            "init-model",
            "--classifier",
            "flatten",
            "--seed",
            "3",
            "--out",
            "m.edgeopt",
        ],
    );
    assert_eq!(m["model"]["total_macs"], 180736);

    let t = json(
        d,
        &with_shape(&[
            "train-exits",
            "--model",
            "m.edgeopt",
            "--data",
            "train.csv",
            "--attach",
            "s0b0_out",
            "--epochs",
            "2",
            "--out",
            "casc",
        ]),
    );
    assert_eq!(t["heads"].as_array().unwrap().len(), 1);
    assert!(d.join("casc/manifest.json").exists());

    let p = json(
        d,
        &[
            "prune",
            "--model",
            "m.edgeopt",
            "--pr",
            "0.5",
            "--out",
            "p.edgeopt",
        ],
    );
    assert!(p["params_after"].as_u64().unwrap() < p["params_before"].as_u64().unwrap());

    json(
        d,
        &with_shape(&[
            "calibrate",
            "--model",
            "m.edgeopt",
            "--data",
            "eval.csv",
            "--limit",
            "8",
            "--out",
            "plan.json",
        ]),
    );
    let q = json(
        d,
        &[
            "quantize",
            "--model",
            "m.edgeopt",
            "--plan",
            "plan.json",
            "--out",
            "q.edgeopt",
        ],
    );
    assert!(q["covered_compression"].as_f64().unwrap() > 3.5);

    json(
        d,
        &with_shape(&[
            "quantize",
            "--cascade",
            "casc",
            "--data",
            "train.csv",
            "--limit",
            "8",
            "--out",
            "qcasc",
        ]),
    );
    let s = json(
        d,
        &with_shape(&[
            "sweep",
            "--cascade",
            "qcasc",
            "--data",
            "eval.csv",
            "--points",
            "5",
            "--out",
            "sw",
            "--apply",
            "acc-opt",
        ]),
    );
    assert!(s["points"].as_array().unwrap().len() >= 5);
    assert!(d.join("sw/sweep.csv").exists());
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("qcasc/manifest.json")).unwrap())
            .unwrap();
    let applied = manifest["heads"][0]["threshold"].as_f64().unwrap() as f32;
    let acc_opt = s["points"][s["acc_opt"].as_u64().unwrap() as usize]["threshold"]
        .as_f64()
        .unwrap() as f32;
    assert_eq!(applied, acc_opt);

    let preds = json(
        d,
        &with_shape(&[
            "infer",
            "--cascade",
            "qcasc",
            "--data",
            "eval.csv",
            "--limit",
            "4",
            "--threshold",
            "10",
        ]),
    );
    assert!(preds
        .as_array()
        .unwrap()
        .iter()
        .all(|p| p["exit_index"] == 0 && p["early"] == true));

    let e = json(
        d,
        &with_shape(&[
            "eval",
            "--cascade",
            "qcasc",
            "--baseline",
            "m.edgeopt",
            "--data",
            "eval.csv",
            "--name",
            "ptq-ee",
            "--out-json",
            "e.json",
        ]),
    );
    assert_eq!(e[0]["technique"], "base");
    assert_eq!(e[1]["technique"], "ptq-ee");

    let r = edgeopt(d, &["report", "e.json", "--csv", "all.csv"]);
    assert!(r.status.success());
    let csv = std::fs::read_to_string(d.join("all.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("technique,"));
}

#[test]
fn idx_round_trip_through_infer() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    json(
        d,
        &[
            "gen-data",
            "--samples",
            "10",
            "--shape",
            "1,1,6,6",
            "--out",
            "x.idx",
            "--labels-out",
            "y.idx",
        ],
    );
    json(
        d,
        &[
            "init-model",
            "--arch",
            "chain",
            "--input",
            "1,6,6",
            "--widths",
            "4",
            "--out",
            "m.edgeopt",
        ],
    );
    let preds = json(
        d,
        &[
            "infer",
            "--model",
            "m.edgeopt",
            "--data",
            "x.idx",
            "--labels",
            "y.idx",
        ],
    );
    assert_eq!(preds.as_array().unwrap().len(), 10);
}

#[test]
fn errors_exit_nonzero_with_json_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = edgeopt(
        tmp.path(),
        &[
            "--json",
            "prune",
            "--model",
            "missing.edgeopt",
            "--pr",
            "0.5",
            "--out",
            "x",
        ],
    );
    assert!(!out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["error"].as_str().unwrap().contains("prune"));

    // Untrained heads are refused unless allowed.
    let d = tmp.path();
    json(d, &["gen-data", "--samples", "4", "--out", "e.csv"]);
    json(d, &["init-model", "--out", "m.edgeopt"]);
    json(
        d,
        &with_shape(&[
            "train-exits",
            "--model",
            "m.edgeopt",
            "--data",
            "e.csv",
            "--attach",
            "s0b0_out",
            "--epochs",
            "0",
            "--out",
            "c",
        ]),
    );
    let refused = edgeopt(
        d,
        &with_shape(&["infer", "--cascade", "c", "--data", "e.csv"]),
    );
    assert!(!refused.status.success());
    json(
        d,
        &with_shape(&[
            "infer",
            "--cascade",
            "c",
            "--data",
            "e.csv",
            "--allow-untrained",
        ]),
    );

    let bad = edgeopt(d, &["infer", "--model", "m.edgeopt", "--data", "e.csv"]);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("--shape"));
}

#[test]
fn run_example_writes_config() {
    let tmp = tempfile::tempdir().unwrap();
    let v = json(
        tmp.path(),
        &["run", "--example", "dq", "--write-config", "c.toml"],
    );
    assert_eq!(v["config"], "c.toml");
    let text = std::fs::read_to_string(tmp.path().join("c.toml")).unwrap();
    assert!(text.contains("technique = \"dq\""));
}

#[test]
fn refit_out_saves_the_backbone() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    json(d, &["gen-data", "--samples", "40", "--out", "t.csv"]);
    json(d, &["init-model", "--out", "m.edgeopt"]);
    let t = json(
        d,
        &with_shape(&[
            "train-exits",
            "--model",
            "m.edgeopt",
            "--data",
            "t.csv",
            "--attach",
            "s0b0_out",
            "--epochs",
            "2",
            "--refit",
            "--refit-out",
            "base.edgeopt",
            "--out",
            "c",
        ]),
    );
    assert!(t["refit"]["train_accuracy"].is_number());
    assert_ne!(
        std::fs::read(d.join("base.edgeopt")).unwrap(),
        std::fs::read(d.join("m.edgeopt")).unwrap()
    );

    let missing = edgeopt(
        d,
        &with_shape(&[
            "train-exits",
            "--model",
            "m.edgeopt",
            "--data",
            "t.csv",
            "--attach",
            "s0b0_out",
            "--refit-out",
            "x",
            "--out",
            "c2",
        ]),
    );
    assert!(!missing.status.success());
}
