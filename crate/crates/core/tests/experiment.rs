use edgeopt::exit::load_cascade;
use edgeopt::exit::SweepReport;
use edgeopt::experiment::{
    example_config, run_experiment, ExperimentConfig, RunManifest, Technique,
};
use edgeopt::graph::load_model;
use edgeopt::metrics::strip_timing;
use edgeopt::quant::QuantPlan;

fn read_json(path: &std::path::Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn every_technique_runs_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    for t in Technique::ALL {
        let out = dir.path().join(t.as_str());
        let cfg = example_config(t, &out);
        let outcome = run_experiment(&cfg).unwrap();
        let s = outcome.summary();
        println!(
            "{t}: acc {:.1} comp {:?} exits {:.1} macs {:.0} ll {:?}",
            s.accuracy, s.compression_rate, s.early_exit_rate, s.expected_macs, s.label_loyalty
        );
        let manifest: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
        assert_eq!(manifest.technique, t);
        load_model(out.join("model.edgeopt")).unwrap();
        match t {
            Technique::Base => {
                assert_eq!(s.speed_up, Some(1.0));
                assert_eq!(s.compression_rate, Some(1.0));
            }
            Technique::Prune => {
                load_model(out.join("pruned.edgeopt")).unwrap();
                assert!(s.compression_rate.unwrap() > 1.0);
            }
            Technique::Ptq | Technique::Dq => {
                load_model(out.join("quantized.edgeopt")).unwrap();
                QuantPlan::from_json(
                    &std::fs::read_to_string(out.join("quant_plan.json")).unwrap(),
                )
                .unwrap();
                // Whole files include the header, so the ratio sits below the per-layer 4x.
                assert!(s.compression_rate.unwrap() > 1.5);
            }
            _ => {
                let c = load_cascade(out.join("cascade")).unwrap();
                assert_eq!(c.heads.len(), 1);
                SweepReport::from_json(&std::fs::read_to_string(out.join("sweep.json")).unwrap())
                    .unwrap();
                let stages: Vec<_> = manifest.stages.iter().map(|s| s.name.as_str()).collect();
                if t == Technique::PtqEe {
                    // Exits are attached and trained before the cascade is quantized.
                    let pos = |n: &str| stages.iter().position(|s| *s == n).unwrap();
                    assert!(pos("attach") < pos("train-exits"));
                    assert!(pos("train-exits") < pos("quantize"));
                    assert!(pos("quantize") < pos("sweep"));
                }
            }
        }
    }
}

#[test]
fn prune_zero_matches_base() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = example_config(Technique::Prune, dir.path());
    cfg.prune.as_mut().unwrap().pr = 0.0;
    let out = run_experiment(&cfg).unwrap();
    let s = out.summary();
    let base = &out.manifest.summaries[0];
    assert_eq!(s.compression_rate, Some(1.0));
    assert_eq!(s.accuracy, base.accuracy);
}

#[test]
fn reruns_are_identical_apart_from_timing() {
    let dir = tempfile::tempdir().unwrap();
    let mut docs = Vec::new();
    for run in ["a", "b"] {
        let cfg = example_config(Technique::PtqEe, dir.path().join(run));
        run_experiment(&cfg).unwrap();
        let mut v = Vec::new();
        for f in [
            "run.json",
            "summary.json",
            "sweep.json",
            "train_report.json",
            "quant_plans.json",
        ] {
            let mut j = read_json(&dir.path().join(run).join(f));
            strip_timing(&mut j);
            v.push(serde_json::to_string(&j).unwrap());
        }
        docs.push(v);
    }
    assert_eq!(docs[0], docs[1]);
}

#[test]
fn config_file_paths_resolve_relative_to_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = example_config(Technique::Base, "results");
    cfg.data.train = edgeopt::experiment::DataSource::Csv {
        path: "train.csv".into(),
        shape: vec![1, 3, 8, 8],
    };
    let path = dir.path().join("exp.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    let loaded = ExperimentConfig::load(&path).unwrap();
    assert_eq!(loaded.output_dir, dir.path().join("results"));
    assert!(
        loaded.validate().is_err(),
        "missing train.csv must be reported"
    );
}
