use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use edgeopt::data::{
    gen_synthetic, load_csv, load_idx, save_csv, save_idx, Dataset, SyntheticSpec,
};
use edgeopt::error::StageContext;
use edgeopt::exit::{
    attach_exits, cascade_infer_with, load_cascade, quantize_cascade, refit_classifier,
    save_cascade, sweep_thresholds, train_exit_heads, CascadeModel, HeadPreset, SweepOptions,
    TrainConfig, UntrainedPolicy,
};
use edgeopt::experiment::{
    describe_model, evaluate_graph, example_config, run_experiment, ExperimentConfig, Technique,
};
use edgeopt::graph::{load_model, model_bytes, save_model, Graph};
use edgeopt::metrics::{self, summarize, Baseline, EvalRecord, MetricsSummary};
use edgeopt::prune::{prune_structured, PruneConfig};
use edgeopt::quant::{
    apply_dq, apply_ptq, calibrate, covered_param_bytes, KindPreset, QuantMode, QuantPlan,
    DYNAMIC_KINDS,
};
use edgeopt::zoo::{self, ClassifierStyle, ZooSpec};
use edgeopt::{Error, Result};
use serde_json::{json, Value};

use crate::{Command, DataArgs, Target, TrainArgs};

pub struct Output {
    pub json: Value,
    pub text: String,
}

impl Output {
    fn new(json: Value, text: impl Into<String>) -> Self {
        Self {
            json,
            text: text.into(),
        }
    }
}

fn load_data(
    path: &Path,
    labels: Option<&Path>,
    shape: Option<&[usize]>,
    limit: Option<usize>,
) -> Result<Dataset> {
    let ds = match (labels, shape) {
        (Some(l), _) => load_idx(path, l)?,
        (None, Some(s)) => load_csv(path, s)?,
        (None, None) if path.extension().is_some_and(|e| e == "csv") => {
            return Err(Error::Config("CSV data needs --shape".into()))
        }
        (None, None) => return Err(Error::Config("IDX data needs --labels".into())),
    };
    Ok(match limit {
        Some(n) => ds.take(n),
        None => ds,
    })
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        load_data(
            &self.data,
            self.labels.as_deref(),
            self.shape.as_deref(),
            self.limit,
        )
    }
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            momentum: self.momentum,
            seed: self.seed,
        }
    }
}

enum Loaded {
    Model(Graph),
    Cascade(CascadeModel),
}

impl Target {
    fn load(&self) -> Result<Loaded> {
        match (&self.model, &self.cascade) {
            (Some(m), None) => Ok(Loaded::Model(load_model(m)?)),
            (None, Some(c)) => Ok(Loaded::Cascade(load_cascade(c)?)),
            _ => Err(Error::Config(
                "give exactly one of --model or --cascade".into(),
            )),
        }
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

pub fn dispatch(cmd: Command, threads: Option<usize>) -> Result<Output> {
    match cmd {
        Command::GenData {
            classes,
            samples,
            shape,
            seed,
            split,
            noise,
            separation,
            spread,
            dc_share,
            out,
            labels_out,
        } => {
            let spec = SyntheticSpec {
                num_classes: classes,
                samples,
                shape,
                seed,
                split,
                separation,
                noise,
                difficulty_spread: spread,
                dc_share,
            };
            gen_data(&spec, &out, labels_out.as_deref()).stage("gen-data")
        }
        Command::InitModel {
            arch,
            input,
            widths,
            blocks,
            classes,
            classifier,
            seed,
            out,
        } => init_model(
            &arch,
            &input,
            widths,
            blocks,
            classes,
            &classifier,
            seed,
            &out,
        )
        .stage("init-model"),
        Command::TrainExits {
            model,
            data,
            attach,
            preset,
            train,
            refit,
            refit_out,
            out,
        } => {
            let refit = refit.then_some(refit_out.as_deref());
            train_exits(&model, &data, &attach, &preset, &train, refit, &out).stage("train-exits")
        }
        Command::Prune {
            model,
            pr,
            cg,
            no_residual_protection,
            out,
            report,
        } => prune(
            &model,
            pr,
            cg,
            !no_residual_protection,
            &out,
            report.as_deref(),
        )
        .stage("prune"),
        Command::Calibrate {
            model,
            data,
            kinds,
            out,
        } => calibrate_cmd(&model, &data, &kinds, &out).stage("calibrate"),
        Command::Quantize {
            target,
            mode,
            plan,
            data,
            labels,
            shape,
            limit,
            kinds,
            out,
        } => {
            let calib = match data {
                Some(d) => Some(load_data(&d, labels.as_deref(), shape.as_deref(), limit)?),
                None => None,
            };
            quantize(
                &target,
                &mode,
                plan.as_deref(),
                calib,
                kinds.as_deref(),
                &out,
            )
            .stage("quantize")
        }
        Command::Sweep {
            cascade,
            data,
            points,
            grid,
            budget,
            out,
            apply,
        } => sweep(
            &cascade,
            &data,
            points,
            grid,
            budget,
            out.as_deref(),
            apply.as_deref(),
        )
        .stage("sweep"),
        Command::Infer {
            target,
            data,
            threshold,
            allow_untrained,
        } => infer(&target, &data, threshold, allow_untrained).stage("infer"),
        Command::Eval {
            target,
            data,
            baseline,
            threshold,
            name,
            out_json,
            out_csv,
        } => eval(
            &target,
            &data,
            baseline.as_deref(),
            threshold,
            &name,
            out_json.as_deref(),
            out_csv.as_deref(),
        )
        .stage("eval"),
        Command::Report { inputs, csv } => report(&inputs, csv.as_deref()).stage("report"),
        Command::Run {
            config,
            example,
            out,
            write_config,
        } => run(
            config.as_deref(),
            example.as_deref(),
            out,
            write_config.as_deref(),
            threads,
        ),
    }
}

fn gen_data(spec: &SyntheticSpec, out: &Path, labels_out: Option<&Path>) -> Result<Output> {
    let ds = gen_synthetic(spec)?;
    if out.extension().is_some_and(|e| e == "csv") {
        save_csv(&ds, out)?;
    } else {
        let labels =
            labels_out.ok_or_else(|| Error::Config("IDX output needs --labels-out".into()))?;
        save_idx(&ds, out, labels)?;
    }
    let text = format!(
        "wrote {} samples ({} classes) to {}\n",
        ds.len(),
        ds.num_classes,
        out.display()
    );
    Ok(Output::new(
        json!({ "path": out, "labels": labels_out, "spec": spec }),
        text,
    ))
}

#[allow(clippy::too_many_arguments)]
fn init_model(
    arch: &str,
    input: &[usize],
    widths: Vec<usize>,
    blocks: usize,
    classes: usize,
    classifier: &str,
    seed: u64,
    out: &Path,
) -> Result<Output> {
    let input: [usize; 3] = input
        .try_into()
        .map_err(|_| Error::Config("--input takes three dimensions C,H,W".into()))?;
    let classifier = match classifier {
        "gap" => ClassifierStyle::Gap,
        "flatten" => ClassifierStyle::Flatten,
        other => {
            return Err(Error::Config(format!(
                "unknown classifier `{other}` (gap|flatten)"
            )))
        }
    };
    let spec = ZooSpec {
        blocks_per_stage: blocks,
        classifier,
        ..ZooSpec::new(input, widths, classes, seed)
    };
    let g = zoo::build(arch, &spec)?;
    let bytes = save_model(&g, out)?;
    let desc = describe_model(&g)?;
    let text = format!(
        "wrote {} ({bytes} bytes, {} layers, {} MACs)\ncut points: {}\n",
        out.display(),
        g.layers.len(),
        desc["total_macs"],
        g.cut_points().join(", ")
    );
    Ok(Output::new(json!({ "path": out, "model": desc }), text))
}

fn train_exits(
    model: &Path,
    data: &DataArgs,
    attach: &[String],
    preset: &str,
    train: &TrainArgs,
    refit: Option<Option<&Path>>,
    out: &Path,
) -> Result<Output> {
    let mut g = load_model(model)?;
    let ds = data.load()?;
    let cfg = train.config();
    let mut text = String::new();
    let mut refit_report = None;
    if let Some(refit_out) = refit {
        let (ng, r) = refit_classifier(&g, &ds, &cfg)?;
        let _ = writeln!(
            text,
            "refit classifier: train accuracy {:.2}%",
            r.train_accuracy
        );
        if let Some(path) = refit_out {
            save_model(&ng, path)?;
            let _ = writeln!(text, "wrote {}", path.display());
        }
        g = ng;
        refit_report = Some(r);
    }
    let preset: HeadPreset = preset.parse()?;
    let points: Vec<&str> = attach.iter().map(String::as_str).collect();
    let cascade = attach_exits(&g, &points, preset, cfg.seed)?;
    let (cascade, reports) = train_exit_heads(&cascade, &ds, &cfg)?;
    save_cascade(&cascade, out)?;
    for r in &reports {
        let _ = writeln!(
            text,
            "{}: loss {:.4} -> {:.4}, train accuracy {:.2}%",
            r.target,
            r.initial_loss,
            r.epoch_losses.last().copied().unwrap_or(r.initial_loss),
            r.train_accuracy
        );
    }
    let _ = writeln!(text, "wrote cascade to {}", out.display());
    Ok(Output::new(
        json!({ "cascade": out, "refit": refit_report, "heads": reports }),
        text,
    ))
}

fn prune(
    model: &Path,
    pr: f64,
    cg: usize,
    protect: bool,
    out: &Path,
    report_path: Option<&Path>,
) -> Result<Output> {
    let g = load_model(model)?;
    let cfg = PruneConfig {
        pr,
        cg,
        protect_residual_io: protect,
    };
    cfg.validate()?;
    let (p, report) = prune_structured(&g, &cfg)?;
    save_model(&p, out)?;
    if let Some(rp) = report_path {
        fs::write(rp, serde_json::to_string_pretty(&report)?)?;
    }
    let text = format!(
        "params {} -> {} ({:.2}x), wrote {}\n",
        report.params_before,
        report.params_after,
        metrics::round2(report.compression_rate),
        out.display()
    );
    Ok(Output::new(to_json(&report)?, text))
}

fn calibrate_cmd(model: &Path, data: &DataArgs, kinds: &str, out: &Path) -> Result<Output> {
    let g = load_model(model)?;
    let ds = data.load()?;
    let plan = calibrate(&g, &ds.inputs(), &KindPreset::parse_selection(kinds)?)?;
    fs::write(out, plan.to_json()?)?;
    let text = format!(
        "calibrated {} tensors on {} samples, wrote {}\n",
        plan.activation_params.len(),
        ds.len(),
        out.display()
    );
    Ok(Output::new(
        json!({ "plan": out, "samples": ds.len(), "tensors": plan.activation_params.len() }),
        text,
    ))
}

fn quantize(
    target: &Target,
    mode: &str,
    plan: Option<&Path>,
    calib: Option<Dataset>,
    kinds: Option<&str>,
    out: &Path,
) -> Result<Output> {
    let mode: QuantMode = mode.parse()?;
    let kinds = match kinds {
        Some(k) => KindPreset::parse_selection(k)?,
        None if mode == QuantMode::Ptq => KindPreset::FullGraph.kinds(),
        None => DYNAMIC_KINDS.into(),
    };
    match target.load()? {
        Loaded::Model(g) => {
            let q = match mode {
                QuantMode::Dq => apply_dq(&g, &kinds)?,
                QuantMode::Ptq => {
                    let plan = match (plan, &calib) {
                        (Some(p), _) => QuantPlan::from_json(&fs::read_to_string(p)?)?,
                        (None, Some(ds)) => calibrate(&g, &ds.inputs(), &kinds)?,
                        (None, None) => return Err(Error::EmptyCalibrationSet),
                    };
                    apply_ptq(&g, &plan)?
                }
            };
            save_model(&q, out)?;
            let (before, after) = (model_bytes(&g)?, model_bytes(&q)?);
            let (cb, ca) = covered_param_bytes(&g, &q);
            let covered = if ca > 0 { cb as f64 / ca as f64 } else { 1.0 };
            let text = format!(
                "model bytes {before} -> {after} ({:.2}x); covered layers {cb} -> {ca} ({:.2}x); wrote {}\n",
                metrics::round2(before as f64 / after as f64),
                metrics::round2(covered),
                out.display()
            );
            let j = json!({
                "path": out, "mode": mode, "bytes_before": before, "bytes_after": after,
                "covered_bytes_before": cb, "covered_bytes_after": ca, "covered_compression": covered,
            });
            Ok(Output::new(j, text))
        }
        Loaded::Cascade(c) => {
            let inputs = calib.map(|d| d.inputs());
            let (q, plans) = quantize_cascade(&c, mode, &kinds, inputs.as_deref())?;
            save_cascade(&q, out)?;
            fs::write(
                out.join("quant_plans.json"),
                serde_json::to_string_pretty(&plans)?,
            )?;
            let text = format!(
                "quantized {} segments and {} heads, wrote {}\n",
                q.segments.len(),
                q.heads.len(),
                out.display()
            );
            Ok(Output::new(json!({ "cascade": out, "mode": mode }), text))
        }
    }
}

fn sweep(
    cascade_path: &Path,
    data: &DataArgs,
    points: usize,
    grid: Option<Vec<f32>>,
    budget: Option<f64>,
    out: Option<&Path>,
    apply: Option<&str>,
) -> Result<Output> {
    let mut cascade = load_cascade(cascade_path)?;
    let ds = data.load()?;
    let opts = match grid {
        Some(g) => SweepOptions { grid: g, budget },
        None => SweepOptions {
            budget,
            ..SweepOptions::linear(cascade.num_classes, points)
        },
    };
    let report = sweep_thresholds(&cascade, &ds, &opts)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("sweep.json"), report.to_json()?)?;
        fs::write(dir.join("sweep.csv"), report.to_csv())?;
        fs::write(dir.join("sweep.dat"), report.to_plot_data())?;
    }
    if let Some(which) = apply {
        let t = match which {
            "acc-opt" | "acc_opt" => report.acc_opt_point().threshold,
            "inf-opt" | "inf_opt" => report.inf_opt_point().threshold,
            other => {
                return Err(Error::Config(format!(
                    "--apply takes acc-opt or inf-opt, not `{other}`"
                )))
            }
        };
        cascade.set_thresholds(t)?;
        let dir = if cascade_path.is_dir() {
            cascade_path
        } else {
            cascade_path.parent().unwrap_or(Path::new("."))
        };
        save_cascade(&cascade, dir)?;
    }
    let (a, i) = (report.acc_opt_point(), report.inf_opt_point());
    let text = format!(
        "{} thresholds on {} samples; final-only accuracy {:.2}%\n\
         acc-opt: T={} accuracy {:.2}% exits {:.2}% MACs {:.0}\n\
         inf-opt: T={} accuracy {:.2}% exits {:.2}% MACs {:.0}\n",
        report.points.len(),
        report.samples,
        report.final_only_accuracy,
        a.threshold,
        a.accuracy,
        a.early_exit_rate,
        a.expected_macs,
        i.threshold,
        i.accuracy,
        i.early_exit_rate,
        i.expected_macs
    );
    Ok(Output::new(to_json(&report)?, text))
}

/// Records for a model or cascade, one sample at a time.
fn records(
    target: &Loaded,
    ds: &Dataset,
    threshold: Option<f32>,
    untrained: UntrainedPolicy,
) -> Result<(Vec<EvalRecord>, u64)> {
    match target {
        Loaded::Model(g) => Ok((evaluate_graph(g, ds)?, model_bytes(g)?)),
        Loaded::Cascade(c) => {
            let mut c = c.clone();
            if let Some(t) = threshold {
                c.set_thresholds(t)?;
            }
            let mut recs = Vec::with_capacity(ds.len());
            for s in &ds.samples {
                let p = cascade_infer_with(&c, &s.input, untrained)?;
                recs.push(EvalRecord {
                    label: s.label,
                    predicted: p.label,
                    early: p.exit_index < c.heads.len(),
                    exit_index: p.exit_index,
                    latency_s: p.segment_latencies.iter().sum(),
                    macs: p.macs_executed,
                    probs: p.probs,
                });
            }
            let mut bytes = 0;
            for g in c.segments.iter().chain(c.heads.iter().map(|h| &h.graph)) {
                bytes += model_bytes(g)?;
            }
            Ok((recs, bytes))
        }
    }
}

fn infer(
    target: &Target,
    data: &DataArgs,
    threshold: Option<f32>,
    allow_untrained: bool,
) -> Result<Output> {
    let loaded = target.load()?;
    let ds = data.load()?;
    let policy = if allow_untrained {
        UntrainedPolicy::Warn
    } else {
        UntrainedPolicy::Fail
    };
    let (recs, _) = records(&loaded, &ds, threshold, policy)?;
    let mut text = String::from("index,label,predicted,exit,macs\n");
    let rows: Vec<Value> = recs
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let _ = writeln!(
                text,
                "{i},{},{},{},{}",
                r.label, r.predicted, r.exit_index, r.macs
            );
            json!({
                "index": i, "label": r.label, "predicted": r.predicted, "exit_index": r.exit_index,
                "early": r.early, "probs": r.probs, "macs": r.macs, "latency_s": r.latency_s,
            })
        })
        .collect();
    Ok(Output::new(Value::Array(rows), text))
}

fn eval(
    target: &Target,
    data: &DataArgs,
    baseline: Option<&Path>,
    threshold: Option<f32>,
    name: &str,
    out_json: Option<&Path>,
    out_csv: Option<&Path>,
) -> Result<Output> {
    let loaded = target.load()?;
    let ds = data.load()?;
    let (recs, bytes) = records(&loaded, &ds, threshold, UntrainedPolicy::Fail)?;
    let rows: Vec<MetricsSummary> = match baseline {
        None => vec![summarize(name, &recs, bytes, None, None)?],
        Some(b) => {
            let bg = load_model(b)?;
            let brecs = evaluate_graph(&bg, &ds)?;
            let base = summarize("base", &brecs, model_bytes(&bg)?, None, None)?;
            let bl = Baseline {
                records: &brecs,
                model_bytes: base.model_bytes,
                expected_macs: base.expected_macs,
            };
            let s = summarize(name, &recs, bytes, Some(bl), Some(base.total_time_s))?;
            vec![base, s]
        }
    };
    if let Some(p) = out_json {
        fs::write(p, serde_json::to_string_pretty(&rows)?)?;
    }
    let csv = metrics::summaries_to_csv(&rows);
    if let Some(p) = out_csv {
        fs::write(p, &csv)?;
    }
    Ok(Output::new(to_json(&rows)?, csv))
}

fn report(inputs: &[PathBuf], csv_out: Option<&Path>) -> Result<Output> {
    let mut rows: Vec<MetricsSummary> = Vec::new();
    for p in inputs {
        let v: Value = serde_json::from_str(&fs::read_to_string(p)?)?;
        let list = match v.get("summaries") {
            Some(s) => s.clone(),
            None => v,
        };
        let parsed: Vec<MetricsSummary> = match list {
            Value::Array(_) => serde_json::from_value(list)?,
            single => vec![serde_json::from_value(single)?],
        };
        // Each eval file repeats its baseline row; keep the first of each technique.
        for row in parsed {
            if rows.iter().any(|r| r.technique == row.technique) {
                log::info!(
                    "skipping repeated `{}` row from {}",
                    row.technique,
                    p.display()
                );
            } else {
                rows.push(row);
            }
        }
    }
    let csv = metrics::summaries_to_csv(&rows);
    if let Some(p) = csv_out {
        fs::write(p, &csv)?;
    }
    Ok(Output::new(to_json(&rows)?, csv))
}

fn run(
    config: Option<&Path>,
    example: Option<&str>,
    out: Option<PathBuf>,
    write_config: Option<&Path>,
    threads: Option<usize>,
) -> Result<Output> {
    let mut cfg = match (config, example) {
        (Some(p), _) => ExperimentConfig::load(p).stage("config")?,
        (None, Some(t)) => {
            let t: Technique = t.parse()?;
            let mut c = example_config(t, "out");
            c.apply_env()?;
            c
        }
        (None, None) => return Err(Error::Config("give --config or --example".into())),
    };
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    if threads.is_some() {
        cfg.threads = threads;
    }
    if let Some(p) = write_config {
        fs::write(p, cfg.to_toml()?)?;
        return Ok(Output::new(
            json!({ "config": p }),
            format!("wrote {}\n", p.display()),
        ));
    }
    let outcome = run_experiment(&cfg)?;
    let mut text = metrics::summaries_to_csv(&outcome.manifest.summaries);
    if let Some(t) = outcome.manifest.operating_threshold {
        let _ = writeln!(text, "operating threshold: {t}");
    }
    let _ = writeln!(text, "artifacts in {}", outcome.output_dir.display());
    Ok(Output::new(to_json(&outcome.manifest)?, text))
}
