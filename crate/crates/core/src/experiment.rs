//! End-to-end experiment pipelines driven by a TOML config.
//!
//! A run evaluates the (optionally refit) backbone, applies one technique,
//! evaluates the result with batch size 1 and writes every artifact plus a
//! `run.json` manifest naming the stages in execution order. All outputs
//! except wall-clock fields are a pure function of the config.
//!
//! Two environment variables override the file: `EDGEOPT_OUTPUT_DIR` and
//! `EDGEOPT_THREADS`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{gen_synthetic, load_csv, load_idx, Dataset, SyntheticSpec};
use crate::error::{Error, Result, StageContext};
use crate::exit::{
    attach_exits, quantize_cascade, refit_classifier, save_cascade, trace_cascade,
    train_exit_heads, CascadeModel, HeadPreset, SweepOptions, SweepReport, TrainConfig,
    UntrainedPolicy,
};
use crate::graph::{count_macs, forward, load_model, model_bytes, save_model, total_macs, Graph};
use crate::metrics::{self, summarize, Baseline, EvalRecord, MetricsSummary};
use crate::prune::{prune_structured, PruneConfig};
use crate::quant::{
    apply_dq, apply_ptq, calibrate, dynamic_plan, KindPreset, QuantMode, DYNAMIC_KINDS,
};
use crate::zoo::{self, ZooSpec};

pub const CONFIG_VERSION: u32 = 1;
pub const ENV_OUTPUT_DIR: &str = "EDGEOPT_OUTPUT_DIR";
pub const ENV_THREADS: &str = "EDGEOPT_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Technique {
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "prune")]
    Prune,
    #[serde(rename = "ptq")]
    Ptq,
    #[serde(rename = "dq")]
    Dq,
    #[serde(rename = "ee")]
    Ee,
    #[serde(rename = "ptq-ee")]
    PtqEe,
    #[serde(rename = "dq-ee")]
    DqEe,
}

impl Technique {
    pub const ALL: [Technique; 7] = [
        Self::Base,
        Self::Prune,
        Self::Ptq,
        Self::Dq,
        Self::Ee,
        Self::PtqEe,
        Self::DqEe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Base => "base",
            Self::Prune => "prune",
            Self::Ptq => "ptq",
            Self::Dq => "dq",
            Self::Ee => "ee",
            Self::PtqEe => "ptq-ee",
            Self::DqEe => "dq-ee",
        }
    }

    fn quant_mode(self) -> Option<QuantMode> {
        match self {
            Self::Ptq | Self::PtqEe => Some(QuantMode::Ptq),
            Self::Dq | Self::DqEe => Some(QuantMode::Dq),
            _ => None,
        }
    }

    fn uses_exits(self) -> bool {
        matches!(self, Self::Ee | Self::PtqEe | Self::DqEe)
    }
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Technique {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown technique `{s}` (base|prune|ptq|dq|ee|ptq-ee|dq-ee)"
                ))
            })
    }
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Idx { images: PathBuf, labels: PathBuf },
    Csv { path: PathBuf, shape: Vec<usize> },
    Synthetic(SyntheticSpec),
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            Self::Idx { images, labels } => load_idx(images, labels),
            Self::Csv { path, shape } => load_csv(path, shape),
            Self::Synthetic(spec) => gen_synthetic(spec),
        }
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            Self::Idx { images, labels } => {
                fix(images);
                fix(labels);
            }
            Self::Csv { path, .. } => fix(path),
            Self::Synthetic(_) => {}
        }
    }

    fn paths(&self) -> Vec<&Path> {
        match self {
            Self::Idx { images, labels } => vec![images, labels],
            Self::Csv { path, .. } => vec![path],
            Self::Synthetic(_) => vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: DataSource,
    pub eval: DataSource,
    /// Calibration data; defaults to the first `calib_samples` training samples.
    #[serde(default)]
    pub calib: Option<DataSource>,
    #[serde(default = "default_calib_samples")]
    pub calib_samples: usize,
}

fn default_calib_samples() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Existing model file. Mutually exclusive with `zoo`.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_arch")]
    pub arch: String,
    #[serde(default)]
    pub zoo: Option<ZooSpec>,
    /// Retrain the final fully connected layer on the training set first.
    #[serde(default)]
    pub refit: bool,
}

fn default_arch() -> String {
    "resnet".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    /// Preset name or comma-separated kinds; defaults to `full-graph` for
    /// static and to conv/FC for dynamic quantization.
    #[serde(default)]
    pub kinds: Option<String>,
}

/// Which sweep point an exit model is deployed at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatingPoint {
    AccOpt,
    #[default]
    InfOpt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExitConfig {
    pub attach_points: Vec<String>,
    #[serde(default = "default_preset")]
    pub preset: HeadPreset,
    /// Explicit thresholds; when empty, `grid_points` evenly spaced ones.
    #[serde(default)]
    pub grid: Vec<f32>,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default)]
    pub budget: Option<f64>,
    #[serde(default)]
    pub operating_point: OperatingPoint,
}

fn default_preset() -> HeadPreset {
    HeadPreset::Simple
}

fn default_grid_points() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub name: String,
    pub technique: Technique,
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub threads: Option<usize>,
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub prune: Option<PruneConfig>,
    #[serde(default)]
    pub quant: Option<QuantConfig>,
    #[serde(default)]
    pub exit: Option<ExitConfig>,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file, resolving relative paths against its directory
    /// and applying environment overrides.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_toml(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for src in [
            Some(&mut cfg.data.train),
            Some(&mut cfg.data.eval),
            cfg.data.calib.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            src.resolve(base);
        }
        if let Some(p) = cfg.model.path.as_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(dir) = std::env::var(ENV_OUTPUT_DIR) {
            self.output_dir = PathBuf::from(dir);
        }
        if let Ok(t) = std::env::var(ENV_THREADS) {
            let n = t
                .parse()
                .map_err(|_| Error::Config(format!("{ENV_THREADS}={t} is not a count")))?;
            self.threads = Some(n);
        }
        Ok(())
    }

    /// Checks that referenced files exist and the chosen technique has its parameters.
    pub fn validate(&self) -> Result<()> {
        match (&self.model.path, &self.model.zoo) {
            (Some(p), None) if !p.exists() => {
                return Err(Error::Config(format!("model `{}` not found", p.display())))
            }
            (Some(_), None) | (None, Some(_)) => {}
            _ => {
                return Err(Error::Config(
                    "model needs exactly one of `path` or `zoo`".into(),
                ))
            }
        }
        for src in [
            Some(&self.data.train),
            Some(&self.data.eval),
            self.data.calib.as_ref(),
        ]
        .into_iter()
        .flatten()
        {
            if let Some(p) = src.paths().into_iter().find(|p| !p.exists()) {
                return Err(Error::Config(format!(
                    "dataset file `{}` not found",
                    p.display()
                )));
            }
        }
        match self.technique {
            Technique::Prune => self
                .prune
                .as_ref()
                .ok_or_else(|| missing("prune"))?
                .validate()?,
            t if t.uses_exits() => {
                let e = self.exit.as_ref().ok_or_else(|| missing("exit"))?;
                if e.attach_points.is_empty() {
                    return Err(Error::Config("exit.attach_points is empty".into()));
                }
            }
            _ => {}
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone().unwrap_or_default();
        if self.train.is_none() {
            t.seed = self.seed;
        }
        t
    }

    fn quant_kinds(
        &self,
        mode: QuantMode,
    ) -> Result<std::collections::BTreeSet<crate::graph::LayerKind>> {
        match self.quant.as_ref().and_then(|q| q.kinds.as_deref()) {
            Some(sel) => KindPreset::parse_selection(sel),
            None => Ok(match mode {
                QuantMode::Ptq => KindPreset::FullGraph.kinds(),
                QuantMode::Dq => DYNAMIC_KINDS.into(),
            }),
        }
    }
}

fn missing(section: &str) -> Error {
    Error::Config(format!("technique needs a [{section}] section"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub artifacts: Vec<String>,
    pub elapsed_s: f64,
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub name: String,
    pub technique: Technique,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    pub summaries: Vec<MetricsSummary>,
    #[serde(default)]
    pub operating_threshold: Option<f32>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub output_dir: PathBuf,
    pub manifest: RunManifest,
    pub sweep: Option<SweepReport>,
}

impl ExperimentOutcome {
    /// Summary of the applied technique (the last row).
    pub fn summary(&self) -> &MetricsSummary {
        self.manifest
            .summaries
            .last()
            .expect("at least the base summary")
    }
}

/// Evaluates a single-path model, one sample at a time.
pub fn evaluate_graph(graph: &Graph, eval: &Dataset) -> Result<Vec<EvalRecord>> {
    if eval.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let macs = total_macs(graph)?;
    eval.samples
        .iter()
        .map(|s| {
            let t0 = Instant::now();
            let out = forward(graph, &s.input)?;
            let latency = t0.elapsed().as_secs_f64();
            let probs = crate::exit::output_probs(graph, &out)?;
            Ok(EvalRecord::final_exit(s.label, probs, latency, macs))
        })
        .collect()
}

fn cascade_bytes(c: &CascadeModel) -> Result<u64> {
    let mut total = 0;
    for g in c.segments.iter().chain(c.heads.iter().map(|h| &h.graph)) {
        total += model_bytes(g)?;
    }
    Ok(total)
}

struct Run {
    dir: PathBuf,
    stages: Vec<StageRecord>,
}

impl Run {
    fn stage<T>(
        &mut self,
        name: &str,
        f: impl FnOnce(&Path, &mut Vec<String>) -> Result<T>,
    ) -> Result<T> {
        let t0 = Instant::now();
        let mut artifacts = Vec::new();
        log::info!("stage `{name}`");
        let out = f(&self.dir, &mut artifacts).stage(name)?;
        self.stages.push(StageRecord {
            name: name.into(),
            artifacts,
            elapsed_s: t0.elapsed().as_secs_f64(),
        });
        Ok(out)
    }
}

fn write(
    dir: &Path,
    artifacts: &mut Vec<String>,
    name: &str,
    contents: impl AsRef<[u8]>,
) -> Result<()> {
    fs::write(dir.join(name), contents)?;
    artifacts.push(name.into());
    Ok(())
}

/// Runs the configured pipeline, honouring `threads` (default 1).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate().stage("config")?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.unwrap_or(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| run_inner(cfg))
}

fn run_inner(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    fs::create_dir_all(&cfg.output_dir)?;
    let mut run = Run {
        dir: cfg.output_dir.clone(),
        stages: Vec::new(),
    };
    let tcfg = cfg.train_config();

    let (train, eval, calib) = run.stage("data", |_, _| {
        let train = cfg.data.train.load()?;
        let eval = cfg.data.eval.load()?;
        let calib = match &cfg.data.calib {
            Some(src) => src.load()?,
            None => train.take(cfg.data.calib_samples),
        };
        Ok((train, eval, calib))
    })?;

    let backbone = run.stage("model", |dir, arts| {
        let g = match (&cfg.model.path, &cfg.model.zoo) {
            (Some(p), _) => load_model(p)?,
            (None, Some(spec)) => zoo::build(&cfg.model.arch, spec)?,
            (None, None) => unreachable!("validated"),
        };
        let g = if cfg.model.refit {
            let (g, report) = refit_classifier(&g, &train, &tcfg)?;
            write(
                dir,
                arts,
                "refit_report.json",
                serde_json::to_string_pretty(&report)?,
            )?;
            g
        } else {
            g
        };
        save_model(&g, dir.join("model.edgeopt"))?;
        arts.push("model.edgeopt".into());
        Ok(g)
    })?;

    let base_records = run.stage("base-eval", |_, _| evaluate_graph(&backbone, &eval))?;
    let base_bytes = model_bytes(&backbone)?;
    let base_summary = summarize("base", &base_records, base_bytes, None, None)?;
    let base_total = base_summary.total_time_s;
    let baseline = Baseline {
        records: &base_records,
        model_bytes: base_bytes,
        expected_macs: base_summary.expected_macs,
    };

    let technique = cfg.technique;
    let mut sweep_report = None;
    let mut operating_threshold = None;
    let variant: Option<(Vec<EvalRecord>, u64)> = match technique {
        Technique::Base => None,
        Technique::Prune => {
            let pcfg = cfg.prune.expect("validated");
            let pruned = run.stage("prune", |dir, arts| {
                let (g, report) = prune_structured(&backbone, &pcfg)?;
                save_model(&g, dir.join("pruned.edgeopt"))?;
                arts.push("pruned.edgeopt".into());
                write(
                    dir,
                    arts,
                    "prune_report.json",
                    serde_json::to_string_pretty(&report)?,
                )?;
                Ok(g)
            })?;
            let recs = run.stage("eval", |_, _| evaluate_graph(&pruned, &eval))?;
            Some((recs, model_bytes(&pruned)?))
        }
        Technique::Ptq | Technique::Dq => {
            let mode = technique.quant_mode().unwrap();
            let kinds = cfg.quant_kinds(mode)?;
            let q = run.stage("quantize", |dir, arts| {
                let (plan, g) = match mode {
                    QuantMode::Ptq => {
                        let plan = calibrate(&backbone, &calib.inputs(), &kinds)?;
                        let g = apply_ptq(&backbone, &plan)?;
                        (plan, g)
                    }
                    QuantMode::Dq => (
                        dynamic_plan(&backbone, &kinds)?,
                        apply_dq(&backbone, &kinds)?,
                    ),
                };
                write(dir, arts, "quant_plan.json", plan.to_json()?)?;
                save_model(&g, dir.join("quantized.edgeopt"))?;
                arts.push("quantized.edgeopt".into());
                Ok(g)
            })?;
            let recs = run.stage("eval", |_, _| evaluate_graph(&q, &eval))?;
            Some((recs, model_bytes(&q)?))
        }
        Technique::Ee | Technique::PtqEe | Technique::DqEe => {
            let ecfg = cfg.exit.as_ref().expect("validated");
            let points: Vec<&str> = ecfg.attach_points.iter().map(String::as_str).collect();
            let cascade = run.stage("attach", |_, _| {
                attach_exits(&backbone, &points, ecfg.preset, cfg.seed)
            })?;
            let cascade = run.stage("train-exits", |dir, arts| {
                let (c, reports) = train_exit_heads(&cascade, &train, &tcfg)?;
                write(
                    dir,
                    arts,
                    "train_report.json",
                    serde_json::to_string_pretty(&reports)?,
                )?;
                Ok(c)
            })?;
            let cascade = match technique.quant_mode() {
                None => cascade,
                Some(mode) => {
                    let kinds = cfg.quant_kinds(mode)?;
                    run.stage("quantize", |dir, arts| {
                        let calib_inputs = calib.inputs();
                        let (q, plans) =
                            quantize_cascade(&cascade, mode, &kinds, Some(&calib_inputs))?;
                        write(
                            dir,
                            arts,
                            "quant_plans.json",
                            serde_json::to_string_pretty(&plans)?,
                        )?;
                        Ok(q)
                    })?
                }
            };
            let (mut cascade, traces, report) = run.stage("sweep", |dir, arts| {
                let traces = trace_cascade(&cascade, &eval, UntrainedPolicy::Fail)?;
                let opts = if ecfg.grid.is_empty() {
                    SweepOptions {
                        budget: ecfg.budget,
                        ..SweepOptions::linear(cascade.num_classes, ecfg.grid_points)
                    }
                } else {
                    SweepOptions {
                        grid: ecfg.grid.clone(),
                        budget: ecfg.budget,
                    }
                };
                let report = SweepReport::from_traces(&cascade, &traces, &cascade.costs()?, &opts)?;
                write(dir, arts, "sweep.json", report.to_json()?)?;
                write(dir, arts, "sweep.csv", report.to_csv())?;
                write(dir, arts, "sweep.dat", report.to_plot_data())?;
                Ok((cascade, traces, report))
            })?;
            let point = match ecfg.operating_point {
                OperatingPoint::AccOpt => report.acc_opt_point(),
                OperatingPoint::InfOpt => report.inf_opt_point(),
            };
            let threshold = point.threshold;
            cascade.set_thresholds(threshold)?;
            operating_threshold = Some(threshold);
            let costs = cascade.costs()?;
            run.stage("save-cascade", |dir, arts| {
                save_cascade(&cascade, dir.join("cascade"))?;
                arts.push("cascade/manifest.json".into());
                Ok(())
            })?;
            let recs: Vec<EvalRecord> =
                traces.iter().map(|t| t.record(threshold, &costs)).collect();
            sweep_report = Some(report);
            Some((recs, cascade_bytes(&cascade)?))
        }
    };

    let summaries = run.stage("report", |dir, arts| {
        let mut rows = vec![base_summary.clone()];
        if let Some((recs, bytes)) = &variant {
            rows.push(summarize(
                technique.as_str(),
                recs,
                *bytes,
                Some(baseline),
                Some(base_total),
            )?);
        }
        write(
            dir,
            arts,
            "summary.json",
            serde_json::to_string_pretty(&rows)?,
        )?;
        write(dir, arts, "summary.csv", metrics::summaries_to_csv(&rows))?;
        Ok(rows)
    })?;

    let manifest = RunManifest {
        version: CONFIG_VERSION,
        name: cfg.name.clone(),
        technique,
        seed: cfg.seed,
        stages: run.stages,
        summaries,
        operating_threshold,
    };
    fs::write(
        cfg.output_dir.join("run.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(ExperimentOutcome {
        output_dir: cfg.output_dir.clone(),
        manifest,
        sweep: sweep_report,
    })
}

/// MAC report of a model file, for quick inspection.
pub fn describe_model(graph: &Graph) -> Result<serde_json::Value> {
    let cost = count_macs(graph)?;
    Ok(serde_json::json!({
        "name": graph.name,
        "input": graph.input.shape,
        "num_classes": graph.num_classes,
        "layers": graph.layers.len(),
        "kinds": graph.kind_histogram().iter().map(|(k, v)| (k.as_str().to_string(), *v)).collect::<std::collections::BTreeMap<_, _>>(),
        "cut_points": graph.cut_points(),
        "total_macs": cost.total_macs,
        "param_count": cost.param_count,
        "serialized_bytes": cost.serialized_bytes,
    }))
}

/// Small self-contained config used by tests and `edgeopt run --example`.
pub fn example_config(technique: Technique, output_dir: impl Into<PathBuf>) -> ExperimentConfig {
    let synth = |split, samples| {
        DataSource::Synthetic(SyntheticSpec {
            noise: 0.2,
            difficulty_spread: 0.4,
            dc_share: 0.25,
            ..SyntheticSpec::new(4, samples, vec![1, 3, 8, 8], 7).with_split(split)
        })
    };
    ExperimentConfig {
        version: CONFIG_VERSION,
        name: format!("toy-resnet-{technique}"),
        technique,
        seed: 3,
        output_dir: output_dir.into(),
        threads: None,
        model: ModelConfig {
            path: None,
            arch: "resnet".into(),
            zoo: Some(ZooSpec {
                classifier: zoo::ClassifierStyle::Flatten,
                ..ZooSpec::new([3, 8, 8], vec![8, 16], 4, 3)
            }),
            refit: true,
        },
        data: DataConfig {
            train: synth(0, 2000),
            eval: synth(1, 400),
            calib: None,
            calib_samples: 64,
        },
        train: Some(TrainConfig {
            seed: 3,
            ..TrainConfig::default()
        }),
        prune: Some(PruneConfig {
            pr: 0.25,
            cg: 2,
            protect_residual_io: true,
        }),
        quant: None,
        exit: Some(ExitConfig {
            attach_points: vec!["s0b0_out".into()],
            preset: HeadPreset::Simple,
            grid: vec![],
            grid_points: 50,
            budget: None,
            operating_point: OperatingPoint::InfOpt,
        }),
    }
}
