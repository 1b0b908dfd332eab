use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Parses `1,3,8,8` style lists.
fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| format!("`{v}` is not a valid number"))
        })
        .collect()
}

/// Comma-separated lists parse as one value; aliases keep clap from treating them as repeated args.
pub type Dims = Vec<usize>;
pub type Floats = Vec<f32>;

fn parse_dims(s: &str) -> Result<Dims, String> {
    let dims: Vec<usize> = parse_list(s)?;
    if dims.is_empty() || dims.contains(&0) {
        return Err("dimensions must be positive".into());
    }
    Ok(dims)
}

fn parse_floats(s: &str) -> Result<Floats, String> {
    parse_list(s)
}

#[derive(Parser)]
#[command(
    name = "edgeopt",
    version,
    about = "Pruning, uint8 quantization and early-exit experiments on small CNNs"
)]
struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,

    /// Worker threads for data-parallel stages (default 1).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

/// A dataset on disk: IDX (`--data` images plus `--labels`) or CSV (`--data` plus `--shape`).
#[derive(Args, Clone, Debug)]
pub struct DataArgs {
    /// IDX image file or CSV file.
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,

    /// IDX label file.
    #[arg(long, value_name = "PATH")]
    pub labels: Option<PathBuf>,

    /// Per-sample shape of CSV rows, e.g. 1,3,8,8.
    #[arg(long, value_parser = parse_dims)]
    pub shape: Option<Dims>,

    /// Use only the first N samples.
    #[arg(long, value_name = "N")]
    pub limit: Option<usize>,
}

/// Either a single model file or a cascade directory.
#[derive(Args, Clone, Debug)]
#[group(required = true, multiple = false)]
pub struct Target {
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,

    /// Cascade directory (or its manifest.json).
    #[arg(long, value_name = "DIR")]
    pub cascade: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic dataset.
    GenData {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value = "1,3,8,8", value_parser = parse_dims)]
        shape: Dims,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Noise stream; splits share class means but not samples.
        #[arg(long, default_value_t = 0)]
        split: u64,
        #[arg(long, default_value_t = 0.25)]
        noise: f32,
        /// Distance of the closest class means, in units of `noise`.
        #[arg(long, default_value_t = 6.0)]
        separation: f32,
        /// Per-sample contrast reduction range in [0, 1).
        #[arg(long, default_value_t = 0.0)]
        spread: f32,
        /// Share of class signal carried by per-channel offsets.
        #[arg(long, default_value_t = 0.0)]
        dc_share: f32,
        /// Output file; `.csv` writes CSV, anything else IDX images.
        #[arg(long)]
        out: PathBuf,
        /// IDX label file (required for IDX output).
        #[arg(long)]
        labels_out: Option<PathBuf>,
    },
    /// Build a seeded toy backbone.
    InitModel {
        /// resnet, mobilenet or chain.
        #[arg(long, default_value = "resnet")]
        arch: String,
        /// Sample shape C,H,W.
        #[arg(long, default_value = "3,8,8", value_parser = parse_dims)]
        input: Dims,
        #[arg(long, default_value = "8,16", value_parser = parse_dims)]
        widths: Dims,
        #[arg(long, default_value_t = 1)]
        blocks: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// gap or flatten.
        #[arg(long, default_value = "gap")]
        classifier: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attach exit heads to a model and train them on a frozen backbone.
    TrainExits {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Attach point tensor (repeatable).
        #[arg(long = "attach", required = true)]
        attach: Vec<String>,
        /// simple or block.
        #[arg(long, default_value = "simple")]
        preset: String,
        #[command(flatten)]
        train: TrainArgs,
        /// Retrain the backbone's final FC layer first.
        #[arg(long)]
        refit: bool,
        /// Also write the refitted backbone here.
        #[arg(long, requires = "refit")]
        refit_out: Option<PathBuf>,
        /// Output cascade directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Structured L1 filter pruning.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pr: f64,
        #[arg(long, default_value_t = 1)]
        cg: usize,
        /// Allow pruning layers that feed residual additions.
        #[arg(long)]
        no_residual_protection: bool,
        #[arg(long)]
        out: PathBuf,
        /// Also write the prune report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Record activation ranges for static quantization.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Preset (efficientnet-style, shufflenet-style, full-graph) or kind list.
        #[arg(long, default_value = "full-graph")]
        kinds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantize a model or cascade (ptq or dq).
    Quantize {
        #[command(flatten)]
        target: Target,
        #[arg(long, default_value = "ptq")]
        mode: String,
        /// Calibration plan from `calibrate` (single models, ptq).
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Calibration data (cascades, or models without --plan).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, value_parser = parse_dims)]
        shape: Option<Dims>,
        #[arg(long)]
        limit: Option<usize>,
        /// Defaults to full-graph for ptq and conv/FC for dq.
        #[arg(long)]
        kinds: Option<String>,
        /// Output model file or cascade directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep exit thresholds of a cascade.
    Sweep {
        #[arg(long)]
        cascade: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Evenly spaced thresholds over [0, ln n].
        #[arg(long, default_value_t = 50)]
        points: usize,
        /// Explicit thresholds (comma separated); overrides --points.
        #[arg(long, value_parser = parse_floats)]
        grid: Option<Floats>,
        /// Accuracy points inf-opt may give up against acc-opt.
        #[arg(long)]
        budget: Option<f64>,
        /// Directory for sweep.json, sweep.csv and sweep.dat.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Store the acc-opt or inf-opt threshold in the cascade manifest.
        #[arg(long, value_name = "acc-opt|inf-opt")]
        apply: Option<String>,
    },
    /// Predict samples one by one.
    Infer {
        #[command(flatten)]
        target: Target,
        #[command(flatten)]
        data: DataArgs,
        /// Override every exit threshold.
        #[arg(long)]
        threshold: Option<f32>,
        /// Run cascades whose heads were never trained.
        #[arg(long)]
        allow_untrained: bool,
    },
    /// Evaluate accuracy, loyalty, exit rate, latency and MACs.
    Eval {
        #[command(flatten)]
        target: Target,
        #[command(flatten)]
        data: DataArgs,
        /// Reference model for loyalty, compression and speed-up.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f32>,
        /// Name of the row in reports.
        #[arg(long, default_value = "eval")]
        name: String,
        /// Write the summaries as JSON.
        #[arg(long)]
        out_json: Option<PathBuf>,
        /// Write the summaries as CSV.
        #[arg(long)]
        out_csv: Option<PathBuf>,
    },
    /// Merge summary.json / run.json files into one table.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run a full experiment from a TOML config.
    Run {
        #[arg(long, required_unless_present = "example")]
        config: Option<PathBuf>,
        /// Use the built-in toy config for this technique.
        #[arg(long, value_name = "TECHNIQUE", conflicts_with = "config")]
        example: Option<String>,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the effective config here and exit.
        #[arg(long)]
        write_config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
        {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match commands::dispatch(cli.command, cli.threads) {
        Ok(out) => {
            let body = if cli.json {
                serde_json::to_string_pretty(&out.json).expect("serializable output") + "\n"
            } else {
                out.text
            };
            // A closed pipe (e.g. `| head`) is not an error worth reporting.
            let _ = std::io::stdout().lock().write_all(body.as_bytes());
            ExitCode::SUCCESS
        }
        Err(e) => {
            if cli.json {
                println!("{}", serde_json::json!({ "error": e.to_string() }));
            }
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
