//! Evaluation metrics over per-sample records.
//!
//! Raw values keep full precision; [`round2`] is for display only. Metrics
//! that do not apply (an empty latency bucket, loyalty of the baseline
//! against itself) serialize as the literal `"n/a"`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::{argmax, check_distribution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub label: usize,
    pub predicted: usize,
    pub probs: Vec<f32>,
    /// Head index, or the number of heads for the final classifier.
    pub exit_index: usize,
    pub early: bool,
    pub latency_s: f64,
    pub macs: u64,
}

impl EvalRecord {
    /// Record for a single-path model (always a final exit).
    pub fn final_exit(label: usize, probs: Vec<f32>, latency_s: f64, macs: u64) -> Self {
        Self {
            label,
            predicted: argmax(&probs),
            probs,
            exit_index: 0,
            early: false,
            latency_s,
            macs,
        }
    }
}

fn non_empty(records: &[EvalRecord]) -> Result<()> {
    if records.is_empty() {
        Err(Error::EmptyRecords)
    } else {
        Ok(())
    }
}

fn same_len(a: &[EvalRecord], b: &[EvalRecord]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    non_empty(a)
}

fn percent(count: usize, total: usize) -> f64 {
    100.0 * count as f64 / total as f64
}

/// Top-1 accuracy in percent; the prediction is `argmax(probs)`.
pub fn accuracy(records: &[EvalRecord]) -> Result<f64> {
    non_empty(records)?;
    let correct = records
        .iter()
        .filter(|r| argmax(&r.probs) == r.label)
        .count();
    Ok(percent(correct, records.len()))
}

/// Percentage of samples on which both runs predict the same class.
pub fn label_loyalty(opt: &[EvalRecord], base: &[EvalRecord]) -> Result<f64> {
    same_len(opt, base)?;
    let agree = opt
        .iter()
        .zip(base)
        .filter(|(o, b)| argmax(&o.probs) == argmax(&b.probs))
        .count();
    Ok(percent(agree, opt.len()))
}

/// Jensen-Shannon divergence in bits, in `[0, 1]`.
pub fn jsd_bits(p: &[f32], q: &[f32]) -> Result<f64> {
    check_distribution(p)?;
    check_distribution(q)?;
    if p.len() != q.len() {
        return Err(Error::InvalidDistribution(format!(
            "lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    let kl_to_mid = |a: f64, m: f64| if a > 0.0 { a * (a / m).log2() } else { 0.0 };
    let mut sum = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let (a, b) = (a as f64, b as f64);
        let m = 0.5 * (a + b);
        sum += 0.5 * (kl_to_mid(a, m) + kl_to_mid(b, m));
    }
    Ok(sum.clamp(0.0, 1.0))
}

/// Per-sample loyalty `1 - sqrt(JSD)`, in `[0, 1]`.
pub fn sample_probability_loyalty(p: &[f32], q: &[f32]) -> Result<f64> {
    Ok(1.0 - jsd_bits(p, q)?.sqrt())
}

/// Mean per-sample probability loyalty, in percent.
pub fn probability_loyalty(opt: &[EvalRecord], base: &[EvalRecord]) -> Result<f64> {
    same_len(opt, base)?;
    let mut sum = 0.0;
    for (o, b) in opt.iter().zip(base) {
        sum += sample_probability_loyalty(&b.probs, &o.probs)?;
    }
    Ok(100.0 * sum / opt.len() as f64)
}

/// `base / opt` model size.
pub fn compression_rate(base_bytes: f64, opt_bytes: f64) -> Result<f64> {
    if !(base_bytes > 0.0 && opt_bytes > 0.0) {
        return Err(Error::ZeroSize);
    }
    Ok(base_bytes / opt_bytes)
}

pub fn early_exit_rate(records: &[EvalRecord]) -> Result<f64> {
    non_empty(records)?;
    Ok(percent(
        records.iter().filter(|r| r.early).count(),
        records.len(),
    ))
}

/// `baseline_total / variant_total`.
pub fn speed_up(baseline_total_s: f64, variant_total_s: f64) -> Result<f64> {
    if !(baseline_total_s > 0.0 && variant_total_s > 0.0) {
        return Err(Error::ZeroSize);
    }
    Ok(baseline_total_s / variant_total_s)
}

/// Same ratio for deterministic compute cost.
pub fn macs_speed_up(baseline_macs: f64, variant_macs: f64) -> Result<f64> {
    speed_up(baseline_macs, variant_macs)
}

/// Rounds half-up to two decimals. A 1e-9 nudge keeps decimal ties such as
/// 2.675 (stored just below) on the upper side.
pub fn round2(x: f64) -> f64 {
    ((x * 100.0 + 0.5 + 1e-9).floor()) / 100.0
}

mod na {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => x.serialize(s),
            None => "n/a".serialize(s),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum V {
            Num(f64),
            Text(String),
        }
        match V::deserialize(d)? {
            V::Num(x) => Ok(Some(x)),
            V::Text(t) if t == "n/a" => Ok(None),
            V::Text(t) => Err(serde::de::Error::custom(format!(
                "expected a number or \"n/a\", got {t:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub total_s: f64,
    pub avg_ms: f64,
    #[serde(with = "na")]
    pub early_avg_ms: Option<f64>,
    #[serde(with = "na")]
    pub final_avg_ms: Option<f64>,
}

pub fn latency_stats(records: &[EvalRecord]) -> Result<LatencyStats> {
    non_empty(records)?;
    let mean_ms =
        |it: Vec<f64>| (!it.is_empty()).then(|| 1e3 * it.iter().sum::<f64>() / it.len() as f64);
    let total_s: f64 = records.iter().map(|r| r.latency_s).sum();
    Ok(LatencyStats {
        total_s,
        avg_ms: 1e3 * total_s / records.len() as f64,
        early_avg_ms: mean_ms(
            records
                .iter()
                .filter(|r| r.early)
                .map(|r| r.latency_s)
                .collect(),
        ),
        final_avg_ms: mean_ms(
            records
                .iter()
                .filter(|r| !r.early)
                .map(|r| r.latency_s)
                .collect(),
        ),
    })
}

pub fn expected_macs(records: &[EvalRecord]) -> Result<f64> {
    non_empty(records)?;
    Ok(records.iter().map(|r| r.macs as f64).sum::<f64>() / records.len() as f64)
}

/// Reference run that loyalty and speed-up are measured against.
#[derive(Debug, Clone, Copy)]
pub struct Baseline<'a> {
    pub records: &'a [EvalRecord],
    pub model_bytes: u64,
    pub expected_macs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub technique: String,
    pub samples: usize,
    pub accuracy: f64,
    pub model_bytes: u64,
    #[serde(with = "na")]
    pub compression_rate: Option<f64>,
    #[serde(with = "na")]
    pub label_loyalty: Option<f64>,
    #[serde(with = "na")]
    pub probability_loyalty: Option<f64>,
    pub early_exit_rate: f64,
    pub expected_macs: f64,
    #[serde(with = "na")]
    pub macs_speed_up: Option<f64>,
    pub total_time_s: f64,
    pub avg_time_ms: f64,
    #[serde(with = "na")]
    pub early_avg_ms: Option<f64>,
    #[serde(with = "na")]
    pub final_avg_ms: Option<f64>,
    #[serde(with = "na")]
    pub speed_up: Option<f64>,
}

/// Summarizes `records`. Without a baseline this is the reference run itself:
/// compression and speed-up are 1 and loyalty is not applicable.
pub fn summarize(
    technique: &str,
    records: &[EvalRecord],
    model_bytes: u64,
    baseline: Option<Baseline<'_>>,
    baseline_total_s: Option<f64>,
) -> Result<MetricsSummary> {
    let lat = latency_stats(records)?;
    let macs = expected_macs(records)?;
    let (compression, ll, pl, ms) = match baseline {
        Some(b) => (
            Some(compression_rate(b.model_bytes as f64, model_bytes as f64)?),
            Some(label_loyalty(records, b.records)?),
            Some(probability_loyalty(records, b.records)?),
            Some(macs_speed_up(b.expected_macs, macs)?),
        ),
        None => (Some(1.0), None, None, Some(1.0)),
    };
    let su = match (baseline, baseline_total_s) {
        (None, _) => Some(1.0),
        (Some(_), Some(t)) => speed_up(t, lat.total_s).ok(),
        (Some(_), None) => None,
    };
    Ok(MetricsSummary {
        technique: technique.to_string(),
        samples: records.len(),
        accuracy: accuracy(records)?,
        model_bytes,
        compression_rate: compression,
        label_loyalty: ll,
        probability_loyalty: pl,
        early_exit_rate: early_exit_rate(records)?,
        expected_macs: macs,
        macs_speed_up: ms,
        total_time_s: lat.total_s,
        avg_time_ms: lat.avg_ms,
        early_avg_ms: lat.early_avg_ms,
        final_avg_ms: lat.final_avg_ms,
        speed_up: su,
    })
}

/// Column order of [`summaries_to_csv`].
pub const SUMMARY_COLUMNS: [&str; 15] = [
    "technique",
    "samples",
    "accuracy_pct",
    "model_bytes",
    "compression_rate",
    "label_loyalty_pct",
    "probability_loyalty_pct",
    "early_exit_rate_pct",
    "expected_macs",
    "macs_speed_up",
    "total_time_s",
    "avg_time_ms",
    "early_exit_avg_ms",
    "final_exit_avg_ms",
    "speed_up",
];

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}", round2(x)))
}

/// CSV table, values rounded to two decimals.
pub fn summaries_to_csv(rows: &[MetricsSummary]) -> String {
    let mut out = SUMMARY_COLUMNS.join(",");
    out.push('\n');
    for s in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{:.6},{},{},{},{}",
            s.technique,
            s.samples,
            cell(Some(s.accuracy)),
            s.model_bytes,
            cell(s.compression_rate),
            cell(s.label_loyalty),
            cell(s.probability_loyalty),
            cell(Some(s.early_exit_rate)),
            cell(Some(s.expected_macs)),
            cell(s.macs_speed_up),
            s.total_time_s,
            cell(Some(s.avg_time_ms)),
            cell(s.early_avg_ms),
            cell(s.final_avg_ms),
            cell(s.speed_up),
        );
    }
    out
}

/// Keys holding wall-clock measurements or values derived from them.
pub const TIMING_KEYS: [&str; 10] = [
    "total_time_s",
    "avg_time_ms",
    "early_avg_ms",
    "final_avg_ms",
    "speed_up",
    "latency_s",
    "mean_latency_ms",
    "segment_latencies",
    "elapsed_s",
    "total_s",
];

/// Removes timing fields at any depth, for determinism comparisons.
pub fn strip_timing(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            map.retain(|k, _| !TIMING_KEYS.contains(&k.as_str()));
            map.values_mut().for_each(strip_timing);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_timing),
        _ => {}
    }
}
