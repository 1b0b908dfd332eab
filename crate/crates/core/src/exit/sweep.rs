//! Threshold sweeps and operating-point selection.
//!
//! Every evaluation sample is pushed through all segments and heads once;
//! each grid threshold is then scored from the recorded traces. A single
//! threshold is applied to every head.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{output_probs, CascadeCosts, CascadeModel, UntrainedPolicy};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::forward;
use crate::metrics::{self, EvalRecord};
use crate::prob::{argmax, gate_entropy, max_entropy};

/// Everything a sample produces when no head is allowed to stop it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub label: usize,
    pub head_probs: Vec<Vec<f32>>,
    pub head_entropy: Vec<f32>,
    pub final_probs: Vec<f32>,
    /// Seconds per stage (segment plus its head).
    pub stage_seconds: Vec<f64>,
}

pub fn trace_cascade(
    cascade: &CascadeModel,
    eval: &Dataset,
    untrained: UntrainedPolicy,
) -> Result<Vec<SampleTrace>> {
    cascade.check_trained(untrained)?;
    if eval.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    eval.samples
        .par_iter()
        .map(|s| {
            let mut trace = SampleTrace {
                label: s.label,
                head_probs: Vec::new(),
                head_entropy: Vec::new(),
                final_probs: Vec::new(),
                stage_seconds: Vec::new(),
            };
            let mut x = s.input.clone();
            for (k, seg) in cascade.segments.iter().enumerate() {
                let t0 = Instant::now();
                x = forward(seg, &x)?;
                if let Some(h) = cascade.heads.get(k) {
                    let p = output_probs(&h.graph, &forward(&h.graph, &x)?)?;
                    trace.head_entropy.push(gate_entropy(&p)?);
                    trace.head_probs.push(p);
                } else {
                    trace.final_probs = output_probs(seg, &x)?;
                }
                trace.stage_seconds.push(t0.elapsed().as_secs_f64());
            }
            Ok(trace)
        })
        .collect()
}

impl SampleTrace {
    /// Exit index under a common threshold.
    pub fn exit_at(&self, threshold: f32) -> usize {
        self.head_entropy
            .iter()
            .position(|&h| h <= threshold)
            .unwrap_or(self.head_entropy.len())
    }

    pub fn record(&self, threshold: f32, costs: &CascadeCosts) -> EvalRecord {
        let k = self.exit_at(threshold);
        let early = k < self.head_probs.len();
        let probs = if early {
            self.head_probs[k].clone()
        } else {
            self.final_probs.clone()
        };
        EvalRecord {
            label: self.label,
            predicted: argmax(&probs),
            probs,
            exit_index: k,
            early,
            latency_s: self.stage_seconds[..=k.min(self.stage_seconds.len() - 1)]
                .iter()
                .sum(),
            macs: costs.exit_macs(k),
        }
    }

    /// The same sample through the plain backbone.
    pub fn final_only(&self, costs: &CascadeCosts) -> EvalRecord {
        EvalRecord::final_exit(
            self.label,
            self.final_probs.clone(),
            0.0,
            costs.backbone_macs(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    /// Thresholds; 0 and `ln n` are always added.
    pub grid: Vec<f32>,
    /// Accuracy (percentage points) inf-opt may give up against acc-opt;
    /// `None` means unbounded.
    #[serde(default)]
    pub budget: Option<f64>,
}

impl SweepOptions {
    /// `points` evenly spaced thresholds over `[0, ln n]`.
    pub fn linear(num_classes: usize, points: usize) -> Self {
        let top = max_entropy(num_classes);
        let n = points.max(2);
        let grid = (0..n).map(|i| top * i as f32 / (n - 1) as f32).collect();
        Self { grid, budget: None }
    }

    fn normalized_grid(&self, num_classes: usize) -> Result<Vec<f32>> {
        if let Some(t) = self.grid.iter().find(|t| t.is_nan() || **t < 0.0) {
            return Err(Error::Config(format!("invalid threshold {t}")));
        }
        let mut g = self.grid.clone();
        g.push(0.0);
        g.push(max_entropy(num_classes));
        g.sort_by(f32::total_cmp);
        g.dedup();
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f32,
    pub accuracy: f64,
    pub early_exit_rate: f64,
    pub expected_macs: f64,
    pub mean_latency_ms: f64,
    /// Against the backbone's own predictions.
    pub label_loyalty: f64,
    pub probability_loyalty: f64,
    /// Samples leaving at each head.
    pub exits_per_head: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub model: String,
    pub num_classes: usize,
    pub samples: usize,
    pub budget: Option<f64>,
    pub backbone_macs: u64,
    pub final_only_accuracy: f64,
    pub points: Vec<SweepPoint>,
    /// Index into `points`.
    pub acc_opt: usize,
    pub inf_opt: usize,
}

impl SweepReport {
    /// Scores every threshold of `opts` on precomputed traces.
    pub fn from_traces(
        cascade: &CascadeModel,
        traces: &[SampleTrace],
        costs: &CascadeCosts,
        opts: &SweepOptions,
    ) -> Result<Self> {
        if traces.is_empty() {
            return Err(Error::EmptyEvalSet);
        }
        let base: Vec<EvalRecord> = traces.iter().map(|t| t.final_only(costs)).collect();
        let mut points = Vec::new();
        for t in opts.normalized_grid(cascade.num_classes)? {
            let recs: Vec<EvalRecord> = traces.iter().map(|tr| tr.record(t, costs)).collect();
            let mut exits = vec![0; cascade.heads.len()];
            for r in recs.iter().filter(|r| r.early) {
                exits[r.exit_index] += 1;
            }
            points.push(SweepPoint {
                threshold: t,
                accuracy: metrics::accuracy(&recs)?,
                early_exit_rate: metrics::early_exit_rate(&recs)?,
                expected_macs: metrics::expected_macs(&recs)?,
                mean_latency_ms: metrics::latency_stats(&recs)?.avg_ms,
                label_loyalty: metrics::label_loyalty(&recs, &base)?,
                probability_loyalty: metrics::probability_loyalty(&recs, &base)?,
                exits_per_head: exits,
            });
        }
        let (acc_opt, inf_opt) = select_operating_points(&points, opts.budget);
        Ok(Self {
            model: cascade.name.clone(),
            num_classes: cascade.num_classes,
            samples: traces.len(),
            budget: opts.budget,
            backbone_macs: costs.backbone_macs(),
            final_only_accuracy: metrics::accuracy(&base)?,
            points,
            acc_opt,
            inf_opt,
        })
    }

    pub fn acc_opt_point(&self) -> &SweepPoint {
        &self.points[self.acc_opt]
    }

    pub fn inf_opt_point(&self) -> &SweepPoint {
        &self.points[self.inf_opt]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "threshold,accuracy_pct,early_exit_rate_pct,expected_macs,mean_latency_ms,label_loyalty_pct,probability_loyalty_pct,operating_point\n",
        );
        for (i, p) in self.points.iter().enumerate() {
            let tag = match (i == self.acc_opt, i == self.inf_opt) {
                (true, true) => "acc_opt+inf_opt",
                (true, false) => "acc_opt",
                (false, true) => "inf_opt",
                _ => "",
            };
            let _ = writeln!(
                out,
                "{},{:.4},{:.4},{:.1},{:.4},{:.4},{:.4},{tag}",
                p.threshold,
                p.accuracy,
                p.early_exit_rate,
                p.expected_macs,
                p.mean_latency_ms,
                p.label_loyalty,
                p.probability_loyalty
            );
        }
        out
    }

    /// Whitespace-separated columns for gnuplot.
    pub fn to_plot_data(&self) -> String {
        let mut out = String::from("# threshold accuracy_pct early_exit_rate_pct expected_macs\n");
        for p in &self.points {
            let _ = writeln!(
                out,
                "{} {:.4} {:.4} {:.1}",
                p.threshold, p.accuracy, p.early_exit_rate, p.expected_macs
            );
        }
        out
    }
}

/// acc-opt: highest accuracy, then highest exit rate, then smallest threshold.
/// inf-opt: lowest expected MACs among points within `budget` of acc-opt's
/// accuracy, then highest accuracy, then smallest threshold.
/// `points` must be sorted by threshold.
pub fn select_operating_points(points: &[SweepPoint], budget: Option<f64>) -> (usize, usize) {
    let mut acc = 0;
    for (i, p) in points.iter().enumerate().skip(1) {
        let b = &points[acc];
        if p.accuracy > b.accuracy
            || (p.accuracy == b.accuracy && p.early_exit_rate > b.early_exit_rate)
        {
            acc = i;
        }
    }
    let floor = budget.map_or(f64::NEG_INFINITY, |b| points[acc].accuracy - b);
    let mut inf = acc;
    for (i, p) in points.iter().enumerate() {
        if p.accuracy < floor {
            continue;
        }
        let b = &points[inf];
        let better = p.expected_macs < b.expected_macs
            || (p.expected_macs == b.expected_macs && p.accuracy > b.accuracy)
            || (p.expected_macs == b.expected_macs && p.accuracy == b.accuracy && i < inf);
        if better {
            inf = i;
        }
    }
    (acc, inf)
}

/// Traces `eval` and scores the grid.
pub fn sweep_thresholds(
    cascade: &CascadeModel,
    eval: &Dataset,
    opts: &SweepOptions,
) -> Result<SweepReport> {
    let traces = trace_cascade(cascade, eval, UntrainedPolicy::Fail)?;
    SweepReport::from_traces(cascade, &traces, &cascade.costs()?, opts)
}
