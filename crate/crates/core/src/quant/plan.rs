use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::params::{compute_qparams, quantize_tensor, round_half_up, QuantParams};
use crate::error::{Error, Result};
use crate::graph::{forward_observed, Graph, LayerKind, LayerQuant, LayerSpec, Op};
use crate::tensor::Tensor;

/// Kinds with a static (u8 in, u8 out) implementation.
pub const STATIC_KINDS: [LayerKind; 10] = [
    LayerKind::Conv2D,
    LayerKind::DepthwiseConv2D,
    LayerKind::FullyConnected,
    LayerKind::ReLU,
    LayerKind::ReLU6,
    LayerKind::MaxPool,
    LayerKind::AvgPool,
    LayerKind::GlobalAvgPool,
    LayerKind::Add,
    LayerKind::Flatten,
];

/// Kinds with a dynamic implementation (those carrying weights).
pub const DYNAMIC_KINDS: [LayerKind; 3] = [
    LayerKind::Conv2D,
    LayerKind::DepthwiseConv2D,
    LayerKind::FullyConnected,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    Ptq,
    Dq,
}

impl fmt::Display for QuantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuantMode::Ptq => "ptq",
            QuantMode::Dq => "dq",
        })
    }
}

impl FromStr for QuantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ptq" | "static" => Ok(QuantMode::Ptq),
            "dq" | "dynamic" => Ok(QuantMode::Dq),
            other => Err(Error::Config(format!(
                "unknown quantization mode `{other}`"
            ))),
        }
    }
}

/// Named coverage selections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KindPreset {
    /// Convolutions only; everything else stays f32.
    EfficientnetStyle,
    /// Convolutions and fully connected layers.
    ShufflenetStyle,
    /// Every kind with a quantized implementation.
    FullGraph,
}

impl KindPreset {
    pub fn kinds(self) -> BTreeSet<LayerKind> {
        match self {
            KindPreset::EfficientnetStyle => [LayerKind::Conv2D, LayerKind::DepthwiseConv2D].into(),
            KindPreset::ShufflenetStyle => [
                LayerKind::Conv2D,
                LayerKind::DepthwiseConv2D,
                LayerKind::FullyConnected,
            ]
            .into(),
            KindPreset::FullGraph => STATIC_KINDS.into(),
        }
    }

    /// Parses a preset name or a comma-separated list of kinds.
    pub fn parse_selection(s: &str) -> Result<BTreeSet<LayerKind>> {
        match s.trim() {
            "efficientnet-style" => Ok(KindPreset::EfficientnetStyle.kinds()),
            "shufflenet-style" => Ok(KindPreset::ShufflenetStyle.kinds()),
            "full-graph" => Ok(KindPreset::FullGraph.kinds()),
            "" | "none" => Ok(BTreeSet::new()),
            list => list
                .split(',')
                .map(|k| {
                    LayerKind::parse(k)
                        .ok_or_else(|| Error::Config(format!("unknown layer kind `{k}`")))
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TensorRange {
    pub min: f32,
    pub max: f32,
}

/// Which layers to quantize, and with which parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantPlan {
    pub mode: QuantMode,
    pub quantized_kinds: BTreeSet<LayerKind>,
    /// Observed activation extremes per tensor (static plans only).
    pub calibration_summary: BTreeMap<String, TensorRange>,
    /// Activation parameters derived from `calibration_summary`.
    pub activation_params: BTreeMap<String, QuantParams>,
    /// Per-layer weight parameters.
    pub weight_params: BTreeMap<String, QuantParams>,
}

impl QuantPlan {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn covered(layer: &LayerSpec, kinds: &BTreeSet<LayerKind>, mode: QuantMode) -> bool {
    let supported: &[LayerKind] = match mode {
        QuantMode::Ptq => &STATIC_KINDS,
        QuantMode::Dq => &DYNAMIC_KINDS,
    };
    layer.quant.is_none() && kinds.contains(&layer.kind()) && supported.contains(&layer.kind())
}

fn passes_params_through(op: &Op) -> bool {
    matches!(op, Op::ReLU | Op::ReLU6 | Op::MaxPool(_) | Op::Flatten)
}

fn weight_params(
    graph: &Graph,
    kinds: &BTreeSet<LayerKind>,
    mode: QuantMode,
) -> Result<BTreeMap<String, QuantParams>> {
    let mut out = BTreeMap::new();
    for layer in graph.layers.iter().filter(|l| covered(l, kinds, mode)) {
        if let Some(w) = &layer.weight {
            let values = w.f32_values();
            let (lo, hi) = values
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| {
                    (a.min(v), b.max(v))
                });
            out.insert(layer.name.clone(), compute_qparams(lo, hi)?);
        }
    }
    Ok(out)
}

/// Runs f32 inference over `calib_set` and records the running extremes of
/// every tensor entering or leaving a covered layer.
pub fn calibrate(
    graph: &Graph,
    calib_set: &[Tensor],
    kinds: &BTreeSet<LayerKind>,
) -> Result<QuantPlan> {
    if calib_set.is_empty() {
        return Err(Error::EmptyCalibrationSet);
    }
    graph.validate()?;
    let mode = QuantMode::Ptq;
    let mut watched = BTreeSet::new();
    for layer in graph.layers.iter().filter(|l| covered(l, kinds, mode)) {
        watched.extend(layer.inputs.iter().cloned());
        watched.insert(layer.output.clone());
    }
    let mut ranges: BTreeMap<String, TensorRange> = BTreeMap::new();
    for sample in calib_set {
        forward_observed(graph, sample, |name, t| {
            if !watched.contains(name) {
                return;
            }
            let values = t.f32_values();
            let entry = ranges.entry(name.to_string()).or_insert(TensorRange {
                min: f32::INFINITY,
                max: f32::NEG_INFINITY,
            });
            for &v in values.iter() {
                entry.min = entry.min.min(v);
                entry.max = entry.max.max(v);
            }
        })?;
    }
    let activation_params = ranges
        .iter()
        .map(|(k, r)| Ok((k.clone(), compute_qparams(r.min, r.max)?)))
        .collect::<Result<_>>()?;
    Ok(QuantPlan {
        mode,
        quantized_kinds: kinds.clone(),
        calibration_summary: ranges,
        activation_params,
        weight_params: weight_params(graph, kinds, mode)?,
    })
}

/// Plan for dynamic quantization: weight parameters only.
pub fn dynamic_plan(graph: &Graph, kinds: &BTreeSet<LayerKind>) -> Result<QuantPlan> {
    Ok(QuantPlan {
        mode: QuantMode::Dq,
        quantized_kinds: kinds.clone(),
        calibration_summary: BTreeMap::new(),
        activation_params: BTreeMap::new(),
        weight_params: weight_params(graph, kinds, QuantMode::Dq)?,
    })
}

fn quantized_weight(layer: &LayerSpec, plan: &QuantPlan) -> Result<(Tensor, QuantParams)> {
    let w = layer.weight.as_ref().ok_or_else(|| Error::MissingWeight {
        layer: layer.name.clone(),
        what: "weight",
    })?;
    let qp = plan
        .weight_params
        .get(&layer.name)
        .copied()
        .ok_or_else(|| Error::PlanCoverage(format!("weights of layer `{}`", layer.name)))?;
    Ok((quantize_tensor(w, qp), qp))
}

/// Replaces every covered layer with its static quantized variant.
pub fn apply_ptq(graph: &Graph, plan: &QuantPlan) -> Result<Graph> {
    if plan.mode != QuantMode::Ptq {
        return Err(Error::Config("apply_ptq needs a PTQ plan".into()));
    }
    graph.validate()?;
    let mut out = graph.clone();
    for layer in out.layers.iter_mut() {
        if !covered(layer, &plan.quantized_kinds, QuantMode::Ptq) {
            continue;
        }
        let inputs = layer
            .inputs
            .iter()
            .map(|t| {
                plan.activation_params
                    .get(t)
                    .copied()
                    .ok_or_else(|| Error::PlanCoverage(format!("activation `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let output = if passes_params_through(&layer.op) {
            inputs[0]
        } else {
            plan.activation_params
                .get(&layer.output)
                .copied()
                .ok_or_else(|| Error::PlanCoverage(format!("activation `{}`", layer.output)))?
        };
        let mut bias_i32 = None;
        if layer.kind().has_weights() {
            let (w, wqp) = quantized_weight(layer, plan)?;
            let acc_scale = inputs[0].scale as f64 * wqp.scale as f64;
            let bias = layer.bias.take().ok_or_else(|| Error::MissingWeight {
                layer: layer.name.clone(),
                what: "bias",
            })?;
            bias_i32 = Some(
                bias.f32_values()
                    .iter()
                    .map(|&b| {
                        round_half_up(b as f64 / acc_scale).clamp(i32::MIN as f64, i32::MAX as f64)
                            as i32
                    })
                    .collect(),
            );
            layer.weight = Some(w);
        }
        layer.quant = Some(LayerQuant::Static {
            inputs,
            output,
            bias_i32,
        });
    }
    out.validate()?;
    Ok(out)
}

/// Quantizes the weights of covered layers; activations are quantized per
/// call from their observed range. Bias stays f32.
pub fn apply_dq(graph: &Graph, kinds: &BTreeSet<LayerKind>) -> Result<Graph> {
    let plan = dynamic_plan(graph, kinds)?;
    let mut out = graph.clone();
    for layer in out.layers.iter_mut() {
        if !covered(layer, kinds, QuantMode::Dq) {
            continue;
        }
        let (w, _) = quantized_weight(layer, &plan)?;
        layer.weight = Some(w);
        layer.quant = Some(LayerQuant::Dynamic);
    }
    out.validate()?;
    Ok(out)
}

/// Parameter bytes of the layers quantized in `quantized`, before and after.
pub fn covered_param_bytes(original: &Graph, quantized: &Graph) -> (u64, u64) {
    let mut before = 0;
    let mut after = 0;
    for layer in quantized.layers.iter().filter(|l| l.quant.is_some()) {
        if let Some(orig) = original.layer(&layer.name) {
            before += orig.param_bytes() as u64;
            after += layer.param_bytes() as u64;
        }
    }
    (before, after)
}
