//! Structured L1-norm filter pruning with channel-granularity rounding, and
//! a mask-only unstructured pruning diagnostic.
//!
//! Structured pruning physically removes output filters from convolution and
//! fully connected layers together with the matching input channels of every
//! downstream consumer. Channel selections travel through layers that keep
//! the channel axis (depthwise convolution, folded batch norm, activations,
//! pooling, softmax), expand through `Flatten` and must agree at `Add` joins.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, LayerKind, LayerSpec, Op};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Fraction of filters removed per prunable layer, in `[0, 1)`.
    pub pr: f64,
    /// Surviving channel counts are rounded to multiples of this.
    pub cg: usize,
    /// Keep the channel count of every layer feeding a residual `Add`.
    #[serde(default = "default_true")]
    pub protect_residual_io: bool,
}

fn default_true() -> bool {
    true
}

impl PruneConfig {
    pub fn new(pr: f64, cg: usize) -> Result<Self> {
        let cfg = Self {
            pr,
            cg,
            protect_residual_io: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.pr) {
            return Err(Error::Config(format!(
                "pruning ratio {} outside [0, 1)",
                self.pr
            )));
        }
        if self.cg == 0 {
            return Err(Error::Config(
                "channel granularity must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPruneRecord {
    pub layer: String,
    pub original_channels: usize,
    pub kept_channels: usize,
    pub removed: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub config: PruneConfig,
    pub layers: Vec<LayerPruneRecord>,
    pub params_before: u64,
    pub params_after: u64,
    pub compression_rate: f64,
}

/// Sum of absolute weights of each output filter (Conv2D) or row (FC).
pub fn l1_filter_importance(layer: &LayerSpec) -> Result<Vec<f32>> {
    if !matches!(layer.kind(), LayerKind::Conv2D | LayerKind::FullyConnected) {
        return Err(Error::UnsupportedLayerKind {
            layer: layer.name.clone(),
            kind: layer.kind(),
        });
    }
    let w = layer.weight.as_ref().ok_or_else(|| Error::MissingWeight {
        layer: layer.name.clone(),
        what: "weight",
    })?;
    let filters = w.shape()[0];
    let per = w.len() / filters;
    let values = w.f32_values();
    Ok(values
        .chunks(per)
        .map(|f| f.iter().map(|&v| (v as f64).abs()).sum::<f64>() as f32)
        .collect())
}

/// Number of filters kept: `(1 - pr) * channels` rounded to the nearest
/// multiple of `cg` (ties up), then clamped to `[cg, channels]`.
pub fn rounded_keep_count(channels: usize, cfg: &PruneConfig) -> usize {
    let target = (1.0 - cfg.pr) * channels as f64 / cfg.cg as f64;
    let groups = (target + 0.5).floor() as usize;
    (groups * cfg.cg).max(cfg.cg).min(channels)
}

/// Indices of the `keep` most important filters, ascending. Equal importance
/// prefers the lower index.
fn select_filters(importance: &[f32], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..importance.len()).collect();
    order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    kept
}

/// Selected indices along the channel axis of a tensor; `None` keeps all.
type Selection = Option<Vec<usize>>;

fn resolve(sel: &Selection, len: usize) -> Vec<usize> {
    sel.clone().unwrap_or_else(|| (0..len).collect())
}

/// Gathers `tensor[outs][ins][..]` for a weight laid out `[O, I, rest..]`.
fn gather_2d(t: &Tensor, outs: &[usize], ins: &[usize]) -> Result<Tensor> {
    let shape = t.shape();
    let (o_len, i_len) = (shape[0], shape[1]);
    let rest: usize = shape[2..].iter().product();
    let values = t
        .as_f32()
        .ok_or_else(|| Error::invalid("pruning needs an f32 graph"))?;
    let mut data = Vec::with_capacity(outs.len() * ins.len() * rest);
    for &o in outs {
        debug_assert!(o < o_len);
        for &i in ins {
            debug_assert!(i < i_len);
            let start = (o * i_len + i) * rest;
            data.extend_from_slice(&values[start..start + rest]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[0] = outs.len();
    new_shape[1] = ins.len();
    Tensor::from_f32(new_shape, data)
}

fn gather_1d(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let values = t
        .as_f32()
        .ok_or_else(|| Error::invalid("pruning needs an f32 graph"))?;
    Tensor::from_f32(vec![idx.len()], idx.iter().map(|&i| values[i]).collect())
}

fn is_prunable(op: &Op) -> bool {
    matches!(op, Op::Conv2D(_) | Op::FullyConnected { .. })
}

/// Removes the least important filters of every unprotected Conv2D / FC layer.
pub fn prune_structured(graph: &Graph, cfg: &PruneConfig) -> Result<(Graph, PruneReport)> {
    cfg.validate()?;
    let shapes = graph.validate()?;
    if graph.layers.iter().any(|l| l.quant.is_some()) {
        return Err(Error::invalid(
            "pruning needs an f32 graph; prune before quantizing",
        ));
    }

    // Which prunable layer each tensor's channel axis descends from.
    let mut origin: HashMap<&str, Option<usize>> = HashMap::new();
    origin.insert(&graph.input.name, None);
    let mut protected: HashSet<usize> = HashSet::new();
    for (i, layer) in graph.layers.iter().enumerate() {
        let src = if is_prunable(&layer.op) {
            Some(i)
        } else {
            origin[layer.inputs[0].as_str()]
        };
        if layer.op == Op::Add && cfg.protect_residual_io {
            for inp in &layer.inputs {
                if let Some(o) = origin[inp.as_str()] {
                    protected.insert(o);
                }
            }
        }
        origin.insert(&layer.output, src);
    }
    if let Some(o) = origin[graph.output.as_str()] {
        protected.insert(o);
    }

    let mut keep: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut records = Vec::new();
    for (i, layer) in graph
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| is_prunable(&l.op))
    {
        let importance = l1_filter_importance(layer)?;
        let channels = importance.len();
        let kept = if protected.contains(&i) {
            (0..channels).collect()
        } else {
            select_filters(&importance, rounded_keep_count(channels, cfg))
        };
        let kept_set: HashSet<usize> = kept.iter().copied().collect();
        records.push(LayerPruneRecord {
            layer: layer.name.clone(),
            original_channels: channels,
            kept_channels: kept.len(),
            removed: (0..channels).filter(|c| !kept_set.contains(c)).collect(),
        });
        if kept.len() < channels {
            keep.insert(i, kept);
        }
    }

    let mut sel: HashMap<&str, Selection> = HashMap::new();
    sel.insert(&graph.input.name, None);
    let mut layers = Vec::with_capacity(graph.layers.len());
    for (i, layer) in graph.layers.iter().enumerate() {
        let in_name = layer.inputs[0].as_str();
        let in_shape = &shapes[in_name];
        let in_sel = sel[in_name].clone();
        let mut new = layer.clone();
        let out_sel: Selection = match &layer.op {
            Op::Conv2D(a) => {
                let ins = resolve(&in_sel, a.in_channels);
                let outs = keep.get(&i).cloned();
                let outs_idx = resolve(&outs, a.out_channels);
                let w = layer.weight.as_ref().expect("validated");
                let b = layer.bias.as_ref().expect("validated");
                new.weight = Some(gather_2d(w, &outs_idx, &ins)?);
                new.bias = Some(gather_1d(b, &outs_idx)?);
                let mut attrs = *a;
                attrs.in_channels = ins.len();
                attrs.out_channels = outs_idx.len();
                new.op = Op::Conv2D(attrs);
                outs
            }
            Op::FullyConnected {
                in_features,
                out_features,
            } => {
                let ins = resolve(&in_sel, *in_features);
                let outs = keep.get(&i).cloned();
                let outs_idx = resolve(&outs, *out_features);
                let w = layer.weight.as_ref().expect("validated");
                let b = layer.bias.as_ref().expect("validated");
                new.weight = Some(gather_2d(w, &outs_idx, &ins)?);
                new.bias = Some(gather_1d(b, &outs_idx)?);
                new.op = Op::FullyConnected {
                    in_features: ins.len(),
                    out_features: outs_idx.len(),
                };
                outs
            }
            Op::DepthwiseConv2D(a) => {
                if let Some(ch) = &in_sel {
                    let w = layer.weight.as_ref().expect("validated");
                    let b = layer.bias.as_ref().expect("validated");
                    new.weight = Some(gather_2d(w, ch, &[0])?);
                    new.bias = Some(gather_1d(b, ch)?);
                    let mut attrs = *a;
                    attrs.channels = ch.len();
                    new.op = Op::DepthwiseConv2D(attrs);
                }
                in_sel
            }
            Op::BatchNormFolded { .. } => {
                if let Some(ch) = &in_sel {
                    new.weight = Some(gather_1d(layer.weight.as_ref().expect("validated"), ch)?);
                    new.bias = Some(gather_1d(layer.bias.as_ref().expect("validated"), ch)?);
                    new.op = Op::BatchNormFolded { channels: ch.len() };
                }
                in_sel
            }
            Op::Add => {
                let other = sel[layer.inputs[1].as_str()].clone();
                let c = in_shape[1];
                if resolve(&in_sel, c) != resolve(&other, c) {
                    return Err(Error::GraphRewriteConflict(format!(
                        "inputs of `{}` keep different channels ({} vs {}); enable residual protection",
                        layer.name,
                        resolve(&in_sel, c).len(),
                        resolve(&other, c).len()
                    )));
                }
                in_sel
            }
            Op::Flatten => in_sel.map(|ch| {
                let spatial: usize = in_shape[2..].iter().product();
                ch.iter()
                    .flat_map(|&c| c * spatial..(c + 1) * spatial)
                    .collect()
            }),
            Op::ReLU
            | Op::ReLU6
            | Op::MaxPool(_)
            | Op::AvgPool(_)
            | Op::GlobalAvgPool
            | Op::Softmax => in_sel,
        };
        sel.insert(&layer.output, out_sel);
        layers.push(new);
    }

    let pruned = Graph {
        layers,
        ..graph.clone()
    };
    pruned.validate()?;
    let params_before = graph.param_count() as u64;
    let params_after = pruned.param_count() as u64;
    let report = PruneReport {
        config: *cfg,
        layers: records,
        params_before,
        params_after,
        compression_rate: params_before as f64 / params_after.max(1) as f64,
    };
    Ok((pruned, report))
}

/// Zeroes the `floor(pr * N)` smallest-magnitude weights across all
/// Conv2D, depthwise and FC weight tensors (biases untouched). Returns the
/// masked graph and the resulting fraction of exactly-zero weights.
pub fn prune_unstructured_mask(graph: &Graph, pr: f64) -> Result<(Graph, f64)> {
    if !(0.0..1.0).contains(&pr) {
        return Err(Error::Config(format!("pruning ratio {pr} outside [0, 1)")));
    }
    let masked_kinds = [
        LayerKind::Conv2D,
        LayerKind::DepthwiseConv2D,
        LayerKind::FullyConnected,
    ];
    let mut out = graph.clone();
    let mut entries: Vec<(f32, usize, usize)> = Vec::new();
    let mut buffers: HashMap<usize, Vec<f32>> = HashMap::new();
    for (li, layer) in out.layers.iter().enumerate() {
        if !masked_kinds.contains(&layer.kind()) {
            continue;
        }
        if let Some(w) = &layer.weight {
            let values = w
                .as_f32()
                .ok_or_else(|| Error::invalid("masking needs an f32 graph"))?;
            entries.extend(values.iter().enumerate().map(|(ei, v)| (v.abs(), li, ei)));
            buffers.insert(li, values.to_vec());
        }
    }
    let total = entries.len();
    let count = (pr * total as f64).floor() as usize;
    entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for &(_, li, ei) in &entries[..count] {
        buffers.get_mut(&li).expect("collected")[ei] = 0.0;
    }
    let mut zeros = 0usize;
    for (li, values) in buffers {
        zeros += values.iter().filter(|v| **v == 0.0).count();
        let layer = &mut out.layers[li];
        let shape = layer.weight.as_ref().expect("collected").shape().to_vec();
        layer.weight = Some(Tensor::from_f32(shape, values)?);
    }
    let sparsity = if total == 0 {
        0.0
    } else {
        zeros as f64 / total as f64
    };
    Ok((out, sparsity))
}
