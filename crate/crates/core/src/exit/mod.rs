//! Early-exit cascades.
//!
//! A backbone is split at one or more cut tensors into sequential segments.
//! Each boundary feeds an exit head; inference stops at the first head whose
//! softmax entropy is at most its threshold. Segment boundaries always carry
//! f32 tensors, so every segment and head is an independently executable
//! graph even after quantization.

mod manifest;
mod sweep;
mod train;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{forward, total_macs, Graph, GraphRole, InputSpec, LayerKind, LayerSpec, Op};
use crate::prob::{argmax, gate_entropy, softmax};
use crate::quant::{self, QuantMode, QuantPlan};
use crate::tensor::Tensor;

pub use manifest::{
    load_cascade, save_cascade, CascadeManifest, HeadEntry, SegmentEntry, MANIFEST_FILE,
    MANIFEST_VERSION,
};
pub use sweep::{
    select_operating_points, sweep_thresholds, trace_cascade, SampleTrace, SweepOptions,
    SweepPoint, SweepReport,
};
pub use train::{refit_classifier, train_exit_heads, HeadNet, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPreset {
    /// Global average pool, flatten, fully connected.
    Simple,
    /// A 3x3 conv + ReLU block in front of the simple head.
    Block,
    /// Caller-supplied head graph.
    Custom,
}

impl FromStr for HeadPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "simple" => Ok(Self::Simple),
            "block" => Ok(Self::Block),
            "custom" => Ok(Self::Custom),
            _ => Err(Error::Config(format!(
                "unknown head preset `{s}` (simple|block)"
            ))),
        }
    }
}

impl fmt::Display for HeadPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Simple => "simple",
            Self::Block => "block",
            Self::Custom => "custom",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExitHead {
    pub attach_point: String,
    pub preset: HeadPreset,
    /// Classifier graph whose input is the attach tensor.
    pub graph: Graph,
    pub trained: bool,
}

impl ExitHead {
    /// Wraps a caller-built head; its input must be named after the attach point.
    pub fn custom(graph: Graph) -> Result<Self> {
        graph.validate()?;
        if graph.role != GraphRole::Classifier {
            return Err(Error::invalid("exit head must be a classifier graph"));
        }
        Ok(Self {
            attach_point: graph.input.name.clone(),
            preset: HeadPreset::Custom,
            graph,
            trained: false,
        })
    }
}

/// Exit iff `H(softmax(logits)) <= threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitPolicy {
    pub threshold: f32,
}

impl ExitPolicy {
    pub fn new(threshold: f32) -> Result<Self> {
        if threshold.is_nan() || threshold < 0.0 {
            return Err(Error::Config(format!(
                "threshold must be >= 0, got {threshold}"
            )));
        }
        Ok(Self { threshold })
    }

    pub fn admits(&self, entropy: f32) -> bool {
        entropy <= self.threshold
    }
}

impl Default for ExitPolicy {
    /// Never exits early.
    fn default() -> Self {
        Self { threshold: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    pub name: String,
    pub num_classes: usize,
    /// `segments[k]` maps the previous boundary to `heads[k].attach_point`;
    /// the last one ends in the original classifier.
    pub segments: Vec<Graph>,
    pub heads: Vec<ExitHead>,
    pub policies: Vec<ExitPolicy>,
}

/// Splits `graph` after each of `points` (tensor names).
pub fn split_graph(graph: &Graph, points: &[&str]) -> Result<Vec<Graph>> {
    let shapes = graph.validate()?;
    let mut cuts = Vec::with_capacity(points.len());
    for &p in points {
        if p == graph.output {
            return Err(Error::AttachAtTerminal(p.to_string()));
        }
        let idx = graph
            .producer(p)
            .ok_or_else(|| Error::UnknownAttachPoint(p.to_string()))?;
        if !graph.is_cut_after(idx) {
            return Err(Error::AttachNotACut(p.to_string()));
        }
        cuts.push(idx);
    }
    cuts.sort_unstable();
    if cuts.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("duplicate attach point"));
    }
    let mut segments = Vec::with_capacity(cuts.len() + 1);
    let mut start = 0;
    let mut input = graph.input.clone();
    for (k, &idx) in cuts.iter().enumerate() {
        let boundary = graph.layers[idx].output.clone();
        segments.push(Graph {
            name: format!("{}_seg{k}", graph.name),
            role: GraphRole::Segment,
            input: input.clone(),
            layers: graph.layers[start..=idx].to_vec(),
            output: boundary.clone(),
            num_classes: graph.num_classes,
        });
        input = InputSpec {
            shape: shapes[&boundary].clone(),
            name: boundary,
        };
        start = idx + 1;
    }
    segments.push(Graph {
        name: format!("{}_seg{}", graph.name, cuts.len()),
        role: graph.role,
        input,
        layers: graph.layers[start..].to_vec(),
        output: graph.output.clone(),
        num_classes: graph.num_classes,
    });
    Ok(segments)
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Result<Tensor> {
    let bound = 1.0 / (fan_in as f32).sqrt();
    let n = shape.iter().product();
    Tensor::from_f32(
        shape,
        (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
    )
}

/// Builds a preset head reading `attach` (shape `shape`); weights are
/// uniform in `±1/sqrt(fan_in)`.
pub fn build_head(
    attach: &str,
    shape: &[usize],
    preset: HeadPreset,
    num_classes: usize,
    tag: &str,
    seed: u64,
) -> Result<Graph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = |s: &str| format!("{tag}_{s}");
    let mut layers = Vec::new();
    let mut cur = attach.to_string();
    let features = match (preset, shape.len()) {
        (HeadPreset::Custom, _) => {
            return Err(Error::Config("custom heads are built by the caller".into()))
        }
        (_, 2) if preset == HeadPreset::Simple => shape[1],
        (_, 4) => {
            let c = shape[1];
            if preset == HeadPreset::Block {
                let w = uniform(&mut rng, vec![c, c, 3, 3], c * 9)?;
                let b = uniform(&mut rng, vec![c], c * 9)?;
                layers.push(LayerSpec::conv2d(&n("conv"), &cur, &n("conv"), w, b, 1, 1));
                layers.push(LayerSpec::new(
                    n("relu"),
                    Op::ReLU,
                    &[&n("conv")],
                    n("relu"),
                ));
                cur = n("relu");
            }
            layers.push(LayerSpec::new(
                n("gap"),
                Op::GlobalAvgPool,
                &[&cur],
                n("gap"),
            ));
            layers.push(LayerSpec::new(
                n("flatten"),
                Op::Flatten,
                &[&n("gap")],
                n("flatten"),
            ));
            cur = n("flatten");
            c
        }
        _ => {
            return Err(Error::shape(format!(
                "cannot attach a `{preset}` head to a tensor of shape {shape:?}"
            )))
        }
    };
    let w = uniform(&mut rng, vec![num_classes, features], features)?;
    let b = uniform(&mut rng, vec![num_classes], features)?;
    layers.push(LayerSpec::fully_connected(
        &n("fc"),
        &cur,
        &n("logits"),
        w,
        b,
    ));
    let head = Graph::new(
        tag.to_string(),
        InputSpec {
            name: attach.to_string(),
            shape: shape.to_vec(),
        },
        layers,
        n("logits"),
        num_classes,
    );
    head.validate()?;
    Ok(head)
}

/// Single-exit cascade with an untrained `preset` head at `attach_point`.
pub fn attach_exit(
    graph: &Graph,
    attach_point: &str,
    preset: HeadPreset,
    seed: u64,
) -> Result<CascadeModel> {
    attach_exits(graph, &[attach_point], preset, seed)
}

/// One head per attach point, ordered along the backbone.
pub fn attach_exits(
    graph: &Graph,
    points: &[&str],
    preset: HeadPreset,
    seed: u64,
) -> Result<CascadeModel> {
    let segments = split_graph(graph, points)?;
    let mut heads = Vec::with_capacity(segments.len() - 1);
    for (k, seg) in segments[..segments.len() - 1].iter().enumerate() {
        let shape = segments[k + 1].input.shape.clone();
        let tag = format!("exit{k}");
        let g = build_head(
            &seg.output,
            &shape,
            preset,
            graph.num_classes,
            &tag,
            seed.wrapping_add(k as u64),
        )?;
        heads.push(ExitHead {
            attach_point: seg.output.clone(),
            preset,
            graph: g,
            trained: false,
        });
    }
    let policies = vec![ExitPolicy::default(); heads.len()];
    Ok(CascadeModel {
        name: graph.name.clone(),
        num_classes: graph.num_classes,
        segments,
        heads,
        policies,
    })
}

/// Action when inference reaches a head that was never trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UntrainedPolicy {
    Warn,
    #[default]
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: Vec<f32>,
    pub label: usize,
    /// Head index, or `heads.len()` for the final classifier.
    pub exit_index: usize,
    /// Seconds per executed stage (segment plus its head).
    pub segment_latencies: Vec<f64>,
    pub macs_executed: u64,
}

/// MACs of every segment and head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeCosts {
    pub segment_macs: Vec<u64>,
    pub head_macs: Vec<u64>,
}

impl CascadeCosts {
    /// MACs spent by a sample leaving at `exit_index`; the final exit runs
    /// every segment and every head.
    pub fn exit_macs(&self, exit_index: usize) -> u64 {
        let k = exit_index.min(self.head_macs.len());
        let segs: u64 = self.segment_macs[..=k.min(self.segment_macs.len() - 1)]
            .iter()
            .sum();
        let heads: u64 = self.head_macs[..(k + 1).min(self.head_macs.len())]
            .iter()
            .sum();
        segs + heads
    }

    pub fn backbone_macs(&self) -> u64 {
        self.segment_macs.iter().sum()
    }
}

/// Class distribution from a classifier output row.
pub fn output_probs(graph: &Graph, out: &Tensor) -> Result<Vec<f32>> {
    let v = out.f32_values();
    if graph.outputs_probabilities() {
        Ok(v.into_owned())
    } else {
        softmax(&v)
    }
}

impl CascadeModel {
    pub fn validate(&self) -> Result<()> {
        if self.segments.len() != self.heads.len() + 1 || self.policies.len() != self.heads.len() {
            return Err(Error::invalid(
                "cascade needs one more segment than heads and one policy per head",
            ));
        }
        for (k, seg) in self.segments.iter().enumerate() {
            seg.validate()?;
            if k > 0 && seg.input.name != self.segments[k - 1].output {
                return Err(Error::invalid(format!(
                    "segment {k} does not read the previous boundary"
                )));
            }
        }
        for (k, h) in self.heads.iter().enumerate() {
            h.graph.validate()?;
            let boundary = &self.segments[k].output;
            if &h.attach_point != boundary || &h.graph.input.name != boundary {
                return Err(Error::invalid(format!(
                    "head {k} does not read boundary `{boundary}`"
                )));
            }
            if h.graph.num_classes != self.num_classes {
                return Err(Error::invalid(format!(
                    "head {k} has the wrong class count"
                )));
            }
        }
        Ok(())
    }

    /// Reassembles the backbone by concatenating the segments.
    pub fn backbone(&self) -> Graph {
        let last = self.segments.last().expect("cascade has a segment");
        Graph {
            name: self.name.clone(),
            role: last.role,
            input: self.segments[0].input.clone(),
            layers: self
                .segments
                .iter()
                .flat_map(|s| s.layers.iter().cloned())
                .collect(),
            output: last.output.clone(),
            num_classes: self.num_classes,
        }
    }

    pub fn set_thresholds(&mut self, threshold: f32) -> Result<()> {
        let p = ExitPolicy::new(threshold)?;
        self.policies.iter_mut().for_each(|q| *q = p);
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.segments
            .iter()
            .chain(self.heads.iter().map(|h| &h.graph))
            .map(Graph::param_count)
            .sum()
    }

    pub fn param_bytes(&self) -> usize {
        self.segments
            .iter()
            .chain(self.heads.iter().map(|h| &h.graph))
            .map(Graph::param_bytes)
            .sum()
    }

    pub fn costs(&self) -> Result<CascadeCosts> {
        Ok(CascadeCosts {
            segment_macs: self
                .segments
                .iter()
                .map(total_macs)
                .collect::<Result<_>>()?,
            head_macs: self
                .heads
                .iter()
                .map(|h| total_macs(&h.graph))
                .collect::<Result<_>>()?,
        })
    }

    fn check_trained(&self, policy: UntrainedPolicy) -> Result<()> {
        if let Some(k) = self.heads.iter().position(|h| !h.trained) {
            match policy {
                UntrainedPolicy::Fail => return Err(Error::UntrainedHead(k)),
                UntrainedPolicy::Warn => {
                    log::warn!("exit head {k} of `{}` is untrained", self.name)
                }
            }
        }
        Ok(())
    }
}

/// Runs the cascade on one sample, failing on untrained heads.
pub fn cascade_infer(cascade: &CascadeModel, input: &Tensor) -> Result<Prediction> {
    cascade_infer_with(cascade, input, UntrainedPolicy::Fail)
}

pub fn cascade_infer_with(
    cascade: &CascadeModel,
    input: &Tensor,
    untrained: UntrainedPolicy,
) -> Result<Prediction> {
    cascade.check_trained(untrained)?;
    if input.shape().first() != Some(&1) {
        return Err(Error::shape(format!(
            "cascade inference takes batch size 1, got {:?}",
            input.shape()
        )));
    }
    let costs = cascade.costs()?;
    let mut latencies = Vec::with_capacity(cascade.segments.len());
    let mut x = input.clone();
    for (k, seg) in cascade.segments.iter().enumerate() {
        let t0 = Instant::now();
        x = forward(seg, &x)?;
        if let Some(head) = cascade.heads.get(k) {
            let probs = output_probs(&head.graph, &forward(&head.graph, &x)?)?;
            let exits = cascade.policies[k].admits(gate_entropy(&probs)?);
            latencies.push(t0.elapsed().as_secs_f64());
            if exits {
                return Ok(Prediction {
                    label: argmax(&probs),
                    probs,
                    exit_index: k,
                    segment_latencies: latencies,
                    macs_executed: costs.exit_macs(k),
                });
            }
        } else {
            let probs = output_probs(seg, &x)?;
            latencies.push(t0.elapsed().as_secs_f64());
            return Ok(Prediction {
                label: argmax(&probs),
                probs,
                exit_index: cascade.heads.len(),
                segment_latencies: latencies,
                macs_executed: costs.exit_macs(cascade.heads.len()),
            });
        }
    }
    unreachable!("the last segment always returns")
}

/// Boundary tensors seen by each segment: `inputs[k]` feeds segment `k`,
/// and `inputs[k + 1]` feeds head `k`.
pub fn boundary_inputs(cascade: &CascadeModel, inputs: &[Tensor]) -> Result<Vec<Vec<Tensor>>> {
    let mut stages = vec![inputs.to_vec()];
    for seg in &cascade.segments[..cascade.segments.len() - 1] {
        let next = stages
            .last()
            .unwrap()
            .iter()
            .map(|x| forward(seg, x))
            .collect::<Result<Vec<_>>>()?;
        stages.push(next);
    }
    Ok(stages)
}

/// Quantization plans applied to each part of a cascade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadePlans {
    pub segments: Vec<QuantPlan>,
    pub heads: Vec<QuantPlan>,
}

/// Quantizes every segment and head independently. Static mode calibrates
/// each part on the f32 boundary tensors it receives from `calib`.
pub fn quantize_cascade(
    cascade: &CascadeModel,
    mode: QuantMode,
    kinds: &BTreeSet<LayerKind>,
    calib: Option<&[Tensor]>,
) -> Result<(CascadeModel, CascadePlans)> {
    cascade.validate()?;
    let mut out = cascade.clone();
    let plans = match mode {
        QuantMode::Ptq => {
            let calib = calib
                .filter(|c| !c.is_empty())
                .ok_or(Error::EmptyCalibrationSet)?;
            let stages = boundary_inputs(cascade, calib)?;
            let mut plans = CascadePlans {
                segments: Vec::new(),
                heads: Vec::new(),
            };
            for (k, seg) in cascade.segments.iter().enumerate() {
                let plan = quant::calibrate(seg, &stages[k], kinds)?;
                out.segments[k] = quant::apply_ptq(seg, &plan)?;
                plans.segments.push(plan);
            }
            for (k, head) in cascade.heads.iter().enumerate() {
                let plan = quant::calibrate(&head.graph, &stages[k + 1], kinds)?;
                out.heads[k].graph = quant::apply_ptq(&head.graph, &plan)?;
                plans.heads.push(plan);
            }
            plans
        }
        QuantMode::Dq => {
            let mut plans = CascadePlans {
                segments: Vec::new(),
                heads: Vec::new(),
            };
            for (k, seg) in cascade.segments.iter().enumerate() {
                plans.segments.push(quant::dynamic_plan(seg, kinds)?);
                out.segments[k] = quant::apply_dq(seg, kinds)?;
            }
            for (k, head) in cascade.heads.iter().enumerate() {
                plans.heads.push(quant::dynamic_plan(&head.graph, kinds)?);
                out.heads[k].graph = quant::apply_dq(&head.graph, kinds)?;
            }
            plans
        }
    };
    Ok((out, plans))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// conv -> relu -> conv -> relu -> gap -> flatten -> fc, 3 classes.
    pub(crate) fn chain() -> Graph {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = |shape: Vec<usize>| uniform(&mut rng, shape, 4).unwrap();
        let layers = vec![
            LayerSpec::conv2d("c1", "x", "c1", t(vec![4, 1, 3, 3]), t(vec![4]), 1, 1),
            LayerSpec::new("r1", Op::ReLU, &["c1"], "r1"),
            LayerSpec::conv2d("c2", "r1", "c2", t(vec![4, 4, 3, 3]), t(vec![4]), 1, 1),
            LayerSpec::new("r2", Op::ReLU, &["c2"], "r2"),
            LayerSpec::new("gap", Op::GlobalAvgPool, &["r2"], "gap"),
            LayerSpec::new("flat", Op::Flatten, &["gap"], "flat"),
            LayerSpec::fully_connected("fc", "flat", "logits", t(vec![3, 4]), t(vec![3])),
        ];
        Graph::new(
            "chain",
            InputSpec {
                name: "x".into(),
                shape: vec![1, 1, 5, 5],
            },
            layers,
            "logits",
            3,
        )
    }

    fn input(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_f32(
            vec![1, 1, 5, 5],
            (0..25).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn partition_arithmetic() {
        let g = chain();
        let c = attach_exit(&g, "r1", HeadPreset::Simple, 0).unwrap();
        assert_eq!(c.segments[0].layers.len(), 2);
        assert_eq!(c.segments[1].layers.len(), 5);
        assert_eq!(c.backbone(), g);
        assert!(c.param_count() > g.param_count());
        c.validate().unwrap();
    }

    #[test]
    fn attach_errors() {
        let g = chain();
        assert!(matches!(
            attach_exit(&g, "nope", HeadPreset::Simple, 0),
            Err(Error::UnknownAttachPoint(_))
        ));
        assert!(matches!(
            attach_exit(&g, "x", HeadPreset::Simple, 0),
            Err(Error::UnknownAttachPoint(_))
        ));
        assert!(matches!(
            attach_exit(&g, "logits", HeadPreset::Simple, 0),
            Err(Error::AttachAtTerminal(_))
        ));
        let mut res = g.clone();
        res.layers
            .insert(4, LayerSpec::new("add", Op::Add, &["r2", "r1"], "add"));
        res.layers[5].inputs = vec!["add".into()];
        res.validate().unwrap();
        assert!(matches!(
            attach_exit(&res, "c2", HeadPreset::Simple, 0),
            Err(Error::AttachNotACut(_))
        ));
    }

    #[test]
    fn heads_have_expected_layers() {
        let g = chain();
        let c = attach_exit(&g, "r1", HeadPreset::Block, 0).unwrap();
        let kinds: Vec<_> = c.heads[0]
            .graph
            .layers
            .iter()
            .map(LayerSpec::kind)
            .collect();
        assert_eq!(
            kinds,
            [
                LayerKind::Conv2D,
                LayerKind::ReLU,
                LayerKind::GlobalAvgPool,
                LayerKind::Flatten,
                LayerKind::FullyConnected
            ]
        );
        let c = attach_exit(&g, "flat", HeadPreset::Simple, 0).unwrap();
        assert_eq!(c.heads[0].graph.layers.len(), 1);
        assert!(matches!(
            c.heads[0].graph.layers[0].op,
            Op::FullyConnected {
                in_features: 4,
                out_features: 3
            }
        ));
        assert!(attach_exit(&g, "flat", HeadPreset::Block, 0).is_err());
    }

    #[test]
    fn thresholds_gate_exits() {
        let g = chain();
        let mut c = attach_exit(&g, "r1", HeadPreset::Simple, 3).unwrap();
        c.heads[0].trained = true;
        for s in 0..10 {
            let x = input(s);
            let p = cascade_infer(&c, &x).unwrap();
            assert_eq!(p.exit_index, 1);
            let direct = softmax(&forward(&g, &x).unwrap().into_f32_vec()).unwrap();
            assert_eq!(p.probs, direct);
        }
        c.set_thresholds(crate::prob::max_entropy(3)).unwrap();
        let p = cascade_infer(&c, &input(0)).unwrap();
        assert_eq!(p.exit_index, 0);
        let costs = c.costs().unwrap();
        assert_eq!(p.macs_executed, costs.segment_macs[0] + costs.head_macs[0]);
        assert_eq!(
            costs.exit_macs(1),
            costs.backbone_macs() + costs.head_macs[0]
        );
    }

    #[test]
    fn untrained_heads_fail_or_warn() {
        let c = attach_exit(&chain(), "r1", HeadPreset::Simple, 3).unwrap();
        assert!(matches!(
            cascade_infer(&c, &input(0)),
            Err(Error::UntrainedHead(0))
        ));
        assert!(cascade_infer_with(&c, &input(0), UntrainedPolicy::Warn).is_ok());
    }

    #[test]
    fn empty_quant_selection_is_identity() {
        let mut c = attach_exit(&chain(), "r1", HeadPreset::Simple, 3).unwrap();
        c.heads[0].trained = true;
        let calib: Vec<_> = (0..4).map(input).collect();
        let (q, _) = quantize_cascade(&c, QuantMode::Ptq, &BTreeSet::new(), Some(&calib)).unwrap();
        assert_eq!(q, c);
        let (q, _) = quantize_cascade(&c, QuantMode::Dq, &BTreeSet::new(), None).unwrap();
        assert_eq!(q, c);
        assert!(matches!(
            quantize_cascade(&c, QuantMode::Ptq, &BTreeSet::new(), None),
            Err(Error::EmptyCalibrationSet)
        ));
    }
}
