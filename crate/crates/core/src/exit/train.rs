//! Frozen-backbone training of exit heads (and of a backbone's final layer).
//!
//! Heads are small sequential chains, trained in f64 with hand-written
//! backprop and minibatch SGD on softmax cross-entropy. Backbone features are
//! computed once up front; the backbone itself is never touched.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{boundary_inputs, CascadeModel};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{forward_observed, Graph, LayerSpec, Op};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.05,
            batch_size: 16,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Head index (or the layer name for a refit classifier).
    pub target: String,
    pub samples: usize,
    /// Mean training loss before the first epoch.
    pub initial_loss: f64,
    /// Mean training loss after each epoch.
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
enum HLayer {
    Conv {
        cin: usize,
        cout: usize,
        k: [usize; 2],
        s: [usize; 2],
        p: [usize; 2],
        hw: [usize; 2],
        out_hw: [usize; 2],
    },
    Fc {
        inf: usize,
        outf: usize,
    },
    Relu,
    Relu6,
    Gap {
        c: usize,
        plane: usize,
    },
    Flatten,
}

/// f64 mirror of a sequential head, with parameters and gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadNet {
    layers: Vec<HLayer>,
    /// `(weight, bias)` per layer; empty for parameter-free layers.
    params: Vec<(Vec<f64>, Vec<f64>)>,
    /// Graph layer names, for writing weights back.
    names: Vec<String>,
    input_len: usize,
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.f32_values().iter().map(|&v| v as f64).collect()
}

impl HeadNet {
    /// Mirrors `layers`, a chain starting at a tensor of shape `input_shape`
    /// (batch 1). A trailing softmax is dropped: training works on logits.
    pub fn from_layers(layers: &[LayerSpec], input_shape: &[usize]) -> Result<Self> {
        let layers = match layers.last() {
            Some(l) if l.op == Op::Softmax => &layers[..layers.len() - 1],
            _ => layers,
        };
        let mut shape = input_shape.to_vec();
        let mut net = HeadNet {
            layers: Vec::new(),
            params: Vec::new(),
            names: Vec::new(),
            input_len: shape.iter().product(),
        };
        for (i, l) in layers.iter().enumerate() {
            if i > 0 && l.inputs[0] != layers[i - 1].output {
                return Err(Error::invalid(format!(
                    "head layer `{}` breaks the chain",
                    l.name
                )));
            }
            if l.quant.is_some() {
                return Err(Error::invalid(format!(
                    "cannot train quantized layer `{}`",
                    l.name
                )));
            }
            let weights = || -> Result<(Vec<f64>, Vec<f64>)> {
                let w = l.weight.as_ref().ok_or_else(|| Error::MissingWeight {
                    layer: l.name.clone(),
                    what: "weight",
                })?;
                let b = l.bias.as_ref().ok_or_else(|| Error::MissingWeight {
                    layer: l.name.clone(),
                    what: "bias",
                })?;
                Ok((to_f64(w), to_f64(b)))
            };
            let (hl, p) = match &l.op {
                Op::Conv2D(a) => {
                    if shape.len() != 4 {
                        return Err(Error::shape(format!("conv `{}` needs rank 4", l.name)));
                    }
                    let hw = [shape[2], shape[3]];
                    let out_hw = [
                        (hw[0] + 2 * a.padding[0] - a.kernel[0]) / a.stride[0] + 1,
                        (hw[1] + 2 * a.padding[1] - a.kernel[1]) / a.stride[1] + 1,
                    ];
                    shape = vec![1, a.out_channels, out_hw[0], out_hw[1]];
                    let conv = HLayer::Conv {
                        cin: a.in_channels,
                        cout: a.out_channels,
                        k: a.kernel,
                        s: a.stride,
                        p: a.padding,
                        hw,
                        out_hw,
                    };
                    (conv, weights()?)
                }
                Op::FullyConnected {
                    in_features,
                    out_features,
                } => {
                    shape = vec![1, *out_features];
                    (
                        HLayer::Fc {
                            inf: *in_features,
                            outf: *out_features,
                        },
                        weights()?,
                    )
                }
                Op::ReLU => (HLayer::Relu, Default::default()),
                Op::ReLU6 => (HLayer::Relu6, Default::default()),
                Op::GlobalAvgPool => {
                    let g = HLayer::Gap {
                        c: shape[1],
                        plane: shape[2..].iter().product(),
                    };
                    shape = vec![1, shape[1], 1, 1];
                    (g, Default::default())
                }
                Op::Flatten => {
                    shape = vec![1, shape[1..].iter().product()];
                    (HLayer::Flatten, Default::default())
                }
                other => {
                    return Err(Error::UnsupportedLayerKind {
                        layer: l.name.clone(),
                        kind: other.kind(),
                    });
                }
            };
            net.layers.push(hl);
            net.params.push(p);
            net.names.push(l.name.clone());
        }
        Ok(net)
    }

    pub fn from_graph(graph: &Graph) -> Result<Self> {
        Self::from_layers(&graph.layers, &graph.input.shape)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|(w, b)| w.len() + b.len()).sum()
    }

    /// All parameters, layer by layer, weight before bias.
    pub fn param_vector(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b))
            .copied()
            .collect()
    }

    pub fn set_param_vector(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.num_params());
        let mut it = v.iter().copied();
        for (w, b) in &mut self.params {
            w.iter_mut()
                .chain(b.iter_mut())
                .for_each(|p| *p = it.next().unwrap());
        }
    }

    /// Activations after every layer; `acts[0]` is the input.
    fn forward_acts(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        for (layer, (w, b)) in self.layers.iter().zip(&self.params) {
            let x = acts.last().unwrap();
            let y = match *layer {
                HLayer::Conv {
                    cin,
                    cout,
                    k,
                    s,
                    p,
                    hw,
                    out_hw,
                } => {
                    let mut y = vec![0.0; cout * out_hw[0] * out_hw[1]];
                    for co in 0..cout {
                        for oy in 0..out_hw[0] {
                            for ox in 0..out_hw[1] {
                                let mut acc = b[co];
                                for ci in 0..cin {
                                    for ky in 0..k[0] {
                                        let iy = (oy * s[0] + ky) as isize - p[0] as isize;
                                        if iy < 0 || iy >= hw[0] as isize {
                                            continue;
                                        }
                                        for kx in 0..k[1] {
                                            let ix = (ox * s[1] + kx) as isize - p[1] as isize;
                                            if ix < 0 || ix >= hw[1] as isize {
                                                continue;
                                            }
                                            acc += w[((co * cin + ci) * k[0] + ky) * k[1] + kx]
                                                * x[(ci * hw[0] + iy as usize) * hw[1]
                                                    + ix as usize];
                                        }
                                    }
                                }
                                y[(co * out_hw[0] + oy) * out_hw[1] + ox] = acc;
                            }
                        }
                    }
                    y
                }
                HLayer::Fc { inf, outf } => (0..outf)
                    .map(|o| {
                        b[o] + w[o * inf..(o + 1) * inf]
                            .iter()
                            .zip(x)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                    })
                    .collect(),
                HLayer::Relu => x.iter().map(|v| v.max(0.0)).collect(),
                HLayer::Relu6 => x.iter().map(|v| v.clamp(0.0, 6.0)).collect(),
                HLayer::Gap { c, plane } => (0..c)
                    .map(|ch| x[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64)
                    .collect(),
                HLayer::Flatten => x.clone(),
            };
            acts.push(y);
        }
        acts
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.forward_acts(x).pop().unwrap()
    }

    /// Softmax cross-entropy of the logits against `label`.
    pub fn loss(&self, x: &[f64], label: usize) -> f64 {
        let z = self.logits(x);
        log_sum_exp(&z) - z[label]
    }

    /// Loss and its gradient with respect to [`Self::param_vector`].
    pub fn gradient(&self, x: &[f64], label: usize) -> (f64, Vec<f64>) {
        assert_eq!(x.len(), self.input_len, "input length");
        let acts = self.forward_acts(x);
        let z = acts.last().unwrap();
        let lse = log_sum_exp(z);
        let loss = lse - z[label];
        let mut delta: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
        delta[label] -= 1.0;
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = self
            .params
            .iter()
            .map(|(w, b)| (vec![0.0; w.len()], vec![0.0; b.len()]))
            .collect();
        for li in (0..self.layers.len()).rev() {
            let x = &acts[li];
            let (w, _) = &self.params[li];
            let (gw, gb) = &mut grads[li];
            delta = match self.layers[li] {
                HLayer::Conv {
                    cin,
                    cout,
                    k,
                    s,
                    p,
                    hw,
                    out_hw,
                } => {
                    let mut dx = vec![0.0; x.len()];
                    for co in 0..cout {
                        for oy in 0..out_hw[0] {
                            for ox in 0..out_hw[1] {
                                let d = delta[(co * out_hw[0] + oy) * out_hw[1] + ox];
                                gb[co] += d;
                                for ci in 0..cin {
                                    for ky in 0..k[0] {
                                        let iy = (oy * s[0] + ky) as isize - p[0] as isize;
                                        if iy < 0 || iy >= hw[0] as isize {
                                            continue;
                                        }
                                        for kx in 0..k[1] {
                                            let ix = (ox * s[1] + kx) as isize - p[1] as isize;
                                            if ix < 0 || ix >= hw[1] as isize {
                                                continue;
                                            }
                                            let wi = ((co * cin + ci) * k[0] + ky) * k[1] + kx;
                                            let xi =
                                                (ci * hw[0] + iy as usize) * hw[1] + ix as usize;
                                            gw[wi] += d * x[xi];
                                            dx[xi] += d * w[wi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    dx
                }
                HLayer::Fc { inf, outf } => {
                    let mut dx = vec![0.0; inf];
                    for o in 0..outf {
                        let d = delta[o];
                        gb[o] += d;
                        for i in 0..inf {
                            gw[o * inf + i] += d * x[i];
                            dx[i] += d * w[o * inf + i];
                        }
                    }
                    dx
                }
                HLayer::Relu => delta
                    .iter()
                    .zip(x)
                    .map(|(d, v)| if *v > 0.0 { *d } else { 0.0 })
                    .collect(),
                HLayer::Relu6 => delta
                    .iter()
                    .zip(x)
                    .map(|(d, v)| if *v > 0.0 && *v < 6.0 { *d } else { 0.0 })
                    .collect(),
                HLayer::Gap { c, plane } => (0..c * plane)
                    .map(|i| delta[i / plane] / plane as f64)
                    .collect(),
                HLayer::Flatten => delta,
            };
        }
        (
            loss,
            grads
                .into_iter()
                .flat_map(|(w, b)| w.into_iter().chain(b))
                .collect(),
        )
    }

    /// Copies the parameters back into the matching layers of `graph`.
    pub fn write_back(&self, graph: &mut Graph) -> Result<()> {
        for (name, (w, b)) in self.names.iter().zip(&self.params) {
            if w.is_empty() {
                continue;
            }
            let layer = graph
                .layers
                .iter_mut()
                .find(|l| &l.name == name)
                .ok_or_else(|| Error::invalid(format!("layer `{name}` vanished")))?;
            let ws = layer.weight.as_ref().unwrap().shape().to_vec();
            let bs = layer.bias.as_ref().unwrap().shape().to_vec();
            layer.weight = Some(Tensor::from_f32(ws, w.iter().map(|&v| v as f32).collect())?);
            layer.bias = Some(Tensor::from_f32(bs, b.iter().map(|&v| v as f32).collect())?);
        }
        Ok(())
    }

    /// Minibatch SGD over `(features, label)` pairs.
    pub fn fit(
        &mut self,
        data: &[(Vec<f64>, usize)],
        cfg: &TrainConfig,
        target: &str,
    ) -> TrainReport {
        let mean_loss = |net: &HeadNet| {
            data.par_iter()
                .map(|(x, y)| net.loss(x, *y))
                .collect::<Vec<_>>()
                .iter()
                .sum::<f64>()
                / data.len() as f64
        };
        let initial_loss = mean_loss(self);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut velocity = vec![0.0; self.num_params()];
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        let batch = cfg.batch_size.max(1);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                let grads: Vec<Vec<f64>> = chunk
                    .par_iter()
                    .map(|&i| self.gradient(&data[i].0, data[i].1).1)
                    .collect();
                let mut params = self.param_vector();
                for (j, p) in params.iter_mut().enumerate() {
                    let g = grads.iter().map(|g| g[j]).sum::<f64>() / chunk.len() as f64;
                    velocity[j] = cfg.momentum * velocity[j] + g;
                    *p -= cfg.lr * velocity[j];
                }
                self.set_param_vector(&params);
            }
            epoch_losses.push(mean_loss(self));
        }
        let correct = data
            .iter()
            .filter(|(x, y)| {
                crate::prob::argmax(&self.logits(x).iter().map(|&v| v as f32).collect::<Vec<_>>())
                    == *y
            })
            .count();
        TrainReport {
            target: target.to_string(),
            samples: data.len(),
            initial_loss,
            epoch_losses,
            train_accuracy: 100.0 * correct as f64 / data.len() as f64,
        }
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn check_labels(ds: &Dataset, num_classes: usize) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    match ds.samples.iter().find(|s| s.label >= num_classes) {
        Some(s) => Err(Error::LabelOutOfRange {
            label: s.label,
            num_classes,
        }),
        None => Ok(()),
    }
}

/// Trains every head on its boundary features; the segments are not modified.
/// Zero epochs leaves the cascade as it was.
pub fn train_exit_heads(
    cascade: &CascadeModel,
    train: &Dataset,
    cfg: &TrainConfig,
) -> Result<(CascadeModel, Vec<TrainReport>)> {
    check_labels(train, cascade.num_classes)?;
    let mut out = cascade.clone();
    if cfg.epochs == 0 {
        return Ok((out, Vec::new()));
    }
    let stages = boundary_inputs(cascade, &train.inputs())?;
    let mut reports = Vec::with_capacity(cascade.heads.len());
    for (k, head) in out.heads.iter_mut().enumerate() {
        let data: Vec<(Vec<f64>, usize)> = stages[k + 1]
            .iter()
            .zip(&train.samples)
            .map(|(x, s)| (to_f64(x), s.label))
            .collect();
        let mut net = HeadNet::from_graph(&head.graph)?;
        let head_cfg = TrainConfig {
            seed: cfg.seed.wrapping_add(k as u64),
            ..cfg.clone()
        };
        reports.push(net.fit(&data, &head_cfg, &format!("exit{k}")));
        net.write_back(&mut head.graph)?;
        head.trained = true;
    }
    Ok((out, reports))
}

/// Retrains the final fully connected layer of `graph` on frozen features.
///
/// Useful for seeded toy backbones, whose random classifier would otherwise
/// be at chance level. The layer must sit after a cut point.
pub fn refit_classifier(
    graph: &Graph,
    train: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Graph, TrainReport)> {
    check_labels(train, graph.num_classes)?;
    let start = graph
        .layers
        .iter()
        .rposition(|l| matches!(l.op, Op::FullyConnected { .. }))
        .ok_or_else(|| Error::invalid("graph has no fully connected layer"))?;
    if start > 0 && !graph.is_cut_after(start - 1) {
        return Err(Error::AttachNotACut(graph.layers[start].inputs[0].clone()));
    }
    let feature = graph.layers[start].inputs[0].clone();
    let shapes = graph.validate()?;
    let data: Vec<(Vec<f64>, usize)> = train
        .samples
        .par_iter()
        .map(|s| {
            let mut feat = None;
            forward_observed(graph, &s.input, |name, t| {
                if name == feature {
                    feat = Some(to_f64(&t.to_f32()));
                }
            })?;
            Ok((feat.expect("feature tensor observed"), s.label))
        })
        .collect::<Result<_>>()?;
    let mut net = HeadNet::from_layers(&graph.layers[start..], &shapes[&feature])?;
    let report = net.fit(&data, cfg, &graph.layers[start].name);
    let mut out = graph.clone();
    net.write_back(&mut out)?;
    Ok((out, report))
}
