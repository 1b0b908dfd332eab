//! Model graph: a topologically ordered list of layers over named tensors.

mod cost;
mod exec;
pub mod format;
mod kernels;
mod layer;

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cost::{count_macs, layer_macs, total_macs, CostReport};
pub use exec::{forward, forward_observed};
pub use format::{load_model, model_bytes, save_model};
pub use layer::{ConvAttrs, DepthwiseAttrs, LayerKind, LayerQuant, LayerSpec, Op, PoolAttrs};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Whether a graph is a full classifier or a fragment of one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphRole {
    /// Output is a `[N, num_classes]` logit (or probability) tensor.
    #[default]
    Classifier,
    /// Backbone segment ending at an intermediate tensor.
    Segment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub name: String,
    pub role: GraphRole,
    pub input: InputSpec,
    pub layers: Vec<LayerSpec>,
    pub output: String,
    pub num_classes: usize,
}

/// Shape of every tensor in a graph, keyed by tensor name.
pub type ShapeMap = HashMap<String, Vec<usize>>;

fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize, layer: &str) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid(format!("layer `{layer}` has zero stride")));
    }
    let padded = size + 2 * pad;
    if padded < kernel {
        return Err(Error::shape(format!(
            "layer `{layer}`: kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

fn expect_rank(layer: &str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(Error::shape(format!(
            "layer `{layer}` expects a rank-{rank} input, got {shape:?}"
        )));
    }
    Ok(())
}

/// Output shape of `layer` given its input shapes.
pub fn infer_layer_shape(layer: &LayerSpec, inputs: &[&[usize]]) -> Result<Vec<usize>> {
    let name = &layer.name;
    let x = inputs[0];
    let shape = match &layer.op {
        Op::Conv2D(a) => {
            expect_rank(name, x, 4)?;
            if x[1] != a.in_channels {
                return Err(Error::shape(format!(
                    "layer `{name}` expects {} input channels, got {}",
                    a.in_channels, x[1]
                )));
            }
            vec![
                x[0],
                a.out_channels,
                conv_out(x[2], a.kernel[0], a.stride[0], a.padding[0], name)?,
                conv_out(x[3], a.kernel[1], a.stride[1], a.padding[1], name)?,
            ]
        }
        Op::DepthwiseConv2D(a) => {
            expect_rank(name, x, 4)?;
            if x[1] != a.channels {
                return Err(Error::shape(format!(
                    "layer `{name}` expects {} channels, got {}",
                    a.channels, x[1]
                )));
            }
            vec![
                x[0],
                a.channels,
                conv_out(x[2], a.kernel[0], a.stride[0], a.padding[0], name)?,
                conv_out(x[3], a.kernel[1], a.stride[1], a.padding[1], name)?,
            ]
        }
        Op::FullyConnected {
            in_features,
            out_features,
        } => {
            expect_rank(name, x, 2)?;
            if x[1] != *in_features {
                return Err(Error::shape(format!(
                    "layer `{name}` expects {in_features} features, got {}",
                    x[1]
                )));
            }
            vec![x[0], *out_features]
        }
        Op::BatchNormFolded { channels } => {
            if x.len() < 2 || x[1] != *channels {
                return Err(Error::shape(format!(
                    "layer `{name}` expects {channels} channels, got {x:?}"
                )));
            }
            x.to_vec()
        }
        Op::ReLU | Op::ReLU6 | Op::Softmax => x.to_vec(),
        Op::MaxPool(p) | Op::AvgPool(p) => {
            expect_rank(name, x, 4)?;
            vec![
                x[0],
                x[1],
                conv_out(x[2], p.kernel[0], p.stride[0], 0, name)?,
                conv_out(x[3], p.kernel[1], p.stride[1], 0, name)?,
            ]
        }
        Op::GlobalAvgPool => {
            expect_rank(name, x, 4)?;
            vec![x[0], x[1], 1, 1]
        }
        Op::Add => {
            if inputs[0] != inputs[1] {
                return Err(Error::shape(format!(
                    "layer `{name}` adds {:?} and {:?}",
                    inputs[0], inputs[1]
                )));
            }
            x.to_vec()
        }
        Op::Flatten => vec![x[0], x[1..].iter().product()],
    };
    Ok(shape)
}

fn check_weights(layer: &LayerSpec) -> Result<()> {
    let Some((w_shape, b_shape)) = layer.op.weight_shapes() else {
        if layer.weight.is_some() || layer.bias.is_some() {
            return Err(Error::invalid(format!(
                "layer `{}` of kind {} cannot carry weights",
                layer.name,
                layer.kind()
            )));
        }
        return Ok(());
    };
    let w = layer.weight.as_ref().ok_or_else(|| Error::MissingWeight {
        layer: layer.name.clone(),
        what: "weight",
    })?;
    if w.shape() != w_shape.as_slice() {
        return Err(Error::shape(format!(
            "layer `{}` weight shape {:?} does not match attributes {:?}",
            layer.name,
            w.shape(),
            w_shape
        )));
    }
    match (&layer.quant, &layer.bias) {
        (
            Some(LayerQuant::Static {
                bias_i32: Some(b), ..
            }),
            _,
        ) => {
            if b.len() != b_shape[0] {
                return Err(Error::shape(format!(
                    "layer `{}` integer bias length",
                    layer.name
                )));
            }
        }
        (_, Some(b)) => {
            if b.shape() != b_shape.as_slice() {
                return Err(Error::shape(format!(
                    "layer `{}` bias shape {:?}, expected {:?}",
                    layer.name,
                    b.shape(),
                    b_shape
                )));
            }
        }
        (_, None) => {
            return Err(Error::MissingWeight {
                layer: layer.name.clone(),
                what: "bias",
            });
        }
    }
    Ok(())
}

impl Graph {
    pub fn new(
        name: impl Into<String>,
        input: InputSpec,
        layers: Vec<LayerSpec>,
        output: impl Into<String>,
        num_classes: usize,
    ) -> Self {
        Self {
            name: name.into(),
            role: GraphRole::Classifier,
            input,
            layers,
            output: output.into(),
            num_classes,
        }
    }

    /// Checks topology, weights and shapes; returns every tensor's shape.
    pub fn validate(&self) -> Result<ShapeMap> {
        if self.num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        if self.input.shape.is_empty() || self.input.shape.contains(&0) {
            return Err(Error::invalid(format!(
                "input shape {:?}",
                self.input.shape
            )));
        }
        let mut shapes: ShapeMap = HashMap::new();
        shapes.insert(self.input.name.clone(), self.input.shape.clone());
        let mut names = HashSet::new();
        for layer in &self.layers {
            if !names.insert(layer.name.as_str()) {
                return Err(Error::invalid(format!(
                    "duplicate layer name `{}`",
                    layer.name
                )));
            }
            if layer.inputs.len() != layer.op.arity() {
                return Err(Error::invalid(format!(
                    "layer `{}` takes {} inputs, has {}",
                    layer.name,
                    layer.op.arity(),
                    layer.inputs.len()
                )));
            }
            check_weights(layer)?;
            let mut in_shapes = Vec::with_capacity(layer.inputs.len());
            for inp in &layer.inputs {
                let s = shapes.get(inp).ok_or_else(|| {
                    Error::invalid(format!(
                        "layer `{}` reads `{inp}` before it is produced",
                        layer.name
                    ))
                })?;
                in_shapes.push(s.as_slice());
            }
            let out = infer_layer_shape(layer, &in_shapes)?;
            if shapes.insert(layer.output.clone(), out).is_some() {
                return Err(Error::invalid(format!(
                    "tensor `{}` produced twice",
                    layer.output
                )));
            }
        }
        let out_shape = shapes
            .get(&self.output)
            .ok_or_else(|| Error::invalid(format!("output `{}` is never produced", self.output)))?;
        // Exactly one terminal tensor: everything except the output is consumed.
        let consumed: HashSet<&str> = self
            .layers
            .iter()
            .flat_map(|l| l.inputs.iter().map(String::as_str))
            .collect();
        for layer in &self.layers {
            if layer.output != self.output && !consumed.contains(layer.output.as_str()) {
                return Err(Error::invalid(format!(
                    "tensor `{}` is never consumed",
                    layer.output
                )));
            }
        }
        if consumed.contains(self.output.as_str()) {
            return Err(Error::invalid(format!(
                "output `{}` feeds another layer",
                self.output
            )));
        }
        if self.role == GraphRole::Classifier
            && (out_shape.len() != 2 || out_shape[1] != self.num_classes)
        {
            return Err(Error::invalid(format!(
                "classifier output {:?} is not [N, {}]",
                out_shape, self.num_classes
            )));
        }
        Ok(shapes)
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Index of the layer producing `tensor`.
    pub fn producer(&self, tensor: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.output == tensor)
    }

    /// Indices of the layers reading `tensor`.
    pub fn consumers(&self, tensor: &str) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.inputs.iter().any(|i| i == tensor))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn param_bytes(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_bytes).sum()
    }

    /// True when the last layer is a softmax, so the output is already a distribution.
    pub fn outputs_probabilities(&self) -> bool {
        self.layers.last().is_some_and(|l| l.op == Op::Softmax)
    }

    /// Tensors at which the graph can be split in two: produced by layer `i`
    /// and the only tensor layers after `i` read from the first half.
    ///
    /// Excludes the graph input and the terminal output.
    pub fn cut_points(&self) -> Vec<String> {
        (0..self.layers.len().saturating_sub(1))
            .filter(|&i| self.is_cut_after(i))
            .map(|i| self.layers[i].output.clone())
            .collect()
    }

    pub(crate) fn is_cut_after(&self, idx: usize) -> bool {
        let boundary = &self.layers[idx].output;
        let early: HashSet<&str> = std::iter::once(self.input.name.as_str())
            .chain(self.layers[..=idx].iter().map(|l| l.output.as_str()))
            .collect();
        self.layers[idx + 1..]
            .iter()
            .flat_map(|l| l.inputs.iter())
            .all(|t| t == boundary || !early.contains(t.as_str()))
    }

    /// Per-kind layer counts, for summaries.
    pub fn kind_histogram(&self) -> BTreeMap<LayerKind, usize> {
        let mut h = BTreeMap::new();
        for l in &self.layers {
            *h.entry(l.kind()).or_insert(0) += 1;
        }
        h
    }
}
