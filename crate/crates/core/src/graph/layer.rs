use std::fmt;

use serde::{Deserialize, Serialize};

use crate::quant::QuantParams;
use crate::tensor::Tensor;

/// The twelve supported layer kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerKind {
    #[serde(rename = "conv2d")]
    Conv2D,
    #[serde(rename = "depthwise_conv2d")]
    DepthwiseConv2D,
    #[serde(rename = "fully_connected")]
    FullyConnected,
    #[serde(rename = "batch_norm_folded")]
    BatchNormFolded,
    #[serde(rename = "relu")]
    ReLU,
    #[serde(rename = "relu6")]
    ReLU6,
    #[serde(rename = "max_pool")]
    MaxPool,
    #[serde(rename = "avg_pool")]
    AvgPool,
    #[serde(rename = "global_avg_pool")]
    GlobalAvgPool,
    #[serde(rename = "add")]
    Add,
    #[serde(rename = "flatten")]
    Flatten,
    #[serde(rename = "softmax")]
    Softmax,
}

impl LayerKind {
    pub const ALL: [LayerKind; 12] = [
        LayerKind::Conv2D,
        LayerKind::DepthwiseConv2D,
        LayerKind::FullyConnected,
        LayerKind::BatchNormFolded,
        LayerKind::ReLU,
        LayerKind::ReLU6,
        LayerKind::MaxPool,
        LayerKind::AvgPool,
        LayerKind::GlobalAvgPool,
        LayerKind::Add,
        LayerKind::Flatten,
        LayerKind::Softmax,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::Conv2D => "conv2d",
            LayerKind::DepthwiseConv2D => "depthwise_conv2d",
            LayerKind::FullyConnected => "fully_connected",
            LayerKind::BatchNormFolded => "batch_norm_folded",
            LayerKind::ReLU => "relu",
            LayerKind::ReLU6 => "relu6",
            LayerKind::MaxPool => "max_pool",
            LayerKind::AvgPool => "avg_pool",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Add => "add",
            LayerKind::Flatten => "flatten",
            LayerKind::Softmax => "softmax",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim().to_ascii_lowercase();
        let kind = match s.as_str() {
            "conv" | "conv2d" => LayerKind::Conv2D,
            "depthwise" | "depthwise_conv2d" | "dwconv" => LayerKind::DepthwiseConv2D,
            "fc" | "gemm" | "matmul" | "fully_connected" | "linear" => LayerKind::FullyConnected,
            "bn" | "batch_norm" | "batch_norm_folded" => LayerKind::BatchNormFolded,
            "relu" => LayerKind::ReLU,
            "relu6" => LayerKind::ReLU6,
            "max_pool" | "maxpool" => LayerKind::MaxPool,
            "avg_pool" | "avgpool" => LayerKind::AvgPool,
            "global_avg_pool" | "gap" => LayerKind::GlobalAvgPool,
            "add" => LayerKind::Add,
            "flatten" => LayerKind::Flatten,
            "softmax" => LayerKind::Softmax,
            _ => return None,
        };
        Some(kind)
    }

    /// Kinds that carry a weight tensor.
    pub fn has_weights(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv2D
                | LayerKind::DepthwiseConv2D
                | LayerKind::FullyConnected
                | LayerKind::BatchNormFolded
        )
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvAttrs {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: [usize; 2],
}

/// Depthwise convolution with channel multiplier 1: one `Kh x Kw` filter per
/// input channel, so input and output channel counts are equal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthwiseAttrs {
    pub channels: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: [usize; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolAttrs {
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
}

/// Layer operation together with its attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Op {
    #[serde(rename = "conv2d")]
    Conv2D(ConvAttrs),
    #[serde(rename = "depthwise_conv2d")]
    DepthwiseConv2D(DepthwiseAttrs),
    FullyConnected {
        in_features: usize,
        out_features: usize,
    },
    /// Per-channel `y = scale[c] * x + shift[c]`; weight holds scale, bias holds shift.
    BatchNormFolded {
        channels: usize,
    },
    #[serde(rename = "relu")]
    ReLU,
    #[serde(rename = "relu6")]
    ReLU6,
    MaxPool(PoolAttrs),
    AvgPool(PoolAttrs),
    GlobalAvgPool,
    Add,
    Flatten,
    Softmax,
}

impl Op {
    pub fn kind(&self) -> LayerKind {
        match self {
            Op::Conv2D(_) => LayerKind::Conv2D,
            Op::DepthwiseConv2D(_) => LayerKind::DepthwiseConv2D,
            Op::FullyConnected { .. } => LayerKind::FullyConnected,
            Op::BatchNormFolded { .. } => LayerKind::BatchNormFolded,
            Op::ReLU => LayerKind::ReLU,
            Op::ReLU6 => LayerKind::ReLU6,
            Op::MaxPool(_) => LayerKind::MaxPool,
            Op::AvgPool(_) => LayerKind::AvgPool,
            Op::GlobalAvgPool => LayerKind::GlobalAvgPool,
            Op::Add => LayerKind::Add,
            Op::Flatten => LayerKind::Flatten,
            Op::Softmax => LayerKind::Softmax,
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Op::Add => 2,
            _ => 1,
        }
    }

    /// Expected weight and bias shapes.
    pub fn weight_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            Op::Conv2D(a) => Some((
                vec![a.out_channels, a.in_channels, a.kernel[0], a.kernel[1]],
                vec![a.out_channels],
            )),
            Op::DepthwiseConv2D(a) => Some((
                vec![a.channels, 1, a.kernel[0], a.kernel[1]],
                vec![a.channels],
            )),
            Op::FullyConnected {
                in_features,
                out_features,
            } => Some((vec![out_features, in_features], vec![out_features])),
            Op::BatchNormFolded { channels } => Some((vec![channels], vec![channels])),
            _ => None,
        }
    }
}

/// How a layer executes after quantization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LayerQuant {
    /// Calibrated fixed parameters; u8 in, u8 out, i32 accumulation.
    Static {
        /// One entry per layer input.
        inputs: Vec<QuantParams>,
        output: QuantParams,
        /// Bias pre-scaled by `input_scale * weight_scale` (weighted kinds only).
        #[serde(skip_serializing_if = "Option::is_none", default)]
        bias_i32: Option<Vec<i32>>,
    },
    /// u8 weights; activation parameters derived per call from the observed range.
    Dynamic,
}

/// One node of a [`crate::graph::Graph`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<String>,
    pub output: String,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
    pub quant: Option<LayerQuant>,
}

impl LayerSpec {
    pub fn new(
        name: impl Into<String>,
        op: Op,
        inputs: &[&str],
        output: impl Into<String>,
    ) -> Self {
        Self {
            name: name.into(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            output: output.into(),
            weight: None,
            bias: None,
            quant: None,
        }
    }

    /// Convolution whose channel attributes are read off the weight shape.
    pub fn conv2d(
        name: &str,
        input: &str,
        output: &str,
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    ) -> Self {
        let s = weight.shape().to_vec();
        let attrs = ConvAttrs {
            out_channels: s[0],
            in_channels: s[1],
            kernel: [s[2], s[3]],
            stride: [stride, stride],
            padding: [padding, padding],
        };
        Self::new(name, Op::Conv2D(attrs), &[input], output).with_weights(weight, bias)
    }

    pub fn depthwise(
        name: &str,
        input: &str,
        output: &str,
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    ) -> Self {
        let s = weight.shape().to_vec();
        let attrs = DepthwiseAttrs {
            channels: s[0],
            kernel: [s[2], s[3]],
            stride: [stride, stride],
            padding: [padding, padding],
        };
        Self::new(name, Op::DepthwiseConv2D(attrs), &[input], output).with_weights(weight, bias)
    }

    pub fn fully_connected(
        name: &str,
        input: &str,
        output: &str,
        weight: Tensor,
        bias: Tensor,
    ) -> Self {
        let s = weight.shape().to_vec();
        let op = Op::FullyConnected {
            in_features: s[1],
            out_features: s[0],
        };
        Self::new(name, op, &[input], output).with_weights(weight, bias)
    }

    pub fn batch_norm(name: &str, input: &str, output: &str, scale: Tensor, shift: Tensor) -> Self {
        let op = Op::BatchNormFolded {
            channels: scale.len(),
        };
        Self::new(name, op, &[input], output).with_weights(scale, shift)
    }

    pub fn with_weights(mut self, weight: Tensor, bias: Tensor) -> Self {
        self.weight = Some(weight);
        self.bias = Some(bias);
        self
    }

    pub fn kind(&self) -> LayerKind {
        self.op.kind()
    }

    /// Number of stored parameters (weight and bias elements).
    pub fn param_count(&self) -> usize {
        let bias = match &self.quant {
            Some(LayerQuant::Static {
                bias_i32: Some(b), ..
            }) => b.len(),
            _ => self.bias.as_ref().map_or(0, Tensor::len),
        };
        self.weight.as_ref().map_or(0, Tensor::len) + bias
    }

    /// Bytes of stored parameters, including any pre-scaled integer bias.
    pub fn param_bytes(&self) -> usize {
        let mut n = self.weight.as_ref().map_or(0, Tensor::byte_len);
        match &self.quant {
            Some(LayerQuant::Static {
                bias_i32: Some(b), ..
            }) => n += b.len() * 4,
            _ => n += self.bias.as_ref().map_or(0, Tensor::byte_len),
        }
        n
    }

    pub fn is_quantized(&self) -> bool {
        self.quant.is_some()
    }
}
