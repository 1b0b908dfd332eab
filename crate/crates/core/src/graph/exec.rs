//! Graph execution.
//!
//! Activations flow as f32 or u8 tensors. A statically quantized layer reads
//! u8 input directly when the producer already emitted its expected
//! parameters and quantizes at the boundary otherwise; an f32 layer
//! dequantizes any u8 input it receives. The terminal output is always f32.

use std::borrow::Cow;
use std::collections::HashMap;

use super::kernels::{self, ConvGeometry};
use super::layer::{LayerQuant, LayerSpec, Op};
use super::Graph;
use crate::error::{Error, Result};
use crate::quant::params::{qparams_for_values, round_half_up};
use crate::quant::QuantParams;
use crate::tensor::Tensor;

/// Runs `graph` on `input` and returns the terminal output as f32.
///
/// Pure: identical inputs give bit-identical outputs. Scratch buffers are
/// allocated per call, so a shared graph can be executed from many threads.
pub fn forward(graph: &Graph, input: &Tensor) -> Result<Tensor> {
    forward_observed(graph, input, |_, _| {})
}

/// [`forward`], calling `observe` with every tensor as it is produced
/// (the graph input first).
pub fn forward_observed(
    graph: &Graph,
    input: &Tensor,
    mut observe: impl FnMut(&str, &Tensor),
) -> Result<Tensor> {
    let shapes = graph.validate()?;
    if input.shape() != graph.input.shape.as_slice() {
        return Err(Error::shape(format!(
            "graph `{}` expects input {:?}, got {:?}",
            graph.name,
            graph.input.shape,
            input.shape()
        )));
    }
    let mut env: HashMap<&str, Tensor> = HashMap::with_capacity(graph.layers.len() + 1);
    observe(&graph.input.name, input);
    env.insert(&graph.input.name, input.clone());
    for layer in &graph.layers {
        let ins: Vec<&Tensor> = layer.inputs.iter().map(|n| &env[n.as_str()]).collect();
        let out_shape = &shapes[&layer.output];
        let out = execute_layer(layer, &ins, out_shape)?;
        observe(&layer.output, &out);
        env.insert(&layer.output, out);
    }
    let out = env.remove(graph.output.as_str()).expect("validated output");
    Ok(out.to_f32())
}

fn execute_layer(layer: &LayerSpec, ins: &[&Tensor], out_shape: &[usize]) -> Result<Tensor> {
    match &layer.quant {
        None => execute_f32(layer, ins, out_shape),
        Some(LayerQuant::Static {
            inputs,
            output,
            bias_i32,
        }) => execute_static(layer, ins, out_shape, inputs, *output, bias_i32.as_deref()),
        Some(LayerQuant::Dynamic) => execute_dynamic(layer, ins, out_shape),
    }
}

fn weight_f32(layer: &LayerSpec) -> Result<Cow<'_, [f32]>> {
    layer
        .weight
        .as_ref()
        .map(Tensor::f32_values)
        .ok_or_else(|| Error::MissingWeight {
            layer: layer.name.clone(),
            what: "weight",
        })
}

fn bias_f32(layer: &LayerSpec) -> Result<Cow<'_, [f32]>> {
    layer
        .bias
        .as_ref()
        .map(Tensor::f32_values)
        .ok_or_else(|| Error::MissingWeight {
            layer: layer.name.clone(),
            what: "bias",
        })
}

fn execute_f32(layer: &LayerSpec, ins: &[&Tensor], out_shape: &[usize]) -> Result<Tensor> {
    let x = ins[0].f32_values();
    let xs = ins[0].shape();
    let out_hw = || [out_shape[2], out_shape[3]];
    let data: Vec<f32> = match &layer.op {
        Op::Conv2D(a) => {
            let (w, b) = (weight_f32(layer)?, bias_f32(layer)?);
            kernels::conv2d(&x, xs, &w, ConvGeometry::from(a), out_hw(), |c| b[c])
        }
        Op::DepthwiseConv2D(a) => {
            let (w, b) = (weight_f32(layer)?, bias_f32(layer)?);
            kernels::conv2d(&x, xs, &w, ConvGeometry::from(a), out_hw(), |c| b[c])
        }
        Op::FullyConnected {
            in_features,
            out_features,
        } => {
            let (w, b) = (weight_f32(layer)?, bias_f32(layer)?);
            kernels::fully_connected(&x, xs[0], *in_features, &w, *out_features, |o| b[o])
        }
        Op::BatchNormFolded { channels } => {
            let (scale, shift) = (weight_f32(layer)?, bias_f32(layer)?);
            let plane: usize = xs[2..].iter().product();
            x.iter()
                .enumerate()
                .map(|(i, &v)| {
                    let c = (i / plane) % channels;
                    v * scale[c] + shift[c]
                })
                .collect()
        }
        Op::ReLU => x.iter().map(|&v| v.max(0.0)).collect(),
        Op::ReLU6 => x.iter().map(|&v| v.clamp(0.0, 6.0)).collect(),
        Op::MaxPool(p) => kernels::pool(&x, xs, p, out_hw(), |it| {
            it.fold(f32::NEG_INFINITY, f32::max)
        }),
        Op::AvgPool(p) => {
            let count = (p.kernel[0] * p.kernel[1]) as f32;
            kernels::pool(&x, xs, p, out_hw(), |it| {
                it.fold(0.0f32, |a, v| a + v) / count
            })
        }
        Op::GlobalAvgPool => {
            let count = (xs[2] * xs[3]) as f32;
            kernels::per_plane(&x, xs[0] * xs[1], |p| {
                p.iter().fold(0.0f32, |a, &v| a + v) / count
            })
        }
        Op::Add => {
            let y = ins[1].f32_values();
            x.iter().zip(y.iter()).map(|(a, b)| a + b).collect()
        }
        Op::Flatten => x.into_owned(),
        Op::Softmax => {
            let row = *xs.last().unwrap();
            let mut out = Vec::with_capacity(x.len());
            for chunk in x.chunks(row) {
                out.extend(crate::prob::softmax(chunk)?);
            }
            out
        }
    };
    Tensor::from_f32(out_shape.to_vec(), data)
}

/// u8 values of `t` under `qp`, borrowing when `t` already uses `qp`.
fn quantized_view(t: &Tensor, qp: QuantParams) -> Cow<'_, [u8]> {
    match t.as_u8() {
        Some((values, p)) if p == qp => Cow::Borrowed(values),
        _ => Cow::Owned(t.f32_values().iter().map(|&v| qp.quantize(v)).collect()),
    }
}

fn centered(values: &[u8], zero_point: u8) -> Vec<i32> {
    values
        .iter()
        .map(|&q| q as i32 - zero_point as i32)
        .collect()
}

#[inline]
fn requantize(real_over_scale: f64, zero_point: u8) -> u8 {
    (round_half_up(real_over_scale) + zero_point as f64).clamp(0.0, 255.0) as u8
}

fn u8_weight(layer: &LayerSpec) -> Result<(&[u8], QuantParams)> {
    layer
        .weight
        .as_ref()
        .and_then(Tensor::as_u8)
        .ok_or_else(|| Error::invalid(format!("quantized layer `{}` needs u8 weights", layer.name)))
}

fn integer_accumulate(
    layer: &LayerSpec,
    x: &[i32],
    xs: &[usize],
    out_shape: &[usize],
    bias: impl Fn(usize) -> i32,
) -> Result<Vec<i32>> {
    let (wq, wqp) = u8_weight(layer)?;
    let w = centered(wq, wqp.zero_point);
    let acc = match &layer.op {
        Op::Conv2D(a) => kernels::conv2d(
            x,
            xs,
            &w,
            ConvGeometry::from(a),
            [out_shape[2], out_shape[3]],
            bias,
        ),
        Op::DepthwiseConv2D(a) => kernels::conv2d(
            x,
            xs,
            &w,
            ConvGeometry::from(a),
            [out_shape[2], out_shape[3]],
            bias,
        ),
        Op::FullyConnected {
            in_features,
            out_features,
        } => kernels::fully_connected(x, xs[0], *in_features, &w, *out_features, bias),
        _ => {
            return Err(Error::UnsupportedLayerKind {
                layer: layer.name.clone(),
                kind: layer.kind(),
            })
        }
    };
    Ok(acc)
}

fn execute_static(
    layer: &LayerSpec,
    ins: &[&Tensor],
    out_shape: &[usize],
    in_params: &[QuantParams],
    out_qp: QuantParams,
    bias_i32: Option<&[i32]>,
) -> Result<Tensor> {
    if in_params.len() != ins.len() {
        return Err(Error::invalid(format!(
            "layer `{}` quant params arity",
            layer.name
        )));
    }
    let xqp = in_params[0];
    let xq = quantized_view(ins[0], xqp);
    let xs = ins[0].shape();
    let so = out_qp.scale as f64;
    // Integer ops that keep the input parameters; re-mapped below if the
    // output parameters differ.
    let (values, values_qp): (Vec<u8>, QuantParams) = match &layer.op {
        Op::Conv2D(_) | Op::DepthwiseConv2D(_) | Op::FullyConnected { .. } => {
            let x = centered(&xq, xqp.zero_point);
            let acc =
                integer_accumulate(layer, &x, xs, out_shape, |o| bias_i32.map_or(0, |b| b[o]))?;
            let (_, wqp) = u8_weight(layer)?;
            let multiplier = xqp.scale as f64 * wqp.scale as f64 / so;
            let q = acc
                .iter()
                .map(|&a| requantize(a as f64 * multiplier, out_qp.zero_point))
                .collect();
            (q, out_qp)
        }
        Op::ReLU => (xq.iter().map(|&q| q.max(xqp.zero_point)).collect(), xqp),
        Op::ReLU6 => {
            let hi = xqp.quantize(6.0);
            (
                xq.iter().map(|&q| q.max(xqp.zero_point).min(hi)).collect(),
                xqp,
            )
        }
        Op::MaxPool(p) => {
            let q = kernels::pool(&xq, xs, p, [out_shape[2], out_shape[3]], |it| {
                it.max().unwrap_or(0)
            });
            (q, xqp)
        }
        Op::Flatten => (xq.into_owned(), xqp),
        Op::AvgPool(p) => {
            let count = (p.kernel[0] * p.kernel[1]) as f64;
            let x = centered(&xq, xqp.zero_point);
            let m = xqp.scale as f64 / (count * so);
            let q = kernels::pool(&x, xs, p, [out_shape[2], out_shape[3]], |it| {
                requantize(it.sum::<i32>() as f64 * m, out_qp.zero_point)
            });
            (q, out_qp)
        }
        Op::GlobalAvgPool => {
            let count = (xs[2] * xs[3]) as f64;
            let x = centered(&xq, xqp.zero_point);
            let m = xqp.scale as f64 / (count * so);
            let q = kernels::per_plane(&x, xs[0] * xs[1], |p| {
                requantize(p.iter().sum::<i32>() as f64 * m, out_qp.zero_point)
            });
            (q, out_qp)
        }
        Op::Add => {
            let yqp = in_params[1];
            let yq = quantized_view(ins[1], yqp);
            let q = xq
                .iter()
                .zip(yq.iter())
                .map(|(&a, &b)| {
                    let real = xqp.scale as f64 * (a as i32 - xqp.zero_point as i32) as f64
                        + yqp.scale as f64 * (b as i32 - yqp.zero_point as i32) as f64;
                    requantize(real / so, out_qp.zero_point)
                })
                .collect();
            (q, out_qp)
        }
        Op::BatchNormFolded { .. } | Op::Softmax => {
            return Err(Error::UnsupportedLayerKind {
                layer: layer.name.clone(),
                kind: layer.kind(),
            })
        }
    };
    let values = if values_qp == out_qp {
        values
    } else {
        values
            .iter()
            .map(|&q| out_qp.quantize(values_qp.dequantize(q)))
            .collect()
    };
    Tensor::from_u8(out_shape.to_vec(), values, out_qp)
}

fn execute_dynamic(layer: &LayerSpec, ins: &[&Tensor], out_shape: &[usize]) -> Result<Tensor> {
    let x = ins[0].f32_values();
    let xqp = qparams_for_values(&x)?;
    let xq: Vec<i32> = x
        .iter()
        .map(|&v| xqp.quantize(v) as i32 - xqp.zero_point as i32)
        .collect();
    let acc = integer_accumulate(layer, &xq, ins[0].shape(), out_shape, |_| 0)?;
    let (_, wqp) = u8_weight(layer)?;
    let b = bias_f32(layer)?;
    let per_out: usize = match layer.op {
        Op::FullyConnected { .. } => 1,
        _ => out_shape[2] * out_shape[3],
    };
    let channels = out_shape[1];
    let s = xqp.scale as f64 * wqp.scale as f64;
    let data = acc
        .iter()
        .enumerate()
        .map(|(i, &a)| (a as f64 * s + b[(i / per_out) % channels] as f64) as f32)
        .collect();
    Tensor::from_f32(out_shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{InputSpec, LayerSpec};

    fn single(layer: LayerSpec, in_shape: Vec<usize>, classes: usize) -> Graph {
        let out = layer.output.clone();
        Graph::new(
            "t",
            InputSpec {
                name: "x".into(),
                shape: in_shape,
            },
            vec![layer],
            out,
            classes,
        )
    }

    #[test]
    fn flatten_is_a_reshape() {
        let g = single(
            LayerSpec::new("f", Op::Flatten, &["x"], "y"),
            vec![1, 1, 2, 2],
            4,
        );
        let x = Tensor::from_f32(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = forward(&g, &x).unwrap();
        assert_eq!(y.shape(), &[1, 4]);
        assert_eq!(y.as_f32().unwrap(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn identity_fully_connected() {
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 4] = 1.0;
        }
        let layer = LayerSpec::fully_connected(
            "fc",
            "x",
            "y",
            Tensor::from_f32(vec![3, 3], w).unwrap(),
            Tensor::zeros(vec![3]).unwrap(),
        );
        let g = single(layer, vec![1, 3], 3);
        let x = Tensor::from_f32(vec![1, 3], vec![5.0, -1.0, 2.0]).unwrap();
        assert_eq!(
            forward(&g, &x).unwrap().as_f32().unwrap(),
            &[5.0, -1.0, 2.0]
        );
    }

    #[test]
    fn pointwise_conv_sums_channels() {
        // Oracle: explicit nested loops over (c, h, w).
        let x: Vec<f32> = (0..8).map(|v| v as f32 * 0.5 - 1.0).collect();
        let layer = LayerSpec::conv2d(
            "c",
            "x",
            "y",
            Tensor::from_f32(vec![1, 2, 1, 1], vec![1.0, 1.0]).unwrap(),
            Tensor::zeros(vec![1]).unwrap(),
            1,
            0,
        );
        let mut g = single(layer, vec![1, 2, 2, 2], 1);
        g.role = crate::graph::GraphRole::Segment;
        let y = forward(&g, &Tensor::from_f32(vec![1, 2, 2, 2], x.clone()).unwrap()).unwrap();
        let mut expect = vec![0.0f32; 4];
        for c in 0..2 {
            for p in 0..4 {
                expect[p] += x[c * 4 + p];
            }
        }
        assert_eq!(y.as_f32().unwrap(), expect.as_slice());
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let g = single(
            LayerSpec::new("f", Op::Flatten, &["x"], "y"),
            vec![1, 1, 2, 2],
            4,
        );
        let x = Tensor::zeros(vec![1, 4]).unwrap();
        assert!(matches!(forward(&g, &x), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn static_relu_clamps_at_zero_point() {
        let qp = QuantParams::new(0.5, 10).unwrap();
        let mut layer = LayerSpec::new("r", Op::ReLU, &["x"], "y");
        layer.quant = Some(LayerQuant::Static {
            inputs: vec![qp],
            output: qp,
            bias_i32: None,
        });
        let mut g = single(layer, vec![1, 4], 4);
        g.num_classes = 4;
        let x = Tensor::from_f32(vec![1, 4], vec![-2.0, -0.5, 0.0, 1.5]).unwrap();
        assert_eq!(
            forward(&g, &x).unwrap().as_f32().unwrap(),
            &[0.0, 0.0, 0.0, 1.5]
        );
    }
}
