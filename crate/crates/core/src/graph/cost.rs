//! Analytic multiply-accumulate accounting.
//!
//! Convolutions count `Cout * (Cin / groups) * Kh * Kw * Hout * Wout` per
//! batch element and fully connected layers `in * out`. Elementwise, pooling,
//! reshaping and softmax layers are counted as zero MACs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{format, Graph, LayerSpec, Op, ShapeMap};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub macs_per_layer: BTreeMap<String, u64>,
    pub total_macs: u64,
    pub param_count: u64,
    pub serialized_bytes: u64,
}

/// MACs of one layer given the graph's shape map.
pub fn layer_macs(layer: &LayerSpec, shapes: &ShapeMap) -> u64 {
    let out = &shapes[&layer.output];
    let batch = out[0] as u64;
    match &layer.op {
        Op::Conv2D(a) => {
            batch
                * (a.out_channels * a.in_channels * a.kernel[0] * a.kernel[1] * out[2] * out[3])
                    as u64
        }
        Op::DepthwiseConv2D(a) => {
            batch * (a.channels * a.kernel[0] * a.kernel[1] * out[2] * out[3]) as u64
        }
        Op::FullyConnected {
            in_features,
            out_features,
        } => batch * (*in_features as u64) * (*out_features as u64),
        _ => 0,
    }
}

/// Total MACs only (no serialization).
pub fn total_macs(graph: &Graph) -> Result<u64> {
    let shapes = graph.validate()?;
    Ok(graph.layers.iter().map(|l| layer_macs(l, &shapes)).sum())
}

pub fn count_macs(graph: &Graph) -> Result<CostReport> {
    let shapes = graph.validate()?;
    let macs_per_layer: BTreeMap<String, u64> = graph
        .layers
        .iter()
        .map(|l| (l.name.clone(), layer_macs(l, &shapes)))
        .collect();
    let total_macs = macs_per_layer.values().sum();
    Ok(CostReport {
        macs_per_layer,
        total_macs,
        param_count: graph.param_count() as u64,
        serialized_bytes: format::to_bytes(graph)?.len() as u64,
    })
}
