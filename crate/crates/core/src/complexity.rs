//! Exact FLOP and parameter accounting.
//!
//! One multiply-accumulate counts as one FLOP. Batch norm is charged
//! `2·C·H·W` and ReLU `C·H·W` per sample; both are part of the totals.
//! Pooling, residual additions and scaling are free. Parameter counts
//! include conv/linear biases and BN γ/β but not running statistics.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, ChannelConfig, Node, NodeId};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Depthwise,
    Bn,
    Relu,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer_id: NodeId,
    pub kind: LayerKind,
    pub flops: u64,
    pub params: u64,
    pub out_spatial: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub total_flops: u64,
    pub total_params: u64,
    pub layers: Vec<LayerCost>,
}

impl CostReport {
    /// Conv and linear multiply-accumulates only.
    pub fn mac_flops(&self) -> u64 {
        self.layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv | LayerKind::Depthwise | LayerKind::Linear))
            .map(|l| l.flops)
            .sum()
    }
}

pub fn model_cost(arch: &ArchSpec, config: &ChannelConfig, input_hw: (usize, usize)) -> Result<CostReport> {
    let shapes = arch.shapes(config, input_hw)?;
    let mut layers = Vec::new();
    for (id, node) in arch.nodes.iter().enumerate() {
        let out = shapes[id];
        let plane = (out.height * out.width) as u64;
        let spatial = (out.height, out.width);
        let cost = match node {
            Node::Conv { input, kernel, bias, .. } => {
                let c = shapes[*input].channels as u64;
                let n = out.channels as u64;
                let k2 = (kernel * kernel) as u64;
                let weights = n * c * k2;
                Some((LayerKind::Conv, weights * plane, weights + if *bias { n } else { 0 }))
            }
            Node::Depthwise { kernel, .. } => {
                let weights = out.channels as u64 * (kernel * kernel) as u64;
                Some((LayerKind::Depthwise, weights * plane, weights))
            }
            Node::BatchNorm { .. } => {
                let c = out.channels as u64;
                Some((LayerKind::Bn, 2 * c * plane, 2 * c))
            }
            Node::Relu { .. } => Some((LayerKind::Relu, out.channels as u64 * plane, 0)),
            Node::Linear { input, bias, .. } => {
                let f = shapes[*input].channels as u64;
                let k = out.channels as u64;
                Some((LayerKind::Linear, k * f, k * f + if *bias { k } else { 0 }))
            }
            _ => None,
        };
        if let Some((kind, flops, params)) = cost {
            layers.push(LayerCost { layer_id: id, kind, flops, params, out_spatial: spatial });
        }
    }
    Ok(CostReport {
        total_flops: layers.iter().map(|l| l.flops).sum(),
        total_params: layers.iter().map(|l| l.params).sum(),
        layers,
    })
}

pub fn flops(arch: &ArchSpec, config: &ChannelConfig, input_hw: (usize, usize)) -> Result<u64> {
    model_cost(arch, config, input_hw).map(|c| c.total_flops)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub base_flops: u64,
    pub new_flops: u64,
    pub base_params: u64,
    pub new_params: u64,
    /// `100 · new / base`
    pub flops_ratio: f64,
    pub params_ratio: f64,
}

pub fn ratio_report(arch: &ArchSpec, base: &ChannelConfig, new: &ChannelConfig, input_hw: (usize, usize)) -> Result<Ratio> {
    let b = model_cost(arch, base, input_hw)?;
    let n = model_cost(arch, new, input_hw)?;
    Ok(Ratio {
        base_flops: b.total_flops,
        new_flops: n.total_flops,
        base_params: b.total_params,
        new_params: n.total_params,
        flops_ratio: 100.0 * n.total_flops as f64 / b.total_flops as f64,
        params_ratio: 100.0 * n.total_params as f64 / b.total_params as f64,
    })
}
