#![allow(dead_code)]

use lwdna_core::arch::{ArchSpec, ChannelGroup, Node};
use lwdna_core::rng::{self, Rng};
use lwdna_core::Tensor;

pub fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng::normal_vec(rng, n, 1.0)).unwrap()
}

/// Bias-free conv+ReLU chain with a pooled linear head. `bn` inserts batch
/// norm after every convolution.
pub fn chain(input_channels: usize, widths: &[usize], kernel: usize, bn: bool, classes: usize) -> ArchSpec {
    let mut nodes = vec![Node::Input];
    let mut groups = Vec::new();
    let mut prev = 0;
    for (g, &w) in widths.iter().enumerate() {
        groups.push(ChannelGroup { name: format!("conv{}", g + 1), width: w, prunable: true });
        nodes.push(Node::Conv { input: prev, group: g, kernel, stride: 1, padding: kernel / 2, bias: false });
        if bn {
            nodes.push(Node::BatchNorm { input: nodes.len() - 1 });
        }
        nodes.push(Node::Relu { input: nodes.len() - 1 });
        prev = nodes.len() - 1;
    }
    nodes.push(Node::GlobalAvgPool { input: prev });
    nodes.push(Node::Linear { input: nodes.len() - 1, out_features: classes, bias: true });
    let arch = ArchSpec { name: "chain".into(), input_channels, groups, nodes };
    arch.validate().unwrap();
    arch
}
