//! Built-in architectures.
//!
//! The desk-scale nets (`vgg-tiny`, `resnet-tiny`, `mobile-tiny`) cover the
//! plain, residual and depthwise-separable families. `resnet56` and
//! `densenet40` are the standard CIFAR networks, kept for cost accounting.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::arch::{ArchSpec, ChannelGroup, Node, NodeId};
use crate::error::{Error, Result};

/// VGG11 channel configuration, one entry per conv layer.
pub const VGG11_CONFIG: [usize; 8] = [64, 128, 256, 256, 512, 512, 512, 512];

pub const NAMES: [&str; 5] = ["vgg-tiny", "resnet-tiny", "mobile-tiny", "resnet56", "densenet40"];

const VGG_TINY: [(usize, usize); 6] = [(16, 1), (16, 2), (32, 1), (32, 2), (64, 1), (64, 2)];
const MOBILE_TINY_STEM: usize = 16;
const MOBILE_TINY_BLOCKS: [(usize, usize); 4] = [(32, 1), (64, 2), (128, 2), (128, 1)];

pub fn build(name: &str, num_classes: usize, input_channels: usize, input_hw: (usize, usize)) -> Result<ArchSpec> {
    if num_classes == 0 {
        return Err(Error::arg("num_classes", "must be positive"));
    }
    let spec = match name {
        "vgg-tiny" => vgg_tiny(num_classes, input_channels),
        "resnet-tiny" => resnet_cifar(name, 2, 16, num_classes, input_channels),
        "resnet56" => resnet_cifar(name, 9, 16, num_classes, input_channels),
        "mobile-tiny" => mobile_tiny(num_classes, input_channels),
        "densenet40" => densenet(name, 12, 12, 24, num_classes, input_channels),
        other => return Err(Error::UnknownArch(other.to_string())),
    };
    spec.validate()?;
    spec.shapes(&spec.default_config(), input_hw)?;
    Ok(spec)
}

struct Builder {
    spec: ArchSpec,
}

impl Builder {
    fn new(name: &str, input_channels: usize) -> Self {
        Builder {
            spec: ArchSpec { name: name.to_string(), input_channels, groups: Vec::new(), nodes: vec![Node::Input] },
        }
    }

    fn group(&mut self, name: String, width: usize) -> usize {
        self.spec.groups.push(ChannelGroup { name, width, prunable: true });
        self.spec.groups.len() - 1
    }

    fn push(&mut self, node: Node) -> NodeId {
        self.spec.nodes.push(node);
        self.spec.nodes.len() - 1
    }

    fn conv(&mut self, input: NodeId, group: usize, kernel: usize, stride: usize) -> NodeId {
        self.push(Node::Conv { input, group, kernel, stride, padding: kernel / 2, bias: false })
    }

    fn bn(&mut self, input: NodeId) -> NodeId {
        self.push(Node::BatchNorm { input })
    }

    fn relu(&mut self, input: NodeId) -> NodeId {
        self.push(Node::Relu { input })
    }

    fn conv_bn_relu(&mut self, input: NodeId, group: usize, kernel: usize, stride: usize) -> NodeId {
        let c = self.conv(input, group, kernel, stride);
        let b = self.bn(c);
        self.relu(b)
    }

    fn head(mut self, input: NodeId, num_classes: usize) -> ArchSpec {
        let pooled = self.push(Node::GlobalAvgPool { input });
        self.push(Node::Linear { input: pooled, out_features: num_classes, bias: true });
        self.spec
    }
}

fn vgg_tiny(num_classes: usize, input_channels: usize) -> ArchSpec {
    let mut b = Builder::new("vgg-tiny", input_channels);
    let mut x = 0;
    for (i, &(width, stride)) in VGG_TINY.iter().enumerate() {
        let g = b.group(format!("conv{}", i + 1), width);
        x = b.conv_bn_relu(x, g, 3, stride);
    }
    b.head(x, num_classes)
}

/// CIFAR-style ResNet with basic blocks and projection shortcuts where the
/// stage changes resolution.
fn resnet_cifar(name: &str, blocks: usize, base: usize, num_classes: usize, input_channels: usize) -> ArchSpec {
    let mut b = Builder::new(name, input_channels);
    let mut stream = b.group("stage1".into(), base);
    let mut x = b.conv_bn_relu(0, stream, 3, 1);
    for stage in 0..3 {
        let width = base << stage;
        if stage > 0 {
            stream = b.group(format!("stage{}", stage + 1), width);
        }
        for block in 0..blocks {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let inner = b.group(format!("stage{}.block{}.conv1", stage + 1, block + 1), width);
            let h = b.conv_bn_relu(x, inner, 3, stride);
            let h = b.conv(h, stream, 3, 1);
            let h = b.bn(h);
            let shortcut = if stride != 1 {
                let s = b.conv(x, stream, 1, stride);
                b.bn(s)
            } else {
                x
            };
            let sum = b.push(Node::Add { inputs: vec![h, shortcut] });
            x = b.relu(sum);
        }
    }
    b.head(x, num_classes)
}

fn mobile_tiny(num_classes: usize, input_channels: usize) -> ArchSpec {
    let mut b = Builder::new("mobile-tiny", input_channels);
    let stem = b.group("stem".into(), MOBILE_TINY_STEM);
    let mut x = b.conv_bn_relu(0, stem, 3, 1);
    for (i, &(width, stride)) in MOBILE_TINY_BLOCKS.iter().enumerate() {
        let dw = b.push(Node::Depthwise { input: x, kernel: 3, stride, padding: 1 });
        let dw = b.bn(dw);
        let dw = b.relu(dw);
        let g = b.group(format!("block{}.pointwise", i + 1), width);
        x = b.conv_bn_relu(dw, g, 1, 1);
    }
    b.head(x, num_classes)
}

/// DenseNet without bottlenecks or compression (BN-ReLU-Conv ordering).
fn densenet(name: &str, layers_per_block: usize, growth: usize, stem_width: usize, num_classes: usize, input_channels: usize) -> ArchSpec {
    let mut b = Builder::new(name, input_channels);
    let stem = b.group("stem".into(), stem_width);
    let mut x = b.conv(0, stem, 3, 1);
    let mut channels = stem_width;
    for block in 0..3 {
        for layer in 0..layers_per_block {
            let g = b.group(format!("block{}.layer{}", block + 1, layer + 1), growth);
            let h = b.bn(x);
            let h = b.relu(h);
            let h = b.conv(h, g, 3, 1);
            x = b.push(Node::Concat { inputs: vec![x, h] });
            channels += growth;
        }
        if block < 2 {
            let g = b.group(format!("transition{}", block + 1), channels);
            let h = b.bn(x);
            let h = b.relu(h);
            let h = b.conv(h, g, 1, 1);
            x = b.push(Node::AvgPool { input: h, kernel: 2 });
        }
    }
    let h = b.bn(x);
    let h = b.relu(h);
    b.head(h, num_classes)
}
