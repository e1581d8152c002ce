//! Architecture graphs and channel configurations.
//!
//! An [`ArchSpec`] is a DAG of layer nodes in topological order. Every
//! convolution writes into a [`ChannelGroup`]; layers whose outputs are
//! summed on one residual stream write into the same group, so the group is
//! the unit of width. A [`ChannelConfig`] assigns one output-channel count
//! to every group (for a plain chain that is one entry per conv layer).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::conv_out_dim;

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelGroup {
    pub name: String,
    /// Baseline output-channel count.
    pub width: usize,
    #[serde(default = "default_true")]
    pub prunable: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Node {
    Input,
    Conv {
        input: NodeId,
        group: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        #[serde(default)]
        bias: bool,
    },
    Depthwise { input: NodeId, kernel: usize, stride: usize, padding: usize },
    BatchNorm { input: NodeId },
    Relu { input: NodeId },
    Add { inputs: Vec<NodeId> },
    Concat { inputs: Vec<NodeId> },
    AvgPool { input: NodeId, kernel: usize },
    GlobalAvgPool { input: NodeId },
    Scale { input: NodeId, factor: f64 },
    Linear {
        input: NodeId,
        out_features: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
}

impl Node {
    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Node::Input => Vec::new(),
            Node::Conv { input, .. }
            | Node::Depthwise { input, .. }
            | Node::BatchNorm { input }
            | Node::Relu { input }
            | Node::AvgPool { input, .. }
            | Node::GlobalAvgPool { input }
            | Node::Scale { input, .. }
            | Node::Linear { input, .. } => vec![*input],
            Node::Add { inputs } | Node::Concat { inputs } => inputs.clone(),
        }
    }
}

/// Where a slice of a node's channels comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    /// Image channels of the network input.
    Input,
    Group(usize),
}

/// Output shape of one node for a given configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `N×C` rather than `N×C×H×W`.
    pub flat: bool,
}

/// Channel configuration vector: one output-channel count per channel group.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChannelConfig(pub Vec<usize>);

impl ChannelConfig {
    pub fn new(values: Vec<usize>) -> Result<Self> {
        if let Some(pos) = values.iter().position(|&v| v == 0) {
            return Err(Error::arg("config", format!("entry {} is zero", pos)));
        }
        Ok(ChannelConfig(values))
    }

    pub fn values(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `round(beta * c)` with ties away from zero, floored at 1, for prunable
/// entries; other entries are copied.
pub fn widen_values(values: &[usize], prunable: &[bool], beta: f64) -> Result<Vec<usize>> {
    if !beta.is_finite() || beta <= 0.0 {
        return Err(Error::arg("beta", format!("{} must be a positive finite number", beta)));
    }
    if values.len() != prunable.len() {
        return Err(Error::ConfigLength { expected: prunable.len(), got: values.len() });
    }
    Ok(values
        .iter()
        .zip(prunable)
        .map(|(&c, &p)| if p { (libm::round(beta * c as f64) as usize).max(1) } else { c })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub input_channels: usize,
    pub groups: Vec<ChannelGroup>,
    pub nodes: Vec<Node>,
}

impl ArchSpec {
    pub fn default_config(&self) -> ChannelConfig {
        ChannelConfig(self.groups.iter().map(|g| g.width).collect())
    }

    pub fn prunable(&self) -> Vec<bool> {
        self.groups.iter().map(|g| g.prunable).collect()
    }

    pub fn widen(&self, config: &ChannelConfig, beta: f64) -> Result<ChannelConfig> {
        self.check_config(config)?;
        widen_values(config.values(), &self.prunable(), beta).map(ChannelConfig)
    }

    pub fn num_classes(&self) -> usize {
        match self.nodes.last() {
            Some(Node::Linear { out_features, .. }) => *out_features,
            _ => 0,
        }
    }

    /// Index of the classifier head (always the last node of a valid spec).
    pub fn classifier(&self) -> NodeId {
        self.nodes.len() - 1
    }

    pub fn check_config(&self, config: &ChannelConfig) -> Result<()> {
        if config.len() != self.groups.len() {
            return Err(Error::ConfigLength { expected: self.groups.len(), got: config.len() });
        }
        if let Some(pos) = config.values().iter().position(|&v| v == 0) {
            return Err(Error::arg("config", format!("group {} (`{}`) has zero channels", pos, self.groups[pos].name)));
        }
        Ok(())
    }

    /// Structural checks that do not depend on a configuration.
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Arch(msg));
        if self.input_channels == 0 {
            return err("input_channels must be positive".into());
        }
        if !matches!(self.nodes.first(), Some(Node::Input)) {
            return err("node 0 must be the input".into());
        }
        let linears = self.nodes.iter().filter(|n| matches!(n, Node::Linear { .. })).count();
        if linears != 1 || !matches!(self.nodes.last(), Some(Node::Linear { .. })) {
            return err(format!("expected exactly one linear classifier as the last node, found {}", linears));
        }
        let mut writers = vec![0usize; self.groups.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            if id > 0 && matches!(node, Node::Input) {
                return err(format!("node {} is a second input", id));
            }
            for i in node.inputs() {
                if i >= id {
                    return err(format!("node {} consumes node {} which does not precede it", id, i));
                }
                if matches!(self.nodes[i], Node::Linear { .. }) {
                    return err(format!("node {} consumes the classifier output", id));
                }
            }
            match node {
                Node::Conv { group, kernel, stride, .. } => {
                    if *group >= self.groups.len() {
                        return err(format!("node {} writes unknown group {}", id, group));
                    }
                    if *kernel == 0 || *stride == 0 {
                        return err(format!("node {} has zero kernel or stride", id));
                    }
                    writers[*group] += 1;
                }
                Node::Depthwise { kernel, stride, .. } if *kernel == 0 || *stride == 0 => {
                    return err(format!("node {} has zero kernel or stride", id));
                }
                Node::Add { inputs } if inputs.len() < 2 => return err(format!("add node {} needs two inputs", id)),
                Node::Concat { inputs } if inputs.is_empty() => return err(format!("concat node {} has no inputs", id)),
                Node::AvgPool { kernel, .. } if *kernel == 0 => return err(format!("node {} has zero pool kernel", id)),
                Node::Linear { out_features, .. } if *out_features == 0 => {
                    return err("classifier has no outputs".into())
                }
                _ => {}
            }
        }
        if let Some(g) = writers.iter().position(|&w| w == 0) {
            return err(format!("group {} (`{}`) is never written by a convolution", g, self.groups[g].name));
        }
        if self.groups.iter().any(|g| g.width == 0) {
            return err("group widths must be positive".into());
        }
        self.layouts()?;
        Ok(())
    }

    /// Channel layout of every node: the ordered channel groups its
    /// channels belong to. Residual joins must sum identical layouts.
    pub fn layouts(&self) -> Result<Vec<Vec<Segment>>> {
        let mut out: Vec<Vec<Segment>> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let layout = match node {
                Node::Input => vec![Segment::Input],
                Node::Conv { group, .. } => vec![Segment::Group(*group)],
                Node::Depthwise { input, .. }
                | Node::BatchNorm { input }
                | Node::Relu { input }
                | Node::AvgPool { input, .. }
                | Node::GlobalAvgPool { input }
                | Node::Scale { input, .. } => out[*input].clone(),
                Node::Add { inputs } => {
                    let first = out[inputs[0]].clone();
                    if let Some(&bad) = inputs.iter().find(|&&i| out[i] != first) {
                        return Err(Error::Arch(format!(
                            "add node {} joins node {} ({:?}) with node {} ({:?}); residual streams must share channel groups",
                            id, inputs[0], first, bad, out[bad]
                        )));
                    }
                    first
                }
                Node::Concat { inputs } => inputs.iter().flat_map(|&i| out[i].iter().copied()).collect(),
                Node::Linear { .. } => Vec::new(),
            };
            out.push(layout);
        }
        Ok(out)
    }

    /// Groups whose channels feed the classifier.
    pub fn classifier_groups(&self) -> Result<Vec<usize>> {
        let layouts = self.layouts()?;
        let Node::Linear { input, .. } = self.nodes[self.classifier()] else {
            return Err(Error::Arch("missing classifier".into()));
        };
        Ok(layouts[input]
            .iter()
            .filter_map(|s| match s {
                Segment::Group(g) => Some(*g),
                Segment::Input => None,
            })
            .collect())
    }

    /// Propagate shapes for `config` at an `input_hw` spatial resolution.
    pub fn shapes(&self, config: &ChannelConfig, input_hw: (usize, usize)) -> Result<Vec<NodeShape>> {
        self.check_config(config)?;
        if input_hw.0 == 0 || input_hw.1 == 0 {
            return Err(Error::arg("input_hw", "spatial size must be positive"));
        }
        let c = config.values();
        let mut out: Vec<NodeShape> = Vec::with_capacity(self.nodes.len());
        let spatial = |id: usize, s: &NodeShape| -> Result<()> {
            if s.flat {
                Err(Error::Arch(format!("node {} needs a spatial input", id)))
            } else {
                Ok(())
            }
        };
        for (id, node) in self.nodes.iter().enumerate() {
            let shape = match node {
                Node::Input => NodeShape { channels: self.input_channels, height: input_hw.0, width: input_hw.1, flat: false },
                Node::Conv { input, group, kernel, stride, padding, .. } => {
                    let s = out[*input];
                    spatial(id, &s)?;
                    let (h, w) = conv_hw(id, &s, *kernel, *stride, *padding)?;
                    NodeShape { channels: c[*group], height: h, width: w, flat: false }
                }
                Node::Depthwise { input, kernel, stride, padding } => {
                    let s = out[*input];
                    spatial(id, &s)?;
                    let (h, w) = conv_hw(id, &s, *kernel, *stride, *padding)?;
                    NodeShape { channels: s.channels, height: h, width: w, flat: false }
                }
                Node::BatchNorm { input } => {
                    let s = out[*input];
                    spatial(id, &s)?;
                    s
                }
                Node::Relu { input } | Node::Scale { input, .. } => out[*input],
                Node::Add { inputs } => {
                    let s = out[inputs[0]];
                    if let Some(&bad) = inputs.iter().find(|&&i| out[i] != s) {
                        return Err(Error::Arch(format!("add node {} joins shapes {:?} and {:?}", id, s, out[bad])));
                    }
                    s
                }
                Node::Concat { inputs } => {
                    let s = out[inputs[0]];
                    spatial(id, &s)?;
                    let mut channels = 0;
                    for &i in inputs {
                        let t = out[i];
                        if t.flat || t.height != s.height || t.width != s.width {
                            return Err(Error::Arch(format!("concat node {} joins mismatched spatial shapes", id)));
                        }
                        channels += t.channels;
                    }
                    NodeShape { channels, ..s }
                }
                Node::AvgPool { input, kernel } => {
                    let s = out[*input];
                    spatial(id, &s)?;
                    if s.height < *kernel || s.width < *kernel {
                        return Err(Error::Arch(format!("pool node {} kernel {} exceeds {}x{}", id, kernel, s.height, s.width)));
                    }
                    NodeShape { height: s.height / kernel, width: s.width / kernel, ..s }
                }
                Node::GlobalAvgPool { input } => {
                    let s = out[*input];
                    spatial(id, &s)?;
                    NodeShape { channels: s.channels, height: 1, width: 1, flat: true }
                }
                Node::Linear { input, out_features, .. } => {
                    let s = out[*input];
                    if !s.flat {
                        return Err(Error::Arch(format!("classifier node {} needs pooled features", id)));
                    }
                    NodeShape { channels: *out_features, height: 1, width: 1, flat: true }
                }
            };
            out.push(shape);
        }
        Ok(out)
    }
}

fn conv_hw(id: usize, s: &NodeShape, kernel: usize, stride: usize, padding: usize) -> Result<(usize, usize)> {
    match (conv_out_dim(s.height, kernel, stride, padding), conv_out_dim(s.width, kernel, stride, padding)) {
        (Some(h), Some(w)) => Ok((h, w)),
        _ => Err(Error::Arch(format!(
            "node {}: kernel {} does not fit {}x{} input with padding {}",
            id, kernel, s.height, s.width, padding
        ))),
    }
}
