//! Conventionally parameterized networks and the shared graph forward pass.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::arch::{ArchSpec, ChannelConfig, Node, NodeId};
use crate::error::{Error, Result};
use crate::optim::Sgd;
use crate::rng;
use crate::tape::{BnStats, Tape, Var};
use crate::tensor::Tensor;

pub use crate::tape::BnMode;

/// Trainable parameters attached to one graph node.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeParams {
    None,
    Conv { weight: Tensor, bias: Option<Tensor> },
    /// Weight produced by a hypernetwork at forward time.
    Generated,
    BatchNorm { gamma: Tensor, beta: Tensor },
    Linear { weight: Tensor, bias: Option<Tensor> },
}

/// Tape handles for the parameters of one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bound {
    None,
    Conv { weight: Var, bias: Option<Var> },
    BatchNorm { gamma: Var, beta: Var },
    Linear { weight: Var, bias: Option<Var> },
}

/// Per-node output channel counts for `config`, without spatial checks.
pub fn node_channels(arch: &ArchSpec, config: &ChannelConfig) -> Result<Vec<usize>> {
    arch.check_config(config)?;
    let c = config.values();
    let mut out: Vec<usize> = Vec::with_capacity(arch.nodes.len());
    for (id, node) in arch.nodes.iter().enumerate() {
        let ch = match node {
            Node::Input => arch.input_channels,
            Node::Conv { group, .. } => c[*group],
            Node::Depthwise { input, .. }
            | Node::BatchNorm { input }
            | Node::Relu { input }
            | Node::AvgPool { input, .. }
            | Node::GlobalAvgPool { input }
            | Node::Scale { input, .. } => out[*input],
            Node::Add { inputs } => {
                let first = out[inputs[0]];
                if inputs.iter().any(|&i| out[i] != first) {
                    return Err(Error::Arch(format!("add node {} joins different channel counts", id)));
                }
                first
            }
            Node::Concat { inputs } => inputs.iter().map(|&i| out[i]).sum(),
            Node::Linear { out_features, .. } => *out_features,
        };
        out.push(ch);
    }
    Ok(out)
}

/// Evaluate the architecture graph on the tape. `bound[id]` supplies the
/// parameters of node `id`; `stats[id]` holds running statistics of BN nodes.
pub fn forward_graph(
    tape: &mut Tape,
    arch: &ArchSpec,
    bound: &[Bound],
    stats: &mut [Option<BnStats>],
    input: Var,
    mode: BnMode,
) -> Result<Var> {
    let xs = tape.value(input).shape();
    if xs.len() != 4 || xs[1] != arch.input_channels || xs[0] == 0 {
        return Err(Error::shape(
            "forward",
            format!("expected a non-empty N×{}×H×W batch, got {:?}", arch.input_channels, xs),
        ));
    }
    tape.mark_forward();
    let mut vals: Vec<Var> = Vec::with_capacity(arch.nodes.len());
    for (id, node) in arch.nodes.iter().enumerate() {
        let v = match (node, bound[id]) {
            (Node::Input, _) => input,
            (Node::Conv { input, stride, padding, .. }, Bound::Conv { weight, bias }) => {
                tape.conv2d(vals[*input], weight, bias, *stride, *padding)?
            }
            (Node::Depthwise { input, stride, padding, .. }, Bound::Conv { weight, .. }) => {
                tape.depthwise_conv2d(vals[*input], weight, *stride, *padding)?
            }
            (Node::BatchNorm { input }, Bound::BatchNorm { gamma, beta }) => {
                let s = stats[id].as_mut().ok_or_else(|| Error::Arch(format!("node {} has no running statistics", id)))?;
                tape.batchnorm2d(vals[*input], gamma, beta, s, mode)?
            }
            (Node::Relu { input }, _) => tape.relu(vals[*input]),
            (Node::Add { inputs }, _) => {
                let mut acc = vals[inputs[0]];
                for &i in &inputs[1..] {
                    acc = tape.add(acc, vals[i])?;
                }
                acc
            }
            (Node::Concat { inputs }, _) => {
                let parts: Vec<Var> = inputs.iter().map(|&i| vals[i]).collect();
                if parts.len() == 1 {
                    parts[0]
                } else {
                    tape.concat(&parts, 1)?
                }
            }
            (Node::AvgPool { input, kernel }, _) => tape.avg_pool2d(vals[*input], *kernel)?,
            (Node::GlobalAvgPool { input }, _) => tape.global_avg_pool(vals[*input])?,
            (Node::Scale { input, factor }, _) => tape.scale(vals[*input], *factor),
            (Node::Linear { input, .. }, Bound::Linear { weight, bias }) => tape.linear(vals[*input], weight, bias)?,
            (_, b) => return Err(Error::Arch(format!("node {} has mismatched parameters {:?}", id, b))),
        };
        vals.push(v);
    }
    Ok(*vals.last().expect("non-empty graph"))
}

/// Training objective for one step.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    CrossEntropy,
    Distill { teacher_logits: &'a Tensor, lambda: f64, temperature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub correct: usize,
}

/// Index of the largest logit per row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// A network with ordinary (non-generated) weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub arch: ArchSpec,
    pub config: ChannelConfig,
    pub params: Vec<NodeParams>,
    pub stats: Vec<Option<BnStats>>,
}

impl Network {
    /// Fresh random initialization: He-normal convolutions, `N(0, 1/f)`
    /// classifier weights, zero biases, unit BN scale.
    pub fn init(arch: &ArchSpec, config: &ChannelConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let ch = node_channels(arch, config)?;
        let mut rng = rng::stream(seed, 1);
        let mut params = Vec::with_capacity(arch.nodes.len());
        let mut stats = Vec::with_capacity(arch.nodes.len());
        for node in &arch.nodes {
            let (p, s) = match node {
                Node::Conv { input, group, kernel, bias, .. } => {
                    let (n, c) = (config.values()[*group], ch[*input]);
                    let fan_in = (c * kernel * kernel) as f64;
                    let w = rng::normal_vec(&mut rng, n * c * kernel * kernel, libm::sqrt(2.0 / fan_in));
                    let weight = Tensor::new(vec![n, c, *kernel, *kernel], w)?;
                    (NodeParams::Conv { weight, bias: bias.then(|| Tensor::zeros(vec![n])) }, None)
                }
                Node::Depthwise { input, kernel, .. } => {
                    let n = ch[*input];
                    let fan_in = (kernel * kernel) as f64;
                    let w = rng::normal_vec(&mut rng, n * kernel * kernel, libm::sqrt(2.0 / fan_in));
                    (NodeParams::Conv { weight: Tensor::new(vec![n, 1, *kernel, *kernel], w)?, bias: None }, None)
                }
                Node::BatchNorm { input } => bn_params(ch[*input]),
                Node::Linear { input, out_features, bias } => {
                    let f = ch[*input];
                    let w = rng::normal_vec(&mut rng, out_features * f, libm::sqrt(1.0 / f as f64));
                    let weight = Tensor::new(vec![*out_features, f], w)?;
                    (NodeParams::Linear { weight, bias: bias.then(|| Tensor::zeros(vec![*out_features])) }, None)
                }
                _ => (NodeParams::None, None),
            };
            params.push(p);
            stats.push(s);
        }
        Ok(Network { arch: arch.clone(), config: config.clone(), params, stats })
    }

    /// Parameters in canonical order: node order; weight before bias,
    /// gamma before beta.
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for p in &self.params {
            match p {
                NodeParams::Conv { weight, bias } | NodeParams::Linear { weight, bias } => {
                    out.push(weight);
                    out.extend(bias.iter());
                }
                NodeParams::BatchNorm { gamma, beta } => {
                    out.push(gamma);
                    out.push(beta);
                }
                NodeParams::None | NodeParams::Generated => {}
            }
        }
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for p in &mut self.params {
            match p {
                NodeParams::Conv { weight, bias } | NodeParams::Linear { weight, bias } => {
                    out.push(weight);
                    out.extend(bias.iter_mut());
                }
                NodeParams::BatchNorm { gamma, beta } => {
                    out.push(gamma);
                    out.push(beta);
                }
                NodeParams::None | NodeParams::Generated => {}
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_tensors().iter().map(|t| t.len()).sum()
    }

    /// Record every parameter as a leaf. Returns per-node handles and the
    /// leaves in canonical order.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> (Vec<Bound>, Vec<Var>) {
        bind_params(tape, &self.params, trainable)
    }

    pub fn forward(&mut self, tape: &mut Tape, input: Var, mode: BnMode, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let (bound, leaves) = self.bind(tape, trainable);
        let logits = forward_graph(tape, &self.arch, &bound, &mut self.stats, input, mode)?;
        Ok((logits, leaves))
    }

    /// Inference-mode logits. Running statistics are left untouched.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let (bound, _) = self.bind(&mut tape, false);
        let mut stats = self.stats.clone();
        let out = forward_graph(&mut tape, &self.arch, &bound, &mut stats, x, BnMode::Eval)?;
        Ok(tape.value(out).clone())
    }

    /// One SGD step on a batch in training mode.
    pub fn train_step(
        &mut self,
        images: &Tensor,
        labels: &[usize],
        objective: Objective<'_>,
        opt: &mut Sgd,
        lr: f64,
    ) -> Result<StepOutcome> {
        if labels.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let (logits, leaves) = self.forward(&mut tape, x, BnMode::Train, true)?;
        let loss = match objective {
            Objective::CrossEntropy => tape.cross_entropy(logits, labels)?,
            Objective::Distill { teacher_logits, lambda, temperature } => {
                tape.kd_loss(logits, teacher_logits, labels, lambda, temperature)?
            }
        };
        let loss_value = tape.value(loss).item();
        let correct = argmax_rows(tape.value(logits)).iter().zip(labels).filter(|(p, y)| p == y).count();
        if !loss_value.is_finite() {
            return Ok(StepOutcome { loss: loss_value, correct });
        }
        tape.backward(loss)?;
        let grads: Vec<Tensor> = leaves.iter().map(|&v| tape.grad_tensor(v)).collect();
        let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.data()).collect();
        let mut params = self.param_tensors_mut();
        opt.step(&mut params, &grad_refs, lr)?;
        Ok(StepOutcome { loss: loss_value, correct })
    }

    /// Node id of every BN layer with its running statistics, in node order.
    pub fn bn_stats(&self) -> impl Iterator<Item = (NodeId, &BnStats)> {
        self.stats.iter().enumerate().filter_map(|(i, s)| s.as_ref().map(|s| (i, s)))
    }
}

pub(crate) fn bn_params(channels: usize) -> (NodeParams, Option<BnStats>) {
    (
        NodeParams::BatchNorm { gamma: Tensor::full(vec![channels], 1.0), beta: Tensor::zeros(vec![channels]) },
        Some(BnStats::new(channels)),
    )
}

pub(crate) fn bind_params(tape: &mut Tape, params: &[NodeParams], trainable: bool) -> (Vec<Bound>, Vec<Var>) {
    let mut leaves = Vec::new();
    let mut leaf = |tape: &mut Tape, t: &Tensor| {
        let v = tape.leaf(t.clone(), trainable);
        leaves.push(v);
        v
    };
    let bound = params
        .iter()
        .map(|p| match p {
            NodeParams::Conv { weight, bias } => {
                let w = leaf(tape, weight);
                let b = bias.as_ref().map(|b| leaf(tape, b));
                Bound::Conv { weight: w, bias: b }
            }
            NodeParams::Linear { weight, bias } => {
                let w = leaf(tape, weight);
                let b = bias.as_ref().map(|b| leaf(tape, b));
                Bound::Linear { weight: w, bias: b }
            }
            NodeParams::BatchNorm { gamma, beta } => {
                let g = leaf(tape, gamma);
                let b = leaf(tape, beta);
                Bound::BatchNorm { gamma: g, beta: b }
            }
            NodeParams::None | NodeParams::Generated => Bound::None,
        })
        .collect();
    (bound, leaves)
}
