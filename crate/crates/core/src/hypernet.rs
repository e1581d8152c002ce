//! Hypernetwork reparameterization of convolution weights.
//!
//! Every channel group owns one latent vector with one element per output
//! channel. A convolution's weight is generated from the outer product of
//! its output-side latent and its input-side latent: each element of that
//! latent matrix is lifted to an `m`-dimensional embedding and projected to
//! a `kh×kw` kernel. Zeroing a latent element therefore removes a whole
//! output channel of every layer writing the group and the matching input
//! channel of every layer reading it.
//!
//! Latents are shared by id: consumers hold indices into
//! [`HyperNet::latents`], never copies.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, ChannelConfig, Node, NodeId, Segment};
use crate::error::{Error, Result};
use crate::network::{self, forward_graph, BnMode, Bound, Network, NodeParams};
use crate::rng;
use crate::tape::{BnStats, Tape, Var};
use crate::tensor::Tensor;

pub type LatentId = usize;

pub const DEFAULT_EMBEDDING: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatentKind {
    /// Image channels; fixed at ones.
    Input,
    /// Output channels of a channel group.
    Group { group: usize },
    /// Single input-side element of a depthwise convolution.
    DepthwiseInput { node: NodeId },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector {
    pub kind: LatentKind,
    pub values: Tensor,
    pub prunable: bool,
    pub trainable: bool,
}

impl LatentVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Generator for one convolution (regular or depthwise).
#[derive(Debug, Clone, PartialEq)]
pub struct HyperLayer {
    pub node: NodeId,
    /// Latents concatenated along the output-channel axis.
    pub z_out: Vec<LatentId>,
    /// Latents concatenated along the input-channel axis.
    pub z_in: Vec<LatentId>,
    /// `n×c×m`
    pub embed: Tensor,
    /// `n×c×(kh·kw)×m`
    pub project: Tensor,
    pub kernel: usize,
    pub m: usize,
}

impl HyperLayer {
    pub fn out_channels(&self) -> usize {
        self.embed.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.embed.shape()[1]
    }

    /// Generator parameter count, `n·c·m + n·c·kh·kw·m`.
    pub fn num_generator_params(&self) -> usize {
        self.embed.len() + self.project.len()
    }
}

/// Per-layer weight generation as tape ops.
pub fn generate_on_tape(tape: &mut Tape, z_out: Var, z_in: Var, embed: Var, project: Var, kernel: usize) -> Result<Var> {
    let z = latent_matrix(tape, z_out, z_in)?;
    tape.hyper_generate(z, embed, project, kernel, kernel)
}

/// `Z = z_out · z_inᵀ`.
pub fn latent_matrix(tape: &mut Tape, z_out: Var, z_in: Var) -> Result<Var> {
    tape.outer(z_out, z_in)
}

/// Which latents require gradients when a hypernet is bound to a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradTargets {
    pub latents: bool,
    pub generators: bool,
    pub others: bool,
}

impl GradTargets {
    pub const LATENTS: GradTargets = GradTargets { latents: true, generators: false, others: false };
    pub const NONE: GradTargets = GradTargets { latents: false, generators: false, others: false };
}

/// Handles of one hypernet forward.
#[derive(Debug, Clone)]
pub struct HyperForward {
    pub logits: Var,
    /// Tape handle of each latent, indexed by [`LatentId`].
    pub latents: Vec<Var>,
    /// Generated weight of each layer, parallel to [`HyperNet::layers`].
    pub weights: Vec<Var>,
}

/// A widened network whose convolution weights are generated.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperNet {
    pub arch: ArchSpec,
    pub base_config: ChannelConfig,
    pub wide_config: ChannelConfig,
    pub beta: f64,
    pub m: usize,
    pub seed: u64,
    pub latents: Vec<LatentVector>,
    pub layers: Vec<HyperLayer>,
    /// BN and classifier parameters; conv entries are `Generated`.
    pub params: Vec<NodeParams>,
    pub stats: Vec<Option<BnStats>>,
    group_latent: Vec<LatentId>,
}

impl HyperNet {
    /// Widen `arch` by `beta` and attach generators.
    ///
    /// Latents are drawn from `N(0, 1)` except the image-channel latent,
    /// which is all ones. Embeddings are `N(0, 1/m)` and projections
    /// `N(0, 2/(c·kh·kw))`, so a generated weight has variance
    /// `2/(c·kh·kw)` at initialization.
    pub fn init(arch: &ArchSpec, beta: f64, m: usize, seed: u64) -> Result<Self> {
        if !beta.is_finite() || beta < 1.0 {
            return Err(Error::arg("beta", format!("{} must be >= 1", beta)));
        }
        if m < 1 {
            return Err(Error::arg("m", "embedding width must be >= 1"));
        }
        arch.validate()?;
        let base_config = arch.default_config();
        let wide_config = arch.widen(&base_config, beta)?;
        let layouts = arch.layouts()?;
        let channels = network::node_channels(arch, &wide_config)?;

        let mut latent_rng = rng::stream(seed, 2);
        let mut gen_rng = rng::stream(seed, 3);
        let mut head_rng = rng::stream(seed, 4);

        let mut latents = vec![LatentVector {
            kind: LatentKind::Input,
            values: Tensor::full(vec![arch.input_channels], 1.0),
            prunable: false,
            trainable: false,
        }];
        let mut group_latent = Vec::with_capacity(arch.groups.len());
        for (g, group) in arch.groups.iter().enumerate() {
            let n = wide_config.values()[g];
            group_latent.push(latents.len());
            latents.push(LatentVector {
                kind: LatentKind::Group { group: g },
                values: Tensor::from_vec(rng::normal_vec(&mut latent_rng, n, 1.0)),
                prunable: group.prunable,
                trainable: true,
            });
        }
        let resolve = |layout: &[Segment]| -> Vec<LatentId> {
            layout
                .iter()
                .map(|s| match s {
                    Segment::Input => 0,
                    Segment::Group(g) => group_latent[*g],
                })
                .collect()
        };

        let mut layers = Vec::new();
        let mut params = Vec::with_capacity(arch.nodes.len());
        let mut stats = Vec::with_capacity(arch.nodes.len());
        for (id, node) in arch.nodes.iter().enumerate() {
            let (p, s) = match node {
                Node::Conv { input, group, kernel, bias, .. } => {
                    if *bias {
                        return Err(Error::Unsupported(format!("conv node {} has a bias; generated layers are bias-free", id)));
                    }
                    let z_out = vec![group_latent[*group]];
                    let z_in = resolve(&layouts[*input]);
                    let (n, c) = (wide_config.values()[*group], channels[*input]);
                    layers.push(new_layer(&mut gen_rng, id, z_out, z_in, n, c, *kernel, m)?);
                    (NodeParams::Generated, None)
                }
                Node::Depthwise { input, kernel, .. } => {
                    let z_in = vec![latents.len()];
                    latents.push(LatentVector {
                        kind: LatentKind::DepthwiseInput { node: id },
                        values: Tensor::from_vec(rng::normal_vec(&mut latent_rng, 1, 1.0)),
                        prunable: false,
                        trainable: true,
                    });
                    let z_out = resolve(&layouts[*input]);
                    layers.push(new_layer(&mut gen_rng, id, z_out, z_in, channels[*input], 1, *kernel, m)?);
                    (NodeParams::Generated, None)
                }
                Node::BatchNorm { input } => network::bn_params(channels[*input]),
                Node::Linear { input, out_features, bias } => {
                    let f = channels[*input];
                    let w = rng::normal_vec(&mut head_rng, out_features * f, libm::sqrt(1.0 / f as f64));
                    let weight = Tensor::new(vec![*out_features, f], w)?;
                    (NodeParams::Linear { weight, bias: bias.then(|| Tensor::zeros(vec![*out_features])) }, None)
                }
                _ => (NodeParams::None, None),
            };
            params.push(p);
            stats.push(s);
        }
        Ok(HyperNet {
            arch: arch.clone(),
            base_config,
            wide_config,
            beta,
            m,
            seed,
            latents,
            layers,
            params,
            stats,
            group_latent,
        })
    }

    /// Latent id owned by channel group `group`.
    pub fn group_latent(&self, group: usize) -> LatentId {
        self.group_latent[group]
    }

    /// Layers that read (`as_input`) or write (`!as_input`) a latent.
    pub fn consumers(&self, latent: LatentId) -> Vec<(NodeId, bool)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            if layer.z_out.contains(&latent) {
                out.push((layer.node, false));
            }
            if layer.z_in.contains(&latent) {
                out.push((layer.node, true));
            }
        }
        out
    }

    /// Total generator + latent parameter count.
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(HyperLayer::num_generator_params).sum::<usize>()
            + self.latents.iter().map(LatentVector::len).sum::<usize>()
    }

    /// Zero the latent elements where `keep` is false.
    pub fn mask_latent(&mut self, latent: LatentId, keep: &[bool]) -> Result<()> {
        let lv = self.latents.get_mut(latent).ok_or_else(|| Error::arg("latent", format!("no latent {}", latent)))?;
        if !lv.prunable {
            return Err(Error::NotPrunable(latent));
        }
        if keep.len() != lv.len() {
            return Err(Error::shape("mask_latent", format!("{} mask entries for latent of length {}", keep.len(), lv.len())));
        }
        for (v, &k) in lv.values.data_mut().iter_mut().zip(keep) {
            if !k {
                *v = 0.0;
            }
        }
        Ok(())
    }

    /// Mask every group latent. `masks[g]` belongs to group `g`.
    pub fn apply_masks(&mut self, masks: &[Vec<bool>]) -> Result<()> {
        if masks.len() != self.group_latent.len() {
            return Err(Error::ConfigLength { expected: self.group_latent.len(), got: masks.len() });
        }
        for (g, keep) in masks.iter().enumerate() {
            if keep.iter().all(|&k| k) {
                continue;
            }
            self.mask_latent(self.group_latent[g], keep)?;
        }
        Ok(())
    }

    /// Record the hypernet on `tape` and run the network forward.
    pub fn forward(&mut self, tape: &mut Tape, input: Var, mode: BnMode, grads: GradTargets) -> Result<HyperForward> {
        let latents: Vec<Var> = self
            .latents
            .iter()
            .map(|l| tape.leaf(l.values.clone(), grads.latents && l.trainable))
            .collect();
        let (mut bound, _) = network::bind_params(tape, &self.params, grads.others);
        let mut weights = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let z_out = cat(tape, &latents, &layer.z_out)?;
            let z_in = cat(tape, &latents, &layer.z_in)?;
            let embed = tape.leaf(layer.embed.clone(), grads.generators);
            let project = tape.leaf(layer.project.clone(), grads.generators);
            let w = generate_on_tape(tape, z_out, z_in, embed, project, layer.kernel)?;
            bound[layer.node] = Bound::Conv { weight: w, bias: None };
            weights.push(w);
        }
        let logits = forward_graph(tape, &self.arch, &bound, &mut self.stats, input, mode)?;
        Ok(HyperForward { logits, latents, weights })
    }

    /// Logits without recording gradients. Running statistics are untouched.
    pub fn logits(&self, images: &Tensor, mode: BnMode) -> Result<Tensor> {
        let mut scratch = self.clone();
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let f = scratch.forward(&mut tape, x, mode, GradTargets::NONE)?;
        Ok(tape.value(f.logits).clone())
    }

    /// Generated weight tensor (`n×c×kh×kw`) of layer `index`.
    pub fn generate_weights(&self, index: usize) -> Result<Tensor> {
        let layer = self.layers.get(index).ok_or_else(|| Error::arg("layer", format!("no hyper layer {}", index)))?;
        let mut tape = Tape::new();
        let z_out = Tensor::from_vec(self.concat_values(&layer.z_out));
        let z_in = Tensor::from_vec(self.concat_values(&layer.z_in));
        let (a, b) = (tape.constant(z_out), tape.constant(z_in));
        let e = tape.constant(layer.embed.clone());
        let p = tape.constant(layer.project.clone());
        let w = generate_on_tape(&mut tape, a, b, e, p, layer.kernel)?;
        Ok(tape.value(w).clone())
    }

    fn concat_values(&self, ids: &[LatentId]) -> Vec<f64> {
        ids.iter().flat_map(|&i| self.latents[i].values.data().iter().copied()).collect()
    }

    /// Physically remove pruned channels.
    ///
    /// `masks[g]` is the keep mask of group `g`. Returns the shrunk
    /// configuration and a conventional network carrying the generated
    /// weights with the pruned rows/columns deleted; BN and classifier
    /// parameters are sliced to match.
    pub fn materialize_shrunk(&self, masks: &[Vec<bool>]) -> Result<(ChannelConfig, Network)> {
        if masks.len() != self.arch.groups.len() {
            return Err(Error::ConfigLength { expected: self.arch.groups.len(), got: masks.len() });
        }
        let mut shrunk = Vec::with_capacity(masks.len());
        for (g, keep) in masks.iter().enumerate() {
            if keep.len() != self.wide_config.values()[g] {
                return Err(Error::shape(
                    "materialize_shrunk",
                    format!("group {} mask has {} entries for {} channels", g, keep.len(), self.wide_config.values()[g]),
                ));
            }
            let kept = keep.iter().filter(|&&k| k).count();
            if kept == 0 {
                return Err(Error::EmptyLayer { group: g, name: self.arch.groups[g].name.clone() });
            }
            shrunk.push(kept);
        }
        let config = ChannelConfig(shrunk);
        let layouts = self.arch.layouts()?;
        let keep_of = |layout: &[Segment]| -> Vec<usize> {
            let mut out = Vec::new();
            let mut offset = 0;
            for seg in layout {
                match seg {
                    Segment::Input => {
                        out.extend(offset..offset + self.arch.input_channels);
                        offset += self.arch.input_channels;
                    }
                    Segment::Group(g) => {
                        out.extend(masks[*g].iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| offset + i));
                        offset += masks[*g].len();
                    }
                }
            }
            out
        };

        let mut params = self.params.clone();
        let mut stats = self.stats.clone();
        for (index, layer) in self.layers.iter().enumerate() {
            let w = self.generate_weights(index)?;
            let node = &self.arch.nodes[layer.node];
            let w = match node {
                Node::Conv { input, group, .. } => {
                    let rows = keep_of(&[Segment::Group(*group)]);
                    let cols = keep_of(&layouts[*input]);
                    w.select(0, &rows)?.select(1, &cols)?
                }
                Node::Depthwise { input, .. } => w.select(0, &keep_of(&layouts[*input]))?,
                _ => unreachable!("hyper layers are convolutions"),
            };
            params[layer.node] = NodeParams::Conv { weight: w, bias: None };
        }
        for (id, node) in self.arch.nodes.iter().enumerate() {
            match node {
                Node::BatchNorm { input } => {
                    let keep = keep_of(&layouts[*input]);
                    if let NodeParams::BatchNorm { gamma, beta } = &mut params[id] {
                        *gamma = gamma.select(0, &keep)?;
                        *beta = beta.select(0, &keep)?;
                    }
                    if let Some(s) = stats[id].as_mut() {
                        s.mean = keep.iter().map(|&i| s.mean[i]).collect();
                        s.var = keep.iter().map(|&i| s.var[i]).collect();
                    }
                }
                Node::Linear { input, .. } => {
                    let keep = keep_of(&layouts[*input]);
                    if let NodeParams::Linear { weight, .. } = &mut params[id] {
                        *weight = weight.select(1, &keep)?;
                    }
                }
                _ => {}
            }
        }
        let net = Network { arch: self.arch.clone(), config: config.clone(), params, stats };
        Ok((config, net))
    }
}

fn cat(tape: &mut Tape, latents: &[Var], ids: &[LatentId]) -> Result<Var> {
    if ids.len() == 1 {
        return Ok(latents[ids[0]]);
    }
    let parts: Vec<Var> = ids.iter().map(|&i| latents[i]).collect();
    tape.concat(&parts, 0)
}

#[allow(clippy::too_many_arguments)]
fn new_layer(
    rng: &mut rng::Rng,
    node: NodeId,
    z_out: Vec<LatentId>,
    z_in: Vec<LatentId>,
    n: usize,
    c: usize,
    kernel: usize,
    m: usize,
) -> Result<HyperLayer> {
    let k = kernel * kernel;
    let embed = Tensor::new(vec![n, c, m], rng::normal_vec(rng, n * c * m, libm::sqrt(1.0 / m as f64)))?;
    let project_std = libm::sqrt(2.0 / (c * k) as f64);
    let project = Tensor::new(vec![n, c, k, m], rng::normal_vec(rng, n * c * k * m, project_std))?;
    Ok(HyperLayer { node, z_out, z_in, embed, project, kernel, m })
}
