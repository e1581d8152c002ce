//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node holding its output value and whatever it needs
//! for the backward sweep. Inputs always precede their consumers, so the
//! recording order is a topological order and [`Tape::backward`] simply
//! walks it in reverse.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

/// Running mean/variance of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        BnStats { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom },
    Depthwise { input: Var, weight: Var, geom: ConvGeom },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    Relu { input: Var },
    GlobalAvgPool { input: Var },
    AvgPool { input: Var, kernel: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { input: Var, factor: f64 },
    Sum { input: Var },
    Outer { a: Var, b: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    HyperGenerate { latent: Var, embed: Var, project: Var, m: usize, k: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    KdLoss { student: Var, labels: Vec<usize>, probs: Vec<f64>, soft_student: Vec<f64>, soft_teacher: Vec<f64>, lambda: f64, temperature: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
    forward_passes: usize,
    backward_passes: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drop every recorded node and counter.
    pub fn reset(&mut self) {
        *self = Self::default();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf value.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor shaped like the value; zeros if `v` was not reached.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(node.value.shape().to_vec()),
        }
    }

    /// Count one model-level forward pass. Network forwards call this.
    pub fn mark_forward(&mut self) {
        self.forward_passes += 1;
    }

    pub fn forward_passes(&self) -> usize {
        self.forward_passes
    }

    pub fn backward_passes(&self) -> usize {
        self.backward_passes
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ------------------------------------------------------------------
    // ops
    // ------------------------------------------------------------------

    fn conv_geom(&self, op: &'static str, input: Var, weight: Var, stride: usize, padding: usize, depthwise: bool) -> Result<ConvGeom> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(op, format!("expected 4-d input and weight, got {:?} and {:?}", xs, ws)));
        }
        if stride == 0 {
            return Err(Error::arg("stride", "must be >= 1"));
        }
        if depthwise {
            if ws[1] != 1 {
                return Err(Error::shape(op, format!("depthwise weight {:?} must have input dimension 1", ws)));
            }
            if ws[0] != xs[1] {
                return Err(Error::shape(op, format!("{} depthwise kernels for {} input channels", ws[0], xs[1])));
            }
        } else if ws[1] != xs[1] {
            return Err(Error::shape(op, format!("weight {:?} expects {} input channels, input {:?} has {}", ws, ws[1], xs, xs[1])));
        }
        let out_h = kernels::conv_out_dim(xs[2], ws[2], stride, padding);
        let out_w = kernels::conv_out_dim(xs[3], ws[3], stride, padding);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(Error::shape(op, format!("kernel {}x{} does not fit input {}x{} with padding {}", ws[2], ws[3], xs[2], xs[3], padding)));
        };
        Ok(ConvGeom {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad: padding,
            out_h,
            out_w,
        })
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = self.conv_geom("conv2d", input, weight, stride, padding, false)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.out_channels] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {} output channels", self.shape(b), geom.out_channels)));
            }
        }
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let rg = self.any_grad(&[input, weight]) || bias.is_some_and(|b| self.requires_grad(b));
        let value = Tensor::new(vec![geom.batch, geom.out_channels, geom.out_h, geom.out_w], out)?;
        Ok(self.push(value, rg, Op::Conv2d { input, weight, bias, geom }))
    }

    pub fn depthwise_conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = self.conv_geom("depthwise_conv2d", input, weight, stride, padding, true)?;
        let out = kernels::depthwise_forward(&geom, self.value(input).data(), self.value(weight).data());
        let rg = self.any_grad(&[input, weight]);
        let value = Tensor::new(vec![geom.batch, geom.out_channels, geom.out_h, geom.out_w], out)?;
        Ok(self.push(value, rg, Op::Depthwise { input, weight, geom }))
    }

    /// Batch normalization over an NCHW tensor.
    pub fn batchnorm2d(&mut self, input: Var, gamma: Var, beta: Var, stats: &mut BnStats, mode: BnMode) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("batchnorm2d", format!("expected NCHW input, got {:?}", xs)));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.channels() != c {
            return Err(Error::shape(
                "batchnorm2d",
                format!("{} channels but gamma {:?}, beta {:?}, running stats {}", c, self.shape(gamma), self.shape(beta), stats.channels()),
            ));
        }
        let (n, hw) = (xs[0], xs[2] * xs[3]);
        let count = n * hw;
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut inv_std = vec![0.0; c];
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for ch in 0..c {
            let (mean, istd) = match mode {
                BnMode::Train => {
                    let mut sum = 0.0;
                    for s in 0..n {
                        sum += x[(s * c + ch) * hw..][..hw].iter().sum::<f64>();
                    }
                    let mean = sum / count as f64;
                    let mut sq = 0.0;
                    for s in 0..n {
                        for &v in &x[(s * c + ch) * hw..][..hw] {
                            sq += (v - mean) * (v - mean);
                        }
                    }
                    let var = sq / count as f64;
                    let unbiased = if count > 1 { sq / (count - 1) as f64 } else { var };
                    stats.mean[ch] = (1.0 - BN_MOMENTUM) * stats.mean[ch] + BN_MOMENTUM * mean;
                    stats.var[ch] = (1.0 - BN_MOMENTUM) * stats.var[ch] + BN_MOMENTUM * unbiased;
                    (mean, 1.0 / libm::sqrt(var + BN_EPS))
                }
                BnMode::Eval => (stats.mean[ch], 1.0 / libm::sqrt(stats.var[ch] + BN_EPS)),
            };
            inv_std[ch] = istd;
            for s in 0..n {
                let off = (s * c + ch) * hw;
                for i in off..off + hw {
                    let h = (x[i] - mean) * istd;
                    xhat[i] = h;
                    out[i] = g[ch] * h + b[ch];
                }
            }
        }
        let rg = self.any_grad(&[input, gamma, beta]);
        let value = Tensor::new(xs, out)?;
        Ok(self.push(value, rg, Op::BatchNorm { input, gamma, beta, xhat, inv_std, train: mode == BnMode::Train }))
    }

    /// `input (N×f) · weightᵀ (f×k) + bias`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("linear", format!("input {:?} vs weight {:?}", xs, ws)));
        }
        let (n, f, k) = (xs[0], xs[1], ws[0]);
        if let Some(b) = bias {
            if self.shape(b) != [k] {
                return Err(Error::shape("linear", format!("bias {:?} for {} outputs", self.shape(b), k)));
            }
        }
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let xr = &x[i * f..(i + 1) * f];
            for o in 0..k {
                let mut acc = match bias {
                    Some(b) => self.value(b).data()[o],
                    None => 0.0,
                };
                for (a, bw) in xr.iter().zip(&w[o * f..(o + 1) * f]) {
                    acc += a * bw;
                }
                out[i * k + o] = acc;
            }
        }
        let rg = self.any_grad(&[input, weight]) || bias.is_some_and(|b| self.requires_grad(b));
        let value = Tensor::new(vec![n, k], out)?;
        Ok(self.push(value, rg, Op::Linear { input, weight, bias }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("relu shape");
        let rg = self.requires_grad(input);
        self.push(value, rg, Op::Relu { input })
    }

    /// NCHW → N×C spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("expected NCHW input, got {:?}", xs)));
        }
        let hw = xs[2] * xs[3];
        let x = self.value(input).data();
        let data = (0..xs[0] * xs[1])
            .map(|p| x[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.requires_grad(input);
        let value = Tensor::new(vec![xs[0], xs[1]], data)?;
        Ok(self.push(value, rg, Op::GlobalAvgPool { input }))
    }

    /// Non-overlapping `kernel × kernel` average pooling.
    pub fn avg_pool2d(&mut self, input: Var, kernel: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 || kernel == 0 || xs[2] < kernel || xs[3] < kernel {
            return Err(Error::shape("avg_pool2d", format!("kernel {} on input {:?}", kernel, xs)));
        }
        let data = kernels::avg_pool_forward(self.value(input).data(), xs[0] * xs[1], xs[2], xs[3], kernel);
        let rg = self.requires_grad(input);
        let value = Tensor::new(vec![xs[0], xs[1], xs[2] / kernel, xs[3] / kernel], data)?;
        Ok(self.push(value, rg, Op::AvgPool { input, kernel }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", format!("{:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Add { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", format!("{:?} * {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * factor).collect()).expect("scale shape");
        let rg = self.requires_grad(input);
        self.push(value, rg, Op::Scale { input, factor })
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum::<f64>();
        let rg = self.requires_grad(input);
        self.push(Tensor::scalar(s), rg, Op::Sum { input })
    }

    /// Outer product of two vectors: `out[i][j] = a[i] * b[j]`.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 1 || sb.len() != 1 {
            return Err(Error::shape("outer", format!("expected vectors, got {:?} and {:?}", sa, sb)));
        }
        let (n, c) = (sa[0], sb[0]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * c);
        for &x in av {
            data.extend(bv.iter().map(|&y| x * y));
        }
        let rg = self.any_grad(&[a, b]);
        let value = Tensor::new(vec![n, c], data)?;
        Ok(self.push(value, rg, Op::Outer { a, b }))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::shape("concat", "no inputs"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {} for shape {:?}", axis, base)));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{:?} incompatible with {:?} along axis {}", s, base, axis)));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.any_grad(inputs);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, rg, Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    /// Hypernetwork weight generation.
    ///
    /// `latent` is the `n×c` latent matrix, `embed` is `n×c×m`, `project` is
    /// `n×c×(kh·kw)×m`. Each latent element is lifted to an `m`-vector by its
    /// own embedding and projected to a `kh×kw` kernel:
    /// `out[i,j,t] = Σ_p project[i,j,t,p] · (latent[i,j] · embed[i,j,p])`.
    pub fn hyper_generate(&mut self, latent: Var, embed: Var, project: Var, kh: usize, kw: usize) -> Result<Var> {
        let zs = self.shape(latent).to_vec();
        let es = self.shape(embed).to_vec();
        let ps = self.shape(project).to_vec();
        let k = kh * kw;
        let ok = zs.len() == 2
            && es.len() == 3
            && ps.len() == 4
            && es[..2] == zs[..]
            && ps[..2] == zs[..]
            && ps[2] == k
            && ps[3] == es[2]
            && k > 0;
        if !ok {
            return Err(Error::shape(
                "hyper_generate",
                format!("latent {:?}, embedding {:?}, projection {:?}, kernel {}x{}", zs, es, ps, kh, kw),
            ));
        }
        let (n, c, m) = (zs[0], zs[1], es[2]);
        let z = self.value(latent).data();
        let e = self.value(embed).data();
        let p = self.value(project).data();
        let mut out = vec![0.0; n * c * k];
        let mut lifted = vec![0.0; m];
        for ij in 0..n * c {
            let zij = z[ij];
            for (l, &w) in lifted.iter_mut().zip(&e[ij * m..(ij + 1) * m]) {
                *l = zij * w;
            }
            for t in 0..k {
                let row = &p[(ij * k + t) * m..(ij * k + t + 1) * m];
                let mut acc = 0.0;
                for (a, b) in row.iter().zip(&lifted) {
                    acc += a * b;
                }
                out[ij * k + t] = acc;
            }
        }
        let rg = self.any_grad(&[latent, embed, project]);
        let value = Tensor::new(vec![n, c, kh, kw], out)?;
        Ok(self.push(value, rg, Op::HyperGenerate { latent, embed, project, m, k }))
    }

    fn check_labels(&self, op: &'static str, logits: Var, labels: &[usize]) -> Result<(usize, usize)> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] == 0 || s[0] != labels.len() {
            return Err(Error::shape(op, format!("logits {:?} with {} labels", s, labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
            return Err(Error::shape(op, format!("label {} out of range for {} classes", bad, s[1])));
        }
        Ok((s[0], s[1]))
    }

    /// Mean softmax cross-entropy of `N×K` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.check_labels("cross_entropy", logits, labels)?;
        let logp = kernels::log_softmax_rows(self.value(logits).data(), n, k, 1.0);
        let loss = mean_nll(&logp, labels, k);
        let probs = logp.iter().map(|&v| libm::exp(v)).collect();
        let rg = self.requires_grad(logits);
        Ok(self.push(Tensor::scalar(loss), rg, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    /// Distillation loss
    /// `(1-λ)·CE(labels, student) + λ·T²·KL(softmax(teacher/T) ‖ softmax(student/T))`,
    /// averaged over the batch. The teacher logits are treated as constants.
    pub fn kd_loss(&mut self, student: Var, teacher: &Tensor, labels: &[usize], lambda: f64, temperature: f64) -> Result<Var> {
        let (n, k) = self.check_labels("kd_loss", student, labels)?;
        if teacher.shape() != self.shape(student) {
            return Err(Error::shape("kd_loss", format!("teacher {:?} vs student {:?}", teacher.shape(), self.shape(student))));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::arg("lambda", format!("{} not in [0, 1]", lambda)));
        }
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(Error::arg("temperature", format!("{} must be > 0", temperature)));
        }
        let s = self.value(student).data();
        let logp = kernels::log_softmax_rows(s, n, k, 1.0);
        let ce = mean_nll(&logp, labels, k);
        let log_soft_s = kernels::log_softmax_rows(s, n, k, temperature);
        let log_soft_t = kernels::log_softmax_rows(teacher.data(), n, k, temperature);
        let mut kl = 0.0;
        for (lt, ls) in log_soft_t.iter().zip(&log_soft_s) {
            kl += libm::exp(*lt) * (lt - ls);
        }
        kl /= n as f64;
        let loss = (1.0 - lambda) * ce + lambda * temperature * temperature * kl;
        let probs = logp.iter().map(|&v| libm::exp(v)).collect();
        let soft_student = log_soft_s.iter().map(|&v| libm::exp(v)).collect();
        let soft_teacher = log_soft_t.iter().map(|&v| libm::exp(v)).collect();
        let rg = self.requires_grad(student);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::KdLoss { student, labels: labels.to_vec(), probs, soft_student, soft_teacher, lambda, temperature },
        ))
    }

    // ------------------------------------------------------------------
    // backward
    // ------------------------------------------------------------------

    fn accumulate(&mut self, v: Var, grad: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
            None => node.grad = Some(grad.to_vec()),
        }
    }

    fn zeros_if_needed(&self, v: Var) -> Option<Vec<f64>> {
        self.requires_grad(v).then(|| vec![0.0; self.value(v).len()])
    }

    /// Propagate d`loss`/d· to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.backward_done = true;
        self.backward_passes += 1;
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else { continue };
            let op = core::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backward_op(&op, &g, idx);
            self.nodes[idx].op = op;
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn backward_op(&mut self, op: &Op, g: &[f64], idx: usize) {
        match op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let mut dx = self.zeros_if_needed(*input);
                let mut dw = self.zeros_if_needed(*weight);
                let mut db = bias.and_then(|b| self.zeros_if_needed(b));
                kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(d) = dx {
                    self.accumulate(*input, &d);
                }
                if let Some(d) = dw {
                    self.accumulate(*weight, &d);
                }
                if let (Some(b), Some(d)) = (bias, db) {
                    self.accumulate(*b, &d);
                }
            }
            Op::Depthwise { input, weight, geom } => {
                let mut dx = self.zeros_if_needed(*input);
                let mut dw = self.zeros_if_needed(*weight);
                kernels::depthwise_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                );
                if let Some(d) = dx {
                    self.accumulate(*input, &d);
                }
                if let Some(d) = dw {
                    self.accumulate(*weight, &d);
                }
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, train } => {
                let s = self.value(*input).shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let count = (n * hw) as f64;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    for smp in 0..n {
                        let off = (smp * c + ch) * hw;
                        for i in off..off + hw {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                if self.requires_grad(*input) {
                    let mut dx = vec![0.0; g.len()];
                    for ch in 0..c {
                        let scale = gam[ch] * inv_std[ch];
                        for smp in 0..n {
                            let off = (smp * c + ch) * hw;
                            for i in off..off + hw {
                                dx[i] = if *train {
                                    scale / count * (count * g[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                    self.accumulate(*input, &dx);
                }
                self.accumulate(*gamma, &dgamma);
                self.accumulate(*beta, &dbeta);
            }
            Op::Linear { input, weight, bias } => {
                let xs = self.value(*input).shape();
                let (n, f) = (xs[0], xs[1]);
                let k = self.value(*weight).shape()[0];
                if self.requires_grad(*input) {
                    let w = self.value(*weight).data();
                    let mut dx = vec![0.0; n * f];
                    for i in 0..n {
                        let row = &mut dx[i * f..(i + 1) * f];
                        for o in 0..k {
                            let gv = g[i * k + o];
                            for (d, &wv) in row.iter_mut().zip(&w[o * f..(o + 1) * f]) {
                                *d += gv * wv;
                            }
                        }
                    }
                    self.accumulate(*input, &dx);
                }
                if self.requires_grad(*weight) {
                    let x = self.value(*input).data();
                    let mut dw = vec![0.0; k * f];
                    for i in 0..n {
                        for o in 0..k {
                            let gv = g[i * k + o];
                            for (d, &xv) in dw[o * f..(o + 1) * f].iter_mut().zip(&x[i * f..(i + 1) * f]) {
                                *d += gv * xv;
                            }
                        }
                    }
                    self.accumulate(*weight, &dw);
                }
                if let Some(b) = bias {
                    let mut db = vec![0.0; k];
                    for i in 0..n {
                        for o in 0..k {
                            db[o] += g[i * k + o];
                        }
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::Relu { input } => {
                let out = self.nodes[idx].value.data();
                let d: Vec<f64> = g.iter().zip(out).map(|(&gv, &y)| if y > 0.0 { gv } else { 0.0 }).collect();
                self.accumulate(*input, &d);
            }
            Op::GlobalAvgPool { input } => {
                let s = self.value(*input).shape();
                let hw = s[2] * s[3];
                let inv = 1.0 / hw as f64;
                let mut d = vec![0.0; s.iter().product()];
                for (p, &gv) in g.iter().enumerate() {
                    d[p * hw..(p + 1) * hw].iter_mut().for_each(|v| *v = gv * inv);
                }
                self.accumulate(*input, &d);
            }
            Op::AvgPool { input, kernel } => {
                let s = self.value(*input).shape().to_vec();
                let mut d = vec![0.0; s.iter().product()];
                kernels::avg_pool_backward(g, &mut d, s[0] * s[1], s[2], s[3], *kernel);
                self.accumulate(*input, &d);
            }
            Op::Add { a, b } => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Mul { a, b } => {
                if self.requires_grad(*a) {
                    let d: Vec<f64> = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    self.accumulate(*a, &d);
                }
                if self.requires_grad(*b) {
                    let d: Vec<f64> = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    self.accumulate(*b, &d);
                }
            }
            Op::Scale { input, factor } => {
                let d: Vec<f64> = g.iter().map(|v| v * factor).collect();
                self.accumulate(*input, &d);
            }
            Op::Sum { input } => {
                let d = vec![g[0]; self.value(*input).len()];
                self.accumulate(*input, &d);
            }
            Op::Outer { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (n, c) = (av.len(), bv.len());
                let mut da = vec![0.0; n];
                let mut db = vec![0.0; c];
                for i in 0..n {
                    for j in 0..c {
                        da[i] += g[i * c + j] * bv[j];
                        db[j] += g[i * c + j] * av[i];
                    }
                }
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.nodes[idx].value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                let mut parts = Vec::with_capacity(inputs.len());
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    let mut d = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        d.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                    }
                    offset += len;
                    parts.push((v, d));
                }
                for (v, d) in parts {
                    self.accumulate(v, &d);
                }
            }
            Op::HyperGenerate { latent, embed, project, m, k } => {
                let (m, k) = (*m, *k);
                let z = self.value(*latent).data();
                let e = self.value(*embed).data();
                let p = self.value(*project).data();
                let nc = z.len();
                let mut dz = vec![0.0; nc];
                let mut de = vec![0.0; e.len()];
                let mut dp = vec![0.0; p.len()];
                for ij in 0..nc {
                    let go = &g[ij * k..(ij + 1) * k];
                    let emb = &e[ij * m..(ij + 1) * m];
                    // back through the projection: d(lifted)[q] = Σ_t g[t] · P[t,q]
                    let mut dlift = vec![0.0; m];
                    for t in 0..k {
                        let row = &p[(ij * k + t) * m..(ij * k + t + 1) * m];
                        for (d, &pv) in dlift.iter_mut().zip(row) {
                            *d += go[t] * pv;
                        }
                        let drow = &mut dp[(ij * k + t) * m..(ij * k + t + 1) * m];
                        for (d, &ev) in drow.iter_mut().zip(emb) {
                            *d += go[t] * z[ij] * ev;
                        }
                    }
                    let mut acc = 0.0;
                    for q in 0..m {
                        acc += dlift[q] * emb[q];
                        de[ij * m + q] = dlift[q] * z[ij];
                    }
                    dz[ij] = acc;
                }
                self.accumulate(*latent, &dz);
                self.accumulate(*embed, &de);
                self.accumulate(*project, &dp);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * k + y] -= scale;
                }
                self.accumulate(*logits, &d);
            }
            Op::KdLoss { student, labels, probs, soft_student, soft_teacher, lambda, temperature } => {
                let n = labels.len();
                let k = probs.len() / n;
                let hard = g[0] * (1.0 - lambda) / n as f64;
                let soft = g[0] * lambda * temperature / n as f64;
                let mut d: Vec<f64> = probs
                    .iter()
                    .zip(soft_student.iter().zip(soft_teacher))
                    .map(|(p, (ps, pt))| hard * p + soft * (ps - pt))
                    .collect();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * k + y] -= hard;
                }
                self.accumulate(*student, &d);
            }
        }
    }
}

fn mean_nll(logp: &[f64], labels: &[usize], k: usize) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        total -= logp[i * k + y];
    }
    total / labels.len() as f64
}
