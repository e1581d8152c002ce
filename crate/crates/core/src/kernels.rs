//! Plain-slice numeric kernels used by the tape ops.
//!
//! All reductions run in a fixed loop order, so results are bit-reproducible.

use alloc::vec;
use alloc::vec::Vec;

/// `floor((size + 2*pad - kernel) / stride) + 1`, or `None` when the kernel
/// does not fit.
pub fn conv_out_dim(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Geometry of one 2-D convolution over an NCHW batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn plane_out(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.out_channels * self.plane_out()
    }
}

/// Unfold one sample (`C×H×W`) into a `(C·kh·kw) × (Ho·Wo)` column matrix.
fn im2col(g: &ConvGeom, sample: &[f64], cols: &mut [f64]) {
    let plane = g.plane_out();
    for c in 0..g.in_channels {
        let chan = &sample[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy as usize >= g.height {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &chan[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix as usize >= g.width { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into a sample gradient.
fn col2im(g: &ConvGeom, cols: &[f64], sample_grad: &mut [f64]) {
    let plane = g.plane_out();
    for c in 0..g.in_channels {
        let chan = &mut sample_grad[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    let dst = &mut chan[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let patch = g.patch();
    let plane = g.plane_out();
    let mut out = vec![0.0; g.output_len()];
    let mut cols = vec![0.0; patch * plane];
    let in_sample = g.in_channels * g.height * g.width;
    for n in 0..g.batch {
        im2col(g, &input[n * in_sample..(n + 1) * in_sample], &mut cols);
        let out_n = &mut out[n * g.out_channels * plane..(n + 1) * g.out_channels * plane];
        for o in 0..g.out_channels {
            let row = &mut out_n[o * plane..(o + 1) * plane];
            if let Some(b) = bias {
                row.iter_mut().for_each(|v| *v = b[o]);
            }
            let w_row = &weight[o * patch..(o + 1) * patch];
            for (q, &w) in w_row.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let col = &cols[q * plane..(q + 1) * plane];
                for (r, &c) in row.iter_mut().zip(col) {
                    *r += w * c;
                }
            }
        }
    }
    out
}

/// Gradients of a convolution. `dx`/`dw` are accumulated into when given.
pub fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let patch = g.patch();
    let plane = g.plane_out();
    let in_sample = g.in_channels * g.height * g.width;
    let mut cols = vec![0.0; patch * plane];
    let mut dcols = vec![0.0; patch * plane];
    for n in 0..g.batch {
        let gout_n = &grad_out[n * g.out_channels * plane..(n + 1) * g.out_channels * plane];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(g, &input[n * in_sample..(n + 1) * in_sample], &mut cols);
            for o in 0..g.out_channels {
                let go = &gout_n[o * plane..(o + 1) * plane];
                let dw_row = &mut dw[o * patch..(o + 1) * patch];
                for (q, d) in dw_row.iter_mut().enumerate() {
                    let col = &cols[q * plane..(q + 1) * plane];
                    let mut acc = 0.0;
                    for (a, b) in go.iter().zip(col) {
                        acc += a * b;
                    }
                    *d += acc;
                }
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            dcols.iter_mut().for_each(|v| *v = 0.0);
            for o in 0..g.out_channels {
                let go = &gout_n[o * plane..(o + 1) * plane];
                let w_row = &weight[o * patch..(o + 1) * patch];
                for (q, &w) in w_row.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let dc = &mut dcols[q * plane..(q + 1) * plane];
                    for (d, &gv) in dc.iter_mut().zip(go) {
                        *d += w * gv;
                    }
                }
            }
            col2im(g, &dcols, &mut dx[n * in_sample..(n + 1) * in_sample]);
        }
    }
    if let Some(db) = db {
        for n in 0..g.batch {
            for (o, d) in db.iter_mut().enumerate() {
                let start = (n * g.out_channels + o) * plane;
                *d += grad_out[start..start + plane].iter().sum::<f64>();
            }
        }
    }
}

/// Depthwise convolution: `out_channels == in_channels`, weight `C×1×kh×kw`.
pub fn depthwise_forward(g: &ConvGeom, input: &[f64], weight: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.output_len()];
    let k = g.kh * g.kw;
    for n in 0..g.batch {
        for c in 0..g.in_channels {
            let chan = &input[(n * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
            let w = &weight[c * k..(c + 1) * k];
            let dst = &mut out[(n * g.in_channels + c) * g.out_h * g.out_w..][..g.out_h * g.out_w];
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = 0.0;
                    for ki in 0..g.kh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy as usize >= g.height {
                            continue;
                        }
                        for kj in 0..g.kw {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix < 0 || ix as usize >= g.width {
                                continue;
                            }
                            acc += w[ki * g.kw + kj] * chan[iy as usize * g.width + ix as usize];
                        }
                    }
                    dst[oy * g.out_w + ox] = acc;
                }
            }
        }
    }
    out
}

pub fn depthwise_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let k = g.kh * g.kw;
    let hw = g.height * g.width;
    let ohw = g.out_h * g.out_w;
    for n in 0..g.batch {
        for c in 0..g.in_channels {
            let base_in = (n * g.in_channels + c) * hw;
            let go = &grad_out[(n * g.in_channels + c) * ohw..][..ohw];
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let gv = go[oy * g.out_w + ox];
                    for ki in 0..g.kh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy as usize >= g.height {
                            continue;
                        }
                        for kj in 0..g.kw {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix < 0 || ix as usize >= g.width {
                                continue;
                            }
                            let idx = base_in + iy as usize * g.width + ix as usize;
                            if let Some(dw) = dw.as_deref_mut() {
                                dw[c * k + ki * g.kw + kj] += gv * input[idx];
                            }
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[idx] += gv * weight[c * k + ki * g.kw + kj];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Non-overlapping average pooling (`stride == kernel`, no padding).
pub fn avg_pool_forward(input: &[f64], nc: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; nc * oh * ow];
    for p in 0..nc {
        let src = &input[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        acc += src[(oy * k + dy) * w + ox * k + dx];
                    }
                }
                out[(p * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
    out
}

pub fn avg_pool_backward(grad_out: &[f64], dx: &mut [f64], nc: usize, h: usize, w: usize, k: usize) {
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    for p in 0..nc {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = grad_out[(p * oh + oy) * ow + ox] * inv;
                for dy in 0..k {
                    for ddx in 0..k {
                        dx[p * h * w + (oy * k + dy) * w + ox * k + ddx] += gv;
                    }
                }
            }
        }
    }
}

/// Row-wise numerically stable log-softmax of an `rows × cols` matrix.
pub fn log_softmax_rows(logits: &[f64], rows: usize, cols: usize, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
        let mut sum = 0.0;
        for &v in row {
            sum += libm::exp(v / temperature - max);
        }
        let lse = max + libm::log(sum);
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = v / temperature - lse;
        }
    }
    out
}
