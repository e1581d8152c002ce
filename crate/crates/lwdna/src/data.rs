//! Datasets: IDX files, seeded synthetic blobs, normalization and
//! augmentation.

use std::path::Path;

use lwdna_core::rng::{self, Rng};
use lwdna_core::shrink::{Batch, BatchSource};
use lwdna_core::Tensor;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel affine normalization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N×C×H×W`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.ndim() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Invalid(format!("{} labels for images {:?}", labels.len(), images.shape())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Invalid(format!("label {} with {} classes", bad, num_classes)));
        }
        Ok(Dataset { images, labels, num_classes, split, normalization: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }

    fn sample_len(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let s = self.sample_len();
        &self.images.data()[i * s..(i + 1) * s]
    }

    /// Gather samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let s = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * s);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Batch {
            images: Tensor::new(shape, data).expect("gathered batch matches its shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Per-channel mean and standard deviation over all samples.
    pub fn channel_stats(&self) -> Normalization {
        let (n, c) = (self.len(), self.channels());
        let plane = self.hw().0 * self.hw().1;
        let count = (n * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for i in 0..n {
            for (ch, chunk) in self.sample(i).chunks(plane).enumerate() {
                mean[ch] += chunk.iter().sum::<f64>();
                sq[ch] += chunk.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let mut std = vec![0.0; c];
        for ch in 0..c {
            mean[ch] /= count;
            std[ch] = (sq[ch] / count - mean[ch] * mean[ch]).max(0.0).sqrt().max(1e-12);
        }
        Normalization { mean, std }
    }

    pub fn normalize(&mut self, norm: &Normalization) -> Result<()> {
        if norm.mean.len() != self.channels() || norm.std.len() != self.channels() {
            return Err(Error::Invalid(format!("normalization for {} channels on {}-channel data", norm.mean.len(), self.channels())));
        }
        let plane = self.hw().0 * self.hw().1;
        let c = self.channels();
        for (k, chunk) in self.images.data_mut().chunks_mut(plane).enumerate() {
            let ch = k % c;
            chunk.iter_mut().for_each(|v| *v = (*v - norm.mean[ch]) / norm.std[ch]);
        }
        self.normalization = Some(norm.clone());
        Ok(())
    }
}

/// Normalize both splits with statistics of the training split.
pub fn normalize_pair(train: &mut Dataset, test: &mut Dataset) -> Result<Normalization> {
    let norm = train.channel_stats();
    train.normalize(&norm)?;
    test.normalize(&norm)?;
    Ok(norm)
}

/// Mirror a `C×H×W` sample left to right.
pub fn flip_horizontal(sample: &mut [f64], width: usize) {
    for row in sample.chunks_mut(width) {
        row.reverse();
    }
}

/// Zero-pad a `C×H×W` sample by `pad` on every side and crop an `H×W`
/// window whose top-left corner is `(dy, dx)` in padded coordinates.
pub fn pad_crop(sample: &[f64], channels: usize, hw: (usize, usize), pad: usize, dy: usize, dx: usize) -> Vec<f64> {
    let (h, w) = hw;
    let mut out = vec![0.0; sample.len()];
    for c in 0..channels {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(c * h + y) * w + x] = sample[(c * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

/// Random flip and pad-crop applied in place to every sample of a batch.
pub fn augment(batch: &mut Batch, flip: bool, pad: usize, rng: &mut Rng) {
    let shape = batch.images.shape().to_vec();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let s = c * h * w;
    for sample in batch.images.data_mut().chunks_mut(s) {
        if flip && rng.random_bool(0.5) {
            flip_horizontal(sample, w);
        }
        if pad > 0 {
            let (dy, dx) = (rng.random_range(0..=2 * pad), rng.random_range(0..=2 * pad));
            let cropped = pad_crop(sample, c, (h, w), pad, dy, dx);
            sample.copy_from_slice(&cropped);
        }
    }
}

// ----------------------------------------------------------------------
// IDX
// ----------------------------------------------------------------------

/// A decoded IDX array; element values widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub type_code: u8,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

fn idx_element_size(code: u8) -> Option<usize> {
    match code {
        0x08 | 0x09 => Some(1),
        0x0B => Some(2),
        0x0C | 0x0D => Some(4),
        0x0E => Some(8),
        _ => None,
    }
}

fn truncated(offset: usize, detail: String) -> Error {
    Error::Format { what: "IDX file", offset: offset as u64, detail }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(truncated(bytes.len(), "header needs 4 bytes".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(truncated(0, format!("bad magic {:02x}{:02x}", bytes[0], bytes[1])));
    }
    let code = bytes[2];
    let size = idx_element_size(code).ok_or_else(|| truncated(2, format!("unknown element type 0x{:02x}", code)))?;
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(truncated(3, "zero dimensions".into()));
    }
    let mut dims = Vec::with_capacity(ndims);
    for d in 0..ndims {
        let at = 4 + 4 * d;
        let raw = bytes.get(at..at + 4).ok_or_else(|| truncated(bytes.len(), format!("missing dimension {}", d)))?;
        dims.push(u32::from_be_bytes(raw.try_into().expect("4 bytes")) as usize);
    }
    let start = 4 + 4 * ndims;
    let count: usize = dims.iter().product();
    let end = start + count * size;
    if bytes.len() < end {
        return Err(truncated(bytes.len(), format!("expected {} data bytes after the header, found {}", count * size, bytes.len() - start)));
    }
    let body = &bytes[start..end];
    let data = match code {
        0x08 => body.iter().map(|&b| b as f64).collect(),
        0x09 => body.iter().map(|&b| b as i8 as f64).collect(),
        0x0B => body.chunks_exact(2).map(|c| i16::from_be_bytes([c[0], c[1]]) as f64).collect(),
        0x0C => body.chunks_exact(4).map(|c| i32::from_be_bytes(c.try_into().unwrap()) as f64).collect(),
        0x0D => body.chunks_exact(4).map(|c| f32::from_be_bytes(c.try_into().unwrap()) as f64).collect(),
        _ => body.chunks_exact(8).map(|c| f64::from_be_bytes(c.try_into().unwrap())).collect(),
    };
    Ok(IdxArray { type_code: code, dims, data })
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes)
}

/// Encode an array as IDX with the given element type.
pub fn encode_idx(type_code: u8, dims: &[usize], data: &[f64]) -> Result<Vec<u8>> {
    idx_element_size(type_code).ok_or_else(|| Error::Invalid(format!("unknown IDX type 0x{:02x}", type_code)))?;
    if dims.iter().product::<usize>() != data.len() || dims.is_empty() || dims.len() > 255 {
        return Err(Error::Invalid(format!("{} values for IDX dims {:?}", data.len(), dims)));
    }
    let mut out = vec![0, 0, type_code, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for &v in data {
        match type_code {
            0x08 => out.push(v as u8),
            0x09 => out.push(v as i8 as u8),
            0x0B => out.extend_from_slice(&(v as i16).to_be_bytes()),
            0x0C => out.extend_from_slice(&(v as i32).to_be_bytes()),
            0x0D => out.extend_from_slice(&(v as f32).to_be_bytes()),
            _ => out.extend_from_slice(&v.to_be_bytes()),
        }
    }
    Ok(out)
}

/// Images from an `N×H×W` or `N×C×H×W` array; unsigned bytes are scaled
/// to `[0, 1]`.
pub fn idx_images(arr: IdxArray) -> Result<Tensor> {
    let shape = match arr.dims[..] {
        [n, h, w] => vec![n, 1, h, w],
        [n, c, h, w] => vec![n, c, h, w],
        _ => return Err(Error::Invalid(format!("image IDX must have 3 or 4 dimensions, got {:?}", arr.dims))),
    };
    let scale = if arr.type_code == 0x08 { 1.0 / 255.0 } else { 1.0 };
    let data = arr.data.into_iter().map(|v| v * scale).collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn idx_labels(arr: IdxArray) -> Result<Vec<usize>> {
    if arr.dims.len() != 1 {
        return Err(Error::Invalid(format!("label IDX must be one-dimensional, got {:?}", arr.dims)));
    }
    arr.data
        .into_iter()
        .map(|v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Invalid(format!("label {} is not a class index", v)))
            }
        })
        .collect()
}

/// Load an image/label IDX pair.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let x = idx_images(read_idx(images)?)?;
    let y = idx_labels(read_idx(labels)?)?;
    let classes = y.iter().max().map_or(0, |m| m + 1);
    Dataset::new(x, y, classes, split)
}

// ----------------------------------------------------------------------
// Synthetic data
// ----------------------------------------------------------------------

/// Class-conditional Gaussian-blob images.
///
/// Each class owns a prototype image made of mirrored Gaussian blobs
/// (so horizontal flips preserve the class), standardized to unit pixel
/// deviation and scaled by `separation`. Samples add unit-variance pixel
/// noise, so `separation` is the ratio of between-class to within-class
/// deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub channels: usize,
    pub size: usize,
    pub train: usize,
    pub test: usize,
    pub separation: f64,
    pub blobs: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { classes: 10, channels: 3, size: 16, train: 2000, test: 500, separation: 0.3, blobs: 3 }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.channels == 0 || self.size == 0 || self.blobs == 0 || self.train == 0 {
            return Err(Error::Invalid(format!("degenerate synthetic spec {:?}", self)));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::Invalid(format!("separation {} must be positive", self.separation)));
        }
        Ok(())
    }

    fn prototype(&self, rng: &mut Rng) -> Vec<f64> {
        let (c, s) = (self.channels, self.size);
        let mut img = vec![0.0; c * s * s];
        for _ in 0..self.blobs {
            let cy = rng.random::<f64>() * (s - 1) as f64;
            let cx = rng.random::<f64>() * (s - 1) as f64;
            let width = s as f64 * (0.1 + 0.15 * rng.random::<f64>());
            let amp: Vec<f64> = (0..c).map(|_| rng::normal(rng, 1.0)).collect();
            for mirror in [cx, (s - 1) as f64 - cx] {
                for y in 0..s {
                    for x in 0..s {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - mirror).powi(2);
                        let g = (-d2 / (2.0 * width * width)).exp();
                        for (ch, a) in amp.iter().enumerate() {
                            img[(ch * s + y) * s + x] += a * g;
                        }
                    }
                }
            }
        }
        let n = img.len() as f64;
        let mean = img.iter().sum::<f64>() / n;
        let std = (img.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
        img.iter().map(|v| self.separation * (v - mean) / std).collect()
    }

    fn render(&self, protos: &[Vec<f64>], count: usize, rng: &mut Rng, split: Split) -> Result<Dataset> {
        let per = self.channels * self.size * self.size;
        let mut data = Vec::with_capacity(count * per);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let k = i % self.classes;
            data.extend(protos[k].iter().map(|p| p + rng::normal(rng, 1.0)));
            labels.push(k);
        }
        let images = Tensor::new(vec![count, self.channels, self.size, self.size], data)?;
        Dataset::new(images, labels, self.classes, split)
    }
}

/// Deterministic `(train, test)` pair for `spec` and `seed`.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut proto_rng = rng::stream(seed, 20);
    let protos: Vec<Vec<f64>> = (0..spec.classes).map(|_| spec.prototype(&mut proto_rng)).collect();
    let train = spec.render(&protos, spec.train, &mut rng::stream(seed, 21), Split::Train)?;
    let test = spec.render(&protos, spec.test, &mut rng::stream(seed, 22), Split::Test)?;
    Ok((train, test))
}

/// Uniformly drawn mini-batches without replacement within a batch.
pub struct RandomBatches<'a> {
    data: &'a Dataset,
    batch_size: usize,
    rng: Rng,
}

impl<'a> RandomBatches<'a> {
    pub fn new(data: &'a Dataset, batch_size: usize, seed: u64) -> Self {
        RandomBatches { data, batch_size, rng: rng::stream(seed, 30) }
    }
}

impl BatchSource for RandomBatches<'_> {
    fn next_batch(&mut self) -> lwdna_core::Result<Batch> {
        if self.data.is_empty() || self.batch_size == 0 {
            return Err(lwdna_core::Error::EmptyBatch);
        }
        let mut idx: Vec<usize> = (0..self.data.len()).collect();
        idx.shuffle(&mut self.rng);
        idx.truncate(self.batch_size.min(self.data.len()));
        Ok(self.data.batch(&idx))
    }
}
