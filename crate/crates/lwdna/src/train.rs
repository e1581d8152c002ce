//! The shared training protocol, training loop and evaluation.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use lwdna_core::kernels::log_softmax_rows;
use lwdna_core::network::{argmax_rows, Network, Objective};
use lwdna_core::optim::{Schedule, Sgd};
use lwdna_core::rng;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{augment, Dataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub horizontal_flip: bool,
    /// Zero-padding before a random crop; 0 disables the crop.
    pub pad_crop: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub lambda: f64,
    pub temperature: f64,
    /// Checkpoint of the pretrained teacher.
    pub teacher: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainProtocol {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: Augmentation,
    pub kd: Option<KdConfig>,
    pub seed: u64,
}

impl Default for TrainProtocol {
    /// CIFAR recipe with the epoch count scaled down for desk runs.
    fn default() -> Self {
        TrainProtocol {
            epochs: 30,
            batch_size: 64,
            base_lr: 0.1,
            schedule: Schedule::step_default(),
            momentum: 0.9,
            weight_decay: 1e-4,
            augment: Augmentation { horizontal_flip: true, pad_crop: 4 },
            kd: None,
            seed: 0,
        }
    }
}

impl TrainProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be positive".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Invalid(format!("base_lr {} must be finite and >= 0", self.base_lr)));
        }
        Sgd::new(self.momentum, self.weight_decay)?;
        if let Some(kd) = &self.kd {
            if !(0.0..=1.0).contains(&kd.lambda) || kd.temperature.is_nan() || kd.temperature <= 0.0 {
                return Err(Error::Invalid(format!("distillation needs lambda in [0, 1] and temperature > 0, got {} and {}", kd.lambda, kd.temperature)));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("protocol serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_err: f64,
    pub test_err: f64,
    pub wallclock: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Percent.
    pub top1_err: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub protocol_hash: String,
    pub rows: Vec<EpochRow>,
    pub final_eval: Evaluation,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(["epoch", "lr", "train_loss", "train_err", "test_err", "wallclock"])?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io("csv", e))?;
        Ok(())
    }
}

/// Worker threads for evaluation, from `LWDNA_THREADS` when set.
pub fn thread_count() -> usize {
    std::env::var("LWDNA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

/// Top-1 error (percent) and mean cross-entropy. Batches run in parallel;
/// partial sums are reduced in batch order.
pub fn evaluate(net: &Network, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Invalid("cannot evaluate on an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(batch_size.max(1)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {}", e)))?;
    let parts: Vec<lwdna_core::Result<(f64, usize)>> = pool.install(|| {
        chunks
            .par_iter()
            .map(|chunk| {
                let b = data.batch(chunk);
                let logits = net.logits(&b.images)?;
                let k = logits.shape()[1];
                let logp = log_softmax_rows(logits.data(), b.len(), k, 1.0);
                let loss: f64 = b.labels.iter().enumerate().map(|(r, &y)| -logp[r * k + y]).sum();
                let correct = argmax_rows(&logits).iter().zip(&b.labels).filter(|(p, y)| p == y).count();
                Ok((loss, correct))
            })
            .collect()
    });
    let (mut loss, mut correct) = (0.0, 0);
    for p in parts {
        let (l, c) = p?;
        loss += l;
        correct += c;
    }
    let n = data.len() as f64;
    Ok(Evaluation { top1_err: 100.0 * (1.0 - correct as f64 / n), loss: loss / n })
}

/// Train `net` from its current parameters under `protocol`.
///
/// `teacher` is required exactly when the protocol enables distillation.
/// Per-epoch progress goes to `progress` when given.
pub fn train(
    net: &mut Network,
    train_set: &Dataset,
    test_set: &Dataset,
    protocol: &TrainProtocol,
    teacher: Option<&Network>,
    mut progress: Option<&mut dyn FnMut(&EpochRow)>,
) -> Result<TrainLog> {
    protocol.validate()?;
    if train_set.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    if protocol.kd.is_some() != teacher.is_some() {
        return Err(Error::Invalid("a teacher network is required exactly when distillation is enabled".into()));
    }
    let mut opt = Sgd::new(protocol.momentum, protocol.weight_decay)?;
    let mut order_rng = rng::stream(protocol.seed, 40);
    let mut aug_rng = rng::stream(protocol.seed, 41);
    let start = Instant::now();
    let mut rows = Vec::with_capacity(protocol.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut last_eval = None;
    for epoch in 0..protocol.epochs {
        let lr = protocol.schedule.lr_at(protocol.base_lr, epoch, protocol.epochs);
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, chunk) in order.chunks(protocol.batch_size).enumerate() {
            let mut batch = train_set.batch(chunk);
            augment(&mut batch, protocol.augment.horizontal_flip, protocol.augment.pad_crop, &mut aug_rng);
            let teacher_logits = match teacher {
                Some(t) => Some(t.logits(&batch.images)?),
                None => None,
            };
            let objective = match (&protocol.kd, &teacher_logits) {
                (Some(kd), Some(tl)) => Objective::Distill { teacher_logits: tl, lambda: kd.lambda, temperature: kd.temperature },
                _ => Objective::CrossEntropy,
            };
            let out = net.train_step(&batch.images, &batch.labels, objective, &mut opt, lr)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b, loss: out.loss });
            }
            loss_sum += out.loss * chunk.len() as f64;
            correct += out.correct;
        }
        let n = train_set.len() as f64;
        let eval = evaluate(net, test_set, protocol.batch_size)?;
        let row = EpochRow {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / n,
            train_err: 100.0 * (1.0 - correct as f64 / n),
            test_err: eval.top1_err,
            wallclock: start.elapsed().as_secs_f64(),
        };
        if let Some(p) = progress.as_mut() {
            p(&row);
        }
        rows.push(row);
        last_eval = Some(eval);
    }
    let final_eval = match last_eval {
        Some(e) => e,
        None => evaluate(net, test_set, protocol.batch_size)?,
    };
    Ok(TrainLog { protocol_hash: protocol.hash(), rows, final_eval })
}
