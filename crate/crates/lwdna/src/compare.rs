//! Baseline versus shrunk configuration under one training protocol.

use std::path::Path;

use lwdna_core::complexity::model_cost;
use lwdna_core::shrink::shrink_pipeline;
use lwdna_core::{ArchSpec, ChannelConfig, Network, ShrinkParams, ShrinkReport};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{Dataset, RandomBatches};
use crate::error::{Error, Result};
use crate::report::{self, write_json, write_text};
use crate::train::{train, EpochRow, TrainLog, TrainProtocol};

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: ChannelConfig,
    pub top1_err: f64,
    pub test_loss: f64,
    pub flops: u64,
    pub params: u64,
    pub protocol_hash: String,
}

/// Per-epoch callback, labelled `baseline` or `lwdna`.
pub type Progress<'a> = &'a mut dyn FnMut(&str, &EpochRow);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub schema_version: u32,
    pub arch: String,
    pub seed: u64,
    pub protocol_hash: String,
    pub baseline: RunSummary,
    pub lwdna: RunSummary,
    /// `100 · lwdna / baseline`
    pub flops_ratio: f64,
    pub params_ratio: f64,
    /// `lwdna` top-1 error minus baseline top-1 error, in points.
    pub err_delta: f64,
}

pub struct Comparison {
    pub shrink: ShrinkReport,
    pub baseline_log: TrainLog,
    pub lwdna_log: TrainLog,
    pub summary: ComparisonSummary,
    pub baseline: Network,
    pub lwdna: Network,
}

fn run_summary(arch: &ArchSpec, net: &Network, log: &TrainLog, hw: (usize, usize)) -> Result<RunSummary> {
    let cost = model_cost(arch, &net.config, hw)?;
    Ok(RunSummary {
        config: net.config.clone(),
        top1_err: log.final_eval.top1_err,
        test_loss: log.final_eval.loss,
        flops: cost.total_flops,
        params: cost.total_params,
        protocol_hash: log.protocol_hash.clone(),
    })
}

/// Pair two runs. Refuses when they were trained under different protocols.
pub fn summarize(arch: &ArchSpec, seed: u64, baseline: RunSummary, lwdna: RunSummary) -> Result<ComparisonSummary> {
    if baseline.protocol_hash != lwdna.protocol_hash {
        return Err(Error::ProtocolMismatch { left: baseline.protocol_hash, right: lwdna.protocol_hash });
    }
    Ok(ComparisonSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        arch: arch.name.clone(),
        seed,
        protocol_hash: baseline.protocol_hash.clone(),
        flops_ratio: 100.0 * lwdna.flops as f64 / baseline.flops as f64,
        params_ratio: 100.0 * lwdna.params as f64 / baseline.params as f64,
        err_delta: lwdna.top1_err - baseline.top1_err,
        baseline,
        lwdna,
    })
}

/// Shrink, then train the baseline and the shrunk configuration from
/// scratch under the same protocol.
pub fn compare_run(
    arch: &ArchSpec,
    protocol: &TrainProtocol,
    shrink: &ShrinkParams,
    train_set: &Dataset,
    test_set: &Dataset,
    mut progress: Option<Progress<'_>>,
) -> Result<Comparison> {
    protocol.validate()?;
    let mut source = RandomBatches::new(train_set, protocol.batch_size, shrink.seed);
    let (report, _) = shrink_pipeline(arch, shrink, &mut source)?;
    let teacher = match &protocol.kd {
        Some(kd) => Some(checkpoint::load(&kd.teacher)?),
        None => None,
    };
    let mut run = |label: &str, config: &ChannelConfig| -> Result<(Network, TrainLog)> {
        let mut net = Network::init(arch, config, protocol.seed)?;
        let mut cb = |row: &EpochRow| {
            if let Some(p) = progress.as_mut() {
                p(label, row);
            }
        };
        let log = train(&mut net, train_set, test_set, protocol, teacher.as_ref(), Some(&mut cb))?;
        Ok((net, log))
    };
    let (baseline, baseline_log) = run("baseline", &report.baseline_config)?;
    let (lwdna, lwdna_log) = run("lwdna", &report.shrunk_config)?;
    let summary = summarize(
        arch,
        shrink.seed,
        run_summary(arch, &baseline, &baseline_log, shrink.input_hw)?,
        run_summary(arch, &lwdna, &lwdna_log, shrink.input_hw)?,
    )?;
    Ok(Comparison { shrink: report, baseline_log, lwdna_log, summary, baseline, lwdna })
}

/// Write every artifact of a comparison into `dir`.
pub fn write_comparison(dir: &Path, c: &Comparison) -> Result<()> {
    report::write_shrink_outputs(dir, &c.shrink)?;
    for (name, log) in [("baseline_log.csv", &c.baseline_log), ("lwdna_log.csv", &c.lwdna_log)] {
        let mut buf = Vec::new();
        log.write_csv(&mut buf)?;
        write_text(&dir.join(name), &String::from_utf8(buf).expect("csv output is UTF-8"))?;
    }
    checkpoint::save(&c.baseline, &dir.join("baseline.ckpt"))?;
    checkpoint::save(&c.lwdna, &dir.join("lwdna.ckpt"))?;
    write_json(&dir.join("summary.json"), &c.summary)
}
