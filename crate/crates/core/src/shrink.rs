//! Single-shot saliency scoring and budgeted threshold search.
//!
//! A widened hypernet is scored once at initialization. Every prunable
//! latent element gets a score; non-prunable latents score `+∞`. A global
//! threshold then decides which elements survive, subject to per-group
//! floors, and the threshold is chosen by binary search as the smallest
//! candidate whose shrunk configuration fits the FLOP budget.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, ChannelConfig};
use crate::complexity::{self, model_cost};
use crate::error::{Error, Result};
use crate::hypernet::{GradTargets, HyperNet, LatentKind};
use crate::network::BnMode;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Gradient,
    Magnitude,
}

impl core::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradient" => Ok(Criterion::Gradient),
            "magnitude" => Ok(Criterion::Magnitude),
            other => Err(Error::arg("criterion", format!("`{}` is not gradient or magnitude", other))),
        }
    }
}

/// A labelled mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() || images.shape().first() != Some(&labels.len()) {
            if labels.is_empty() {
                return Err(Error::EmptyBatch);
            }
            return Err(Error::shape("batch", format!("{} labels for images {:?}", labels.len(), images.shape())));
        }
        Ok(Batch { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Anything that can hand out mini-batches.
pub trait BatchSource {
    fn next_batch(&mut self) -> Result<Batch>;
}

/// Per-latent scores, parallel to [`HyperNet::latents`].
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub criterion: Criterion,
    pub scores: Vec<Vec<f64>>,
    pub forward_passes: usize,
    pub backward_passes: usize,
}

impl SaliencyMap {
    /// Scores of each channel group's latent, in group order.
    pub fn group_scores(&self, net: &HyperNet) -> Vec<Vec<f64>> {
        (0..net.arch.groups.len()).map(|g| self.scores[net.group_latent(g)].clone()).collect()
    }

    /// Multiply every score by `k > 0`.
    pub fn scaled(&self, k: f64) -> SaliencyMap {
        let mut out = self.clone();
        for s in out.scores.iter_mut().flatten() {
            *s *= k;
        }
        out
    }
}

/// `|∂L/∂z|` for every latent element from one forward and one backward
/// pass over `batch`. The loss is cross-entropy multiplied by
/// `loss_scale`.
///
/// Batch norm uses its running statistics (the identity at
/// initialization). With batch statistics every channel's output is
/// invariant to the scale of its latent element, which would zero the
/// output-side gradient of every latent feeding a BN layer.
pub fn score_gradients(net: &HyperNet, batch: &Batch, loss_scale: f64) -> Result<SaliencyMap> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !loss_scale.is_finite() || loss_scale <= 0.0 {
        return Err(Error::arg("loss_scale", "must be positive and finite"));
    }
    let mut scratch = net.clone();
    let mut tape = Tape::new();
    let x = tape.constant(batch.images.clone());
    let f = scratch.forward(&mut tape, x, BnMode::Eval, GradTargets::LATENTS)?;
    let ce = tape.cross_entropy(f.logits, &batch.labels)?;
    let loss = if loss_scale == 1.0 { ce } else { tape.scale(ce, loss_scale) };
    tape.backward(loss)?;
    let scores = net
        .latents
        .iter()
        .zip(&f.latents)
        .map(|(lv, &v)| {
            if !lv.prunable {
                return vec![f64::INFINITY; lv.len()];
            }
            match tape.grad(v) {
                Some(g) => g.iter().map(|x| x.abs()).collect(),
                None => vec![0.0; lv.len()],
            }
        })
        .collect();
    Ok(SaliencyMap {
        criterion: Criterion::Gradient,
        scores,
        forward_passes: tape.forward_passes(),
        backward_passes: tape.backward_passes(),
    })
}

/// `|z|` for every prunable latent element.
pub fn score_magnitude(net: &HyperNet) -> SaliencyMap {
    let scores = net
        .latents
        .iter()
        .map(|lv| {
            if lv.prunable {
                lv.values.data().iter().map(|x| x.abs()).collect()
            } else {
                vec![f64::INFINITY; lv.len()]
            }
        })
        .collect();
    SaliencyMap { criterion: Criterion::Magnitude, scores, forward_passes: 0, backward_passes: 0 }
}

/// Minimum surviving fractions: `rho` per channel group, `tau` for the
/// classifier's input features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Floors {
    pub rho: f64,
    pub tau: f64,
}

impl Default for Floors {
    fn default() -> Self {
        Floors { rho: 0.4, tau: 0.45 }
    }
}

impl Floors {
    pub fn new(rho: f64, tau: f64) -> Result<Self> {
        let f = Floors { rho, tau };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("rho", self.rho), ("tau", self.tau)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::arg(name, format!("{} is outside (0, 1]", v)));
            }
        }
        Ok(())
    }

    /// Minimum kept channels per group of the `wide` configuration.
    /// Non-prunable groups are pinned at full width.
    pub fn floor_counts(&self, arch: &ArchSpec, wide: &ChannelConfig) -> Result<Vec<usize>> {
        self.validate()?;
        arch.check_config(wide)?;
        let head = arch.classifier_groups()?;
        Ok(wide
            .values()
            .iter()
            .zip(&arch.groups)
            .enumerate()
            .map(|(g, (&w, group))| {
                if !group.prunable {
                    return w;
                }
                let mut f = ceil_count(self.rho, w);
                if head.contains(&g) {
                    f = f.max(ceil_count(self.tau, w));
                }
                f.clamp(1, w.max(1))
            })
            .collect())
    }
}

fn ceil_count(fraction: f64, width: usize) -> usize {
    libm::ceil(fraction * width as f64 - 1e-9) as usize
}

/// FLOP budget in multiply-accumulate units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub target_flops: u64,
}

/// How a budget is requested.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum BudgetSpec {
    Absolute(u64),
    /// Fraction in `(0, 1]` of the baseline configuration's FLOPs.
    Fraction(f64),
}

impl BudgetSpec {
    pub fn resolve(&self, baseline_flops: u64) -> Result<Budget> {
        match *self {
            BudgetSpec::Absolute(t) => Ok(Budget { target_flops: t }),
            BudgetSpec::Fraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::arg("budget", format!("fraction {} is outside (0, 1]", f)));
                }
                Ok(Budget { target_flops: libm::floor(f * baseline_flops as f64) as u64 })
            }
        }
    }
}

/// Keep masks per channel group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeepMasks {
    pub groups: Vec<Vec<bool>>,
}

impl KeepMasks {
    pub fn all(config: &ChannelConfig) -> Self {
        KeepMasks { groups: config.values().iter().map(|&n| vec![true; n]).collect() }
    }

    pub fn counts(&self) -> Vec<usize> {
        self.groups.iter().map(|m| m.iter().filter(|&&k| k).count()).collect()
    }

    pub fn config(&self) -> ChannelConfig {
        ChannelConfig(self.counts())
    }

    pub fn kept_indices(&self) -> Vec<Vec<usize>> {
        self.groups.iter().map(|m| m.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect()).collect()
    }
}

/// Keep `score ≥ threshold`; where fewer than the floor survive, keep the
/// floor's worth of highest scores instead, lower index first on ties.
pub fn build_keep_masks(group_scores: &[Vec<f64>], threshold: f64, floors: &[usize], prunable: &[bool]) -> Result<KeepMasks> {
    if !(0.0..).contains(&threshold) {
        return Err(Error::arg("threshold", format!("{} must be >= 0", threshold)));
    }
    if floors.len() != group_scores.len() || prunable.len() != group_scores.len() {
        return Err(Error::ConfigLength { expected: group_scores.len(), got: floors.len().min(prunable.len()) });
    }
    let groups = group_scores
        .iter()
        .zip(floors)
        .zip(prunable)
        .map(|((scores, &floor), &p)| {
            if !p {
                return vec![true; scores.len()];
            }
            let mut keep: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
            if keep.iter().filter(|&&k| k).count() < floor {
                keep = vec![false; scores.len()];
                for i in ranked(scores).into_iter().take(floor) {
                    keep[i] = true;
                }
            }
            keep
        })
        .collect();
    Ok(KeepMasks { groups })
}

/// Indices by descending score, ascending index on ties.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Candidate thresholds in increasing order: keep-all (`0`), every distinct
/// prunable score above the smallest, then floors-only (`+∞`).
pub fn candidate_thresholds(group_scores: &[Vec<f64>], prunable: &[bool]) -> Vec<f64> {
    let mut s: Vec<f64> = group_scores
        .iter()
        .zip(prunable)
        .filter(|(_, &p)| p)
        .flat_map(|(v, _)| v.iter().copied())
        .filter(|x| x.is_finite())
        .collect();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut out = Vec::with_capacity(s.len() + 1);
    out.push(0.0);
    out.extend(s.into_iter().skip(1).filter(|&x| x > 0.0));
    out.push(f64::INFINITY);
    out
}

/// Why no larger keep set fits the budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Witness {
    /// Nothing was pruned.
    KeepAll,
    /// Restoring the highest-scoring pruned element exceeds the budget.
    AddBackExceeds { group: usize, index: usize, flops: u64 },
    /// The highest pruned score is shared by several elements; a threshold
    /// cannot separate them and restoring all of them exceeds the budget.
    Tie { elements: Vec<(usize, usize)>, flops: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    /// `+∞` means only the floors survive.
    pub threshold: f64,
    pub masks: KeepMasks,
    pub config: ChannelConfig,
    pub flops: u64,
    pub params: u64,
    /// FLOP evaluations performed by the search.
    pub evaluations: usize,
    pub witness: Witness,
}

/// Smallest candidate threshold whose configuration fits `budget`.
pub fn search_threshold(
    group_scores: &[Vec<f64>],
    budget: Budget,
    floors: &Floors,
    arch: &ArchSpec,
    wide: &ChannelConfig,
    input_hw: (usize, usize),
) -> Result<SearchResult> {
    let floor_counts = floors.floor_counts(arch, wide)?;
    let prunable = arch.prunable();
    if group_scores.len() != wide.len() {
        return Err(Error::ConfigLength { expected: wide.len(), got: group_scores.len() });
    }
    for (g, (s, &w)) in group_scores.iter().zip(wide.values()).enumerate() {
        if s.len() != w {
            return Err(Error::shape("search_threshold", format!("group {} has {} scores for {} channels", g, s.len(), w)));
        }
    }
    let cands = candidate_thresholds(group_scores, &prunable);
    let mut evaluations = 0;
    let mut eval = |t: f64| -> Result<(KeepMasks, u64)> {
        evaluations += 1;
        let m = build_keep_masks(group_scores, t, &floor_counts, &prunable)?;
        let f = complexity::flops(arch, &m.config(), input_hw)?;
        Ok((m, f))
    };

    let last = cands.len() - 1;
    let (floor_masks, floor_flops) = eval(cands[last])?;
    if floor_flops > budget.target_flops {
        return Err(Error::InfeasibleBudget { target: budget.target_flops, floor_flops });
    }
    let (all_masks, all_flops) = eval(cands[0])?;
    let (index, masks, flops) = if all_flops <= budget.target_flops {
        (0, all_masks, all_flops)
    } else {
        // invariant: cands[lo] exceeds, cands[hi] fits
        let (mut lo, mut hi) = (0, last);
        let mut best = (floor_masks, floor_flops);
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            let (m, f) = eval(cands[mid])?;
            if f <= budget.target_flops {
                hi = mid;
                best = (m, f);
            } else {
                lo = mid;
            }
        }
        (hi, best.0, best.1)
    };
    let witness = if index == 0 {
        Witness::KeepAll
    } else {
        let (above, _) = eval(cands[index - 1])?;
        maximality_witness(group_scores, &masks, &above, arch, input_hw)?
    };
    let config = masks.config();
    let params = model_cost(arch, &config, input_hw)?.total_params;
    Ok(SearchResult {
        threshold: if index == 0 { 0.0 } else { cands[index] },
        masks,
        config,
        flops,
        params,
        evaluations,
        witness,
    })
}

fn maximality_witness(
    group_scores: &[Vec<f64>],
    chosen: &KeepMasks,
    above: &KeepMasks,
    arch: &ArchSpec,
    input_hw: (usize, usize),
) -> Result<Witness> {
    let mut diff = Vec::new();
    for (g, (c, a)) in chosen.groups.iter().zip(&above.groups).enumerate() {
        for (i, (&kc, &ka)) in c.iter().zip(a).enumerate() {
            if ka && !kc {
                diff.push((g, i));
            }
        }
    }
    diff.sort_by(|&(ga, ia), &(gb, ib)| group_scores[gb][ib].total_cmp(&group_scores[ga][ia]).then((ga, ia).cmp(&(gb, ib))));
    let mut restored = chosen.clone();
    if let [(g, i)] = diff[..] {
        restored.groups[g][i] = true;
        let flops = complexity::flops(arch, &restored.config(), input_hw)?;
        return Ok(Witness::AddBackExceeds { group: g, index: i, flops });
    }
    for &(g, i) in &diff {
        restored.groups[g][i] = true;
    }
    let flops = complexity::flops(arch, &restored.config(), input_hw)?;
    Ok(Witness::Tie { elements: diff, flops })
}

/// Inputs of one shrink run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkParams {
    pub beta: f64,
    pub m: usize,
    pub floors: Floors,
    pub budget: BudgetSpec,
    pub criterion: Criterion,
    pub seed: u64,
    pub input_hw: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub index: usize,
    pub name: String,
    pub prunable: bool,
    pub baseline: usize,
    pub wide: usize,
    pub floor: usize,
    pub kept: usize,
    pub percent_of_wide: f64,
    pub percent_of_baseline: f64,
    pub kept_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedLatent {
    pub latent: usize,
    pub kind: LatentKind,
    pub length: usize,
    pub kept: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkReport {
    pub schema_version: u32,
    pub arch: String,
    pub criterion: Criterion,
    pub seed: u64,
    pub beta: f64,
    pub m: usize,
    pub rho: f64,
    pub tau: f64,
    pub input_hw: (usize, usize),
    pub budget_flops: u64,
    /// `None` when only the floors survive.
    pub threshold: Option<f64>,
    pub baseline_config: ChannelConfig,
    pub wide_config: ChannelConfig,
    pub shrunk_config: ChannelConfig,
    pub groups: Vec<GroupRow>,
    pub fixed_latents: Vec<FixedLatent>,
    pub baseline: Cost,
    pub wide: Cost,
    pub shrunk: Cost,
    /// `100 · shrunk / baseline`
    pub flops_ratio: f64,
    pub params_ratio: f64,
    pub scoring_batch: usize,
    pub forward_passes: usize,
    pub backward_passes: usize,
    pub search_evaluations: usize,
    pub witness: Witness,
}

/// Widen, score on one batch, search the threshold and materialize.
///
/// Returns the report and the shrunk network carrying the generated
/// weights of the surviving channels.
pub fn shrink_pipeline(
    arch: &ArchSpec,
    params: &ShrinkParams,
    source: &mut dyn BatchSource,
) -> Result<(ShrinkReport, crate::network::Network)> {
    params.floors.validate()?;
    let net = HyperNet::init(arch, params.beta, params.m, params.seed)?;
    let batch = source.next_batch()?;
    let saliency = match params.criterion {
        Criterion::Gradient => score_gradients(&net, &batch, 1.0)?,
        Criterion::Magnitude => score_magnitude(&net),
    };
    let base_cost = model_cost(arch, &net.base_config, params.input_hw)?;
    let wide_cost = model_cost(arch, &net.wide_config, params.input_hw)?;
    let budget = params.budget.resolve(base_cost.total_flops)?;
    let group_scores = saliency.group_scores(&net);
    let found = search_threshold(&group_scores, budget, &params.floors, arch, &net.wide_config, params.input_hw)?;
    let (shrunk_config, shrunk_net) = net.materialize_shrunk(&found.masks.groups)?;
    let floors = params.floors.floor_counts(arch, &net.wide_config)?;
    let kept_indices = found.masks.kept_indices();

    let groups = arch
        .groups
        .iter()
        .enumerate()
        .map(|(g, group)| {
            let (b, w, k) = (net.base_config.values()[g], net.wide_config.values()[g], shrunk_config.values()[g]);
            GroupRow {
                index: g,
                name: group.name.clone(),
                prunable: group.prunable,
                baseline: b,
                wide: w,
                floor: floors[g],
                kept: k,
                percent_of_wide: percent(k as f64, w as f64),
                percent_of_baseline: percent(k as f64, b as f64),
                kept_indices: kept_indices[g].clone(),
            }
        })
        .collect();
    let fixed_latents = net
        .latents
        .iter()
        .enumerate()
        .filter(|(_, l)| !matches!(l.kind, LatentKind::Group { .. }))
        .map(|(i, l)| FixedLatent { latent: i, kind: l.kind, length: l.len(), kept: l.len() })
        .collect();
    let report = ShrinkReport {
        schema_version: REPORT_SCHEMA_VERSION,
        arch: arch.name.clone(),
        criterion: params.criterion,
        seed: params.seed,
        beta: params.beta,
        m: params.m,
        rho: params.floors.rho,
        tau: params.floors.tau,
        input_hw: params.input_hw,
        budget_flops: budget.target_flops,
        threshold: found.threshold.is_finite().then_some(found.threshold),
        baseline_config: net.base_config.clone(),
        wide_config: net.wide_config.clone(),
        shrunk_config: shrunk_config.clone(),
        groups,
        fixed_latents,
        baseline: Cost { flops: base_cost.total_flops, params: base_cost.total_params },
        wide: Cost { flops: wide_cost.total_flops, params: wide_cost.total_params },
        shrunk: Cost { flops: found.flops, params: found.params },
        flops_ratio: percent(found.flops as f64, base_cost.total_flops as f64),
        params_ratio: percent(found.params as f64, base_cost.total_params as f64),
        scoring_batch: batch.len(),
        forward_passes: saliency.forward_passes,
        backward_passes: saliency.backward_passes,
        search_evaluations: found.evaluations,
        witness: found.witness,
    };
    Ok((report, shrunk_net))
}

fn percent(a: f64, b: f64) -> f64 {
    100.0 * a / b
}
