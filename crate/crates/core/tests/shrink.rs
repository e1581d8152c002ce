//! Saliency scoring and threshold search against independent oracles.

mod common;

use common::{chain, randn};
use lwdna_core::arch::{ArchSpec, ChannelConfig, ChannelGroup, Node};
use lwdna_core::complexity;
use lwdna_core::hypernet::HyperNet;
use lwdna_core::rng::{self, Rng};
use lwdna_core::shrink::{
    build_keep_masks, score_gradients, score_magnitude, search_threshold, shrink_pipeline, Batch, BatchSource, Budget,
    BudgetSpec, Criterion, Floors, ShrinkParams, Witness,
};
use lwdna_core::tape::{BnMode, Tape};
use lwdna_core::{zoo, Error, Tensor};
use rand::Rng as _;

fn batch(rng: &mut Rng, n: usize, c: usize, hw: usize, classes: usize) -> Batch {
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(randn(rng, &[n, c, hw, hw]), labels).unwrap()
}

/// Keep the longest prefix of the (score desc, index asc) order that
/// contains every element with score ≥ t, padded to the floor.
fn keep_oracle(scores: &[f64], t: f64, floor: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let above = scores.iter().filter(|&&s| s >= t).count();
    let mut keep = vec![false; scores.len()];
    for &i in order.iter().take(above.max(floor)) {
        keep[i] = true;
    }
    keep
}

fn brute_force(
    scores: &[Vec<f64>],
    floors: &[usize],
    arch: &ArchSpec,
    budget: u64,
    hw: (usize, usize),
) -> Option<(Vec<Vec<bool>>, u64)> {
    let mut thresholds: Vec<f64> = scores.iter().flatten().copied().collect();
    thresholds.push(0.0);
    thresholds.push(f64::INFINITY);
    let mut best: Option<(Vec<Vec<bool>>, u64)> = None;
    for t in thresholds {
        let masks: Vec<Vec<bool>> = scores.iter().zip(floors).map(|(s, &f)| keep_oracle(s, t, f)).collect();
        let config = ChannelConfig(masks.iter().map(|m| m.iter().filter(|&&k| k).count()).collect());
        let f = complexity::flops(arch, &config, hw).unwrap();
        if f <= budget && best.as_ref().is_none_or(|(_, bf)| f > *bf) {
            best = Some((masks, f));
        }
    }
    best
}

/// `ceil(r/20 · w)` in integers.
fn int_floor(r: usize, w: usize) -> usize {
    (r * w).div_ceil(20).max(1)
}

#[test]
fn search_matches_exhaustive_scan() {
    let hw = (6, 6);
    for inst in 0..100u64 {
        let mut rng = rng::stream(inst, 11);
        let widths: Vec<usize> = (0..4).map(|_| rng.random_range(2..9)).collect();
        let arch = chain(2, &widths, 3, false, 3);
        let wide = arch.default_config();
        let (r, q) = (rng.random_range(1..=20), rng.random_range(1..=20));
        let floors = Floors::new(r as f64 / 20.0, q as f64 / 20.0).unwrap();
        let mut floor_counts: Vec<usize> = widths.iter().map(|&w| int_floor(r, w)).collect();
        floor_counts[3] = floor_counts[3].max(int_floor(q, widths[3]));
        assert_eq!(floors.floor_counts(&arch, &wide).unwrap(), floor_counts);
        // coarse scores so that ties are common
        let scores: Vec<Vec<f64>> =
            widths.iter().map(|&w| (0..w).map(|_| rng.random_range(0..12) as f64 / 4.0).collect()).collect();
        let full = complexity::flops(&arch, &wide, hw).unwrap();
        let budget = rng.random_range(full / 4..=full + full / 10);

        let oracle = brute_force(&scores, &floor_counts, &arch, budget, hw);
        let found = search_threshold(&scores, Budget { target_flops: budget }, &floors, &arch, &wide, hw);
        match (oracle, found) {
            (None, Err(Error::InfeasibleBudget { floor_flops, .. })) => assert!(floor_flops > budget),
            (Some((masks, flops)), Ok(res)) => {
                assert_eq!(res.masks.groups, masks, "instance {inst}");
                assert_eq!(res.flops, flops);
                assert!(res.flops <= budget);
                match &res.witness {
                    Witness::KeepAll => assert!(res.masks.groups.iter().flatten().all(|&k| k)),
                    Witness::AddBackExceeds { group, index, flops } => {
                        assert!(!res.masks.groups[*group][*index]);
                        assert!(*flops > budget);
                        let max_pruned = pruned_max(&scores, &res.masks.groups);
                        assert_eq!(scores[*group][*index], max_pruned);
                    }
                    Witness::Tie { elements, flops } => {
                        assert!(elements.len() > 1 && *flops > budget);
                        let s = scores[elements[0].0][elements[0].1];
                        assert!(elements.iter().all(|&(g, i)| scores[g][i] == s && !res.masks.groups[g][i]));
                        assert_eq!(s, pruned_max(&scores, &res.masks.groups));
                    }
                }
            }
            (o, f) => panic!("instance {inst}: oracle {o:?} vs search {f:?}"),
        }
    }
}

fn pruned_max(scores: &[Vec<f64>], masks: &[Vec<bool>]) -> f64 {
    scores
        .iter()
        .zip(masks)
        .flat_map(|(s, m)| s.iter().zip(m).filter(|(_, &k)| !k).map(|(v, _)| *v))
        .fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn keep_masks_match_sort_oracle() {
    for inst in 0..100u64 {
        let mut rng = rng::stream(inst, 12);
        let w = rng.random_range(1..20);
        let scores: Vec<f64> = (0..w).map(|_| rng.random::<f64>()).collect();
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let t = sorted[rng.random_range(0..w)];
        let floor = rng.random_range(1..=w);
        let m = build_keep_masks(std::slice::from_ref(&scores), t, &[floor], &[true]).unwrap();
        assert_eq!(m.groups[0], keep_oracle(&scores, t, floor));
    }
}

#[test]
fn budget_examples() {
    let arch = chain(2, &[4, 6, 8, 5], 3, false, 3);
    let hw = (6, 6);
    let wide = arch.default_config();
    let scores: Vec<Vec<f64>> = wide.values().iter().map(|&w| (0..w).map(|i| i as f64 + 1.0).collect()).collect();
    let full = complexity::flops(&arch, &wide, hw).unwrap();
    let res = search_threshold(&scores, Budget { target_flops: full }, &Floors::default(), &arch, &wide, hw).unwrap();
    assert_eq!(res.threshold, 0.0);
    assert_eq!(res.config, wide);
    assert_eq!(res.witness, Witness::KeepAll);
    let err = search_threshold(&scores, Budget { target_flops: 10 }, &Floors::default(), &arch, &wide, hw).unwrap_err();
    assert!(matches!(err, Error::InfeasibleBudget { target: 10, .. }));
}

#[test]
fn raising_threshold_never_grows_a_layer() {
    for inst in 0..50u64 {
        let mut rng = rng::stream(inst, 13);
        let scores: Vec<Vec<f64>> = (0..4).map(|_| (0..rng.random_range(1..10)).map(|_| rng.random::<f64>()).collect()).collect();
        let floors: Vec<usize> = scores.iter().map(|s| rng.random_range(1..=s.len())).collect();
        let prunable = vec![true; 4];
        let mut prev: Option<Vec<usize>> = None;
        for t in [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 2.0] {
            let counts = build_keep_masks(&scores, t, &floors, &prunable).unwrap().counts();
            if let Some(p) = &prev {
                assert!(counts.iter().zip(p).all(|(a, b)| a <= b));
            }
            for (c, f) in counts.iter().zip(&floors) {
                assert!(c >= f);
            }
            prev = Some(counts);
        }
    }
}

/// input → conv a → relu → ×0 ┐
///       → conv b → relu ─────┴ concat → pool → linear
fn dead_branch() -> ArchSpec {
    let g = |n: &str, w| ChannelGroup { name: n.into(), width: w, prunable: true };
    ArchSpec {
        name: "dead".into(),
        input_channels: 2,
        groups: vec![g("a", 3), g("b", 4)],
        nodes: vec![
            Node::Input,
            Node::Conv { input: 0, group: 0, kernel: 3, stride: 1, padding: 1, bias: false },
            Node::Relu { input: 1 },
            Node::Scale { input: 2, factor: 0.0 },
            Node::Conv { input: 0, group: 1, kernel: 3, stride: 1, padding: 1, bias: false },
            Node::Relu { input: 4 },
            Node::Concat { inputs: vec![3, 5] },
            Node::GlobalAvgPool { input: 6 },
            Node::Linear { input: 7, out_features: 3, bias: true },
        ],
    }
}

#[test]
fn dead_path_scores_zero() {
    let arch = dead_branch();
    let net = HyperNet::init(&arch, 1.0, 4, 2).unwrap();
    let mut rng = rng::stream(2, 0);
    let s = score_gradients(&net, &batch(&mut rng, 4, 2, 5, 3), 1.0).unwrap();
    assert!(s.scores[net.group_latent(0)].iter().all(|&v| v == 0.0));
    assert!(s.scores[net.group_latent(1)].iter().any(|&v| v > 0.0));
}

#[test]
fn symmetric_channels_score_equally() {
    let arch = chain(2, &[4, 3], 3, true, 3);
    let mut net = HyperNet::init(&arch, 1.0, 4, 8).unwrap();
    let g = net.group_latent(0);
    let z = net.latents[g].values.data()[0];
    net.latents[g].values.data_mut()[1] = z;
    // layer 0: copy row 0 onto row 1
    let (c0, m) = (2, 4);
    let row_e = c0 * m;
    let row_p = c0 * 9 * m;
    let l0 = &mut net.layers[0];
    let e0: Vec<f64> = l0.embed.data()[..row_e].to_vec();
    l0.embed.data_mut()[row_e..2 * row_e].copy_from_slice(&e0);
    let p0: Vec<f64> = l0.project.data()[..row_p].to_vec();
    l0.project.data_mut()[row_p..2 * row_p].copy_from_slice(&p0);
    // layer 1: copy column 0 onto column 1
    let l1 = &mut net.layers[1];
    for o in 0..3 {
        let (b0, b1) = ((o * 4) * m, (o * 4 + 1) * m);
        let e: Vec<f64> = l1.embed.data()[b0..b0 + m].to_vec();
        l1.embed.data_mut()[b1..b1 + m].copy_from_slice(&e);
        let (p0, p1) = ((o * 4) * 9 * m, (o * 4 + 1) * 9 * m);
        let p: Vec<f64> = l1.project.data()[p0..p0 + 9 * m].to_vec();
        l1.project.data_mut()[p1..p1 + 9 * m].copy_from_slice(&p);
    }
    let mut rng = rng::stream(8, 0);
    let s = score_gradients(&net, &batch(&mut rng, 3, 2, 5, 3), 1.0).unwrap();
    let (a, b) = (s.scores[g][0], s.scores[g][1]);
    assert!(a > 0.0);
    assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()), "{a} vs {b}");
}

fn loss_at(net: &HyperNet, b: &Batch) -> f64 {
    let logits = net.logits(&b.images, BnMode::Eval).unwrap();
    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let ce = tape.cross_entropy(l, &b.labels).unwrap();
    tape.value(ce).item()
}

#[test]
fn gradient_scores_match_finite_differences() {
    let h = 1e-5;
    let mut checked = 0;
    for seed in 0..3 {
        let arch = chain(2, &[5, 4], 3, true, 3);
        let net = HyperNet::init(&arch, 2.0, 4, seed).unwrap();
        let mut rng = rng::stream(seed, 3);
        let b = batch(&mut rng, 4, 2, 5, 3);
        let s = score_gradients(&net, &b, 1.0).unwrap();
        for g in 0..2 {
            let id = net.group_latent(g);
            for e in 0..net.latents[id].len() {
                let mut plus = net.clone();
                plus.latents[id].values.data_mut()[e] += h;
                let mut minus = net.clone();
                minus.latents[id].values.data_mut()[e] -= h;
                let fd = ((loss_at(&plus, &b) - loss_at(&minus, &b)) / (2.0 * h)).abs();
                let a = s.scores[id][e];
                let rel = (a - fd).abs() / a.max(fd).max(1e-6);
                assert!(rel <= 1e-4, "latent {id}[{e}]: {a} vs {fd}");
                checked += 1;
            }
        }
    }
    assert!(checked >= 50);
}

#[test]
fn scoring_uses_one_forward_and_one_backward() {
    let arch = zoo::build("vgg-tiny", 4, 3, (8, 8)).unwrap();
    let net = HyperNet::init(&arch, 1.5, 2, 0).unwrap();
    let mut rng = rng::stream(0, 0);
    let s = score_gradients(&net, &batch(&mut rng, 2, 3, 8, 4), 1.0).unwrap();
    assert_eq!((s.forward_passes, s.backward_passes), (1, 1));
}

#[test]
fn empty_batch_is_rejected() {
    let arch = chain(2, &[3], 1, false, 2);
    let net = HyperNet::init(&arch, 1.0, 2, 0).unwrap();
    let b = Batch { images: Tensor::zeros(vec![0, 2, 3, 3]), labels: vec![] };
    assert_eq!(score_gradients(&net, &b, 1.0).unwrap_err(), Error::EmptyBatch);
}

#[test]
fn magnitude_scores_ignore_generators_and_follow_abs_order() {
    let arch = chain(2, &[6, 5], 3, false, 3);
    let net = HyperNet::init(&arch, 1.0, 3, 4).unwrap();
    let mut other = net.clone();
    for l in &mut other.layers {
        l.embed.data_mut().iter_mut().for_each(|v| *v *= -3.0);
    }
    let s = score_magnitude(&net);
    assert_eq!(s.scores, score_magnitude(&other).scores);
    for g in 0..2 {
        let id = net.group_latent(g);
        let z = net.latents[id].values.data();
        let argsort = |v: &[f64]| {
            let mut i: Vec<usize> = (0..v.len()).collect();
            i.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
            i
        };
        let abs: Vec<f64> = z.iter().map(|x| x.abs()).collect();
        assert_eq!(argsort(&s.scores[id]), argsort(&abs));
    }
}

#[test]
fn loss_scaling_leaves_masks_unchanged() {
    let hw = (6, 6);
    for inst in 0..20u64 {
        let mut rng = rng::stream(inst, 14);
        let widths: Vec<usize> = (0..3).map(|_| rng.random_range(3..7)).collect();
        let arch = chain(2, &widths, 3, true, 3);
        let net = HyperNet::init(&arch, 2.0, 4, inst).unwrap();
        let b = batch(&mut rng, 4, 2, hw.0, 3);
        let s1 = score_gradients(&net, &b, 1.0).unwrap().group_scores(&net);
        let s10 = score_gradients(&net, &b, 10.0).unwrap().group_scores(&net);
        let floors = Floors::default();
        let Err(Error::InfeasibleBudget { floor_flops, .. }) =
            search_threshold(&s1, Budget { target_flops: 0 }, &floors, &arch, &net.wide_config, hw)
        else {
            panic!("zero budget must be infeasible")
        };
        let wide = complexity::flops(&arch, &net.wide_config, hw).unwrap();
        let budget = Budget { target_flops: rng.random_range(floor_flops..wide) };
        let a = search_threshold(&s1, budget, &floors, &arch, &net.wide_config, hw).unwrap();
        let c = search_threshold(&s10, budget, &floors, &arch, &net.wide_config, hw).unwrap();
        assert_eq!(a.masks, c.masks, "instance {inst}");
    }
}

struct Counted {
    rng: Rng,
    calls: usize,
    hw: usize,
}

impl BatchSource for Counted {
    fn next_batch(&mut self) -> lwdna_core::Result<Batch> {
        self.calls += 1;
        Ok(batch(&mut self.rng, 4, 3, self.hw, 4))
    }
}

fn params(beta: f64, budget: BudgetSpec) -> ShrinkParams {
    ShrinkParams {
        beta,
        m: 4,
        floors: Floors::default(),
        budget,
        criterion: Criterion::Gradient,
        seed: 5,
        input_hw: (8, 8),
    }
}

#[test]
fn pipeline_identity_at_beta_one() {
    let arch = zoo::build("vgg-tiny", 4, 3, (8, 8)).unwrap();
    let mut src = Counted { rng: rng::stream(0, 0), calls: 0, hw: 8 };
    let (report, net) = shrink_pipeline(&arch, &params(1.0, BudgetSpec::Fraction(1.0)), &mut src).unwrap();
    assert_eq!(src.calls, 1);
    assert_eq!(report.shrunk_config, arch.default_config());
    assert_eq!(net.config, arch.default_config());
    assert_eq!((report.forward_passes, report.backward_passes), (1, 1));
}

#[test]
fn pipeline_keeps_depthwise_latents_and_meets_budget() {
    let arch = zoo::build("mobile-tiny", 4, 3, (8, 8)).unwrap();
    let mut src = Counted { rng: rng::stream(1, 0), calls: 0, hw: 8 };
    let (report, _) = shrink_pipeline(&arch, &params(2.0, BudgetSpec::Fraction(0.8)), &mut src).unwrap();
    assert_eq!(src.calls, 1);
    assert!(report.shrunk.flops <= report.budget_flops);
    let dw: Vec<_> = report
        .fixed_latents
        .iter()
        .filter(|l| matches!(l.kind, lwdna_core::hypernet::LatentKind::DepthwiseInput { .. }))
        .collect();
    assert_eq!(dw.len(), 4);
    assert!(dw.iter().all(|l| l.kept == l.length && l.length == 1));
    for row in &report.groups {
        assert!(row.kept >= row.floor);
    }
}
