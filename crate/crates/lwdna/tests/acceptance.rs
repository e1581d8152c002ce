//! The ten acceptance criteria, one PASS/FAIL line each.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use lwdna::checkpoint;
use lwdna::compare::compare_run;
use lwdna::data::{normalize_pair, synth_dataset, Dataset, RandomBatches, SynthSpec};
use lwdna::report::to_json;
use lwdna::train::{train, KdConfig, TrainProtocol};
use lwdna_core::arch::{ArchSpec, ChannelConfig, ChannelGroup, Node};
use lwdna_core::complexity::{self, model_cost};
use lwdna_core::hypernet::{GradTargets, HyperNet, LatentKind};
use lwdna_core::network::NodeParams;
use lwdna_core::rng::{self, Rng};
use lwdna_core::shrink::{
    score_gradients, search_threshold, shrink_pipeline, Batch, BatchSource, Budget, BudgetSpec, Criterion, Floors,
    ShrinkParams, Witness,
};
use lwdna_core::tape::{BnMode, Tape};
use lwdna_core::{zoo, Error, Network, Tensor};
use rand::Rng as _;

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng::normal_vec(rng, n, 1.0)).unwrap()
}

fn random_batch(rng: &mut Rng, n: usize, c: usize, hw: usize, classes: usize) -> Batch {
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(randn(rng, &[n, c, hw, hw]), labels).unwrap()
}

/// Bias-free conv+ReLU chain, optional BN, pooled linear head.
fn chain(input_channels: usize, widths: &[usize], bn: bool, classes: usize) -> ArchSpec {
    let mut nodes = vec![Node::Input];
    let mut groups = Vec::new();
    let mut prev = 0;
    for (g, &w) in widths.iter().enumerate() {
        groups.push(ChannelGroup { name: format!("conv{}", g + 1), width: w, prunable: true });
        nodes.push(Node::Conv { input: prev, group: g, kernel: 3, stride: 1, padding: 1, bias: false });
        if bn {
            nodes.push(Node::BatchNorm { input: nodes.len() - 1 });
        }
        nodes.push(Node::Relu { input: nodes.len() - 1 });
        prev = nodes.len() - 1;
    }
    nodes.push(Node::GlobalAvgPool { input: prev });
    nodes.push(Node::Linear { input: nodes.len() - 1, out_features: classes, bias: true });
    ArchSpec { name: "chain".into(), input_channels, groups, nodes }
}

fn within(got: f64, want: f64, rel: f64) -> bool {
    (got - want).abs() / want <= rel
}

fn golden_costs() -> Outcome {
    let start = Instant::now();
    let mut lines = Vec::new();
    for (name, gflops, mparams) in [("resnet56", 0.1274, 0.856), ("densenet40", 0.2901, 1.059)] {
        let arch = zoo::build(name, 10, 3, (32, 32)).unwrap();
        let c = model_cost(&arch, &arch.default_config(), (32, 32)).unwrap();
        let (f, p) = (c.total_flops as f64 / 1e9, c.total_params as f64 / 1e6);
        check(within(f, gflops, 0.01), format!("{name} {f:.4} GFLOPs vs {gflops}"))?;
        check(within(p, mparams, 0.01), format!("{name} {p:.3} M params vs {mparams}"))?;
        lines.push(format!("{name} {f:.4} G / {p:.3} M"));
    }
    let t = start.elapsed();
    check(t < Duration::from_secs(1), format!("took {t:?}"))?;
    Ok(format!("{} in {t:.2?}", lines.join(", ")))
}

fn ce_at(net: &HyperNet, b: &Batch) -> f64 {
    let logits = net.logits(&b.images, BnMode::Eval).unwrap();
    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let ce = tape.cross_entropy(l, &b.labels).unwrap();
    tape.value(ce).item()
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let h = 1e-5;
    let (mut checked, mut worst, mut max_params) = (0, 0.0f64, 0);
    let mut seed = 0;
    while checked < 200 {
        let arch = chain(2, &[5, 4], true, 3);
        let net = HyperNet::init(&arch, 2.0, 4, seed).unwrap();
        max_params = max_params.max(net.num_params());
        check(net.num_params() <= 5000, format!("toy has {} parameters", net.num_params()))?;
        let mut rng = rng::stream(seed, 3);
        let b = random_batch(&mut rng, 4, 2, 5, 3);
        let mut tape = Tape::new();
        let x = tape.constant(b.images.clone());
        let mut scratch = net.clone();
        let f = scratch.forward(&mut tape, x, BnMode::Eval, GradTargets::LATENTS).unwrap();
        let loss = tape.cross_entropy(f.logits, &b.labels).unwrap();
        tape.backward(loss).unwrap();
        for id in (0..net.latents.len()).filter(|&i| net.latents[i].trainable) {
            let grad = tape.grad(f.latents[id]).unwrap().to_vec();
            for (e, &g) in grad.iter().enumerate() {
                let mut plus = net.clone();
                plus.latents[id].values.data_mut()[e] += h;
                let mut minus = net.clone();
                minus.latents[id].values.data_mut()[e] -= h;
                let fd = (ce_at(&plus, &b) - ce_at(&minus, &b)) / (2.0 * h);
                let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
                check(rel <= 1e-4, format!("seed {seed} latent {id}[{e}]: {g} vs {fd}"))?;
                checked += 1;
            }
        }
        seed += 1;
    }
    let t = start.elapsed();
    check(t < Duration::from_secs(30), format!("took {t:?}"))?;
    Ok(format!("{checked} elements, {max_params} params, worst rel {worst:.1e}, {t:.2?}"))
}

fn masked_shrunk_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    for t in 0..20u64 {
        let mut rng = rng::stream(t, 77);
        let widths: Vec<usize> = (0..3).map(|_| rng.random_range(2..7)).collect();
        let arch = chain(3, &widths, false, 4);
        let mut wide = HyperNet::init(&arch, 2.0, 4, t).unwrap();
        let masks: Vec<Vec<bool>> = wide
            .wide_config
            .values()
            .iter()
            .map(|&w| {
                let mut m: Vec<bool> = (0..w).map(|_| rng.random_bool(0.6)).collect();
                if !m.contains(&true) {
                    m[rng.random_range(0..w)] = true;
                }
                m
            })
            .collect();
        let (_, shrunk) = wide.materialize_shrunk(&masks).unwrap();
        wide.apply_masks(&masks).unwrap();
        for _ in 0..16 {
            let x = randn(&mut rng, &[1, 3, 6, 6]);
            let d = wide.logits(&x, BnMode::Eval).unwrap().max_abs_diff(&shrunk.logits(&x).unwrap());
            worst = worst.max(d);
            check(d <= 1e-10, format!("mask {t}: diff {d}"))?;
        }
    }
    Ok(format!("20 masks x 16 inputs, max diff {worst:.1e}"))
}

/// Longest prefix of the (score desc, index asc) order covering every
/// element with score ≥ t, padded to the floor.
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

fn count(masks: &[Vec<bool>]) -> ChannelConfig {
    ChannelConfig(masks.iter().map(|m| m.iter().filter(|&&k| k).count()).collect())
}

/// Try every score as a threshold and keep the costliest feasible result.
fn scan_oracle(scores: &[Vec<f64>], floors: &[usize], arch: &ArchSpec, budget: u64, hw: (usize, usize)) -> Option<Vec<Vec<bool>>> {
    let mut thresholds: Vec<f64> = scores.iter().flatten().copied().collect();
    thresholds.extend([0.0, f64::INFINITY]);
    let mut best: Option<(Vec<Vec<bool>>, u64)> = None;
    for t in thresholds {
        let masks: Vec<Vec<bool>> = scores.iter().zip(floors).map(|(s, &f)| keep_oracle(s, t, f)).collect();
        let f = complexity::flops(arch, &count(&masks), hw).unwrap();
        if f <= budget && best.as_ref().is_none_or(|(_, bf)| f > *bf) {
            best = Some((masks, f));
        }
    }
    best.map(|(m, _)| m)
}

fn pruned_max(scores: &[Vec<f64>], masks: &[Vec<bool>]) -> f64 {
    scores
        .iter()
        .zip(masks)
        .flat_map(|(s, m)| s.iter().zip(m).filter(|(_, &k)| !k).map(|(v, _)| *v))
        .fold(f64::NEG_INFINITY, f64::max)
}

fn search_oracle() -> Outcome {
    let hw = (6, 6);
    let mut kinds = [0usize; 3];
    for inst in 0..100u64 {
        let mut rng = rng::stream(inst, 11);
        let widths: Vec<usize> = (0..4).map(|_| rng.random_range(2..9)).collect();
        let arch = chain(2, &widths, false, 3);
        let wide = arch.default_config();
        let (r, q) = (rng.random_range(1..=20usize), rng.random_range(1..=20usize));
        let floors = Floors::new(r as f64 / 20.0, q as f64 / 20.0).unwrap();
        let ceil20 = |p: usize, w: usize| (p * w).div_ceil(20).max(1);
        let mut floor_counts: Vec<usize> = widths.iter().map(|&w| ceil20(r, w)).collect();
        floor_counts[3] = floor_counts[3].max(ceil20(q, widths[3]));
        let scores: Vec<Vec<f64>> =
            widths.iter().map(|&w| (0..w).map(|_| rng.random_range(0..12) as f64 / 4.0).collect()).collect();
        let floor_flops = complexity::flops(&arch, &ChannelConfig(floor_counts.clone()), hw).unwrap();
        let full = complexity::flops(&arch, &wide, hw).unwrap();
        let budget = rng.random_range(floor_flops..=full + full / 10);

        let oracle = scan_oracle(&scores, &floor_counts, &arch, budget, hw).ok_or(format!("instance {inst}: oracle infeasible"))?;
        let res = search_threshold(&scores, Budget { target_flops: budget }, &floors, &arch, &wide, hw)
            .map_err(|e| format!("instance {inst}: {e}"))?;
        check(res.masks.groups == oracle, format!("instance {inst}: masks differ from the scan"))?;
        check(res.flops <= budget, format!("instance {inst}: {} > {budget}", res.flops))?;
        let g = &res.masks.groups;
        match &res.witness {
            Witness::KeepAll => {
                kinds[0] += 1;
                check(g.iter().flatten().all(|&k| k), format!("instance {inst}: keep-all witness with pruned elements"))?
            }
            Witness::AddBackExceeds { group, index, flops } => {
                kinds[1] += 1;
                let mut restored = g.clone();
                restored[*group][*index] = true;
                let f = complexity::flops(&arch, &count(&restored), hw).unwrap();
                check(!g[*group][*index] && f == *flops && f > budget, format!("instance {inst}: bad add-back witness"))?;
                check(scores[*group][*index] == pruned_max(&scores, g), format!("instance {inst}: witness not the best pruned"))?;
            }
            Witness::Tie { elements, flops } => {
                kinds[2] += 1;
                let s = scores[elements[0].0][elements[0].1];
                let mut restored = g.clone();
                for &(gi, i) in elements {
                    restored[gi][i] = true;
                }
                let f = complexity::flops(&arch, &count(&restored), hw).unwrap();
                check(
                    elements.len() > 1 && f == *flops && f > budget && s == pruned_max(&scores, g),
                    format!("instance {inst}: bad tie witness"),
                )?;
                check(elements.iter().all(|&(gi, i)| scores[gi][i] == s && !g[gi][i]), format!("instance {inst}: tie members"))?;
            }
        }
    }
    Ok(format!("100 instances; witnesses keep-all {} / add-back {} / tie {}", kinds[0], kinds[1], kinds[2]))
}

fn synth(classes: usize, size: usize, train: usize, test: usize, separation: f64) -> (Dataset, Dataset) {
    let spec = SynthSpec { classes, channels: 3, size, train, test, separation, blobs: 3 };
    let (mut a, mut b) = synth_dataset(&spec, 0).unwrap();
    normalize_pair(&mut a, &mut b).unwrap();
    (a, b)
}

fn linear_in_features(net: &Network) -> usize {
    net.params
        .iter()
        .find_map(|p| match p {
            NodeParams::Linear { weight, .. } => Some(weight.shape()[1]),
            _ => None,
        })
        .unwrap()
}

fn floor_enforcement() -> Outcome {
    let (data, _) = synth(5, 8, 64, 1, 1.0);
    let mut kept_dw = 0;
    for run in 0..100u64 {
        let mut rng = rng::stream(run, 50);
        let name = ["vgg-tiny", "resnet-tiny", "mobile-tiny"][run as usize % 3];
        let arch = zoo::build(name, 5, 3, (8, 8)).unwrap();
        let beta = [1.0, 1.5, 2.0, 2.5, 3.0][rng.random_range(0..5)];
        let wide_config = arch.widen(&arch.default_config(), beta).unwrap();
        let wide_flops = complexity::flops(&arch, &wide_config, (8, 8)).unwrap();
        let budget = rng.random_range(wide_flops / 20..=wide_flops);
        let params = ShrinkParams {
            beta,
            m: 4,
            floors: Floors::new(0.4, 0.45).unwrap(),
            budget: BudgetSpec::Absolute(budget),
            criterion: Criterion::Gradient,
            seed: run,
            input_hw: (8, 8),
        };
        let mut src = RandomBatches::new(&data, 8, run);
        let (rep, shrunk) = match shrink_pipeline(&arch, &params, &mut src) {
            Ok(r) => r,
            Err(Error::InfeasibleBudget { floor_flops, .. }) => {
                check(floor_flops > budget, format!("run {run}: infeasible at a reachable budget"))?;
                let params = ShrinkParams { budget: BudgetSpec::Absolute(floor_flops), ..params };
                let mut src = RandomBatches::new(&data, 8, run);
                shrink_pipeline(&arch, &params, &mut src).map_err(|e| format!("run {run}: {e}"))?
            }
            Err(e) => return Err(format!("run {run}: {e}")),
        };
        for (g, (&w, &k)) in wide_config.values().iter().zip(rep.shrunk_config.values()).enumerate() {
            let need = (2 * w).div_ceil(5).max(1);
            check(k >= need, format!("run {run} {name} group {g}: kept {k} of {w}, floor {need}"))?;
        }
        let wide_net = Network::init(&arch, &wide_config, 0).unwrap();
        let (win, sin) = (linear_in_features(&wide_net), linear_in_features(&shrunk));
        check(20 * sin >= 9 * win, format!("run {run}: linear keeps {sin} of {win} inputs"))?;
        for l in &rep.fixed_latents {
            if matches!(l.kind, LatentKind::DepthwiseInput { .. }) {
                check(l.kept == l.length, format!("run {run}: depthwise latent pruned"))?;
                kept_dw += 1;
            }
        }
        for (id, node) in arch.nodes.iter().enumerate() {
            if let (Node::Depthwise { .. }, NodeParams::Conv { weight, .. }) = (node, &shrunk.params[id]) {
                check(weight.shape()[1] == 1, format!("run {run}: depthwise node {id} input dim {}", weight.shape()[1]))?;
            }
        }
    }
    Ok(format!("100 runs, {kept_dw} depthwise latents intact"))
}

struct Counted {
    rng: Rng,
    calls: usize,
}

impl BatchSource for Counted {
    fn next_batch(&mut self) -> lwdna_core::Result<Batch> {
        self.calls += 1;
        Ok(random_batch(&mut self.rng, 8, 3, 8, 4))
    }
}

fn single_batch_cost() -> Outcome {
    let arch = zoo::build("vgg-tiny", 4, 3, (8, 8)).unwrap();
    let net = HyperNet::init(&arch, 2.0, 4, 0).unwrap();
    let s = score_gradients(&net, &random_batch(&mut rng::stream(0, 0), 8, 3, 8, 4), 1.0).unwrap();
    check((s.forward_passes, s.backward_passes) == (1, 1), format!("scoring ran {}/{}", s.forward_passes, s.backward_passes))?;
    let params = ShrinkParams {
        beta: 2.0,
        m: 4,
        floors: Floors::default(),
        budget: BudgetSpec::Fraction(0.9),
        criterion: Criterion::Gradient,
        seed: 1,
        input_hw: (8, 8),
    };
    let mut src = Counted { rng: rng::stream(1, 0), calls: 0 };
    let (rep, _) = shrink_pipeline(&arch, &params, &mut src).unwrap();
    check(src.calls == 1, format!("pipeline drew {} batches", src.calls))?;
    check((rep.forward_passes, rep.backward_passes) == (1, 1), "pipeline pass counters")?;
    Ok("1 batch, 1 forward, 1 backward".into())
}

fn short_protocol(epochs: usize) -> TrainProtocol {
    TrainProtocol { epochs, batch_size: 32, ..TrainProtocol::default() }
}

fn determinism() -> Outcome {
    let (a, b) = synth(4, 8, 128, 64, 0.5);
    let arch = zoo::build("vgg-tiny", 4, 3, (8, 8)).unwrap();
    let params = ShrinkParams {
        beta: 2.0,
        m: 8,
        floors: Floors::default(),
        budget: BudgetSpec::Fraction(0.8),
        criterion: Criterion::Gradient,
        seed: 42,
        input_hw: (8, 8),
    };
    let report = || {
        let mut src = RandomBatches::new(&a, 32, 42);
        to_json(&shrink_pipeline(&arch, &params, &mut src).unwrap().0).unwrap()
    };
    check(report().as_bytes() == report().as_bytes(), "shrink reports differ")?;
    let run = || compare_run(&arch, &short_protocol(2), &params, &a, &b, None).unwrap().summary;
    let (x, y) = (run(), run());
    check(x.baseline.top1_err.to_bits() == y.baseline.top1_err.to_bits(), "baseline errors differ")?;
    check(x.lwdna.top1_err.to_bits() == y.lwdna.top1_err.to_bits(), "shrunk errors differ")?;
    Ok(format!("reports identical; errors {:.2} / {:.2} on both runs", x.baseline.top1_err, x.lwdna.top1_err))
}

fn desk_experiment() -> Outcome {
    let start = Instant::now();
    let spec = SynthSpec::default();
    let (mut a, mut b) = synth_dataset(&spec, 0).unwrap();
    normalize_pair(&mut a, &mut b).unwrap();
    let arch = zoo::build("vgg-tiny", spec.classes, spec.channels, (spec.size, spec.size)).unwrap();
    let protocol = TrainProtocol { epochs: 10, ..TrainProtocol::default() };
    let params = ShrinkParams {
        beta: 2.0,
        m: 8,
        floors: Floors::default(),
        budget: BudgetSpec::Fraction(0.95),
        criterion: Criterion::Gradient,
        seed: 0,
        input_hw: (spec.size, spec.size),
    };
    let c = compare_run(&arch, &protocol, &params, &a, &b, None).map_err(|e| e.to_string())?;
    let t = start.elapsed();
    let s = &c.summary;
    check(t < Duration::from_secs(15 * 60), format!("took {t:?}"))?;
    check(s.lwdna.flops * 100 <= s.baseline.flops * 95, format!("shrunk at {:.2}% FLOPs", s.flops_ratio))?;
    check(s.baseline.top1_err <= 10.0, format!("baseline error {:.2}%", s.baseline.top1_err))?;
    check(s.lwdna.top1_err <= 10.0, format!("shrunk error {:.2}%", s.lwdna.top1_err))?;
    let order = match s.lwdna.top1_err.partial_cmp(&s.baseline.top1_err).unwrap() {
        std::cmp::Ordering::Less => "shrunk better",
        std::cmp::Ordering::Equal => "tied",
        std::cmp::Ordering::Greater => "baseline better",
    };
    Ok(format!(
        "config {:?} at {:.2}% FLOPs; err baseline {:.2}% vs shrunk {:.2}% ({order}); {t:.1?}",
        s.lwdna.config.values(),
        s.flops_ratio,
        s.baseline.top1_err,
        s.lwdna.top1_err
    ))
}

fn kd_reduction() -> Outcome {
    let mut rng = rng::stream(9, 0);
    for _ in 0..50 {
        let (n, k) = (rng.random_range(1..6), rng.random_range(2..8));
        let student = randn(&mut rng, &[n, k]);
        let teacher = randn(&mut rng, &[n, k]);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let t = rng.random_range(1.0..6.0);
        let mut tape = Tape::new();
        let s = tape.constant(student.clone());
        let ce = tape.cross_entropy(s, &labels).unwrap();
        let ce = tape.value(ce).item();
        let kd0 = tape.kd_loss(s, &teacher, &labels, 0.0, t).unwrap();
        check(tape.value(kd0).item().to_bits() == ce.to_bits(), "λ=0 differs from cross-entropy")?;
        let lambda = rng.random::<f64>();
        let same = tape.kd_loss(s, &student, &labels, lambda, t).unwrap();
        check(tape.value(same).item().to_bits() == ((1.0 - lambda) * ce).to_bits(), "self-distillation KL is not zero")?;
    }

    let dir = tempfile::tempdir().unwrap();
    let (a, b) = synth(3, 8, 96, 32, 1.0);
    let arch = zoo::build("vgg-tiny", 3, 3, (8, 8)).unwrap();
    let mut teacher = Network::init(&arch, &arch.default_config(), 7).unwrap();
    train(&mut teacher, &a, &b, &short_protocol(1), None, None).unwrap();
    let path = dir.path().join("teacher.ckpt");
    checkpoint::save(&teacher, &path).unwrap();
    let protocol = TrainProtocol { kd: Some(KdConfig { lambda: 0.4, temperature: 4.0, teacher: path }), ..short_protocol(2) };
    let params = ShrinkParams {
        beta: 2.0,
        m: 4,
        floors: Floors::default(),
        budget: BudgetSpec::Fraction(0.9),
        criterion: Criterion::Gradient,
        seed: 0,
        input_hw: (8, 8),
    };
    let c = compare_run(&arch, &protocol, &params, &a, &b, None).map_err(|e| e.to_string())?;
    check(c.baseline_log.rows.iter().chain(&c.lwdna_log.rows).all(|r| r.train_loss.is_finite()), "non-finite KD loss")?;
    Ok(format!("bitwise reductions hold; λ=0.4 T=4 run errs {:.2} / {:.2}", c.summary.baseline.top1_err, c.summary.lwdna.top1_err))
}

fn loss_scaling() -> Outcome {
    let hw = (6, 6);
    for inst in 0..20u64 {
        let mut rng = rng::stream(inst, 14);
        let widths: Vec<usize> = (0..3).map(|_| rng.random_range(3..7)).collect();
        let arch = chain(2, &widths, true, 3);
        let net = HyperNet::init(&arch, 2.0, 4, inst).unwrap();
        let b = random_batch(&mut rng, 4, 2, hw.0, 3);
        let s1 = score_gradients(&net, &b, 1.0).unwrap().group_scores(&net);
        let s10 = score_gradients(&net, &b, 10.0).unwrap().group_scores(&net);
        let floors = Floors::default();
        let counts = floors.floor_counts(&arch, &net.wide_config).unwrap();
        let floor_flops = complexity::flops(&arch, &ChannelConfig(counts), hw).unwrap();
        let wide = complexity::flops(&arch, &net.wide_config, hw).unwrap();
        let budget = Budget { target_flops: rng.random_range(floor_flops..wide) };
        let x = search_threshold(&s1, budget, &floors, &arch, &net.wide_config, hw).unwrap();
        let y = search_threshold(&s10, budget, &floors, &arch, &net.wide_config, hw).unwrap();
        check(x.masks == y.masks, format!("instance {inst}: masks changed"))?;
    }
    Ok("20 instances, masks unchanged".into())
}

#[test]
fn acceptance() {
    let criteria: [Check; 10] = [
        ("complexity golden numbers", golden_costs),
        ("latent gradient fidelity", gradient_fidelity),
        ("masked/shrunk equivalence", masked_shrunk_equivalence),
        ("threshold search oracle", search_oracle),
        ("floor enforcement", floor_enforcement),
        ("single-batch scoring cost", single_batch_cost),
        ("determinism", determinism),
        ("desk experiment", desk_experiment),
        ("distillation reduction", kd_reduction),
        ("loss-scaling invariance", loss_scaling),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
