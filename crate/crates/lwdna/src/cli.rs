//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use lwdna_core::complexity::{model_cost, ratio_report};
use lwdna_core::shrink::{shrink_pipeline, BudgetSpec, Criterion, Floors};
use lwdna_core::{zoo, ArchSpec, ChannelConfig, Network, ShrinkParams};

use crate::checkpoint;
use crate::compare::{compare_run, write_comparison};
use crate::data::{load_idx, normalize_pair, synth_dataset, Dataset, RandomBatches, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::report::{self, prepare_dir, read_shrink_report, write_json, write_shrink_outputs, write_text};
use crate::train::{evaluate, train, Augmentation, KdConfig, TrainProtocol};

#[derive(Debug, Parser)]
#[command(name = "lwdna", version, about = "Widen, reparameterize and single-shot shrink CNN channel configurations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score a widened network on one batch and shrink it to a FLOP budget.
    Shrink(ShrinkCmd),
    /// Train one configuration from scratch.
    Train(TrainCmd),
    /// Shrink, then train baseline and shrunk configurations under one protocol.
    Compare(CompareCmd),
    /// Print FLOPs and parameters of a configuration.
    Analyze(AnalyzeCmd),
    /// Evaluate a checkpoint.
    Eval(EvalCmd),
}

#[derive(Debug, Args)]
pub struct ArchArgs {
    /// Built-in architecture name.
    #[arg(long, conflicts_with = "arch_file", required_unless_present = "arch_file")]
    pub arch: Option<String>,
    /// Architecture graph as JSON.
    #[arg(long)]
    pub arch_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// `synth[:key=value,...]` or `idx:TRAIN_IMAGES,TRAIN_LABELS,TEST_IMAGES,TEST_LABELS`.
    #[arg(long, default_value = "synth")]
    pub data: String,
}

#[derive(Debug, Args)]
pub struct ShrinkArgs {
    #[arg(long, default_value_t = 2.0)]
    pub beta: f64,
    /// Hypernetwork embedding width.
    #[arg(long, default_value_t = lwdna_core::hypernet::DEFAULT_EMBEDDING)]
    pub m: usize,
    #[arg(long, default_value_t = 0.4)]
    pub rho: f64,
    #[arg(long, default_value_t = 0.45)]
    pub tau: f64,
    /// FLOP budget as a fraction of the baseline configuration.
    #[arg(long, default_value_t = 1.0, conflicts_with = "budget_flops")]
    pub budget: f64,
    /// Absolute FLOP budget.
    #[arg(long)]
    pub budget_flops: Option<u64>,
    #[arg(long, default_value = "gradient")]
    pub criterion: Criterion,
}

#[derive(Debug, Args)]
pub struct ProtocolArgs {
    /// Protocol JSON; the flags below override its fields.
    #[arg(long)]
    pub protocol: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Disable flip and pad-crop augmentation.
    #[arg(long)]
    pub no_augment: bool,
    /// Teacher checkpoint; enables distillation.
    #[arg(long)]
    pub kd_teacher: Option<PathBuf>,
    #[arg(long, default_value_t = 0.4)]
    pub kd_lambda: f64,
    #[arg(long, default_value_t = 4.0)]
    pub kd_temperature: f64,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ShrinkCmd {
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub shrink: ShrinkArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Scoring batch size.
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    #[command(flatten)]
    pub arch: ArchArgs,
    /// Comma-separated channel configuration; defaults to the baseline.
    #[arg(long, conflicts_with = "config_from")]
    pub config: Option<String>,
    /// Take the shrunk configuration of a shrink report.
    #[arg(long)]
    pub config_from: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub protocol: ProtocolArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct CompareCmd {
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub shrink: ShrinkArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub protocol: ProtocolArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct AnalyzeCmd {
    #[command(flatten)]
    pub arch: ArchArgs,
    /// Square input resolution.
    #[arg(long, default_value_t = 32)]
    pub input: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Configuration to compare against the baseline.
    #[arg(long, conflicts_with = "report")]
    pub config: Option<String>,
    /// Compare the shrunk configuration of a shrink report.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalCmd {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
}

/// Parse `synth[:k=v,...]` or `idx:a,b,c,d` and return normalized splits.
pub fn load_data(spec: &str) -> Result<(Dataset, Dataset)> {
    let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
    let (mut train, mut test) = match kind {
        "synth" => {
            let mut s = SynthSpec::default();
            let mut seed = 0u64;
            for kv in rest.split(',').filter(|p| !p.is_empty()) {
                let (k, v) = kv.split_once('=').ok_or_else(|| Error::Invalid(format!("expected key=value, got `{}`", kv)))?;
                let bad = |_| Error::Invalid(format!("bad value for `{}`: `{}`", k, v));
                match k {
                    "classes" => s.classes = v.parse().map_err(bad)?,
                    "channels" => s.channels = v.parse().map_err(bad)?,
                    "size" => s.size = v.parse().map_err(bad)?,
                    "train" => s.train = v.parse().map_err(bad)?,
                    "test" => s.test = v.parse().map_err(bad)?,
                    "blobs" => s.blobs = v.parse().map_err(bad)?,
                    "separation" => s.separation = v.parse().map_err(|_| Error::Invalid(format!("bad separation `{}`", v)))?,
                    "seed" => seed = v.parse().map_err(bad)?,
                    _ => return Err(Error::Invalid(format!("unknown synthetic data key `{}`", k))),
                }
            }
            synth_dataset(&s, seed)?
        }
        "idx" => {
            let parts: Vec<&str> = rest.split(',').collect();
            let [xi, yi, xt, yt] = parts[..] else {
                return Err(Error::Invalid("idx data needs four comma-separated paths".into()));
            };
            let mut train = load_idx(Path::new(xi), Path::new(yi), Split::Train)?;
            let mut test = load_idx(Path::new(xt), Path::new(yt), Split::Test)?;
            let classes = train.num_classes.max(test.num_classes);
            train.num_classes = classes;
            test.num_classes = classes;
            (train, test)
        }
        other => return Err(Error::Invalid(format!("unknown data source `{}`", other))),
    };
    normalize_pair(&mut train, &mut test)?;
    Ok((train, test))
}

fn resolve_arch(a: &ArchArgs, classes: usize, channels: usize, hw: (usize, usize)) -> Result<ArchSpec> {
    match (&a.arch, &a.arch_file) {
        (Some(name), _) => Ok(zoo::build(name, classes, channels, hw)?),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let arch: ArchSpec = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
            arch.validate()?;
            arch.shapes(&arch.default_config(), hw)?;
            Ok(arch)
        }
        (None, None) => Err(Error::Invalid("an architecture is required".into())),
    }
}

fn shrink_params(s: &ShrinkArgs, seed: u64, hw: (usize, usize)) -> Result<ShrinkParams> {
    let budget = match s.budget_flops {
        Some(f) => BudgetSpec::Absolute(f),
        None => BudgetSpec::Fraction(s.budget),
    };
    Ok(ShrinkParams { beta: s.beta, m: s.m, floors: Floors::new(s.rho, s.tau)?, budget, criterion: s.criterion, seed, input_hw: hw })
}

fn protocol(p: &ProtocolArgs, seed: u64) -> Result<TrainProtocol> {
    let mut proto = match &p.protocol {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?
        }
        None => TrainProtocol::default(),
    };
    proto.seed = seed;
    if let Some(v) = p.epochs {
        proto.epochs = v;
    }
    if let Some(v) = p.batch_size {
        proto.batch_size = v;
    }
    if let Some(v) = p.lr {
        proto.base_lr = v;
    }
    if let Some(v) = p.momentum {
        proto.momentum = v;
    }
    if let Some(v) = p.weight_decay {
        proto.weight_decay = v;
    }
    if p.no_augment {
        proto.augment = Augmentation { horizontal_flip: false, pad_crop: 0 };
    }
    if let Some(t) = &p.kd_teacher {
        proto.kd = Some(KdConfig { lambda: p.kd_lambda, temperature: p.kd_temperature, teacher: t.clone() });
    }
    proto.validate()?;
    Ok(proto)
}

fn parse_config(s: &str) -> Result<ChannelConfig> {
    let values = s
        .split(',')
        .map(|v| v.trim().parse::<usize>().map_err(|_| Error::Invalid(format!("bad channel count `{}`", v))))
        .collect::<Result<Vec<_>>>()?;
    Ok(ChannelConfig::new(values)?)
}

/// `X.XXXX / YY.YY` FLOPs (G) and `X.XXX / YY.YY` params (M) against a base.
pub fn cost_line(flops: u64, params: u64, base_flops: u64, base_params: u64) -> String {
    format!(
        "{:.4} / {:.2}    {:.3} / {:.2}",
        flops as f64 / 1e9,
        100.0 * flops as f64 / base_flops as f64,
        params as f64 / 1e6,
        100.0 * params as f64 / base_params as f64
    )
}

pub fn analyze_text(arch: &ArchSpec, other: Option<&ChannelConfig>, hw: (usize, usize)) -> Result<String> {
    let base = model_cost(arch, &arch.default_config(), hw)?;
    let mut out = format!("{} at {}x{}\n", arch.name, hw.0, hw.1);
    out += &format!("{:<10}FLOPs [G] / %    Params [M] / %\n", "");
    out += &format!("{:<10}{}\n", "baseline", cost_line(base.total_flops, base.total_params, base.total_flops, base.total_params));
    if let Some(c) = other {
        let r = ratio_report(arch, &arch.default_config(), c, hw)?;
        out += &format!("{:<10}{}\n", "config", cost_line(r.new_flops, r.new_params, r.base_flops, r.base_params));
    }
    out += &format!("flops {}  params {}\n", base.total_flops, base.total_params);
    Ok(out)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Shrink(c) => {
            let (train_set, _) = load_data(&c.data.data)?;
            let hw = train_set.hw();
            let arch = resolve_arch(&c.arch, train_set.num_classes, train_set.channels(), hw)?;
            let params = shrink_params(&c.shrink, c.seed, hw)?;
            prepare_dir(&c.out.out, c.out.force)?;
            let mut source = RandomBatches::new(&train_set, c.batch_size, c.seed);
            let (rep, _) = shrink_pipeline(&arch, &params, &mut source)?;
            write_shrink_outputs(&c.out.out, &rep)?;
            println!("baseline {:?}", rep.baseline_config.values());
            println!("wide     {:?}", rep.wide_config.values());
            println!("shrunk   {:?}", rep.shrunk_config.values());
            println!("flops    {} -> {} ({:.2}% of baseline, budget {})", rep.baseline.flops, rep.shrunk.flops, rep.flops_ratio, rep.budget_flops);
            Ok(())
        }
        Command::Train(c) => {
            let (train_set, test_set) = load_data(&c.data.data)?;
            let hw = train_set.hw();
            let arch = resolve_arch(&c.arch, train_set.num_classes, train_set.channels(), hw)?;
            let config = match (&c.config, &c.config_from) {
                (Some(s), _) => parse_config(s)?,
                (None, Some(p)) => read_shrink_report(p)?.shrunk_config,
                (None, None) => arch.default_config(),
            };
            let proto = protocol(&c.protocol, c.seed)?;
            let teacher = match &proto.kd {
                Some(kd) => Some(checkpoint::load(&kd.teacher)?),
                None => None,
            };
            prepare_dir(&c.out.out, c.out.force)?;
            let mut net = Network::init(&arch, &config, proto.seed)?;
            let mut print = |r: &crate::train::EpochRow| {
                eprintln!("epoch {:>3}  lr {:.4}  loss {:.4}  train_err {:.2}  test_err {:.2}", r.epoch, r.lr, r.train_loss, r.train_err, r.test_err)
            };
            let log = train(&mut net, &train_set, &test_set, &proto, teacher.as_ref(), Some(&mut print))?;
            let mut buf = Vec::new();
            log.write_csv(&mut buf)?;
            write_text(&c.out.out.join("train_log.csv"), &String::from_utf8(buf).expect("csv output is UTF-8"))?;
            write_json(&c.out.out.join("protocol.json"), &proto)?;
            checkpoint::save(&net, &c.out.out.join("model.ckpt"))?;
            println!("top1_err {:.2}  loss {:.4}  protocol {}", log.final_eval.top1_err, log.final_eval.loss, log.protocol_hash);
            Ok(())
        }
        Command::Compare(c) => {
            let (train_set, test_set) = load_data(&c.data.data)?;
            let hw = train_set.hw();
            let arch = resolve_arch(&c.arch, train_set.num_classes, train_set.channels(), hw)?;
            let params = shrink_params(&c.shrink, c.seed, hw)?;
            let proto = protocol(&c.protocol, c.seed)?;
            prepare_dir(&c.out.out, c.out.force)?;
            let mut print = |label: &str, r: &crate::train::EpochRow| {
                eprintln!("{:<8} epoch {:>3}  lr {:.4}  loss {:.4}  test_err {:.2}", label, r.epoch, r.lr, r.train_loss, r.test_err)
            };
            let cmp = compare_run(&arch, &proto, &params, &train_set, &test_set, Some(&mut print))?;
            write_comparison(&c.out.out, &cmp)?;
            write_json(&c.out.out.join("protocol.json"), &proto)?;
            let s = &cmp.summary;
            println!("baseline {:?}  top1_err {:.2}", s.baseline.config.values(), s.baseline.top1_err);
            println!("lwdna    {:?}  top1_err {:.2}", s.lwdna.config.values(), s.lwdna.top1_err);
            println!("{}", cost_line(s.lwdna.flops, s.lwdna.params, s.baseline.flops, s.baseline.params));
            Ok(())
        }
        Command::Analyze(c) => {
            let hw = (c.input, c.input);
            let arch = resolve_arch(&c.arch, c.classes, c.channels, hw)?;
            let other = match (&c.config, &c.report) {
                (Some(s), _) => Some(parse_config(s)?),
                (None, Some(p)) => Some(read_shrink_report(p)?.shrunk_config),
                (None, None) => None,
            };
            print!("{}", analyze_text(&arch, other.as_ref(), hw)?);
            Ok(())
        }
        Command::Eval(c) => {
            let net = checkpoint::load(&c.checkpoint)?;
            let (_, test_set) = load_data(&c.data.data)?;
            let e = evaluate(&net, &test_set, c.batch_size)?;
            println!("top1_err {:.2}  loss {:.4}", e.top1_err, e.loss);
            Ok(())
        }
    }
}

/// Schema text for an output file name.
pub fn schema_for(file: &str) -> Option<&'static str> {
    report::SCHEMAS.iter().find(|(f, _)| *f == file).map(|(_, s)| *s)
}
