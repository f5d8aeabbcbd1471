use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use aread_core::config::RunConfig;
use aread_core::hei::HierMask;
use aread_core::metrics::overlap_ratio_all;
use aread_core::synth::{self, SynthConfig};
use aread_core::train::{self, evaluate, load_checkpoint, read_masks, save_checkpoint, write_masks, write_scores};

#[derive(Parser)]
#[command(name = "aread", version, about = "Multi-domain CTR training with hierarchical experts and per-domain masks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain dataset as CSV.
    Synth(SynthArgs),
    /// Train a model and write metrics, masks and a checkpoint.
    #[command(alias = "run")]
    Train(TrainArgs),
    /// Score data with a saved checkpoint.
    Eval(EvalArgs),
    /// Pairwise mask overlap ratios between domains as a CSV matrix.
    AnalyzeMasks(AnalyzeArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Generator settings file, or `default`.
    #[arg(long, default_value = "default")]
    config: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV dataset with `domain` and `label` columns.
    #[arg(long, conflicts_with = "synth_config")]
    data: Option<PathBuf>,
    /// Synthetic generator settings file, or `default`.
    #[arg(long)]
    synth_config: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// base-only, +hei, +hemp or full.
    #[arg(long, allow_hyphen_values = true)]
    ablation: Option<String>,
    #[arg(long = "hemp.z")]
    hemp_z: Option<String>,
    #[arg(long = "hemp.k")]
    hemp_k: Option<String>,
    #[arg(long = "hemp.s0")]
    hemp_s0: Option<String>,
    #[arg(long = "hemp.s")]
    hemp_s: Option<String>,
    #[arg(long = "hemp.alpha")]
    hemp_alpha: Option<String>,
    #[arg(long = "hemp.lr-u")]
    hemp_lr_u: Option<String>,
    #[arg(long = "hemp.update-interval")]
    hemp_update_interval: Option<String>,
    /// Any configuration entry as `key=value`; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                RunConfig::from_kv(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        let mut overrides: Vec<(String, String)> = Vec::new();
        if let Some(p) = &self.data {
            overrides.push(("data.csv".into(), p.display().to_string()));
        }
        if let Some(s) = &self.synth_config {
            overrides.push(("data.synth".into(), s.clone()));
        }
        if let Some(s) = self.seed {
            overrides.push(("seed".into(), s.to_string()));
        }
        if let Some(a) = &self.ablation {
            overrides.push(("ablation".into(), a.clone()));
        }
        for (k, v) in [
            ("hemp.z", &self.hemp_z),
            ("hemp.k", &self.hemp_k),
            ("hemp.s0", &self.hemp_s0),
            ("hemp.s", &self.hemp_s),
            ("hemp.alpha", &self.hemp_alpha),
            ("hemp.lr-u", &self.hemp_lr_u),
            ("hemp.update-interval", &self.hemp_update_interval),
        ] {
            if let Some(v) = v {
                overrides.push((k.into(), v.clone()));
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
            overrides.push((k.trim().into(), v.trim().into()));
        }
        for (k, v) in overrides {
            cfg.set(&k, &v).with_context(|| format!("setting {k}"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for every artifact not redirected below.
    #[arg(long, default_value = "aread-out")]
    out: PathBuf,
    /// Metrics report path (default `<out>/metrics.json`).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Mask directory (default `<out>/masks`).
    #[arg(long)]
    dump_masks: Option<PathBuf>,
    /// Write the augmented rows of every domain here.
    #[arg(long)]
    dump_aug: Option<PathBuf>,
    /// Checkpoint directory (default `<out>/checkpoint`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Mask directory written by `train`.
    #[arg(long, conflicts_with = "all_ones_masks")]
    masks: Option<PathBuf>,
    /// Evaluate with every mask position kept.
    #[arg(long)]
    all_ones_masks: bool,
    /// CSV to score (default: the test split of the training configuration).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Metrics report path (default: stdout).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write `score,label,domain` rows here.
    #[arg(long)]
    dump_scores: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    masks: PathBuf,
    /// Restrict to one mask layer (2..=L); all layers pooled by default.
    #[arg(long)]
    layer: Option<usize>,
    /// Output CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth_cmd(args: &SynthArgs) -> Result<()> {
    let mut cfg = if args.config == "default" {
        SynthConfig::default()
    } else {
        SynthConfig::from_kv(&fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config))?)?
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let ds = synth::generate(&cfg)?;
    ds.write_csv(&args.out)?;
    info!("wrote {} samples to {}", ds.len(), args.out.display());
    Ok(())
}

/// Stable FNV-1a hash of the configuration text, used as a run identifier.
fn config_id(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    fs::create_dir_all(&args.out)?;
    let kv = cfg.to_kv();
    fs::write(args.out.join("config.txt"), &kv)?;
    write_json(
        &args.out.join("manifest.json"),
        &serde_json::json!({
            "build": concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")),
            "config_id": config_id(&kv),
            "seed": cfg.seed,
            "ablation": cfg.ablation.to_string(),
            "config": kv,
        }),
    )?;

    let (splits, trained) = train::run(&cfg)?;
    let report = args.report.clone().unwrap_or_else(|| args.out.join("metrics.json"));
    write_json(&report, &trained.test)?;
    write_json(&args.out.join("run_report.json"), &trained.report)?;
    let ckpt = args.checkpoint.clone().unwrap_or_else(|| args.out.join("checkpoint"));
    save_checkpoint(&ckpt, &cfg, &trained, &splits.train.schema)?;
    if let Some(masks) = &trained.masks {
        let dir = args.dump_masks.clone().unwrap_or_else(|| args.out.join("masks"));
        write_masks(&dir, masks)?;
    }
    if let Some(dir) = &args.dump_aug {
        trained.augmented.dump(dir, &splits.train.schema)?;
    }
    println!(
        "test DomainAUC {}",
        trained.test.domain_auc.map_or("n/a".to_string(), |v| format!("{v:.5}"))
    );
    Ok(())
}

fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let loaded = load_checkpoint(&args.checkpoint)?;
    let shapes = loaded.cfg.hei.mask_shapes();
    let nd = loaded.schema.num_domains();
    let masks = match (&args.masks, args.all_ones_masks) {
        (Some(dir), _) => Some(read_masks(dir, &shapes, nd)?),
        (None, true) => Some(vec![HierMask::full(&shapes); nd]),
        (None, false) => None,
    };
    let (report, scores) = evaluate(&loaded, masks.as_deref(), args.data.as_deref())?;
    match &args.report {
        Some(p) => write_json(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    if let Some(p) = &args.dump_scores {
        write_scores(p, &scores)?;
    }
    Ok(())
}

fn analyze_cmd(args: &AnalyzeArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let shapes = cfg.hei.mask_shapes();
    let mut domains = 0;
    while args.masks.join(format!("mask_d{domains}.txt")).exists() {
        domains += 1;
    }
    if domains == 0 {
        bail!("no mask_d*.txt files in {}", args.masks.display());
    }
    let masks = read_masks(&args.masks, &shapes, domains)?;
    let layer = match args.layer {
        Some(l) if l < 2 || l > shapes.len() + 1 => bail!("--layer must be in 2..={}", shapes.len() + 1),
        Some(l) => Some(l - 2),
        None => None,
    };
    let mut out = String::from("domain");
    for d in 0..domains {
        out.push_str(&format!(",{d}"));
    }
    out.push('\n');
    for (d, a) in masks.iter().enumerate() {
        out.push_str(&d.to_string());
        for b in &masks {
            let or = match layer {
                Some(l) => aread_core::metrics::overlap_ratio(a, b, l),
                None => overlap_ratio_all(a, b),
            };
            match or {
                Ok(v) => out.push_str(&format!(",{v:.6}")),
                Err(_) => out.push(','),
            }
        }
        out.push('\n');
    }
    match &args.out {
        Some(p) => fs::write(p, out).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{out}"),
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("AREAD_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => synth_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::AnalyzeMasks(a) => analyze_cmd(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
