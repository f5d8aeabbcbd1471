//! Run configuration and the flat `key = value` format it is stored in.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::AugConfig;
use crate::base::{EmbeddingConfig, MmoeConfig};
use crate::data::DEFAULT_MINOR_THRESHOLD;
use crate::error::{Error, Result};
use crate::hei::HeiConfig;
use crate::hemp::HempConfig;
use crate::synth::SynthConfig;

/// Splits `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses a comma-separated list.
pub fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| format!("`{s}`: {e}")))
        .collect()
}

/// Which parts of the model are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    /// Shared bottom with a single logit head.
    BaseOnly,
    /// Expert hierarchy trained without masks, heads averaged.
    Hei,
    /// Masks searched on the raw training data.
    Hemp,
    /// Masks searched on the augmented training data.
    Full,
}

impl Ablation {
    pub fn uses_hei(self) -> bool {
        self != Ablation::BaseOnly
    }

    pub fn uses_masks(self) -> bool {
        matches!(self, Ablation::Hemp | Ablation::Full)
    }

    pub fn uses_augmentation(self) -> bool {
        self == Ablation::Full
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base-only" | "base" => Ok(Ablation::BaseOnly),
            "+hei" | "hei" => Ok(Ablation::Hei),
            "+hemp" | "hemp" => Ok(Ablation::Hemp),
            "full" => Ok(Ablation::Full),
            other => Err(Error::Config(format!(
                "unknown ablation `{other}` (expected base-only, +hei, +hemp or full)"
            ))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::BaseOnly => "base-only",
            Ablation::Hei => "+hei",
            Ablation::Hemp => "+hemp",
            Ablation::Full => "full",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Csv(PathBuf),
    Synth(SynthConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
    /// Passes over the training split.
    pub epochs: usize,
    /// Evaluation rounds without validation improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch: 128,
            weight_decay: 1e-5,
            epochs: 10,
            patience: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataSource,
    pub seed: u64,
    pub ablation: Ablation,
    pub embed: EmbeddingConfig,
    pub mmoe: MmoeConfig,
    pub hei: HeiConfig,
    pub hemp: HempConfig,
    pub aug: AugConfig,
    pub train: TrainConfig,
    /// Train / valid / test fractions.
    pub split: (f64, f64, f64),
    pub minor_threshold: f64,
    /// Number of smallest domains in the `minor_k` report entry.
    pub minor_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataSource::Synth(SynthConfig::default()),
            seed: 0,
            ablation: Ablation::Full,
            embed: EmbeddingConfig::default(),
            mmoe: MmoeConfig::default(),
            hei: HeiConfig::default(),
            hemp: HempConfig::default(),
            aug: AugConfig::default(),
            train: TrainConfig::default(),
            split: (0.8, 0.1, 0.1),
            minor_threshold: DEFAULT_MINOR_THRESHOLD,
            minor_k: 4,
        }
    }
}

fn num<T: FromStr>(k: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| Error::Config(format!("{k}: `{v}`: {e}")))
}

fn pair(k: &str, v: &str) -> Result<(usize, usize)> {
    let xs: Vec<usize> = parse_list(v).map_err(|e| Error::Config(format!("{k}: {e}")))?;
    match xs[..] {
        [a, b] => Ok((a, b)),
        _ => Err(Error::Config(format!("{k}: expected two comma-separated widths"))),
    }
}

fn pairs(k: &str, v: &str) -> Result<Vec<(usize, usize)>> {
    v.split(';').map(|p| pair(k, p)).collect()
}

fn join_pairs(ps: &[(usize, usize)]) -> String {
    ps.iter().map(|(a, b)| format!("{a},{b}")).collect::<Vec<_>>().join(";")
}

impl RunConfig {
    /// Applies one setting. Keys are listed by [`RunConfig::to_kv`]; synthetic
    /// generator keys are prefixed with `synth.`.
    pub fn set(&mut self, k: &str, v: &str) -> Result<()> {
        match k {
            "data.csv" => self.data = DataSource::Csv(PathBuf::from(v)),
            "data.synth" => {
                self.data = DataSource::Synth(if v == "default" {
                    SynthConfig::default()
                } else {
                    let text = std::fs::read_to_string(v).map_err(|e| Error::io(v, e))?;
                    SynthConfig::from_kv(&text)?
                })
            }
            "seed" => self.seed = num(k, v)?,
            "ablation" => self.ablation = v.parse()?,
            "embed.dim" => self.embed.dim = num(k, v)?,
            "embed.domain" => self.embed.domain = num(k, v)?,
            "mmoe.experts" => self.mmoe.experts = num(k, v)?,
            "mmoe.hidden" => self.mmoe.hidden = pair(k, v)?,
            "hei.experts" => self.hei.experts = parse_list(v).map_err(|e| Error::Config(format!("{k}: {e}")))?,
            "hei.hidden" => self.hei.hidden = pairs(k, v)?,
            "hemp.z" => self.hemp.z = num(k, v)?,
            "hemp.k" => self.hemp.k = num(k, v)?,
            "hemp.s0" => self.hemp.s0 = num(k, v)?,
            "hemp.s" => self.hemp.s = num(k, v)?,
            "hemp.alpha" => self.hemp.alpha = num(k, v)?,
            "hemp.lr-u" => self.hemp.lr_u = num(k, v)?,
            "hemp.update-interval" => self.hemp.update_interval = num(k, v)?,
            "hemp.warmup-batches" => self.hemp.warmup_batches = num(k, v)?,
            "hemp.flip-prob" => self.hemp.flip_prob = num(k, v)?,
            "hemp.max-prune-iters" => self.hemp.max_prune_iters = num(k, v)?,
            "hemp.eval-samples" => self.hemp.eval_samples = num(k, v)?,
            "aug.r" => self.aug.r_aug = num(k, v)?,
            "aug.rho" => self.aug.rho_quantile = num(k, v)?,
            "aug.rule" => self.aug.rule = v.parse()?,
            "train.lr" => self.train.lr = num(k, v)?,
            "train.batch" => self.train.batch = num(k, v)?,
            "train.weight-decay" => self.train.weight_decay = num(k, v)?,
            "train.epochs" => self.train.epochs = num(k, v)?,
            "train.patience" => self.train.patience = num(k, v)?,
            "split" => {
                let xs: Vec<f64> = parse_list(v).map_err(|e| Error::Config(format!("{k}: {e}")))?;
                match xs[..] {
                    [a, b, c] => self.split = (a, b, c),
                    _ => return Err(Error::Config("split: expected three fractions".into())),
                }
            }
            "data.minor-threshold" => self.minor_threshold = num(k, v)?,
            "metrics.minor-k" => self.minor_k = num(k, v)?,
            _ => match (k.strip_prefix("synth."), &mut self.data) {
                (Some(sk), DataSource::Synth(s)) => s.set(sk, v)?,
                (Some(_), DataSource::Csv(_)) => {
                    return Err(Error::Config(format!("{k} given but the data source is a CSV file")))
                }
                _ => return Err(Error::Config(format!("unknown config key `{k}`"))),
            },
        }
        Ok(())
    }

    /// Defaults overridden by every entry of `text`, then validated.
    pub fn from_kv(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let DataSource::Synth(s) = &self.data {
            s.validate()?;
        }
        if self.embed.dim == 0 {
            return Err(Error::Config("embed.dim must be >= 1".into()));
        }
        self.mmoe.validate()?;
        self.hei.validate()?;
        self.hemp.validate()?;
        self.aug.validate()?;
        if !(self.train.lr > 0.0) || self.train.batch == 0 || self.train.epochs == 0 {
            return Err(Error::Config("train: lr, batch and epochs must be positive".into()));
        }
        let (a, b, c) = self.split;
        if a <= 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must be non-negative and sum to 1, got {a},{b},{c}")));
        }
        if !(0.0..1.0).contains(&self.minor_threshold) {
            return Err(Error::Config("data.minor-threshold must be in [0,1)".into()));
        }
        if self.minor_k == 0 {
            return Err(Error::Config("metrics.minor-k must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical text form; [`RunConfig::from_kv`] of the result reproduces `self`.
    pub fn to_kv(&self) -> String {
        let mut lines: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| lines.push((k.to_string(), v));
        match &self.data {
            DataSource::Csv(p) => put("data.csv", p.display().to_string()),
            DataSource::Synth(s) => {
                put("data.synth", "default".into());
                for (k, v) in parse_kv(&s.to_kv()).expect("generated text parses") {
                    if k != "domains" {
                        put(&format!("synth.{k}"), v);
                    }
                }
            }
        }
        put("seed", self.seed.to_string());
        put("ablation", self.ablation.to_string());
        put("embed.dim", self.embed.dim.to_string());
        put("embed.domain", self.embed.domain.to_string());
        put("mmoe.experts", self.mmoe.experts.to_string());
        put("mmoe.hidden", join_pairs(&[self.mmoe.hidden]));
        put(
            "hei.experts",
            self.hei.experts.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        );
        put("hei.hidden", join_pairs(&self.hei.hidden));
        let h = &self.hemp;
        put("hemp.z", h.z.to_string());
        put("hemp.k", h.k.to_string());
        put("hemp.s0", h.s0.to_string());
        put("hemp.s", h.s.to_string());
        put("hemp.alpha", h.alpha.to_string());
        put("hemp.lr-u", h.lr_u.to_string());
        put("hemp.update-interval", h.update_interval.to_string());
        put("hemp.warmup-batches", h.warmup_batches.to_string());
        put("hemp.flip-prob", h.flip_prob.to_string());
        put("hemp.max-prune-iters", h.max_prune_iters.to_string());
        put("hemp.eval-samples", h.eval_samples.to_string());
        put("aug.r", self.aug.r_aug.to_string());
        put("aug.rho", self.aug.rho_quantile.to_string());
        put("aug.rule", self.aug.rule.to_string());
        let t = &self.train;
        put("train.lr", t.lr.to_string());
        put("train.batch", t.batch.to_string());
        put("train.weight-decay", t.weight_decay.to_string());
        put("train.epochs", t.epochs.to_string());
        put("train.patience", t.patience.to_string());
        put("split", format!("{},{},{}", self.split.0, self.split.1, self.split.2));
        put("data.minor-threshold", self.minor_threshold.to_string());
        put("metrics.minor-k", self.minor_k.to_string());
        lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_parsing() {
        let kv = parse_kv("# c\n a = 1 \n\nb=x,y # tail\n").unwrap();
        assert_eq!(kv, vec![("a".into(), "1".into()), ("b".into(), "x,y".into())]);
        assert!(parse_kv("novalue\n").is_err());
        assert_eq!(parse_list::<usize>("3, 6,12").unwrap(), vec![3, 6, 12]);
        assert!(parse_list::<usize>("3,x").is_err());
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("hemp.z", "2").unwrap();
        cfg.set("synth.noise", "0.05").unwrap();
        cfg.set("hei.hidden", "8,4;4,4;4,2").unwrap();
        cfg.set("ablation", "+hemp").unwrap();
        let back = RunConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        let csv = RunConfig::from_kv("data.csv = x.csv\n").unwrap();
        assert_eq!(RunConfig::from_kv(&csv.to_kv()).unwrap(), csv);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_kv("hemp.s = 0.9\n").is_err());
        assert!(RunConfig::from_kv("nope = 1\n").is_err());
        assert!(RunConfig::from_kv("ablation = half\n").is_err());
        assert!(RunConfig::from_kv("data.csv = a.csv\nsynth.noise = 0.1\n").is_err());
        assert!(RunConfig::from_kv("split = 0.5,0.5,0.5\n").is_err());
    }
}
