//! Popularity-based counterfactual augmentation.
//!
//! Positive interactions with unpopular items in major domains are copied into
//! minor domains, on the premise that an interaction not explained by
//! popularity reflects interest that transfers across domain contexts.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::distributions::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::data::{write_csv_with_source, Dataset, DomainStats, Sample, Schema};
use crate::error::{Error, Result};
use crate::rng::substream;

/// How eligible source interactions are distributed over minor domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AssignRule {
    /// Per minor domain, sources whose user already interacted there come
    /// first; the rest of the quota is a seeded uniform sample.
    UserHistoryFirst,
    /// Each source is assigned to one minor domain with probability
    /// proportional to the inverse of its size.
    InverseSize,
}

impl FromStr for AssignRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "user-history-first" => Ok(AssignRule::UserHistoryFirst),
            "inverse-size" => Ok(AssignRule::InverseSize),
            other => Err(Error::Config(format!(
                "unknown augmentation rule `{other}` (expected user-history-first or inverse-size)"
            ))),
        }
    }
}

impl fmt::Display for AssignRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AssignRule::UserHistoryFirst => "user-history-first",
            AssignRule::InverseSize => "inverse-size",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugConfig {
    /// Maximum number of copies per minor domain, relative to its size.
    pub r_aug: f64,
    /// Popularity quantile below which an item counts as unpopular.
    pub rho_quantile: f64,
    pub rule: AssignRule,
    pub seed: u64,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            r_aug: 0.1,
            rho_quantile: 0.2,
            rule: AssignRule::UserHistoryFirst,
            seed: 0,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.r_aug) {
            return Err(Error::Config(format!("aug: r_aug must be in [0,1], got {}", self.r_aug)));
        }
        if !(0.0..=1.0).contains(&self.rho_quantile) {
            return Err(Error::Config(format!(
                "aug: rho quantile must be in [0,1], got {}",
                self.rho_quantile
            )));
        }
        Ok(())
    }
}

/// Copy cap for a minor domain with `n` training samples.
pub fn copy_cap(n: usize, r_aug: f64) -> usize {
    ((r_aug * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Positive-interaction counts per (domain, item) and per-domain popularity thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopularityTable {
    counts: Vec<BTreeMap<usize, usize>>,
    thresholds: Vec<Option<f64>>,
    pub rho_quantile: f64,
}

impl PopularityTable {
    pub fn count(&self, domain: usize, item: usize) -> usize {
        self.counts[domain].get(&item).copied().unwrap_or(0)
    }

    /// `count / max count` within the domain; `None` for items without positives.
    pub fn popularity(&self, domain: usize, item: usize) -> Option<f64> {
        let c = self.count(domain, item);
        let max = self.counts[domain].values().copied().max()?;
        (c > 0).then(|| c as f64 / max as f64)
    }

    /// Popularity threshold `ρ_d`; `None` for domains without positives.
    pub fn threshold(&self, domain: usize) -> Option<f64> {
        self.thresholds[domain]
    }

    pub fn is_unpopular(&self, domain: usize, item: usize) -> bool {
        match (self.popularity(domain, item), self.threshold(domain)) {
            (Some(p), Some(rho)) => p < rho,
            _ => false,
        }
    }
}

/// Linear-interpolation quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Counts positives per domain and item. `ρ_d` is the `rho_quantile` quantile
/// of item popularity over the domain's positive interactions.
pub fn compute_popularity(train: &Dataset, rho_quantile: f64) -> Result<PopularityTable> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let nd = train.num_domains();
    let mut counts = vec![BTreeMap::new(); nd];
    for s in train.samples.iter().filter(|s| s.label == 1) {
        *counts[s.domain].entry(train.item(s)).or_insert(0usize) += 1;
    }
    let thresholds = counts
        .iter()
        .map(|c| {
            let max = *c.values().max()? as f64;
            let mut ps: Vec<f64> = c
                .values()
                .flat_map(|&n| std::iter::repeat_n(n as f64 / max, n))
                .collect();
            ps.sort_by(f64::total_cmp);
            Some(quantile(&ps, rho_quantile))
        })
        .collect();
    Ok(PopularityTable {
        counts,
        thresholds,
        rho_quantile,
    })
}

/// A training sample of `A_d`; copies carry the domain they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct AugSample {
    pub sample: Sample,
    pub source_domain: Option<usize>,
}

/// Per-domain candidate-training sets `A_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub per_domain: Vec<Vec<AugSample>>,
}

impl Augmented {
    /// `A_d = T_d` for every domain.
    pub fn unaugmented(train: &Dataset) -> Augmented {
        let mut per_domain = vec![Vec::new(); train.num_domains()];
        for s in &train.samples {
            per_domain[s.domain].push(AugSample {
                sample: s.clone(),
                source_domain: None,
            });
        }
        Augmented { per_domain }
    }

    pub fn copies(&self, d: usize) -> impl Iterator<Item = &AugSample> {
        self.per_domain[d].iter().filter(|a| a.source_domain.is_some())
    }

    pub fn num_copies(&self) -> usize {
        (0..self.per_domain.len()).map(|d| self.copies(d).count()).sum()
    }

    /// Writes `aug_d{d}.csv` with the copied rows of every domain that received any.
    pub fn dump(&self, dir: &Path, schema: &Schema) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for d in 0..self.per_domain.len() {
            let rows: Vec<(Sample, Option<usize>)> =
                self.copies(d).map(|a| (a.sample.clone(), a.source_domain)).collect();
            if !rows.is_empty() {
                write_csv_with_source(&dir.join(format!("aug_d{d}.csv")), schema, &rows)?;
            }
        }
        Ok(())
    }
}

/// Field holding the user id: a field named `user`/`user_id`, else the first non-item field.
pub fn user_field(schema: &Schema) -> Option<usize> {
    schema
        .fields
        .iter()
        .position(|f| f.name == "user" || f.name == "user_id")
        .or_else(|| (0..schema.num_fields()).find(|&f| f != schema.item_field))
}

/// Builds `A_d` for every domain. Major domains keep their training data;
/// minor domains additionally receive up to `⌈r_aug · n_d⌉` relabelled copies
/// of unpopular positives from major domains.
pub fn build_augmented(
    train: &Dataset,
    stats: &DomainStats,
    pop: &PopularityTable,
    cfg: &AugConfig,
) -> Result<Augmented> {
    cfg.validate()?;
    let mut out = Augmented::unaugmented(train);
    if cfg.r_aug == 0.0 || stats.minor.is_empty() {
        return Ok(out);
    }
    let eligible: Vec<usize> = train
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label == 1 && !stats.is_minor(s.domain) && pop.is_unpopular(s.domain, train.item(s)))
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        warn!("augmentation: no eligible source interactions");
        return Ok(out);
    }

    let pools: Vec<(usize, Vec<usize>)> = match cfg.rule {
        AssignRule::UserHistoryFirst => {
            let uf = user_field(&train.schema);
            stats
                .minor
                .iter()
                .map(|&d| {
                    let mut rng = substream(cfg.seed, &format!("aug.d{d}"));
                    let mut order = eligible.clone();
                    order.shuffle(&mut rng);
                    if let Some(uf) = uf {
                        let users: HashSet<usize> = train.domain_samples(d).map(|s| s.features[uf]).collect();
                        // Stable partition: users already seen in d first, both halves in shuffled order.
                        let (mut pref, rest): (Vec<usize>, Vec<usize>) =
                            order.into_iter().partition(|&i| users.contains(&train.samples[i].features[uf]));
                        pref.extend(rest);
                        order = pref;
                    }
                    (d, order)
                })
                .collect()
        }
        AssignRule::InverseSize => {
            let weights = stats.minor.iter().map(|&d| 1.0 / stats.counts[d].max(1) as f64);
            let pick = WeightedIndex::new(weights).map_err(|e| Error::Config(format!("assignment weights: {e}")))?;
            let mut rng = substream(cfg.seed, "aug.assign");
            let mut pools: Vec<(usize, Vec<usize>)> = stats.minor.iter().map(|&d| (d, Vec::new())).collect();
            for &i in &eligible {
                pools[pick.sample(&mut rng)].1.push(i);
            }
            for (d, pool) in &mut pools {
                pool.shuffle(&mut substream(cfg.seed, &format!("aug.d{d}")));
            }
            pools
        }
    };

    for (d, order) in pools {
        let cap = copy_cap(stats.counts[d], cfg.r_aug);
        for &i in order.iter().take(cap) {
            let src = &train.samples[i];
            out.per_domain[d].push(AugSample {
                sample: Sample {
                    features: src.features.clone(),
                    domain: d,
                    label: 1,
                },
                source_domain: Some(src.domain),
            });
        }
        if order.is_empty() {
            warn!("augmentation: no sources assigned to minor domain {d}");
        }
    }
    Ok(out)
}
