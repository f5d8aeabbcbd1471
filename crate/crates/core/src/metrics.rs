//! AUC, the per-domain AUC family and the mask overlap ratio.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::DomainStats;
use crate::error::{Error, Result};
use crate::hei::HierMask;

/// Rank-sum AUC. Tied scores share their average rank, so ties count one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their mean.
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                pos_rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Parallel lists of scores, labels and domains.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub domains: Vec<usize>,
}

impl ScoredSet {
    pub fn push(&mut self, score: f64, label: u8, domain: usize) {
        self.scores.push(score);
        self.labels.push(label);
        self.domains.push(domain);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn domain_slice(&self, d: usize) -> (Vec<f64>, Vec<u8>) {
        self.domains
            .iter()
            .enumerate()
            .filter(|&(_, &dom)| dom == d)
            .map(|(i, _)| (self.scores[i], self.labels[i]))
            .unzip()
    }
}

/// AUC and sample count of one domain; `auc` is `None` for single-class domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainScore {
    pub domain: usize,
    pub n: usize,
    pub auc: Option<f64>,
}

pub fn per_domain_auc(ss: &ScoredSet, num_domains: usize) -> Vec<DomainScore> {
    (0..num_domains)
        .map(|d| {
            let (s, l) = ss.domain_slice(d);
            DomainScore {
                domain: d,
                n: s.len(),
                auc: if s.is_empty() { None } else { auc(&s, &l).ok() },
            }
        })
        .collect()
}

/// Size-weighted mean of per-domain AUCs over `domains`. Domains with a single
/// class are skipped and the remaining weights renormalized.
pub fn domain_auc_over(ss: &ScoredSet, domains: &[usize]) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for &d in domains {
        let (s, l) = ss.domain_slice(d);
        if s.is_empty() {
            continue;
        }
        match auc(&s, &l) {
            Ok(a) => {
                num += s.len() as f64 * a;
                den += s.len() as f64;
            }
            Err(Error::SingleClass) => warn!("domain {d} is single-class; excluded from DomainAUC"),
            Err(e) => return Err(e),
        }
    }
    if den == 0.0 {
        return Err(Error::NoScorableDomain);
    }
    Ok(num / den)
}

pub fn domain_auc(ss: &ScoredSet) -> Result<f64> {
    let mut ds: Vec<usize> = ss.domains.clone();
    ds.sort_unstable();
    ds.dedup();
    domain_auc_over(ss, &ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainGroup {
    Largest(usize),
    Smallest(usize),
}

impl DomainGroup {
    /// Member domains by training-split count (ties broken by domain id).
    pub fn members(&self, stats: &DomainStats) -> Result<Vec<usize>> {
        let order = stats.by_size_desc();
        let (k, take_largest) = match *self {
            DomainGroup::Largest(k) => (k, true),
            DomainGroup::Smallest(k) => (k, false),
        };
        if k == 0 || k > order.len() {
            return Err(Error::Config(format!(
                "group size {k} out of range for {} domains",
                order.len()
            )));
        }
        Ok(if take_largest {
            order[..k].to_vec()
        } else {
            order[order.len() - k..].to_vec()
        })
    }
}

pub fn group_auc(ss: &ScoredSet, group: DomainGroup, stats: &DomainStats) -> Result<f64> {
    domain_auc_over(ss, &group.members(stats)?)
}

/// Intersection-over-union of kept positions at one mask layer (`layer` indexes
/// `HierMask::layers`, i.e. 0 is the gate matrix into the second expert layer).
pub fn overlap_ratio(a: &HierMask, b: &HierMask, layer: usize) -> Result<f64> {
    let (la, lb) = (
        a.layers.get(layer).ok_or_else(|| Error::Mask(format!("no layer {layer}")))?,
        b.layers.get(layer).ok_or_else(|| Error::Mask(format!("no layer {layer}")))?,
    );
    if la.shape() != lb.shape() {
        return Err(Error::Mask(format!(
            "shape {:?} vs {:?}",
            la.shape(),
            lb.shape()
        )));
    }
    iou(la.cells().iter().zip(lb.cells()))
}

/// Overlap ratio pooled over every mask layer.
pub fn overlap_ratio_all(a: &HierMask, b: &HierMask) -> Result<f64> {
    if a.shapes() != b.shapes() {
        return Err(Error::Mask("mask layouts differ".into()));
    }
    iou(a
        .layers
        .iter()
        .zip(&b.layers)
        .flat_map(|(x, y)| x.cells().iter().zip(y.cells())))
}

fn iou<'a>(pairs: impl Iterator<Item = (&'a bool, &'a bool)>) -> Result<f64> {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in pairs {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        return Err(Error::Mask("both masks are empty".into()));
    }
    Ok(inter as f64 / union as f64)
}

/// Everything written to a metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: Option<f64>,
    pub domain_auc: Option<f64>,
    pub major5: Option<f64>,
    pub minor10: Option<f64>,
    pub minor5: Option<f64>,
    /// Smallest-`k` group with a run-configurable `k`.
    pub minor_k: MinorK,
    pub per_domain: Vec<DomainScore>,
    /// Domains left out of weighted means because they had a single class.
    pub excluded_domains: Vec<usize>,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinorK {
    pub k: usize,
    pub auc: Option<f64>,
}

impl MetricsReport {
    pub fn compute(ss: &ScoredSet, stats: &DomainStats, minor_k: usize) -> MetricsReport {
        let d = stats.num_domains();
        let group = |g: DomainGroup| match g {
            DomainGroup::Largest(k) | DomainGroup::Smallest(k) if k > d => None,
            _ => group_auc(ss, g, stats).ok(),
        };
        let per_domain = per_domain_auc(ss, d);
        let excluded_domains = per_domain
            .iter()
            .filter(|p| p.n > 0 && p.auc.is_none())
            .map(|p| p.domain)
            .collect();
        MetricsReport {
            auc: auc(&ss.scores, &ss.labels).ok(),
            domain_auc: domain_auc(ss).ok(),
            major5: group(DomainGroup::Largest(5)),
            minor10: group(DomainGroup::Smallest(10)),
            minor5: group(DomainGroup::Smallest(5)),
            minor_k: MinorK {
                k: minor_k,
                auc: group(DomainGroup::Smallest(minor_k)),
            },
            per_domain,
            excluded_domains,
            samples: ss.len(),
        }
    }
}
