//! Hierarchical expert mask pruning.
//!
//! Each mask update round derives, for every domain, `Z` candidate masks from
//! the domain's mean gate values, fine-tunes each on a private copy of the
//! snapshot parameters while magnitude-pruning it down to the target density,
//! and keeps the best-scoring candidate.

use log::warn;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::hei::HierMask;
use crate::params::{ParamSnapshot, ParameterStore};
use crate::rng::Rng;
use crate::tensor::Array2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HempConfig {
    /// Candidates per domain.
    pub z: usize,
    /// Minimum fine-tuning batches per candidate.
    pub k: usize,
    /// Initial kept density.
    pub s0: f64,
    /// Target kept density.
    pub s: f64,
    /// Fraction of kept positions pruned per step.
    pub alpha: f64,
    /// Learning rate of candidate fine-tuning.
    pub lr_u: f64,
    /// Mixed-data batches between mask updates.
    pub update_interval: usize,
    /// Mask-free batches before the first mask update.
    pub warmup_batches: usize,
    /// Probability of inverting each initial mask position.
    pub flip_prob: f64,
    pub max_prune_iters: usize,
    /// Size of the per-domain training sample used to score candidates.
    pub eval_samples: usize,
}

impl Default for HempConfig {
    fn default() -> Self {
        HempConfig {
            z: 4,
            k: 5,
            s0: 0.7,
            s: 0.4,
            alpha: 0.05,
            lr_u: 0.01,
            update_interval: 500,
            warmup_batches: 100,
            flip_prob: 0.1,
            max_prune_iters: 64,
            eval_samples: 256,
        }
    }
}

impl HempConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("hemp: {m}")));
        if !(0.0 < self.s && self.s < self.s0 && self.s0 <= 1.0) {
            return err(format!("need 0 < s < s0 <= 1, got s = {}, s0 = {}", self.s, self.s0));
        }
        if !(0.0 < self.alpha && self.alpha < 1.0) {
            return err(format!("alpha must be in (0,1), got {}", self.alpha));
        }
        if self.z == 0 || self.k == 0 {
            return err("z and k must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return err(format!("flip_prob must be in [0,1], got {}", self.flip_prob));
        }
        if !(self.lr_u > 0.0) {
            return err(format!("lr_u must be > 0, got {}", self.lr_u));
        }
        if self.update_interval == 0 {
            return err("update_interval must be >= 1".into());
        }
        Ok(())
    }
}

/// Running mean of every gate position per domain since the last reset.
#[derive(Debug, Clone, PartialEq)]
pub struct GateStatsAccumulator {
    shapes: Vec<(usize, usize)>,
    sums: Vec<Vec<Array2>>,
    counts: Vec<u64>,
}

impl GateStatsAccumulator {
    pub fn new(num_domains: usize, shapes: &[(usize, usize)]) -> Self {
        let zero = || shapes.iter().map(|&(r, c)| Array2::zeros(r, c)).collect::<Vec<_>>();
        GateStatsAccumulator {
            shapes: shapes.to_vec(),
            sums: (0..num_domains).map(|_| zero()).collect(),
            counts: vec![0; num_domains],
        }
    }

    pub fn count(&self, domain: usize) -> u64 {
        self.counts[domain]
    }

    /// Adds batch rows: `gates[k][n]` is the `N_k x B` gate of mask layer `k`
    /// (tape values), `domains[b]` the domain of row `b`.
    pub fn observe(&mut self, tape: &Tape, gates: &[Vec<Var>], domains: &[usize]) -> Result<()> {
        if gates.len() != self.shapes.len() {
            return Err(Error::shape("gate_stats", format!("{} gate layers, expected {}", gates.len(), self.shapes.len())));
        }
        for (k, layer) in gates.iter().enumerate() {
            for (n, &g) in layer.iter().enumerate() {
                let gv = tape.value(g);
                if gv.cols() != domains.len() {
                    return Err(Error::shape("gate_stats", format!("{} gate columns for {} rows", gv.cols(), domains.len())));
                }
                for (b, &d) in domains.iter().enumerate() {
                    let sums = &mut self.sums[d][k];
                    for i in 0..gv.rows() {
                        sums.set(i, n, sums.get(i, n) + gv.get(i, b));
                    }
                }
            }
        }
        for &d in domains {
            self.counts[d] += 1;
        }
        Ok(())
    }

    /// Mean gate values for `domain`; uniform `1 / N_{l-1}` before any observation.
    pub fn means(&self, domain: usize) -> Vec<Array2> {
        let c = self.counts[domain];
        self.shapes
            .iter()
            .zip(&self.sums[domain])
            .map(|(&(r, cols), s)| {
                if c == 0 {
                    Array2::filled(r, cols, 1.0 / r as f64)
                } else {
                    s.map(|x| x / c as f64)
                }
            })
            .collect()
    }

    pub fn reset(&mut self) {
        for layer in self.sums.iter_mut().flatten() {
            layer.fill(0.0);
        }
        self.counts.fill(0);
    }
}

/// Number of positions kept by an initial candidate.
pub fn initial_keep_count(total: usize, s0: f64) -> usize {
    ((s0 * total as f64) + 1e-9).floor() as usize
}

/// Number of positions one prune step removes from `kept`: `α · kept` rounded
/// half away from zero, at least one.
pub fn prune_count(kept: usize, alpha: f64) -> usize {
    ((alpha * kept as f64) + 1e-9).round().max(1.0) as usize
}

/// Top-`⌊S0·total⌋` positions by mean gate value (ties by position order),
/// each position then inverted with probability `flip_prob`. If the flips leave
/// more than `⌊S0·total⌋` kept, the lowest-valued kept positions are dropped.
/// No connectivity repair is applied.
pub fn initial_selection(means: &[Array2], s0: f64, flip_prob: f64, rng: &mut Rng) -> HierMask {
    let shapes: Vec<(usize, usize)> = means.iter().map(Array2::shape).collect();
    let mut mask = HierMask::empty(&shapes);
    let positions = mask.positions();
    let value = |(k, r, c): (usize, usize, usize)| means[k].get(r, c);
    let mut order: Vec<usize> = (0..positions.len()).collect();
    order.sort_by(|&a, &b| value(positions[b]).total_cmp(&value(positions[a])).then(a.cmp(&b)));
    let target = initial_keep_count(positions.len(), s0);
    for &i in order.iter().take(target) {
        mask.set(positions[i], true);
    }
    for &p in &positions {
        if rng.gen_bool(flip_prob) {
            mask.set(p, !mask.get(p));
        }
    }
    let mut excess = mask.kept().saturating_sub(target);
    for &i in order.iter().rev() {
        if excess == 0 {
            break;
        }
        if mask.get(positions[i]) {
            mask.set(positions[i], false);
            excess -= 1;
        }
    }
    mask
}

/// Initial candidate: [`initial_selection`] followed by connectivity repair.
pub fn init_candidate(means: &[Array2], cfg: &HempConfig, rng: &mut Rng) -> HierMask {
    let mut mask = initial_selection(means, cfg.s0, cfg.flip_prob, rng);
    mask.repair(Some(means));
    mask
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    pub mask: HierMask,
    /// Positions removed by magnitude, before repair.
    pub removed: usize,
    /// True when pruning stopped early because it would have emptied the active set.
    pub stopped_short: bool,
}

/// Removes the [`prune_count`] kept positions with the smallest `T ⊙ ḡ`
/// (ties by `(layer, row, col)`), then repairs connectivity.
pub fn prune_step(mask: &HierMask, means: &[Array2], alpha: f64) -> Result<PruneOutcome> {
    if mask.shapes() != means.iter().map(Array2::shape).collect::<Vec<_>>() {
        return Err(Error::Mask("gate means do not match mask layout".into()));
    }
    if mask.kept() == 0 {
        return Err(Error::Mask("cannot prune an empty mask".into()));
    }
    let mut kept: Vec<(usize, usize, usize)> = mask.positions().into_iter().filter(|&p| mask.get(p)).collect();
    // Stable sort keeps canonical position order among equal magnitudes.
    kept.sort_by(|&a, &b| means[a.0].get(a.1, a.2).total_cmp(&means[b.0].get(b.1, b.2)));
    let want = prune_count(kept.len(), alpha);
    let mut out = mask.clone();
    let mut removed = 0;
    let mut stopped_short = false;
    for &p in kept.iter().take(want) {
        out.set(p, false);
        let mut probe = out.clone();
        probe.repair_without_restore();
        if probe.active_set().is_empty() {
            out.set(p, true);
            stopped_short = true;
            break;
        }
        removed += 1;
    }
    out.repair_without_restore();
    Ok(PruneOutcome {
        mask: out,
        removed,
        stopped_short,
    })
}

/// Fine-tuning and scoring hooks used by [`search_domain_mask`].
pub trait CandidateTrainer {
    /// Trains one batch of the domain's augmented data under `mask` and
    /// returns the batch loss together with the per-position gate sums and row count.
    fn train_batch(&mut self, store: &mut ParameterStore, mask: &HierMask, rng: &mut Rng) -> Result<BatchGates>;

    /// Scores the candidate on the domain's evaluation sample; `None` when the sample is empty.
    fn score(&mut self, store: &ParameterStore, mask: &HierMask) -> Result<Option<f64>>;
}

#[derive(Debug, Clone)]
pub struct BatchGates {
    pub loss: f64,
    /// Gate value sums over the batch rows, one matrix per mask layer.
    pub sums: Vec<Array2>,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateMask {
    pub mask: HierMask,
    pub domain: usize,
    pub z: usize,
    pub score: f64,
    pub density_history: Vec<f64>,
    pub prune_iters: usize,
    pub train_batches: usize,
    pub stopped_short: bool,
    /// Fingerprint of the parameters the candidate started from.
    pub start_hash: u64,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    /// Best candidate, `None` if every candidate was degenerate.
    pub best: Option<CandidateMask>,
    pub candidates: Vec<CandidateMask>,
}

/// Runs `Z` candidates for one domain, each from a private copy of `snapshot`.
/// `init_means` are the domain's gate means from mixed training; `rngs`
/// provides one stream per candidate. The caller's parameters are never touched.
pub fn search_domain_mask(
    domain: usize,
    template: &ParameterStore,
    snapshot: &ParamSnapshot,
    init_means: &[Array2],
    cfg: &HempConfig,
    trainer: &mut dyn CandidateTrainer,
    mut rng_for: impl FnMut(usize) -> Rng,
) -> Result<SearchOutcome> {
    let mut candidates = Vec::with_capacity(cfg.z);
    for z in 0..cfg.z {
        let mut rng = rng_for(z);
        let mut store = template.clone();
        store.restore(snapshot)?;
        let start_hash = store.fingerprint();

        let mut mask = init_candidate(init_means, cfg, &mut rng);
        let mut history = vec![mask.density()];
        let mut sums: Vec<Array2> = init_means.iter().map(|m| Array2::zeros(m.rows(), m.cols())).collect();
        let mut rows = 0usize;
        let (mut batches, mut iters, mut loss_sum) = (0usize, 0usize, 0.0);
        let mut stuck = false;
        loop {
            let stats = trainer.train_batch(&mut store, &mask, &mut rng)?;
            batches += 1;
            loss_sum += stats.loss;
            rows += stats.rows;
            for (acc, s) in sums.iter_mut().zip(&stats.sums) {
                acc.add_assign(s);
            }
            if mask.density() > cfg.s && iters < cfg.max_prune_iters && !stuck {
                let means: Vec<Array2> = if rows == 0 {
                    init_means.to_vec()
                } else {
                    sums.iter().map(|s| s.map(|x| x / rows as f64)).collect()
                };
                let out = prune_step(&mask, &means, cfg.alpha)?;
                stuck = out.stopped_short && out.removed == 0;
                mask = out.mask;
                iters += 1;
                history.push(mask.density());
            }
            let pruned_enough = mask.density() <= cfg.s || iters >= cfg.max_prune_iters || stuck;
            if pruned_enough && batches >= cfg.k {
                break;
            }
        }
        if mask.active_set().is_empty() {
            warn!("domain {domain}: candidate {z} has no active head, skipped");
            continue;
        }
        let score = match trainer.score(&store, &mask)? {
            Some(s) => s,
            None => -loss_sum / batches as f64,
        };
        candidates.push(CandidateMask {
            mask,
            domain,
            z,
            score,
            density_history: history,
            prune_iters: iters,
            train_batches: batches,
            stopped_short: stuck,
            start_hash,
        });
    }
    let best = select_best(&candidates).cloned();
    if best.is_none() {
        warn!("domain {domain}: every candidate degenerate, keeping previous mask");
    }
    Ok(SearchOutcome { best, candidates })
}

/// Highest score wins; ties go to the lowest candidate index.
pub fn select_best(candidates: &[CandidateMask]) -> Option<&CandidateMask> {
    let mut best: Option<&CandidateMask> = None;
    for c in candidates {
        match best {
            Some(b) if !(c.score > b.score) && !(c.score == b.score && c.z < b.z) => {}
            _ => best = Some(c),
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hei::HeiConfig;
    use crate::rng::substream;

    fn shapes() -> Vec<(usize, usize)> {
        HeiConfig::default().mask_shapes()
    }

    fn ramp_means() -> Vec<Array2> {
        let mut v = 0.0;
        shapes()
            .iter()
            .map(|&(r, c)| {
                let mut m = Array2::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        v += 1.0;
                        m.set(i, j, v / 100.0);
                    }
                }
                m
            })
            .collect()
    }

    #[test]
    fn counts() {
        assert_eq!(initial_keep_count(90, 0.7), 63);
        assert_eq!(prune_count(90, 0.05), 5);
        assert_eq!(prune_count(63, 0.05), 3);
        assert_eq!(prune_count(10, 0.05), 1);
    }

    #[test]
    fn flip_extremes() {
        let means = ramp_means();
        let top = initial_selection(&means, 0.7, 0.0, &mut substream(1, "a"));
        assert_eq!(top.kept(), 63);
        // Ramp values increase with position, so the last 63 positions are kept.
        let pos = top.positions();
        assert!(pos.iter().enumerate().all(|(i, &p)| top.get(p) == (i >= 27)));
        let inv = initial_selection(&means, 0.7, 1.0, &mut substream(1, "a"));
        assert!(pos.iter().all(|&p| inv.get(p) != top.get(p)));
    }

    #[test]
    fn zero_gate_pruned_first() {
        let mut means: Vec<Array2> = shapes().iter().map(|&(r, c)| Array2::filled(r, c, 0.5)).collect();
        means[1].set(4, 9, 0.0);
        let out = prune_step(&HierMask::full(&shapes()), &means, 0.01).unwrap();
        assert_eq!(out.removed, 1);
        assert!(!out.mask.get((1, 4, 9)));
        assert_eq!(out.mask.kept(), 89);
    }

    #[test]
    fn prune_stops_before_emptying_active_set() {
        let mut m = HierMask::empty(&shapes());
        m.layers[0].set(0, 0, true);
        m.layers[1].set(0, 0, true);
        m.layers[1].set(0, 1, true);
        let means: Vec<Array2> = shapes().iter().map(|&(r, c)| Array2::filled(r, c, 0.1)).collect();
        let out = prune_step(&m, &means, 0.9).unwrap();
        assert!(out.stopped_short);
        assert!(!out.mask.active_set().is_empty());
    }

    #[test]
    fn accumulator_means_match_recomputation() {
        let mut tape = Tape::new();
        let sh = vec![(2, 3)];
        let g: Vec<Var> = (0..3)
            .map(|n| tape.leaf(Array2::from_rows(&[vec![0.1 * n as f64, 0.5, 0.7], vec![1.0 - 0.1 * n as f64, 0.5, 0.3]])))
            .collect();
        let mut acc = GateStatsAccumulator::new(2, &sh);
        assert_eq!(acc.means(0)[0].get(1, 2), 0.5);
        acc.observe(&tape, std::slice::from_ref(&g), &[0, 1, 0]).unwrap();
        let m = acc.means(0);
        assert!((m[0].get(0, 2) - (0.2 + 0.7) / 2.0).abs() < 1e-15);
        assert_eq!(acc.count(1), 1);
        assert_eq!(acc.means(1)[0].get(1, 1), 0.5);
        acc.reset();
        assert_eq!(acc.count(0), 0);
    }

    #[test]
    fn select_best_ties_to_lowest_z() {
        let c = |z, score| CandidateMask {
            mask: HierMask::full(&shapes()),
            domain: 0,
            z,
            score,
            density_history: vec![],
            prune_iters: 0,
            train_batches: 0,
            stopped_short: false,
            start_hash: 0,
        };
        let cands = vec![c(0, 0.5), c(1, 0.9), c(2, 0.9)];
        assert_eq!(select_best(&cands).unwrap().z, 1);
        assert_eq!(select_best(&cands[..1]).unwrap().z, 0);
        assert!(select_best(&[]).is_none());
    }
}
