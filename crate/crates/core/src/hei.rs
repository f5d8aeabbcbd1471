//! Hierarchical expert integration.
//!
//! `L` layers of two-layer ReLU experts. Layer 1 consumes the base
//! representation directly; every expert `n` of a higher layer `l` receives the
//! mixture `Σ_i g_{l,n}[i] · e_{l-1,i}` of the previous layer's outputs, where
//! `g_{l,n}` is a softmax over the previous layer's experts computed from the
//! base representation. Each last-layer expert ends in a linear logit head.
//!
//! A [`HierMask`] keeps or drops individual gate positions. Under a mask the
//! kept gate weights of an expert are renormalized to sum to one, so the
//! all-ones mask reproduces the unmasked pass.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{sigmoid, Tape, Var};
use crate::nn::{Linear, Mlp2};
use crate::params::ParameterStore;
use crate::rng::Rng;
use crate::tensor::Array2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeiConfig {
    /// Expert count per layer.
    pub experts: Vec<usize>,
    /// Hidden widths of the two dense layers inside each expert, per layer.
    pub hidden: Vec<(usize, usize)>,
}

impl Default for HeiConfig {
    fn default() -> Self {
        HeiConfig {
            experts: vec![3, 6, 12],
            hidden: vec![(64, 32), (32, 16), (16, 8)],
        }
    }
}

impl HeiConfig {
    pub fn layers(&self) -> usize {
        self.experts.len()
    }

    /// Shapes `(N_{l-1}, N_l)` of the maskable gate matrices, `l = 2..=L`.
    pub fn mask_shapes(&self) -> Vec<(usize, usize)> {
        self.experts.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(format!("hei: {m}")));
        if self.experts.len() < 2 {
            return err("need at least 2 layers");
        }
        if self.hidden.len() != self.experts.len() {
            return err("one hidden spec per layer required");
        }
        if self.experts.contains(&0) || self.hidden.iter().any(|h| h.0 == 0 || h.1 == 0) {
            return err("expert counts and widths must be positive");
        }
        if self.experts.windows(2).any(|w| w[1] < w[0]) {
            return err("expert counts must be non-decreasing");
        }
        if self.hidden.windows(2).any(|w| w[1].1 > w[0].1) {
            return err("expert output widths must be non-increasing");
        }
        Ok(())
    }
}

/// Binary matrix of kept gate positions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskMatrix {
    rows: usize,
    cols: usize,
    cells: Vec<bool>,
}

impl MaskMatrix {
    pub fn filled(rows: usize, cols: usize, keep: bool) -> Self {
        MaskMatrix {
            rows,
            cols,
            cells: vec![keep; rows * cols],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, keep: bool) {
        self.cells[r * self.cols + c] = keep;
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn kept(&self) -> usize {
        self.cells.iter().filter(|&&k| k).count()
    }

    pub fn column_any(&self, c: usize) -> bool {
        (0..self.rows).any(|r| self.get(r, c))
    }
}

/// Per-domain expert selection mask: one [`MaskMatrix`] per gate layer `l = 2..=L`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HierMask {
    pub layers: Vec<MaskMatrix>,
}

impl HierMask {
    pub fn full(shapes: &[(usize, usize)]) -> Self {
        HierMask {
            layers: shapes.iter().map(|&(r, c)| MaskMatrix::filled(r, c, true)).collect(),
        }
    }

    pub fn empty(shapes: &[(usize, usize)]) -> Self {
        HierMask {
            layers: shapes.iter().map(|&(r, c)| MaskMatrix::filled(r, c, false)).collect(),
        }
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(MaskMatrix::shape).collect()
    }

    /// Number of gate positions across all layers.
    pub fn total(&self) -> usize {
        self.layers.iter().map(|m| m.rows * m.cols).sum()
    }

    pub fn kept(&self) -> usize {
        self.layers.iter().map(MaskMatrix::kept).sum()
    }

    /// Kept positions over all positions.
    pub fn density(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.kept() as f64 / total as f64
        }
    }

    /// Last-layer experts with at least one kept incoming gate.
    pub fn active_set(&self) -> Vec<usize> {
        let last = self.layers.last().expect("mask has at least one layer");
        (0..last.cols).filter(|&j| last.column_any(j)).collect()
    }

    /// Flat position list `(layer, row, col)` in canonical order.
    pub fn positions(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.total());
        for (k, m) in self.layers.iter().enumerate() {
            for r in 0..m.rows {
                for c in 0..m.cols {
                    out.push((k, r, c));
                }
            }
        }
        out
    }

    pub fn get(&self, (k, r, c): (usize, usize, usize)) -> bool {
        self.layers[k].get(r, c)
    }

    pub fn set(&mut self, (k, r, c): (usize, usize, usize), keep: bool) {
        self.layers[k].set(r, c, keep);
    }

    /// Reachability of every expert from the first layer through kept gates.
    /// Entry `[l][n]` refers to expert `n` of expert layer `l` (0-based).
    pub fn reachable(&self) -> Vec<Vec<bool>> {
        let first = self.layers[0].rows;
        let mut alive = vec![vec![true; first]];
        for m in &self.layers {
            let prev = alive.last().expect("non-empty");
            let next = (0..m.cols)
                .map(|n| (0..m.rows).any(|i| prev[i] && m.get(i, n)))
                .collect();
            alive.push(next);
        }
        alive
    }

    /// True when no kept gate leaves an unreachable expert and `K` is nonempty.
    pub fn is_path_consistent(&self) -> bool {
        let alive = self.reachable();
        let dangling = self.layers.iter().enumerate().any(|(k, m)| {
            (0..m.rows).any(|i| !alive[k][i] && (0..m.cols).any(|n| m.get(i, n)))
        });
        !dangling && !self.active_set().is_empty()
    }

    /// Drops the outgoing gates of experts without a kept incoming gate. If that
    /// leaves no active last-layer expert, restores the single path whose summed
    /// mean gate value is largest (`gate_means[k]` matches `layers[k]`; uniform
    /// when absent). Returns true if the path had to be restored.
    pub fn repair(&mut self, gate_means: Option<&[Array2]>) -> bool {
        self.repair_without_restore();
        if !self.active_set().is_empty() {
            return false;
        }
        for (k, (i, n)) in self.best_path(gate_means).into_iter().enumerate() {
            self.layers[k].set(i, n, true);
        }
        true
    }

    /// Only the dangling-gate removal step of [`HierMask::repair`].
    pub fn repair_without_restore(&mut self) {
        let mut alive: Vec<bool> = vec![true; self.layers[0].rows];
        for m in &mut self.layers {
            for (i, &a) in alive.iter().enumerate() {
                if !a {
                    for n in 0..m.cols {
                        m.set(i, n, false);
                    }
                }
            }
            alive = (0..m.cols).map(|n| m.column_any(n)).collect();
        }
    }

    /// Highest-scoring chain of gate positions through every layer; ties go to
    /// the lowest indices.
    fn best_path(&self, gate_means: Option<&[Array2]>) -> Vec<(usize, usize)> {
        let weight = |k: usize, i: usize, n: usize| gate_means.map_or(1.0, |g| g[k].get(i, n));
        let mut score: Vec<f64> = vec![0.0; self.layers[0].rows];
        let mut back: Vec<Vec<usize>> = Vec::new();
        for (k, m) in self.layers.iter().enumerate() {
            let mut next = vec![f64::NEG_INFINITY; m.cols];
            let mut arg = vec![0usize; m.cols];
            for n in 0..m.cols {
                for i in 0..m.rows {
                    let s = score[i] + weight(k, i, n);
                    if s > next[n] {
                        next[n] = s;
                        arg[n] = i;
                    }
                }
            }
            back.push(arg);
            score = next;
        }
        let mut n = 0;
        for (j, &s) in score.iter().enumerate() {
            if s > score[n] {
                n = j;
            }
        }
        let mut path = vec![(0, 0); self.layers.len()];
        for k in (0..self.layers.len()).rev() {
            let i = back[k][n];
            path[k] = (i, n);
            n = i;
        }
        path
    }

    /// Text form: a `domain <d>` header, then one line of row-major 0/1 digits per layer.
    pub fn to_text(&self, domain: usize) -> String {
        let mut s = format!("domain {domain}\n");
        for m in &self.layers {
            for &c in &m.cells {
                s.push(if c { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str, shapes: &[(usize, usize)]) -> Result<(usize, HierMask)> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let header = lines.next().ok_or_else(|| Error::Mask("empty mask file".into()))?;
        let domain = header
            .strip_prefix("domain")
            .and_then(|d| d.trim().parse::<usize>().ok())
            .ok_or_else(|| Error::Mask(format!("bad header `{header}`")))?;
        let mut layers = Vec::with_capacity(shapes.len());
        for (k, &(r, c)) in shapes.iter().enumerate() {
            let line = lines
                .next()
                .ok_or_else(|| Error::Mask(format!("missing layer {}", k + 2)))?;
            if line.len() != r * c {
                return Err(Error::Mask(format!(
                    "layer {}: {} digits, expected {}",
                    k + 2,
                    line.len(),
                    r * c
                )));
            }
            let cells = line
                .chars()
                .map(|ch| match ch {
                    '0' => Ok(false),
                    '1' => Ok(true),
                    other => Err(Error::Mask(format!("invalid digit `{other}`"))),
                })
                .collect::<Result<Vec<_>>>()?;
            layers.push(MaskMatrix { rows: r, cols: c, cells });
        }
        if lines.next().is_some() {
            return Err(Error::Mask("trailing lines after last layer".into()));
        }
        Ok((domain, HierMask { layers }))
    }
}

/// Result of one forward pass through the expert hierarchy.
#[derive(Debug, Clone)]
pub struct HeiOutput {
    /// `(last-layer expert index, B x 1 logit)` for every evaluated head.
    pub heads: Vec<(usize, Var)>,
    /// `gates[k][n]` is the `N_k x B` softmax gate feeding expert `n` of layer `k + 1`.
    pub gates: Vec<Vec<Var>>,
    /// Number of expert MLPs evaluated.
    pub evaluated: usize,
}

impl HeiOutput {
    pub fn head_vars(&self) -> Vec<Var> {
        self.heads.iter().map(|&(_, v)| v).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Hei {
    cfg: HeiConfig,
    experts: Vec<Vec<Mlp2>>,
    gates: Vec<Vec<Linear>>,
    heads: Vec<Linear>,
    input: usize,
}

impl Hei {
    /// `input` is the width of the base representation, which also feeds every gate.
    pub fn new(store: &mut ParameterStore, rng: &mut Rng, input: usize, cfg: &HeiConfig) -> Result<Hei> {
        cfg.validate()?;
        let mut experts = Vec::with_capacity(cfg.layers());
        let mut width = input;
        for (l, (&n, &hidden)) in cfg.experts.iter().zip(&cfg.hidden).enumerate() {
            let layer = (0..n)
                .map(|e| Mlp2::new(store, rng, &format!("hei.l{}.e{e}", l + 1), width, hidden))
                .collect::<Result<Vec<_>>>()?;
            experts.push(layer);
            width = hidden.1;
        }
        let mut gates = Vec::with_capacity(cfg.layers() - 1);
        for (k, &(prev, count)) in cfg.mask_shapes().iter().enumerate() {
            let layer = (0..count)
                .map(|n| Linear::new(store, rng, &format!("hei.gate.l{}.e{n}", k + 2), input, prev))
                .collect::<Result<Vec<_>>>()?;
            gates.push(layer);
        }
        let last = cfg.layers();
        let heads = (0..cfg.experts[last - 1])
            .map(|n| Linear::new(store, rng, &format!("hei.head.e{n}"), width, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Hei {
            cfg: cfg.clone(),
            experts,
            gates,
            heads,
            input,
        })
    }

    pub fn config(&self) -> &HeiConfig {
        &self.cfg
    }

    pub fn num_params(&self) -> usize {
        self.experts.iter().flatten().map(Mlp2::num_params).sum::<usize>()
            + self.gates.iter().flatten().map(Linear::num_params).sum::<usize>()
            + self.heads.iter().map(Linear::num_params).sum::<usize>()
    }

    /// Forward pass. Without a mask every gate position is used as is; with a
    /// mask only experts on a kept path to an active head are evaluated and
    /// the kept gate weights of each expert are renormalized.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        base: Var,
        mask: Option<&HierMask>,
    ) -> Result<HeiOutput> {
        let (_, w) = tape.value(base).shape();
        if w != self.input {
            return Err(Error::shape("hei", format!("base width {w}, expected {}", self.input)));
        }
        let layers = self.cfg.layers();
        let needed = match mask {
            Some(m) => Some(self.needed_experts(m)?),
            None => None,
        };
        let is_needed = |l: usize, n: usize| needed.as_ref().is_none_or(|nd| nd[l][n]);

        // Gate softmaxes are always computed so their statistics cover every position.
        let mut gates = Vec::with_capacity(layers - 1);
        for layer in &self.gates {
            let mut row = Vec::with_capacity(layer.len());
            for g in layer {
                let logits = g.forward(tape, store, base)?;
                let t = tape.transpose(logits);
                row.push(tape.softmax_columns(t));
            }
            gates.push(row);
        }

        let mut evaluated = 0;
        let mut prev: Vec<Option<Var>> = Vec::new();
        for (n, expert) in self.experts[0].iter().enumerate() {
            prev.push(if is_needed(0, n) {
                evaluated += 1;
                Some(expert.forward(tape, store, base)?)
            } else {
                None
            });
        }
        for l in 1..layers {
            let k = l - 1;
            let mut cur = Vec::with_capacity(self.experts[l].len());
            for (n, expert) in self.experts[l].iter().enumerate() {
                if !is_needed(l, n) {
                    cur.push(None);
                    continue;
                }
                let gate = gates[k][n];
                let mixed = match mask {
                    None => {
                        let inputs: Vec<Var> = prev.iter().map(|p| p.expect("unmasked pass evaluates all")).collect();
                        tape.gate_mix(&inputs, gate)?
                    }
                    Some(m) => {
                        let rows: Vec<usize> = (0..prev.len()).filter(|&i| m.layers[k].get(i, n)).collect();
                        let inputs: Vec<Var> = rows
                            .iter()
                            .map(|&i| prev[i].ok_or_else(|| Error::Mask(format!("expert {i} of layer {l} feeds layer {} but is not evaluated", l + 1))))
                            .collect::<Result<_>>()?;
                        let kept = tape.select_rows(gate, &rows)?;
                        let weights = tape.normalize_columns(kept);
                        tape.gate_mix(&inputs, weights)?
                    }
                };
                evaluated += 1;
                cur.push(Some(expert.forward(tape, store, mixed)?));
            }
            prev = cur;
        }

        let mut heads = Vec::new();
        for (n, out) in prev.into_iter().enumerate() {
            if let Some(h) = out {
                heads.push((n, self.heads[n].forward(tape, store, h)?));
            }
        }
        Ok(HeiOutput {
            heads,
            gates,
            evaluated,
        })
    }

    /// Experts lying on a kept path from layer 1 to an active head.
    fn needed_experts(&self, mask: &HierMask) -> Result<Vec<Vec<bool>>> {
        if mask.shapes() != self.cfg.mask_shapes() {
            return Err(Error::Mask(format!(
                "mask shapes {:?} do not match model {:?}",
                mask.shapes(),
                self.cfg.mask_shapes()
            )));
        }
        if !mask.is_path_consistent() {
            return Err(Error::Mask("mask has dangling gates or no active head".into()));
        }
        let alive = mask.reachable();
        let layers = self.cfg.layers();
        let mut needed: Vec<Vec<bool>> = alive.clone();
        for l in (0..layers - 1).rev() {
            let m = &mask.layers[l];
            needed[l] = (0..m.rows)
                .map(|i| alive[l][i] && (0..m.cols).any(|n| needed[l + 1][n] && m.get(i, n)))
                .collect();
        }
        Ok(needed)
    }
}

/// Warm-up loss: BCE of the mean head probability. Returns per-sample losses (`B x 1`).
pub fn loss_warmup(tape: &mut Tape, heads: &[Var], labels: &[f64]) -> Result<Var> {
    if heads.is_empty() {
        return Err(Error::Mask("no heads".into()));
    }
    let probs: Vec<Var> = heads.iter().map(|&h| tape.sigmoid(h)).collect();
    let avg = tape.mean(&probs)?;
    tape.bce(avg, labels)
}

/// Masked-phase loss: each active head contributes its own BCE term. Returns `B x 1`.
pub fn loss_masked(tape: &mut Tape, heads: &[Var], labels: &[f64]) -> Result<Var> {
    if heads.is_empty() {
        return Err(Error::Mask("empty active set".into()));
    }
    let terms = heads
        .iter()
        .map(|&h| {
            let p = tape.sigmoid(h);
            tape.bce(p, labels)
        })
        .collect::<Result<Vec<_>>>()?;
    tape.sum(&terms)
}

/// Inference: mean of head probabilities.
pub fn predict(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::Mask("empty active set".into()));
    }
    Ok(logits.iter().map(|&z| sigmoid(z)).sum::<f64>() / logits.len() as f64)
}

/// Mean of every gate over the batch rows: `out[k]` has the shape of mask layer `k`.
pub fn gate_batch_means(tape: &Tape, gates: &[Vec<Var>]) -> Vec<Array2> {
    gates
        .iter()
        .map(|layer| {
            let prev = tape.value(layer[0]).rows();
            let mut m = Array2::zeros(prev, layer.len());
            for (n, &g) in layer.iter().enumerate() {
                let gv = tape.value(g);
                for i in 0..prev {
                    m.set(i, n, gv.row(i).iter().sum::<f64>() / gv.cols() as f64);
                }
            }
            m
        })
        .collect()
}

/// Row `b` of `gates[k][n]` summed per position; helper for exact statistics.
pub fn gate_batch_sums(tape: &Tape, gates: &[Vec<Var>]) -> Vec<Array2> {
    gates
        .iter()
        .map(|layer| {
            let prev = tape.value(layer[0]).rows();
            let mut m = Array2::zeros(prev, layer.len());
            for (n, &g) in layer.iter().enumerate() {
                let gv = tape.value(g);
                for i in 0..prev {
                    m.set(i, n, gv.row(i).iter().sum::<f64>());
                }
            }
            m
        })
        .collect()
}

/// Renders a readable summary of a mask, one block per layer.
pub fn describe_mask(mask: &HierMask) -> String {
    let mut s = String::new();
    for (k, m) in mask.layers.iter().enumerate() {
        let _ = writeln!(s, "layer {} ({}x{}, kept {}):", k + 2, m.rows, m.cols, m.kept());
        for r in 0..m.rows {
            let line: String = (0..m.cols).map(|c| if m.get(r, c) { '#' } else { '.' }).collect();
            let _ = writeln!(s, "  {line}");
        }
    }
    s
}
