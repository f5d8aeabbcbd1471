//! Reverse-mode differentiation over [`Array2`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] walks the record in reverse and accumulates
//! `∂loss/∂node` for every node; gradients of nodes bound to parameters can
//! then be pushed into a [`ParameterStore`].

use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::Array2;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside the BCE loss.
pub const PROB_EPS: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Matmul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxColumns(Var),
    NormalizeColumns(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    Scale(Var, f64),
    MulConst(Var, Array2),
    Gather(Var, Vec<usize>),
    GateMix { inputs: Vec<Var>, gate: Var },
    Mean(Vec<Var>),
    Sum(Vec<Var>),
    SumAll(Var),
    Bce(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Array2,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2 {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array2, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; receives a gradient but is not tied to a parameter.
    pub fn leaf(&mut self, value: Array2) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Binds a parameter's current value.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::Matmul(a, b)))
    }

    /// Adds a `1 x cols` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xr, xc) = self.shape(x);
        if self.shape(b) != (1, xc) {
            return Err(Error::shape(
                "add_bias",
                format!("{xr}x{xc} + {:?}", self.shape(b)),
            ));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).row(0).to_vec();
        for r in 0..xr {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    /// Softmax down each column: every column of the result sums to one.
    pub fn softmax_columns(&mut self, x: Var) -> Var {
        let out = softmax_columns(self.value(x));
        self.push(out, Op::SoftmaxColumns(x))
    }

    /// Divides each column by its sum. All-zero columns stay zero.
    pub fn normalize_columns(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let sums = xv.sum_rows();
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                let s = sums.get(0, c);
                *o = if s == 0.0 { 0.0 } else { *o / s };
            }
        }
        self.push(out, Op::NormalizeColumns(x))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x))
    }

    /// Horizontal concatenation of arrays with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p).0 != rows) {
            return Err(Error::shape(
                "concat",
                format!("row counts {rows} vs {}", self.shape(bad).0),
            ));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Array2::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (xr, xc) = self.shape(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= xr) {
            return Err(Error::shape("select_rows", format!("row {bad} of {xr}")));
        }
        let mut out = Array2::zeros(rows.len(), xc);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.value(x).row(r));
        }
        Ok(self.push(out, Op::SelectRows(x, rows.to_vec())))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    /// Elementwise product with a constant array.
    pub fn mul_const(&mut self, x: Var, c: Array2) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::shape(
                "mul_const",
                format!("{:?} * {:?}", self.shape(x), c.shape()),
            ));
        }
        let out = self.value(x).zip_map(&c, |a, b| a * b);
        Ok(self.push(out, Op::MulConst(x, c)))
    }

    /// Row lookup: output row `i` is row `ids[i]` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (tr, tc) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= tr) {
            return Err(Error::shape(
                "gather",
                format!("id {bad} out of range for table with {tr} rows"),
            ));
        }
        let mut out = Array2::zeros(ids.len(), tc);
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.value(table).row(id));
        }
        Ok(self.push(out, Op::Gather(table, ids.to_vec())))
    }

    /// Per-sample convex mixing of expert outputs.
    ///
    /// `inputs[i]` is `B x W`; `gate` is `N x B` with `N = inputs.len()`. Row `b`
    /// of the output is `Σ_i gate[i, b] * inputs[i][b, :]`.
    pub fn gate_mix(&mut self, inputs: &[Var], gate: Var) -> Result<Var> {
        let (gn, gb) = self.shape(gate);
        if inputs.is_empty() || gn != inputs.len() {
            return Err(Error::shape(
                "gate_mix",
                format!("gate {gn}x{gb} for {} inputs", inputs.len()),
            ));
        }
        let (b, w) = self.shape(inputs[0]);
        if b != gb || inputs.iter().any(|&v| self.shape(v) != (b, w)) {
            return Err(Error::shape(
                "gate_mix",
                format!("inputs must all be {b}x{w} with gate {gn}x{gb}"),
            ));
        }
        let mut out = Array2::zeros(b, w);
        let g = self.value(gate);
        for (i, &inp) in inputs.iter().enumerate() {
            let xv = self.value(inp);
            for r in 0..b {
                let gw = g.get(i, r);
                if gw == 0.0 {
                    continue;
                }
                for (o, &x) in out.row_mut(r).iter_mut().zip(xv.row(r)) {
                    *o += gw * x;
                }
            }
        }
        Ok(self.push(
            out,
            Op::GateMix {
                inputs: inputs.to_vec(),
                gate,
            },
        ))
    }

    /// Elementwise mean of equally shaped nodes.
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        let out = self.elementwise_sum("mean", parts)?;
        let k = parts.len() as f64;
        Ok(self.push(out.map(|v| v / k), Op::Mean(parts.to_vec())))
    }

    /// Elementwise sum of equally shaped nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let out = self.elementwise_sum("sum", parts)?;
        Ok(self.push(out, Op::Sum(parts.to_vec())))
    }

    fn elementwise_sum(&self, op: &'static str, parts: &[Var]) -> Result<Array2> {
        let first = *parts.first().ok_or_else(|| Error::shape(op, "no inputs"))?;
        let shape = self.shape(first);
        let mut out = Array2::zeros(shape.0, shape.1);
        for &p in parts {
            if self.shape(p) != shape {
                return Err(Error::shape(op, format!("{:?} vs {:?}", shape, self.shape(p))));
            }
            out.add_assign(self.value(p));
        }
        Ok(out)
    }

    /// Sum of every entry as a `1 x 1` node.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Array2::filled(1, 1, s), Op::SumAll(x))
    }

    /// Per-row binary cross-entropy of probabilities `p` (`B x 1`) against labels.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        let (r, c) = self.shape(p);
        if c != 1 || r != labels.len() {
            return Err(Error::shape(
                "bce",
                format!("{r}x{c} probabilities for {} labels", labels.len()),
            ));
        }
        let out = Array2::column(
            &self
                .value(p)
                .data()
                .iter()
                .zip(labels)
                .map(|(&pv, &y)| bce_value(pv, y))
                .collect::<Vec<_>>(),
        );
        Ok(self.push(out, Op::Bce(p, labels.to_vec())))
    }

    /// Reverse pass from a scalar (`1 x 1`) node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be 1x1, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Array2>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(idx, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    /// Adds gradients of parameter-bound nodes into the store.
    pub fn accumulate_into(&self, grads: &Gradients, store: &mut ParameterStore) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                store.accumulate_grad(*id, g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, dy: &Array2, grads: &mut [Option<Array2>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Matmul(a, b) => {
                let da = dy.matmul_t(self.value(*b))?;
                let db = self.value(*a).t_matmul(dy)?;
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::AddBias(x, b) => {
                acc(grads, *x, dy.clone());
                acc(grads, *b, dy.sum_rows());
            }
            Op::Add(a, b) => {
                acc(grads, *a, dy.clone());
                acc(grads, *b, dy.clone());
            }
            Op::Relu(x) => {
                let dx = self.value(*x).zip_map(dy, |xv, g| if xv > 0.0 { g } else { 0.0 });
                acc(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                acc(grads, *x, y.zip_map(dy, |s, g| g * s * (1.0 - s)));
            }
            Op::SoftmaxColumns(x) => {
                let dot = y.zip_map(dy, |a, b| a * b).sum_rows();
                let mut dx = Array2::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    for c in 0..y.cols() {
                        dx.set(r, c, y.get(r, c) * (dy.get(r, c) - dot.get(0, c)));
                    }
                }
                acc(grads, *x, dx);
            }
            Op::NormalizeColumns(x) => {
                let sums = self.value(*x).sum_rows();
                let dot = y.zip_map(dy, |a, b| a * b).sum_rows();
                let mut dx = Array2::zeros(y.rows(), y.cols());
                for c in 0..y.cols() {
                    let s = sums.get(0, c);
                    if s == 0.0 {
                        continue;
                    }
                    for r in 0..y.rows() {
                        dx.set(r, c, (dy.get(r, c) - dot.get(0, c)) / s);
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Transpose(x) => acc(grads, *x, dy.transpose()),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (pr, pc) = self.shape(p);
                    let mut dp = Array2::zeros(pr, pc);
                    for r in 0..pr {
                        dp.row_mut(r).copy_from_slice(&dy.row(r)[off..off + pc]);
                    }
                    off += pc;
                    acc(grads, p, dp);
                }
            }
            Op::SelectRows(x, rows) => {
                let (xr, xc) = self.shape(*x);
                let mut dx = Array2::zeros(xr, xc);
                for (i, &r) in rows.iter().enumerate() {
                    for (d, &g) in dx.row_mut(r).iter_mut().zip(dy.row(i)) {
                        *d += g;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Scale(x, s) => acc(grads, *x, dy.map(|g| g * s)),
            Op::MulConst(x, c) => acc(grads, *x, dy.zip_map(c, |g, k| g * k)),
            Op::Gather(table, ids) => {
                let (tr, tc) = self.shape(*table);
                let mut dt = Array2::zeros(tr, tc);
                for (i, &id) in ids.iter().enumerate() {
                    for (d, &g) in dt.row_mut(id).iter_mut().zip(dy.row(i)) {
                        *d += g;
                    }
                }
                acc(grads, *table, dt);
            }
            Op::GateMix { inputs, gate } => {
                let g = self.value(*gate);
                let mut dg = Array2::zeros(g.rows(), g.cols());
                for (i, &inp) in inputs.iter().enumerate() {
                    let xv = self.value(inp);
                    let mut dx = Array2::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        let gw = g.get(i, r);
                        let dyr = dy.row(r);
                        let mut dot = 0.0;
                        for ((d, &x), &gy) in dx.row_mut(r).iter_mut().zip(xv.row(r)).zip(dyr) {
                            *d = gw * gy;
                            dot += x * gy;
                        }
                        dg.set(i, r, dot);
                    }
                    acc(grads, inp, dx);
                }
                acc(grads, *gate, dg);
            }
            Op::Mean(parts) => {
                let k = parts.len() as f64;
                for &p in parts {
                    acc(grads, p, dy.map(|g| g / k));
                }
            }
            Op::Sum(parts) => {
                for &p in parts {
                    acc(grads, p, dy.clone());
                }
            }
            Op::SumAll(x) => {
                let (r, c) = self.shape(*x);
                acc(grads, *x, Array2::filled(r, c, dy.get(0, 0)));
            }
            Op::Bce(p, labels) => {
                let pv = self.value(*p);
                let dx = Array2::column(
                    &pv.data()
                        .iter()
                        .zip(labels)
                        .zip(dy.data())
                        .map(|((&pr, &lab), &g)| g * bce_grad(pr, lab))
                        .collect::<Vec<_>>(),
                );
                acc(grads, *p, dx);
            }
        }
        Ok(())
    }
}

fn acc(grads: &mut [Option<Array2>], v: Var, g: Array2) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_columns(x: &Array2) -> Array2 {
    let mut out = x.clone();
    for c in 0..x.cols() {
        let max = (0..x.rows()).map(|r| x.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for r in 0..x.rows() {
            let e = (x.get(r, c) - max).exp();
            out.set(r, c, e);
            total += e;
        }
        for r in 0..x.rows() {
            out.set(r, c, out.get(r, c) / total);
        }
    }
    out
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Binary cross-entropy with the probability clamped away from 0 and 1.
pub fn bce_value(p: f64, y: f64) -> f64 {
    let p = clamp_prob(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// `∂bce/∂p`, evaluated at the clamped probability.
pub fn bce_grad(p: f64, y: f64) -> f64 {
    let p = clamp_prob(p);
    (p - y) / (p * (1.0 - p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_forward_backward() {
        let mut t = Tape::new();
        let x = t.leaf(Array2::from_rows(&[vec![-1.0, 2.0]]));
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 2.0]);
        let s = t.sum_all(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_columns_symmetric() {
        let mut t = Tape::new();
        let x = t.leaf(Array2::zeros(2, 1));
        let y = t.softmax_columns(x);
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn bce_values() {
        assert!((bce_value(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_value(1.0, 1.0) <= -(1.0f64 - 1e-7).ln() + 1e-15);
        assert!(bce_value(0.0, 0.0) <= -(1.0f64 - 1e-7).ln() + 1e-15);
        assert!(bce_value(0.0, 1.0).is_finite());
    }

    #[test]
    fn bce_gradient_matches_finite_difference() {
        let (p, y, h) = (0.3, 1.0, 1e-6);
        let fd = (bce_value(p + h, y) - bce_value(p - h, y)) / (2.0 * h);
        let an = bce_grad(p, y);
        assert!(((fd - an) / an).abs() < 1e-5, "fd {fd} an {an}");
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        let mut t = Tape::new();
        let x = t.leaf(Array2::filled(1, 1, 3.0));
        let y = t.add(x, x).unwrap();
        let s = t.sum_all(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().get(0, 0), 2.0);
    }

    #[test]
    fn shape_errors_name_operation() {
        let mut t = Tape::new();
        let a = t.leaf(Array2::zeros(2, 3));
        let b = t.leaf(Array2::zeros(2, 2));
        let e = t.add_bias(a, b).unwrap_err().to_string();
        assert!(e.contains("add_bias"), "{e}");
        let e = t.gather(b, &[5]).unwrap_err().to_string();
        assert!(e.contains("gather"), "{e}");
    }

    #[test]
    fn normalize_columns_keeps_zero_columns() {
        let mut t = Tape::new();
        let x = t.leaf(Array2::from_rows(&[vec![1.0, 0.0], vec![3.0, 0.0]]));
        let y = t.normalize_columns(x);
        assert_eq!(t.value(y).data(), &[0.25, 0.0, 0.75, 0.0]);
    }
}
