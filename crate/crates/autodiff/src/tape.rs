//! Reverse-mode tape over 2-D `f64` arrays.
//!
//! Every tensor on the tape is an `[rows, cols]` matrix; sequences are stacked
//! as rows, single vectors are `[1, n]`. Forward values are computed eagerly
//! when an op is recorded, `backward` replays the tape in reverse and returns
//! accumulated gradients for parameter leaves.

use std::collections::HashMap;

use ndarray::{s, ArcArray2, Array2, ArrayView2, Axis};

use crate::params::{ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    MatMul(Var, Var),
    Add(Var, Var),
    /// `[n, m] + [1, m]` row broadcast.
    AddRow(Var, Var),
    Mul(Var, Var),
    /// Multiply by a `[1, 1]` node, broadcast over all elements.
    MulScalar(Var, Var),
    Scale(Var, f64),
    Recip(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SumAll(Var),
    Pick(Var, usize, usize),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    /// `layer_norm(x, gamma, beta, eps)` normalizing each row.
    LayerNorm(Var, Var, Var, f64),
}

struct Node {
    value: ArcArray2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to parameter leaves.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: HashMap<ParamId, Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        self.by_param.iter().map(|(id, g)| (*id, g))
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    /// Element-wise sum with another gradient set (for batch accumulation).
    pub fn accumulate(&mut self, other: Gradients) {
        for (id, g) in other.by_param {
            match self.by_param.entry(id) {
                std::collections::hash_map::Entry::Occupied(mut e) => *e.get_mut() += &g,
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(g);
                }
            }
        }
    }

    /// Scale every gradient in place.
    pub fn scale(&mut self, factor: f64) {
        for g in self.by_param.values_mut() {
            *g *= factor;
        }
    }

    /// L2 norm over all gradient elements.
    pub fn global_norm(&self) -> f64 {
        self.by_param
            .values()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Recording tape. One tape per forward pass; drop it to free intermediates.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
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

    pub fn value(&self, v: Var) -> ArrayView2<'_, f64> {
        self.nodes[v.0].value.view()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let d = self.nodes[v.0].value.dim();
        (d.0, d.1)
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: value.into_shared(),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// Constant `[1, n]` row vector.
    pub fn constant_row(&mut self, row: &[f64]) -> Var {
        let n = row.len();
        self.constant(Array2::from_shape_vec((1, n), row.to_vec()).expect("row shape"))
    }

    /// Parameter leaf. Repeated calls for the same parameter return the same
    /// node so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = store.shared(id);
        self.nodes.push(Node {
            value,
            op: Op::Leaf { param: Some(id) },
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, br, "matmul shape mismatch: [{ar},{ac}] x [{br},{bc}]");
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(value.to_owned(), Op::Add(a, b), ng)
    }

    /// `[n, m] + [1, m]`, the bias-add pattern.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (_, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!((br, bc), (1, ac), "add_row expects [1, {ac}] bias");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::AddRow(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(value.to_owned(), Op::Mul(a, b), ng)
    }

    /// Broadcast-multiply by a `[1, 1]` scalar node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "mul_scalar expects [1,1] scalar");
        let sv = self.nodes[s.0].value[[0, 0]];
        let value = &self.nodes[a.0].value * sv;
        let ng = self.needs(a) || self.needs(s);
        self.push(value.to_owned(), Op::MulScalar(a, s), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value * c;
        let ng = self.needs(a);
        self.push(value.to_owned(), Op::Scale(a, c), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Element-wise reciprocal. Caller guarantees non-zero inputs.
    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| 1.0 / x);
        let ng = self.needs(a);
        self.push(value, Op::Recip(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::tanh);
        let ng = self.needs(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.needs(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(gelu_tanh);
        let ng = self.needs(a);
        self.push(value, Op::Gelu(a), ng)
    }

    /// Numerically stable softmax over each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax(&self.nodes[a.0].value.view());
        let ng = self.needs(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    /// Numerically stable log-softmax over each row.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut value = x.to_owned();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            row.mapv_inplace(|v| v - lse);
        }
        let ng = self.needs(a);
        self.push(value, Op::LogSoftmaxRows(a), ng)
    }

    /// Sum of all elements, as `[1, 1]`.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        let ng = self.needs(a);
        self.push(value, Op::SumAll(a), ng)
    }

    /// Extract one element as `[1, 1]`.
    pub fn pick(&mut self, a: Var, i: usize, j: usize) -> Var {
        let value = Array2::from_elem((1, 1), self.nodes[a.0].value[[i, j]]);
        let ng = self.needs(a);
        self.push(value, Op::Pick(a, i, j), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ar, _) = self.shape(a);
        let (br, _) = self.shape(b);
        assert_eq!(ar, br, "concat_cols row mismatch");
        let value = ndarray::concatenate(
            Axis(1),
            &[self.nodes[a.0].value.view(), self.nodes[b.0].value.view()],
        )
        .expect("concat_cols");
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::ConcatCols(a, b), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows");
        let ng = parts.iter().any(|v| self.needs(*v));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.nodes[a.0]
            .value
            .slice(s![start..end, ..])
            .to_owned();
        let ng = self.needs(a);
        self.push(value, Op::SliceRows(a, start, end), ng)
    }

    /// A single row as `[1, m]`.
    pub fn row(&mut self, a: Var, i: usize) -> Var {
        self.slice_rows(a, i, i + 1)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.nodes[a.0]
            .value
            .slice(s![.., start..end])
            .to_owned();
        let ng = self.needs(a);
        self.push(value, Op::SliceCols(a, start, end), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.t().to_owned();
        let ng = self.needs(a);
        self.push(value, Op::Transpose(a), ng)
    }

    /// Row lookup (embedding gather): `table[[idx, :]]` for each index.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let t = &self.nodes[table.0].value;
        let (rows, cols) = (t.nrows(), t.ncols());
        let mut value = Array2::zeros((indices.len(), cols));
        for (out, &idx) in indices.iter().enumerate() {
            assert!(idx < rows, "gather index {idx} out of range {rows}");
            value.row_mut(out).assign(&t.row(idx));
        }
        let ng = self.needs(table);
        self.push(value, Op::GatherRows(table, indices.to_vec()), ng)
    }

    /// Layer normalization of each row, with learned `gamma`/`beta` (`[1, m]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (_, m) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, m), "layer_norm gamma shape");
        assert_eq!(self.shape(beta), (1, m), "layer_norm beta shape");
        let xs = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let mut value = xs.to_owned();
        for mut row in value.rows_mut() {
            let mean = row.mean().unwrap();
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            let denom = (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) / denom);
        }
        let value = &value * g + b;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(value, Op::LayerNorm(x, gamma, beta, eps), ng)
    }

    /// Mean of all elements, as `[1, 1]`.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / (r * c) as f64)
    }

    /// Negative log-likelihood of one target in a row of logits:
    /// `-log_softmax(logits)[row, target]`.
    pub fn nll(&mut self, logits: Var, row: usize, target: usize) -> Var {
        let ls = self.log_softmax_rows(logits);
        let p = self.pick(ls, row, target);
        self.scale(p, -1.0)
    }

    /// Normalize a `[1, n]` vector of non-negative weights to sum to one.
    pub fn normalize_row(&mut self, a: Var) -> Var {
        let total = self.sum_all(a);
        let inv = self.recip(total);
        self.mul_scalar(a, inv)
    }

    /// Reverse-mode sweep from a `[1, 1]` loss node. Returns gradients for
    /// every parameter leaf reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(grad) = grads[i].take() else { continue };
            self.propagate(i, &grad, &mut grads);
            // Param leaves keep their gradient for collection below.
            if matches!(self.nodes[i].op, Op::Leaf { param: Some(_) }) {
                grads[i] = Some(grad);
            }
        }

        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(g) = grads[i].take() {
                    out.by_param.insert(id, g);
                }
            }
        }
        out
    }

    fn accum(&self, grads: &mut [Option<Array2<f64>>], v: Var, contribution: Array2<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &contribution,
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, i: usize, grad: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accum(grads, *a, grad.dot(&val(*b).t()));
                }
                if self.needs(*b) {
                    self.accum(grads, *b, val(*a).t().dot(grad));
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, grad.clone());
                self.accum(grads, *b, grad.clone());
            }
            Op::AddRow(a, b) => {
                self.accum(grads, *a, grad.clone());
                let summed = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.accum(grads, *b, summed);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accum(grads, *a, (grad * &val(*b).view()).to_owned());
                }
                if self.needs(*b) {
                    self.accum(grads, *b, (grad * &val(*a).view()).to_owned());
                }
            }
            Op::MulScalar(a, s) => {
                let sv = val(*s)[[0, 0]];
                if self.needs(*a) {
                    self.accum(grads, *a, grad * sv);
                }
                if self.needs(*s) {
                    let contrib = (grad * &val(*a).view()).sum();
                    self.accum(grads, *s, Array2::from_elem((1, 1), contrib));
                }
            }
            Op::Scale(a, c) => self.accum(grads, *a, grad * *c),
            Op::Recip(a) => {
                let y = &self.nodes[i].value;
                self.accum(grads, *a, (-grad * y * y).to_owned());
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                self.accum(grads, *a, (grad * &y.mapv(|t| 1.0 - t * t)).to_owned());
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                self.accum(grads, *a, (grad * &y.mapv(|s| s * (1.0 - s))).to_owned());
            }
            Op::Gelu(a) => {
                let x = val(*a);
                self.accum(grads, *a, (grad * &x.mapv(gelu_tanh_grad)).to_owned());
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let mut out = (grad * y).to_owned();
                for (mut orow, yrow) in out.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = orow.sum();
                    orow.zip_mut_with(&yrow, |o, &yv| *o -= dot * yv);
                }
                self.accum(grads, *a, out);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &self.nodes[i].value; // log-probabilities
                let mut out = grad.clone();
                for (mut orow, yrow) in out.rows_mut().into_iter().zip(y.rows()) {
                    let gsum: f64 = orow.sum();
                    orow.zip_mut_with(&yrow, |o, &lv| *o -= gsum * lv.exp());
                }
                self.accum(grads, *a, out);
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                self.accum(grads, *a, Array2::from_elem((r, c), grad[[0, 0]]));
            }
            Op::Pick(a, pi, pj) => {
                let (r, c) = self.shape(*a);
                let mut g = Array2::zeros((r, c));
                g[[*pi, *pj]] = grad[[0, 0]];
                self.accum(grads, *a, g);
            }
            Op::ConcatCols(a, b) => {
                let (_, ac) = self.shape(*a);
                self.accum(grads, *a, grad.slice(s![.., ..ac]).to_owned());
                self.accum(grads, *b, grad.slice(s![.., ac..]).to_owned());
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (pr, _) = self.shape(*p);
                    self.accum(grads, *p, grad.slice(s![offset..offset + pr, ..]).to_owned());
                    offset += pr;
                }
            }
            Op::SliceRows(a, start, end) => {
                let (r, c) = self.shape(*a);
                let mut g = Array2::zeros((r, c));
                g.slice_mut(s![*start..*end, ..]).assign(grad);
                self.accum(grads, *a, g);
            }
            Op::SliceCols(a, start, end) => {
                let (r, c) = self.shape(*a);
                let mut g = Array2::zeros((r, c));
                g.slice_mut(s![.., *start..*end]).assign(grad);
                self.accum(grads, *a, g);
            }
            Op::Transpose(a) => {
                self.accum(grads, *a, grad.t().to_owned());
            }
            Op::GatherRows(table, indices) => {
                let (r, c) = self.shape(*table);
                let mut g = Array2::zeros((r, c));
                for (out, &idx) in indices.iter().enumerate() {
                    let mut dst = g.row_mut(idx);
                    dst += &grad.row(out);
                }
                self.accum(grads, *table, g);
            }
            Op::LayerNorm(x, gamma, beta, eps) => {
                let xs = val(*x);
                let g = val(*gamma);
                let m = xs.ncols() as f64;
                // Recompute per-row normalized values.
                let mut xhat = xs.to_owned();
                let mut denoms = Vec::with_capacity(xs.nrows());
                for mut row in xhat.rows_mut() {
                    let mean = row.mean().unwrap();
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
                    let denom = (var + eps).sqrt();
                    row.mapv_inplace(|v| (v - mean) / denom);
                    denoms.push(denom);
                }
                if self.needs(*gamma) {
                    let dg = (grad * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accum(grads, *gamma, dg);
                }
                if self.needs(*beta) {
                    let db = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accum(grads, *beta, db);
                }
                if self.needs(*x) {
                    let mut dx = Array2::zeros(xs.raw_dim());
                    for (r, denom) in denoms.iter().enumerate() {
                        let grow = grad.row(r);
                        let xrow = xhat.row(r);
                        // h = dL/dxhat for this row
                        let h: Vec<f64> = grow
                            .iter()
                            .zip(g.row(0).iter())
                            .map(|(gv, gm)| gv * gm)
                            .collect();
                        let h_mean = h.iter().sum::<f64>() / m;
                        let hx_mean =
                            h.iter().zip(xrow.iter()).map(|(hv, xv)| hv * xv).sum::<f64>() / m;
                        for (j, slot) in dx.row_mut(r).iter_mut().enumerate() {
                            *slot = (h[j] - h_mean - xrow[j] * hx_mean) / denom;
                        }
                    }
                    self.accum(grads, *x, dx);
                }
            }
        }
    }
}

fn softmax(x: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x.powi(3))).tanh())
}

fn gelu_tanh_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x.powi(3));
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
