//! Minimal reverse-mode autodiff over `f64` matrices.
//!
//! A [`Tape`] evaluates eagerly and records each op; [`Tape::backward`]
//! walks the record in reverse. Parameters live in a [`ParamStore`] and are
//! referenced, not copied, by the tape. Ops are coarse (linear, layer norm,
//! multi-head attention, ...) to keep node counts and copies low.

use ndarray::{s, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub type Mat = Array2<f64>;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Mat,
    /// Receives weight decay (projection matrices only).
    pub decay: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat, decay: bool) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), value, decay });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }
}

/// Gradient buffers laid out like a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(pub Vec<Mat>);

impl Grads {
    pub fn zeros(store: &ParamStore) -> Self {
        Grads(store.entries.iter().map(|e| Mat::zeros(e.value.raw_dim())).collect())
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for a in &mut self.0 {
            a.mapv_inplace(|v| v * k);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0.iter().map(|a| a.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|a| a.iter().all(|v| v.is_finite()))
    }
}

/// Normal(0, std) truncated to ±2 std.
pub fn truncated_normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    })
}

// ---------------------------------------------------------------------------
// Shared numeric kernels (also used by the cached decoding path)
// ---------------------------------------------------------------------------

pub fn linear(x: &Mat, w: &Mat, b: Option<&Mat>) -> Mat {
    let mut y = x.dot(w);
    if let Some(b) = b {
        y += &b.row(0);
    }
    y
}

/// Row-wise layer norm; returns (output, normalized input, 1/std per row).
pub fn layer_norm(x: &Mat, g: &Mat, b: &Mat) -> (Mat, Mat, Vec<f64>) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        let is = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * is);
        inv.push(is);
    }
    let mut y = &xhat * &g.row(0);
    y += &b.row(0);
    (y, xhat, inv)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// In-place softmax over the allowed entries of each row; disallowed entries
/// become exactly zero. Rows with nothing allowed become all zero.
pub fn masked_softmax_rows(s: &mut Mat, allowed: impl Fn(usize, usize) -> bool) {
    for (i, mut row) in s.rows_mut().into_iter().enumerate() {
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if allowed(i, j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if allowed(i, j) {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

pub fn log_softmax_row(row: ArrayView1<f64>) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value {
    Owned(Mat),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Scale(Var, f64),
    RowSlice { x: Var, start: usize },
    LayerNorm { x: Var, g: Var, b: Var, xhat: Mat, inv_std: Vec<f64> },
    Relu(Var),
    Gelu(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Mat> },
    SegmentMax { x: Var, argmax: Vec<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatCols(Var, Var),
    Mul { x: Var, mask: Mat },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Mat },
    Transpose(Var),
    RowSquaredError { x: Var, row: usize, target: Vec<f64> },
}

struct Node {
    value: Value,
    op: Op,
}

/// Which keys each query may attend to.
#[derive(Clone, Debug, Default)]
pub struct AttnMask {
    pub key_valid: Option<Vec<bool>>,
    /// Query `i` sees keys `j <= i` only.
    pub causal: bool,
}

impl AttnMask {
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        if self.causal && j > i {
            return false;
        }
        self.key_valid.as_ref().is_none_or(|m| m[j])
    }
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::with_capacity(256) }
    }

    pub fn value(&self, v: Var) -> &Mat {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param(id) });
        Var(self.nodes.len() - 1)
    }

    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Var {
        let wv = self.param(w);
        let bv = b.map(|b| self.param(b));
        let y = linear(self.value(x), self.value(wv), bv.map(|b| self.value(b)));
        self.push(y, Op::Linear { x, w: wv, b: bv })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) + self.value(b);
        self.push(y, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let y = self.value(x) * k;
        self.push(y, Op::Scale(x, k))
    }

    pub fn row_slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let y = self.value(x).slice(s![start..start + len, ..]).to_owned();
        self.push(y, Op::RowSlice { x, start })
    }

    pub fn layer_norm(&mut self, x: Var, g: ParamId, b: ParamId) -> Var {
        let gv = self.param(g);
        let bv = self.param(b);
        let (y, xhat, inv_std) = layer_norm(self.value(x), self.value(gv), self.value(bv));
        self.push(y, Op::LayerNorm { x, g: gv, b: bv, xhat, inv_std })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v.max(0.0));
        self.push(y, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(gelu);
        self.push(y, Op::Gelu(x))
    }

    /// Multi-head scaled dot-product attention. `q` is [m × d], `k`, `v` are [n × d].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &AttnMask) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let d = qm.ncols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros((qm.nrows(), d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut sc = qm.slice(cols).dot(&km.slice(cols).t());
            sc.mapv_inplace(|x| x * scale);
            masked_softmax_rows(&mut sc, |i, j| mask.allowed(i, j));
            out.slice_mut(cols).assign(&sc.dot(&vm.slice(cols)));
            probs.push(sc);
        }
        self.push(out, Op::Attention { q, k, v, heads, probs })
    }

    /// Per-group column-wise max over rows with `row_valid`; empty groups give 0.
    pub fn segment_max(&mut self, x: Var, groups: &[usize], num_groups: usize, row_valid: &[bool]) -> Var {
        let xm = self.value(x);
        let d = xm.ncols();
        let mut out = Mat::zeros((num_groups, d));
        let mut argmax = vec![usize::MAX; num_groups * d];
        for (r, row) in xm.rows().into_iter().enumerate() {
            if !row_valid[r] {
                continue;
            }
            let g = groups[r];
            for (c, &v) in row.iter().enumerate() {
                let a = &mut argmax[g * d + c];
                if *a == usize::MAX || v > out[[g, c]] {
                    *a = r;
                    out[[g, c]] = v;
                }
            }
        }
        self.push(out, Op::SegmentMax { x, argmax })
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let y = self.value(x).select(Axis(0), idx);
        self.push(y, Op::GatherRows { x, idx: idx.to_vec() })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let y = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()]).expect("row counts agree");
        self.push(y, Op::ConcatCols(a, b))
    }

    /// Elementwise product with a constant (dropout masks, zeroing rows).
    pub fn mul_const(&mut self, x: Var, mask: Mat) -> Var {
        let y = self.value(x) * &mask;
        self.push(y, Op::Mul { x, mask })
    }

    /// Mean over rows of `-log softmax(row)[target]`; output is [1 × 1].
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lm = self.value(logits);
        let mut probs = lm.clone();
        let mut total = 0.0;
        for (t, mut row) in probs.rows_mut().into_iter().enumerate() {
            let ls = log_softmax_row(row.view());
            total -= ls[targets[t]];
            for (p, l) in row.iter_mut().zip(ls) {
                *p = l.exp();
            }
        }
        let loss = total / targets.len() as f64;
        self.push(Mat::from_elem((1, 1), loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs })
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let y = self.value(x).t().to_owned();
        self.push(y, Op::Transpose(x))
    }

    /// Mean squared error of one row against a target; output is [1 × 1].
    pub fn row_squared_error(&mut self, x: Var, row: usize, target: &[f64]) -> Var {
        let r = self.value(x).row(row);
        let loss = r.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / target.len() as f64;
        self.push(Mat::from_elem((1, 1), loss), Op::RowSquaredError { x, row, target: target.to_vec() })
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    /// Gradients of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads = Grads::zeros(self.params);
        let mut g: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(Mat::ones((1, 1)));

        fn acc(g: &mut [Option<Mat>], v: Var, d: Mat) {
            match &mut g[v.0] {
                Some(e) => *e += &d,
                slot => *slot = Some(d),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(dy) = g[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param(id) => grads.0[id.0] += &dy,
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    acc(&mut g, *w, xv.t().dot(&dy));
                    if let Some(b) = b {
                        acc(&mut g, *b, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    acc(&mut g, *x, dy.dot(&wv.t()));
                }
                Op::Add(a, b) => {
                    acc(&mut g, *b, dy.clone());
                    acc(&mut g, *a, dy);
                }
                Op::Scale(x, k) => acc(&mut g, *x, dy * *k),
                Op::RowSlice { x, start } => {
                    let mut dx = Mat::zeros(self.value(*x).raw_dim());
                    dx.slice_mut(s![*start..*start + dy.nrows(), ..]).assign(&dy);
                    acc(&mut g, *x, dx);
                }
                Op::LayerNorm { x, g: gain, b, xhat, inv_std } => {
                    let gv = self.value(*gain);
                    acc(&mut g, *gain, (&dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut g, *b, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dxhat = &dy * &gv.row(0);
                    let n = dxhat.ncols() as f64;
                    let mut dx = Mat::zeros(dxhat.raw_dim());
                    for r in 0..dxhat.nrows() {
                        let dr = dxhat.row(r);
                        let xr = xhat.row(r);
                        let s1 = dr.sum();
                        let s2 = dr.dot(&xr);
                        let k = inv_std[r] / n;
                        for c in 0..dr.len() {
                            dx[[r, c]] = k * (n * dr[c] - s1 - xr[c] * s2);
                        }
                    }
                    acc(&mut g, *x, dx);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let dx = ndarray::Zip::from(&dy).and(xv).map_collect(|&d, &v| if v > 0.0 { d } else { 0.0 });
                    acc(&mut g, *x, dx);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let dx = ndarray::Zip::from(&dy).and(xv).map_collect(|&d, &v| d * gelu_grad(v));
                    acc(&mut g, *x, dx);
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (qm, km, vm) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qm.ncols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Mat::zeros(qm.raw_dim());
                    let mut dk = Mat::zeros(km.raw_dim());
                    let mut dv = Mat::zeros(vm.raw_dim());
                    for (h, p) in probs.iter().enumerate() {
                        let cols = s![.., h * dh..(h + 1) * dh];
                        let doh = dy.slice(cols);
                        dv.slice_mut(cols).assign(&p.t().dot(&doh));
                        let dp = doh.dot(&vm.slice(cols).t());
                        let mut ds = p * &dp;
                        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let sum = row.sum();
                            row.zip_mut_with(&prow, |v, &pp| *v -= pp * sum);
                        }
                        ds.mapv_inplace(|x| x * scale);
                        dq.slice_mut(cols).assign(&ds.dot(&km.slice(cols)));
                        dk.slice_mut(cols).assign(&ds.t().dot(&qm.slice(cols)));
                    }
                    acc(&mut g, *v, dv);
                    acc(&mut g, *k, dk);
                    acc(&mut g, *q, dq);
                }
                Op::SegmentMax { x, argmax } => {
                    let mut dx = Mat::zeros(self.value(*x).raw_dim());
                    let d = dy.ncols();
                    for (slot, &r) in argmax.iter().enumerate() {
                        if r != usize::MAX {
                            dx[[r, slot % d]] += dy[[slot / d, slot % d]];
                        }
                    }
                    acc(&mut g, *x, dx);
                }
                Op::GatherRows { x, idx } => {
                    let mut dx = Mat::zeros(self.value(*x).raw_dim());
                    for (i, &r) in idx.iter().enumerate() {
                        let mut row = dx.row_mut(r);
                        row += &dy.row(i);
                    }
                    acc(&mut g, *x, dx);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).ncols();
                    acc(&mut g, *b, dy.slice(s![.., ca..]).to_owned());
                    acc(&mut g, *a, dy.slice(s![.., ..ca]).to_owned());
                }
                Op::Mul { x, mask } => acc(&mut g, *x, dy * mask),
                Op::CrossEntropy { logits, targets, probs } => {
                    let k = dy[[0, 0]] / targets.len() as f64;
                    let mut dl = probs.clone();
                    for (t, &tok) in targets.iter().enumerate() {
                        dl[[t, tok]] -= 1.0;
                    }
                    dl.mapv_inplace(|v| v * k);
                    acc(&mut g, *logits, dl);
                }
                Op::Transpose(x) => acc(&mut g, *x, dy.t().to_owned()),
                Op::RowSquaredError { x, row, target } => {
                    let xv = self.value(*x);
                    let k = 2.0 * dy[[0, 0]] / target.len() as f64;
                    let mut dx = Mat::zeros(xv.raw_dim());
                    for (c, t) in target.iter().enumerate() {
                        dx[[*row, c]] = k * (xv[[*row, c]] - t);
                    }
                    acc(&mut g, *x, dx);
                }
            }
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of `f` against the tape gradient.
    fn check(store: &mut ParamStore, f: impl Fn(&mut Tape) -> Var, tol: f64) {
        let analytic = {
            let mut t = Tape::new(store);
            let l = f(&mut t);
            t.backward(l)
        };
        let h = 1e-6;
        for p in 0..store.len() {
            let n = store.entries()[p].value.len();
            for i in 0..n {
                let orig = store.entries()[p].value.as_slice().unwrap()[i];
                store.entries_mut()[p].value.as_slice_mut().unwrap()[i] = orig + h;
                let lp = {
                    let mut t = Tape::new(store);
                    let l = f(&mut t);
                    t.scalar(l)
                };
                store.entries_mut()[p].value.as_slice_mut().unwrap()[i] = orig - h;
                let lm = {
                    let mut t = Tape::new(store);
                    let l = f(&mut t);
                    t.scalar(l)
                };
                store.entries_mut()[p].value.as_slice_mut().unwrap()[i] = orig;
                let num = (lp - lm) / (2.0 * h);
                let ana = analytic.0[p].as_slice().unwrap()[i];
                let err = (num - ana).abs() / (num.abs() + ana.abs()).max(1e-7);
                assert!(err < tol, "param {} idx {i}: numeric {num} analytic {ana}", store.entries()[p].name);
            }
        }
    }

    #[test]
    fn attention_layernorm_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let x = store.add("x", truncated_normal(&mut rng, 5, 4, 1.0), false);
        let w = store.add("w", truncated_normal(&mut rng, 4, 4, 0.5), true);
        let b = store.add("b", truncated_normal(&mut rng, 1, 4, 0.5), false);
        let g = store.add("g", truncated_normal(&mut rng, 1, 4, 1.0), false);
        let gb = store.add("gb", truncated_normal(&mut rng, 1, 4, 0.1), false);
        let out = store.add("out", truncated_normal(&mut rng, 8, 3, 0.5), true);
        let groups = vec![0, 0, 1, 1, 1];
        let valid = vec![true, false, true, true, true];
        let mask = AttnMask { key_valid: Some(valid.clone()), causal: true };
        check(
            &mut store,
            |t| {
                let xv = t.param(x);
                let h = t.linear(xv, w, Some(b));
                let h = t.layer_norm(h, g, gb);
                let h = t.gelu(h);
                let a = t.attention(h, h, xv, 2, &mask);
                let a = t.add(a, h);
                let p = t.segment_max(a, &groups, 2, &valid);
                let p = t.gather_rows(p, &groups);
                let c = t.concat_cols(a, p);
                let lg = t.linear(c, out, None);
                t.cross_entropy(lg, &[0, 2, 1, 1, 0])
            },
            1e-6,
        );
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let mut s = Mat::from_shape_vec((2, 3), vec![1.0, 50.0, 2.0, 0.0, 0.0, 0.0]).unwrap();
        masked_softmax_rows(&mut s, |_, j| j != 1);
        assert_eq!(s[[0, 1]], 0.0);
        assert!((s.row(0).sum() - 1.0).abs() < 1e-15);
        assert!((s[[1, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn truncated_normal_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = truncated_normal(&mut rng, 100, 100, 0.02);
        assert!(m.iter().all(|v| v.abs() <= 0.04));
        let std = (m.iter().map(|v| v * v).sum::<f64>() / m.len() as f64).sqrt();
        assert!((std - 0.0176).abs() < 0.001, "{std}");
    }
}
