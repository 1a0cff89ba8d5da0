//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation eagerly (values are computed on push)
//! and [`Tape::backward`] walks the records in reverse. Only the handful of
//! operations the diffusion transformer needs are supported; every matrix is
//! two-dimensional, vectors are `1 x d` rows.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One attention neighbourhood: every query row attends to exactly the listed
/// key rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnGroup {
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, f64),
    LayerNorm(Var, Vec<f64>),
    /// Input and the derivative at each element, kept when a gradient is needed.
    Gelu(Var, Option<Mat>),
    Silu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: Arc<Vec<AttnGroup>>,
        heads: usize,
        probs: Vec<Mat>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    MeanRows(Var),
    Mse {
        pred: Var,
        target: Mat,
        row_weights: Option<Vec<f64>>,
        denom: f64,
    },
    BceWithLogits(Var, Vec<f64>),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], kept only for leaves.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    // tanh through a single exp; saturates cleanly to +-1 at both ends
    let th = 1.0 - 2.0 / ((2.0 * u).exp() + 1.0);
    let y = 0.5 * x * (1.0 + th);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise layer normalisation without affine parameters. Returns the
/// normalised matrix and the per-row inverse standard deviations.
pub fn layer_norm(x: &Mat) -> (Mat, Vec<f64>) {
    let d = x.ncols() as f64;
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * is);
        inv.push(is);
    }
    (out, inv)
}

fn softmax_rows(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Copy the `dh` columns starting at `off` of the listed rows of a row-major
/// `(_, d)` buffer into a contiguous `(rows, dh)` matrix.
fn gather_head(src: &[f64], d: usize, rows: &[usize], off: usize, dh: usize) -> Mat {
    let mut out = Vec::with_capacity(rows.len() * dh);
    for &r in rows {
        out.extend_from_slice(&src[r * d + off..][..dh]);
    }
    Mat::from_shape_vec((rows.len(), dh), out).expect("sized")
}

fn scatter_head(dst: &mut [f64], d: usize, rows: &[usize], off: usize, block: &Mat) {
    let dh = block.ncols();
    for (&r, row) in rows.iter().zip(block.rows()) {
        for (t, v) in dst[r * d + off..][..dh].iter_mut().zip(row) {
            *t += v;
        }
    }
}

fn row_major(m: &Mat) -> std::borrow::Cow<'_, [f64]> {
    match m.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(m.iter().copied().collect()),
    }
}

/// Multi-head attention probabilities, one `queries x keys` matrix per
/// `(group, head)` pair in group-major order.
pub fn attention_probs(q: &Mat, k: &Mat, groups: &[AttnGroup], heads: usize) -> Vec<Mat> {
    let d = q.ncols();
    assert_eq!(d % heads, 0, "width {d} not divisible by {heads} heads");
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qs, ks) = (row_major(q), row_major(k));
    let mut probs = Vec::with_capacity(groups.len() * heads);
    for g in groups {
        for h in 0..heads {
            let qg = gather_head(&qs, d, &g.queries, h * dh, dh);
            let kg = gather_head(&ks, d, &g.keys, h * dh, dh);
            let mut scores = qg.dot(&kg.t());
            scores *= scale;
            softmax_rows(&mut scores);
            probs.push(scores);
        }
    }
    probs
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input whose gradient is kept after `backward`.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Broadcast-add a `1 x d` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        let value = self.value(x) + self.value(row);
        let rg = self.rg(x) || self.rg(row);
        self.push(value, Op::AddRow(x, row), rg)
    }

    /// Broadcast-multiply every row of `x` by a `1 x d` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        let value = self.value(x) * self.value(row);
        let rg = self.rg(x) || self.rg(row);
        self.push(value, Op::MulRow(x, row), rg)
    }

    /// `scale * x + offset` elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Var {
        let value = self.value(x).mapv(|v| scale * v + offset);
        let rg = self.rg(x);
        self.push(value, Op::Affine(x, scale), rg)
    }

    /// `x @ w + b` with `b` a `1 x out` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn layer_norm(&mut self, x: Var) -> Var {
        let (value, inv) = layer_norm(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::LayerNorm(x, inv), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let rg = self.rg(x);
        let xv = self.value(x);
        let (value, deriv) = if rg {
            let mut deriv = Mat::zeros(xv.dim());
            let mut value = Mat::zeros(xv.dim());
            ndarray::Zip::from(&mut value)
                .and(&mut deriv)
                .and(xv)
                .for_each(|y, dy, &v| {
                    (*y, *dy) = gelu_parts(v);
                });
            (value, Some(deriv))
        } else {
            (xv.mapv(|v| gelu_parts(v).0), None)
        };
        self.push(value, Op::Gelu(x, deriv), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v * sigmoid(v));
        let rg = self.rg(x);
        self.push(value, Op::Silu(x), rg)
    }

    /// Grouped multi-head scaled dot-product attention. Rows of `q` not listed
    /// in any group produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: Arc<Vec<AttnGroup>>,
        heads: usize,
    ) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qm.ncols(), km.ncols());
        assert_eq!(km.dim(), vm.dim());
        let d = qm.ncols();
        let dh = d / heads;
        let probs = attention_probs(qm, km, &groups, heads);
        let vs = row_major(vm);
        let mut out = vec![0.0; qm.nrows() * d];
        for (gi, g) in groups.iter().enumerate() {
            for h in 0..heads {
                let vg = gather_head(&vs, d, &g.keys, h * dh, dh);
                scatter_head(
                    &mut out,
                    d,
                    &g.queries,
                    h * dh,
                    &probs[gi * heads + h].dot(&vg),
                );
            }
        }
        let out = Mat::from_shape_vec((qm.nrows(), d), out).expect("sized");
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Attention maps recorded by an attention node.
    pub fn attention_maps(&self, v: Var) -> Option<&[Mat]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let value = self.value(x).select(Axis(0), &rows);
        let rg = self.rg(x);
        self.push(value, Op::GatherRows(x, rows), rg)
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts differ");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(value, Op::ConcatRows(parts), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(x);
        self.push(value, Op::SliceCols(x, start), rg)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .mean_axis(Axis(0))
            .expect("mean of empty matrix")
            .insert_axis(Axis(0));
        let rg = self.rg(x);
        self.push(value, Op::MeanRows(x), rg)
    }

    /// Mean squared error against a constant target. With `row_weights`, row
    /// `r` contributes with weight `w[r]` and the mean is taken over the
    /// weighted element count.
    pub fn mse(&mut self, pred: Var, target: Mat, row_weights: Option<Vec<f64>>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.dim(), target.dim());
        let cols = p.ncols() as f64;
        let (num, denom) = match &row_weights {
            Some(w) => {
                assert_eq!(w.len(), p.nrows());
                let mut num = 0.0;
                for ((pr, tr), &wr) in p.rows().into_iter().zip(target.rows()).zip(w) {
                    if wr != 0.0 {
                        num += wr
                            * pr.iter()
                                .zip(tr)
                                .map(|(a, b)| (a - b) * (a - b))
                                .sum::<f64>();
                    }
                }
                (num, w.iter().sum::<f64>() * cols)
            }
            None => {
                let num = p
                    .iter()
                    .zip(&target)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
                (num, p.len() as f64)
            }
        };
        let value = Mat::from_elem((1, 1), num / denom);
        let rg = self.rg(pred);
        self.push(
            value,
            Op::Mse {
                pred,
                target,
                row_weights,
                denom,
            },
            rg,
        )
    }

    /// Mean binary cross-entropy of an `n x 1` logit column against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<f64>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.dim(), (targets.len(), 1));
        let n = targets.len() as f64;
        let loss = z
            .iter()
            .zip(&targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let rg = self.rg(logits);
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::BceWithLogits(logits, targets),
            rg,
        )
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "not a scalar");
        m[[0, 0]]
    }

    /// Back-propagate from a `1 x 1` output. Gradients are retained only for
    /// leaves created with [`Tape::param`].
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).dim(), (1, 1), "backward needs a scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(Mat::ones((1, 1)));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(x, row) => {
                if self.rg(*x) {
                    self.accumulate(grads, *x, g * self.value(*row));
                }
                if self.rg(*row) {
                    let prod = g * self.value(*x);
                    self.accumulate(grads, *row, prod.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Affine(x, scale) => self.accumulate(grads, *x, g * *scale),
            Op::LayerNorm(x, inv) => {
                let y = &node.value;
                let d = y.ncols() as f64;
                let mut dx = Mat::zeros(y.dim());
                for (r, mut out) in dx.rows_mut().into_iter().enumerate() {
                    let gy = g.row(r);
                    let yr = y.row(r);
                    let mean_g = gy.sum() / d;
                    let mean_gy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d;
                    for c in 0..y.ncols() {
                        out[c] = inv[r] * (gy[c] - mean_g - yr[c] * mean_gy);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Gelu(x, deriv) => {
                let mut dx = deriv
                    .clone()
                    .expect("derivative kept for differentiable inputs");
                dx *= g;
                self.accumulate(grads, *x, dx);
            }
            Op::Silu(x) => {
                let mut dx = self.value(*x).mapv(|v| {
                    let s = sigmoid(v);
                    s * (1.0 + v * (1.0 - s))
                });
                dx *= g;
                self.accumulate(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            } => {
                let (qm, km, vm) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qm.ncols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qs, ks, vs, gs) = (row_major(qm), row_major(km), row_major(vm), row_major(g));
                let mut dq = vec![0.0; qs.len()];
                let mut dk = vec![0.0; ks.len()];
                let mut dv = vec![0.0; vs.len()];
                for (gi, grp) in groups.iter().enumerate() {
                    for h in 0..*heads {
                        let off = h * dh;
                        let a = &probs[gi * heads + h];
                        let go = gather_head(&gs, d, &grp.queries, off, dh);
                        let vg = gather_head(&vs, d, &grp.keys, off, dh);
                        scatter_head(&mut dv, d, &grp.keys, off, &a.t().dot(&go));
                        let mut ds = go.dot(&vg.t());
                        ds *= a;
                        // softmax Jacobian: A * (dA - rowsum(dA * A))
                        for (mut row, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
                            let dot: f64 = row.sum();
                            row.scaled_add(-dot, &arow);
                        }
                        ds *= scale;
                        let qg = gather_head(&qs, d, &grp.queries, off, dh);
                        let kg = gather_head(&ks, d, &grp.keys, off, dh);
                        scatter_head(&mut dq, d, &grp.queries, off, &ds.dot(&kg));
                        scatter_head(&mut dk, d, &grp.keys, off, &ds.t().dot(&qg));
                    }
                }
                let (dq, dk, dv) = (
                    Mat::from_shape_vec(qm.dim(), dq).expect("sized"),
                    Mat::from_shape_vec(km.dim(), dk).expect("sized"),
                    Mat::from_shape_vec(vm.dim(), dv).expect("sized"),
                );
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::GatherRows(x, rows) => {
                let mut dx = Mat::zeros(self.value(*x).dim());
                for (i, &r) in rows.iter().enumerate() {
                    let mut target = dx.row_mut(r);
                    target += &g.row(i);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.value(*p).nrows();
                    if self.rg(*p) {
                        self.accumulate(grads, *p, g.slice(s![start..start + n, ..]).to_owned());
                    }
                    start += n;
                }
            }
            Op::SliceCols(x, start) => {
                let mut dx = Mat::zeros(self.value(*x).dim());
                dx.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                self.accumulate(grads, *x, dx);
            }
            Op::MeanRows(x) => {
                let n = self.value(*x).nrows();
                let row = g / n as f64;
                let dx = row
                    .broadcast(self.value(*x).dim())
                    .expect("broadcast mean gradient")
                    .to_owned();
                self.accumulate(grads, *x, dx);
            }
            Op::Mse {
                pred,
                target,
                row_weights,
                denom,
            } => {
                let up = g[[0, 0]];
                let mut dx = (self.value(*pred) - target) * (2.0 * up / denom);
                if let Some(w) = row_weights {
                    for (mut row, &wr) in dx.rows_mut().into_iter().zip(w) {
                        row *= wr;
                    }
                }
                self.accumulate(grads, *pred, dx);
            }
            Op::BceWithLogits(logits, targets) => {
                let up = g[[0, 0]];
                let n = targets.len() as f64;
                let z = self.value(*logits);
                let mut dz = Mat::zeros(z.dim());
                for (i, &y) in targets.iter().enumerate() {
                    dz[[i, 0]] = up * (sigmoid(z[[i, 0]]) - y) / n;
                }
                self.accumulate(grads, *logits, dz);
            }
        }
    }
}
