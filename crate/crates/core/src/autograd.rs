//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records each operation as it is evaluated. [`Tape::backward`]
//! walks the record in reverse and accumulates adjoints. Nodes carry a
//! `needs_grad` flag derived from their inputs so that constant subgraphs
//! (frozen weights, data) cost nothing on the way back.
//!
//! The op set is exactly what the network needs; a few ops are fused
//! (multi-head attention, layer norm) because their closed-form adjoints are
//! both cheaper and more accurate than the composed ones.

use std::borrow::Cow;

use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddConst(Var),
    MulConst(Var, Matrix),
    Gather(Var, Vec<usize>),
    Rotary {
        input: Var,
        group: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        group: usize,
        heads: usize,
        scale: f64,
        /// Row-softmax probabilities, one n×n block per (group, head).
        probs: Vec<Matrix>,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    GroupMean {
        input: Var,
        groups: usize,
    },
    Reshape(Var),
    Mse {
        pred: Var,
        target: Matrix,
    },
    Denormalize {
        input: Var,
        gamma: Var,
        beta: Var,
        std_mean: f64,
    },
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    needs_grad: bool,
}

/// Leaves may borrow their values (`'a`), so large frozen weights are never
/// copied onto the tape.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEFF: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x)
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Rotation angle table for rotary encoding: `theta_i = 10000^(-2i/d)`.
pub fn rotary_thetas(d: usize) -> Vec<f64> {
    (0..d / 2)
        .map(|i| 10000f64.powf(-2.0 * i as f64 / d as f64))
        .collect()
}

/// Applies the block-diagonal rotation for position `pos` to `v` (even length).
pub fn rotate_in_place(v: &mut [f64], pos: usize, thetas: &[f64], inverse: bool) {
    for (i, theta) in thetas.iter().enumerate() {
        let angle = pos as f64 * theta;
        let (s, c) = angle.sin_cos();
        let s = if inverse { -s } else { s };
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = a * c - b * s;
        v[2 * i + 1] = a * s + b * c;
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.push_cow(Cow::Owned(value), op, needs_grad)
    }

    fn push_cow(&mut self, value: Cow<'a, Matrix>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that receives an adjoint.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf with no adjoint (data, frozen weights).
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that borrows its value.
    pub fn leaf_ref(&mut self, value: &'a Matrix, requires_grad: bool) -> Var {
        self.push_cow(Cow::Borrowed(value), Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1);
        assert_eq!(av.cols(), rv.cols(), "add_row width");
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(rv.as_slice()) {
                *x += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// Scales column `j` of `a` by `row[j]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1);
        assert_eq!(av.cols(), rv.cols(), "mul_row width");
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, g) in value.row_mut(r).iter_mut().zip(rv.as_slice()) {
                *x *= g;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(value, Op::MulRow(a, row), ng)
    }

    pub fn add_const(&mut self, a: Var, c: &Matrix) -> Var {
        let value = self.value(a).zip_map(c, |x, y| x + y);
        let ng = self.needs(a);
        self.push(value, Op::AddConst(a), ng)
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Matrix) -> Var {
        let value = self.value(a).zip_map(&c, |x, y| x * y);
        let ng = self.needs(a);
        self.push(value, Op::MulConst(a, c), ng)
    }

    /// `out.flat[i] = a.flat[indices[i]]`, reshaped to `rows×cols`.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>, rows: usize, cols: usize) -> Var {
        assert_eq!(indices.len(), rows * cols, "gather output size");
        let src = self.value(a).as_slice();
        let data = indices.iter().map(|&i| src[i]).collect();
        let value = Matrix::from_vec(rows, cols, data);
        let ng = self.needs(a);
        self.push(value, Op::Gather(a, indices), ng)
    }

    /// Rotates each row by its position `row % group`.
    pub fn rotary(&mut self, a: Var, group: usize) -> Var {
        let mut value = self.value(a).clone();
        assert!(value.cols().is_multiple_of(2), "rotary needs an even width");
        let thetas = rotary_thetas(value.cols());
        for r in 0..value.rows() {
            rotate_in_place(value.row_mut(r), r % group, &thetas, false);
        }
        let ng = self.needs(a);
        self.push(value, Op::Rotary { input: a, group }, ng)
    }

    /// Multi-head scaled dot-product attention, evaluated independently on
    /// consecutive row blocks of length `group`. Heads split the columns.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        group: usize,
        heads: usize,
        scale: f64,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qv.shape(), kv.shape(), "attention q/k shape");
        assert_eq!(qv.rows(), vv.rows(), "attention q/v rows");
        assert!(group > 0 && qv.rows() % group == 0, "attention grouping");
        assert!(qv.cols() % heads == 0 && vv.cols() % heads == 0, "heads must divide width");
        let groups = qv.rows() / group;
        let (dqk, dv) = (qv.cols() / heads, vv.cols() / heads);
        let mut out = Matrix::zeros(qv.rows(), vv.cols());
        let mut probs = Vec::with_capacity(groups * heads);
        for g in 0..groups {
            let base = g * group;
            for h in 0..heads {
                let mut p = Matrix::zeros(group, group);
                for i in 0..group {
                    let qi = &qv.row(base + i)[h * dqk..(h + 1) * dqk];
                    let prow = p.row_mut(i);
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let kj = &kv.row(base + j)[h * dqk..(h + 1) * dqk];
                        *pj = crate::tensor::dot(qi, kj) * scale;
                    }
                    softmax_in_place(prow);
                }
                for i in 0..group {
                    for j in 0..group {
                        let pij = p[(i, j)];
                        let vj = &vv.row(base + j)[h * dv..(h + 1) * dv];
                        let orow = &mut out.row_mut(base + i)[h * dv..(h + 1) * dv];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += pij * x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                group,
                heads,
                scale,
                probs,
            },
            ng,
        )
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (`1×c`).
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        assert_eq!(gv.shape(), (1, cols), "layer_norm gamma shape");
        assert_eq!(bv.shape(), (1, cols), "layer_norm beta shape");
        let mut normalized = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = av.row(r);
            let mean = x.iter().sum::<f64>() / cols as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std.push(istd);
            for c in 0..cols {
                let n = (x[c] - mean) * istd;
                normalized[(r, c)] = n;
                out[(r, c)] = n * gv.as_slice()[c] + bv.as_slice()[c];
            }
        }
        let ng = self.needs(a) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::LayerNorm {
                input: a,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            ng,
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let ng = self.needs(a);
        self.push(value, Op::Gelu(a), ng)
    }

    /// Mean over `groups` consecutive equal-height row blocks.
    pub fn group_mean(&mut self, a: Var, groups: usize) -> Var {
        let av = self.value(a);
        assert!(groups > 0 && av.rows().is_multiple_of(groups), "group_mean grouping");
        let n = av.rows() / groups;
        let mut out = Matrix::zeros(n, av.cols());
        for g in 0..groups {
            for r in 0..n {
                for (o, x) in out.row_mut(r).iter_mut().zip(av.row(g * n + r)) {
                    *o += x;
                }
            }
        }
        let inv = 1.0 / groups as f64;
        out.as_mut_slice().iter_mut().for_each(|x| *x *= inv);
        let ng = self.needs(a);
        self.push(out, Op::GroupMean { input: a, groups }, ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(a).clone().reshape(rows, cols);
        let ng = self.needs(a);
        self.push(value, Op::Reshape(a), ng)
    }

    /// Mean squared error against a constant target, as a `1×1` node.
    pub fn mse(&mut self, pred: Var, target: &Matrix) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "mse shape");
        let n = pv.len() as f64;
        let loss = pv
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let ng = self.needs(pred);
        self.push(
            Matrix::filled(1, 1, loss),
            Op::Mse {
                pred,
                target: target.clone(),
            },
            ng,
        )
    }

    /// Inverse of the instance normalisation with channel-averaged statistics:
    /// `y = std_mean * (x - mean(beta)) / mean(gamma) + mean_mean`.
    pub fn denormalize(
        &mut self,
        a: Var,
        gamma: Var,
        beta: Var,
        std_mean: f64,
        mean_mean: f64,
    ) -> Var {
        let g = mean(self.value(gamma).as_slice());
        let b = mean(self.value(beta).as_slice());
        let value = self.value(a).map(|x| std_mean * (x - b) / g + mean_mean);
        let ng = self.needs(a) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::Denormalize {
                input: a,
                gamma,
                beta,
                std_mean,
            },
            ng,
        )
    }

    /// Reverse sweep from a scalar (`1×1`) node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, delta: Matrix) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(self.value(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_tn(g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*row) {
                    self.accumulate(grads, *row, column_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row);
                if self.needs(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        for (x, s) in ga.row_mut(r).iter_mut().zip(rv.as_slice()) {
                            *x *= s;
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*row) {
                    let prod = g.zip_map(self.value(*a), |x, y| x * y);
                    self.accumulate(grads, *row, column_sums(&prod));
                }
            }
            Op::AddConst(a) => self.accumulate(grads, *a, g.clone()),
            Op::MulConst(a, c) => self.accumulate(grads, *a, g.zip_map(c, |x, y| x * y)),
            Op::Gather(a, indices) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                let dst = ga.as_mut_slice();
                for (gi, &src) in g.as_slice().iter().zip(indices) {
                    dst[src] += gi;
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Rotary { input, group } => {
                let mut ga = g.clone();
                let thetas = rotary_thetas(ga.cols());
                for r in 0..ga.rows() {
                    rotate_in_place(ga.row_mut(r), r % group, &thetas, true);
                }
                self.accumulate(grads, *input, ga);
            }
            Op::Attention {
                q,
                k,
                v,
                group,
                heads,
                scale,
                probs,
            } => self.attention_backward(grads, g, (*q, *k, *v), *group, *heads, *scale, probs),
            Op::LayerNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                let cols = g.cols() as f64;
                if self.needs(*gamma) {
                    let prod = g.zip_map(normalized, |x, y| x * y);
                    self.accumulate(grads, *gamma, column_sums(&prod));
                }
                if self.needs(*beta) {
                    self.accumulate(grads, *beta, column_sums(g));
                }
                if self.needs(*input) {
                    let mut ga = Matrix::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let nr = normalized.row(r);
                        let dn: Vec<f64> = gr.iter().zip(gv.as_slice()).map(|(a, b)| a * b).collect();
                        let mean_dn = dn.iter().sum::<f64>() / cols;
                        let mean_dn_n = dn.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / cols;
                        for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (dn[c] - mean_dn - nr[c] * mean_dn_n);
                        }
                    }
                    self.accumulate(grads, *input, ga);
                }
            }
            Op::Gelu(a) => {
                let ga = g.zip_map(self.value(*a), |gi, x| gi * gelu_grad(x));
                self.accumulate(grads, *a, ga);
            }
            Op::GroupMean { input, groups } => {
                let n = out.rows();
                let (r, c) = self.value(*input).shape();
                let inv = 1.0 / *groups as f64;
                let mut ga = Matrix::zeros(r, c);
                for gidx in 0..*groups {
                    for row in 0..n {
                        for (o, x) in ga.row_mut(gidx * n + row).iter_mut().zip(g.row(row)) {
                            *o = x * inv;
                        }
                    }
                }
                self.accumulate(grads, *input, ga);
            }
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, g.clone().reshape(r, c));
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred);
                let scale = 2.0 * g[(0, 0)] / pv.len() as f64;
                let ga = pv.zip_map(target, |p, t| scale * (p - t));
                self.accumulate(grads, *pred, ga);
            }
            Op::Denormalize {
                input,
                gamma,
                beta,
                std_mean,
            } => {
                let gvals = self.value(*gamma).as_slice();
                let bvals = self.value(*beta).as_slice();
                let (gm, bm) = (mean(gvals), mean(bvals));
                let x = self.value(*input);
                if self.needs(*input) {
                    self.accumulate(grads, *input, g.scale(std_mean / gm));
                }
                let channels = gvals.len() as f64;
                if self.needs(*beta) {
                    let d = -std_mean / gm / channels * g.sum();
                    self.accumulate(grads, *beta, Matrix::filled(1, bvals.len(), d));
                }
                if self.needs(*gamma) {
                    let s: f64 = g
                        .as_slice()
                        .iter()
                        .zip(x.as_slice())
                        .map(|(gi, xi)| gi * (xi - bm))
                        .sum();
                    let d = -std_mean * s / (gm * gm) / channels;
                    self.accumulate(grads, *gamma, Matrix::filled(1, gvals.len(), d));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        grads: &mut [Option<Matrix>],
        g: &Matrix,
        (q, k, v): (Var, Var, Var),
        group: usize,
        heads: usize,
        scale: f64,
        probs: &[Matrix],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let groups = qv.rows() / group;
        let (dqk, dv) = (qv.cols() / heads, vv.cols() / heads);
        let mut gq = Matrix::zeros(qv.rows(), qv.cols());
        let mut gk = Matrix::zeros(kv.rows(), kv.cols());
        let mut gvm = Matrix::zeros(vv.rows(), vv.cols());
        let need_qk = self.needs(q) || self.needs(k);
        for gi in 0..groups {
            let base = gi * group;
            for h in 0..heads {
                let p = &probs[gi * heads + h];
                // dV = Pᵀ dO
                for i in 0..group {
                    let go = &g.row(base + i)[h * dv..(h + 1) * dv];
                    for j in 0..group {
                        let pij = p[(i, j)];
                        let dst = &mut gvm.row_mut(base + j)[h * dv..(h + 1) * dv];
                        for (d, x) in dst.iter_mut().zip(go) {
                            *d += pij * x;
                        }
                    }
                }
                if !need_qk {
                    continue;
                }
                // dP = dO Vᵀ, then softmax adjoint.
                for i in 0..group {
                    let go = &g.row(base + i)[h * dv..(h + 1) * dv];
                    let dp: Vec<f64> = (0..group)
                        .map(|j| crate::tensor::dot(go, &vv.row(base + j)[h * dv..(h + 1) * dv]))
                        .collect();
                    let inner: f64 = dp.iter().enumerate().map(|(j, d)| d * p[(i, j)]).sum();
                    for j in 0..group {
                        let ds = p[(i, j)] * (dp[j] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for c in 0..dqk {
                            let col = h * dqk + c;
                            gq[(base + i, col)] += ds * kv[(base + j, col)];
                            gk[(base + j, col)] += ds * qv[(base + i, col)];
                        }
                    }
                }
            }
        }
        self.accumulate(grads, q, gq);
        self.accumulate(grads, k, gk);
        self.accumulate(grads, v, gvm);
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, x) in out.as_mut_slice().iter_mut().zip(m.row(r)) {
            *o += x;
        }
    }
    out
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central differences of `f` with respect to every entry of `x`.
    fn numeric(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-6;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut p = x.clone();
            p.as_mut_slice()[i] += h;
            let mut m = x.clone();
            m.as_mut_slice()[i] -= h;
            out.as_mut_slice()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    /// Builds `loss = mse(build(x), target)` and compares dloss/dx against
    /// central differences.
    fn check(x: Matrix, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probe = {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let o = build(&mut t, v);
            t.value(o).clone()
        };
        let target = random(&mut rng, probe.rows(), probe.cols());
        let loss_of = |m: &Matrix| {
            let mut t = Tape::new();
            let v = t.constant(m.clone());
            let o = build(&mut t, v);
            let l = t.mse(o, &target);
            t.value(l)[(0, 0)]
        };
        let mut t = Tape::new();
        let v = t.param(x.clone());
        let o = build(&mut t, v);
        let l = t.mse(o, &target);
        let grads = t.backward(l);
        let analytic = grads.get(v).unwrap();
        let numeric = numeric(&x, loss_of);
        let err = analytic.max_abs_diff(&numeric);
        assert!(err < 1e-7, "gradient mismatch {err}: {analytic:?} vs {numeric:?}");
    }

    #[test]
    fn matmul_and_add_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(&mut rng, 3, 4);
        check(random(&mut rng, 2, 3), |t, x| {
            let w = t.constant(w.clone());
            let y = t.matmul(x, w);
            t.add(y, y)
        });
    }

    #[test]
    fn row_broadcast_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 3, 4);
        check(random(&mut rng, 1, 4), |t, row| {
            let a = t.constant(a.clone());
            let m = t.mul_row(a, row);
            t.add_row(m, row)
        });
    }

    #[test]
    fn gather_rotary_gelu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(random(&mut rng, 3, 4), |t, x| {
            let g = t.gather(x, vec![0, 5, 5, 11, 2, 7, 1, 1], 2, 4);
            let r = t.rotary(g, 2);
            t.gelu(r)
        });
    }

    #[test]
    fn attention_gradients_every_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = random(&mut rng, 6, 4);
        let v = random(&mut rng, 6, 4);
        check(random(&mut rng, 6, 4), |t, q| {
            let k = t.constant(k.clone());
            let v = t.constant(v.clone());
            t.attention(q, k, v, 3, 2, 0.7)
        });
        let q = random(&mut rng, 6, 4);
        check(random(&mut rng, 6, 4), |t, k| {
            let q = t.constant(q.clone());
            let v = t.constant(v.clone());
            t.attention(q, k, v, 3, 2, 0.7)
        });
        let kk = random(&mut rng, 6, 4);
        check(random(&mut rng, 6, 4), |t, v| {
            let q = t.constant(q.clone());
            let k = t.constant(kk.clone());
            t.attention(q, k, v, 3, 2, 0.7)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gamma = random(&mut rng, 1, 5);
        let beta = random(&mut rng, 1, 5);
        check(random(&mut rng, 3, 5), |t, x| {
            let g = t.constant(gamma.clone());
            let b = t.constant(beta.clone());
            t.layer_norm(x, g, b, 1e-5)
        });
        let x = random(&mut rng, 3, 5);
        check(gamma.clone(), |t, g| {
            let x = t.constant(x.clone());
            let b = t.constant(beta.clone());
            t.layer_norm(x, g, b, 1e-5)
        });
    }

    #[test]
    fn group_mean_reshape_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        check(random(&mut rng, 6, 2), |t, x| {
            let m = t.group_mean(x, 3);
            t.reshape(m, 1, 4)
        });
    }

    #[test]
    fn denormalize_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = random(&mut rng, 1, 4);
        let beta = random(&mut rng, 1, 3);
        check(Matrix::from_vec(1, 3, vec![1.5, 0.8, 2.0]), |t, g| {
            let y = t.constant(y.clone());
            let b = t.constant(beta.clone());
            t.denormalize(y, g, b, 0.6, 0.2)
        });
        let gamma = Matrix::from_vec(1, 3, vec![1.5, 0.8, 2.0]);
        check(beta.clone(), |t, b| {
            let y = t.constant(y.clone());
            let g = t.constant(gamma.clone());
            t.denormalize(y, g, b, 0.6, 0.2)
        });
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::filled(1, 2, 1.0));
        let p = t.param(Matrix::filled(1, 2, 2.0));
        let s = t.add(a, p);
        let l = t.mse(s, &Matrix::zeros(1, 2));
        let g = t.backward(l);
        assert!(g.get(a).is_none());
        assert!(g.get(p).is_some());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut row = vec![1000.0, -3.0, 2.5, 0.0];
        softmax_in_place(&mut row);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
