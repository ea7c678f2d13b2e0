//! Reverse-mode automatic differentiation over `f64` token matrices.
//!
//! Tensors are `(tokens, channels)` matrices; spatial layout is tracked by
//! the network code via row-index plans (gathers), so every op here stays
//! shape-simple. The op set is exactly what the completion network needs:
//! matmul, bias, residual adds, gated column scaling, GELU/sigmoid,
//! layer norm, pooling, concatenation, row gathers/reshapes, and fused
//! multi-head windowed attention.

use std::sync::Arc;

use ndarray::{s, Array2};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    ScaleCols {
        x: Var,
        gate: Var,
    },
    Gelu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    AddConst {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanRows {
        x: Var,
    },
    MaxRows {
        x: Var,
        argmax: Vec<usize>,
    },
    ConcatCols {
        a: Var,
        b: Var,
    },
    GatherRows {
        x: Var,
        index: Arc<Vec<usize>>,
    },
    ReshapeRows {
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        window_len: usize,
        scale: f64,
        softmax: Vec<Array2<f64>>,
    },
    SumAll {
        x: Var,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients keyed by tape node, produced by [`Tape::backward`].
pub struct Gradients {
    by_node: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.by_node[v.0].as_ref()
    }
}

/// A single forward trace; cleared and rebuilt per training step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
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

    /// Trainable leaf: gradients accumulate here.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: no gradient flows.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul { a, b }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add { a, b }, needs)
    }

    /// Adds a `(1, C)` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias).row(0).to_owned();
        let value = self.value(x) + &b.broadcast(self.value(x).dim()).unwrap().to_owned();
        let needs = self.needs(x) || self.needs(bias);
        self.push(value, Op::AddBias { x, bias }, needs)
    }

    /// Multiplies each column of `x` by the matching entry of the
    /// `(1, C)` gate row.
    pub fn scale_cols(&mut self, x: Var, gate: Var) -> Var {
        let g = self.value(gate).row(0).to_owned();
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            for (slot, gv) in row.iter_mut().zip(g.iter()) {
                *slot *= gv;
            }
        }
        let needs = self.needs(x) || self.needs(gate);
        self.push(value, Op::ScaleCols { x, gate }, needs)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(gelu);
        let needs = self.needs(x);
        self.push(value, Op::Gelu { x }, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        let needs = self.needs(x);
        self.push(value, Op::Sigmoid { x }, needs)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).mapv(|v| v * factor);
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, factor }, needs)
    }

    /// Adds a fixed matrix (e.g. positional encodings); gradients pass
    /// straight through.
    pub fn add_const(&mut self, x: Var, c: &Array2<f64>) -> Var {
        let value = self.value(x) + c;
        let needs = self.needs(x);
        self.push(value, Op::AddConst { x }, needs)
    }

    /// Per-row layer normalization over channels with affine `(1, C)`
    /// gamma/beta.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-6;
        let xv = self.value(x);
        let (n, c) = xv.dim();
        let g = self.value(gamma).row(0).to_owned();
        let b = self.value(beta).row(0).to_owned();
        let mut value = Array2::zeros((n, c));
        let mut means = Vec::with_capacity(n);
        let mut inv_stds = Vec::with_capacity(n);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + EPS).sqrt();
            means.push(mean);
            inv_stds.push(inv_std);
            for j in 0..c {
                value[[i, j]] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                inv_std: inv_stds,
            },
            needs,
        )
    }

    /// Column means over rows: `(N, C) -> (1, C)`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.nrows() as f64;
        let value = xv.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0)) / n;
        let needs = self.needs(x);
        self.push(value, Op::MeanRows { x }, needs)
    }

    /// Column maxima over rows: `(N, C) -> (1, C)`; gradient routes to the
    /// first maximizing row.
    pub fn max_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.dim();
        let mut value = Array2::from_elem((1, c), f64::NEG_INFINITY);
        let mut argmax = vec![0usize; c];
        for j in 0..c {
            for i in 0..n {
                if xv[[i, j]] > value[[0, j]] {
                    value[[0, j]] = xv[[i, j]];
                    argmax[j] = i;
                }
            }
        }
        let needs = self.needs(x);
        self.push(value, Op::MaxRows { x, argmax }, needs)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.nrows(), bv.nrows(), "concat row mismatch");
        let (n, ca) = av.dim();
        let cb = bv.ncols();
        let mut value = Array2::zeros((n, ca + cb));
        value.slice_mut(s![.., ..ca]).assign(av);
        value.slice_mut(s![.., ca..]).assign(bv);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::ConcatCols { a, b }, needs)
    }

    /// Row gather: `out[i] = x[index[i]]`. Backward scatter-adds, so
    /// repeated indices (nearest upsampling) accumulate correctly.
    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let c = xv.ncols();
        let mut value = Array2::zeros((index.len(), c));
        for (i, &src) in index.iter().enumerate() {
            value.row_mut(i).assign(&xv.row(src));
        }
        let needs = self.needs(x);
        self.push(value, Op::GatherRows { x, index }, needs)
    }

    /// Row-major reinterpretation to a new row count (e.g. `(4N, C)` to
    /// `(N, 4C)`); element order is unchanged.
    pub fn reshape_rows(&mut self, x: Var, new_rows: usize) -> Var {
        let xv = self.value(x);
        let total = xv.len();
        assert_eq!(total % new_rows, 0, "reshape must preserve element count");
        let value = xv
            .to_owned()
            .into_shape_with_order((new_rows, total / new_rows))
            .expect("row-major reshape");
        let needs = self.needs(x);
        self.push(value, Op::ReshapeRows { x }, needs)
    }

    /// Fused multi-head scaled dot-product attention over aligned windows.
    ///
    /// `q`, `k`, `v` are `(N, heads * dh)`; rows are pre-arranged so each
    /// consecutive block of `window_len` rows forms one attention window
    /// (`window_len = N` gives global attention). Queries attend to keys
    /// and values of the same window.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, window_len: usize) -> Var {
        let (n, inner) = self.value(q).dim();
        assert_eq!(self.value(k).dim(), (n, inner), "k shape mismatch");
        assert_eq!(self.value(v).dim(), (n, inner), "v shape mismatch");
        assert_eq!(inner % heads, 0, "inner dim must divide heads");
        assert!(window_len > 0 && n % window_len == 0, "bad window length");
        let dh = inner / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let windows = n / window_len;

        let mut value = Array2::zeros((n, inner));
        let mut softmax = Vec::with_capacity(windows * heads);
        for w in 0..windows {
            let rows = w * window_len..(w + 1) * window_len;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qw = self.value(q).slice(s![rows.clone(), cols.clone()]).to_owned();
                let kw = self.value(k).slice(s![rows.clone(), cols.clone()]).to_owned();
                let vw = self.value(v).slice(s![rows.clone(), cols.clone()]).to_owned();
                let mut scores = qw.dot(&kw.t());
                scores.mapv_inplace(|s| s * scale);
                for mut row in scores.rows_mut() {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    row.mapv_inplace(|s| (s - max).exp());
                    let sum = row.sum();
                    row.mapv_inplace(|s| s / sum);
                }
                let out = scores.dot(&vw);
                value.slice_mut(s![rows.clone(), cols.clone()]).assign(&out);
                softmax.push(scores);
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                window_len,
                scale,
                softmax,
            },
            needs,
        )
    }

    /// Sum of all entries as a `(1, 1)` node.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        let needs = self.needs(x);
        self.push(value, Op::SumAll { x }, needs)
    }

    /// Backpropagates `seed` (the loss gradient at `root`) through the
    /// tape and returns per-node gradients.
    pub fn backward(&self, root: Var, seed: Array2<f64>) -> Gradients {
        assert_eq!(
            seed.dim(),
            self.value(root).dim(),
            "seed must match root shape"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            self.backward_op(idx, &grad, &mut grads);
            // leaves keep their accumulated gradient
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(grad);
            }
        }
        Gradients { by_node: grads }
    }

    fn accumulate(grads: &mut [Option<Array2<f64>>], target: Var, delta: Array2<f64>) {
        match &mut grads[target.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_op(&self, idx: usize, grad: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, grad.dot(&self.value(*b).t()));
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, self.value(*a).t().dot(grad));
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, grad.clone());
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, grad.clone());
                }
            }
            Op::AddBias { x, bias } => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, grad.clone());
                }
                if self.needs(*bias) {
                    let db = grad.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
                    Self::accumulate(grads, *bias, db);
                }
            }
            Op::ScaleCols { x, gate } => {
                let g = self.value(*gate).row(0).to_owned();
                if self.needs(*x) {
                    let mut dx = grad.clone();
                    for mut row in dx.rows_mut() {
                        for (slot, gv) in row.iter_mut().zip(g.iter()) {
                            *slot *= gv;
                        }
                    }
                    Self::accumulate(grads, *x, dx);
                }
                if self.needs(*gate) {
                    let xv = self.value(*x);
                    let mut dg = Array2::zeros((1, xv.ncols()));
                    for (grow, xrow) in grad.rows().into_iter().zip(xv.rows()) {
                        for j in 0..xv.ncols() {
                            dg[[0, j]] += grow[j] * xrow[j];
                        }
                    }
                    Self::accumulate(grads, *gate, dg);
                }
            }
            Op::Gelu { x } => {
                if self.needs(*x) {
                    let mut dx = self.value(*x).mapv(gelu_grad);
                    dx *= grad;
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::Sigmoid { x } => {
                if self.needs(*x) {
                    let mut dx = self.nodes[idx].value.mapv(|s| s * (1.0 - s));
                    dx *= grad;
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::Scale { x, factor } => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, grad.mapv(|g| g * factor));
                }
            }
            Op::AddConst { x } => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, grad.clone());
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xv = self.value(*x);
                let (n, c) = xv.dim();
                let g = self.value(*gamma).row(0).to_owned();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dgamma = Array2::zeros((1, c));
                    let mut dbeta = Array2::zeros((1, c));
                    for i in 0..n {
                        for j in 0..c {
                            let xhat = (xv[[i, j]] - mean[i]) * inv_std[i];
                            dgamma[[0, j]] += grad[[i, j]] * xhat;
                            dbeta[[0, j]] += grad[[i, j]];
                        }
                    }
                    if self.needs(*gamma) {
                        Self::accumulate(grads, *gamma, dgamma);
                    }
                    if self.needs(*beta) {
                        Self::accumulate(grads, *beta, dbeta);
                    }
                }
                if self.needs(*x) {
                    let mut dx = Array2::zeros((n, c));
                    for i in 0..n {
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xhat = 0.0;
                        for j in 0..c {
                            let dy = grad[[i, j]] * g[j];
                            let xhat = (xv[[i, j]] - mean[i]) * inv_std[i];
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat;
                        }
                        let inv_c = 1.0 / c as f64;
                        for j in 0..c {
                            let dy = grad[[i, j]] * g[j];
                            let xhat = (xv[[i, j]] - mean[i]) * inv_std[i];
                            dx[[i, j]] = inv_std[i]
                                * (dy - sum_dy * inv_c - xhat * sum_dy_xhat * inv_c);
                        }
                    }
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::MeanRows { x } => {
                if self.needs(*x) {
                    let (n, c) = self.value(*x).dim();
                    let mut dx = Array2::zeros((n, c));
                    for i in 0..n {
                        for j in 0..c {
                            dx[[i, j]] = grad[[0, j]] / n as f64;
                        }
                    }
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::MaxRows { x, argmax } => {
                if self.needs(*x) {
                    let (n, c) = self.value(*x).dim();
                    let mut dx = Array2::zeros((n, c));
                    for j in 0..c {
                        dx[[argmax[j], j]] = grad[[0, j]];
                    }
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::ConcatCols { a, b } => {
                let ca = self.value(*a).ncols();
                if self.needs(*a) {
                    Self::accumulate(grads, *a, grad.slice(s![.., ..ca]).to_owned());
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, grad.slice(s![.., ca..]).to_owned());
                }
            }
            Op::GatherRows { x, index } => {
                if self.needs(*x) {
                    let (n, c) = self.value(*x).dim();
                    let mut dx = Array2::zeros((n, c));
                    for (i, &src) in index.iter().enumerate() {
                        let mut row = dx.row_mut(src);
                        row += &grad.row(i);
                    }
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::ReshapeRows { x } => {
                if self.needs(*x) {
                    let (n, c) = self.value(*x).dim();
                    let dx = grad
                        .to_owned()
                        .into_shape_with_order((n, c))
                        .expect("reshape gradient");
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                window_len,
                scale,
                softmax,
            } => {
                let (n, inner) = self.value(*q).dim();
                let dh = inner / heads;
                let windows = n / window_len;
                let mut dq = Array2::zeros((n, inner));
                let mut dk = Array2::zeros((n, inner));
                let mut dv = Array2::zeros((n, inner));
                for w in 0..windows {
                    let rows = w * window_len..(w + 1) * window_len;
                    for h in 0..*heads {
                        let cols = h * dh..(h + 1) * dh;
                        let attn = &softmax[w * heads + h];
                        let qw = self.value(*q).slice(s![rows.clone(), cols.clone()]);
                        let kw = self.value(*k).slice(s![rows.clone(), cols.clone()]);
                        let vw = self.value(*v).slice(s![rows.clone(), cols.clone()]);
                        let dout = grad.slice(s![rows.clone(), cols.clone()]);

                        let dvw = attn.t().dot(&dout);
                        let dattn = dout.dot(&vw.t());
                        // softmax backward per row
                        let mut dscores = Array2::zeros(attn.dim());
                        for i in 0..attn.nrows() {
                            let mut dot = 0.0;
                            for j in 0..attn.ncols() {
                                dot += dattn[[i, j]] * attn[[i, j]];
                            }
                            for j in 0..attn.ncols() {
                                dscores[[i, j]] = attn[[i, j]] * (dattn[[i, j]] - dot);
                            }
                        }
                        dscores.mapv_inplace(|x| x * scale);
                        let dqw = dscores.dot(&kw);
                        let dkw = dscores.t().dot(&qw);

                        dq.slice_mut(s![rows.clone(), cols.clone()])
                            .scaled_add(1.0, &dqw);
                        dk.slice_mut(s![rows.clone(), cols.clone()])
                            .scaled_add(1.0, &dkw);
                        dv.slice_mut(s![rows.clone(), cols.clone()])
                            .scaled_add(1.0, &dvw);
                    }
                }
                if self.needs(*q) {
                    Self::accumulate(grads, *q, dq);
                }
                if self.needs(*k) {
                    Self::accumulate(grads, *k, dk);
                }
                if self.needs(*v) {
                    Self::accumulate(grads, *v, dv);
                }
            }
            Op::SumAll { x } => {
                if self.needs(*x) {
                    let dx = Array2::from_elem(self.value(*x).dim(), grad[[0, 0]]);
                    Self::accumulate(grads, *x, dx);
                }
            }
        }
    }
}

/// Tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    const A: f64 = 0.7978845608028654; // sqrt(2 / pi)
    const B: f64 = 0.044715;
    0.5 * x * (1.0 + (A * (x + B * x.powi(3))).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const A: f64 = 0.7978845608028654;
    const B: f64 = 0.044715;
    let inner = A * (x + B * x.powi(3));
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * A * (1.0 + 3.0 * B * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
