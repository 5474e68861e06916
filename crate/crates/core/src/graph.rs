//! Reverse-mode autodiff over small dense `f64` tensors.
//!
//! A [`Graph`] is a write-once tape: operations evaluate eagerly and record
//! enough structure for [`Graph::backward`] to fill per-node gradients in one
//! reverse sweep. Construction order is topological by construction, so the
//! sweep is a single reverse iteration.
//!
//! The op set is exactly what the pipeline's networks need (dense layers,
//! 2-D convolution, gated recurrence pieces, row softmax / normalization,
//! cross-entropy and L1 losses). Shapes are validated with assertions:
//! violating them is a programming error, not a runtime condition.

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis, Ix1, Ix2, Ix3, Ix4, IxDyn};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    L2NormRows(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    StackRows(Vec<Var>),
    MeanRows(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    CrossEntropyRows {
        logits: Var,
        targets: Vec<usize>,
        valid: Vec<bool>,
    },
    SoftCrossEntropyRows {
        logits: Var,
        target_dist: Array2<f64>,
    },
    L1Mean {
        pred: Var,
        target: Array2<f64>,
    },
}

struct Node {
    op: Op,
    value: ArrayD<f64>,
}

/// Gradients from one backward sweep, indexed by [`Var`].
pub struct Grads {
    by_node: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.by_node[v.0].as_ref()
    }

    /// Gradient of a leaf, zeros if it never received flow.
    pub fn of(&self, v: Var, shape: &[usize]) -> ArrayD<f64> {
        match &self.by_node[v.0] {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: ArrayD<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        val.iter().copied().next().unwrap()
    }

    fn mat(&self, v: Var) -> Array2<f64> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("expected rank-2 value")
            .to_owned()
    }

    // ---- leaves -------------------------------------------------------

    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn leaf2(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf, value.into_dyn())
    }

    pub fn leaf1(&mut self, value: Array1<f64>) -> Var {
        self.push(Op::Leaf, value.into_dyn())
    }

    // ---- ops ----------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.mat(a), self.mat(b));
        assert_eq!(ma.ncols(), mb.nrows(), "matmul inner dims");
        let out = ma.dot(&mb);
        self.push(Op::MatMul(a, b), out.into_dyn())
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.mat(a).t().to_owned();
        self.push(Op::Transpose(a), out.into_dyn())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(Op::Add(a, b), out)
    }

    /// `a (M×N) + b (1×N)` with `b` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.mat(a), self.mat(b));
        assert_eq!(mb.nrows(), 1);
        assert_eq!(ma.ncols(), mb.ncols());
        let out = &ma + &mb.row(0);
        self.push(Op::AddRow(a, b), out.into_dyn())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(Op::Sub(a, b), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(Op::Mul(a, b), out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = &self.nodes[a.0].value * c;
        self.push(Op::Scale(a, c), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(Op::Relu(a), out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid(a), out)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let m = self.mat(a);
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(Op::SoftmaxRows(a), out.into_dyn())
    }

    /// Row-wise `x / ||x||`. Rows with norm below 1e-12 pass through unchanged.
    pub fn l2_norm_rows(&mut self, a: Var) -> Var {
        let m = self.mat(a);
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm >= 1e-12 {
                row.mapv_inplace(|x| x / norm);
            }
        }
        self.push(Op::L2NormRows(a), out.into_dyn())
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.mat(a), self.mat(b));
        assert_eq!(ma.nrows(), mb.nrows());
        let out = ndarray::concatenate(Axis(1), &[ma.view(), mb.view()]).unwrap();
        self.push(Op::ConcatCols(a, b), out.into_dyn())
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.mat(a);
        let out = m.slice(ndarray::s![.., start..start + len]).to_owned();
        self.push(Op::SliceCols(a, start, len), out.into_dyn())
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.mat(a);
        let out = m.slice(ndarray::s![start..start + len, ..]).to_owned();
        self.push(Op::SliceRows(a, start, len), out.into_dyn())
    }

    /// Vertical stack of rank-2 values sharing a column count.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let mats: Vec<Array2<f64>> = parts.iter().map(|&p| self.mat(p)).collect();
        let views: Vec<_> = mats.iter().map(|m| m.view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).unwrap();
        self.push(Op::StackRows(parts.to_vec()), out.into_dyn())
    }

    /// Column means: `M×N -> 1×N`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.mat(a);
        let n = m.nrows() as f64;
        let out = (m.sum_axis(Axis(0)) / n).insert_axis(Axis(0));
        self.push(Op::MeanRows(a), out.into_dyn())
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.nodes[a.0]
            .value
            .to_shape(IxDyn(shape))
            .expect("reshape size mismatch")
            .to_owned();
        self.push(Op::Reshape(a), out)
    }

    /// 2-D convolution: input `(Cin,H,W)`, kernel `(Cout,Cin,k,k)`, bias `(Cout)`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let x = self.nodes[input.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("conv input rank 3")
            .to_owned();
        let k = self.nodes[kernel.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv kernel rank 4")
            .to_owned();
        let b = self.nodes[bias.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("conv bias rank 1")
            .to_owned();
        let out = conv2d_forward(&x, &k, &b, stride, pad);
        self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            },
            out.into_dyn(),
        )
    }

    /// Mean of `logsumexp(row) - row[target]` over valid rows.
    ///
    /// Panics if no row is valid; callers gate on that (degenerate input).
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize], valid: &[bool]) -> Var {
        let m = self.mat(logits);
        assert_eq!(m.nrows(), targets.len());
        assert_eq!(m.nrows(), valid.len());
        let n_valid = valid.iter().filter(|v| **v).count();
        assert!(n_valid > 0, "cross entropy with no valid rows");
        let mut total = 0.0;
        for (i, row) in m.rows().into_iter().enumerate() {
            if !valid[i] {
                continue;
            }
            assert!(targets[i] < m.ncols(), "target out of range");
            let vals: Vec<f64> = row.iter().copied().collect();
            total += log_sum_exp(&vals) - row[targets[i]];
        }
        let value = ndarray::arr2(&[[total / n_valid as f64]]);
        self.push(
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                valid: valid.to_vec(),
            },
            value.into_dyn(),
        )
    }

    /// Mean over rows of `sum_k q_k * (logsumexp(row) - row_k)` against a
    /// constant target distribution (rows of `target_dist` sum to 1).
    pub fn soft_cross_entropy_rows(&mut self, logits: Var, target_dist: Array2<f64>) -> Var {
        let m = self.mat(logits);
        assert_eq!(m.dim(), target_dist.dim());
        assert!(m.nrows() > 0, "soft cross entropy with no rows");
        let mut total = 0.0;
        for (row, q) in m.rows().into_iter().zip(target_dist.rows()) {
            let vals: Vec<f64> = row.iter().copied().collect();
            let lse = log_sum_exp(&vals);
            for (x, qk) in row.iter().zip(q.iter()) {
                total += qk * (lse - x);
            }
        }
        let value = ndarray::arr2(&[[total / m.nrows() as f64]]);
        self.push(
            Op::SoftCrossEntropyRows { logits, target_dist },
            value.into_dyn(),
        )
    }

    /// Mean absolute error over all elements of `pred` against a constant target.
    pub fn l1_mean(&mut self, pred: Var, target: Array2<f64>) -> Var {
        let p = self.mat(pred);
        assert_eq!(p.dim(), target.dim());
        let n = p.len().max(1) as f64;
        let value = (&p - &target).mapv(f64::abs).sum() / n;
        self.push(
            Op::L1Mean { pred, target },
            ndarray::arr2(&[[value]]).into_dyn(),
        )
    }

    // ---- backward -----------------------------------------------------

    /// One reverse sweep from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::ones(self.value(loss).raw_dim()));

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { by_node: grads }
    }

    fn propagate(&self, id: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let g2 = || {
            g.view()
                .into_dimensionality::<Ix2>()
                .expect("rank-2 grad")
                .to_owned()
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ma, mb) = (self.mat(*a), self.mat(*b));
                let gm = g2();
                accum(grads, *a, gm.dot(&mb.t()).into_dyn());
                accum(grads, *b, ma.t().dot(&gm).into_dyn());
            }
            Op::Transpose(a) => {
                accum(grads, *a, g2().t().to_owned().into_dyn());
            }
            Op::Add(a, b) => {
                accum(grads, *a, g.clone());
                accum(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                let gm = g2();
                accum(grads, *a, gm.clone().into_dyn());
                let row_sum = gm.sum_axis(Axis(0)).insert_axis(Axis(0));
                accum(grads, *b, row_sum.into_dyn());
            }
            Op::Sub(a, b) => {
                accum(grads, *a, g.clone());
                accum(grads, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                accum(grads, *a, g * &self.nodes[b.0].value);
                accum(grads, *b, g * &self.nodes[a.0].value);
            }
            Op::Scale(a, c) => {
                accum(grads, *a, g * *c);
            }
            Op::Relu(a) => {
                let mask = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                accum(grads, *a, g * &mask);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                accum(grads, *a, g * &y.mapv(|v| 1.0 - v * v));
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                accum(grads, *a, g * &y.mapv(|v| v * (1.0 - v)));
            }
            Op::SoftmaxRows(a) => {
                let y = self.mat(Var(id));
                let gm = g2();
                let mut out = Array2::<f64>::zeros(y.raw_dim());
                for i in 0..y.nrows() {
                    let yr = y.row(i);
                    let gr = gm.row(i);
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..y.ncols() {
                        out[[i, j]] = yr[j] * (gr[j] - dot);
                    }
                }
                accum(grads, *a, out.into_dyn());
            }
            Op::L2NormRows(a) => {
                let x = self.mat(*a);
                let y = self.mat(Var(id));
                let gm = g2();
                let mut out = Array2::<f64>::zeros(x.raw_dim());
                for i in 0..x.nrows() {
                    let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm < 1e-12 {
                        out.row_mut(i).assign(&gm.row(i));
                        continue;
                    }
                    let yr = y.row(i);
                    let gr = gm.row(i);
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..x.ncols() {
                        out[[i, j]] = (gr[j] - dot * yr[j]) / norm;
                    }
                }
                accum(grads, *a, out.into_dyn());
            }
            Op::ConcatCols(a, b) => {
                let na = self.mat(*a).ncols();
                let gm = g2();
                let ga = gm.slice(ndarray::s![.., ..na]).to_owned();
                let gb = gm.slice(ndarray::s![.., na..]).to_owned();
                accum(grads, *a, ga.into_dyn());
                accum(grads, *b, gb.into_dyn());
            }
            Op::SliceCols(a, start, len) => {
                let src = self.mat(*a);
                let mut out = Array2::<f64>::zeros(src.raw_dim());
                out.slice_mut(ndarray::s![.., *start..*start + *len])
                    .assign(&g2());
                accum(grads, *a, out.into_dyn());
            }
            Op::SliceRows(a, start, len) => {
                let src = self.mat(*a);
                let mut out = Array2::<f64>::zeros(src.raw_dim());
                out.slice_mut(ndarray::s![*start..*start + *len, ..])
                    .assign(&g2());
                accum(grads, *a, out.into_dyn());
            }
            Op::StackRows(parts) => {
                let gm = g2();
                let mut offset = 0;
                for p in parts {
                    let rows = self.mat(*p).nrows();
                    let gp = gm.slice(ndarray::s![offset..offset + rows, ..]).to_owned();
                    accum(grads, *p, gp.into_dyn());
                    offset += rows;
                }
            }
            Op::MeanRows(a) => {
                let src = self.mat(*a);
                let n = src.nrows() as f64;
                let gm = g2();
                let mut out = Array2::<f64>::zeros(src.raw_dim());
                for i in 0..src.nrows() {
                    out.row_mut(i).assign(&(&gm.row(0) / n));
                }
                accum(grads, *a, out.into_dyn());
            }
            Op::Reshape(a) => {
                let back = g
                    .to_shape(self.nodes[a.0].value.raw_dim())
                    .unwrap()
                    .to_owned();
                accum(grads, *a, back);
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            } => {
                let x = self.nodes[input.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix3>()
                    .unwrap()
                    .to_owned();
                let k = self.nodes[kernel.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap()
                    .to_owned();
                let gout = g
                    .view()
                    .into_dimensionality::<Ix3>()
                    .expect("conv grad rank 3")
                    .to_owned();
                let (dx, dk, db) = conv2d_backward(&x, &k, &gout, *stride, *pad);
                accum(grads, *input, dx.into_dyn());
                accum(grads, *kernel, dk.into_dyn());
                accum(grads, *bias, db.into_dyn());
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                valid,
            } => {
                let m = self.mat(*logits);
                let upstream = g.iter().copied().next().unwrap();
                let n_valid = valid.iter().filter(|v| **v).count() as f64;
                let mut out = Array2::<f64>::zeros(m.raw_dim());
                for i in 0..m.nrows() {
                    if !valid[i] {
                        continue;
                    }
                    let row = m.row(i);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for j in 0..m.ncols() {
                        let p = exps[j] / sum;
                        let t = if j == targets[i] { 1.0 } else { 0.0 };
                        out[[i, j]] = (p - t) * upstream / n_valid;
                    }
                }
                accum(grads, *logits, out.into_dyn());
            }
            Op::SoftCrossEntropyRows { logits, target_dist } => {
                let m = self.mat(*logits);
                let upstream = g.iter().copied().next().unwrap();
                let n = m.nrows() as f64;
                let mut out = Array2::<f64>::zeros(m.raw_dim());
                for i in 0..m.nrows() {
                    let row = m.row(i);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    let q_sum: f64 = target_dist.row(i).sum();
                    for j in 0..m.ncols() {
                        let p = exps[j] / sum;
                        out[[i, j]] = (q_sum * p - target_dist[[i, j]]) * upstream / n;
                    }
                }
                accum(grads, *logits, out.into_dyn());
            }
            Op::L1Mean { pred, target } => {
                let p = self.mat(*pred);
                let upstream = g.iter().copied().next().unwrap();
                let n = p.len().max(1) as f64;
                let mut out = Array2::<f64>::zeros(p.raw_dim());
                for ((i, j), v) in p.indexed_iter() {
                    let d = v - target[[i, j]];
                    out[[i, j]] = d.signum() * if d == 0.0 { 0.0 } else { 1.0 } * upstream / n;
                }
                accum(grads, *pred, out.into_dyn());
            }
        }
    }
}

fn accum(grads: &mut [Option<ArrayD<f64>>], v: Var, delta: ArrayD<f64>) {
    match &mut grads[v.0] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn out_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

fn conv2d_forward(
    x: &Array3<f64>,
    k: &Array4<f64>,
    b: &Array1<f64>,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (cin, h, w) = x.dim();
    let (cout, kcin, kh, kw) = k.dim();
    assert_eq!(cin, kcin, "conv channel mismatch");
    assert_eq!(kh, kw);
    let (oh, ow) = (out_size(h, kh, stride, pad), out_size(w, kw, stride, pad));

    let cols = im2col(x, kh, stride, pad, oh, ow);
    let kmat = k.to_shape((cout, cin * kh * kw)).unwrap().to_owned();
    let mut out_mat = kmat.dot(&cols);
    for (mut row, bias) in out_mat.rows_mut().into_iter().zip(b.iter()) {
        row += *bias;
    }
    out_mat.to_shape((cout, oh, ow)).unwrap().to_owned()
}

fn conv2d_backward(
    x: &Array3<f64>,
    k: &Array4<f64>,
    gout: &Array3<f64>,
    stride: usize,
    pad: usize,
) -> (Array3<f64>, Array4<f64>, Array1<f64>) {
    let (cin, h, w) = x.dim();
    let (cout, _, kh, kw) = k.dim();
    let (_, oh, ow) = gout.dim();

    let cols = im2col(x, kh, stride, pad, oh, ow);
    let gmat = gout.to_shape((cout, oh * ow)).unwrap().to_owned();

    let dk = gmat
        .dot(&cols.t())
        .to_shape((cout, cin, kh, kw))
        .unwrap()
        .to_owned();
    let db = gmat.sum_axis(Axis(1));

    let kmat = k.to_shape((cout, cin * kh * kw)).unwrap().to_owned();
    let dcols = kmat.t().dot(&gmat);
    let dx = col2im(&dcols, cin, h, w, kh, stride, pad, oh, ow);
    (dx, dk, db)
}

fn im2col(
    x: &Array3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((cin * k * k, oh * ow));
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * ow + ox]] = x[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<f64> {
    let mut dx = Array3::<f64>::zeros((cin, h, w));
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[c, iy as usize, ix as usize]] += dcols[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    dx
}

// ---- parameter initialization ------------------------------------------

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Gaussian N(0, sigma^2) matrix.
pub fn randn2(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sigma: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| gaussian(rng) * sigma)
}

/// Uniform fan-in scaled init for dense layers: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn uniform_fan_in(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-bound..bound))
}

/// Kaiming-style conv kernel init.
pub fn conv_kernel_init(
    rng: &mut ChaCha8Rng,
    cout: usize,
    cin: usize,
    k: usize,
) -> Array4<f64> {
    let fan_in = (cin * k * k) as f64;
    let sigma = (2.0 / fan_in).sqrt();
    Array4::from_shape_fn((cout, cin, k, k), |_| gaussian(rng) * sigma)
}

/// Orthogonal square matrix via Gram-Schmidt on a Gaussian draw.
pub fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
    let mut m = randn2(rng, n, n, 1.0);
    for i in 0..n {
        for j in 0..i {
            let proj: f64 = (0..n).map(|k| m[[i, k]] * m[[j, k]]).sum();
            for k in 0..n {
                let mjk = m[[j, k]];
                m[[i, k]] -= proj * mjk;
            }
        }
        let norm: f64 = (0..n).map(|k| m[[i, k]] * m[[i, k]]).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for k in 0..n {
                m[[i, k]] /= norm;
            }
        } else {
            m[[i, i]] = 1.0;
        }
    }
    m
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
