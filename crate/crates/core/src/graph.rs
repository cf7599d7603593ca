//! Reverse-mode automatic differentiation on small dense tensors.
//!
//! A [`Graph`] owns an append-only tape. Building an op evaluates it
//! immediately; [`Graph::backward`] walks the tape once in reverse and
//! returns one gradient per node. Graphs are intended to be built per
//! sample and dropped after the optimizer step, so no node is ever freed
//! individually.

use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Recip(Var),
    SumAll(Var),
    MeanAll(Var),
    /// Tensor scaled by a rank-0 variable.
    MulScalar(Var, Var),
    Concat0(Vec<Var>),
    Index0(Var, usize),
    Slice0(Var, usize, usize),
    Stack0(Vec<Var>),
    SumAxis0(Var),
    Softmax0(Var),
    LogSoftmax0(Var),
    LogSumExp0(Var),
    Conv2dSame { x: Var, w: Var, b: Var },
    Affine { x: Var, w: Var, b: Var },
    ChannelNorm { x: Var, eps: f64 },
    Reshape(Var),
    /// `A  ->  A Aᵀ` for row-major `A` of shape `(n, d)`.
    Gram(Var),
    Det(Var),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    /// Gradient of the sink w.r.t. `v`, if `v` influenced the sink.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0[v.0].take()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    // ── Node constructors ───────────────────────────────────────────────

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn constant(&mut self, c: f64) -> Var {
        self.push(Op::Leaf, Tensor::scalar(c))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        self.push(Op::Neg(a), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddConst(a), v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Ln(a), v)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(Op::Recip(a), v)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Op::MeanAll(a), Tensor::scalar(s))
    }

    /// `t * s` where `s` is a single-element node.
    pub fn mul_scalar(&mut self, t: Var, s: Var) -> Var {
        let sv = self.item(s);
        let v = self.value(t).map(|x| x * sv);
        self.push(Op::MulScalar(t, s), v)
    }

    /// Concatenate along axis 0; trailing dimensions must match.
    pub fn concat0(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rest = self.value(parts[0]).shape()[1..].to_vec();
        let mut n0 = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(&t.shape()[1..], &rest[..], "concat0 trailing dims differ");
            n0 += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![n0];
        shape.extend_from_slice(&rest);
        self.push(Op::Concat0(parts.to_vec()), Tensor::new(shape, data))
    }

    /// Select index `i` along axis 0, dropping that axis.
    pub fn index0(&mut self, a: Var, i: usize) -> Var {
        let t = self.value(a);
        let n = t.shape()[0];
        assert!(i < n, "index0 {} out of {}", i, n);
        let m = t.numel() / n;
        let data = t.data()[i * m..(i + 1) * m].to_vec();
        let shape = t.shape()[1..].to_vec();
        self.push(Op::Index0(a, i), Tensor::new(shape, data))
    }

    /// Keep `count` slices along axis 0 starting at `from`.
    pub fn slice0(&mut self, a: Var, from: usize, count: usize) -> Var {
        let t = self.value(a);
        let n = t.shape()[0];
        assert!(from + count <= n, "slice0 {}+{} out of {}", from, count, n);
        let m = t.numel() / n;
        let data = t.data()[from * m..(from + count) * m].to_vec();
        let mut shape = vec![count];
        shape.extend_from_slice(&t.shape()[1..]);
        self.push(Op::Slice0(a, from, count), Tensor::new(shape, data))
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack0(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let inner = self.value(parts[0]).shape().to_vec();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.shape(), &inner[..], "stack0 shape mismatch");
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner);
        self.push(Op::Stack0(parts.to_vec()), Tensor::new(shape, data))
    }

    pub fn sum_axis0(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.shape()[0];
        let m = t.numel() / n;
        let mut data = vec![0.0; m];
        for k in 0..n {
            let block = &t.data()[k * m..(k + 1) * m];
            for (d, &x) in data.iter_mut().zip(block) {
                *d += x;
            }
        }
        let shape = t.shape()[1..].to_vec();
        self.push(Op::SumAxis0(a), Tensor::new(shape, data))
    }

    /// Softmax across axis 0, independently at every trailing position.
    pub fn softmax0(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = softmax_axis0(t);
        self.push(Op::Softmax0(a), v)
    }

    pub fn log_softmax0(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (n, m) = axis0_split(t);
        let mut out = vec![0.0; t.numel()];
        for p in 0..m {
            let lse = lse_at(t.data(), n, m, p);
            for k in 0..n {
                out[k * m + p] = t.data()[k * m + p] - lse;
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out);
        self.push(Op::LogSoftmax0(a), v)
    }

    /// `log Σ_k exp(x[k, ..])`, dropping axis 0.
    pub fn logsumexp0(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (n, m) = axis0_split(t);
        let mut out = vec![0.0; m];
        for (p, o) in out.iter_mut().enumerate() {
            *o = lse_at(t.data(), n, m, p);
        }
        let shape = t.shape()[1..].to_vec();
        self.push(Op::LogSumExp0(a), Tensor::new(shape, out))
    }

    /// Same-padded 2-D convolution: `x (C_in,H,W)`, `w (C_out,C_in,kh,kw)`
    /// with odd kernel sides, `b (C_out)`.
    pub fn conv2d_same(&mut self, x: Var, w: Var, b: Var) -> Var {
        let v = conv2d_same_forward(self.value(x), self.value(w), self.value(b));
        self.push(Op::Conv2dSame { x, w, b }, v)
    }

    /// `W x + b` with `x (n)`, `w (m,n)`, `b (m)`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        let n = xt.numel();
        assert_eq!(wt.shape().len(), 2);
        let m = wt.shape()[0];
        assert_eq!(wt.shape()[1], n, "affine width mismatch");
        assert_eq!(bt.numel(), m);
        let mut out = bt.data().to_vec();
        for i in 0..m {
            let row = &wt.data()[i * n..(i + 1) * n];
            out[i] += row.iter().zip(xt.data()).map(|(&a, &b)| a * b).sum::<f64>();
        }
        self.push(Op::Affine { x, w, b }, Tensor::new([m], out))
    }

    /// Normalize each axis-0 slice to zero mean, unit variance.
    pub fn channel_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let (c, m) = axis0_split(t);
        let mut out = vec![0.0; t.numel()];
        for ch in 0..c {
            let xs = &t.data()[ch * m..(ch + 1) * m];
            let (mu, var) = mean_var(xs);
            let s = 1.0 / (var + eps).sqrt();
            for (o, &x) in out[ch * m..(ch + 1) * m].iter_mut().zip(xs) {
                *o = (x - mu) * s;
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out);
        self.push(Op::ChannelNorm { x, eps }, v)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Var {
        let v = self.value(a).reshaped(shape);
        self.push(Op::Reshape(a), v)
    }

    /// `A Aᵀ` of a row-major `(n, d)` matrix; output `(n, n)`.
    pub fn gram(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 2);
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let dot = t.data()[i * d..(i + 1) * d]
                    .iter()
                    .zip(&t.data()[j * d..(j + 1) * d])
                    .map(|(&a, &b)| a * b)
                    .sum::<f64>();
                out[i * n + j] = dot;
                out[j * n + i] = dot;
            }
        }
        self.push(Op::Gram(a), Tensor::new([n, n], out))
    }

    /// Determinant of a square matrix; gradient is the cofactor matrix, so
    /// it stays correct for singular inputs.
    pub fn det(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 2);
        let n = t.shape()[0];
        assert_eq!(t.shape()[1], n, "det needs a square matrix");
        let d = det_lu(t.data(), n);
        self.push(Op::Det(a), Tensor::scalar(d))
    }

    /// Sum several same-shaped nodes.
    pub fn sum_vars(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Gradient of single-element node `sink` w.r.t. every node on the tape.
    pub fn backward(&self, sink: Var) -> Gradients {
        assert_eq!(
            self.value(sink).numel(),
            1,
            "backward sink must be a single element"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[sink.0] = Some(Tensor::new(
            self.value(sink).shape().to_vec(),
            vec![1.0],
        ));

        for idx in (0..=sink.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients(grads)
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g.zip_map(self.value(*b), |gv, bv| gv * bv));
                acc(grads, *b, g.zip_map(self.value(*a), |gv, av| gv * av));
            }
            Op::Neg(a) => acc(grads, *a, g.map(|x| -x)),
            Op::Scale(a, c) => acc(grads, *a, g.map(|x| x * c)),
            Op::AddConst(a) => acc(grads, *a, g.clone()),
            Op::Relu(a) => {
                acc(grads, *a, g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }));
            }
            Op::Tanh(a) => acc(grads, *a, g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv))),
            Op::Sigmoid(a) => acc(grads, *a, g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv))),
            Op::Exp(a) => acc(grads, *a, g.zip_map(y, |gv, yv| gv * yv)),
            Op::Ln(a) => acc(grads, *a, g.zip_map(self.value(*a), |gv, x| gv / x)),
            Op::Sqrt(a) => acc(grads, *a, g.zip_map(y, |gv, yv| gv / (2.0 * yv))),
            Op::Square(a) => acc(grads, *a, g.zip_map(self.value(*a), |gv, x| gv * 2.0 * x)),
            Op::Recip(a) => acc(grads, *a, g.zip_map(y, |gv, yv| -gv * yv * yv)),
            Op::SumAll(a) => {
                let gv = g.item();
                acc(grads, *a, Tensor::full(self.value(*a).shape().to_vec(), gv));
            }
            Op::MeanAll(a) => {
                let t = self.value(*a);
                let gv = g.item() / t.numel() as f64;
                acc(grads, *a, Tensor::full(t.shape().to_vec(), gv));
            }
            Op::MulScalar(t, s) => {
                let sv = self.item(*s);
                acc(grads, *t, g.map(|x| x * sv));
                let dot = g
                    .data()
                    .iter()
                    .zip(self.value(*t).data())
                    .map(|(&gv, &tv)| gv * tv)
                    .sum::<f64>();
                acc(grads, *s, Tensor::scalar(dot));
            }
            Op::Concat0(parts) => {
                let mut off = 0;
                for &p in parts {
                    let t = self.value(p);
                    let len = t.numel();
                    let chunk =
                        Tensor::new(t.shape().to_vec(), g.data()[off..off + len].to_vec());
                    acc(grads, p, chunk);
                    off += len;
                }
            }
            Op::Index0(a, i) => {
                let t = self.value(*a);
                let m = t.numel() / t.shape()[0];
                let mut d = vec![0.0; t.numel()];
                d[i * m..(i + 1) * m].copy_from_slice(g.data());
                acc(grads, *a, Tensor::new(t.shape().to_vec(), d));
            }
            Op::Slice0(a, from, count) => {
                let t = self.value(*a);
                let m = t.numel() / t.shape()[0];
                let mut d = vec![0.0; t.numel()];
                d[from * m..(from + count) * m].copy_from_slice(g.data());
                acc(grads, *a, Tensor::new(t.shape().to_vec(), d));
            }
            Op::Stack0(parts) => {
                let m = self.value(parts[0]).numel();
                for (k, &p) in parts.iter().enumerate() {
                    let chunk = Tensor::new(
                        self.value(p).shape().to_vec(),
                        g.data()[k * m..(k + 1) * m].to_vec(),
                    );
                    acc(grads, p, chunk);
                }
            }
            Op::SumAxis0(a) => {
                let t = self.value(*a);
                let n = t.shape()[0];
                let m = t.numel() / n;
                let mut d = vec![0.0; t.numel()];
                for k in 0..n {
                    d[k * m..(k + 1) * m].copy_from_slice(g.data());
                }
                acc(grads, *a, Tensor::new(t.shape().to_vec(), d));
            }
            Op::Softmax0(a) => {
                // dz_k = y_k (g_k − Σ_j g_j y_j) at each trailing position.
                let (n, m) = axis0_split(y);
                let mut d = vec![0.0; y.numel()];
                for p in 0..m {
                    let mut dot = 0.0;
                    for k in 0..n {
                        dot += g.data()[k * m + p] * y.data()[k * m + p];
                    }
                    for k in 0..n {
                        let i = k * m + p;
                        d[i] = y.data()[i] * (g.data()[i] - dot);
                    }
                }
                acc(grads, *a, Tensor::new(y.shape().to_vec(), d));
            }
            Op::LogSoftmax0(a) => {
                // dz_k = g_k − softmax_k Σ_j g_j ; softmax = exp(y).
                let (n, m) = axis0_split(y);
                let mut d = vec![0.0; y.numel()];
                for p in 0..m {
                    let gsum: f64 = (0..n).map(|k| g.data()[k * m + p]).sum();
                    for k in 0..n {
                        let i = k * m + p;
                        d[i] = g.data()[i] - y.data()[i].exp() * gsum;
                    }
                }
                acc(grads, *a, Tensor::new(y.shape().to_vec(), d));
            }
            Op::LogSumExp0(a) => {
                // dz_k = exp(x_k − lse) g at each position.
                let t = self.value(*a);
                let (n, m) = axis0_split(t);
                let mut d = vec![0.0; t.numel()];
                for p in 0..m {
                    let lse = y.data()[p];
                    for k in 0..n {
                        let i = k * m + p;
                        d[i] = (t.data()[i] - lse).exp() * g.data()[p];
                    }
                }
                acc(grads, *a, Tensor::new(t.shape().to_vec(), d));
            }
            Op::Conv2dSame { x, w, b } => {
                let (dx, dw, db) = conv2d_same_backward(self.value(*x), self.value(*w), g);
                acc(grads, *x, dx);
                acc(grads, *w, dw);
                acc(grads, *b, db);
            }
            Op::Affine { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let n = xt.numel();
                let m = wt.shape()[0];
                let mut dx = vec![0.0; n];
                let mut dw = vec![0.0; m * n];
                for i in 0..m {
                    let gi = g.data()[i];
                    let row = &wt.data()[i * n..(i + 1) * n];
                    for j in 0..n {
                        dx[j] += gi * row[j];
                        dw[i * n + j] = gi * xt.data()[j];
                    }
                }
                acc(grads, *x, Tensor::new(xt.shape().to_vec(), dx));
                acc(grads, *w, Tensor::new(wt.shape().to_vec(), dw));
                acc(grads, *b, Tensor::new([m], g.data().to_vec()));
            }
            Op::ChannelNorm { x, eps } => {
                // dx = s (g − mean(g) − x̂ · mean(g ⊙ x̂)) per channel.
                let t = self.value(*x);
                let (c, m) = axis0_split(t);
                let mut d = vec![0.0; t.numel()];
                for ch in 0..c {
                    let xs = &t.data()[ch * m..(ch + 1) * m];
                    let ys = &y.data()[ch * m..(ch + 1) * m];
                    let gs = &g.data()[ch * m..(ch + 1) * m];
                    let (_, var) = mean_var(xs);
                    let s = 1.0 / (var + eps).sqrt();
                    let gmean = gs.iter().sum::<f64>() / m as f64;
                    let gydot = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<f64>() / m as f64;
                    for i in 0..m {
                        d[ch * m + i] = s * (gs[i] - gmean - ys[i] * gydot);
                    }
                }
                acc(grads, *x, Tensor::new(t.shape().to_vec(), d));
            }
            Op::Reshape(a) => {
                let t = self.value(*a);
                acc(grads, *a, Tensor::new(t.shape().to_vec(), g.data().to_vec()));
            }
            Op::Gram(a) => {
                // dA = (G + Gᵀ) A for output gradient G.
                let t = self.value(*a);
                let (n, dlen) = (t.shape()[0], t.shape()[1]);
                let mut d = vec![0.0; n * dlen];
                for i in 0..n {
                    for j in 0..n {
                        let coef = g.data()[i * n + j] + g.data()[j * n + i];
                        if coef == 0.0 {
                            continue;
                        }
                        let row = &t.data()[j * dlen..(j + 1) * dlen];
                        for k in 0..dlen {
                            d[i * dlen + k] += coef * row[k];
                        }
                    }
                }
                acc(grads, *a, Tensor::new(t.shape().to_vec(), d));
            }
            Op::Det(a) => {
                let t = self.value(*a);
                let n = t.shape()[0];
                let gv = g.item();
                let cof = cofactor_matrix(t.data(), n);
                acc(
                    grads,
                    *a,
                    Tensor::new(t.shape().to_vec(), cof.iter().map(|&c| c * gv).collect()),
                );
            }
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            assert_eq!(existing.shape(), delta.shape());
            for (a, &b) in existing.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

// ── Shared numeric helpers ──────────────────────────────────────────────

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(axis0 length, product of trailing dims)`.
fn axis0_split(t: &Tensor) -> (usize, usize) {
    let n = t.shape()[0];
    (n, t.numel() / n)
}

fn lse_at(data: &[f64], n: usize, m: usize, p: usize) -> f64 {
    let mut mx = f64::NEG_INFINITY;
    for k in 0..n {
        mx = mx.max(data[k * m + p]);
    }
    let mut s = 0.0;
    for k in 0..n {
        s += (data[k * m + p] - mx).exp();
    }
    mx + s.ln()
}

/// Softmax across axis 0 with max subtraction, as a plain-value op.
pub fn softmax_axis0(t: &Tensor) -> Tensor {
    let (n, m) = axis0_split(t);
    let mut out = vec![0.0; t.numel()];
    for p in 0..m {
        let mut mx = f64::NEG_INFINITY;
        for k in 0..n {
            mx = mx.max(t.data()[k * m + p]);
        }
        let mut s = 0.0;
        for k in 0..n {
            let e = (t.data()[k * m + p] - mx).exp();
            out[k * m + p] = e;
            s += e;
        }
        for k in 0..n {
            out[k * m + p] /= s;
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let m = xs.len() as f64;
    let mu = xs.iter().sum::<f64>() / m;
    let var = xs.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / m;
    (mu, var)
}

fn conv2d_same_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, ci2, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(ci, ci2, "conv input channels mismatch");
    assert!(kh % 2 == 1 && kw % 2 == 1, "conv kernel sides must be odd");
    assert_eq!(b.numel(), co);
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0.0; co * h * wd];
    for o in 0..co {
        out[o * h * wd..(o + 1) * h * wd].fill(b.data()[o]);
    }
    let (xd, wdat) = (x.data(), w.data());
    for o in 0..co {
        let ob = o * h * wd;
        for c in 0..ci {
            let xb = c * h * wd;
            let wb = (o * ci + c) * kh * kw;
            for di in 0..kh {
                let ilo = ph.saturating_sub(di);
                let ihi = (h + ph).saturating_sub(di).min(h);
                for dj in 0..kw {
                    let wv = wdat[wb + di * kw + dj];
                    if wv == 0.0 {
                        continue;
                    }
                    let jlo = pw.saturating_sub(dj);
                    let jhi = (wd + pw).saturating_sub(dj).min(wd);
                    for i in ilo..ihi {
                        let orow = ob + i * wd;
                        let xrow = xb + (i + di - ph) * wd;
                        for j in jlo..jhi {
                            out[orow + j] += wv * xd[xrow + j + dj - pw];
                        }
                    }
                }
            }
        }
    }
    Tensor::new([co, h, wd], out)
}

fn conv2d_same_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (ph, pw) = (kh / 2, kw / 2);
    let mut dx = vec![0.0; x.numel()];
    let mut dw = vec![0.0; w.numel()];
    let mut db = vec![0.0; co];
    let (xd, wdat, gd) = (x.data(), w.data(), g.data());
    for o in 0..co {
        let ob = o * h * wd;
        db[o] = gd[ob..ob + h * wd].iter().sum();
        for c in 0..ci {
            let xb = c * h * wd;
            let wb = (o * ci + c) * kh * kw;
            for di in 0..kh {
                let ilo = ph.saturating_sub(di);
                let ihi = (h + ph).saturating_sub(di).min(h);
                for dj in 0..kw {
                    let wv = wdat[wb + di * kw + dj];
                    let jlo = pw.saturating_sub(dj);
                    let jhi = (wd + pw).saturating_sub(dj).min(wd);
                    let mut wsum = 0.0;
                    for i in ilo..ihi {
                        let orow = ob + i * wd;
                        let xrow = xb + (i + di - ph) * wd;
                        for j in jlo..jhi {
                            let gv = gd[orow + j];
                            dx[xrow + j + dj - pw] += wv * gv;
                            wsum += gv * xd[xrow + j + dj - pw];
                        }
                    }
                    dw[wb + di * kw + dj] += wsum;
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx),
        Tensor::new(w.shape().to_vec(), dw),
        Tensor::new([co], db),
    )
}

/// Determinant by LU decomposition with partial pivoting.
pub fn det_lu(m: &[f64], n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let mut a = m.to_vec();
    let mut sign = 1.0;
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].abs();
        for r in col + 1..n {
            let v = a[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best == 0.0 {
            return 0.0;
        }
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            sign = -sign;
        }
        let pv = a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] / pv;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[r * n + k] -= f * a[col * n + k];
            }
        }
    }
    if n > 6 {
        // Accumulate in log magnitude to dodge under/overflow of the
        // pivot product on larger matrices.
        let mut logmag = 0.0;
        for i in 0..n {
            let p = a[i * n + i];
            if p < 0.0 {
                sign = -sign;
            }
            logmag += p.abs().ln();
        }
        sign * logmag.exp()
    } else {
        let mut det = sign;
        for i in 0..n {
            det *= a[i * n + i];
        }
        det
    }
}

/// Cofactor matrix `C` with `C[i][j] = (−1)^{i+j} det(minor_ij)`.
fn cofactor_matrix(m: &[f64], n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let mut cof = vec![0.0; n * n];
    let mut minor = vec![0.0; (n - 1) * (n - 1)];
    for i in 0..n {
        for j in 0..n {
            let mut idx = 0;
            for r in 0..n {
                if r == i {
                    continue;
                }
                for c in 0..n {
                    if c == j {
                        continue;
                    }
                    minor[idx] = m[r * n + c];
                    idx += 1;
                }
            }
            let s = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            cof[i * n + j] = s * det_lu(&minor, n - 1);
        }
    }
    cof
}
