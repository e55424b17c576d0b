use super::broadcast::{broadcast_shape, for_each_index, layout, source_offsets, Layout};
use super::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Reshape(Var),
    BroadcastTo(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Select {
        x: Var,
        axis: usize,
        index: usize,
    },
    Nll {
        x: Var,
        labels: Vec<usize>,
    },
    StraightThrough(Var),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Gelu(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumLast(a)
            | Op::Reshape(a)
            | Op::BroadcastTo(a)
            | Op::StraightThrough(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Select { x, .. } | Op::Nll { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// A tape of tensor operations in topological (insertion) order.
///
/// Nodes whose inputs do not require gradients are stored as constants, so
/// only the differentiable part of the computation is replayed by
/// [`Graph::backward`].
#[derive(Debug)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a node's value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        let n = &self.nodes[v.0];
        assert_eq!(n.value.len(), 1, "item() on node of shape {:?}", n.shape);
        n.value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let inputs = op.inputs();
        if cfg!(debug_assertions) && !inputs.is_empty() {
            let finite_in = inputs.iter().all(|v| self.nodes[v.0].value.iter().all(|x| x.is_finite()));
            if finite_in {
                debug_assert!(
                    value.iter().all(|x| x.is_finite()),
                    "non-finite output from finite inputs in {op:?}",
                    op = std::mem::discriminant(&op)
                );
            }
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad || inputs.is_empty() { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a tensor as a leaf, inheriting its `requires_grad` flag.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf);
        self.nodes[v.0].requires_grad = t.requires_grad();
        v
    }

    /// Binds a tensor as a constant leaf.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    pub fn constant_from(&mut self, shape: impl Into<Vec<usize>>, value: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, value)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf))
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.push(Vec::new(), vec![value], Op::Leaf)
    }

    // ---------------------------------------------------------------------
    // forward primitives
    // ---------------------------------------------------------------------

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[..., M, K]`. `b` is either `[K, N]` (shared across the batch)
    /// or `[..., K, N]` with the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let batch_a = &sa[..sa.len() - 2];
        let mut out_shape = batch_a.to_vec();
        out_shape.extend([m, n]);
        let rows: usize = batch_a.iter().product::<usize>() * m;
        let mut out = vec![T::zero(); rows * n];
        if sb.len() == 2 {
            gemm(rows, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        } else {
            if sb[..sb.len() - 2] != *batch_a {
                return Err(err());
            }
            let batches: usize = batch_a.iter().product();
            let (av, bv) = (self.value(a), self.value(b));
            for i in 0..batches {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        Ok(self.push(out_shape, out, Op::MatMul(a, b)))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: s,
                rhs: vec![],
            });
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let batches = s[..s.len() - 2].iter().product::<usize>();
        let src = self.value(a);
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batches {
            let base = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[base + j * m + i] = src[base + i * n + j];
                }
            }
        }
        let mut shape = s.clone();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        Ok(self.push(shape, out, Op::Transpose(a)))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| Error::Shape {
            op: name,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        let (av, bv) = (self.value(a), self.value(b));
        let out = match (layout(sa, &out_shape), layout(sb, &out_shape)) {
            (Layout::Same, Layout::Same) => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            (Layout::Same, Layout::Suffix(len)) => av.iter().enumerate().map(|(i, &x)| f(x, bv[i % len])).collect(),
            (Layout::Suffix(len), Layout::Same) => bv.iter().enumerate().map(|(i, &y)| f(av[i % len], y)).collect(),
            _ => {
                let mut out = vec![T::zero(); out_shape.iter().product()];
                for_each_index(&out_shape, sa, sb, |i, ia, ib| out[i] = f(av[ia], bv[ib]));
                out
            }
        };
        Ok((out_shape, out))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(shape, out, Op::Add(a, b)))
    }

    /// Elementwise difference with broadcasting.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(shape, out, Op::Sub(a, b)))
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "broadcast_mul", |x, y| x * y)?;
        Ok(self.push(shape, out, Op::Mul(a, b)))
    }

    /// Multiplies by a compile-time constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let out = self.value(a).iter().map(|&x| x + c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::AddScalar(a))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T) -> (Vec<usize>, Vec<T>) {
        (self.shape(a).to_vec(), self.value(a).iter().map(|&x| f(x)).collect())
    }

    /// Exact GELU, `0.5 x (1 + erf(x / sqrt 2))`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (s, v) = self.unary(a, |x| {
            let x = x.as_f64();
            T::from_f64(0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2)))
        });
        self.push(s, v, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (s, v) = self.unary(a, |x| if x > T::zero() { x } else { T::zero() });
        self.push(s, v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (s, v) = self.unary(a, |x| T::from_f64(sigmoid_f64(x.as_f64())));
        self.push(s, v, Op::Sigmoid(a))
    }

    /// Forward value is `1[x > 0.5]`; the backward pass is the identity.
    pub fn straight_through(&mut self, a: Var) -> Var {
        let half = T::from_f64(0.5);
        let (s, v) = self.unary(a, |x| if x > half { T::one() } else { T::zero() });
        self.push(s, v, Op::StraightThrough(a))
    }

    fn rows(&self, a: Var, name: &'static str) -> Result<usize> {
        let s = self.shape(a);
        match s.last() {
            Some(&n) if n > 0 => Ok(n),
            _ => Err(Error::Shape {
                op: name,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    /// Softmax over the last axis (row max subtracted first).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = self.rows(a, "softmax_lastdim")?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut sum = 0.0f64;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += x.as_f64();
            }
            let inv = T::from_f64(1.0 / sum);
            row.iter_mut().for_each(|x| *x = *x * inv);
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Softmax(a)))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let n = self.rows(a, "log_softmax_lastdim")?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let sum: f64 = row.iter().map(|&x| (x - max).as_f64().exp()).sum();
            let lse = max + T::from_f64(sum.ln());
            row.iter_mut().for_each(|x| *x = *x - lse);
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::LogSoftmax(a)))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = self.rows(x, "layer_norm")?;
        for p in [gamma, beta] {
            if self.shape(p) != [n] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let rows = xv.len() / n;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = T::from_f64(rs);
            for j in 0..n {
                let h = T::from_f64((row[j].as_f64() - mean) * rs);
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Sum of all elements, as a scalar. Accumulates in f64.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().map(|v| v.as_f64()).sum();
        self.push(Vec::new(), vec![T::from_f64(s)], Op::Sum(a))
    }

    /// Mean of all elements, as a scalar. Accumulates in f64.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: f64 = v.iter().map(|v| v.as_f64()).sum::<f64>() / v.len().max(1) as f64;
        self.push(Vec::new(), vec![T::from_f64(s)], Op::Mean(a))
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let n = self.rows(a, "sum_lastdim")?;
        let out = self
            .value(a)
            .chunks(n)
            .map(|row| T::from_f64(row.iter().map(|v| v.as_f64()).sum()))
            .collect();
        let mut shape = self.shape(a).to_vec();
        shape.pop();
        Ok(self.push(shape, out, Op::SumLast(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let v = self.value(a).to_vec();
        Ok(self.push(shape, v, Op::Reshape(a)))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let sa = self.shape(a).to_vec();
        if broadcast_shape(&sa, &shape).as_deref() != Some(&shape[..]) {
            return Err(Error::Shape {
                op: "broadcast_to",
                lhs: sa,
                rhs: shape,
            });
        }
        let av = self.value(a);
        let out = source_offsets(&sa, &shape).into_iter().map(|i| av[i]).collect();
        Ok(self.push(shape, out, Op::BroadcastTo(a)))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::Shape {
            op: "concat",
            lhs: vec![],
            rhs: vec![],
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape {
                op: "concat",
                lhs: base,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let width = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * width..(o + 1) * width]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Picks `index` along `axis`, removing that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || index >= s[axis] {
            return Err(Error::Shape {
                op: "select",
                lhs: s,
                rhs: vec![axis, index],
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * s[axis] + index) * inner;
            out.extend_from_slice(&xv[start..start + inner]);
        }
        let mut shape = s;
        shape.remove(axis);
        Ok(self.push(shape, out, Op::Select { x, axis, index }))
    }

    /// Mean negative log-likelihood of `labels` under row log-probabilities.
    pub fn nll(&mut self, logp: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logp).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Shape {
                op: "nll",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let classes = s[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        let v = self.value(logp);
        let total: f64 = labels.iter().enumerate().map(|(i, &y)| -v[i * classes + y].as_f64()).sum();
        let out = T::from_f64(total / labels.len() as f64);
        Ok(self.push(
            Vec::new(),
            vec![out],
            Op::Nll {
                x: logp,
                labels: labels.to_vec(),
            },
        ))
    }

    // ---------------------------------------------------------------------
    // backward
    // ---------------------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Every leaf that requires a gradient gets an entry in the result; leaves
    /// that do not influence the loss receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if ln.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| match (&n.op, n.requires_grad) {
                (Op::Leaf, true) => Some(g.unwrap_or_else(|| vec![T::zero(); n.value.len()])),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
    }

    /// Accumulates `g` (shaped like `out`) into the broadcast source `src`.
    fn reduce_into(&self, grads: &mut [Option<Vec<T>>], src: Var, out: &[usize], g: &[T], f: impl Fn(usize, T) -> T) {
        let src_shape = self.nodes[src.0].shape.clone();
        let Some(dst) = self.slot(grads, src) else { return };
        match layout(&src_shape, out) {
            Layout::Same => dst.iter_mut().zip(g).enumerate().for_each(|(i, (d, &x))| *d = *d + f(i, x)),
            Layout::Suffix(len) => {
                for (i, &x) in g.iter().enumerate() {
                    dst[i % len] = dst[i % len] + f(i, x);
                }
            }
            Layout::General => for_each_index(out, &src_shape, &[], |i, is, _| dst[is] = dst[is] + f(i, g[i])),
        }
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out_shape = &node.shape;
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => self.backprop_matmul(*a, *b, g, grads),
            Op::Transpose(a) => {
                // out is [..., n, m] for input [..., m, n]
                let r = out_shape.len();
                let (n, m) = (out_shape[r - 2], out_shape[r - 1]);
                if let Some(dst) = self.slot(grads, *a) {
                    let batches = dst.len() / (m * n).max(1);
                    for bt in 0..batches {
                        let base = bt * m * n;
                        for p in 0..n {
                            for q in 0..m {
                                dst[base + q * n + p] = dst[base + q * n + p] + g[base + p * m + q];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.reduce_into(grads, *a, out_shape, g, |_, x| x);
                self.reduce_into(grads, *b, out_shape, g, |_, x| x);
            }
            Op::Sub(a, b) => {
                self.reduce_into(grads, *a, out_shape, g, |_, x| x);
                self.reduce_into(grads, *b, out_shape, g, |_, x| -x);
            }
            Op::Mul(a, b) => {
                let sa = &self.nodes[a.0].shape;
                let sb = &self.nodes[b.0].shape;
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let oa = source_offsets_cached(sa, out_shape);
                let ob = source_offsets_cached(sb, out_shape);
                if self.nodes[a.0].requires_grad {
                    self.reduce_into(grads, *a, out_shape, g, |k, x| x * bv[ob.at(k)]);
                }
                if self.nodes[b.0].requires_grad {
                    self.reduce_into(grads, *b, out_shape, g, |k, x| x * av[oa.at(k)]);
                }
            }
            Op::Scale(a, c) => {
                if let Some(dst) = self.slot(grads, *a) {
                    dst.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x * *c);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) | Op::StraightThrough(a) => {
                if let Some(dst) = self.slot(grads, *a) {
                    dst.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
                }
            }
            Op::Gelu(a) => {
                let xv = &self.nodes[a.0].value;
                if let Some(dst) = self.slot(grads, *a) {
                    let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
                    for ((d, &x), &gy) in dst.iter_mut().zip(xv).zip(g) {
                        let x = x.as_f64();
                        let cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
                        let pdf = inv_sqrt_2pi * (-0.5 * x * x).exp();
                        *d = *d + gy * T::from_f64(cdf + x * pdf);
                    }
                }
            }
            Op::Relu(a) => {
                let xv = &self.nodes[a.0].value;
                if let Some(dst) = self.slot(grads, *a) {
                    for ((d, &x), &gy) in dst.iter_mut().zip(xv).zip(g) {
                        if x > T::zero() {
                            *d = *d + gy;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(dst) = self.slot(grads, *a) {
                    for ((d, &s), &gy) in dst.iter_mut().zip(y).zip(g) {
                        *d = *d + gy * s * (T::one() - s);
                    }
                }
            }
            Op::Softmax(a) => {
                let n = *out_shape.last().unwrap();
                if let Some(dst) = self.slot(grads, *a) {
                    for ((drow, yrow), grow) in dst.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(&p, &q)| (p * q).as_f64()).sum();
                        let dot = T::from_f64(dot);
                        for j in 0..n {
                            drow[j] = drow[j] + yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let n = *out_shape.last().unwrap();
                if let Some(dst) = self.slot(grads, *a) {
                    for ((drow, yrow), grow) in dst.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let gsum = T::from_f64(grow.iter().map(|v| v.as_f64()).sum());
                        for j in 0..n {
                            drow[j] = drow[j] + grow[j] - yrow[j].exp() * gsum;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = *out_shape.last().unwrap();
                let gv = &self.nodes[gamma.0].value;
                if let Some(dg) = self.slot(grads, *gamma) {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] = dg[j] + grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for grow in g.chunks(n) {
                        for j in 0..n {
                            db[j] = db[j] + grow[j];
                        }
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let inv_n = 1.0 / n as f64;
                    for (r, ((dxrow, grow), hrow)) in dx.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate() {
                        let mut mean_dh = 0.0f64;
                        let mut mean_dh_h = 0.0f64;
                        for j in 0..n {
                            let dh = (grow[j] * gv[j]).as_f64();
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j].as_f64();
                        }
                        mean_dh *= inv_n;
                        mean_dh_h *= inv_n;
                        let rs = rstd[r].as_f64();
                        for j in 0..n {
                            let dh = (grow[j] * gv[j]).as_f64();
                            let v = rs * (dh - mean_dh - hrow[j].as_f64() * mean_dh_h);
                            dxrow[j] = dxrow[j] + T::from_f64(v);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(dst) = self.slot(grads, *a) {
                    dst.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(dst) = self.slot(grads, *a) {
                    let s = g[0] / T::from_f64(dst.len() as f64);
                    dst.iter_mut().for_each(|d| *d = *d + s);
                }
            }
            Op::SumLast(a) => {
                if let Some(dst) = self.slot(grads, *a) {
                    let n = dst.len() / g.len();
                    for (row, &gy) in dst.chunks_mut(n).zip(g) {
                        row.iter_mut().for_each(|d| *d = *d + gy);
                    }
                }
            }
            Op::BroadcastTo(a) => self.reduce_into(grads, *a, out_shape, g, |_, x| x),
            Op::Concat { inputs, axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let width = self.nodes[v.0].shape[*axis] * inner;
                    if let Some(dst) = self.slot(grads, v) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + width];
                            for (d, &x) in dst[o * width..(o + 1) * width].iter_mut().zip(src) {
                                *d = *d + x;
                            }
                        }
                    }
                    offset += width;
                }
            }
            Op::Select { x, axis, index } => {
                let s = self.nodes[x.0].shape.clone();
                let inner: usize = s[axis + 1..].iter().product();
                if let Some(dst) = self.slot(grads, *x) {
                    let outer = g.len() / inner.max(1);
                    for o in 0..outer {
                        let start = (o * s[*axis] + index) * inner;
                        for (d, &v) in dst[start..start + inner].iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *d = *d + v;
                        }
                    }
                }
            }
            Op::Nll { x, labels } => {
                let classes = self.nodes[x.0].shape[1];
                if let Some(dst) = self.slot(grads, *x) {
                    let s = g[0] / T::from_f64(labels.len() as f64);
                    for (r, &yl) in labels.iter().enumerate() {
                        dst[r * classes + yl] = dst[r * classes + yl] - s;
                    }
                }
            }
        }
    }

    fn backprop_matmul(&self, a: Var, b: Var, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if sb.len() == 2 {
            let rows = av.len() / k.max(1);
            if let Some(da) = self.slot(grads, a) {
                gemm(rows, n, k, g, false, bv, true, da, true);
            }
            if let Some(db) = self.slot(grads, b) {
                gemm(k, rows, n, av, true, g, false, db, true);
            }
        } else {
            let batches = av.len() / (m * k).max(1);
            if let Some(da) = self.slot(grads, a) {
                for i in 0..batches {
                    gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &bv[i * k * n..(i + 1) * k * n],
                        true,
                        &mut da[i * m * k..(i + 1) * m * k],
                        true,
                    );
                }
            }
            if let Some(db) = self.slot(grads, b) {
                for i in 0..batches {
                    gemm(
                        k,
                        m,
                        n,
                        &av[i * m * k..(i + 1) * m * k],
                        true,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &mut db[i * k * n..(i + 1) * k * n],
                        true,
                    );
                }
            }
        }
    }
}

/// Maps output positions to source offsets without materializing the common cases.
enum Offsets {
    Same,
    Suffix(usize),
    Table(Vec<usize>),
}

impl Offsets {
    fn at(&self, i: usize) -> usize {
        match self {
            Offsets::Same => i,
            Offsets::Suffix(len) => i % len,
            Offsets::Table(t) => t[i],
        }
    }
}

fn source_offsets_cached(src: &[usize], out: &[usize]) -> Offsets {
    match layout(src, out) {
        Layout::Same => Offsets::Same,
        Layout::Suffix(len) => Offsets::Suffix(len),
        Layout::General => Offsets::Table(source_offsets(src, out)),
    }
}

/// Gradients of one backward sweep, indexed by leaf [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `t.grad`. No-op if `v` has no gradient.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor<T>) {
        if let Some(g) = self.get(v) {
            let dst = t.grad_mut();
            assert_eq!(dst.len(), g.len(), "gradient length mismatch");
            dst.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()))
    }
}
