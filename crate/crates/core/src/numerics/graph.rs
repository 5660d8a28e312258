//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and backward is a single reverse sweep.

use std::fmt;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable primitive kinds, used for naming and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Gelu,
    Permute,
    Reshape,
    Concat,
    GatherRows,
    MeanAxis,
    Sum,
}

impl Primitive {
    pub const ALL: [Primitive; 15] = [
        Primitive::MatMul,
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::Softmax,
        Primitive::LogSoftmax,
        Primitive::LayerNorm,
        Primitive::Gelu,
        Primitive::Permute,
        Primitive::Reshape,
        Primitive::Concat,
        Primitive::GatherRows,
        Primitive::MeanAxis,
        Primitive::Sum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::LayerNorm => "layer_norm",
            Primitive::Gelu => "gelu",
            Primitive::Permute => "permute",
            Primitive::Reshape => "reshape",
            Primitive::Concat => "concat",
            Primitive::GatherRows => "gather_rows",
            Primitive::MeanAxis => "mean_axis",
            Primitive::Sum => "sum",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|p| p.name() == name)
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    GatherRows(Var, Vec<usize>),
    MeanAxis(Var, usize),
    Sum(Var),
}

impl<T> Op<T> {
    fn primitive(&self) -> Option<Primitive> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => Primitive::MatMul,
            Op::Add(..) => Primitive::Add,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::Scale(..) => Primitive::Scale,
            Op::Softmax(..) => Primitive::Softmax,
            Op::LogSoftmax(..) => Primitive::LogSoftmax,
            Op::LayerNorm { .. } => Primitive::LayerNorm,
            Op::Gelu(..) => Primitive::Gelu,
            Op::Permute(..) => Primitive::Permute,
            Op::Reshape(..) => Primitive::Reshape,
            Op::Concat(..) => Primitive::Concat,
            Op::GatherRows(..) => Primitive::GatherRows,
            Op::MeanAxis(..) => Primitive::MeanAxis,
            Op::Sum(..) => Primitive::Sum,
        })
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation graph recorded during a forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    fault: Option<Primitive>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        let shape = &self.shapes[v.0];
        self.grads[v.0]
            .take()
            .map(|g| Tensor::new(shape, g).expect("gradient shape"))
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Maps each output flat index of a permutation to its input flat index.
fn permute_index(in_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel: usize = in_shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..numel {
        map.push(src);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            src += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}

/// `c (+)= op(a) * op(b)` for logical shapes a: [m,k], b: [k,n].
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_trans: bool,
    b: &[T],
    b_trans: bool,
    c: &mut [T],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover the strided extents asserted above.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn normal_cdf<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn normal_pdf<T: Scalar>(x: T) -> T {
    let c = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    c * (-(x * x) * T::from_f64(0.5)).exp()
}

/// Checks `b` against `a` for suffix broadcasting; returns b's element count.
fn broadcast_inner(op: &'static str, a: &[usize], b: &[usize]) -> Result<usize> {
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        Ok(b.iter().product())
    } else {
        Err(Error::shape(op, a, b))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Negates the backward rule of one primitive. Used to prove that the
    /// gradient checker catches a broken rule.
    pub fn inject_fault(&mut self, p: Primitive) {
        self.fault = Some(p);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Batched matrix product. `b` may be rank 2 (shared across the batch
    /// dimensions of `a`) or carry the same batch dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let m = sa[sa.len() - 2];
        let k = sa[sa.len() - 1];
        let n = sb[sb.len() - 1];
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        if sb.len() == 2 {
            gemm(batch * m, k, n, av, false, bv, false, &mut out, false);
        } else if sb[..sb.len() - 2] == sa[..sa.len() - 2] {
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..],
                    false,
                    &bv[i * k * n..],
                    false,
                    &mut out[i * m * n..],
                    false,
                );
            }
        } else {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let inner = broadcast_inner(name, self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let data: Vec<T> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % inner]))
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    /// `a + b`, where `b`'s shape equals `a`'s or is a suffix of it.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| x * c).collect();
        let out = Tensor::new(v.shape(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(x[at(j)]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (x[at(j)] - mx).exp();
                    y[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    y[at(j)] = y[at(j)] / sum;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&shape, y)?, Op::Softmax(a, axis), rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(
                "log_softmax",
                format!("axis {axis} for shape {shape:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(x[at(j)]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    sum += (x[at(j)] - mx).exp();
                }
                let lse = mx + sum.ln();
                for j in 0..len {
                    y[at(j)] = x[at(j)] - lse;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&shape, y)?, Op::LogSoftmax(a, axis), rg))
    }

    /// Layer normalization over the last dimension with affine gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::invalid("layer_norm", "scalar input"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.len() / d;
        let inv_d = T::one() / T::from_f64(d as f64);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut y = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) * inv_d;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(&shape, y)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| x * normal_cdf(x)).collect();
        let out = Tensor::new(v.shape(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&ax| ax >= shape.len() || std::mem::replace(&mut seen[ax], true))
        {
            return Err(Error::shape("permute", &shape, axes));
        }
        let map = permute_index(&shape, axes);
        let x = self.value(a).data();
        let data = map.iter().map(|&i| x[i]).collect();
        let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Permute(a, axes.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if shape.iter().product::<usize>() != v.numel() {
            return Err(Error::shape("reshape", v.shape(), shape));
        }
        let out = v.reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let chunk = len * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Selects slices along axis 0. Indices may repeat; gradients of repeated
    /// rows accumulate.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rows = *shape
            .first()
            .ok_or_else(|| Error::invalid("gather_rows", "scalar input"))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(
                "gather_rows",
                format!("index {bad} out of range for {rows} rows"),
            ));
        }
        let cols: usize = shape[1..].iter().product();
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(&x[i * cols..(i + 1) * cols]);
        }
        let mut out_shape = shape;
        out_shape[0] = idx.len();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::GatherRows(a, idx.to_vec()), rg))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("mean_axis", format!("axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let inv = T::one() / T::from_f64(len as f64);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += x[o * len * inner + j * inner + i];
                }
            }
        }
        data.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::MeanAxis(a, axis), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |s, &v| s + v);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("root must be scalar, got shape {:?}", self.shape(root)),
            ));
        }
        self.backward_seeded(root, &Tensor::full(self.shape(root), T::one()))
    }

    /// Vector-Jacobian product: reverse sweep from `root` with upstream
    /// gradient `seed`.
    pub fn backward_seeded(&self, root: Var, seed: &Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(root) {
            return Err(Error::shape("backward", self.shape(root), seed.shape()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(seed.data().to_vec());

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if self.fault.is_some() && node.op.primitive() == self.fault {
                g.iter_mut().for_each(|v| *v = -*v);
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            if self.fault.is_some() && node.op.primitive() == self.fault {
                g.iter_mut().for_each(|v| *v = -*v);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.rg(v) {
            return None;
        }
        let numel = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); numel]))
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let m = sa[sa.len() - 2];
                let k = sa[sa.len() - 1];
                let n = sb[sb.len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    if sb.len() == 2 {
                        gemm(batch * m, n, k, g, false, bv, true, ga, true);
                    } else {
                        for i in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..],
                                false,
                                &bv[i * k * n..],
                                true,
                                &mut ga[i * m * k..],
                                true,
                            );
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    if sb.len() == 2 {
                        gemm(k, batch * m, n, av, true, g, false, gb, true);
                    } else {
                        for i in 0..batch {
                            // a_i^T is [k, m] stored as [m, k].
                            let a_i = &av[i * m * k..(i + 1) * m * k];
                            gemm(k, m, n, a_i, true, &g[i * m * n..], false, &mut gb[i * k * n..], true);
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -T::one() } else { T::one() };
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let inner = gb.len();
                    for (i, &y) in g.iter().enumerate() {
                        gb[i % inner] += sign * y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let inner = bv.len();
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, &y) in g.iter().enumerate() {
                        ga[i] += y * bv[i % inner];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (i, &y) in g.iter().enumerate() {
                        gb[i % inner] += y * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *c);
                }
            }
            Op::Softmax(a, axis) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let y = out.data();
                    let (outer, len, inner) = split_axis(out.shape(), *axis);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot = (0..len).fold(T::zero(), |s, j| s + g[at(j)] * y[at(j)]);
                            for j in 0..len {
                                ga[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax(a, axis) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let y = out.data();
                    let (outer, len, inner) = split_axis(out.shape(), *axis);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let total = (0..len).fold(T::zero(), |s, j| s + g[at(j)]);
                            for j in 0..len {
                                ga[at(j)] += g[at(j)] - y[at(j)].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gain)[0];
                let rows = g.len() / d;
                let gv = self.value(*gain).data();
                if let Some(gb) = self.acc(grads, *bias) {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gain) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let inv_d = T::one() / T::from_f64(d as f64);
                    for r in 0..rows {
                        let mut mean_gh = T::zero();
                        let mut mean_ghh = T::zero();
                        for j in 0..d {
                            let gh = g[r * d + j] * gv[j];
                            mean_gh += gh;
                            mean_ghh += gh * xhat[r * d + j];
                        }
                        mean_gh *= inv_d;
                        mean_ghh *= inv_d;
                        for j in 0..d {
                            let gh = g[r * d + j] * gv[j];
                            gx[r * d + j] += rstd[r] * (gh - mean_gh - xhat[r * d + j] * mean_ghh);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, &y) in g.iter().enumerate() {
                        let x = xv[i];
                        ga[i] += y * (normal_cdf(x) + x * normal_pdf(x));
                    }
                }
            }
            Op::Permute(a, axes) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let map = permute_index(self.shape(*a), axes);
                    for (o, &src) in map.iter().enumerate() {
                        ga[src] += g[o];
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
            Op::Concat(parts, axis) => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if let Some(gp) = self.acc(grads, p) {
                        let chunk = len * inner;
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            gp[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(&g[src..src + chunk])
                                .for_each(|(x, &y)| *x += y);
                        }
                    }
                    offset += len;
                }
            }
            Op::GatherRows(a, idx) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let cols = if idx.is_empty() { 0 } else { g.len() / idx.len() };
                    for (r, &i) in idx.iter().enumerate() {
                        ga[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                            .for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::MeanAxis(a, axis) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                    let inv = T::one() / T::from_f64(len as f64);
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                ga[o * len * inner + j * inner + i] += g[o * inner + i] * inv;
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let y = g[0];
                    ga.iter_mut().for_each(|x| *x += y);
                }
            }
        }
    }
}
