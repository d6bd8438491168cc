use std::cell::{Cell, Ref, RefCell};

use super::{shape_str, Activation, Mode, Real, Tensor};
use crate::error::{Error, Result};
use crate::rng::RngState;

/// Additive mask constant standing in for −∞ before a softmax.
///
/// Large enough that `exp(MASK_VALUE - max)` underflows to exactly zero in
/// both precisions, small enough that sums of two masks stay finite.
pub const MASK_VALUE: f64 = -1e9;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Coarse operation tags, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulNt,
    Transpose,
    Add,
    Mul,
    AddRowBias,
    MulRows,
    ScaleBy,
    Affine,
    MulConst,
    AddConst,
    Activation,
    Softmax,
    LayerNorm,
    MeanPool,
    Sum,
    Reshape,
    ConcatCols,
    SelectRow,
    Gather,
    Unfold,
    PadTail,
    Slice,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 25] = [OpKind::Leaf, OpKind::MatMul, OpKind::MatMulNt, OpKind::Transpose, OpKind::Add, OpKind::Mul, OpKind::AddRowBias, OpKind::MulRows, OpKind::ScaleBy, OpKind::Affine, OpKind::MulConst, OpKind::AddConst, OpKind::Activation, OpKind::Softmax, OpKind::LayerNorm, OpKind::MeanPool, OpKind::Sum, OpKind::Reshape, OpKind::ConcatCols, OpKind::SelectRow, OpKind::Gather, OpKind::Unfold, OpKind::PadTail, OpKind::Slice, OpKind::CrossEntropy];
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    /// Case-insensitive variant name, e.g. `unfold` or `layernorm`.
    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| format!("{k:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown operation `{s}`")))
    }
}

/// Reduction axis for [`Tape::mean_pool`] on an `[n×d]` operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolAxis {
    /// Average over rows, producing `[d]`.
    Rows,
    /// Average over columns, producing `[n]`.
    Cols,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, n: usize, k: usize, m: usize },
    MatMulNt { a: Var, b: Var, n: usize, k: usize, m: usize },
    Transpose { x: Var, r: usize, c: usize },
    Add(Var, Var),
    Mul(Var, Var),
    AddRowBias { x: Var, bias: Var, d: usize },
    MulRows { x: Var, s: Var, d: usize },
    ScaleBy { x: Var, s: Var },
    Affine { x: Var, a: T },
    MulConst { x: Var, c: Vec<T> },
    AddConst { x: Var },
    Act { x: Var, kind: Activation },
    Softmax { x: Var, cols: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, d: usize },
    MeanPool { x: Var, axis: PoolAxis, mask: Option<Vec<bool>>, n: usize, d: usize },
    Sum(Var),
    Reshape(Var),
    ConcatCols { parts: Vec<(Var, usize)>, rows: usize },
    SelectRow { x: Var, row: usize, cols: usize },
    Gather { table: Var, ids: Vec<usize>, cols: usize },
    Unfold { x: Var, k: usize, pad_left: usize, n: usize, d: usize },
    PadTail { x: Var, n: usize },
    Slice { x: Var, start: usize },
    CrossEntropy { logits: Var, target: usize, probs: Vec<T> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::MatMulNt { .. } => OpKind::MatMulNt,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRowBias { .. } => OpKind::AddRowBias,
            Op::MulRows { .. } => OpKind::MulRows,
            Op::ScaleBy { .. } => OpKind::ScaleBy,
            Op::Affine { .. } => OpKind::Affine,
            Op::MulConst { .. } => OpKind::MulConst,
            Op::AddConst { .. } => OpKind::AddConst,
            Op::Act { .. } => OpKind::Activation,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::MeanPool { .. } => OpKind::MeanPool,
            Op::Sum(..) => OpKind::Sum,
            Op::Reshape(..) => OpKind::Reshape,
            Op::ConcatCols { .. } => OpKind::ConcatCols,
            Op::SelectRow { .. } => OpKind::SelectRow,
            Op::Gather { .. } => OpKind::Gather,
            Op::Unfold { .. } => OpKind::Unfold,
            Op::PadTail { .. } => OpKind::PadTail,
            Op::Slice { .. } => OpKind::Slice,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Record of executed operations. Nodes are appended in execution order, so
/// every node's inputs precede it and a reverse sweep is a valid
/// topological traversal.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    fault: Cell<Option<OpKind>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every tracked leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`, or `None` when `v` is untracked or did not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn gelu_cdf<T: Real>(x: T) -> T {
    T::of(0.5) * (T::one() + (x / T::of(std::f64::consts::SQRT_2)).erf())
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn apply_act<T: Real>(kind: Activation, x: T) -> T {
    match kind {
        Activation::Relu => x.max(T::zero()),
        Activation::Gelu => x * gelu_cdf(x),
        Activation::Swish => x * sigmoid(x),
        Activation::Tanh => x.tanh(),
        Activation::Sigmoid => sigmoid(x),
        Activation::Softmax => unreachable!("softmax is a last-axis op"),
    }
}

fn act_derivative<T: Real>(kind: Activation, x: T, y: T) -> T {
    match kind {
        Activation::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::Gelu => {
            let pdf = (-(x * x) * T::of(0.5)).exp() / T::of((2.0 * std::f64::consts::PI).sqrt());
            gelu_cdf(x) + x * pdf
        }
        Activation::Swish => {
            let s = sigmoid(x);
            s + x * s * (T::one() - s)
        }
        Activation::Tanh => T::one() - y * y,
        Activation::Sigmoid => y * (T::one() - y),
        Activation::Softmax => unreachable!("softmax is a last-axis op"),
    }
}

fn softmax_rows<T: Real>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = (v - max).exp();
            total = total + *o;
        }
        for o in dst.iter_mut() {
            *o = *o / total;
        }
    }
    out
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a = *a + c),
        None => *slot = Some(contrib),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            fault: Cell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Corrupts the backward rule of one operation kind (scales its input
    /// gradients by 1.5). Only meant for negative-control tests of the
    /// gradient checker.
    #[doc(hidden)]
    pub fn inject_backward_fault(&self, kind: Option<OpKind>) {
        self.fault.set(kind);
    }

    fn nodes(&self) -> Ref<'_, Vec<Node<T>>> {
        self.nodes.borrow()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes()[v.0].shape.clone()
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes()[v.0].data.len()
    }

    /// Copy of the value held by `v`.
    pub fn value(&self, v: Var) -> Tensor<T> {
        let nodes = self.nodes();
        let n = &nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("tape values are well-formed")
    }

    pub fn data(&self, v: Var) -> Vec<T> {
        self.nodes()[v.0].data.clone()
    }

    /// The single element of a one-element value.
    pub fn scalar(&self, v: Var) -> Result<T> {
        let nodes = self.nodes();
        let n = &nodes[v.0];
        if n.data.len() != 1 {
            return Err(Error::Shape(format!(
                "expected a scalar, got {}",
                shape_str(&n.shape)
            )));
        }
        Ok(n.data[0])
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes()[v.0].op.kind()
    }

    /// Smallest `|x|` over every input recorded by a ReLU, or `None` if no
    /// ReLU was applied. Finite differences are only meaningful when this
    /// exceeds the perturbation's effect on those inputs.
    pub fn relu_margin(&self) -> Option<T> {
        let nodes = self.nodes();
        nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Act { x, kind: Activation::Relu } => {
                    Some(nodes[x.0].data.iter().fold(T::infinity(), |m, v| m.min(v.abs())))
                }
                _ => None,
            })
            .reduce(T::min)
    }

    fn push(&self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        #[cfg(debug_assertions)]
        {
            let inputs_finite = inputs.iter().all(|v| nodes[v.0].data.iter().all(|x| x.is_finite()));
            if inputs_finite {
                debug_assert!(
                    data.iter().all(|x| x.is_finite()),
                    "{:?} produced a non-finite value from finite inputs",
                    op.kind()
                );
            }
        }
        let needs_grad = inputs.iter().any(|v| nodes[v.0].needs_grad);
        nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let nodes = self.nodes();
        let s = &nodes[v.0].shape;
        match s.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Shape(format!(
                "{what} expects a two-dimensional operand, got {}",
                shape_str(s)
            ))),
        }
    }

    /// Records `t` as a leaf; tracked tensors receive gradients.
    pub fn leaf(&self, t: &Tensor<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: t.is_tracked(),
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, t: &Tensor<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(nodes.len() - 1)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2(a, "matmul")?;
        let (k2, m) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: {} × {}",
                shape_str(&[n, k]),
                shape_str(&[k2, m])
            )));
        }
        let out = {
            let nodes = self.nodes();
            let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
            let mut out = vec![T::zero(); n * m];
            for i in 0..n {
                let orow = &mut out[i * m..(i + 1) * m];
                for p in 0..k {
                    let av = ad[i * k + p];
                    if av == T::zero() {
                        continue;
                    }
                    let brow = &bd[p * m..(p + 1) * m];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o = *o + av * bv;
                    }
                }
            }
            out
        };
        Ok(self.push(vec![n, m], out, Op::MatMul { a, b, n, k, m }, &[a, b]))
    }

    /// `a · bᵀ` for `a [n×k]`, `b [m×k]`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2(a, "matmul_nt")?;
        let (m, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_nt inner dimensions disagree: {} × {}ᵀ",
                shape_str(&[n, k]),
                shape_str(&[m, k2])
            )));
        }
        let out = {
            let nodes = self.nodes();
            let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
            let mut out = Vec::with_capacity(n * m);
            for i in 0..n {
                let arow = &ad[i * k..(i + 1) * k];
                for j in 0..m {
                    let brow = &bd[j * k..(j + 1) * k];
                    out.push(arow.iter().zip(brow).fold(T::zero(), |s, (&x, &y)| s + x * y));
                }
            }
            out
        };
        Ok(self.push(vec![n, m], out, Op::MatMulNt { a, b, n, k, m }, &[a, b]))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let out = {
            let nodes = self.nodes();
            let xd = &nodes[x.0].data;
            let mut out = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = xd[i * c + j];
                }
            }
            out
        };
        Ok(self.push(vec![c, r], out, Op::Transpose { x, r, c }, &[x]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>> {
        let nodes = self.nodes();
        let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
        if sa != sb {
            return Err(Error::Shape(format!(
                "{what} needs identical shapes, got {} and {}",
                shape_str(sa),
                shape_str(sb)
            )));
        }
        Ok(sa.clone())
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "add")?;
        let out = {
            let nodes = self.nodes();
            nodes[a.0].data.iter().zip(&nodes[b.0].data).map(|(&x, &y)| x + y).collect()
        };
        Ok(self.push(shape, out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "mul")?;
        let out = {
            let nodes = self.nodes();
            nodes[a.0].data.iter().zip(&nodes[b.0].data).map(|(&x, &y)| x * y).collect()
        };
        Ok(self.push(shape, out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds `bias [d]` to every row of `x [.. × d]`.
    pub fn add_row_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (shape, out, d) = {
            let nodes = self.nodes();
            let (xs, bs) = (&nodes[x.0].shape, &nodes[bias.0].shape);
            let d = *xs.last().expect("non-empty shape");
            if nodes[bias.0].data.len() != d {
                return Err(Error::Shape(format!(
                    "bias {} does not match rows of {}",
                    shape_str(bs),
                    shape_str(xs)
                )));
            }
            let bd = &nodes[bias.0].data;
            let out: Vec<T> = nodes[x.0]
                .data
                .chunks(d)
                .flat_map(|row| row.iter().zip(bd).map(|(&v, &b)| v + b))
                .collect();
            (xs.clone(), out, d)
        };
        Ok(self.push(shape, out, Op::AddRowBias { x, bias, d }, &[x, bias]))
    }

    /// Scales row `i` of `x [n×d]` by `s[i]`.
    pub fn mul_rows(&self, x: Var, s: Var) -> Result<Var> {
        let (n, d) = self.dims2(x, "mul_rows")?;
        let out = {
            let nodes = self.nodes();
            if nodes[s.0].data.len() != n {
                return Err(Error::Shape(format!(
                    "row scales {} do not match {}",
                    shape_str(&nodes[s.0].shape),
                    shape_str(&[n, d])
                )));
            }
            let sd = &nodes[s.0].data;
            nodes[x.0]
                .data
                .chunks(d)
                .zip(sd)
                .flat_map(|(row, &sv)| row.iter().map(move |&v| v * sv))
                .collect()
        };
        Ok(self.push(vec![n, d], out, Op::MulRows { x, s, d }, &[x, s]))
    }

    /// Multiplies every element of `x` by the one-element value `s`.
    pub fn scale_by(&self, x: Var, s: Var) -> Result<Var> {
        let (shape, out) = {
            let nodes = self.nodes();
            if nodes[s.0].data.len() != 1 {
                return Err(Error::Shape(format!(
                    "scale_by expects a scalar factor, got {}",
                    shape_str(&nodes[s.0].shape)
                )));
            }
            let sv = nodes[s.0].data[0];
            (
                nodes[x.0].shape.clone(),
                nodes[x.0].data.iter().map(|&v| v * sv).collect(),
            )
        };
        Ok(self.push(shape, out, Op::ScaleBy { x, s }, &[x, s]))
    }

    /// `a·x + b` with constant coefficients.
    pub fn affine(&self, x: Var, a: T, b: T) -> Var {
        let (shape, out) = {
            let nodes = self.nodes();
            (
                nodes[x.0].shape.clone(),
                nodes[x.0].data.iter().map(|&v| a * v + b).collect(),
            )
        };
        self.push(shape, out, Op::Affine { x, a }, &[x])
    }

    /// `1 − x`.
    pub fn one_minus(&self, x: Var) -> Var {
        self.affine(x, -T::one(), T::one())
    }

    /// Element-wise product with a constant of the same length.
    pub fn mul_const(&self, x: Var, c: Vec<T>) -> Result<Var> {
        let (shape, out) = {
            let nodes = self.nodes();
            if c.len() != nodes[x.0].data.len() {
                return Err(Error::Shape(format!(
                    "constant of length {} for {}",
                    c.len(),
                    shape_str(&nodes[x.0].shape)
                )));
            }
            (
                nodes[x.0].shape.clone(),
                nodes[x.0].data.iter().zip(&c).map(|(&v, &m)| v * m).collect(),
            )
        };
        Ok(self.push(shape, out, Op::MulConst { x, c }, &[x]))
    }

    /// Element-wise sum with a constant of the same length (additive masks).
    pub fn add_const(&self, x: Var, c: &[T]) -> Result<Var> {
        let (shape, out) = {
            let nodes = self.nodes();
            if c.len() != nodes[x.0].data.len() {
                return Err(Error::Shape(format!(
                    "constant of length {} for {}",
                    c.len(),
                    shape_str(&nodes[x.0].shape)
                )));
            }
            (
                nodes[x.0].shape.clone(),
                nodes[x.0].data.iter().zip(c).map(|(&v, &m)| v + m).collect(),
            )
        };
        Ok(self.push(shape, out, Op::AddConst { x }, &[x]))
    }

    pub fn activation(&self, x: Var, kind: Activation) -> Result<Var> {
        if kind == Activation::Softmax {
            return self.softmax(x);
        }
        let (shape, out) = {
            let nodes = self.nodes();
            (
                nodes[x.0].shape.clone(),
                nodes[x.0].data.iter().map(|&v| apply_act(kind, v)).collect(),
            )
        };
        Ok(self.push(shape, out, Op::Act { x, kind }, &[x]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let (shape, out, cols) = {
            let nodes = self.nodes();
            let shape = nodes[x.0].shape.clone();
            let cols = *shape.last().expect("non-empty shape");
            let out = softmax_rows(&nodes[x.0].data, cols);
            (shape, out, cols)
        };
        Ok(self.push(shape, out, Op::Softmax { x, cols }, &[x]))
    }

    /// Row-wise normalization of `x [.. × d]` followed by `gamma ⊙ · + beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (shape, out, xhat, inv_std, d) = {
            let nodes = self.nodes();
            let shape = nodes[x.0].shape.clone();
            let d = *shape.last().expect("non-empty shape");
            let (g, b) = (&nodes[gamma.0].data, &nodes[beta.0].data);
            if g.len() != d || b.len() != d {
                return Err(Error::Shape(format!(
                    "layer_norm affine parameters {} / {} do not match {}",
                    shape_str(&nodes[gamma.0].shape),
                    shape_str(&nodes[beta.0].shape),
                    shape_str(&shape)
                )));
            }
            let xd = &nodes[x.0].data;
            let dn = T::of(d as f64);
            let mut out = Vec::with_capacity(xd.len());
            let mut xhat = Vec::with_capacity(xd.len());
            let mut inv_std = Vec::with_capacity(xd.len() / d);
            for row in xd.chunks(d) {
                let mean = row.iter().copied().sum::<T>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                let inv = T::one() / (var + T::of(eps)).sqrt();
                inv_std.push(inv);
                for (j, &v) in row.iter().enumerate() {
                    let h = (v - mean) * inv;
                    xhat.push(h);
                    out.push(g[j] * h + b[j]);
                }
            }
            (shape, out, xhat, inv_std, d)
        };
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                d,
            },
            &[x, gamma, beta],
        ))
    }

    /// Mean of `x [n×d]` along `axis`.
    ///
    /// With [`PoolAxis::Rows`] the mask selects which rows are averaged.
    /// With [`PoolAxis::Cols`] masked rows produce an output of zero.
    pub fn mean_pool(&self, x: Var, axis: PoolAxis, mask: Option<&[bool]>) -> Result<Var> {
        let (n, d) = self.dims2(x, "mean_pool")?;
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::Shape(format!(
                    "mask of length {} for {}",
                    m.len(),
                    shape_str(&[n, d])
                )));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::Domain("mean_pool mask selects no positions".into()));
            }
        }
        let valid = |i: usize| mask.is_none_or(|m| m[i]);
        let (shape, out) = {
            let nodes = self.nodes();
            let xd = &nodes[x.0].data;
            match axis {
                PoolAxis::Rows => {
                    let count = (0..n).filter(|&i| valid(i)).count();
                    let mut out = vec![T::zero(); d];
                    for i in (0..n).filter(|&i| valid(i)) {
                        for (o, &v) in out.iter_mut().zip(&xd[i * d..(i + 1) * d]) {
                            *o = *o + v;
                        }
                    }
                    let c = T::of(count as f64);
                    out.iter_mut().for_each(|o| *o = *o / c);
                    (vec![d], out)
                }
                PoolAxis::Cols => {
                    let dn = T::of(d as f64);
                    let out = (0..n)
                        .map(|i| {
                            if valid(i) {
                                xd[i * d..(i + 1) * d].iter().copied().sum::<T>() / dn
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    (vec![n], out)
                }
            }
        };
        let mask = mask.map(<[bool]>::to_vec);
        Ok(self.push(shape, out, Op::MeanPool { x, axis, mask, n, d }, &[x]))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.nodes()[x.0].data.iter().copied().sum::<T>();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let data = {
            let nodes = self.nodes();
            let n: usize = shape.iter().product();
            if n != nodes[x.0].data.len() || shape.contains(&0) {
                return Err(Error::Shape(format!(
                    "cannot reshape {} into {}",
                    shape_str(&nodes[x.0].shape),
                    shape_str(shape)
                )));
            }
            nodes[x.0].data.clone()
        };
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    /// Horizontal concatenation of `[n × c_i]` operands.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols of nothing".into()));
        }
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push(self.dims2(p, "concat_cols")?);
        }
        let rows = dims[0].0;
        if dims.iter().any(|&(r, _)| r != rows) {
            return Err(Error::Shape("concat_cols operands differ in row count".into()));
        }
        let total: usize = dims.iter().map(|&(_, c)| c).sum();
        let out = {
            let nodes = self.nodes();
            let mut out = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for (&p, &(_, c)) in parts.iter().zip(&dims) {
                    out.extend_from_slice(&nodes[p.0].data[i * c..(i + 1) * c]);
                }
            }
            out
        };
        let recorded = parts.iter().zip(&dims).map(|(&p, &(_, c))| (p, c)).collect();
        Ok(self.push(
            vec![rows, total],
            out,
            Op::ConcatCols {
                parts: recorded,
                rows,
            },
            parts,
        ))
    }

    /// Row `row` of `x [n×d]` as a `[1×d]` value.
    pub fn select_row(&self, x: Var, row: usize) -> Result<Var> {
        let (n, d) = self.dims2(x, "select_row")?;
        if row >= n {
            return Err(Error::Shape(format!("row {row} out of range for {}", shape_str(&[n, d]))));
        }
        let out = self.nodes()[x.0].data[row * d..(row + 1) * d].to_vec();
        Ok(self.push(vec![1, d], out, Op::SelectRow { x, row, cols: d }, &[x]))
    }

    /// Row lookup `table[ids[i]]`, producing `[ids.len() × d]`.
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::Shape("gather_rows with no ids".into()));
        }
        if let Some((pos, &bad)) = ids.iter().enumerate().find(|(_, &id)| id >= v) {
            return Err(Error::Domain(format!(
                "id {bad} at index {pos} is outside a table of {v} rows"
            )));
        }
        let out = {
            let nodes = self.nodes();
            let td = &nodes[table.0].data;
            ids.iter().flat_map(|&id| td[id * d..(id + 1) * d].iter().copied()).collect()
        };
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                cols: d,
            },
            &[table],
        ))
    }

    /// Sliding windows of `k` rows over `x [n×d]` with `pad_left` zero rows
    /// before the first row (and zeros past the end). Output row `j`
    /// concatenates input rows `j − pad_left .. j − pad_left + k`, giving
    /// `[n × k·d]`.
    pub fn unfold(&self, x: Var, k: usize, pad_left: usize) -> Result<Var> {
        let (n, d) = self.dims2(x, "unfold")?;
        if k == 0 || pad_left >= k {
            return Err(Error::Config(format!(
                "unfold needs k ≥ 1 and pad_left < k, got k={k}, pad_left={pad_left}"
            )));
        }
        let out = {
            let nodes = self.nodes();
            let xd = &nodes[x.0].data;
            let mut out = vec![T::zero(); n * k * d];
            for j in 0..n {
                for t in 0..k {
                    let src = j as isize - pad_left as isize + t as isize;
                    if src < 0 || src as usize >= n {
                        continue;
                    }
                    let src = src as usize;
                    let dst = j * k * d + t * d;
                    out[dst..dst + d].copy_from_slice(&xd[src * d..(src + 1) * d]);
                }
            }
            out
        };
        Ok(self.push(vec![n, k * d], out, Op::Unfold { x, k, pad_left, n, d }, &[x]))
    }

    /// Zero-extends a vector of `n` elements to length `len`.
    pub fn pad_tail(&self, x: Var, len: usize) -> Result<Var> {
        let data = {
            let nodes = self.nodes();
            let xd = &nodes[x.0].data;
            if xd.len() > len {
                return Err(Error::Shape(format!(
                    "cannot pad {} elements down to {len}",
                    xd.len()
                )));
            }
            let mut v = xd.clone();
            v.resize(len, T::zero());
            v
        };
        let n = self.numel(x);
        Ok(self.push(vec![len], data, Op::PadTail { x, n }, &[x]))
    }

    /// Elements `start .. start + len` of the flattened value, as `[len]`.
    pub fn slice(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let data = {
            let nodes = self.nodes();
            let xd = &nodes[x.0].data;
            if len == 0 || start + len > xd.len() {
                return Err(Error::Shape(format!(
                    "slice {start}..{} out of range for {} elements",
                    start + len,
                    xd.len()
                )));
            }
            xd[start..start + len].to_vec()
        };
        Ok(self.push(vec![len], data, Op::Slice { x, start }, &[x]))
    }

    /// `−log softmax(logits)[target]` over the flattened logits, stabilized
    /// by max-subtraction.
    pub fn cross_entropy(&self, logits: Var, target: usize) -> Result<Var> {
        let (loss, probs) = {
            let nodes = self.nodes();
            let ld = &nodes[logits.0].data;
            if target >= ld.len() {
                return Err(Error::Shape(format!(
                    "target {target} out of range for {} logits",
                    ld.len()
                )));
            }
            let probs = softmax_rows(ld, ld.len());
            let max = ld.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + ld.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            (lse - ld[target], probs)
        };
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            &[logits],
        ))
    }

    /// Inverted dropout: in train mode zero each element with probability
    /// `rate` and scale survivors by `1/(1 − rate)`; identity otherwise.
    pub fn dropout(&self, x: Var, rate: f64, mode: Mode, rng: &mut RngState) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask = (0..self.numel(x))
            .map(|_| if rng.uniform() < rate { T::zero() } else { keep })
            .collect();
        self.mul_const(x, mask)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes();
        if nodes[loss.0].data.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {}",
                shape_str(&nodes[loss.0].shape)
            )));
        }
        let fault = self.fault.get();
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let corrupt = fault == Some(node.op.kind());
            let mut send = |v: Var, mut contrib: Vec<T>| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                if corrupt {
                    contrib.iter_mut().for_each(|c| *c = *c * T::of(1.5));
                }
                add_into(&mut grads[v.0], contrib);
            };
            let val = |v: Var| &nodes[v.0].data;
            match &node.op {
                Op::Leaf => {}
                &Op::MatMul { a, b, n, k, m } => {
                    let (ad, bd) = (val(a), val(b));
                    if nodes[a.0].needs_grad {
                        let mut da = vec![T::zero(); n * k];
                        for i in 0..n {
                            let grow = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                let brow = &bd[p * m..(p + 1) * m];
                                da[i * k + p] = grow.iter().zip(brow).fold(T::zero(), |s, (&x, &y)| s + x * y);
                            }
                        }
                        send(a, da);
                    }
                    if nodes[b.0].needs_grad {
                        let mut db = vec![T::zero(); k * m];
                        for i in 0..n {
                            let grow = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                let av = ad[i * k + p];
                                for (o, &gv) in db[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                    *o = *o + av * gv;
                                }
                            }
                        }
                        send(b, db);
                    }
                }
                &Op::MatMulNt { a, b, n, k, m } => {
                    let (ad, bd) = (val(a), val(b));
                    if nodes[a.0].needs_grad {
                        let mut da = vec![T::zero(); n * k];
                        for i in 0..n {
                            for j in 0..m {
                                let gv = g[i * m + j];
                                for (o, &bv) in da[i * k..(i + 1) * k].iter_mut().zip(&bd[j * k..(j + 1) * k]) {
                                    *o = *o + gv * bv;
                                }
                            }
                        }
                        send(a, da);
                    }
                    if nodes[b.0].needs_grad {
                        let mut db = vec![T::zero(); m * k];
                        for i in 0..n {
                            for j in 0..m {
                                let gv = g[i * m + j];
                                for (o, &av) in db[j * k..(j + 1) * k].iter_mut().zip(&ad[i * k..(i + 1) * k]) {
                                    *o = *o + gv * av;
                                }
                            }
                        }
                        send(b, db);
                    }
                }
                &Op::Transpose { x, r, c } => {
                    let mut dx = vec![T::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = g[j * r + i];
                        }
                    }
                    send(x, dx);
                }
                &Op::Add(a, b) => {
                    send(a, g.clone());
                    send(b, g);
                }
                &Op::Mul(a, b) => {
                    let (ad, bd) = (val(a), val(b));
                    send(a, g.iter().zip(bd).map(|(&gv, &y)| gv * y).collect());
                    send(b, g.iter().zip(ad).map(|(&gv, &x)| gv * x).collect());
                }
                &Op::AddRowBias { x, bias, d } => {
                    let mut db = vec![T::zero(); d];
                    for row in g.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(o, &v)| *o = *o + v);
                    }
                    send(bias, db);
                    send(x, g);
                }
                &Op::MulRows { x, s, d } => {
                    let (xd, sd) = (val(x), val(s));
                    let ds = g
                        .chunks(d)
                        .zip(xd.chunks(d))
                        .map(|(gr, xr)| gr.iter().zip(xr).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
                        .collect();
                    send(s, ds);
                    let dx = g
                        .chunks(d)
                        .zip(sd)
                        .flat_map(|(gr, &sv)| gr.iter().map(move |&v| v * sv))
                        .collect();
                    send(x, dx);
                }
                &Op::ScaleBy { x, s } => {
                    let (xd, sv) = (val(x), val(s)[0]);
                    let ds = g.iter().zip(xd).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    send(s, vec![ds]);
                    send(x, g.iter().map(|&v| v * sv).collect());
                }
                &Op::Affine { x, a } => send(x, g.iter().map(|&v| v * a).collect()),
                Op::MulConst { x, c } => send(*x, g.iter().zip(c).map(|(&v, &m)| v * m).collect()),
                &Op::AddConst { x } => send(x, g),
                &Op::Act { x, kind } => {
                    let dx = g
                        .iter()
                        .zip(val(x))
                        .zip(&node.data)
                        .map(|((&gv, &xv), &yv)| gv * act_derivative(kind, xv, yv))
                        .collect();
                    send(x, dx);
                }
                &Op::Softmax { x, cols } => {
                    let mut dx = Vec::with_capacity(g.len());
                    for (gr, yr) in g.chunks(cols).zip(node.data.chunks(cols)) {
                        let dot = gr.iter().zip(yr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                        dx.extend(gr.iter().zip(yr).map(|(&gv, &yv)| yv * (gv - dot)));
                    }
                    send(x, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    d,
                } => {
                    let d = *d;
                    let gd = val(*gamma);
                    let mut dgamma = vec![T::zero(); d];
                    let mut dbeta = vec![T::zero(); d];
                    let mut dx = Vec::with_capacity(g.len());
                    let dn = T::of(d as f64);
                    for ((gr, hr), &inv) in g.chunks(d).zip(xhat.chunks(d)).zip(inv_std) {
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..d {
                            dgamma[j] = dgamma[j] + gr[j] * hr[j];
                            dbeta[j] = dbeta[j] + gr[j];
                            let dh = gr[j] * gd[j];
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * hr[j];
                        }
                        for j in 0..d {
                            let dh = gr[j] * gd[j];
                            dx.push(inv / dn * (dn * dh - sum_dh - hr[j] * sum_dh_h));
                        }
                    }
                    send(*gamma, dgamma);
                    send(*beta, dbeta);
                    send(*x, dx);
                }
                Op::MeanPool { x, axis, mask, n, d } => {
                    let (n, d) = (*n, *d);
                    let valid = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
                    let mut dx = vec![T::zero(); n * d];
                    match axis {
                        PoolAxis::Rows => {
                            let count = T::of((0..n).filter(|&i| valid(i)).count() as f64);
                            for i in (0..n).filter(|&i| valid(i)) {
                                for j in 0..d {
                                    dx[i * d + j] = g[j] / count;
                                }
                            }
                        }
                        PoolAxis::Cols => {
                            let dn = T::of(d as f64);
                            for i in (0..n).filter(|&i| valid(i)) {
                                for j in 0..d {
                                    dx[i * d + j] = g[i] / dn;
                                }
                            }
                        }
                    }
                    send(*x, dx);
                }
                &Op::Sum(x) => {
                    let len = nodes[x.0].data.len();
                    send(x, vec![g[0]; len]);
                }
                &Op::Reshape(x) => send(x, g),
                Op::ConcatCols { parts, rows } => {
                    let total: usize = parts.iter().map(|&(_, c)| c).sum();
                    let mut offset = 0;
                    for &(p, c) in parts {
                        let mut dp = Vec::with_capacity(rows * c);
                        for i in 0..*rows {
                            dp.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                        }
                        send(p, dp);
                        offset += c;
                    }
                }
                &Op::SelectRow { x, row, cols } => {
                    let mut dx = vec![T::zero(); nodes[x.0].data.len()];
                    dx[row * cols..(row + 1) * cols].copy_from_slice(&g);
                    send(x, dx);
                }
                Op::Gather { table, ids, cols } => {
                    let cols = *cols;
                    let mut dt = vec![T::zero(); nodes[table.0].data.len()];
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..cols {
                            dt[id * cols + j] = dt[id * cols + j] + g[i * cols + j];
                        }
                    }
                    send(*table, dt);
                }
                &Op::Unfold { x, k, pad_left, n, d } => {
                    let mut dx = vec![T::zero(); n * d];
                    for j in 0..n {
                        for t in 0..k {
                            let src = j as isize - pad_left as isize + t as isize;
                            if src < 0 || src as usize >= n {
                                continue;
                            }
                            let src = src as usize;
                            let off = j * k * d + t * d;
                            for c in 0..d {
                                dx[src * d + c] = dx[src * d + c] + g[off + c];
                            }
                        }
                    }
                    send(x, dx);
                }
                &Op::PadTail { x, n } => send(x, g[..n].to_vec()),
                &Op::Slice { x, start } => {
                    let mut dx = vec![T::zero(); nodes[x.0].data.len()];
                    dx[start..start + g.len()].copy_from_slice(&g);
                    send(x, dx);
                }
                Op::CrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    let mut dl: Vec<T> = probs.iter().map(|&p| p * g[0]).collect();
                    dl[*target] = dl[*target] - g[0];
                    send(*logits, dl);
                }
            }
        }

        // Only leaf gradients are meaningful to callers.
        for (idx, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }
}
