use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{broadcast_shape, broadcast_strides, split_axis, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Maximum,
    Minimum,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Neg,
    Exp,
    Log,
    Sigmoid,
    Relu,
    Softplus,
    Abs,
    Sin,
    Cos,
    AddScalar(f64),
    MulScalar(f64),
    PowScalar(f64),
    /// Clamp in the forward pass, identity in the backward pass.
    ClampStraightThrough(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Reduce {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Reduce {
        kind: Reduce,
        x: Var,
        axis: usize,
        /// For `Max`: position along `axis` of the winner, per output element.
        argmax: Vec<usize>,
    },
    SumAll(Var),
    Expand {
        x: Var,
        axis: usize,
        extent: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        rstd: Vec<f64>,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    IndexSelect {
        x: Var,
        axis: usize,
        indices: Vec<usize>,
    },
}

impl Op {
    fn for_each_input(&self, mut f: impl FnMut(Var)) {
        match self {
            Op::Leaf => {}
            Op::Binary(_, a, b) | Op::MatMul(a, b) => {
                f(*a);
                f(*b);
            }
            Op::Unary(_, x)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::SumAll(x)
            | Op::Reduce { x, .. }
            | Op::Expand { x, .. }
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::LayerNorm { x, .. }
            | Op::Narrow { x, .. }
            | Op::IndexSelect { x, .. } => f(*x),
            Op::Concat { xs, .. } => xs.iter().copied().for_each(f),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of a forward computation, replayed in reverse by [`Graph::backward`].
///
/// Nodes are appended in evaluation order, so every input precedes its output.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    ties: usize,
}

/// Leaf gradients produced by a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf that requires grad (zeros if the loss does not depend on it).
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(Error::Axis { axis, rank })
    } else {
        Ok(())
    }
}

/// Visit every output element of a broadcast binary op with the flat input offsets.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = rank - 1;
    let (la, lb, le) = (sa[last], sb[last], out[last]);
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib, mut o) = (0usize, 0usize, 0usize);
    loop {
        let (mut a, mut b) = (ia, ib);
        for _ in 0..le {
            f(o, a, b);
            o += 1;
            a += la;
            b += lb;
        }
        let mut ax = last;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of exact ties met by max-type operations so far. Gradients are
    /// only one-sided at such points.
    pub fn tie_count(&self) -> usize {
        self.ties
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let mut requires_grad = false;
        op.for_each_input(|v| requires_grad |= self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that gradients flow into.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Copy of `x` cut off from the tape.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    // ----- element-wise binary -----

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(&sa, &sb).ok_or_else(|| {
            Error::shape(
                match kind {
                    Binary::Add => "add",
                    Binary::Sub => "sub",
                    Binary::Mul => "mul",
                    Binary::Div => "div",
                    Binary::Maximum => "maximum",
                    Binary::Minimum => "minimum",
                },
                &sa,
                &sb,
            )
        })?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut data = vec![0.0; out.iter().product()];
        let mut ties = 0;
        let apply = |x: f64, y: f64, ties: &mut usize| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
            Binary::Maximum => {
                if x == y {
                    *ties += 1;
                }
                x.max(y)
            }
            Binary::Minimum => {
                if x == y {
                    *ties += 1;
                }
                x.min(y)
            }
        };
        if sa == sb {
            for ((d, &x), &y) in data.iter_mut().zip(av).zip(bv) {
                *d = apply(x, y, &mut ties);
            }
        } else {
            let stra = broadcast_strides(&sa, &out);
            let strb = broadcast_strides(&sb, &out);
            for_each_broadcast(&out, &stra, &strb, |o, ia, ib| {
                data[o] = apply(av[ia], bv[ib], &mut ties);
            });
        }
        self.ties += ties;
        Ok(self.push(Tensor::from_parts(out, data), Op::Binary(kind, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// Element-wise maximum; on ties the gradient goes to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Maximum, a, b)
    }

    /// Element-wise minimum; on ties the gradient goes to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Minimum, a, b)
    }

    // ----- element-wise unary -----

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let mut ties = 0;
        let value = self.value(x).map(|v| match kind {
            Unary::Neg => -v,
            Unary::Exp => v.exp(),
            Unary::Log => v.ln(),
            Unary::Sigmoid => sigmoid(v),
            Unary::Relu => {
                if v == 0.0 {
                    ties += 1;
                }
                v.max(0.0)
            }
            Unary::Softplus => softplus(v),
            Unary::Abs => {
                if v == 0.0 {
                    ties += 1;
                }
                v.abs()
            }
            Unary::Sin => v.sin(),
            Unary::Cos => v.cos(),
            Unary::AddScalar(s) => v + s,
            Unary::MulScalar(s) => v * s,
            Unary::PowScalar(p) => v.powf(p),
            Unary::ClampStraightThrough(lo, hi) => v.clamp(lo, hi),
        });
        self.ties += ties;
        self.push(value, Op::Unary(kind, x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(Unary::Sin, x)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(Unary::Cos, x)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(Unary::AddScalar(s), x)
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(Unary::MulScalar(s), x)
    }

    /// `x^p`. Where the base is exactly zero and `p < 1` the derivative is
    /// unbounded; the backward pass uses zero there.
    pub fn pow_scalar(&mut self, x: Var, p: f64) -> Var {
        self.unary(Unary::PowScalar(p), x)
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Var {
        let n = self.neg(x);
        self.add_scalar(n, 1.0)
    }

    /// Clamps values into `[lo, hi]` but passes gradients through unchanged.
    pub fn clamp_straight_through(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(Unary::ClampStraightThrough(lo, hi), x)
    }

    // ----- linear algebra / shape -----

    /// Matrix product over the trailing two axes; leading axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (n, k, m) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let batch = broadcast_shape(&sa[..sa.len() - 2], &sb[..sb.len() - 2])
            .ok_or_else(|| Error::shape("matmul", &sa, &sb))?;
        let mut out_shape = batch.clone();
        out_shape.extend([n, m]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut data = vec![0.0; out_shape.iter().product()];
        if sb.len() == 2 {
            let rows = av.len() / k;
            let bsz: usize = batch.iter().product();
            if sa.len() - 2 == batch.len() {
                gemm_nn(av, bv, &mut data, rows, k, m);
            } else {
                // `a` itself is broadcast over batch axes it lacks.
                for_each_batch(&batch, &sa[..sa.len() - 2], &[], |o, ia, _| {
                    gemm_nn(
                        &av[ia * n * k..(ia + 1) * n * k],
                        bv,
                        &mut data[o * n * m..(o + 1) * n * m],
                        n,
                        k,
                        m,
                    );
                });
                debug_assert!(bsz > 0);
            }
        } else {
            for_each_batch(&batch, &sa[..sa.len() - 2], &sb[..sb.len() - 2], |o, ia, ib| {
                gemm_nn(
                    &av[ia * n * k..(ia + 1) * n * k],
                    &bv[ib * k * m..(ib + 1) * k * m],
                    &mut data[o * n * m..(o + 1) * n * m],
                    n,
                    k,
                    m,
                );
            });
        }
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::MatMul(a, b)))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::Axis {
                axis: 1,
                rank: s.len(),
            });
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let xv = self.value(x).data();
        let mut data = vec![0.0; xv.len()];
        for (blk_in, blk_out) in xv.chunks(r * c).zip(data.chunks_mut(r * c)) {
            for i in 0..r {
                for j in 0..c {
                    blk_out[j * r + i] = blk_in[i * c + j];
                }
            }
        }
        let mut shape = s;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(x)
            .reshape(shape)
            .map_err(|_| Error::shape("reshape", self.shape(x), shape))?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Insert a unit axis at `axis` (0..=rank).
    pub fn unsqueeze(&mut self, x: Var, axis: usize) -> Result<Var> {
        let mut s = self.shape(x).to_vec();
        if axis > s.len() {
            return Err(Error::Axis {
                axis,
                rank: s.len() + 1,
            });
        }
        s.insert(axis, 1);
        self.reshape(x, &s)
    }

    /// Insert a new axis of the given extent at `axis`, replicating the input
    /// along it. The backward pass sums over the new axis.
    pub fn expand(&mut self, x: Var, axis: usize, extent: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis > s.len() {
            return Err(Error::Axis {
                axis,
                rank: s.len() + 1,
            });
        }
        if extent == 0 {
            return Err(Error::Contract("expand extent must be positive".into()));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis..].iter().product();
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(outer * extent * inner);
        for o in 0..outer {
            let chunk = &xv[o * inner..(o + 1) * inner];
            for _ in 0..extent {
                data.extend_from_slice(chunk);
            }
        }
        let mut shape = s;
        shape.insert(axis, extent);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Expand { x, axis, extent },
        ))
    }

    // ----- reductions -----

    fn reduce(&mut self, kind: Reduce, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_axis(axis, s.len())?;
        let (outer, len, inner) = split_axis(&s, axis);
        let xv = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        let mut ties = 0;
        match kind {
            Reduce::Sum | Reduce::Mean => {
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            data[o * inner + i] += xv[base + i];
                        }
                    }
                }
                if kind == Reduce::Mean {
                    let inv = 1.0 / len as f64;
                    data.iter_mut().for_each(|v| *v *= inv);
                }
            }
            Reduce::Max => {
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = xv[o * len * inner + i];
                        let mut at = 0;
                        for l in 1..len {
                            let v = xv[(o * len + l) * inner + i];
                            if v > best {
                                best = v;
                                at = l;
                            } else if v == best {
                                ties += 1;
                            }
                        }
                        data[o * inner + i] = best;
                        argmax[o * inner + i] = at;
                    }
                }
            }
        }
        self.ties += ties;
        let mut shape = s;
        shape.remove(axis);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Reduce {
                kind,
                x,
                axis,
                argmax,
            },
        ))
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduce::Sum, x, axis)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduce::Mean, x, axis)
    }

    /// Maximum along `axis`. Ties resolve to the lowest index, which also
    /// receives the whole gradient.
    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduce::Max, x, axis)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.mul_scalar(s, 1.0 / n)
    }

    // ----- normalisation -----

    /// Softmax along `axis`, max-subtracted for stability.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_axis(axis, s.len())?;
        let (outer, len, inner) = split_axis(&s, axis);
        let xv = self.value(x).data();
        let mut data = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mx = (0..len).map(|l| xv[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (xv[at(l)] - mx).exp();
                    data[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    data[at(l)] /= z;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(s, data), Op::Softmax { x, axis }))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_axis(axis, s.len())?;
        let (outer, len, inner) = split_axis(&s, axis);
        let xv = self.value(x).data();
        let mut data = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mx = (0..len).map(|l| xv[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + (0..len).map(|l| (xv[at(l)] - mx).exp()).sum::<f64>().ln();
                for l in 0..len {
                    data[at(l)] = xv[at(l)] - lse;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(s, data), Op::LogSoftmax { x, axis }))
    }

    /// Normalise over the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or(Error::Axis { axis: 0, rank: 0 })?;
        let xv = self.value(x).data();
        let mut data = vec![0.0; xv.len()];
        let mut rstd = Vec::with_capacity(xv.len() / d);
        for (row, out) in xv.chunks(d).zip(data.chunks_mut(d)) {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (o, v) in out.iter_mut().zip(row) {
                *o = (v - mu) * r;
            }
            rstd.push(r);
        }
        Ok(self.push(Tensor::from_parts(s, data), Op::LayerNorm { x, rstd }))
    }

    // ----- slicing -----

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_axis(axis, s.len())?;
        if len == 0 || start + len > s[axis] {
            return Err(Error::Contract(format!(
                "narrow [{start}, {}) outside extent {} of axis {axis}",
                start + len,
                s[axis]
            )));
        }
        let (outer, ext, inner) = split_axis(&s, axis);
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            data.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Narrow { x, axis, start },
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?)
            .to_vec();
        check_axis(axis, first.len())?;
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let ext = self.shape(x)[axis];
                let xv = self.value(x).data();
                data.extend_from_slice(&xv[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    /// Gather slices along `axis` in the given order (indices may repeat).
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_axis(axis, s.len())?;
        if indices.is_empty() {
            return Err(Error::Contract("index_select with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[axis]) {
            return Err(Error::Contract(format!(
                "index {bad} out of range for extent {}",
                s[axis]
            )));
        }
        let (outer, ext, inner) = split_axis(&s, axis);
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * ext + i) * inner;
                data.extend_from_slice(&xv[base..base + inner]);
            }
        }
        let mut shape = s;
        shape[axis] = indices.len();
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::IndexSelect {
                x,
                axis,
                indices: indices.to_vec(),
            },
        ))
    }

    // ----- backward -----

    /// Gradients of a scalar `loss` with respect to every leaf that requires grad.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_filtered(loss, |_| true)
    }

    /// Like [`backward`](Self::backward), but only leaves accepted by `include`
    /// accumulate gradient; the sweep skips every node that cannot reach one.
    pub fn backward_filtered(&self, loss: Var, include: impl Fn(Var) -> bool) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut need = vec![false; n];
        for i in 0..n {
            let node = &self.nodes[i];
            need[i] = match node.op {
                Op::Leaf => node.requires_grad && include(Var(i)),
                _ => {
                    let mut any = false;
                    node.op.for_each_input(|v| any |= need[v.0]);
                    any
                }
            };
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if need[loss.0] {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..n).rev() {
            if !need[i] || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &need, &mut grads);
        }
        let grads = (0..self.nodes.len())
            .map(|i| {
                let node = &self.nodes[i];
                if !matches!(node.op, Op::Leaf) || !node.requires_grad || !include(Var(i)) {
                    return None;
                }
                let data = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                Some(Tensor::from_parts(node.value.shape().to_vec(), data))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(
        &self,
        i: usize,
        gy: &[f64],
        need: &[bool],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let acc = |v: Var, grads: &mut [Option<Vec<f64>>]| -> Option<Vec<f64>> {
            if need[v.0] {
                Some(
                    grads[v.0]
                        .take()
                        .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.numel()]),
                )
            } else {
                None
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (a, b) = (*a, *b);
                let (av, bv) = (self.value(a), self.value(b));
                let out = node.value.shape();
                let sa = broadcast_strides(av.shape(), out);
                let sb = broadcast_strides(bv.shape(), out);
                let (ad, bd) = (av.data(), bv.data());
                let mut ga = acc(a, grads);
                let mut gb = if a == b { None } else { acc(b, grads) };
                let self_pair = a == b && need[a.0];
                for_each_broadcast(out, &sa, &sb, |o, ia, ib| {
                    let g = gy[o];
                    let (x, z) = (ad[ia], bd[ib]);
                    let (da, db) = match kind {
                        Binary::Add => (g, g),
                        Binary::Sub => (g, -g),
                        Binary::Mul => (g * z, g * x),
                        Binary::Div => (g / z, -g * x / (z * z)),
                        Binary::Maximum => {
                            if x >= z {
                                (g, 0.0)
                            } else {
                                (0.0, g)
                            }
                        }
                        Binary::Minimum => {
                            if x <= z {
                                (g, 0.0)
                            } else {
                                (0.0, g)
                            }
                        }
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += da;
                        if self_pair {
                            ga[ib] += db;
                        }
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += db;
                    }
                });
                if let Some(ga) = ga {
                    grads[a.0] = Some(ga);
                }
                if let Some(gb) = gb {
                    grads[b.0] = Some(gb);
                }
            }
            Op::Unary(kind, x) => {
                let Some(mut gx) = acc(*x, grads) else { return };
                let xd = self.value(*x).data();
                for j in 0..gx.len() {
                    let (v, g) = (xd[j], gy[j]);
                    gx[j] += match *kind {
                        Unary::Neg => -g,
                        Unary::Exp => g * y[j],
                        Unary::Log => g / v,
                        Unary::Sigmoid => g * y[j] * (1.0 - y[j]),
                        Unary::Relu => {
                            if v > 0.0 {
                                g
                            } else {
                                0.0
                            }
                        }
                        Unary::Softplus => g * sigmoid(v),
                        Unary::Abs => {
                            if v >= 0.0 {
                                g
                            } else {
                                -g
                            }
                        }
                        Unary::Sin => g * v.cos(),
                        Unary::Cos => -g * v.sin(),
                        Unary::AddScalar(_) | Unary::ClampStraightThrough(..) => g,
                        Unary::MulScalar(s) => g * s,
                        Unary::PowScalar(p) => {
                            if v == 0.0 && p < 1.0 {
                                0.0
                            } else {
                                g * p * v.powf(p - 1.0)
                            }
                        }
                    };
                }
                grads[x.0] = Some(gx);
            }
            Op::MatMul(a, b) => self.backward_matmul(*a, *b, gy, need, grads),
            Op::Transpose(x) => {
                let Some(mut gx) = acc(*x, grads) else { return };
                let s = self.shape(*x);
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                for (blk_g, blk_x) in gy.chunks(r * c).zip(gx.chunks_mut(r * c)) {
                    for i in 0..r {
                        for j in 0..c {
                            blk_x[i * c + j] += blk_g[j * r + i];
                        }
                    }
                }
                grads[x.0] = Some(gx);
            }
            Op::Reshape(x) => {
                let Some(mut gx) = acc(*x, grads) else { return };
                gx.iter_mut().zip(gy).for_each(|(a, b)| *a += b);
                grads[x.0] = Some(gx);
            }
            Op::Reduce {
                kind,
                x,
                axis,
                argmax,
            } => {
                let Some(mut gx) = acc(*x, grads) else { return };
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let scale = if *kind == Reduce::Mean {
                    1.0 / len as f64
                } else {
                    1.0
                };
                for o in 0..outer {
                    for i in 0..inner {
                        let g = gy[o * inner + i];
                        if *kind == Reduce::Max {
                            gx[(o * len + argmax[o * inner + i]) * inner + i] += g;
                        } else {
                            for l in 0..len {
                                gx[(o * len + l) * inner + i] += g * scale;
                            }
                        }
                    }
                }
                grads[x.0] = Some(gx);
            }
            Op::SumAll(x) => {
                let Some(mut gx) = acc(*x, grads) else { return };
                gx.iter_mut().for_each(|v| *v += gy[0]);
                grads[x.0] = Some(gx);
            }
            Op::Expand { x, axis, extent } => {
                let Some(mut gx) = acc(*x, grads) else { return };
                let s = self.shape(*x);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis..].iter().product();
                for o in 0..outer {
                    for e in 0..*extent {
                        let base = (o * extent + e) * inner;
                        for j in 0..inner {
                            gx[o * inner + j] += gy[base + j];
                        }
                    }
                }
                grads[x.0] = Some(gx);
            }
            Op::Softmax { x, axis } | Op::LogSoftmax { x, axis } => {
                let Some(mut gx) = acc(*x, grads) else { return };
                let log = matches!(node.op, Op::LogSoftmax { .. });
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        if log {
                            let gs: f64 = (0..len).map(|l| gy[at(l)]).sum();
                            for l in 0..len {
                                gx[at(l)] += gy[at(l)] - y[at(l)].exp() * gs;
                            }
                        } else {
                            let dot: f64 = (0..len).map(|l| gy[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                gx[at(l)] += y[at(l)] * (gy[at(l)] - dot);
                            }
                        }
                    }
                }
                grads[x.0] = Some(gx);
            }
            Op::LayerNorm { x, rstd } => {
                let Some(mut gx) = acc(*x, grads) else { return };
                let d = *node.value.shape().last().unwrap();
                for (r, &rs) in rstd.iter().enumerate() {
                    let row = r * d..(r + 1) * d;
                    let g = &gy[row.clone()];
                    let xh = &y[row.clone()];
                    let mg = g.iter().sum::<f64>() / d as f64;
                    let mgx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for (j, out) in gx[row].iter_mut().enumerate() {
                        *out += rs * (g[j] - mg - xh[j] * mgx);
                    }
                }
                grads[x.0] = Some(gx);
            }
            Op::Narrow { x, axis, start } => {
                let Some(mut gx) = acc(*x, grads) else { return };
                let (outer, ext, inner) = split_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                for o in 0..outer {
                    let dst = (o * ext + start) * inner;
                    let src = o * len * inner;
                    for j in 0..len * inner {
                        gx[dst + j] += gy[src + j];
                    }
                }
                grads[x.0] = Some(gx);
            }
            Op::Concat { xs, axis } => {
                let total = node.value.shape()[*axis];
                let outer: usize = node.value.shape()[..*axis].iter().product();
                let inner: usize = node.value.shape()[*axis + 1..].iter().product();
                let mut offset = 0;
                for &x in xs {
                    let ext = self.shape(x)[*axis];
                    if let Some(mut gx) = acc(x, grads) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            for j in 0..ext * inner {
                                gx[o * ext * inner + j] += gy[src + j];
                            }
                        }
                        grads[x.0] = Some(gx);
                    }
                    offset += ext;
                }
            }
            Op::IndexSelect { x, axis, indices } => {
                let Some(mut gx) = acc(*x, grads) else { return };
                let (outer, ext, inner) = split_axis(self.shape(*x), *axis);
                let k = indices.len();
                for o in 0..outer {
                    for (p, &src) in indices.iter().enumerate() {
                        let from = (o * k + p) * inner;
                        let to = (o * ext + src) * inner;
                        for j in 0..inner {
                            gx[to + j] += gy[from + j];
                        }
                    }
                }
                grads[x.0] = Some(gx);
            }
        }
    }

    fn backward_matmul(
        &self,
        a: Var,
        b: Var,
        gy: &[f64],
        need: &[bool],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        let (n, k, m) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let batch = broadcast_shape(&sa[..sa.len() - 2], &sb[..sb.len() - 2]).unwrap();
        let take = |v: Var, grads: &mut [Option<Vec<f64>>]| {
            grads[v.0]
                .take()
                .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.numel()])
        };
        if sb.len() == 2 && sa.len() - 2 == batch.len() {
            let rows = av.numel() / k;
            if need[a.0] {
                let mut ga = take(a, grads);
                gemm_nt(gy, bv.data(), &mut ga, rows, m, k);
                grads[a.0] = Some(ga);
            }
            if need[b.0] {
                let mut gb = take(b, grads);
                gemm_tn(av.data(), gy, &mut gb, rows, k, m);
                grads[b.0] = Some(gb);
            }
            return;
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        if need[a.0] {
            let mut ga = take(a, grads);
            for_each_batch(&batch, ba, bb, |o, ia, ib| {
                gemm_nt(
                    &gy[o * n * m..(o + 1) * n * m],
                    &bv.data()[ib * k * m..(ib + 1) * k * m],
                    &mut ga[ia * n * k..(ia + 1) * n * k],
                    n,
                    m,
                    k,
                );
            });
            grads[a.0] = Some(ga);
        }
        if need[b.0] {
            let mut gb = take(b, grads);
            for_each_batch(&batch, ba, bb, |o, ia, ib| {
                gemm_tn(
                    &av.data()[ia * n * k..(ia + 1) * n * k],
                    &gy[o * n * m..(o + 1) * n * m],
                    &mut gb[ib * k * m..(ib + 1) * k * m],
                    n,
                    k,
                    m,
                );
            });
            grads[b.0] = Some(gb);
        }
    }
}

/// Iterate broadcast batch indices in units of whole matrices.
fn for_each_batch(
    batch: &[usize],
    ba: &[usize],
    bb: &[usize],
    f: impl FnMut(usize, usize, usize),
) {
    let sa = broadcast_strides(ba, batch);
    let sb = broadcast_strides(bb, batch);
    for_each_broadcast(batch, &sa, &sb, f);
}
