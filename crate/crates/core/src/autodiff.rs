//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation evaluates eagerly and appends a node to the [`Tape`]. Inputs
//! always precede their consumers, so a single reverse sweep over the node list
//! visits operations in a valid order. A node tracks gradients iff at least
//! one of its inputs does; constant subgraphs carry no backward cost.

use crate::error::{Error, Result};
use crate::ssm::{self, ScanKernel};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Square,
    Exp,
    Relu,
    Sigmoid,
    Silu,
    Softplus,
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    // ln(1 + e^x) without overflow for large x
    if x > T::from_f64_lossy(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl Unary {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::Neg => -x,
            Unary::Square => x * x,
            Unary::Exp => x.exp(),
            Unary::Relu => x.max(T::zero()),
            Unary::Sigmoid => sigmoid(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Softplus => softplus(x),
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        let one = T::one();
        match self {
            Unary::Neg => -one,
            Unary::Square => x + x,
            Unary::Exp => y,
            Unary::Relu => {
                if x > T::zero() {
                    one
                } else {
                    T::zero()
                }
            }
            Unary::Sigmoid => y * (one - y),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (one + x * (one - s))
            }
            Unary::Softplus => sigmoid(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

/// How the smaller operand of a binary op repeats over the larger one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    Lhs,
    Rhs,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        alpha: T,
    },
    Binary {
        a: Var,
        b: Var,
        kind: Binary,
        bcast: Broadcast,
    },
    Unary {
        x: Var,
        kind: Unary,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    SumLast {
        x: Var,
    },
    Outer {
        col: Var,
        row: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax {
        x: Var,
    },
    Conv1d {
        x: Var,
        kernels: Var,
        bias: Var,
    },
    SelectiveScan {
        inputs: ssm::ScanInputs,
        states: Vec<T>,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    IndexAxis {
        x: Var,
        axis: usize,
        index: usize,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of executed operations with their backward rules.
///
/// A tape belongs to one forward/backward pass on one thread.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<T: Scalar>(src: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// Sums `src` into `dst`, where `dst` repeats cyclically over `src`.
fn reduce_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for chunk in src.chunks(dst.len()) {
        add_into(dst, chunk);
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn tracks(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Registers a leaf tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Clears every accumulated gradient.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---------------------------------------------------------------- ops

    /// `a[..., k] · b[k, n] -> [..., n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let rows = self.value(a).len() / k.max(1);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![T::zero(); rows * n];
        T::gemm(
            rows,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let rg = self.tracks(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::MatMul { a, b }))
    }

    /// Batched `alpha · a[nb, m, k] · b[nb, k, p]`; with `trans_b`, `b` is
    /// stored as `[nb, p, k]` and used transposed.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool, alpha: T) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::shape("batch_matmul", &sa, &sb);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (nb, m, k) = (sa[0], sa[1], sa[2]);
        let (bk, p) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if bk != k {
            return Err(bad());
        }
        let mut out = vec![T::zero(); nb * m * p];
        let b_strides = if trans_b {
            (1, k as isize)
        } else {
            (p as isize, 1)
        };
        for i in 0..nb {
            T::gemm(
                m,
                k,
                p,
                alpha,
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                (k as isize, 1),
                &self.value(b).data()[i * k * p..(i + 1) * k * p],
                b_strides,
                T::zero(),
                &mut out[i * m * p..(i + 1) * m * p],
                (p as isize, 1),
            );
        }
        let rg = self.tracks(&[a, b]);
        Ok(self.push(
            Tensor::new([nb, m, p], out)?,
            rg,
            Op::BatchMatMul {
                a,
                b,
                trans_b,
                alpha,
            },
        ))
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bcast = if sa == sb {
            Broadcast::None
        } else if sb.is_empty() || (sb.len() <= sa.len() && sa.ends_with(sb)) {
            Broadcast::Rhs
        } else if sa.is_empty() || (sa.len() <= sb.len() && sb.ends_with(sa)) {
            Broadcast::Lhs
        } else {
            return Err(Error::shape("elementwise", sa, sb));
        };
        let (va, vb) = (self.value(a), self.value(b));
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let (shape, data): (Vec<usize>, Vec<T>) = match bcast {
            Broadcast::None | Broadcast::Rhs => {
                let small = vb.data();
                (
                    sa.to_vec(),
                    va.data()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| f(x, small[i % small.len()]))
                        .collect(),
                )
            }
            Broadcast::Lhs => {
                let small = va.data();
                (
                    sb.to_vec(),
                    vb.data()
                        .iter()
                        .enumerate()
                        .map(|(i, &y)| f(small[i % small.len()], y))
                        .collect(),
                )
            }
        };
        let rg = self.tracks(&[a, b]);
        Ok(self.push(
            Tensor::new(shape, data)?,
            rg,
            Op::Binary { a, b, kind, bcast },
        ))
    }

    /// Elementwise sum; the smaller operand may be a scalar or a trailing suffix.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let value = self.value(x).map(|v| kind.apply(v));
        let rg = self.tracks(&[x]);
        self.push(value, rg, Op::Unary { x, kind })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.tracks(&[x]);
        self.push(value, rg, Op::Scale { x, factor })
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.tracks(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::from_usize(v.len().max(1)).unwrap();
        let rg = self.tracks(&[x]);
        self.push(Tensor::scalar(m), rg, Op::Mean { x })
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() == 0 {
            return Err(Error::shape("sum_last", v.shape(), &[]));
        }
        let d = v.last_dim();
        let data: Vec<T> = v
            .data()
            .chunks(d.max(1))
            .map(|c| c.iter().copied().sum())
            .collect();
        let shape = v.shape()[..v.rank() - 1].to_vec();
        let rg = self.tracks(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::SumLast { x }))
    }

    /// Outer product `col[n] ⊗ row[d] -> [n, d]`.
    pub fn outer(&mut self, col: Var, row: Var) -> Result<Var> {
        let (sc, sr) = (self.shape(col), self.shape(row));
        if sc.len() != 1 || sr.len() != 1 {
            return Err(Error::shape("outer", sc, sr));
        }
        let (n, d) = (sc[0], sr[0]);
        let (c, r) = (self.value(col).data(), self.value(row).data());
        let mut out = Vec::with_capacity(n * d);
        for &ci in c {
            out.extend(r.iter().map(|&rj| ci * rj));
        }
        let rg = self.tracks(&[col, row]);
        Ok(self.push(Tensor::new([n, d], out)?, rg, Op::Outer { col, row }))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::shape("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let eps = T::from_f64_lossy(eps);
        let dt = T::from_usize(d).unwrap();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let xv = self.value(x);
        let rows = xv.len() / d.max(1);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let mu = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dt;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mu) * inv;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.tracks(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: if rg { xhat } else { Vec::new() },
                inv_std,
            },
        ))
    }

    /// Max-stabilized softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if d == 0 || xv.rank() == 0 {
            return Err(Error::shape("softmax", xv.shape(), &[]));
        }
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut z = T::zero();
            for &v in row {
                let e = (v - m).exp();
                z += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e /= z);
        }
        let shape = xv.shape().to_vec();
        let rg = self.tracks(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Softmax { x }))
    }

    /// Causal depthwise convolution over `x[B, L, c]` (or `[L, c]`) with
    /// `kernels[c, w]`; the last tap multiplies the current timestep.
    pub fn causal_conv1d(&mut self, x: Var, kernels: Var, bias: Var) -> Result<Var> {
        let (sx, sk, sb) = (self.shape(x), self.shape(kernels), self.shape(bias));
        let (batch, len, c) = match *sx {
            [l, c] => (1, l, c),
            [b, l, c] => (b, l, c),
            _ => return Err(Error::shape("causal_conv1d", sx, sk)),
        };
        if sk.len() != 2 || sk[0] != c || sk[1] == 0 {
            return Err(Error::shape("causal_conv1d", sx, sk));
        }
        if sb != [c] {
            return Err(Error::shape("causal_conv1d", sx, sb));
        }
        let w = sk[1];
        let (xv, kv, bv) = (
            self.value(x).data(),
            self.value(kernels).data(),
            self.value(bias).data(),
        );
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..batch {
            let base = b * len * c;
            for t in 0..len {
                let o = &mut out[base + t * c..base + (t + 1) * c];
                o.copy_from_slice(bv);
                for j in 0..w {
                    // tap j reads position t - (w - 1) + j
                    let Some(s) = (t + j).checked_sub(w - 1) else {
                        continue;
                    };
                    let xs = &xv[base + s * c..base + (s + 1) * c];
                    for ch in 0..c {
                        o[ch] += kv[ch * w + j] * xs[ch];
                    }
                }
            }
        }
        let shape = sx.to_vec();
        let rg = self.tracks(&[x, kernels, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::Conv1d { x, kernels, bias },
        ))
    }

    /// Selective state space scan; see [`ssm::ScanInputs`] for operand shapes.
    ///
    /// The parallel kernel is forward-only and rejects gradient-tracking inputs.
    pub fn selective_scan(&mut self, inputs: ssm::ScanInputs, kernel: ScanKernel) -> Result<Var> {
        let vars = inputs.vars();
        let rg = self.tracks(&vars);
        if rg && kernel != ScanKernel::Sequential {
            return Err(Error::ForwardOnly("selective_scan(parallel)"));
        }
        let view = inputs.view(self)?;
        let (y, states) = match kernel {
            ScanKernel::Sequential => ssm::scan_forward_sequential(&view, rg),
            ScanKernel::Parallel { chunk } => {
                (ssm::scan_forward_parallel(&view, chunk), Vec::new())
            }
        };
        let shape = view.output_shape();
        Ok(self.push(
            Tensor::new(shape, y)?,
            rg,
            Op::SelectiveScan { inputs, states },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.tracks(&[x]);
        Ok(self.push(value, rg, Op::Reshape { x }))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len()
            || axes
                .iter()
                .any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::shape("permute", s, axes));
        }
        let (shape, data) = permute_data(self.value(x).data(), s, axes);
        let rg = self.tracks(&[x]);
        Ok(self.push(
            Tensor::new(shape, data)?,
            rg,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(Error::shape("concat", &s0, &[axis]));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != s0.len()
                || s.iter()
                    .zip(&s0)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", &s0, s));
            }
            total += s[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let chunk = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.value(*v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let rg = self.tracks(inputs);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Selects `index` along `axis`, dropping that axis.
    pub fn index_axis(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || index >= s[axis] {
            return Err(Error::shape("index_axis", &s, &[axis, index]));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * s[axis] + index) * inner;
            out.extend_from_slice(&data[start..start + inner]);
        }
        let mut shape = s;
        shape.remove(axis);
        let rg = self.tracks(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::IndexAxis { x, axis, index },
        ))
    }

    /// Row lookup `table[indices[i]] -> [n, d]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::shape("embedding", s, &[]));
        }
        let (k, d) = (s[0], s[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= k {
                return Err(Error::InvalidArgument(format!(
                    "embedding index {i} out of range for table with {k} rows"
                )));
            }
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.tracks(&[table]);
        Ok(self.push(
            Tensor::new([indices.len(), d], out)?,
            rg,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    // ----------------------------------------------------------- backward

    /// Propagates d`loss` to every gradient-tracking node. Leaf gradients
    /// accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss).to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(ls.clone()));
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.accumulate(loss, &Tensor::full(ls, T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: &Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => add_into(acc.data_mut(), g.data()),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    fn accumulate_data(&mut self, v: Var, data: Vec<T>) {
        let shape = self.shape(v).to_vec();
        let t = Tensor::new(shape, data).expect("gradient shape matches its node");
        self.accumulate(v, &t);
    }

    fn backward_node(&mut self, i: usize, g: &Tensor<T>) {
        let gd = g.data();
        let node = &self.nodes[i];
        let mut pending: Vec<(Var, Vec<T>)> = Vec::with_capacity(2);
        let val = |v: Var| self.nodes[v.0].value.data();
        let tracks = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let sb = self.nodes[b.0].value.shape();
                let (k, n) = (sb[0], sb[1]);
                let rows = gd.len() / n.max(1);
                if tracks(*a) {
                    let mut da = vec![T::zero(); rows * k];
                    T::gemm(
                        rows,
                        n,
                        k,
                        T::one(),
                        gd,
                        (n as isize, 1),
                        val(*b),
                        (1, n as isize),
                        T::zero(),
                        &mut da,
                        (k as isize, 1),
                    );
                    pending.push((*a, da));
                }
                if tracks(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        rows,
                        n,
                        T::one(),
                        val(*a),
                        (1, k as isize),
                        gd,
                        (n as isize, 1),
                        T::zero(),
                        &mut db,
                        (n as isize, 1),
                    );
                    pending.push((*b, db));
                }
            }
            Op::BatchMatMul {
                a,
                b,
                trans_b,
                alpha,
            } => {
                let sa = self.nodes[a.0].value.shape();
                let (nb, m, k) = (sa[0], sa[1], sa[2]);
                let p = node.value.shape()[2];
                let (av, bv) = (val(*a), val(*b));
                if tracks(*a) {
                    // dA = alpha · dC · op(B)^T
                    let bt = if *trans_b {
                        (k as isize, 1)
                    } else {
                        (1, p as isize)
                    };
                    let mut da = vec![T::zero(); nb * m * k];
                    for s in 0..nb {
                        T::gemm(
                            m,
                            p,
                            k,
                            *alpha,
                            &gd[s * m * p..(s + 1) * m * p],
                            (p as isize, 1),
                            &bv[s * k * p..(s + 1) * k * p],
                            bt,
                            T::zero(),
                            &mut da[s * m * k..(s + 1) * m * k],
                            (k as isize, 1),
                        );
                    }
                    pending.push((*a, da));
                }
                if tracks(*b) {
                    let mut db = vec![T::zero(); nb * k * p];
                    for s in 0..nb {
                        let (ga, aa, dd) = (
                            &gd[s * m * p..(s + 1) * m * p],
                            &av[s * m * k..(s + 1) * m * k],
                            &mut db[s * k * p..(s + 1) * k * p],
                        );
                        if *trans_b {
                            // dB[p, k] = alpha · dC^T · A
                            T::gemm(
                                p,
                                m,
                                k,
                                *alpha,
                                ga,
                                (1, p as isize),
                                aa,
                                (k as isize, 1),
                                T::zero(),
                                dd,
                                (k as isize, 1),
                            );
                        } else {
                            // dB[k, p] = alpha · A^T · dC
                            T::gemm(
                                k,
                                m,
                                p,
                                *alpha,
                                aa,
                                (1, k as isize),
                                ga,
                                (p as isize, 1),
                                T::zero(),
                                dd,
                                (p as isize, 1),
                            );
                        }
                    }
                    pending.push((*b, db));
                }
            }
            Op::Binary { a, b, kind, bcast } => {
                let (av, bv) = (val(*a), val(*b));
                let la = av.len();
                let lb = bv.len();
                let at = |j: usize| av[j % la];
                let bt = |j: usize| bv[j % lb];
                let (da_full, db_full): (Option<Vec<T>>, Option<Vec<T>>) = match kind {
                    Binary::Add => (
                        tracks(*a).then(|| gd.to_vec()),
                        tracks(*b).then(|| gd.to_vec()),
                    ),
                    Binary::Sub => (
                        tracks(*a).then(|| gd.to_vec()),
                        tracks(*b).then(|| gd.iter().map(|&x| -x).collect()),
                    ),
                    Binary::Mul => (
                        tracks(*a)
                            .then(|| gd.iter().enumerate().map(|(j, &x)| x * bt(j)).collect()),
                        tracks(*b)
                            .then(|| gd.iter().enumerate().map(|(j, &x)| x * at(j)).collect()),
                    ),
                };
                let fold = |full: Vec<T>, len: usize| {
                    if full.len() == len {
                        full
                    } else {
                        let mut r = vec![T::zero(); len];
                        reduce_into(&mut r, &full);
                        r
                    }
                };
                let _ = bcast;
                if let Some(full) = da_full {
                    pending.push((*a, fold(full, la)));
                }
                if let Some(full) = db_full {
                    pending.push((*b, fold(full, lb)));
                }
            }
            Op::Unary { x, kind } => {
                let (xv, yv) = (val(*x), node.value.data());
                let dx = gd
                    .iter()
                    .zip(xv)
                    .zip(yv)
                    .map(|((&g, &x), &y)| g * kind.derivative(x, y))
                    .collect();
                pending.push((*x, dx));
            }
            Op::Scale { x, factor } => {
                pending.push((*x, gd.iter().map(|&g| g * *factor).collect()));
            }
            Op::Sum { x } => {
                let n = val(*x).len();
                pending.push((*x, vec![gd[0]; n]));
            }
            Op::Mean { x } => {
                let n = val(*x).len();
                let v = gd[0] / T::from_usize(n.max(1)).unwrap();
                pending.push((*x, vec![v; n]));
            }
            Op::SumLast { x } => {
                let xv = &self.nodes[x.0].value;
                let d = xv.last_dim();
                let mut dx = Vec::with_capacity(xv.len());
                for &gv in gd {
                    dx.extend(std::iter::repeat_n(gv, d));
                }
                pending.push((*x, dx));
            }
            Op::Outer { col, row } => {
                let (cv, rv) = (val(*col), val(*row));
                let d = rv.len();
                if tracks(*col) {
                    let dc = gd
                        .chunks(d)
                        .map(|gr| gr.iter().zip(rv).map(|(&g, &r)| g * r).sum())
                        .collect();
                    pending.push((*col, dc));
                }
                if tracks(*row) {
                    let mut dr = vec![T::zero(); d];
                    for (gr, &c) in gd.chunks(d).zip(cv) {
                        for (o, &g) in dr.iter_mut().zip(gr) {
                            *o += g * c;
                        }
                    }
                    pending.push((*row, dr));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let dt = T::from_usize(d).unwrap();
                let gv = val(*gain);
                let mut dx = vec![T::zero(); gd.len()];
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                for (r, (gr, hr)) in gd.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let mut mean_dh = T::zero();
                    let mut mean_dhh = T::zero();
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        mean_dh += dh;
                        mean_dhh += dh * hr[j];
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                    }
                    mean_dh /= dt;
                    mean_dhh /= dt;
                    let inv = inv_std[r];
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        dx[r * d + j] = inv * (dh - mean_dh - hr[j] * mean_dhh);
                    }
                }
                pending.push((*x, dx));
                pending.push((*gain, dgain));
                pending.push((*bias, dbias));
            }
            Op::Softmax { x } => {
                let d = node.value.last_dim();
                let mut dx = Vec::with_capacity(gd.len());
                for (gr, yr) in gd.chunks(d).zip(node.value.data().chunks(d)) {
                    let dot: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                    dx.extend(gr.iter().zip(yr).map(|(&g, &y)| y * (g - dot)));
                }
                pending.push((*x, dx));
            }
            Op::Conv1d { x, kernels, bias } => {
                let sx = self.nodes[x.0].value.shape();
                let (len, c) = (sx[sx.len() - 2], sx[sx.len() - 1]);
                let batch = gd.len() / (len * c).max(1);
                let w = self.nodes[kernels.0].value.shape()[1];
                let (xv, kv) = (val(*x), val(*kernels));
                let mut dx = vec![T::zero(); xv.len()];
                let mut dk = vec![T::zero(); kv.len()];
                let mut db = vec![T::zero(); c];
                for b in 0..batch {
                    let base = b * len * c;
                    for t in 0..len {
                        let go = &gd[base + t * c..base + (t + 1) * c];
                        for ch in 0..c {
                            db[ch] += go[ch];
                        }
                        for j in 0..w {
                            let Some(s) = (t + j).checked_sub(w - 1) else {
                                continue;
                            };
                            for ch in 0..c {
                                dx[base + s * c + ch] += kv[ch * w + j] * go[ch];
                                dk[ch * w + j] += xv[base + s * c + ch] * go[ch];
                            }
                        }
                    }
                }
                pending.push((*x, dx));
                pending.push((*kernels, dk));
                pending.push((*bias, db));
            }
            Op::SelectiveScan { inputs, states } => {
                let view = inputs
                    .view(self)
                    .expect("scan operands validated in forward");
                let grads = ssm::scan_backward(&view, states, gd);
                for (v, d) in inputs.vars().into_iter().zip(grads) {
                    pending.push((v, d));
                }
            }
            Op::Reshape { x } => pending.push((*x, gd.to_vec())),
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (_, dx) = permute_data(gd, node.value.shape(), &inverse);
                pending.push((*x, dx));
            }
            Op::Concat { inputs, axis } => {
                let s = node.value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut parts: Vec<Vec<T>> = inputs
                    .iter()
                    .map(|v| Vec::with_capacity(val(*v).len()))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (k, v) in inputs.iter().enumerate() {
                        let chunk = self.nodes[v.0].value.shape()[*axis] * inner;
                        parts[k].extend_from_slice(&gd[off..off + chunk]);
                        off += chunk;
                    }
                }
                pending.extend(inputs.iter().copied().zip(parts));
            }
            Op::IndexAxis { x, axis, index } => {
                let s = self.nodes[x.0].value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut dx = vec![T::zero(); val(*x).len()];
                for o in 0..outer {
                    let start = (o * s[*axis] + index) * inner;
                    dx[start..start + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
                pending.push((*x, dx));
            }
            Op::Embedding { table, indices } => {
                let d = self.nodes[table.0].value.shape()[1];
                let mut dt = vec![T::zero(); val(*table).len()];
                for (r, &i) in indices.iter().enumerate() {
                    add_into(&mut dt[i * d..(i + 1) * d], &gd[r * d..(r + 1) * d]);
                }
                pending.push((*table, dt));
            }
        }
        for (v, d) in pending {
            if self.nodes[v.0].requires_grad {
                self.accumulate_data(v, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(c), tape.value(b));

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn activation_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[0.0, -3.0]));
        let s = tape.silu(x);
        let r = tape.relu(x);
        assert_eq!(tape.value(s).data()[0], 0.0);
        assert_eq!(tape.value(r).data()[1], 0.0);
        let big = tape.constant(t(&[1], &[1000.0]));
        let sp = tape.softplus(big);
        assert_eq!(tape.value(sp).data()[0], 1000.0);
    }

    #[test]
    fn broadcast_rules() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let row = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.constant(Tensor::scalar(5.0));
        let bad = tape.constant(Tensor::zeros([2]));
        let y = tape.add(a, row).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let y = tape.mul(s, row).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 10.0, 15.0]);
        assert!(tape.add(a, bad).is_err());
    }

    #[test]
    fn backward_square_sum() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[1], &[3.0]));
        let sq = tape.square(x);
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
        // a second pass accumulates
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[12.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn unused_parameter_gets_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[1], &[3.0]));
        let p = tape.param(t(&[1], &[7.0]));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert!(tape.grad(p).is_none_or(|g| g.data() == [0.0]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros([2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(t(&[2], &[1.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.5, -0.5]));
        let c = tape.constant(t(&[1, 2], &[4.0, 4.0]));
        let y = tape.layer_norm(c, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -0.5]);

        let zero = tape.constant(Tensor::zeros([2]));
        let x = tape.constant(t(&[1, 2], &[1.0, -1.0]));
        let y = tape.layer_norm(x, g, zero, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -1.0]);

        let wrong = tape.constant(Tensor::zeros([3]));
        assert!(tape.layer_norm(x, wrong, zero, 1e-5).is_err());
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-300 && d[1].is_finite());
    }

    #[test]
    fn conv_width_one_scales_and_impulse_response() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let k = tape.constant(t(&[2, 1], &[2.0, -1.0]));
        let b = tape.constant(t(&[2], &[0.5, 0.0]));
        let y = tape.causal_conv1d(x, k, b).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5, -2.0, 6.5, -4.0, 10.5, -6.0]);

        let (ka, kb, x0) = (0.3, 0.7, 2.0);
        let x = tape.constant(t(&[4, 1], &[x0, 0.0, 0.0, 0.0]));
        let k = tape.constant(t(&[1, 2], &[ka, kb]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.causal_conv1d(x, k, b).unwrap();
        assert_eq!(tape.value(y).data(), &[kb * x0, ka * x0, 0.0, 0.0]);

        let bad = tape.constant(Tensor::zeros([3, 2]));
        assert!(tape.causal_conv1d(x, bad, b).is_err());
    }

    #[test]
    fn permute_concat_index_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let p = tape.permute(x, &[1, 0]).unwrap();
        assert_eq!(tape.value(p).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let c = tape.concat(&[x, x], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 6]);
        assert_eq!(tape.value(c).row(1), &[3.0, 4.0, 5.0, 3.0, 4.0, 5.0]);
        let last = tape.index_axis(x, 1, 2).unwrap();
        assert_eq!(tape.value(last).data(), &[2.0, 5.0]);
        assert!(tape.permute(x, &[0, 0]).is_err());
    }
}
