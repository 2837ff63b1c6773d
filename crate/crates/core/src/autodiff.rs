//! Reverse-mode automatic differentiation over a tape of tensor ops.
//!
//! A [`Graph`] records every op eagerly: values are computed at insertion
//! time and each node keeps what its backward rule needs. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and leaves
//! a gradient on every node that transitively depends on a leaf created with
//! `needs_grad = true`.
//!
//! Binary elementwise ops broadcast their right operand when it is a scalar
//! or a single row whose width matches the left operand's last extent.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-axis sampling plan for align-corners-false bilinear interpolation.
#[derive(Clone, Debug)]
struct AxisPlan<T> {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<T>,
}

impl<T: Real> AxisPlan<T> {
    fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut plan = Self {
            lo: Vec::with_capacity(dst),
            hi: Vec::with_capacity(dst),
            frac: Vec::with_capacity(dst),
        };
        for d in 0..dst {
            let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (s.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            plan.lo.push(lo);
            plan.hi.push(hi);
            plan.frac.push(T::of(s - lo as f64));
        }
        plan
    }
}

#[derive(Clone, Debug)]
struct ResizePlan<T> {
    src: (usize, usize),
    rows: AxisPlan<T>,
    cols: AxisPlan<T>,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, T),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Reshape(Var),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    SpaceToDepth {
        x: Var,
        h: usize,
        w: usize,
        p: usize,
    },
    Resize(Var, ResizePlan<T>),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    BceLogits(Var, Vec<T>),
    GradientMap(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

// tanh-approximation GeLU constants
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Scalar GeLU, tanh approximation. Every module uses this variant.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

// out[m,n] += a[m,k] * b[k,n]
fn mm<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

// out[m,n] += a[m,k] * b[n,k]^T
fn mm_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

// out[m,n] += a[k,m]^T * b[k,n]
fn mm_tn<T: Real>(a: &[T], b: &[T], k: usize, m: usize, n: usize, out: &mut [T]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
}

fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    let nb: usize = b.iter().product();
    a == b || nb == 1 || (!b.is_empty() && nb == *b.last().unwrap() && a.last() == b.last())
}

impl<T: Real> Graph<T> {
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if `v` received one.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        mk: fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !broadcastable(&sa, &sb) {
            return Err(Error::shape(name, format!("{sa:?} vs {sb:?}")));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let nb = bv.len();
        let data = av.iter().enumerate().map(|(i, &x)| f(x, bv[i % nb])).collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::with_shape(sa, data), mk(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| scale * v + shift).collect();
        let t = Tensor::with_shape(xv.shape().to_vec(), data);
        let ng = self.ng(&[x]);
        self.push(t, Op::Affine(x, scale), ng)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    fn as_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, format!("expected a matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.as_matrix("matmul", a)?;
        let (k2, n) = self.as_matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        mm(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::with_shape(vec![m, n], out), Op::MatMul(a, b), ng))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.as_matrix("matmul_nt", a)?;
        let (n, k2) = self.as_matrix("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = vec![T::zero(); m * n];
        mm_nt(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::with_shape(vec![m, n], out), Op::MatMulNt(a, b), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.as_matrix("transpose", x)?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv[i * n + j];
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::with_shape(vec![n, m], out), Op::Transpose(x), ng))
    }

    /// `x * w^T + b` over the last axis of `x`; `w` is `[d_out, d_in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (d_out, d_in) = self.as_matrix("linear", w)?;
        if *xs.last().unwrap() != d_in {
            return Err(Error::shape(
                "linear",
                format!("input {xs:?} does not end in d_in={d_in}"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).numel() != d_out {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} vs d_out={d_out}", self.shape(b)),
                ));
            }
        }
        let m = self.value(x).numel() / d_in;
        let mut out = vec![T::zero(); m * d_out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bv);
            }
        }
        mm_nt(self.value(x).data(), self.value(w).data(), m, d_in, d_out, &mut out);
        let mut shape = xs;
        *shape.last_mut().unwrap() = d_out;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(Tensor::with_shape(shape, out), Op::Linear { x, w, b }, ng))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::with_shape(xv.shape().to_vec(), data);
        let ng = self.ng(&[x]);
        self.push(t, op, ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu_scalar, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid_scalar, Op::Sigmoid(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::with_shape(xv.shape().to_vec(), out);
        let ng = self.ng(&[x]);
        self.push(t, Op::Softmax(x), ng)
    }

    /// Normalize over the last axis (biased variance, `eps` inside the root),
    /// then apply `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape(
                "layer_norm",
                format!("width {d} vs gamma {:?} beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let eps = T::of(eps);
        let n = T::of(d as f64);
        let xv = self.value(x);
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let rows = xv.rows();
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
        }
        let t = Tensor::with_shape(xv.shape().to_vec(), out);
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        if len == 0 || start + len > rows {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {rows}", start + len),
            ));
        }
        let data = xv.data()[start * d..(start + len) * d].to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::with_shape(vec![len, d], data), Op::SliceRows(x, start), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != d {
                return Err(Error::shape("concat_rows", format!("width {} vs {d}", pv.cols())));
            }
            data.extend_from_slice(pv.data());
        }
        let rows = data.len() / d;
        let ng = self.ng(parts);
        Ok(self.push(
            Tensor::with_shape(vec![rows, d], data),
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        if len == 0 || start + len > d {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{} of {d}", start + len),
            ));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.data()[r * d + start..r * d + start + len]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::with_shape(vec![rows, len], data), Op::SliceCols(x, start), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let d: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * d);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(
            Tensor::with_shape(vec![rows, d], data),
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    /// Row lookup `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (n, d) = (tv.rows(), tv.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("id {bad} outside table of {n} rows")));
        }
        if ids.is_empty() {
            return Err(Error::invalid("gather with no ids"));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let ng = self.ng(&[table]);
        Ok(self.push(
            Tensor::with_shape(vec![ids.len(), d], data),
            Op::Gather(table, ids.to_vec()),
            ng,
        ))
    }

    /// Rearrange a `[h*w, c]` map into non-overlapping `p x p` blocks:
    /// output row = block index (row-major), columns = block pixels in raster
    /// order with channels innermost, giving `[(h/p)*(w/p), p*p*c]`.
    pub fn space_to_depth(&mut self, x: Var, h: usize, w: usize, p: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) || xv.rows() != h * w {
            return Err(Error::invalid(format!(
                "cannot split {h}x{w} map ({} rows) into {p}x{p} blocks",
                xv.rows()
            )));
        }
        let out = space_to_depth_fwd(xv.data(), h, w, c, p);
        let shape = vec![(h / p) * (w / p), p * p * c];
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::with_shape(shape, out), Op::SpaceToDepth { x, h, w, p }, ng))
    }

    /// Bilinear resize of a `[h*w, c]` map to `[oh*ow, c]` (align corners
    /// false, sample positions clamped at the edges).
    pub fn resize(&mut self, x: Var, h: usize, w: usize, oh: usize, ow: usize) -> Result<Var> {
        let xv = self.value(x);
        if h == 0 || w == 0 || oh == 0 || ow == 0 || xv.rows() != h * w {
            return Err(Error::invalid(format!(
                "cannot resize {h}x{w} map ({} rows) to {oh}x{ow}",
                xv.rows()
            )));
        }
        let c = xv.cols();
        let plan = ResizePlan {
            src: (h, w),
            rows: AxisPlan::new(h, oh),
            cols: AxisPlan::new(w, ow),
        };
        let out = if (h, w) == (oh, ow) {
            xv.data().to_vec()
        } else {
            resize_fwd(xv.data(), &plan, c)
        };
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::with_shape(vec![oh * ow, c], out), Op::Resize(x, plan), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().copied().sum::<T>() / T::of(xv.numel() as f64);
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Mean over rows: `[n, d] -> [1, d]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let mut out = vec![T::zero(); d];
        for row in xv.data().chunks(d) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let nn = T::of(n as f64);
        for o in out.iter_mut() {
            *o /= nn;
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::with_shape(vec![1, d], out), Op::MeanRows(x), ng)
    }

    /// Mean binary cross-entropy of `logits` against a fixed target, in the
    /// overflow-free form `max(x,0) - x*t + ln(1 + e^-|x|)`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[T]) -> Result<Var> {
        let xv = self.value(logits);
        if xv.numel() != target.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits vs {} targets", xv.numel(), target.len()),
            ));
        }
        let s = xv
            .data()
            .iter()
            .zip(target)
            .map(|(&x, &t)| x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p())
            .sum::<T>()
            / T::of(target.len() as f64);
        let ng = self.ng(&[logits]);
        Ok(self.push(Tensor::scalar(s), Op::BceLogits(logits, target.to_vec()), ng))
    }

    /// Sum of horizontal and vertical absolute adjacent differences of an
    /// `[h, w]` map, zero-padded at the trailing edge of each axis.
    pub fn gradient_map(&mut self, x: Var) -> Result<Var> {
        let (h, w) = self.as_matrix("gradient_map", x)?;
        let out = gradient_map_fwd(self.value(x).data(), h, w);
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::with_shape(vec![h, w], out), Op::GradientMap(x), ng))
    }

    /// Back-propagate from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("target must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if wants(*a) {
                    accum(grads, val(*a), *a, gd.to_vec());
                }
                if wants(*b) {
                    let nb = val(*b).numel();
                    let mut gb = vec![T::zero(); nb];
                    for (k, &gv) in gd.iter().enumerate() {
                        gb[k % nb] += sign * gv;
                    }
                    accum(grads, val(*b), *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let nb = bv.len();
                if wants(*a) {
                    let ga = gd.iter().enumerate().map(|(k, &gv)| gv * bv[k % nb]).collect();
                    accum(grads, val(*a), *a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![T::zero(); nb];
                    for (k, &gv) in gd.iter().enumerate() {
                        gb[k % nb] += gv * av[k];
                    }
                    accum(grads, val(*b), *b, gb);
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let nb = bv.len();
                if wants(*a) {
                    let ga = gd.iter().enumerate().map(|(k, &gv)| gv / bv[k % nb]).collect();
                    accum(grads, val(*a), *a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![T::zero(); nb];
                    for (k, &gv) in gd.iter().enumerate() {
                        let y = bv[k % nb];
                        gb[k % nb] -= gv * av[k] / (y * y);
                    }
                    accum(grads, val(*b), *b, gb);
                }
            }
            Op::Affine(x, s) => {
                accum(grads, val(*x), *x, gd.iter().map(|&v| v * *s).collect());
            }
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    mm_nt(gd, val(*b).data(), m, n, k, &mut ga);
                    accum(grads, val(*a), *a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    mm_tn(val(*a).data(), gd, m, k, n, &mut gb);
                    accum(grads, val(*b), *b, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[0];
                if wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    mm(gd, val(*b).data(), m, n, k, &mut ga);
                    accum(grads, val(*a), *a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![T::zero(); n * k];
                    mm_tn(gd, val(*a).data(), m, n, k, &mut gb);
                    accum(grads, val(*b), *b, gb);
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (val(*x).shape()[0], val(*x).shape()[1]);
                let mut gx = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] = gd[j * m + i];
                    }
                }
                accum(grads, val(*x), *x, gx);
            }
            Op::Linear { x, w, b } => {
                let (d_out, d_in) = (val(*w).shape()[0], val(*w).shape()[1]);
                let m = val(*x).numel() / d_in;
                if wants(*x) {
                    let mut gx = vec![T::zero(); m * d_in];
                    mm(gd, val(*w).data(), m, d_out, d_in, &mut gx);
                    accum(grads, val(*x), *x, gx);
                }
                if wants(*w) {
                    let mut gw = vec![T::zero(); d_out * d_in];
                    mm_tn(gd, val(*x).data(), m, d_out, d_in, &mut gw);
                    accum(grads, val(*w), *w, gw);
                }
                if let Some(b) = b {
                    if wants(*b) {
                        let mut gb = vec![T::zero(); d_out];
                        for row in gd.chunks(d_out) {
                            for (o, &v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        accum(grads, val(*b), *b, gb);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x).data();
                let gx = gd.iter().zip(xv).map(|(&g, &x)| g * gelu_grad(x)).collect();
                accum(grads, val(*x), *x, gx);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let gx = gd.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect();
                accum(grads, val(*x), *x, gx);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = node.value.cols();
                let mut gx = vec![T::zero(); y.len()];
                for ((gr, yr), out) in gd.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accum(grads, val(*x), *x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.cols();
                let gv = val(*gamma).data();
                if wants(*gamma) || wants(*beta) {
                    let mut gg = vec![T::zero(); d];
                    let mut gb = vec![T::zero(); d];
                    for (gr, hr) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                            gb[j] += gr[j];
                        }
                    }
                    if wants(*gamma) {
                        accum(grads, val(*gamma), *gamma, gg);
                    }
                    if wants(*beta) {
                        accum(grads, val(*beta), *beta, gb);
                    }
                }
                if wants(*x) {
                    let n = T::of(d as f64);
                    let mut gx = vec![T::zero(); gd.len()];
                    for (r, ((gr, hr), out)) in gd.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let gh = gr[j] * gv[j];
                            m1 += gh;
                            m2 += gh * hr[j];
                        }
                        m1 /= n;
                        m2 /= n;
                        for j in 0..d {
                            out[j] = rstd[r] * (gr[j] * gv[j] - m1 - hr[j] * m2);
                        }
                    }
                    accum(grads, val(*x), *x, gx);
                }
            }
            Op::Reshape(x) => accum(grads, val(*x), *x, gd.to_vec()),
            Op::SliceRows(x, start) => {
                let xv = val(*x);
                let d = xv.cols();
                let mut gx = vec![T::zero(); xv.numel()];
                gx[start * d..start * d + gd.len()].copy_from_slice(gd);
                accum(grads, xv, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if wants(p) {
                        accum(grads, val(p), p, gd[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::SliceCols(x, start) => {
                let xv = val(*x);
                let d = xv.cols();
                let len = node.value.cols();
                let mut gx = vec![T::zero(); xv.numel()];
                for (r, gr) in gd.chunks(len).enumerate() {
                    gx[r * d + start..r * d + start + len].copy_from_slice(gr);
                }
                accum(grads, xv, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let d = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&gd[r * d + off..r * d + off + w]);
                        }
                        accum(grads, val(p), p, gp);
                    }
                    off += w;
                }
            }
            Op::Gather(table, ids) => {
                let tv = val(*table);
                let d = tv.cols();
                let mut gt = vec![T::zero(); tv.numel()];
                for (k, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += gd[k * d + j];
                    }
                }
                accum(grads, tv, *table, gt);
            }
            Op::SpaceToDepth { x, h, w, p } => {
                let xv = val(*x);
                let gx = space_to_depth_bwd(gd, *h, *w, xv.cols(), *p);
                accum(grads, xv, *x, gx);
            }
            Op::Resize(x, plan) => {
                let xv = val(*x);
                let gx = if (plan.rows.lo.len(), plan.cols.lo.len()) == plan.src {
                    gd.to_vec()
                } else {
                    resize_bwd(gd, plan, xv.cols())
                };
                accum(grads, xv, *x, gx);
            }
            Op::Sum(x) => {
                let xv = val(*x);
                accum(grads, xv, *x, vec![gd[0]; xv.numel()]);
            }
            Op::Mean(x) => {
                let xv = val(*x);
                let v = gd[0] / T::of(xv.numel() as f64);
                accum(grads, xv, *x, vec![v; xv.numel()]);
            }
            Op::MeanRows(x) => {
                let xv = val(*x);
                let n = T::of(xv.rows() as f64);
                let mut gx = Vec::with_capacity(xv.numel());
                for _ in 0..xv.rows() {
                    gx.extend(gd.iter().map(|&v| v / n));
                }
                accum(grads, xv, *x, gx);
            }
            Op::BceLogits(x, target) => {
                let xv = val(*x);
                let n = T::of(target.len() as f64);
                let gx = xv
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&l, &t)| gd[0] * (sigmoid_scalar(l) - t) / n)
                    .collect();
                accum(grads, xv, *x, gx);
            }
            Op::GradientMap(x) => {
                let xv = val(*x);
                let (h, w) = (xv.shape()[0], xv.shape()[1]);
                let m = xv.data();
                let mut gx = vec![T::zero(); m.len()];
                for i in 0..h {
                    for j in 0..w {
                        let k = i * w + j;
                        if j + 1 < w {
                            let s = sign(m[k + 1] - m[k]) * gd[k];
                            gx[k + 1] += s;
                            gx[k] -= s;
                        }
                        if i + 1 < h {
                            let s = sign(m[k + w] - m[k]) * gd[k];
                            gx[k + w] += s;
                            gx[k] -= s;
                        }
                    }
                }
                accum(grads, xv, *x, gx);
            }
        }
    }
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn accum<T: Real>(grads: &mut [Option<Tensor<T>>], like: &Tensor<T>, v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::with_shape(like.shape().to_vec(), g)),
    }
}

fn space_to_depth_fwd<T: Real>(x: &[T], h: usize, w: usize, c: usize, p: usize) -> Vec<T> {
    let (bh, bw) = (h / p, w / p);
    let width = p * p * c;
    let mut out = vec![T::zero(); bh * bw * width];
    for bi in 0..bh {
        for bj in 0..bw {
            let row = (bi * bw + bj) * width;
            for r in 0..p {
                for s in 0..p {
                    let src = ((bi * p + r) * w + bj * p + s) * c;
                    let dst = row + (r * p + s) * c;
                    out[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    out
}

fn space_to_depth_bwd<T: Real>(g: &[T], h: usize, w: usize, c: usize, p: usize) -> Vec<T> {
    let (bh, bw) = (h / p, w / p);
    let width = p * p * c;
    let mut out = vec![T::zero(); h * w * c];
    for bi in 0..bh {
        for bj in 0..bw {
            let row = (bi * bw + bj) * width;
            for r in 0..p {
                for s in 0..p {
                    let dst = ((bi * p + r) * w + bj * p + s) * c;
                    let src = row + (r * p + s) * c;
                    out[dst..dst + c].copy_from_slice(&g[src..src + c]);
                }
            }
        }
    }
    out
}

fn resize_fwd<T: Real>(x: &[T], plan: &ResizePlan<T>, c: usize) -> Vec<T> {
    let w = plan.src.1;
    let (oh, ow) = (plan.rows.lo.len(), plan.cols.lo.len());
    let mut out = vec![T::zero(); oh * ow * c];
    for y in 0..oh {
        let (y0, y1, fy) = (plan.rows.lo[y], plan.rows.hi[y], plan.rows.frac[y]);
        for xx in 0..ow {
            let (x0, x1, fx) = (plan.cols.lo[xx], plan.cols.hi[xx], plan.cols.frac[xx]);
            let w00 = (T::one() - fy) * (T::one() - fx);
            let w01 = (T::one() - fy) * fx;
            let w10 = fy * (T::one() - fx);
            let w11 = fy * fx;
            let (a, b) = ((y0 * w + x0) * c, (y0 * w + x1) * c);
            let (d, e) = ((y1 * w + x0) * c, (y1 * w + x1) * c);
            let o = (y * ow + xx) * c;
            for ch in 0..c {
                out[o + ch] = w00 * x[a + ch] + w01 * x[b + ch] + w10 * x[d + ch] + w11 * x[e + ch];
            }
        }
    }
    out
}

fn resize_bwd<T: Real>(g: &[T], plan: &ResizePlan<T>, c: usize) -> Vec<T> {
    let (h, w) = plan.src;
    let (oh, ow) = (plan.rows.lo.len(), plan.cols.lo.len());
    let mut out = vec![T::zero(); h * w * c];
    for y in 0..oh {
        let (y0, y1, fy) = (plan.rows.lo[y], plan.rows.hi[y], plan.rows.frac[y]);
        for xx in 0..ow {
            let (x0, x1, fx) = (plan.cols.lo[xx], plan.cols.hi[xx], plan.cols.frac[xx]);
            let w00 = (T::one() - fy) * (T::one() - fx);
            let w01 = (T::one() - fy) * fx;
            let w10 = fy * (T::one() - fx);
            let w11 = fy * fx;
            let o = (y * ow + xx) * c;
            for ch in 0..c {
                let gv = g[o + ch];
                out[(y0 * w + x0) * c + ch] += w00 * gv;
                out[(y0 * w + x1) * c + ch] += w01 * gv;
                out[(y1 * w + x0) * c + ch] += w10 * gv;
                out[(y1 * w + x1) * c + ch] += w11 * gv;
            }
        }
    }
    out
}

fn gradient_map_fwd<T: Real>(m: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); h * w];
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            let mut v = T::zero();
            if j + 1 < w {
                v += (m[k + 1] - m[k]).abs();
            }
            if i + 1 < h {
                v += (m[k + w] - m[k]).abs();
            }
            out[k] = v;
        }
    }
    out
}
