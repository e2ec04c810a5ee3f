//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. Nodes whose
//! inputs track gradients also record the rule needed to push an upstream
//! gradient back to those inputs. [`Tape::backward`] walks the tape once in
//! reverse and returns the gradients of the leaves that asked for them.

use std::collections::HashMap;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        padding: usize,
        cols: Vec<f64>,
    },
    AvgPool2(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    SumAll(Var),
    SumAxis(Var, usize),
    IndexRows(Var, Vec<usize>),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SquaredError {
        pred: Var,
        target: Vec<f64>,
    },
    SumSquares(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of the tracked leaves, keyed by the leaf's [`Var`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(&v).map(Vec::as_slice)
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.remove(&v)
    }

    /// Move the gradient of each bound leaf into the matching tensor's `grad`.
    pub fn write_into(&mut self, vars: &[Var], tensors: &mut [Tensor]) {
        for (v, t) in vars.iter().zip(tensors.iter_mut()) {
            if t.requires_grad {
                t.grad = self.take(*v);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Records primitive operations for a single forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

#[inline(always)]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (xs, ys) in xc.zip(yc) {
        for j in 0..8 {
            acc[j] += xs[j] * ys[j];
        }
    }
    acc.iter().sum::<f64>() + tail
}

#[inline(always)]
fn matvec_body(m: usize, k: usize, a: &[f64], a_t: bool, v: &[f64], c: &mut [f64]) {
    if a_t {
        for (row, &vi) in a.chunks_exact(m).zip(v) {
            c.iter_mut().zip(row).for_each(|(o, x)| *o += vi * x);
        }
    } else {
        for (o, row) in c.iter_mut().zip(a.chunks_exact(k)) {
            *o += dot(row, v);
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn matvec_avx2(m: usize, k: usize, a: &[f64], a_t: bool, v: &[f64], c: &mut [f64]) {
    matvec_body(m, k, a, a_t, v, c)
}

/// `c (+)= A v` for `A` logically `(m, k)`, stored `(k, m)` when `a_t`.
/// Both code paths perform the same operations in the same order.
fn matvec(m: usize, k: usize, a: &[f64], a_t: bool, v: &[f64], c: &mut [f64], accumulate: bool) {
    if !accumulate {
        c.iter_mut().for_each(|x| *x = 0.0);
    }
    #[cfg(target_arch = "x86_64")]
    if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { matvec_avx2(m, k, a, a_t, v, c) };
        return;
    }
    matvec_body(m, k, a, a_t, v, c)
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    // a is logically (m,k); stored (k,m) when a_t. Same for b with (k,n).
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    if n == 1 {
        // b is a contiguous length-k vector in either layout.
        matvec(m, k, a, a_t, &b[..k], c, accumulate);
        return;
    }
    // SAFETY: slice lengths are checked by the callers against (m,k),(k,n),(m,n)
    // and the strides above describe those layouts exactly.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gather `src` (with `shape`) into the axis order `axes`. When `inverse` is
/// set, scatter instead, undoing the permutation.
fn permute_data(src: &[f64], shape: &[usize], axes: &[usize], inverse: bool) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut out = vec![0.0; src.len()];
    let nd = shape.len();
    let mut idx = vec![0usize; nd];
    for o in 0..src.len() {
        let off: usize = (0..nd).map(|d| idx[d] * in_strides[axes[d]]).sum();
        if inverse {
            out[off] = src[o];
        } else {
            out[o] = src[off];
        }
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, pad: usize, col: &mut [f64]) {
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    let mut r = 0;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut col[r * oh * ow..(r + 1) * oh * ow];
                for y in 0..oh {
                    let iy = y as isize + ki as isize - pad as isize;
                    let dst = &mut row[y * ow..(y + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &x[ci * h * w + iy as usize * w..ci * h * w + (iy as usize + 1) * w];
                    for (xo, d) in dst.iter_mut().enumerate() {
                        let ix = xo as isize + kj as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                r += 1;
            }
        }
    }
}

fn col2im(col: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, pad: usize, dx: &mut [f64]) {
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    let mut r = 0;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &col[r * oh * ow..(r + 1) * oh * ow];
                for y in 0..oh {
                    let iy = y as isize + ki as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ci * h * w + iy as usize * w;
                    for xo in 0..ow {
                        let ix = xo as isize + kj as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += row[y * ow + xo];
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.consumed {
            self.consumed = false;
        }
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Record `t` as a leaf, sharing its storage. Tracks gradients iff
    /// `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut value = t.reshape(t.shape()).expect("same shape");
        value.requires_grad = t.requires_grad;
        self.push(value, Op::Leaf, t.requires_grad)
    }

    /// Record an owned constant that never tracks gradients.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Broadcast-add a row vector of length `n` (shape `[n]` or `[1, n]`) to
    /// every row of an `(m, n)` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        let n = *sa.last().unwrap_or(&0);
        let ok = sa.len() == 2 && sr.iter().product::<usize>() == n && (sr.len() == 1 || (sr.len() == 2 && sr[0] == 1));
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: sa.to_vec(),
                rhs: sr.to_vec(),
            });
        }
        let r = self.data(row);
        let out: Vec<f64> = self
            .data(a)
            .chunks(n)
            .flat_map(|c| c.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::new(sa.to_vec(), out)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(t, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.data(a).iter().map(|x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    /// Stride-1 2-D convolution (cross-correlation) with symmetric zero
    /// padding. `input` is `(B, C, H, W)`, `kernel` is `(O, C, KH, KW)`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, padding: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] || sx[2] + 2 * padding < sk[2] || sx[3] + 2 * padding < sk[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sk,
            });
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sk[0], sk[2], sk[3]);
        let (oh, ow) = (h + 2 * padding + 1 - kh, w + 2 * padding + 1 - kw);
        let ckk = c * kh * kw;
        let plane = oh * ow;
        let mut cols = vec![0.0; b * ckk * plane];
        let mut out = vec![0.0; b * o * plane];
        let xd = self.data(input);
        let kd = self.data(kernel);
        for bi in 0..b {
            let col = &mut cols[bi * ckk * plane..(bi + 1) * ckk * plane];
            im2col(&xd[bi * c * h * w..(bi + 1) * c * h * w], c, h, w, kh, kw, padding, col);
            gemm(o, ckk, plane, kd, false, col, false, &mut out[bi * o * plane..(bi + 1) * o * plane], false);
        }
        let rg = self.rg(&[input, kernel]);
        let t = Tensor::new(vec![b, o, oh, ow], out)?;
        let cols = if self.nodes[kernel.0].requires_grad { cols } else { Vec::new() };
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                kernel,
                padding,
                cols,
            },
            rg,
        ))
    }

    /// 2x2 average pooling with stride 2 over the last two axes of a 4-D input.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(invalid("avg_pool2", format!("needs 4-D input with even spatial dims, got {s:?}")));
        }
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let x = self.data(a);
        let mut out = vec![0.0; bc * oh * ow];
        for p in 0..bc {
            let src = &x[p * h * w..];
            for y in 0..oh {
                for xo in 0..ow {
                    let i = 2 * y * w + 2 * xo;
                    out[p * oh * ow + y * ow + xo] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let t = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::AvgPool2(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Reorder axes: output axis `d` is input axis `axes[d]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&x| x >= s.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(invalid("permute", format!("axes {axes:?} do not permute shape {s:?}")));
        }
        let data = permute_data(self.data(a), &s, axes, false);
        let shape = axes.iter().map(|&x| s[x]).collect();
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Permute(a, axes.to_vec()), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(invalid("transpose", format!("needs 2-D input, got {:?}", self.shape(a))));
        }
        self.permute(a, &[1, 0])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.data(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(invalid("sum_axis", format!("axis {axis} out of range for {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let len = s[axis];
        let x = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        let mut shape = s.clone();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::SumAxis(a, axis), rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| invalid("mean_axis", format!("axis {axis} out of range")))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / len.max(1) as f64))
    }

    /// Gather rows of the leading axis.
    pub fn index_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let rows = *self.shape(a).first().unwrap_or(&0);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(invalid("index_rows", format!("row {bad} out of range for {} rows", rows)));
        }
        let t = self.value(a).select_rows(idx);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::IndexRows(a, idx.to_vec()), rg))
    }

    /// Mean softmax cross-entropy of `(B, K)` logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(invalid("softmax_cross_entropy", format!("label {bad} out of range for {k} classes")));
        }
        let x = self.data(logits);
        let mut probs = vec![0.0; x.len()];
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = &x[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for (p, v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - m).exp() / z;
            }
            loss += m + z.ln() - row[l];
        }
        let b = labels.len().max(1) as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / b),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean of `(pred - target)^2` over all elements.
    pub fn squared_error(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        if self.data(pred).len() != target.len() {
            return Err(Error::ShapeMismatch {
                op: "squared_error",
                lhs: self.shape(pred).to_vec(),
                rhs: vec![target.len()],
            });
        }
        let n = target.len().max(1) as f64;
        let l: f64 = self.data(pred).iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(l),
            Op::SquaredError {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_squares();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumSquares(a), rg)
    }

    /// Propagate d(root)/d(node) back through the tape and return the
    /// gradients of every leaf that tracks gradients. The tape is cleared.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let rs = self.shape(root);
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::NonScalarRoot(rs.to_vec()));
        }
        let nodes = std::mem::take(&mut self.nodes);
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            backprop(&nodes, i, g, &mut grads, &mut out);
        }
        Ok(out)
    }
}

fn acc(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
    f(slot);
}

fn backprop(nodes: &[Node], i: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>], out: &mut Gradients) {
    let node = &nodes[i];
    let val = |v: Var| nodes[v.0].value.data();
    let shp = |v: Var| nodes[v.0].value.shape();
    match &node.op {
        Op::Leaf => {
            out.grads.insert(Var(i), g);
        }
        Op::MatMul(a, b) => {
            let (m, k) = (shp(*a)[0], shp(*a)[1]);
            let n = shp(*b)[1];
            acc(nodes, grads, *a, |ga| gemm(m, n, k, &g, false, val(*b), true, ga, true));
            acc(nodes, grads, *b, |gb| gemm(k, m, n, val(*a), true, &g, false, gb, true));
        }
        Op::Add(a, b) => {
            acc(nodes, grads, *a, |ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
            acc(nodes, grads, *b, |gb| gb.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, |ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
            acc(nodes, grads, *b, |gb| gb.iter_mut().zip(&g).for_each(|(x, y)| *x -= y));
        }
        Op::AddRow(a, row) => {
            acc(nodes, grads, *a, |ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
            let n = nodes[row.0].value.numel();
            acc(nodes, grads, *row, |gr| {
                for chunk in g.chunks(n) {
                    gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                }
            });
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            acc(nodes, grads, *a, |ga| {
                for ((x, gi), bi) in ga.iter_mut().zip(&g).zip(vb) {
                    *x += gi * bi;
                }
            });
            acc(nodes, grads, *b, |gb| {
                for ((x, gi), ai) in gb.iter_mut().zip(&g).zip(va) {
                    *x += gi * ai;
                }
            });
        }
        Op::Scale(a, c) => {
            acc(nodes, grads, *a, |ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += c * y));
        }
        Op::Relu(a) => {
            let va = val(*a);
            acc(nodes, grads, *a, |ga| {
                for ((x, gi), ai) in ga.iter_mut().zip(&g).zip(va) {
                    if *ai > 0.0 {
                        *x += gi;
                    }
                }
            });
        }
        Op::Conv2d {
            input,
            kernel,
            padding,
            cols,
        } => {
            let sx = shp(*input).to_vec();
            let sk = shp(*kernel).to_vec();
            let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
            let (o, kh, kw) = (sk[0], sk[2], sk[3]);
            let so = node.value.shape();
            let plane = so[2] * so[3];
            let ckk = c * kh * kw;
            let kd = val(*kernel);
            acc(nodes, grads, *kernel, |gk| {
                for bi in 0..b {
                    let gy = &g[bi * o * plane..(bi + 1) * o * plane];
                    let col = &cols[bi * ckk * plane..(bi + 1) * ckk * plane];
                    gemm(o, plane, ckk, gy, false, col, true, gk, true);
                }
            });
            acc(nodes, grads, *input, |gx| {
                let mut dcol = vec![0.0; ckk * plane];
                for bi in 0..b {
                    let gy = &g[bi * o * plane..(bi + 1) * o * plane];
                    gemm(ckk, o, plane, kd, true, gy, false, &mut dcol, false);
                    col2im(&dcol, c, h, w, kh, kw, *padding, &mut gx[bi * c * h * w..(bi + 1) * c * h * w]);
                }
            });
        }
        Op::AvgPool2(a) => {
            let s = shp(*a).to_vec();
            let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
            let (oh, ow) = (h / 2, w / 2);
            acc(nodes, grads, *a, |ga| {
                for p in 0..bc {
                    for y in 0..oh {
                        for xo in 0..ow {
                            let gv = 0.25 * g[p * oh * ow + y * ow + xo];
                            let i = p * h * w + 2 * y * w + 2 * xo;
                            ga[i] += gv;
                            ga[i + 1] += gv;
                            ga[i + w] += gv;
                            ga[i + w + 1] += gv;
                        }
                    }
                }
            });
        }
        Op::Reshape(a) => {
            acc(nodes, grads, *a, |ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
        }
        Op::Permute(a, axes) => {
            let back = permute_data(&g, shp(*a), axes, true);
            acc(nodes, grads, *a, |ga| ga.iter_mut().zip(&back).for_each(|(x, y)| *x += y));
        }
        Op::SumAll(a) => {
            let gv = g[0];
            acc(nodes, grads, *a, |ga| ga.iter_mut().for_each(|x| *x += gv));
        }
        Op::SumAxis(a, axis) => {
            let s = shp(*a);
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let len = s[*axis];
            acc(nodes, grads, *a, |ga| {
                for o in 0..outer {
                    for l in 0..len {
                        let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                        dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]).for_each(|(x, y)| *x += y);
                    }
                }
            });
        }
        Op::IndexRows(a, idx) => {
            let row: usize = shp(*a)[1..].iter().product();
            acc(nodes, grads, *a, |ga| {
                for (k, &r) in idx.iter().enumerate() {
                    let dst = &mut ga[r * row..(r + 1) * row];
                    dst.iter_mut().zip(&g[k * row..(k + 1) * row]).for_each(|(x, y)| *x += y);
                }
            });
        }
        Op::SoftmaxCrossEntropy { logits, labels, probs } => {
            let k = shp(*logits)[1];
            let scale = g[0] / labels.len().max(1) as f64;
            acc(nodes, grads, *logits, |gl| {
                for (i, &l) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == l { 1.0 } else { 0.0 };
                        gl[i * k + j] += scale * (probs[i * k + j] - onehot);
                    }
                }
            });
        }
        Op::SquaredError { pred, target } => {
            let n = target.len().max(1) as f64;
            let c = 2.0 * g[0] / n;
            let vp = val(*pred);
            acc(nodes, grads, *pred, |gp| {
                for ((x, p), t) in gp.iter_mut().zip(vp).zip(target) {
                    *x += c * (p - t);
                }
            });
        }
        Op::SumSquares(a) => {
            let c = 2.0 * g[0];
            let va = val(*a);
            acc(nodes, grads, *a, |ga| ga.iter_mut().zip(va).for_each(|(x, v)| *x += c * v));
        }
    }
}
