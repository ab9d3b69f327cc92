//! Tape-style reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in
//! topological order (an op's inputs always precede it). [`Graph::backward`]
//! walks the tape in reverse and returns gradients for every leaf that was
//! registered with `requires_grad`.
//!
//! Every forward op checks its output for NaN/Inf and fails with the op's
//! name, so a diverging optimization stops at the op that blew up.

use std::collections::BTreeMap;

use crate::conv::ConvGeom;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, Tensor};

/// Slope of the leaky ReLU used by the discriminator and generator decoder.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Batch-norm variance floor.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Exp(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sum(Var),
    Mean(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { y: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Reshape(Var),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Standardize { x: Var, eps: T, std: Vec<T> },
    PairwiseSqDist(Var, Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "subtract",
            Op::Mul(..) => "multiply",
            Op::Scale(..) => "scalar-multiply",
            Op::AddScalar(..) => "add-scalar",
            Op::Abs(..) => "abs",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Exp(..) => "exp",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky-relu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv2d-transpose",
            Op::BatchNorm { .. } => "batch-norm",
            Op::Reshape(..) => "reshape",
            Op::Narrow { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Standardize { .. } => "standardize",
            Op::PairwiseSqDist(..) => "pairwise-sq-dist",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    names: BTreeMap<String, Var>,
}

/// Gradient of a scalar output with respect to one leaf.
#[derive(Clone, Debug)]
pub struct LeafGrad<T: Element> {
    pub grad: Tensor<T>,
    /// Set when the leaf was registered without `requires_grad`; `grad` is
    /// then all zeros.
    pub detached: bool,
}

/// Result of [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    names: BTreeMap<String, Var>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for a `requires_grad` leaf; `None` for anything else.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn wrt(&self, v: Var) -> LeafGrad<T> {
        match self.get(v) {
            Some(g) => LeafGrad { grad: g.clone(), detached: false },
            None => LeafGrad { grad: Tensor::zeros(self.shapes[v.0].clone()), detached: true },
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradients of every named `requires_grad` leaf.
    pub fn named(&self) -> BTreeMap<String, Tensor<T>> {
        self.names
            .iter()
            .filter_map(|(name, &v)| self.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch { op, lhs_name: "lhs", lhs: lhs.to_vec(), rhs_name: "rhs", rhs: rhs.to_vec() }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), names: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is reported under `name` by [`Gradients::named`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>, requires_grad: bool) -> Var {
        let v = self.leaf(value, requires_grad);
        self.names.insert(name.into(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name().to_string() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op.name(), ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64v(c);
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64v(c);
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sqrt(x), |v| v.sqrt())
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn leaky_relu(&mut self, x: Var) -> Result<Var> {
        let slope = T::from_f64v(LEAKY_SLOPE);
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > T::zero() { v } else { v * slope })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum();
        let m = s / T::from_f64v(t.len() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Sum of a list of scalars, accumulated left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Option<Var>> {
        let mut iter = terms.iter().copied();
        let Some(mut acc) = iter.next() else { return Ok(None) };
        for t in iter {
            acc = self.add(acc, t)?;
        }
        Ok(Some(acc))
    }

    /// Zero same-padded convolution of `x[n, c, h, w]` with `w[o, c, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (n, c, h, wd) = self
            .value(x)
            .dims4()
            .ok_or_else(|| Error::invalid("conv2d", format!("input must be [n,c,h,w], got {:?}", self.shape(x))))?;
        let geom = self.kernel_geom("conv2d", w, c, stride, |o, k| ConvGeom::same(c, h, wd, o, k, stride))?;
        self.check_bias("conv2d", b, geom.out_c)?;

        let wt = self.value(w).data();
        let xt = self.value(x).data();
        let (ck, p, o) = (geom.patch_len(), geom.out_pixels(), geom.out_c);
        let mut out = vec![T::zero(); n * o * p];
        let mut cols = vec![T::zero(); if geom.is_pointwise() { 0 } else { ck * p }];
        for i in 0..n {
            let img = &xt[i * c * h * wd..(i + 1) * c * h * wd];
            let cols_ref: &[T] = if geom.is_pointwise() {
                img
            } else {
                geom.im2col(img, &mut cols);
                &cols
            };
            gemm(false, false, o, p, ck, wt, cols_ref, T::zero(), &mut out[i * o * p..(i + 1) * o * p]);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), p);
        }
        let value = Tensor::from_parts(vec![n, o, geom.out_h, geom.out_w], out);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(value, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Adjoint of [`Graph::conv2d`]: maps `y[n, o, h', w']` back to
    /// `[n, c, out_hw]` using the same weight layout `w[o, c, k, k]`.
    pub fn conv2d_transpose(
        &mut self,
        y: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let (n, oc, yh, yw) = self.value(y).dims4().ok_or_else(|| {
            Error::invalid("conv2d-transpose", format!("input must be [n,c,h,w], got {:?}", self.shape(y)))
        })?;
        let wshape = self.shape(w).to_vec();
        if wshape.len() != 4 {
            return Err(Error::invalid("conv2d-transpose", format!("weight must be [o,c,k,k], got {wshape:?}")));
        }
        let c = wshape[1];
        let geom = self.kernel_geom("conv2d-transpose", w, wshape[1], stride, |o, k| {
            ConvGeom::same(c, out_hw.0, out_hw.1, o, k, stride)
        })?;
        if geom.out_c != oc {
            return Err(Error::ShapeMismatch {
                op: "conv2d-transpose",
                lhs_name: "input channels",
                lhs: vec![oc],
                rhs_name: "weight out-channels",
                rhs: vec![geom.out_c],
            });
        }
        if (geom.out_h, geom.out_w) != (yh, yw) {
            return Err(Error::ShapeMismatch {
                op: "conv2d-transpose",
                lhs_name: "input spatial",
                lhs: vec![yh, yw],
                rhs_name: "spatial implied by target size",
                rhs: vec![geom.out_h, geom.out_w],
            });
        }
        self.check_bias("conv2d-transpose", b, c)?;

        let wt = self.value(w).data();
        let yt = self.value(y).data();
        let (ck, p) = (geom.patch_len(), geom.out_pixels());
        let img_len = c * geom.in_pixels();
        let mut out = vec![T::zero(); n * img_len];
        let mut cols = vec![T::zero(); ck * p];
        for i in 0..n {
            let yi = &yt[i * oc * p..(i + 1) * oc * p];
            gemm(true, false, ck, p, oc, wt, yi, T::zero(), &mut cols);
            geom.col2im(&cols, &mut out[i * img_len..(i + 1) * img_len]);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), geom.in_pixels());
        }
        let value = Tensor::from_parts(vec![n, c, out_hw.0, out_hw.1], out);
        let inputs: Vec<Var> = [Some(y), Some(w), b].into_iter().flatten().collect();
        self.push(value, Op::ConvTranspose2d { y, w, b, geom }, &inputs)
    }

    fn kernel_geom(
        &self,
        op: &'static str,
        w: Var,
        in_c: usize,
        stride: usize,
        make: impl Fn(usize, usize) -> ConvGeom,
    ) -> Result<ConvGeom> {
        let ws = self.shape(w);
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::invalid(op, format!("weight must be [o,c,k,k], got {ws:?}")));
        }
        if ws[1] != in_c {
            return Err(Error::ShapeMismatch {
                op,
                lhs_name: "input channels",
                lhs: vec![in_c],
                rhs_name: "weight in-channels",
                rhs: vec![ws[1]],
            });
        }
        if stride == 0 {
            return Err(Error::invalid(op, "stride must be >= 1"));
        }
        Ok(make(ws[0], ws[2]))
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, channels: usize) -> Result<()> {
        match b {
            Some(b) if self.shape(b) != [channels] => Err(Error::ShapeMismatch {
                op,
                lhs_name: "bias",
                lhs: self.shape(b).to_vec(),
                rhs_name: "channels",
                rhs: vec![channels],
            }),
            _ => Ok(()),
        }
    }

    /// Per-channel batch normalization with current-batch statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, c, h, w) = self
            .value(x)
            .dims4()
            .ok_or_else(|| Error::invalid("batch-norm", format!("input must be [n,c,h,w], got {:?}", self.shape(x))))?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::ShapeMismatch {
                    op: "batch-norm",
                    lhs_name: name,
                    lhs: self.shape(v).to_vec(),
                    rhs_name: "channels",
                    rhs: vec![c],
                });
            }
        }
        let hw = h * w;
        let m = (n * hw) as f64;
        let xt = self.value(x).data();
        let (gt, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xt.len()];
        let mut out = vec![T::zero(); xt.len()];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let idx = |i: usize| (i * c + ch) * hw;
            let mut mean = 0.0;
            for i in 0..n {
                mean += xt[idx(i)..idx(i) + hw].iter().map(|v| v.to_f64v()).sum::<f64>();
            }
            mean /= m;
            let mut var = 0.0;
            for i in 0..n {
                var += xt[idx(i)..idx(i) + hw].iter().map(|v| (v.to_f64v() - mean).powi(2)).sum::<f64>();
            }
            var /= m;
            let istd = 1.0 / (var + BN_EPS).sqrt();
            inv_std[ch] = T::from_f64v(istd);
            let (mean_t, istd_t) = (T::from_f64v(mean), T::from_f64v(istd));
            for i in 0..n {
                for j in idx(i)..idx(i) + hw {
                    let xh = (xt[j] - mean_t) * istd_t;
                    xhat[j] = xh;
                    out[j] = gt[ch] * xh + bt[ch];
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Elements `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of shape {shape:?}", start + len),
            ));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(Tensor::from_parts(out_shape, data), Op::Narrow { x, axis, start }, &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let ext = self.shape(p)[axis];
                data.extend_from_slice(&self.value(p).data()[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(Tensor::from_parts(shape, data), Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    /// Standardizes each row of `x[m, n]`: `(x - μ) / (σ + eps)` with the
    /// population standard deviation of that row.
    pub fn standardize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [rows, cols] = shape[..] else {
            return Err(Error::invalid("standardize", format!("input must be [m,n], got {shape:?}")));
        };
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let mut std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().map(|v| v.to_f64v()).sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v.to_f64v() - mean).powi(2)).sum::<f64>() / cols as f64;
            let sd = var.sqrt();
            std[r] = T::from_f64v(sd);
            let denom = sd + eps;
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = T::from_f64v((v.to_f64v() - mean) / denom);
            }
        }
        let op = Op::Standardize { x, eps: T::from_f64v(eps), std };
        self.push(Tensor::from_parts(shape, out), op, &[x])
    }

    /// `d[i, j] = ‖a_i − b_j‖²` for row sets `a[m, d]` and `b[n, d]`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch { op: "pairwise-sq-dist", lhs_name: "a", lhs: sa, rhs_name: "b", rhs: sb });
        }
        let (m, n, d) = (sa[0], sb[0], sa[1]);
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let ai = &ta[i * d..(i + 1) * d];
            for j in 0..n {
                let bj = &tb[j * d..(j + 1) * d];
                let mut acc = T::zero();
                for (&x, &y) in ai.iter().zip(bj) {
                    let diff = x - y;
                    acc += diff * diff;
                }
                out[i * n + j] = acc;
            }
        }
        self.push(Tensor::from_parts(vec![m, n], out), Op::PairwiseSqDist(a, b), &[a, b])
    }

    /// Sign pattern at every non-differentiable point of the tape (abs,
    /// relu, leaky-relu, sqrt inputs). Two evaluations with equal patterns
    /// lie on the same smooth piece.
    pub fn kink_pattern(&self) -> Vec<i8> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            let input = match node.op {
                Op::Abs(x) | Op::Relu(x) | Op::LeakyRelu(x, _) | Op::Sqrt(x) => x,
                _ => continue,
            };
            pattern.extend(self.nodes[input.0].value.data().iter().map(|v| {
                if *v > T::zero() {
                    1
                } else if *v < T::zero() {
                    -1
                } else {
                    0
                }
            }));
        }
        pattern
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out_shape = self.shape(output);
        if out_shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(out_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(Tensor::ones(out_shape.to_vec()));
        }
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize(self.nodes.len(), None);
        for (i, slot) in grads.iter_mut().enumerate() {
            let keep = matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].requires_grad;
            if keep && slot.is_none() {
                *slot = Some(Tensor::zeros(self.nodes[i].value.shape().to_vec()));
            } else if !keep {
                *slot = None;
            }
        }
        Ok(Gradients { grads, shapes, names: self.names.clone() })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Runs `f` on the (lazily zeroed) gradient buffer of `v`.
    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.wants(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape().to_vec()));
        f(buf.data_mut());
    }

    fn elementwise(&self, grads: &mut [Option<Tensor<T>>], x: Var, g: &[T], local: impl Fn(usize) -> T) {
        self.accumulate(grads, x, |buf| {
            for (i, (b, &gi)) in buf.iter_mut().zip(g).enumerate() {
                *b += gi * local(i);
            }
        });
    }

    fn propagate(&self, node: &Node<T>, grad: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let g = grad.data();
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let one = T::one();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.elementwise(grads, *a, g, |_| one);
                self.elementwise(grads, *b, g, |_| one);
            }
            Op::Sub(a, b) => {
                self.elementwise(grads, *a, g, |_| one);
                self.elementwise(grads, *b, g, |_| -one);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.elementwise(grads, *a, g, |i| vb[i]);
                self.elementwise(grads, *b, g, |i| va[i]);
            }
            Op::Scale(x, c) => self.elementwise(grads, *x, g, |_| *c),
            Op::AddScalar(x) | Op::Reshape(x) => self.elementwise(grads, *x, g, |_| one),
            Op::Abs(x) => {
                let vx = val(*x);
                self.elementwise(grads, *x, g, |i| {
                    if vx[i] > T::zero() {
                        one
                    } else if vx[i] < T::zero() {
                        -one
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Square(x) => {
                let vx = val(*x);
                let two = T::from_f64v(2.0);
                self.elementwise(grads, *x, g, |i| two * vx[i]);
            }
            Op::Sqrt(x) => {
                let half = T::from_f64v(0.5);
                self.elementwise(grads, *x, g, |i| if y[i] > T::zero() { half / y[i] } else { T::zero() });
            }
            Op::Exp(x) => self.elementwise(grads, *x, g, |i| y[i]),
            Op::Tanh(x) => self.elementwise(grads, *x, g, |i| one - y[i] * y[i]),
            Op::Sigmoid(x) => self.elementwise(grads, *x, g, |i| y[i] * (one - y[i])),
            Op::Relu(x) => {
                let vx = val(*x);
                self.elementwise(grads, *x, g, |i| if vx[i] > T::zero() { one } else { T::zero() });
            }
            Op::LeakyRelu(x, slope) => {
                let vx = val(*x);
                self.elementwise(grads, *x, g, |i| if vx[i] > T::zero() { one } else { *slope });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.accumulate(grads, *x, |buf| buf.iter_mut().for_each(|b| *b += g0));
            }
            Op::Mean(x) => {
                let g0 = g[0] / T::from_f64v(val(*x).len() as f64);
                self.accumulate(grads, *x, |buf| buf.iter_mut().for_each(|b| *b += g0));
            }
            Op::Conv2d { x, w, b, geom } => self.conv2d_backward(*x, *w, *b, geom, g, grads),
            Op::ConvTranspose2d { y: yin, w, b, geom } => {
                self.conv2d_transpose_backward(*yin, *w, *b, geom, g, grads)
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                self.batch_norm_backward(*x, *gamma, *beta, xhat, inv_std, g, grads)
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                let (outer, extent, inner) = split_axis(&shape, *axis);
                let len = node.value.shape()[*axis];
                self.accumulate(grads, *x, |buf| {
                    for o in 0..outer {
                        let dst = &mut buf[(o * extent + start) * inner..][..len * inner];
                        for (d, &s) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let ext = self.nodes[p.0].value.shape()[*axis];
                    self.accumulate(grads, p, |buf| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..][..ext * inner];
                            for (d, &s) in buf[o * ext * inner..(o + 1) * ext * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += ext;
                }
            }
            Op::Standardize { x, eps, std } => {
                let cols = node.value.shape()[1];
                let n = T::from_f64v(cols as f64);
                self.accumulate(grads, *x, |buf| {
                    for (r, &sd) in std.iter().enumerate() {
                        let denom = sd + *eps;
                        let gy = &g[r * cols..(r + 1) * cols];
                        let yr = &y[r * cols..(r + 1) * cols];
                        let g_mean = gy.iter().copied().sum::<T>() / n;
                        // y = c / denom with c = x − μ, so c = y·denom.
                        let g_dot_c: T = gy.iter().zip(yr).map(|(&a, &b)| a * b * denom).sum();
                        let d_denom = -g_dot_c / (denom * denom);
                        let coef = if sd > T::zero() { d_denom / (n * sd) } else { T::zero() };
                        for ((b, &gi), &yi) in buf[r * cols..(r + 1) * cols].iter_mut().zip(gy).zip(yr) {
                            *b += (gi - g_mean) / denom + coef * yi * denom;
                        }
                    }
                });
            }
            Op::PairwiseSqDist(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let d = self.nodes[a.0].value.shape()[1];
                let two = T::from_f64v(2.0);
                self.accumulate(grads, *a, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = two * g[i * n + j];
                            for k in 0..d {
                                buf[i * d + k] += gij * (va[i * d + k] - vb[j * d + k]);
                            }
                        }
                    }
                });
                self.accumulate(grads, *b, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = two * g[i * n + j];
                            for k in 0..d {
                                buf[j * d + k] -= gij * (va[i * d + k] - vb[j * d + k]);
                            }
                        }
                    }
                });
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        g: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xt = self.nodes[x.0].value.data();
        let wt = self.nodes[w.0].value.data();
        let (ck, p, o) = (geom.patch_len(), geom.out_pixels(), geom.out_c);
        let img_len = geom.in_c * geom.in_pixels();
        let n = xt.len() / img_len;
        let mut cols = vec![T::zero(); ck * p];
        if let Some(b) = b {
            self.accumulate(grads, b, |buf| accumulate_channel_sums(buf, g, p));
        }
        if self.wants(w) {
            self.accumulate(grads, w, |buf| {
                for i in 0..n {
                    let img = &xt[i * img_len..(i + 1) * img_len];
                    let cols_ref: &[T] = if geom.is_pointwise() {
                        img
                    } else {
                        geom.im2col(img, &mut cols);
                        &cols
                    };
                    gemm(false, true, o, ck, p, &g[i * o * p..(i + 1) * o * p], cols_ref, T::one(), buf);
                }
            });
        }
        if self.wants(x) {
            self.accumulate(grads, x, |buf| {
                for i in 0..n {
                    let gi = &g[i * o * p..(i + 1) * o * p];
                    let dst = &mut buf[i * img_len..(i + 1) * img_len];
                    if geom.is_pointwise() {
                        gemm(true, false, ck, p, o, wt, gi, T::one(), dst);
                    } else {
                        gemm(true, false, ck, p, o, wt, gi, T::zero(), &mut cols);
                        geom.col2im(&cols, dst);
                    }
                }
            });
        }
    }

    fn conv2d_transpose_backward(
        &self,
        y: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        g: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let yt = self.nodes[y.0].value.data();
        let wt = self.nodes[w.0].value.data();
        let (ck, p, o) = (geom.patch_len(), geom.out_pixels(), geom.out_c);
        let img_len = geom.in_c * geom.in_pixels();
        let n = g.len() / img_len;
        if let Some(b) = b {
            self.accumulate(grads, b, |buf| accumulate_channel_sums(buf, g, geom.in_pixels()));
        }
        if !self.wants(w) && !self.wants(y) {
            return;
        }
        let mut all_cols = Vec::with_capacity(n);
        for i in 0..n {
            let mut cols = vec![T::zero(); ck * p];
            geom.im2col(&g[i * img_len..(i + 1) * img_len], &mut cols);
            all_cols.push(cols);
        }
        self.accumulate(grads, w, |buf| {
            for (i, cols) in all_cols.iter().enumerate() {
                gemm(false, true, o, ck, p, &yt[i * o * p..(i + 1) * o * p], cols, T::one(), buf);
            }
        });
        self.accumulate(grads, y, |buf| {
            for (i, cols) in all_cols.iter().enumerate() {
                gemm(false, false, o, p, ck, wt, cols, T::one(), &mut buf[i * o * p..(i + 1) * o * p]);
            }
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[T],
        inv_std: &[T],
        g: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let shape = self.nodes[x.0].value.shape();
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let m = T::from_f64v((n * hw) as f64);
        let gt = self.nodes[gamma.0].value.data();
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    sum_g[ch] += g[j];
                    sum_gx[ch] += g[j] * xhat[j];
                }
            }
        }
        self.accumulate(grads, gamma, |buf| buf.iter_mut().zip(&sum_gx).for_each(|(b, &s)| *b += s));
        self.accumulate(grads, beta, |buf| buf.iter_mut().zip(&sum_g).for_each(|(b, &s)| *b += s));
        self.accumulate(grads, x, |buf| {
            for i in 0..n {
                for ch in 0..c {
                    let k = gt[ch] * inv_std[ch] / m;
                    let base = (i * c + ch) * hw;
                    for j in base..base + hw {
                        buf[j] += k * (m * g[j] - sum_g[ch] - xhat[j] * sum_gx[ch]);
                    }
                }
            }
        });
    }
}

fn add_channel_bias<T: Element>(out: &mut [T], bias: &[T], pixels: usize) {
    let c = bias.len();
    for (chunk_idx, chunk) in out.chunks_mut(pixels).enumerate() {
        let b = bias[chunk_idx % c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn accumulate_channel_sums<T: Element>(buf: &mut [T], g: &[T], pixels: usize) {
    let c = buf.len();
    for (chunk_idx, chunk) in g.chunks(pixels).enumerate() {
        buf[chunk_idx % c] += chunk.iter().copied().sum::<T>();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_pointwise_conv() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn([1, 1, 3, 4], |i| i as f64 * 0.5 - 1.0));
        let w = g.constant(Tensor::ones([1, 1, 1, 1]));
        let y = g.conv2d(x, w, None, 1).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn box_filter_center_is_one() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones([1, 1, 3, 3]));
        let w = g.constant(Tensor::full([1, 1, 3, 3], 1.0 / 9.0));
        let y = g.conv2d(x, w, None, 1).unwrap();
        // Oracle: direct 3x3 sum over the fully interior window.
        let direct: f64 = (0..9).map(|_| 1.0 / 9.0).sum();
        assert!((g.value(y).data()[4] - direct).abs() < 1e-15);
        assert!((direct - 1.0).abs() < 1e-15);
        // Corner sees 4 of 9 taps under zero padding.
        assert!((g.value(y).data()[0] - 4.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn leaky_relu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[-1.0, 2.0]));
        let y = g.leaky_relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[-0.2, 2.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn([2, 3, 2], |i| i as f64), true);
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mse_gradient_closed_form() {
        let mut g = Graph::<f64>::new();
        let xv = t(&[4], &[0.5, -1.0, 2.0, 3.0]);
        let tv = t(&[4], &[1.0, 1.0, 1.0, 1.0]);
        let x = g.leaf(xv.clone(), true);
        let target = g.constant(tv.clone());
        let d = g.sub(x, target).unwrap();
        let sq = g.square(d).unwrap();
        let loss = g.mean(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        for i in 0..4 {
            let expected = 2.0 * (xv.data()[i] - tv.data()[i]) / 4.0;
            assert!((grads.get(x).unwrap().data()[i] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros([2]), true);
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn detached_leaf_gets_flagged_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones([3]), true);
        let c = g.constant(Tensor::ones([3]));
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        let lg = grads.wrt(c);
        assert!(lg.detached);
        assert!(lg.grad.data().iter().all(|&v| v == 0.0));
        assert!(!grads.wrt(x).detached);
    }

    #[test]
    fn shape_mismatch_names_dimensions() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([3, 2]));
        let err = g.add(a, b).unwrap_err();
        assert!(err.to_string().contains("[2, 3]"), "{err}");
        let x = g.constant(Tensor::zeros([1, 3, 4, 4]));
        let w = g.constant(Tensor::zeros([8, 2, 3, 3]));
        let err = g.conv2d(x, w, None, 1).unwrap_err();
        assert!(err.to_string().contains("weight in-channels"), "{err}");
    }

    #[test]
    fn non_finite_output_names_op() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1], &[1000.0]));
        let err = g.exp(x).unwrap_err();
        assert_eq!(err.to_string(), "exp: produced a non-finite value");
    }

    #[test]
    fn abs_subgradient_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[-2.0, 0.0, 3.0]), true);
        let a = g.abs(x).unwrap();
        let s = g.sum(a).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn stride_two_output_shape() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([1, 3, 7, 8]));
        let w = g.constant(Tensor::zeros([5, 3, 3, 3]));
        let y = g.conv2d(x, w, None, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 5, 4, 4]);
        let back = g.conv2d_transpose(y, w, None, 2, (7, 8)).unwrap();
        assert_eq!(g.shape(back), &[1, 3, 7, 8]);
        assert!(g.conv2d_transpose(y, w, None, 2, (9, 8)).is_err());
    }

    #[test]
    fn narrow_and_concat_round_trip() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn([1, 4, 2, 2], |i| i as f64));
        let parts: Vec<Var> = (0..4).map(|c| g.narrow(x, 1, c, 1).unwrap()).collect();
        let back = g.concat(&parts, 1).unwrap();
        assert!(g.value(back).bit_eq(g.value(x)));
    }
}
