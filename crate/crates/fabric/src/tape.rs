//! Reverse-mode differentiation over a linear tape of tensor operations.

use std::rc::Rc;

use rustfft::num_complex::Complex;
use vah_core::signal::StftPlan;

use crate::conv::{conv_out_len, conv_transpose_out_len, Frames};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a custom op: given the input values, the output value and
/// the output gradient, returns one optional gradient per input.
pub type BackwardFn<S> = Box<dyn Fn(&[&Tensor<S>], &Tensor<S>, &[S]) -> Vec<Option<Vec<S>>>>;

enum Op<S: Scalar> {
    Input,
    Const,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    /// `x` viewed as `[outer, channels, inner]` plus `b[channels]`.
    AddBias {
        x: Var,
        b: Var,
        inner: usize,
    },
    /// Keeps `tanh` of the inner polynomial for the backward pass.
    Gelu {
        x: Var,
        tanh: Vec<S>,
    },
    Softplus(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        frames: Frames,
        cols: Vec<S>,
    },
    ConvT {
        x: Var,
        w: Var,
        b: Option<Var>,
        frames: Frames,
    },
    StftMag {
        x: Var,
        plan: StftPlan<S>,
        spec: Vec<Complex<S>>,
    },
    MaskedIstft {
        mask: Var,
        plan: StftPlan<S>,
        spec: Rc<Vec<Complex<S>>>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: BackwardFn<S>,
    },
}

impl<S: Scalar> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Const => "const",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias { .. } => "bias",
            Op::Gelu { .. } => "gelu",
            Op::Softplus(_) => "softplus",
            Op::Abs(_) => "abs",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MatMul { .. } => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Conv { .. } => "conv",
            Op::ConvT { .. } => "conv_transpose",
            Op::StftMag { .. } => "stft_magnitude",
            Op::MaskedIstft { .. } => "masked_istft",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    scope: usize,
}

/// Records tensor operations for one forward pass.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    scopes: Vec<String>,
    stack: Vec<String>,
    current: usize,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Derivative of the tanh-form GELU given `t = tanh(c (x + a x³))`.
fn gelu_grad<S: Scalar>(x: S, t: S) -> S {
    let half = S::lit(0.5);
    let c = S::lit(SQRT_2_OVER_PI);
    let a = S::lit(GELU_CUBIC);
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::lit(3.0) * a * x * x)
}

fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn dims2(t: &Tensor<impl Scalar>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Shape(format!("{what} expects a matrix, got {other:?}"))),
    }
}

fn dims3(t: &Tensor<impl Scalar>, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, n, b] => Ok((*c, *n, *b)),
        other => Err(Error::Shape(format!("{what} expects [channels, length, batch], got {other:?}"))),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), scopes: vec![String::new()], stack: Vec::new(), current: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Pushes a name onto the label stack used in diagnostics.
    pub fn enter(&mut self, name: &str) {
        self.stack.push(name.to_string());
        self.scopes.push(self.stack.join("/"));
        self.current = self.scopes.len() - 1;
    }

    pub fn exit(&mut self) {
        self.stack.pop();
        self.scopes.push(self.stack.join("/"));
        self.current = self.scopes.len() - 1;
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op, scope: self.current });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Label of the first node holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().find(|n| !n.value.is_finite()).map(|n| {
            let scope = &self.scopes[n.scope];
            let scope = if scope.is_empty() { "<root>" } else { scope };
            format!("{scope}/{} {:?}", n.op.name(), n.value.shape())
        })
    }

    /// A leaf whose gradient is recorded.
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Input)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Const)
    }

    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (x, y) = (self.value(a), self.value(b));
        Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect()).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(S) -> S) -> Tensor<S> {
        let x = self.value(a);
        Tensor::new(x.shape(), x.data().iter().map(|p| f(*p)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_with(a, b, |p, q| p + q);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_with(a, b, |p, q| p - q);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_with(a, b, |p, q| p * q);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: S) -> Var {
        let v = self.map(a, |p| p * k);
        self.push(v, Op::Scale(a, k))
    }

    /// Adds `b[c]` along axis `axis` of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let channels =
            *shape.get(axis).ok_or_else(|| Error::Shape(format!("bias axis {axis} out of range for {shape:?}")))?;
        if self.value(b).numel() != channels {
            return Err(Error::Shape(format!("bias of {} for {channels} channels", self.value(b).numel())));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let bias = self.value(b).data();
        let data = self.value(x).data().iter().enumerate().map(|(i, v)| *v + bias[(i / inner) % channels]).collect();
        let v = Tensor::new(&shape, data)?;
        Ok(self.push(v, Op::AddBias { x, b, inner }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let c = S::lit(SQRT_2_OVER_PI);
        let a = S::lit(GELU_CUBIC);
        let xs = self.value(x);
        let tanh: Vec<S> = xs.data().iter().map(|v| (c * (*v + a * *v * *v * *v)).tanh()).collect();
        let half = S::lit(0.5);
        let out = xs.data().iter().zip(&tanh).map(|(v, t)| half * *v * (S::one() + *t)).collect();
        let v = Tensor::new(xs.shape(), out).expect("same shape");
        self.push(v, Op::Gelu { x, tanh })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.map(x, softplus);
        self.push(v, Op::Softplus(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.map(x, |p| p.abs());
        self.push(v, Op::Abs(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: S = t.data().iter().copied().sum();
        let n = S::from(t.numel()).expect("count fits");
        self.push(Tensor::scalar(s / n), Op::Mean(x))
    }

    /// Matrix product with optional transposition of either operand.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = dims2(self.value(a), "matmul")?;
        let (br, bc) = dims2(self.value(b), "matmul")?;
        let av = MatRef::new(self.value(a).data(), ar, ac).maybe_t(ta);
        let bv = MatRef::new(self.value(b).data(), br, bc).maybe_t(tb);
        if av.cols != bv.rows {
            return Err(Error::Shape(format!("matmul inner dimensions {} and {} differ", av.cols, bv.rows)));
        }
        let mut out = vec![S::zero(); av.rows * bv.cols];
        gemm(av, bv, &mut out, false);
        let v = Tensor::new(&[av.rows, bv.cols], out)?;
        Ok(self.push(v, Op::MatMul { a, b, ta, tb }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "transpose")?;
        let d = self.value(x).data();
        let data = (0..r * c).map(|i| d[(i % r) * c + i / r]).collect();
        let v = Tensor::new(&[c, r], data)?;
        Ok(self.push(v, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape(x))));
        }
        let v = self.value(x).clone().reshaped(shape);
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// Softmax over the last axis of a matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "softmax")?;
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(r * c);
        for row in d.chunks(c) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let start = out.len();
            let mut total = S::zero();
            for v in row {
                let e = (*v - max).exp();
                total = total + e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e = *e / total);
        }
        let v = Tensor::new(&[r, c], out)?;
        Ok(self.push(v, Op::Softmax(x)))
    }

    /// Normalises each row of a matrix, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "layer_norm")?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Shape(format!("layer_norm affine parameters must have {c} entries")));
        }
        let n = S::from(c).expect("width fits");
        let eps = S::lit(eps);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(r * c);
        let mut rstd = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(x).data().chunks(c) {
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<S>() / n;
            let rs = S::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, v) in row.iter().enumerate() {
                let h = (*v - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let v = Tensor::new(&[r, c], out)?;
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// Contiguous range `start..start + len` along `axis` of a matrix.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "slice")?;
        let d = self.value(x).data();
        let v = match axis {
            0 if start + len <= r => Tensor::new(&[len, c], d[start * c..(start + len) * c].to_vec())?,
            1 if start + len <= c => {
                Tensor::new(&[r, len], d.chunks(c).flat_map(|row| row[start..start + len].iter().copied()).collect())?
            }
            _ => return Err(Error::Shape(format!("slice {start}+{len} on axis {axis} of [{r}, {c}]"))),
        };
        Ok(self.push(v, Op::Slice { x, axis, start }))
    }

    /// Joins matrices along `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::Shape("concat needs at least one matrix and axis 0 or 1".into()));
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|p| dims2(self.value(*p), "concat")).collect::<Result<_>>()?;
        let v = if axis == 0 {
            let c = dims[0].1;
            if dims.iter().any(|d| d.1 != c) {
                return Err(Error::Shape("concat along rows needs equal widths".into()));
            }
            let data: Vec<S> = parts.iter().flat_map(|p| self.value(*p).data().iter().copied()).collect();
            Tensor::new(&[dims.iter().map(|d| d.0).sum(), c], data)?
        } else {
            let r = dims[0].0;
            if dims.iter().any(|d| d.0 != r) {
                return Err(Error::Shape("concat along columns needs equal heights".into()));
            }
            let width: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r * width);
            for i in 0..r {
                for (p, d) in parts.iter().zip(&dims) {
                    data.extend_from_slice(&self.value(*p).data()[i * d.1..(i + 1) * d.1]);
                }
            }
            Tensor::new(&[r, width], data)?
        };
        Ok(self.push(v, Op::Concat { parts: parts.to_vec(), axis }))
    }

    /// Strided cross-correlation along axis 1 of `x: [c_in, n, batch]` with
    /// `w: [c_out, c_in, k]` and zero padding.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (cin, n, batch) = dims3(self.value(x), "conv")?;
        let (cout, wcin, kernel) = dims3(self.value(w), "conv weight")?;
        if wcin != cin {
            return Err(Error::Shape(format!("conv weight expects {wcin} input channels, got {cin}")));
        }
        let short = conv_out_len(n, kernel, stride, pad)?;
        let frames = Frames { channels: cin, long: n, short, batch, kernel, stride, pad };
        let cols = frames.im2col(self.value(x).data());
        let mut out = vec![S::zero(); cout * short * batch];
        gemm(
            MatRef::new(self.value(w).data(), cout, cin * kernel),
            MatRef::new(&cols, cin * kernel, short * batch),
            &mut out,
            false,
        );
        if let Some(b) = b {
            self.bias_in_place(&mut out, b, cout)?;
        }
        let v = Tensor::new(&[cout, short, batch], out)?;
        Ok(self.push(v, Op::Conv { x, w, b, frames, cols }))
    }

    /// Transposed counterpart of [`Tape::conv`] with `w: [c_in, c_out, k]`.
    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (cin, n, batch) = dims3(self.value(x), "conv_transpose")?;
        let (wcin, cout, kernel) = dims3(self.value(w), "conv_transpose weight")?;
        if wcin != cin {
            return Err(Error::Shape(format!("conv_transpose weight expects {wcin} input channels, got {cin}")));
        }
        let long = conv_transpose_out_len(n, kernel, stride, pad)?;
        let frames = Frames { channels: cout, long, short: n, batch, kernel, stride, pad };
        let mut cols = vec![S::zero(); cout * kernel * n * batch];
        gemm(
            MatRef::new(self.value(w).data(), cin, cout * kernel).t(),
            MatRef::new(self.value(x).data(), cin, n * batch),
            &mut cols,
            false,
        );
        let mut out = vec![S::zero(); cout * long * batch];
        frames.col2im(&cols, &mut out);
        if let Some(b) = b {
            self.bias_in_place(&mut out, b, cout)?;
        }
        let v = Tensor::new(&[cout, long, batch], out)?;
        Ok(self.push(v, Op::ConvT { x, w, b, frames }))
    }

    fn bias_in_place(&self, out: &mut [S], b: Var, channels: usize) -> Result<()> {
        let bias = self.value(b).data();
        if bias.len() != channels {
            return Err(Error::Shape(format!("bias of {} for {channels} channels", bias.len())));
        }
        let inner = out.len() / channels;
        for (c, chunk) in out.chunks_mut(inner).enumerate() {
            chunk.iter_mut().for_each(|v| *v = *v + bias[c]);
        }
        Ok(())
    }

    /// `|STFT(x)|` of a 1-D signal, shaped `[bins, frames]`.
    pub fn stft_magnitude(&mut self, x: Var, plan: &StftPlan<S>) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 1 || t.numel() == 0 {
            return Err(Error::Shape(format!("stft_magnitude expects a nonempty vector, got {:?}", t.shape())));
        }
        let len = t.numel();
        let spec = plan.forward(t.data());
        let mag = spec.iter().map(|c| c.norm()).collect();
        let v = Tensor::new(&[plan.bins(), plan.frames(len)], mag)?;
        Ok(self.push(v, Op::StftMag { x, plan: plan.clone(), spec }))
    }

    /// Inverse STFT of `mask ⊙ spec` for a fixed complex `spec`.
    pub fn masked_istft(
        &mut self,
        mask: Var,
        spec: Rc<Vec<Complex<S>>>,
        plan: &StftPlan<S>,
        len: usize,
    ) -> Result<Var> {
        let (bins, frames) = dims2(self.value(mask), "masked_istft")?;
        if bins != plan.bins() || frames != plan.frames(len) || spec.len() != bins * frames {
            return Err(Error::Shape(format!(
                "mask [{bins}, {frames}] does not fit a {len}-sample signal under window {}",
                plan.window_size()
            )));
        }
        let m = self.value(mask).data();
        let masked: Vec<Complex<S>> = spec.iter().zip(m).map(|(c, k)| c * *k).collect();
        let out = plan.inverse(&masked, len)?;
        let v = Tensor::new(&[len], out)?;
        Ok(self.push(v, Op::MaskedIstft { mask, plan: plan.clone(), spec }))
    }

    /// Records an op with a caller-supplied backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<S>, backward: BackwardFn<S>) -> Var {
        self.push(value, Op::Custom { inputs: inputs.to_vec(), backward })
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!("loss must be a scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let keep = matches!(node.op, Op::Input | Op::Param(_) | Op::Const);
            if keep {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Input | Op::Const | Op::Param(_) => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, |buf| add_into(buf, g), self);
                accumulate(grads, *b, |buf| add_into(buf, g), self);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, |buf| add_into(buf, g), self);
                accumulate(grads, *b, |buf| buf.iter_mut().zip(g).for_each(|(d, s)| *d = *d - *s), self);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                accumulate(grads, *a, |buf| fma_into(buf, g, bv), self);
                accumulate(grads, *b, |buf| fma_into(buf, g, av), self);
            }
            Op::Scale(a, k) => {
                accumulate(grads, *a, |buf| buf.iter_mut().zip(g).for_each(|(d, s)| *d = *d + *s * *k), self)
            }
            Op::AddBias { x, b, inner } => {
                accumulate(grads, *x, |buf| add_into(buf, g), self);
                let channels = val(*b).numel();
                accumulate(
                    grads,
                    *b,
                    |buf| {
                        for (i, s) in g.iter().enumerate() {
                            let c = (i / inner) % channels;
                            buf[c] = buf[c] + *s;
                        }
                    },
                    self,
                );
            }
            Op::Gelu { x, tanh } => {
                let xv = val(*x).data();
                accumulate(
                    grads,
                    *x,
                    |buf| {
                        for (((d, s), v), t) in buf.iter_mut().zip(g).zip(xv).zip(tanh) {
                            *d = *d + *s * gelu_grad(*v, *t);
                        }
                    },
                    self,
                );
            }
            Op::Softplus(x) => {
                let xv = val(*x).data();
                accumulate(
                    grads,
                    *x,
                    |buf| {
                        for ((d, s), v) in buf.iter_mut().zip(g).zip(xv) {
                            *d = *d + *s * sigmoid(*v);
                        }
                    },
                    self,
                );
            }
            Op::Abs(x) => {
                let xv = val(*x).data();
                accumulate(
                    grads,
                    *x,
                    |buf| {
                        for ((d, s), v) in buf.iter_mut().zip(g).zip(xv) {
                            let sign = if *v > S::zero() {
                                S::one()
                            } else if *v < S::zero() {
                                -S::one()
                            } else {
                                S::zero()
                            };
                            *d = *d + *s * sign;
                        }
                    },
                    self,
                );
            }
            Op::Sum(x) => accumulate(grads, *x, |buf| buf.iter_mut().for_each(|d| *d = *d + g[0]), self),
            Op::Mean(x) => {
                let n = S::from(val(*x).numel()).expect("count fits");
                accumulate(grads, *x, |buf| buf.iter_mut().for_each(|d| *d = *d + g[0] / n), self);
            }
            Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = dims2(val(*a), "matmul")?;
                let (br, bc) = dims2(val(*b), "matmul")?;
                let a_eff = MatRef::new(val(*a).data(), ar, ac).maybe_t(*ta);
                let b_eff = MatRef::new(val(*b).data(), br, bc).maybe_t(*tb);
                let gm = MatRef::new(g, a_eff.rows, b_eff.cols);
                accumulate(
                    grads,
                    *a,
                    |buf| {
                        if *ta {
                            gemm(b_eff, gm.t(), buf, true);
                        } else {
                            gemm(gm, b_eff.t(), buf, true);
                        }
                    },
                    self,
                );
                accumulate(
                    grads,
                    *b,
                    |buf| {
                        if *tb {
                            gemm(gm.t(), a_eff, buf, true);
                        } else {
                            gemm(a_eff.t(), gm, buf, true);
                        }
                    },
                    self,
                );
            }
            Op::Transpose(x) => {
                let (r, c) = dims2(val(*x), "transpose")?;
                accumulate(
                    grads,
                    *x,
                    |buf| {
                        for i in 0..r {
                            for j in 0..c {
                                buf[i * c + j] = buf[i * c + j] + g[j * r + i];
                            }
                        }
                    },
                    self,
                );
            }
            Op::Reshape(x) => accumulate(grads, *x, |buf| add_into(buf, g), self),
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.shape()[1];
                accumulate(
                    grads,
                    *x,
                    |buf| {
                        for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(buf.chunks_mut(c)) {
                            let dot: S = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                            for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                                *d = *d + *yv * (*gv - dot);
                            }
                        }
                    },
                    self,
                );
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = node.value.shape()[1];
                let n = S::from(c).expect("width fits");
                let gam = val(*gamma).data();
                accumulate(
                    grads,
                    *x,
                    |buf| {
                        for (row, ((gr, hr), dr)) in g.chunks(c).zip(xhat.chunks(c)).zip(buf.chunks_mut(c)).enumerate()
                        {
                            let dh: Vec<S> = gr.iter().zip(gam).map(|(a, b)| *a * *b).collect();
                            let mean_dh = dh.iter().copied().sum::<S>() / n;
                            let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| *a * *b).sum::<S>() / n;
                            for ((d, dhv), hv) in dr.iter_mut().zip(&dh).zip(hr) {
                                *d = *d + rstd[row] * (*dhv - mean_dh - *hv * mean_dh_h);
                            }
                        }
                    },
                    self,
                );
                accumulate(
                    grads,
                    *gamma,
                    |buf| {
                        for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                            for ((d, a), b) in buf.iter_mut().zip(gr).zip(hr) {
                                *d = *d + *a * *b;
                            }
                        }
                    },
                    self,
                );
                accumulate(
                    grads,
                    *beta,
                    |buf| {
                        for gr in g.chunks(c) {
                            add_into(buf, gr);
                        }
                    },
                    self,
                );
            }
            Op::Slice { x, axis, start } => {
                let (_, c) = dims2(val(*x), "slice")?;
                let (or, oc) = (node.value.shape()[0], node.value.shape()[1]);
                accumulate(
                    grads,
                    *x,
                    |buf| {
                        if *axis == 0 {
                            add_into(&mut buf[start * c..(start + or) * c], g);
                        } else {
                            for i in 0..or {
                                add_into(&mut buf[i * c + start..i * c + start + oc], &g[i * oc..(i + 1) * oc]);
                            }
                        }
                    },
                    self,
                );
            }
            Op::Concat { parts, axis } => {
                let width = node.value.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let (pr, pc) = dims2(val(*p), "concat")?;
                    accumulate(
                        grads,
                        *p,
                        |buf| {
                            if *axis == 0 {
                                add_into(buf, &g[offset * width..(offset + pr) * width]);
                            } else {
                                for i in 0..pr {
                                    add_into(
                                        &mut buf[i * pc..(i + 1) * pc],
                                        &g[i * width + offset..i * width + offset + pc],
                                    );
                                }
                            }
                        },
                        self,
                    );
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::Conv { x, w, b, frames, cols } => {
                let (cout, cin, kernel) = dims3(val(*w), "conv weight")?;
                let nb = frames.short * frames.batch;
                let gm = MatRef::new(g, cout, nb);
                accumulate(grads, *w, |buf| gemm(gm, MatRef::new(cols, cin * kernel, nb).t(), buf, true), self);
                if let Some(b) = b {
                    accumulate(grads, *b, |buf| channel_sums_into(buf, g), self);
                }
                if needs_grad(self, *x) {
                    let mut dcols = vec![S::zero(); cin * kernel * nb];
                    gemm(MatRef::new(val(*w).data(), cout, cin * kernel).t(), gm, &mut dcols, false);
                    accumulate(grads, *x, |buf| frames.col2im(&dcols, buf), self);
                }
            }
            Op::ConvT { x, w, b, frames } => {
                let (cin, cout, kernel) = dims3(val(*w), "conv_transpose weight")?;
                let nb = frames.short * frames.batch;
                let dcols = frames.im2col(g);
                let dc = MatRef::new(&dcols, cout * kernel, nb);
                accumulate(grads, *w, |buf| gemm(MatRef::new(val(*x).data(), cin, nb), dc.t(), buf, true), self);
                if let Some(b) = b {
                    accumulate(grads, *b, |buf| channel_sums_into(buf, g), self);
                }
                accumulate(grads, *x, |buf| gemm(MatRef::new(val(*w).data(), cin, cout * kernel), dc, buf, true), self);
            }
            Op::StftMag { x, plan, spec } => {
                let scaled: Vec<Complex<S>> = spec
                    .iter()
                    .zip(g)
                    .map(|(c, s)| {
                        let m = c.norm();
                        if m > S::zero() {
                            c * (*s / m)
                        } else {
                            Complex::new(S::zero(), S::zero())
                        }
                    })
                    .collect();
                let dx = plan.forward_adjoint(&scaled, val(*x).numel());
                accumulate(grads, *x, |buf| add_into(buf, &dx), self);
            }
            Op::MaskedIstft { mask, plan, spec } => {
                let adj = plan.inverse_adjoint(g, node.value.numel())?;
                accumulate(
                    grads,
                    *mask,
                    |buf| {
                        for ((d, a), c) in buf.iter_mut().zip(&adj).zip(spec.iter()) {
                            *d = *d + a.re * c.re + a.im * c.im;
                        }
                    },
                    self,
                );
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor<S>> = inputs.iter().map(|v| val(*v)).collect();
                for (v, dg) in inputs.iter().zip(backward(&values, &node.value, g)) {
                    if let Some(dg) = dg {
                        accumulate(grads, *v, |buf| add_into(buf, &dg), self);
                    }
                }
            }
        }
        Ok(())
    }
}

fn needs_grad<S: Scalar>(tape: &Tape<S>, v: Var) -> bool {
    !matches!(tape.nodes[v.0].op, Op::Const)
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, f: impl FnOnce(&mut [S]), tape: &Tape<S>) {
    if !needs_grad(tape, v) {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| vec![S::zero(); tape.nodes[v.0].value.numel()]);
    f(buf);
}

fn add_into<S: Scalar>(buf: &mut [S], g: &[S]) {
    buf.iter_mut().zip(g).for_each(|(d, s)| *d = *d + *s);
}

fn fma_into<S: Scalar>(buf: &mut [S], g: &[S], other: &[S]) {
    for ((d, s), o) in buf.iter_mut().zip(g).zip(other) {
        *d = *d + *s * *o;
    }
}

fn channel_sums_into<S: Scalar>(buf: &mut [S], g: &[S]) {
    let inner = g.len() / buf.len();
    for (d, chunk) in buf.iter_mut().zip(g.chunks(inner)) {
        *d = *d + chunk.iter().copied().sum::<S>();
    }
}

/// Gradients of one backward sweep, indexed by node.
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds every parameter leaf's gradient into `store`.
    pub fn accumulate_into(&self, tape: &Tape<S>, store: &mut ParamStore<S>) {
        for (node, g) in tape.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.add_grad(*id, g);
            }
        }
    }
}
