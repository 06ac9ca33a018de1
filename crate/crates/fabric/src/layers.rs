//! Parameterised layers composed from tape primitives.

use rand::Rng;

use crate::conv::kernel_for_stride;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = x Wᵀ + b` on `[rows, in]` matrices.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add_kaiming(&format!("{name}.weight"), &[output, input], input, rng)?;
        let b = store.add(&format!("{name}.bias"), Tensor::zeros(&[output]))?;
        Ok(Self { w, b, input, output })
    }

    /// Weights and bias start at zero.
    pub fn zeroed<S: Scalar>(store: &mut ParamStore<S>, name: &str, input: usize, output: usize) -> Result<Self> {
        let w = store.add(&format!("{name}.weight"), Tensor::zeros(&[output, input]))?;
        let b = store.add(&format!("{name}.bias"), Tensor::zeros(&[output]))?;
        Ok(Self { w, b, input, output })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w, false, true)?;
        tape.add_bias(y, b, 1)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, width: usize) -> Result<Self> {
        let gamma = store.add(&format!("{name}.gamma"), Tensor::full(&[width], S::one()))?;
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(&[width]))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Multi-head scaled dot-product attention with output projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {width} is not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), width, width, rng)?,
            k: Linear::new(store, &format!("{name}.k"), width, width, rng)?,
            v: Linear::new(store, &format!("{name}.v"), width, width, rng)?,
            out: Linear::new(store, &format!("{name}.out"), width, width, rng)?,
            heads,
            width,
        })
    }

    /// `query: [L_q, C]`, `memory: [L_kv, C]`.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        query: Var,
        memory: Var,
    ) -> Result<Var> {
        let q = self.q.forward(tape, store, query)?;
        let k = self.k.forward(tape, store, memory)?;
        let v = self.v.forward(tape, store, memory)?;
        let dh = self.width / self.heads;
        let scale = S::one() / S::from(dh).expect("head width fits").sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice(q, 1, h * dh, dh)?;
            let kh = tape.slice(k, 1, h * dh, dh)?;
            let vh = tape.slice(v, 1, h * dh, dh)?;
            let logits = tape.matmul(qh, kh, false, true)?;
            let logits = tape.scale(logits, scale);
            let weights = tape.softmax(logits)?;
            heads.push(tape.matmul(weights, vh, false, false)?);
        }
        let joined = tape.concat(&heads, 1)?;
        self.out.forward(tape, store, joined)
    }
}

/// Strided convolution along axis 1 of `[C, N, B]`, optionally transposed.
#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub kernel: usize,
    pub pad: usize,
    pub transposed: bool,
}

impl Conv {
    /// Downsampling by `stride` with the kernel chosen by [`kernel_for_stride`].
    pub fn down<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (kernel, pad) = kernel_for_stride(stride);
        Self::with_kernel(store, name, c_in, c_out, kernel, stride, pad, false, rng)
    }

    /// Upsampling that exactly undoes [`Conv::down`] with the same stride.
    pub fn up<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (kernel, pad) = kernel_for_stride(stride);
        Self::with_kernel(store, name, c_in, c_out, kernel, stride, pad, true, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_kernel<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        transposed: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Config(format!("{name}: kernel and stride must be positive")));
        }
        let shape = if transposed { [c_in, c_out, kernel] } else { [c_out, c_in, kernel] };
        let w = store.add_kaiming(&format!("{name}.weight"), &shape, c_in * kernel, rng)?;
        let b = store.add(&format!("{name}.bias"), Tensor::zeros(&[c_out]))?;
        Ok(Self { w, b, stride, kernel, pad, transposed })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let n = tape.shape(x).get(1).copied().unwrap_or(0);
        if !self.transposed && n % self.stride != 0 {
            return Err(Error::Config(format!("axis of length {n} is not divisible by stride {}", self.stride)));
        }
        if self.transposed {
            tape.conv_transpose(x, w, Some(b), self.stride, self.pad)
        } else {
            tape.conv(x, w, Some(b), self.stride, self.pad)
        }
    }
}

/// Interleaved sine/cosine encoding of arbitrary positions, `[positions, width]`.
pub fn sinusoidal_pe_at<S: Scalar>(positions: &[f64], width: usize) -> Tensor<S> {
    Tensor::from_fn(&[positions.len(), width], |i| {
        let (p, j) = (positions[i / width], i % width);
        let rate = 10000f64.powf(-((j / 2 * 2) as f64) / width as f64);
        let a = p * rate;
        S::lit(if j % 2 == 0 { a.sin() } else { a.cos() })
    })
}

pub fn sinusoidal_pe<S: Scalar>(len: usize, width: usize) -> Tensor<S> {
    let positions: Vec<f64> = (0..len).map(|p| p as f64).collect();
    sinusoidal_pe_at(&positions, width)
}
