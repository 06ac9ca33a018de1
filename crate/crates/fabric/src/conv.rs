//! Strided convolution geometry and the im2col/col2im kernels.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Kernel size and padding used for a layer with `stride`: even strides get a
/// kernel of twice the stride, odd strides a kernel equal to the stride.
pub fn kernel_for_stride(stride: usize) -> (usize, usize) {
    if stride.is_multiple_of(2) {
        (2 * stride, stride / 2)
    } else {
        (stride, 0)
    }
}

pub fn conv_out_len(n: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::Config("stride and kernel must be positive".into()));
    }
    let padded = n + 2 * pad;
    if padded < kernel {
        return Err(Error::Shape(format!("length {n} with pad {pad} is shorter than kernel {kernel}")));
    }
    Ok((padded - kernel) / stride + 1)
}

pub fn conv_transpose_out_len(n: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 || n == 0 {
        return Err(Error::Config("stride, kernel and length must be positive".into()));
    }
    let full = (n - 1) * stride + kernel;
    if full <= 2 * pad {
        return Err(Error::Shape(format!("transposed output of length {full} vanishes under pad {pad}")));
    }
    Ok(full - 2 * pad)
}

/// Geometry shared by a convolution and its transpose: a `[c, long, b]` array
/// is gathered into `[c * kernel, short * b]` columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Frames {
    pub channels: usize,
    pub long: usize,
    pub short: usize,
    pub batch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Frames {
    fn source(&self, n: usize, k: usize) -> Option<usize> {
        let pos = (n * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < self.long).then_some(pos as usize)
    }

    pub fn im2col<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let Frames { channels, long, short, batch, kernel, .. } = *self;
        let mut cols = vec![S::zero(); channels * kernel * short * batch];
        for c in 0..channels {
            for k in 0..kernel {
                let row = &mut cols[(c * kernel + k) * short * batch..][..short * batch];
                for n in 0..short {
                    if let Some(src) = self.source(n, k) {
                        row[n * batch..(n + 1) * batch].copy_from_slice(&x[(c * long + src) * batch..][..batch]);
                    }
                }
            }
        }
        cols
    }

    /// Scatter-adds columns back onto a `[c, long, b]` buffer.
    pub fn col2im<S: Scalar>(&self, cols: &[S], out: &mut [S]) {
        let Frames { channels, long, short, batch, kernel, .. } = *self;
        for c in 0..channels {
            for k in 0..kernel {
                let row = &cols[(c * kernel + k) * short * batch..][..short * batch];
                for n in 0..short {
                    if let Some(dst) = self.source(n, k) {
                        let target = &mut out[(c * long + dst) * batch..][..batch];
                        for (t, v) in target.iter_mut().zip(&row[n * batch..(n + 1) * batch]) {
                            *t = *t + *v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stride_rule_inverts_exactly() {
        for stride in 1..=8 {
            let (k, p) = kernel_for_stride(stride);
            for blocks in 1..6 {
                let n = stride * blocks;
                let down = conv_out_len(n, k, stride, p).unwrap();
                assert_eq!(down, blocks);
                assert_eq!(conv_transpose_out_len(down, k, stride, p).unwrap(), n);
            }
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let f = Frames { channels: 2, long: 9, short: 4, batch: 3, kernel: 4, stride: 2, pad: 1 };
        let x: Vec<f64> = (0..2 * 9 * 3).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..2 * 4 * 4 * 3).map(|i| (i as f64 * 0.3).cos()).collect();
        let lhs: f64 = f.im2col(&x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        f.col2im(&y, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
