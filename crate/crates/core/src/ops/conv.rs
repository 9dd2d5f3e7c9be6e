//! 1-D convolution (cross-correlation orientation) with "same" zero padding.
//!
//! The batch is processed in groups of samples. Each group is lowered to an
//! im2col matrix of shape `[Cin*K, G*Lout]` and multiplied in one GEMM. The
//! group size keeps the lowered matrix cache-sized for long signals while
//! still giving short signals enough columns to amortize weight packing.

use crate::error::{shape_err, Result};
use crate::tensor::{Element, Tensor};

/// Columns per group GEMM we aim for.
const TARGET_COLS: usize = 256;

/// Output length of a strided "same" convolution: `ceil(len / stride)`.
pub fn conv_output_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

struct Geometry {
    batch: usize,
    cin: usize,
    len: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    out_len: usize,
    pad: usize,
    group: usize,
}

impl Geometry {
    fn new<T: Element>(input: &Tensor<T>, weight: &Tensor<T>, stride: usize) -> Result<Self> {
        let (batch, cin, len) = input.dims3()?;
        let (cout, wcin, kernel) = weight.dims3()?;
        if wcin != cin {
            return shape_err(format!("conv1d: input has {cin} channels but weights expect {wcin}"));
        }
        if stride == 0 {
            return shape_err("conv1d: stride must be positive");
        }
        if kernel == 0 || len == 0 {
            return shape_err("conv1d: empty kernel or signal");
        }
        let out_len = conv_output_len(len, stride);
        Ok(Self {
            batch,
            cin,
            len,
            cout,
            kernel,
            stride,
            out_len,
            pad: kernel / 2,
            group: TARGET_COLS.div_ceil(out_len).clamp(1, batch.max(1)),
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.kernel
    }

    fn in_size(&self) -> usize {
        self.cin * self.len
    }

    fn out_size(&self) -> usize {
        self.cout * self.out_len
    }

    /// Range of output positions `t` whose tap `k` lands inside the signal.
    fn valid_range(&self, k: usize) -> std::ops::Range<usize> {
        // t*stride + k - pad in [0, len)
        let lo = self.pad.saturating_sub(k).div_ceil(self.stride);
        let hi_excl = if self.len + self.pad > k {
            (self.len + self.pad - k).div_ceil(self.stride)
        } else {
            0
        };
        lo.min(self.out_len)..hi_excl.min(self.out_len).max(lo.min(self.out_len))
    }
}

/// Lowers `n` consecutive samples into `col` (`[Cin*K, n*Lout]`). Entries
/// that fall in the padding must already be zero; they are never written.
fn im2col<T: Element>(samples: &[T], n: usize, g: &Geometry, col: &mut [T]) {
    let width = n * g.out_len;
    for c in 0..g.cin {
        for k in 0..g.kernel {
            let range = g.valid_range(k);
            if range.is_empty() {
                continue;
            }
            let first = range.start * g.stride + k - g.pad;
            let row = &mut col[(c * g.kernel + k) * width..][..width];
            for j in 0..n {
                let src = &samples[j * g.in_size() + c * g.len..][..g.len];
                let dst = &mut row[j * g.out_len..][range.clone()];
                if g.stride == 1 {
                    dst.copy_from_slice(&src[first..first + dst.len()]);
                } else {
                    for (d, &s) in dst.iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                        *d = s;
                    }
                }
            }
        }
    }
}

/// Scatter-adds a lowered gradient back onto `n` consecutive samples.
fn col2im<T: Element>(col: &[T], n: usize, g: &Geometry, grad: &mut [T]) {
    let width = n * g.out_len;
    for c in 0..g.cin {
        for k in 0..g.kernel {
            let range = g.valid_range(k);
            if range.is_empty() {
                continue;
            }
            let first = range.start * g.stride + k - g.pad;
            let row = &col[(c * g.kernel + k) * width..][..width];
            for j in 0..n {
                let dst = &mut grad[j * g.in_size() + c * g.len..][..g.len];
                let src = &row[j * g.out_len..][range.clone()];
                if g.stride == 1 {
                    for (d, &s) in dst[first..first + src.len()].iter_mut().zip(src) {
                        *d += s;
                    }
                } else {
                    for (d, &s) in dst[first..].iter_mut().step_by(g.stride).zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Converts between `n` samples of `[Cout, Lout]` and one `[Cout, n*Lout]`
/// matrix.
fn interleave<T: Element>(samples: &mut [T], mat: &mut [T], n: usize, g: &Geometry, to_mat: bool) {
    let width = n * g.out_len;
    for j in 0..n {
        for o in 0..g.cout {
            let s = &mut samples[j * g.out_size() + o * g.out_len..][..g.out_len];
            let m = &mut mat[o * width + j * g.out_len..][..g.out_len];
            if to_mat {
                m.copy_from_slice(s);
            } else {
                s.copy_from_slice(m);
            }
        }
    }
}

/// `output[b,o,t] = bias[o] + Σ_{c,k} weight[o,c,k] · x[b,c,t·stride + k − ⌊K/2⌋]`
/// with zeros outside the signal.
pub fn conv1d<T: Element>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let g = Geometry::new(input, weight, stride)?;
    bias.expect_shape(&[g.cout])?;
    let mut col = vec![T::zero(); g.rows() * g.group * g.out_len];
    let mut mat = vec![T::zero(); if g.group > 1 { g.cout * g.group * g.out_len } else { 0 }];
    let mut out = vec![T::zero(); g.batch * g.out_size()];
    for (samples, dst) in input
        .data()
        .chunks(g.group * g.in_size())
        .zip(out.chunks_mut(g.group * g.out_size()))
    {
        let n = samples.len() / g.in_size();
        let width = n * g.out_len;
        im2col(samples, n, &g, &mut col);
        let target = if g.group > 1 {
            &mut mat[..g.cout * width]
        } else {
            &mut *dst
        };
        for (row, &bo) in target.chunks_exact_mut(width).zip(bias.data()) {
            row.fill(bo);
        }
        T::gemm(
            false,
            false,
            g.cout,
            g.rows(),
            width,
            weight.data(),
            &col,
            T::one(),
            target,
        );
        if g.group > 1 {
            interleave(dst, &mut mat, n, &g, false);
        }
    }
    Tensor::from_vec(&[g.batch, g.cout, g.out_len], out)
}

/// Gradients of a convolution with respect to its three inputs.
#[derive(Clone, Debug)]
pub struct Conv1dGrads<T> {
    /// `None` when the caller asked to skip the input gradient.
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv1d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    grad_output: &Tensor<T>,
    need_input_grad: bool,
) -> Result<Conv1dGrads<T>> {
    let g = Geometry::new(input, weight, stride)?;
    grad_output.expect_shape(&[g.batch, g.cout, g.out_len])?;
    let rows = g.rows();
    let max_width = g.group * g.out_len;

    let mut grad_bias = vec![T::zero(); g.cout];
    for row in grad_output.data().chunks_exact(g.out_len).enumerate() {
        grad_bias[row.0 % g.cout] += row.1.iter().copied().sum::<T>();
    }
    let mut grad_weight = vec![T::zero(); g.cout * rows];
    let mut col = vec![T::zero(); rows * max_width];
    let mut gmat = vec![T::zero(); if g.group > 1 { g.cout * max_width } else { 0 }];
    let mut gcol = vec![T::zero(); if need_input_grad { rows * max_width } else { 0 }];
    let mut gx = vec![T::zero(); if need_input_grad { input.len() } else { 0 }];

    for (i, (samples, gy)) in input
        .data()
        .chunks(g.group * g.in_size())
        .zip(grad_output.data().chunks(g.group * g.out_size()))
        .enumerate()
    {
        let n = samples.len() / g.in_size();
        let width = n * g.out_len;
        let gy: &[T] = if g.group > 1 {
            let mut scratch = gy.to_vec();
            interleave(&mut scratch, &mut gmat, n, &g, true);
            &gmat[..g.cout * width]
        } else {
            gy
        };
        im2col(samples, n, &g, &mut col);
        T::gemm(
            false,
            true,
            g.cout,
            width,
            rows,
            gy,
            &col[..rows * width],
            T::one(),
            &mut grad_weight,
        );
        if need_input_grad {
            let gcol = &mut gcol[..rows * width];
            T::gemm(true, false, rows, g.cout, width, weight.data(), gy, T::zero(), gcol);
            let start = i * g.group * g.in_size();
            col2im(gcol, n, &g, &mut gx[start..start + n * g.in_size()]);
        }
    }

    let grad_input = if need_input_grad {
        Some(Tensor::from_vec(input.shape(), gx)?)
    } else {
        None
    };
    Ok(Conv1dGrads {
        input: grad_input,
        weight: Tensor::from_vec(weight.shape(), grad_weight)?,
        bias: Tensor::from_vec(&[g.cout], grad_bias)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop cross-correlation over an explicitly zero-padded copy.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize) -> Vec<f64> {
        let (nb, cin, len) = x.dims3().unwrap();
        let (cout, _, k) = w.dims3().unwrap();
        let pad = k / 2;
        let out_len = len.div_ceil(stride);
        let padded_len = len + k;
        let mut padded = vec![0.0; nb * cin * padded_len];
        for bi in 0..nb {
            for c in 0..cin {
                for t in 0..len {
                    padded[(bi * cin + c) * padded_len + t + pad] = x.get3(bi, c, t);
                }
            }
        }
        let mut out = vec![0.0; nb * cout * out_len];
        for bi in 0..nb {
            for o in 0..cout {
                for t in 0..out_len {
                    let mut acc = b[o];
                    for c in 0..cin {
                        for kk in 0..k {
                            acc += w.get3(o, c, kk) * padded[(bi * cin + c) * padded_len + t * stride + kk];
                        }
                    }
                    out[(bi * cout + o) * out_len + t] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::from_vec(&[1, 1, 4], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 1], vec![1.0f32]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv1d(&x, &w, &b, 1).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn difference_kernel_same_padding() {
        let x = Tensor::from_vec(&[1, 1, 4], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 3], vec![1.0f64, 0.0, -1.0]).unwrap();
        let oracle = naive_conv(&x, &w, &[0.0], 1);
        assert_eq!(oracle, vec![-2.0, -2.0, -2.0, 3.0]);
        let y = conv1d(&x, &w, &Tensor::zeros(&[1]), 1).unwrap();
        assert_eq!(y.data(), &oracle[..]);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor::<f32>::zeros(&[1, 2, 8]);
        let w = Tensor::<f32>::zeros(&[4, 3, 3]);
        let err = conv1d(&x, &w, &Tensor::zeros(&[4]), 1).unwrap_err();
        assert!(matches!(err, crate::Error::Shape(_)), "{err}");
    }

    #[test]
    fn matches_naive_oracle_on_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(nb, cin, len, cout, k, stride) in &[
            (2, 3, 32, 4, 16, 4),
            (1, 2, 7, 3, 16, 4),
            (3, 1, 5, 2, 4, 1),
            (2, 4, 17, 5, 1, 4),
            (1, 3, 9, 2, 5, 2),
        ] {
            let x = Tensor::<f64>::randn(&[nb, cin, len], 1.0, &mut rng);
            let w = Tensor::<f64>::randn(&[cout, cin, k], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(&[cout], 1.0, &mut rng);
            let y = conv1d(&x, &w, &b, stride).unwrap();
            let oracle = naive_conv(&x, &w, b.data(), stride);
            assert_eq!(y.shape(), &[nb, cout, len.div_ceil(stride)]);
            for (a, e) in y.data().iter().zip(&oracle) {
                assert!((a - e).abs() < 1e-10, "{a} vs {e}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn output_length_is_ceil_len_over_stride(len in 1usize..=4096, stride4 in any::<bool>()) {
            let stride = if stride4 { 4 } else { 1 };
            let x = Tensor::<f32>::zeros(&[1, 1, len]);
            let w = Tensor::<f32>::zeros(&[1, 1, 16]);
            let y = conv1d(&x, &w, &Tensor::zeros(&[1]), stride).unwrap();
            prop_assert_eq!(y.shape()[2], len.div_ceil(stride));
        }
    }
}
