//! Convolution kernels: im2col/col2im plus the GEMM-backed forward and
//! backward passes shared by `conv2d` and `conv2d_transpose`.
//!
//! A single geometry describes both directions. The "big" side is the
//! high-resolution end (the input of a strided convolution, the output of a
//! transposed one); the "small" side is the low-resolution end. The kernel is
//! always viewed two-dimensionally as `[ch_small, ch_big * kh * kw]`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub ch_big: usize,
    pub h_big: usize,
    pub w_big: usize,
    pub ch_small: usize,
    pub h_small: usize,
    pub w_small: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Geometry of `conv2d` on a `[ch_in, h, w]` input.
    pub fn forward(
        ch_in: usize,
        h: usize,
        w: usize,
        ch_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("conv stride must be >= 1".into()));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::Dimension(format!(
                "kernel {}x{} exceeds padded input {}x{}",
                kh,
                kw,
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let h_small = (h + 2 * pad - kh) / stride + 1;
        let w_small = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom {
            ch_big: ch_in,
            h_big: h,
            w_big: w,
            ch_small: ch_out,
            h_small,
            w_small,
            kh,
            kw,
            stride,
            pad,
        })
    }

    /// Geometry of `conv2d_transpose` on a `[ch_in, h, w]` input; the output
    /// is the big side with `H = (h-1)*stride - 2*pad + kh`.
    pub fn transpose(
        ch_in: usize,
        h: usize,
        w: usize,
        ch_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("conv stride must be >= 1".into()));
        }
        let h_big = ((h - 1) * stride + kh) as isize - 2 * pad as isize;
        let w_big = ((w - 1) * stride + kw) as isize - 2 * pad as isize;
        if h_big < 1 || w_big < 1 {
            return Err(Error::Dimension(format!(
                "transposed conv output {}x{} is empty",
                h_big, w_big
            )));
        }
        Ok(ConvGeom {
            ch_big: ch_out,
            h_big: h_big as usize,
            w_big: w_big as usize,
            ch_small: ch_in,
            h_small: h,
            w_small: w,
            kh,
            kw,
            stride,
            pad,
        })
    }

    pub fn big_len(&self) -> usize {
        self.ch_big * self.h_big * self.w_big
    }

    pub fn small_len(&self) -> usize {
        self.ch_small * self.h_small * self.w_small
    }

    pub fn cols_rows(&self) -> usize {
        self.ch_big * self.kh * self.kw
    }

    pub fn cols_len(&self) -> usize {
        self.cols_rows() * self.h_small * self.w_small
    }

    /// Position of `(oh, ki)` on the big grid; `None` when it falls into the
    /// padding margin. The upper bound is checked at the call sites.
    #[inline]
    fn big_coord(&self, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0).then_some(pos as usize)
    }
}

/// Unfolds one big-side sample `[ch_big, h_big, w_big]` into a
/// `[ch_big*kh*kw, h_small*w_small]` matrix. Out-of-bounds taps are zero.
pub fn im2col<T: Scalar>(big: &[T], geom: &ConvGeom, cols: &mut [T]) {
    debug_assert_eq!(big.len(), geom.big_len());
    debug_assert_eq!(cols.len(), geom.cols_len());
    cols.fill(T::zero());
    let n_cols = geom.h_small * geom.w_small;
    for c in 0..geom.ch_big {
        let plane = &big[c * geom.h_big * geom.w_big..(c + 1) * geom.h_big * geom.w_big];
        for ki in 0..geom.kh {
            for kj in 0..geom.kw {
                let row = (c * geom.kh + ki) * geom.kw + kj;
                let out_row = &mut cols[row * n_cols..(row + 1) * n_cols];
                for oh in 0..geom.h_small {
                    let Some(ih) = geom.big_coord(oh, ki) else { continue };
                    if ih >= geom.h_big {
                        continue;
                    }
                    for ow in 0..geom.w_small {
                        let Some(iw) = geom.big_coord(ow, kj) else { continue };
                        if iw >= geom.w_big {
                            continue;
                        }
                        out_row[oh * geom.w_small + ow] = plane[ih * geom.w_big + iw];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds a `[ch_big*kh*kw, h_small*w_small]` matrix
/// back onto the big grid, accumulating overlapping taps.
pub fn col2im<T: Scalar>(cols: &[T], geom: &ConvGeom, big: &mut [T]) {
    debug_assert_eq!(big.len(), geom.big_len());
    debug_assert_eq!(cols.len(), geom.cols_len());
    big.fill(T::zero());
    let n_cols = geom.h_small * geom.w_small;
    for c in 0..geom.ch_big {
        let plane = &mut big[c * geom.h_big * geom.w_big..(c + 1) * geom.h_big * geom.w_big];
        for ki in 0..geom.kh {
            for kj in 0..geom.kw {
                let row = (c * geom.kh + ki) * geom.kw + kj;
                let in_row = &cols[row * n_cols..(row + 1) * n_cols];
                for oh in 0..geom.h_small {
                    let Some(ih) = geom.big_coord(oh, ki) else { continue };
                    if ih >= geom.h_big {
                        continue;
                    }
                    for ow in 0..geom.w_small {
                        let Some(iw) = geom.big_coord(ow, kj) else { continue };
                        if iw >= geom.w_big {
                            continue;
                        }
                        plane[ih * geom.w_big + iw] += in_row[oh * geom.w_small + ow];
                    }
                }
            }
        }
    }
}

/// `conv2d` forward for a batch: `big [N,ch_big,H,W] -> small [N,ch_small,h,w]`
/// with kernel viewed as `[ch_small, ch_big*kh*kw]`.
pub fn conv_forward<T: Scalar>(big: &[T], weight: &[T], geom: &ConvGeom, n: usize, out: &mut [T]) {
    let mut cols = vec![T::zero(); geom.cols_len()];
    let n_cols = geom.h_small * geom.w_small;
    for i in 0..n {
        let x = &big[i * geom.big_len()..(i + 1) * geom.big_len()];
        im2col(x, geom, &mut cols);
        let y = &mut out[i * geom.small_len()..(i + 1) * geom.small_len()];
        T::gemm(geom.ch_small, geom.cols_rows(), n_cols, weight, false, &cols, false, T::zero(), y);
    }
}

/// `conv2d` backward: gradients for the big-side input and the kernel.
/// The kernel gradient is accumulated sample by sample in batch order.
pub fn conv_backward<T: Scalar>(
    big: &[T],
    weight: &[T],
    g_small: &[T],
    geom: &ConvGeom,
    n: usize,
    g_big: &mut [T],
    g_weight: &mut [T],
) {
    let mut cols = vec![T::zero(); geom.cols_len()];
    let mut gcols = vec![T::zero(); geom.cols_len()];
    let n_cols = geom.h_small * geom.w_small;
    for i in 0..n {
        let x = &big[i * geom.big_len()..(i + 1) * geom.big_len()];
        let gy = &g_small[i * geom.small_len()..(i + 1) * geom.small_len()];
        // d/d input: fold W^T * gy back onto the grid
        T::gemm(geom.cols_rows(), geom.ch_small, n_cols, weight, true, gy, false, T::zero(), &mut gcols);
        col2im(&gcols, geom, &mut g_big[i * geom.big_len()..(i + 1) * geom.big_len()]);
        // d/d weight: gy * cols^T
        im2col(x, geom, &mut cols);
        T::gemm(geom.ch_small, n_cols, geom.cols_rows(), gy, false, &cols, true, T::one(), g_weight);
    }
}

/// `conv2d_transpose` forward: `small [N,ch_small,h,w] -> big [N,ch_big,H,W]`
/// with kernel viewed as `[ch_small, ch_big*kh*kw]`.
pub fn conv_transpose_forward<T: Scalar>(
    small: &[T],
    weight: &[T],
    geom: &ConvGeom,
    n: usize,
    out: &mut [T],
) {
    let mut cols = vec![T::zero(); geom.cols_len()];
    let n_cols = geom.h_small * geom.w_small;
    for i in 0..n {
        let x = &small[i * geom.small_len()..(i + 1) * geom.small_len()];
        T::gemm(geom.cols_rows(), geom.ch_small, n_cols, weight, true, x, false, T::zero(), &mut cols);
        col2im(&cols, geom, &mut out[i * geom.big_len()..(i + 1) * geom.big_len()]);
    }
}

/// `conv2d_transpose` backward: gradients for the small-side input and kernel.
pub fn conv_transpose_backward<T: Scalar>(
    small: &[T],
    weight: &[T],
    g_big: &[T],
    geom: &ConvGeom,
    n: usize,
    g_small: &mut [T],
    g_weight: &mut [T],
) {
    let mut gcols = vec![T::zero(); geom.cols_len()];
    let n_cols = geom.h_small * geom.w_small;
    for i in 0..n {
        let x = &small[i * geom.small_len()..(i + 1) * geom.small_len()];
        let gy = &g_big[i * geom.big_len()..(i + 1) * geom.big_len()];
        im2col(gy, geom, &mut gcols);
        let gx = &mut g_small[i * geom.small_len()..(i + 1) * geom.small_len()];
        T::gemm(geom.ch_small, geom.cols_rows(), n_cols, weight, false, &gcols, false, T::zero(), gx);
        T::gemm(geom.ch_small, n_cols, geom.cols_rows(), x, false, &gcols, true, T::one(), g_weight);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_dims_match_floor_formula() {
        let g = ConvGeom::forward(1, 32, 32, 1, 3, 3, 2, 1).unwrap();
        assert_eq!((g.h_small, g.w_small), (16, 16));
        let g = ConvGeom::forward(1, 16, 16, 1, 3, 3, 2, 1).unwrap();
        assert_eq!((g.h_small, g.w_small), (8, 8));
    }

    #[test]
    fn transpose_dims_invert_stride_two() {
        let g = ConvGeom::transpose(1, 8, 8, 1, 4, 4, 2, 1).unwrap();
        assert_eq!((g.h_big, g.w_big), (16, 16));
        let g = ConvGeom::transpose(1, 16, 16, 1, 4, 4, 2, 1).unwrap();
        assert_eq!((g.h_big, g.w_big), (32, 32));
    }

    #[test]
    fn oversized_kernel_rejected() {
        assert!(ConvGeom::forward(1, 2, 2, 1, 5, 5, 1, 0).is_err());
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let geom = ConvGeom::forward(2, 5, 4, 3, 3, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..geom.big_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..geom.cols_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut cols = vec![0.0; geom.cols_len()];
        im2col(&x, &geom, &mut cols);
        let mut folded = vec![0.0; geom.big_len()];
        col2im(&c, &geom, &mut folded);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&folded).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}
