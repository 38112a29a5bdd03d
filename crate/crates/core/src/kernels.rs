//! Slice-level numerical kernels shared by the tape operations.
//!
//! Convolutions lower to `im2col` + GEMM. The transposed convolution is the
//! data-gradient of the forward convolution, so the two are exact adjoints.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, Result};
use crate::Scalar;

/// Stride and zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvGeometry {
    pub const fn new(stride: usize, pad: usize) -> Self {
        Self { stride: (stride, stride), pad: (pad, pad) }
    }
}

/// Output length of a convolution along one axis; errors unless it is a positive integer.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(config_err!("kernel and stride must be positive"));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(config_err!("kernel {kernel} larger than padded input {padded}"));
    }
    if !(padded - kernel).is_multiple_of(stride) {
        return Err(config_err!(
            "non-integral conv output: ({input} + 2*{pad} - {kernel}) / {stride} + 1"
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output length of a transposed convolution: `(H - 1) * s - 2p + k`.
pub fn conv_transpose_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<usize> {
    if stride == 0 || kernel == 0 || input == 0 {
        return Err(config_err!("kernel, stride and input must be positive"));
    }
    let full = (input - 1) * stride + kernel;
    if full <= 2 * pad {
        return Err(config_err!("transposed conv output not positive for input {input}"));
    }
    Ok(full - 2 * pad)
}

/// Fully resolved convolution dimensions for one sample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub geom: ConvGeometry,
}

impl ConvDims {
    pub fn resolve(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        geom: ConvGeometry,
    ) -> Result<Self> {
        let ho = conv_output_size(h, kh, geom.stride.0, geom.pad.0)?;
        let wo = conv_output_size(w, kw, geom.stride.1, geom.pad.1)?;
        Ok(Self { c_in, h, w, c_out, kh, kw, ho, wo, geom })
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Scratch budget, in elements, for the column matrix of one GEMM.
const COL_BUDGET: usize = 1 << 19;

/// Samples lowered into one GEMM.
fn group_size(d: &ConvDims, n: usize) -> usize {
    (COL_BUDGET / (d.col_rows() * d.col_cols()).max(1)).clamp(1, n.max(1))
}

/// Output positions `[lo, hi)` whose input index `o * stride + k - pad` lies in `0..input`.
fn valid_range(output: usize, input: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if input + pad > k { ((input + pad - k - 1) / stride + 1).min(output) } else { 0 };
    (lo.min(hi), hi)
}

/// Lowers one sample into columns `col0..col0 + ho*wo` of a row-major matrix with row stride `ld`.
fn im2col<T: Scalar>(input: &[T], d: &ConvDims, cols: &mut [T], ld: usize, col0: usize) {
    let (sh, sw) = d.geom.stride;
    let (ph, pw) = d.geom.pad;
    let ncols = d.col_cols();
    for c in 0..d.c_in {
        let plane = &input[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            let (ylo, yhi) = valid_range(d.ho, d.h, ki, sh, ph);
            for kj in 0..d.kw {
                let (xlo, xhi) = valid_range(d.wo, d.w, kj, sw, pw);
                let row = (c * d.kh + ki) * d.kw + kj;
                let out = &mut cols[row * ld + col0..row * ld + col0 + ncols];
                for oy in 0..d.ho {
                    let dst = &mut out[oy * d.wo..(oy + 1) * d.wo];
                    if oy < ylo || oy >= yhi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let iy = oy * sh + ki - ph;
                    let src = &plane[iy * d.w..(iy + 1) * d.w];
                    dst[..xlo].fill(T::zero());
                    dst[xhi..].fill(T::zero());
                    if sw == 1 {
                        let start = xlo + kj - pw;
                        dst[xlo..xhi].copy_from_slice(&src[start..start + xhi - xlo]);
                    } else {
                        for ox in xlo..xhi {
                            dst[ox] = src[ox * sw + kj - pw];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto one sample, accumulating.
fn col2im<T: Scalar>(cols: &[T], d: &ConvDims, out: &mut [T], ld: usize, col0: usize) {
    let (sh, sw) = d.geom.stride;
    let (ph, pw) = d.geom.pad;
    let ncols = d.col_cols();
    for c in 0..d.c_in {
        let plane = &mut out[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            let (ylo, yhi) = valid_range(d.ho, d.h, ki, sh, ph);
            for kj in 0..d.kw {
                let (xlo, xhi) = valid_range(d.wo, d.w, kj, sw, pw);
                let row = (c * d.kh + ki) * d.kw + kj;
                let src = &cols[row * ld + col0..row * ld + col0 + ncols];
                for oy in ylo..yhi {
                    let iy = oy * sh + ki - ph;
                    let dst = &mut plane[iy * d.w..(iy + 1) * d.w];
                    let srow = &src[oy * d.wo..(oy + 1) * d.wo];
                    if sw == 1 {
                        let start = xlo + kj - pw;
                        for (o, v) in dst[start..start + xhi - xlo].iter_mut().zip(&srow[xlo..xhi]) {
                            *o = *o + *v;
                        }
                    } else {
                        for ox in xlo..xhi {
                            let ix = ox * sw + kj - pw;
                            dst[ix] = dst[ix] + srow[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Copies the NCHW output-gradient of samples `s0..s0+m` into a `c_out x (m * ho*wo)` matrix.
fn gather_channels<T: Scalar>(g: &[T], d: &ConvDims, s0: usize, m: usize, buf: &mut [T]) {
    let ncols = d.col_cols();
    let (out_len, ld) = (d.c_out * ncols, m * ncols);
    for j in 0..m {
        for o in 0..d.c_out {
            let src = &g[(s0 + j) * out_len + o * ncols..(s0 + j) * out_len + (o + 1) * ncols];
            buf[o * ld + j * ncols..o * ld + (j + 1) * ncols].copy_from_slice(src);
        }
    }
}

/// `out[n] = W * im2col(x[n]) + b`; `x` is `N x c_in x h x w`, `W` is `c_out x c_in x kh x kw`.
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    n: usize,
    weight: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
) -> Vec<T> {
    let (rows, ncols) = (d.col_rows(), d.col_cols());
    let in_len = d.c_in * d.h * d.w;
    let out_len = d.c_out * ncols;
    let g = group_size(d, n);
    let mut out = vec![T::zero(); n * out_len];
    let mut cols = vec![T::zero(); rows * g * ncols];
    let mut prod = vec![T::zero(); d.c_out * g * ncols];
    for s0 in (0..n).step_by(g) {
        let m = g.min(n - s0);
        let ld = m * ncols;
        for j in 0..m {
            im2col(&x[(s0 + j) * in_len..(s0 + j + 1) * in_len], d, &mut cols, ld, j * ncols);
        }
        T::gemm(
            d.c_out,
            rows,
            ld,
            T::one(),
            weight,
            (rows as isize, 1),
            &cols,
            (ld as isize, 1),
            T::zero(),
            &mut prod,
            (ld as isize, 1),
        );
        for j in 0..m {
            for o in 0..d.c_out {
                let b = bias.map_or(T::zero(), |b| b[o]);
                let src = &prod[o * ld + j * ncols..o * ld + (j + 1) * ncols];
                let dst = &mut out[(s0 + j) * out_len + o * ncols..(s0 + j) * out_len + (o + 1) * ncols];
                if bias.is_some() {
                    dst.iter_mut().zip(src).for_each(|(y, &v)| *y = v + b);
                } else {
                    dst.copy_from_slice(src);
                }
            }
        }
    }
    out
}

/// Input gradient of [`conv2d_forward`]; also the forward map of the transposed convolution.
pub(crate) fn conv2d_input_grad<T: Scalar>(
    grad_out: &[T],
    n: usize,
    weight: &[T],
    d: &ConvDims,
) -> Vec<T> {
    let (rows, ncols) = (d.col_rows(), d.col_cols());
    let in_len = d.c_in * d.h * d.w;
    let g = group_size(d, n);
    let mut gx = vec![T::zero(); n * in_len];
    let mut cols = vec![T::zero(); rows * g * ncols];
    let mut gbuf = vec![T::zero(); d.c_out * g * ncols];
    for s0 in (0..n).step_by(g) {
        let m = g.min(n - s0);
        let ld = m * ncols;
        gather_channels(grad_out, d, s0, m, &mut gbuf);
        // cols = W^T * g
        T::gemm(
            rows,
            d.c_out,
            ld,
            T::one(),
            weight,
            (1, rows as isize),
            &gbuf,
            (ld as isize, 1),
            T::zero(),
            &mut cols,
            (ld as isize, 1),
        );
        for j in 0..m {
            col2im(&cols, d, &mut gx[(s0 + j) * in_len..(s0 + j + 1) * in_len], ld, j * ncols);
        }
    }
    gx
}

/// Accumulates the weight gradient `sum_n g[n] * im2col(x[n])^T` into `gw`.
pub(crate) fn conv2d_weight_grad<T: Scalar>(
    x: &[T],
    grad_out: &[T],
    n: usize,
    d: &ConvDims,
    gw: &mut [T],
) {
    let (rows, ncols) = (d.col_rows(), d.col_cols());
    let in_len = d.c_in * d.h * d.w;
    let g = group_size(d, n);
    let mut cols = vec![T::zero(); rows * g * ncols];
    let mut gbuf = vec![T::zero(); d.c_out * g * ncols];
    for s0 in (0..n).step_by(g) {
        let m = g.min(n - s0);
        let ld = m * ncols;
        for j in 0..m {
            im2col(&x[(s0 + j) * in_len..(s0 + j + 1) * in_len], d, &mut cols, ld, j * ncols);
        }
        gather_channels(grad_out, d, s0, m, &mut gbuf);
        T::gemm(
            d.c_out,
            ld,
            rows,
            T::one(),
            &gbuf,
            (ld as isize, 1),
            &cols,
            (1, ld as isize),
            T::one(),
            gw,
            (rows as isize, 1),
        );
    }
}

/// Per-channel sum over batch and space of an NCHW buffer.
pub(crate) fn channel_sums<T: Scalar>(g: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for s in 0..n {
        for (ch, acc) in out.iter_mut().enumerate() {
            let base = (s * c + ch) * plane;
            *acc = *acc + g[base..base + plane].iter().copied().sum::<T>();
        }
    }
    out
}

/// `factor x factor` average pooling of NCHW planes.
pub(crate) fn avg_pool<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (ho, wo) = (h / f, w / f);
    let inv = T::one() / T::of((f * f) as f64);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = T::zero();
                for dy in 0..f {
                    for dx in 0..f {
                        acc = acc + src[(oy * f + dy) * w + ox * f + dx];
                    }
                }
                dst[oy * wo + ox] = acc * inv;
            }
        }
    }
    out
}

/// Nearest-neighbour upsampling of NCHW planes by an integer factor.
pub(crate) fn upsample_nearest<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    f: usize,
) -> Vec<T> {
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                dst[oy * wo + ox] = src[(oy / f) * w + ox / f];
            }
        }
    }
    out
}

/// Adjoint of [`upsample_nearest`]: sums each `f x f` block.
pub(crate) fn sum_pool<T: Scalar>(g: &[T], planes: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &g[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let i = (oy / f) * w + ox / f;
                dst[i] = dst[i] + src[oy * wo + ox];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_size_formulas() {
        assert_eq!(conv_output_size(64, 4, 2, 1).unwrap(), 32);
        assert_eq!(conv_output_size(3, 2, 1, 0).unwrap(), 2);
        assert!(conv_output_size(5, 4, 2, 0).is_err());
        assert!(conv_output_size(2, 5, 1, 0).is_err());
        assert_eq!(conv_transpose_output_size(32, 4, 2, 1).unwrap(), 64);
    }

    #[test]
    fn ones_convolution_sums_window() {
        let d = ConvDims::resolve(1, 3, 3, 1, 2, 2, ConvGeometry::new(1, 0)).unwrap();
        let out = conv2d_forward(&[1.0f64; 9], 1, &[1.0; 4], Some(&[0.0]), &d);
        assert_eq!(out, vec![4.0; 4]);
    }

    #[test]
    fn valid_ranges_match_brute_force() {
        for (out, inp, stride, pad) in [(8, 8, 1, 1), (4, 8, 2, 1), (3, 7, 3, 2), (5, 5, 1, 0), (16, 8, 1, 4)] {
            for k in 0..5 {
                let (lo, hi) = valid_range(out, inp, k, stride, pad);
                for o in 0..out {
                    let i = (o * stride + k) as isize - pad as isize;
                    assert_eq!((lo..hi).contains(&o), i >= 0 && i < inp as isize, "{out} {inp} {stride} {pad} k={k} o={o}");
                }
            }
        }
    }

    #[test]
    fn upsample_then_sum_pool_scales_by_area() {
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let up = upsample_nearest(&x, 1, 2, 2, 2);
        assert_eq!(sum_pool(&up, 1, 2, 2, 2), vec![4.0, 8.0, 12.0, 16.0]);
        assert_eq!(avg_pool(&up, 1, 4, 4, 2), x.to_vec());
    }
}
