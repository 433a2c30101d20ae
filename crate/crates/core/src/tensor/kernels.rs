//! Slice-level compute kernels shared by the tape's forward and backward passes.

use super::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

/// Row-major `c = a' * b' + beta * c`, where `a'` is `m x k` and `b'` is `k x n`
/// after the requested transposition of the stored matrices.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: Trans,
    b: &[T],
    tb: Trans,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = match ta {
        Trans::No => (k as isize, 1),
        Trans::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Trans::No => (n as isize, 1),
        Trans::Yes => (1, k as isize),
    };
    // SAFETY: bounds asserted above, `c` is a unique borrow distinct from `a` and `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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
        )
    }
}

/// Geometry of a square-kernel cross-correlation over an NCHW batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

pub fn conv_out_extent(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < k || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let op = "conv2d";
        if input.len() != 4 || weight.len() != 4 {
            return Err(Error::shape(
                op,
                format!("expected 4-d input and weight, got {input:?} and {weight:?}"),
            ));
        }
        let (n, c_in, h, w) = (input[0], input[1], input[2], input[3]);
        let (c_out, wc_in, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if wc_in != c_in {
            return Err(Error::shape(
                op,
                format!("input has {c_in} channels, weight expects {wc_in}"),
            ));
        }
        if kh != kw || !matches!(kh, 1 | 3) {
            return Err(Error::shape(
                op,
                format!("kernel must be 1x1 or 3x3, got {kh}x{kw}"),
            ));
        }
        if !matches!(stride, 1 | 2) {
            return Err(Error::shape(op, format!("stride must be 1 or 2, got {stride}")));
        }
        let too_small = || Error::shape(op, format!("input {h}x{w} too small for kernel {kh}"));
        let ho = conv_out_extent(h, kh, stride, pad).ok_or_else(too_small)?;
        let wo = conv_out_extent(w, kw, stride, pad).ok_or_else(too_small)?;
        Ok(ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            pad,
            ho,
            wo,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.c_out, self.ho, self.wo]
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Sum with eight independent accumulators so the loop vectorizes.
pub fn sum_lanes<T: Scalar>(x: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = x.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for l in 0..8 {
            acc[l] = acc[l] + c[l];
        }
    }
    let mut total = acc.iter().fold(T::zero(), |a, &b| a + b);
    for &v in rest {
        total = total + v;
    }
    total
}

/// `sum((x - shift)^2)` with lane-split accumulation.
pub fn sq_dev_lanes<T: Scalar>(x: &[T], shift: T) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = x.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for l in 0..8 {
            let d = c[l] - shift;
            acc[l] = acc[l] + d * d;
        }
    }
    let mut total = acc.iter().fold(T::zero(), |a, &b| a + b);
    for &v in rest {
        let d = v - shift;
        total = total + d * d;
    }
    total
}

/// `sum(a * b)` with lane-split accumulation.
pub fn dot_lanes<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut total = acc.iter().fold(T::zero(), |a, &b| a + b);
    for (&x, &y) in ra.iter().zip(rb) {
        total = total + x * y;
    }
    total
}

/// Output columns `ox` whose input column `ox * stride + kx - pad` lies inside `[0, w)`.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let off = kx as isize - g.pad as isize;
    let s = g.stride as isize;
    // smallest ox with ox*s + off >= 0
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    // largest ox with ox*s + off <= w-1, plus one
    let hi = if (g.w as isize - 1 - off) < 0 {
        0
    } else {
        (g.w as isize - 1 - off) / s + 1
    };
    let lo = (lo as usize).min(g.wo);
    let hi = (hi as usize).min(g.wo).max(lo);
    (lo, hi)
}

/// Unfold one sample `[c_in, h, w]` into `[c_in*k*k, ho*wo]`.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let spatial = g.ho * g.wo;
    for kx in 0..g.k {
        let (lo, hi) = valid_cols(g, kx);
        let ix0 = (lo * g.stride + kx) as isize - g.pad as isize;
        for ci in 0..g.c_in {
            let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * spatial..(row + 1) * spatial];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        out_row.fill(T::zero());
                        continue;
                    }
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let ix0 = ix0 as usize;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                    } else {
                        for (j, o) in out_row[lo..hi].iter_mut().enumerate() {
                            *o = src[ix0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the adjoint of [`im2col`] into one sample's input gradient.
fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let spatial = g.ho * g.wo;
    for kx in 0..g.k {
        let (lo, hi) = valid_cols(g, kx);
        if lo == hi {
            continue;
        }
        let ix0 = ((lo * g.stride + kx) as isize - g.pad as isize) as usize;
        for ci in 0..g.c_in {
            let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * spatial..(row + 1) * spatial];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let seg = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[ix0..ix0 + seg.len()].iter_mut().zip(seg) {
                            *d = *d + v;
                        }
                    } else {
                        for (j, &v) in seg.iter().enumerate() {
                            let d = &mut dst[ix0 + j * g.stride];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], weight: &[T]) -> Vec<T> {
    let spatial = g.ho * g.wo;
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * spatial;
    let mut out = vec![T::zero(); g.n * out_len];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch_len() * spatial]
    };
    for s in 0..g.n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let patches: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(g, xs, &mut col);
            &col
        };
        gemm(
            g.c_out,
            g.patch_len(),
            spatial,
            weight,
            Trans::No,
            patches,
            Trans::No,
            T::zero(),
            &mut out[s * out_len..(s + 1) * out_len],
        );
    }
    out
}

/// Returns `(d_input, d_weight)`. The input gradient is skipped when not needed.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dout: &[T],
    need_input_grad: bool,
) -> (Option<Vec<T>>, Vec<T>) {
    let spatial = g.ho * g.wo;
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * spatial;
    let plen = g.patch_len();
    let mut dw = vec![T::zero(); g.c_out * plen];
    let mut dx = need_input_grad.then(|| vec![T::zero(); g.n * in_len]);
    let mut col = vec![T::zero(); plen * spatial];
    let mut dcol = vec![T::zero(); plen * spatial];
    for s in 0..g.n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let dys = &dout[s * out_len..(s + 1) * out_len];
        let patches: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(g, xs, &mut col);
            &col
        };
        // dW += dY [c_out, spatial] * patches^T [spatial, plen]
        gemm(
            g.c_out,
            spatial,
            plen,
            dys,
            Trans::No,
            patches,
            Trans::Yes,
            T::one(),
            &mut dw,
        );
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * in_len..(s + 1) * in_len];
            if g.is_pointwise() {
                gemm(
                    plen,
                    g.c_out,
                    spatial,
                    weight,
                    Trans::Yes,
                    dys,
                    Trans::No,
                    T::zero(),
                    dxs,
                );
            } else {
                gemm(
                    plen,
                    g.c_out,
                    spatial,
                    weight,
                    Trans::Yes,
                    dys,
                    Trans::No,
                    T::zero(),
                    &mut dcol,
                );
                col2im(g, &dcol, dxs);
            }
        }
    }
    (dx, dw)
}

/// Numerically stable logistic function, branching on sign.
///
/// The result is clamped to the open interval: the largest representable
/// value below one and the smallest positive normal, so saturated inputs
/// never produce exactly 0 or 1.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    let s = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let half = T::from_f64_lossy(0.5);
    s.min(T::one() - T::epsilon() * half).max(T::min_positive_value())
}

/// `log(sum(exp(row)))` with the max shifted out.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}
