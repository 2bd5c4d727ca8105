//! Slice-level compute kernels behind the graph operations.
//!
//! Batched kernels split work per sample or per channel through
//! [`crate::par`]; partial results are summed on the calling thread in
//! sample order so outputs do not depend on the thread count.

use super::Scalar;
use crate::error::{Error, Result};
use crate::par;

/// Geometry of a (possibly grouped-by-channel) 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn out_extent(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = size + 2 * pad;
        (k <= padded).then(|| (padded - k) / stride + 1)
    }

    /// Geometry for a full convolution with kernel `[F, C, kh, kw]`.
    pub fn conv(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (&[n, c, h, w], &[f, kc, kh, kw]) = (input, kernel) else {
            return Err(Error::shape("conv2d", input, kernel));
        };
        if kc != c {
            return Err(Error::shape("conv2d", input, kernel));
        }
        Self::finish("conv2d", [n, c, h, w], f, kh, kw, stride, pad, kernel)
    }

    /// Geometry for a depthwise convolution with kernel `[C, 1, kh, kw]`.
    pub fn depthwise(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (&[n, c, h, w], &[kc, one, kh, kw]) = (input, kernel) else {
            return Err(Error::shape("depthwise_conv2d", input, kernel));
        };
        if kc != c || one != 1 {
            return Err(Error::shape("depthwise_conv2d", input, kernel));
        }
        Self::finish("depthwise_conv2d", [n, c, h, w], c, kh, kw, stride, pad, kernel)
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        op: &'static str,
        [n, c, h, w]: [usize; 4],
        f: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        kernel: &[usize],
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid(format!("{op}: stride must be positive")));
        }
        let oh = Self::out_extent(h, kh, stride, pad);
        let ow = Self::out_extent(w, kw, stride, pad);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok(ConvGeom {
                n,
                c,
                h,
                w,
                f,
                kh,
                kw,
                stride,
                pad,
                oh,
                ow,
            }),
            _ => Err(Error::shape(op, &[n, c, h, w], kernel)),
        }
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.f, self.oh, self.ow]
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose input column `ox*stride + k - pad`
    /// falls inside `[0, extent)`.
    #[inline]
    fn valid_range(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > k {
            (self.pad - k).div_ceil(s)
        } else {
            0
        };
        let hi = if extent + self.pad > k {
            ((extent - 1 + self.pad - k) / s + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let ohw = g.oh * g.ow;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                dst.fill(T::zero());
                let (xlo, xhi) = g.valid_range(kx, g.w, g.ow);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let d = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    for ox in xlo..xhi {
                        d[ox] = src[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let ohw = g.oh * g.ow;
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                let (xlo, xhi) = g.valid_range(kx, g.w, g.ow);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let d = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.ow..(oy + 1) * g.ow];
                    for ox in xlo..xhi {
                        d[ox * g.stride + kx - g.pad] += s[ox];
                    }
                }
            }
        }
    }
}

/// Cross-correlation forward pass: `x: [N,C,H,W]`, `k: [F,C,kh,kw]`.
pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], k: &[T], bias: Option<&[T]>) -> Vec<T> {
    let ohw = g.oh * g.ow;
    let ckk = g.c * g.kh * g.kw;
    let mut out = vec![T::zero(); g.n * g.f * ohw];
    par::for_each_chunk_mut(&mut out, g.f * ohw, |n, out_n| {
        let x_n = &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
        if g.is_pointwise() {
            T::gemm(
                g.f, g.c, ohw, T::one(),
                k, (g.c as isize, 1),
                x_n, (ohw as isize, 1),
                T::zero(), out_n, (ohw as isize, 1),
            );
        } else {
            let mut cols = vec![T::zero(); ckk * ohw];
            im2col(g, x_n, &mut cols);
            T::gemm(
                g.f, ckk, ohw, T::one(),
                k, (ckk as isize, 1),
                &cols, (ohw as isize, 1),
                T::zero(), out_n, (ohw as isize, 1),
            );
        }
        if let Some(b) = bias {
            for (f, row) in out_n.chunks_mut(ohw).enumerate() {
                row.iter_mut().for_each(|v| *v += b[f]);
            }
        }
    });
    out
}

/// Gradients of [`conv2d_forward`] for every operand.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    k: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let ohw = g.oh * g.ow;
    let chw = g.c * g.h * g.w;
    let ckk = g.c * g.kh * g.kw;
    let per_sample = par::map_range(g.n, |n| {
        let x_n = &x[n * chw..(n + 1) * chw];
        let dy_n = &dy[n * g.f * ohw..(n + 1) * g.f * ohw];
        let mut dk = vec![T::zero(); g.f * ckk];
        let mut dx = vec![T::zero(); chw];
        if g.is_pointwise() {
            // dk = dy_n · x_nᵀ, dx = kᵀ · dy_n
            T::gemm(
                g.f, ohw, g.c, T::one(),
                dy_n, (ohw as isize, 1),
                x_n, (1, ohw as isize),
                T::zero(), &mut dk, (g.c as isize, 1),
            );
            T::gemm(
                g.c, g.f, ohw, T::one(),
                k, (1, g.c as isize),
                dy_n, (ohw as isize, 1),
                T::zero(), &mut dx, (ohw as isize, 1),
            );
        } else {
            let mut cols = vec![T::zero(); ckk * ohw];
            im2col(g, x_n, &mut cols);
            T::gemm(
                g.f, ohw, ckk, T::one(),
                dy_n, (ohw as isize, 1),
                &cols, (1, ohw as isize),
                T::zero(), &mut dk, (ckk as isize, 1),
            );
            T::gemm(
                ckk, g.f, ohw, T::one(),
                k, (1, ckk as isize),
                dy_n, (ohw as isize, 1),
                T::zero(), &mut cols, (ohw as isize, 1),
            );
            col2im(g, &cols, &mut dx);
        }
        (dx, dk)
    });
    let mut dx = Vec::with_capacity(g.n * chw);
    let mut dk = vec![T::zero(); g.f * ckk];
    for (dx_n, dk_n) in per_sample {
        dx.extend_from_slice(&dx_n);
        dk.iter_mut().zip(&dk_n).for_each(|(a, &b)| *a += b);
    }
    let mut db = vec![T::zero(); g.f];
    for n in 0..g.n {
        for (f, acc) in db.iter_mut().enumerate() {
            let row = &dy[(n * g.f + f) * ohw..(n * g.f + f + 1) * ohw];
            *acc += row.iter().copied().sum::<T>();
        }
    }
    (dx, dk, db)
}

/// `dst[i] += w * src[i * stride]` over `dst`.
#[inline]
fn axpy_strided<T: Scalar>(dst: &mut [T], src: &[T], stride: usize, w: T) {
    if stride == 1 {
        dst.iter_mut().zip(src).for_each(|(d, &v)| *d += w * v);
    } else {
        dst.iter_mut()
            .zip(src.iter().step_by(stride))
            .for_each(|(d, &v)| *d += w * v);
    }
}

/// `dst[i * stride] += w * src[i]` over `src`.
#[inline]
fn scatter_strided<T: Scalar>(dst: &mut [T], src: &[T], stride: usize, w: T) {
    if stride == 1 {
        dst.iter_mut().zip(src).for_each(|(d, &v)| *d += w * v);
    } else {
        dst.iter_mut()
            .step_by(stride)
            .zip(src)
            .for_each(|(d, &v)| *d += w * v);
    }
}

/// `acc[i] += a[i] * b[i * stride]` over `acc`.
#[inline]
fn mul_acc_strided<T: Scalar>(acc: &mut [T], a: &[T], b: &[T], stride: usize) {
    if stride == 1 {
        for ((d, &x), &y) in acc.iter_mut().zip(a).zip(b) {
            *d += x * y;
        }
    } else {
        for ((d, &x), &y) in acc.iter_mut().zip(a).zip(b.iter().step_by(stride)) {
            *d += x * y;
        }
    }
}

impl ConvGeom {
    fn padded_width(&self) -> usize {
        self.w + 2 * self.pad
    }

    fn padded_height(&self) -> usize {
        self.h + 2 * self.pad
    }

    /// Copies an `h×w` plane into the interior of a zero border of `pad`.
    fn pad_plane<T: Scalar>(&self, x: &[T], out: &mut Vec<T>) {
        let pw = self.padded_width();
        out.clear();
        out.resize(pw * self.padded_height(), T::zero());
        for (y, row) in x.chunks_exact(self.w).enumerate() {
            let start = (y + self.pad) * pw + self.pad;
            out[start..start + self.w].copy_from_slice(row);
        }
    }
}

/// One depthwise output plane from a padded input plane.
fn depthwise_plane<T: Scalar>(g: &ConvGeom, xp: &[T], k: &[T], out: &mut [T]) {
    let pw = g.padded_width();
    let span = (g.ow - 1) * g.stride + 1;
    for (oy, dst) in out.chunks_exact_mut(g.ow).enumerate() {
        for ky in 0..g.kh {
            let row = (oy * g.stride + ky) * pw;
            for kx in 0..g.kw {
                let src = &xp[row + kx..row + kx + span];
                axpy_strided(dst, src, g.stride, k[ky * g.kw + kx]);
            }
        }
    }
}

/// Depthwise forward: `x: [N,C,H,W]`, `k: [C,1,kh,kw]`, one kernel per channel.
pub fn depthwise_forward<T: Scalar>(g: &ConvGeom, x: &[T], k: &[T]) -> Vec<T> {
    let ohw = g.oh * g.ow;
    let hw = g.h * g.w;
    let kk = g.kh * g.kw;
    let mut out = vec![T::zero(); g.n * g.c * ohw];
    par::for_each_chunk_mut(&mut out, ohw, |p, plane| {
        let c = p % g.c;
        let mut xp = Vec::new();
        g.pad_plane(&x[p * hw..(p + 1) * hw], &mut xp);
        depthwise_plane(g, &xp, &k[c * kk..(c + 1) * kk], plane);
    });
    out
}

/// Gradients of [`depthwise_forward`] with respect to input and kernel.
pub fn depthwise_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    k: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>) {
    let ohw = g.oh * g.ow;
    let hw = g.h * g.w;
    let kk = g.kh * g.kw;
    let pw = g.padded_width();
    let span = (g.ow - 1) * g.stride + 1;
    let mut dx = vec![T::zero(); g.n * g.c * hw];
    par::for_each_chunk_mut(&mut dx, hw, |p, dxp| {
        let c = p % g.c;
        let kc = &k[c * kk..(c + 1) * kk];
        let dyp = &dy[p * ohw..(p + 1) * ohw];
        let mut buf = vec![T::zero(); pw * g.padded_height()];
        for (oy, grow) in dyp.chunks_exact(g.ow).enumerate() {
            for ky in 0..g.kh {
                let row = (oy * g.stride + ky) * pw;
                for kx in 0..g.kw {
                    let dst = &mut buf[row + kx..row + kx + span];
                    scatter_strided(dst, grow, g.stride, kc[ky * g.kw + kx]);
                }
            }
        }
        for (y, drow) in dxp.chunks_exact_mut(g.w).enumerate() {
            let start = (y + g.pad) * pw + g.pad;
            drow.copy_from_slice(&buf[start..start + g.w]);
        }
    });
    let dk_per_channel = par::map_range(g.c, |c| {
        // One running row of products per tap, reduced once at the end.
        let mut acc = vec![T::zero(); kk * g.ow];
        let mut xp = Vec::new();
        for n in 0..g.n {
            let p = n * g.c + c;
            g.pad_plane(&x[p * hw..(p + 1) * hw], &mut xp);
            let dyp = &dy[p * ohw..(p + 1) * ohw];
            for (oy, grow) in dyp.chunks_exact(g.ow).enumerate() {
                for ky in 0..g.kh {
                    let row = (oy * g.stride + ky) * pw;
                    for kx in 0..g.kw {
                        let tap = ky * g.kw + kx;
                        let src = &xp[row + kx..row + kx + span];
                        mul_acc_strided(&mut acc[tap * g.ow..(tap + 1) * g.ow], grow, src, g.stride);
                    }
                }
            }
        }
        acc.chunks_exact(g.ow)
            .map(|r| r.iter().fold(T::zero(), |s, &v| s + v))
            .collect::<Vec<T>>()
    });
    (dx, dk_per_channel.concat())
}

/// Per-channel batch statistics over `[N,C,H,W]`: (mean, biased variance).
pub fn channel_stats<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let stats = par::map_range(c, |ch| {
        let m = (n * hw) as f64;
        let mut sum = 0.0;
        for s in 0..n {
            let base = (s * c + ch) * hw;
            sum += x[base..base + hw].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mean = sum / m;
        let mut sq = 0.0;
        for s in 0..n {
            let base = (s * c + ch) * hw;
            sq += x[base..base + hw]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean;
                    d * d
                })
                .sum::<f64>();
        }
        (mean, sq / m)
    });
    stats.into_iter().unzip()
}

/// Nearest-neighbour upsampling of `[N,C,H,W]` by an integer factor.
pub fn upsample_forward<T: Scalar>(x: &[T], [n, c, h, w]: [usize; 4], s: usize) -> Vec<T> {
    let (oh, ow) = (h * s, w * s);
    let mut out = vec![T::zero(); n * c * oh * ow];
    par::for_each_chunk_mut(&mut out, oh * ow, |p, plane| {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let row = &src[(oy / s) * w..(oy / s + 1) * w];
            for (ox, v) in plane[oy * ow..(oy + 1) * ow].iter_mut().enumerate() {
                *v = row[ox / s];
            }
        }
    });
    out
}

pub fn upsample_backward<T: Scalar>(dy: &[T], [n, c, h, w]: [usize; 4], s: usize) -> Vec<T> {
    let (oh, ow) = (h * s, w * s);
    let mut dx = vec![T::zero(); n * c * h * w];
    par::for_each_chunk_mut(&mut dx, h * w, |p, plane| {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let row = &src[oy * ow..(oy + 1) * ow];
            let dst = &mut plane[(oy / s) * w..(oy / s + 1) * w];
            for (ox, &v) in row.iter().enumerate() {
                dst[ox / s] += v;
            }
        }
    });
    dx
}
