//! im2col/col2im kernels shared by `conv2d` and `conv_transpose2d`.

use crate::error::{Result, TensorError};
use crate::float::Float;

/// Geometry of a strided, zero-padded 2-D cross-correlation over an `N×C×H×W` batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        (ph, pw): (usize, usize),
    ) -> Result<Self> {
        if stride == 0 {
            return Err(TensorError::invalid("conv2d", "stride must be positive"));
        }
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(TensorError::invalid(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * ph, w + 2 * pw),
            ));
        }
        let oh = (h + 2 * ph - kh) / stride + 1;
        let ow = (w + 2 * pw - kw) / stride + 1;
        Ok(Self { n, c, h, w, kh, kw, stride, ph, pw, oh, ow })
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

/// Unfolds `x` (`N×C×H×W`) into a `(C·kh·kw) × (N·oh·ow)` matrix.
pub(crate) fn im2col<T: Float>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let cols_n = g.col_cols();
    let mut cols = vec![T::zero(); g.col_rows() * cols_n];
    let plane = g.h * g.w;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.ph as isize;
                        let base = (n * g.oh + oy) * g.ow;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pw as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[base + ox] = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-adds columns back into an `N×C×H×W` buffer.
pub(crate) fn col2im<T: Float>(cols: &[T], g: &ConvGeom, out: &mut [T]) {
    let cols_n = g.col_cols();
    let plane = g.h * g.w;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.n {
                    let dst = &mut out[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.ph as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = (n * g.oh + oy) * g.ow;
                        let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pw as isize;
                            if ix >= 0 && ix < g.w as isize {
                                drow[ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `N×C×HW` → `C×(N·HW)`.
pub(crate) fn nchw_to_cm<T: Float>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let src = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            out[ch * n * hw + b * hw..ch * n * hw + (b + 1) * hw].copy_from_slice(src);
        }
    }
    out
}

/// `C×(N·HW)` → `N×C×HW`, optionally adding a per-channel bias.
pub(crate) fn cm_to_nchw<T: Float>(x: &[T], n: usize, c: usize, hw: usize, bias: Option<&[T]>) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let dst = &mut out[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            dst.copy_from_slice(&x[ch * n * hw + b * hw..ch * n * hw + (b + 1) * hw]);
            if let Some(bias) = bias {
                let bv = bias[ch];
                dst.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Per-channel sums of an `N×C×HW` buffer.
pub(crate) fn channel_sums<T: Float>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut s = vec![T::zero(); c];
    for b in 0..n {
        for (ch, acc) in s.iter_mut().enumerate() {
            *acc += x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
        }
    }
    s
}
