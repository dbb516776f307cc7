//! im2col convolution kernels over 5-D `[N, C, T, H, W]` buffers.
//!
//! The time axis is always unpadded with unit stride; the two spatial axes
//! share one stride and one zero padding. 2-D convolution is the `T = kt = 1`
//! special case.

use super::scalar::matmul;
use super::{NumericError, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ot: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(op: &'static str, input: [usize; 5], weight: [usize; 5], stride: usize, pad: usize) -> Result<Self> {
        let [n, c, t, h, w] = input;
        let [k, wc, kt, kh, kw] = weight;
        let mismatch = || NumericError::ShapeMismatch {
            op,
            left: input.to_vec(),
            right: weight.to_vec(),
        };
        if wc != c || kt == 0 || kh == 0 || kw == 0 {
            return Err(mismatch());
        }
        if stride == 0 {
            return Err(NumericError::InvalidArgument(format!("{op}: stride must be >= 1")));
        }
        if kt > t {
            return Err(NumericError::InvalidArgument(format!(
                "{op}: temporal kernel extent {kt} exceeds clip length {t}"
            )));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(mismatch());
        }
        Ok(Self {
            n,
            c,
            t,
            h,
            w,
            k,
            kt,
            kh,
            kw,
            stride,
            pad,
            ot: t - kt + 1,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.kt * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.ot * self.oh * self.ow
    }

    fn in_sample(&self) -> usize {
        self.c * self.t * self.h * self.w
    }

    fn out_sample(&self) -> usize {
        self.k * self.col_cols()
    }

    /// Spatial input coordinate for output coordinate `o` and kernel offset `d`.
    #[inline]
    fn src(&self, o: usize, d: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + d) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let cols = g.col_cols();
    let mut row = 0;
    for ci in 0..g.c {
        for dt in 0..g.kt {
            for dy in 0..g.kh {
                for dx in 0..g.kw {
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    let mut idx = 0;
                    for ot in 0..g.ot {
                        let plane = (ci * g.t + ot + dt) * g.h;
                        for oy in 0..g.oh {
                            match g.src(oy, dy, g.h) {
                                None => {
                                    dst[idx..idx + g.ow].iter_mut().for_each(|v| *v = T::zero());
                                    idx += g.ow;
                                }
                                Some(iy) => {
                                    let line = &x[(plane + iy) * g.w..(plane + iy + 1) * g.w];
                                    for ox in 0..g.ow {
                                        dst[idx] = match g.src(ox, dx, g.w) {
                                            Some(ix) => line[ix],
                                            None => T::zero(),
                                        };
                                        idx += 1;
                                    }
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, dx_out: &mut [T]) {
    let cols = g.col_cols();
    let mut row = 0;
    for ci in 0..g.c {
        for dt in 0..g.kt {
            for dy in 0..g.kh {
                for dx in 0..g.kw {
                    let src = &col[row * cols..(row + 1) * cols];
                    let mut idx = 0;
                    for ot in 0..g.ot {
                        let plane = (ci * g.t + ot + dt) * g.h;
                        for oy in 0..g.oh {
                            let Some(iy) = g.src(oy, dy, g.h) else {
                                idx += g.ow;
                                continue;
                            };
                            let base = (plane + iy) * g.w;
                            for ox in 0..g.ow {
                                if let Some(ix) = g.src(ox, dx, g.w) {
                                    dx_out[base + ix] += src[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Forward pass. Returns the output buffer and, when `keep_cols`, the per-sample
/// column matrices for reuse in the backward pass.
pub(crate) fn forward<T: Scalar>(x: &[T], weight: &[T], bias: &[T], g: &ConvGeom, keep_cols: bool) -> (Vec<T>, Vec<T>) {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let per = rows * cols;
    let mut out = vec![T::zero(); g.n * g.out_sample()];
    let mut kept = if keep_cols {
        vec![T::zero(); g.n * per]
    } else {
        Vec::new()
    };
    let mut scratch = if keep_cols { Vec::new() } else { vec![T::zero(); per] };
    for s in 0..g.n {
        let col = if keep_cols {
            &mut kept[s * per..(s + 1) * per]
        } else {
            &mut scratch[..]
        };
        im2col(&x[s * g.in_sample()..(s + 1) * g.in_sample()], g, col);
        let o = &mut out[s * g.out_sample()..(s + 1) * g.out_sample()];
        for (kk, chunk) in o.chunks_mut(cols).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias[kk]);
        }
        matmul(weight, false, col, false, o, g.k, rows, cols, true);
    }
    (out, kept)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Scalar>(
    dout: &[T],
    x: &[T],
    weight: &[T],
    kept_cols: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let per = rows * cols;
    let mut dx = need_dx.then(|| vec![T::zero(); g.n * g.in_sample()]);
    let mut dw = need_dw.then(|| vec![T::zero(); g.k * rows]);
    let mut db = need_db.then(|| vec![T::zero(); g.k]);
    let mut scratch = vec![T::zero(); per];
    for s in 0..g.n {
        let d = &dout[s * g.out_sample()..(s + 1) * g.out_sample()];
        if let Some(db) = db.as_mut() {
            for (kk, chunk) in d.chunks(cols).enumerate() {
                db[kk] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let col: &[T] = if kept_cols.is_empty() {
                im2col(&x[s * g.in_sample()..(s + 1) * g.in_sample()], g, &mut scratch);
                &scratch
            } else {
                &kept_cols[s * per..(s + 1) * per]
            };
            // dW[K, rows] += dOut[K, cols] * col[rows, cols]^T
            matmul(d, false, col, true, dw, g.k, cols, rows, true);
        }
        if let Some(dx) = dx.as_mut() {
            // dcol[rows, cols] = W[K, rows]^T * dOut[K, cols]
            matmul(weight, true, d, false, &mut scratch, rows, g.k, cols, false);
            col2im(&scratch, g, &mut dx[s * g.in_sample()..(s + 1) * g.in_sample()]);
        }
    }
    ConvGrads { dx, dw, db }
}
