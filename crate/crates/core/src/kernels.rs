//! Raw loops behind the tape ops. Everything here works on flat row-major
//! slices; shape validation happens in the callers.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `c[m×n] (+)= a[m×k] · b[k×n]`
pub fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], acc: bool) {
    if !acc {
        c[..m * n].iter_mut().for_each(|v| *v = T::zero());
    }
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + aip * bv;
            }
        }
    }
}

/// `c[m×n] (+)= a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], acc: bool) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                s = s + x * y;
            }
            let cv = &mut c[i * n + j];
            *cv = if acc { *cv + s } else { s };
        }
    }
}

/// `c[m×n] (+)= a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], acc: bool) {
    if !acc {
        c[..m * n].iter_mut().for_each(|v| *v = T::zero());
    }
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + api * bv;
            }
        }
    }
}

/// Geometry of a strided 2-d convolution over one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        in_ch: usize,
        (h, w): (usize, usize),
        (kh, kw): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom { in_ch, h, w, kh, kw, stride, pad, oh, ow })
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one sample `[in_ch, h, w]` into `[in_ch·kh·kw, oh·ow]`.
pub fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let p = g.out_len();
    for c in 0..g.in_ch {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    for oj in 0..g.ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        dst[oi * g.ow + oj] = if ii >= 0
                            && (ii as usize) < g.h
                            && jj >= 0
                            && (jj as usize) < g.w
                        {
                            x[(c * g.h + ii as usize) * g.w + jj as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `[in_ch·kh·kw, oh·ow]` back onto `[in_ch, h, w]`.
pub fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let p = g.out_len();
    for c in 0..g.in_ch {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii as usize >= g.h {
                        continue;
                    }
                    for oj in 0..g.ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj < 0 || jj as usize >= g.w {
                            continue;
                        }
                        let d = &mut dx[(c * g.h + ii as usize) * g.w + jj as usize];
                        *d = *d + src[oi * g.ow + oj];
                    }
                }
            }
        }
    }
}

/// Square pooling window with stride, optionally allowed to overhang the
/// bottom/right border (ceil mode). Overhanging cells are excluded from the
/// average rather than zero-padded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub size: usize,
    pub stride: usize,
    pub ceil_mode: bool,
}

impl Window {
    pub fn new(size: usize, stride: usize, ceil_mode: bool) -> Self {
        Window { size, stride, ceil_mode }
    }

    /// Number of window positions along an axis of length `len`.
    pub fn out_len(&self, len: usize) -> Result<usize> {
        if self.size == 0 || self.stride == 0 {
            return Err(Error::dim("local_avg_pool", "window size and stride must be positive"));
        }
        let span = len as i64 - self.size as i64;
        let s = self.stride as i64;
        let mut n = if self.ceil_mode {
            // an oversized window still has one position, anchored at 0
            (-((-span).div_euclid(s)) + 1).max(1)
        } else {
            if span < 0 {
                return Err(Error::dim(
                    "local_avg_pool",
                    format!("window {} larger than extent {len}", self.size),
                ));
            }
            span.div_euclid(s) + 1
        };
        // every window must start inside the map
        if self.ceil_mode && n > 1 && (n - 1) * s >= len as i64 {
            n -= 1;
        }
        if n < 1 {
            return Err(Error::dim(
                "local_avg_pool",
                format!("window {} stride {} leaves no position on extent {len}", self.size, self.stride),
            ));
        }
        Ok(n as usize)
    }

    /// In-bounds `[start, end)` covered by window `o` on an axis of length `len`.
    pub fn span(&self, o: usize, len: usize) -> (usize, usize) {
        let start = o * self.stride;
        (start, (start + self.size).min(len))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm_nn(2, 3, 4, &a, &b, &mut c, false);
        // bᵀ as 4x3
        let mut bt = vec![0.0; 12];
        for p in 0..3 {
            for j in 0..4 {
                bt[j * 3 + p] = b[p * 4 + j];
            }
        }
        let mut c2 = vec![0.0; 8];
        gemm_nt(2, 3, 4, &a, &bt, &mut c2, false);
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for p in 0..3 {
                at[p * 2 + i] = a[i * 3 + p];
            }
        }
        let mut c3 = vec![0.0; 8];
        gemm_tn(2, 3, 4, &at, &b, &mut c3, false);
        assert_eq!(c, c2);
        assert_eq!(c, c3);
        assert_eq!(c[0], 0.0 * 0.0 + 1.0 * 2.0 + 2.0 * 4.0);
    }

    #[test]
    fn window_counts() {
        let w = Window::new(3, 2, true);
        assert_eq!(w.out_len(4).unwrap(), 2);
        assert_eq!(w.span(1, 4), (2, 4));
        assert_eq!(Window::new(3, 2, false).out_len(4).unwrap(), 1);
        assert_eq!(Window::new(6, 2, true).out_len(8).unwrap(), 2);
        assert_eq!(Window::new(2, 2, false).out_len(4).unwrap(), 2);
        assert!(Window::new(5, 1, false).out_len(4).is_err());
        assert_eq!(Window::new(6, 2, true).out_len(1).unwrap(), 1);
        assert_eq!(Window::new(3, 2, true).out_len(2).unwrap(), 1);
        assert!(Window::new(0, 2, true).out_len(2).is_err());
        // last window would start past the border
        assert_eq!(Window::new(2, 2, true).out_len(5).unwrap(), 3);
        assert_eq!(Window::new(1, 2, true).out_len(4).unwrap(), 2);
    }

    #[test]
    fn conv_geometry() {
        let g = ConvGeom::new(3, (32, 32), (3, 3), 2, 1).unwrap();
        assert_eq!((g.oh, g.ow), (16, 16));
        assert!(ConvGeom::new(1, (2, 2), (5, 5), 1, 1).is_err());
    }
}
