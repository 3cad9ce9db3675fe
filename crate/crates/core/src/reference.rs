//! Plain nested-loop versions of the layer forwards. They share no code with
//! the tape kernels and serve as oracles for tests and `verify`.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Direct convolution, one multiply-add per loop iteration.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let xd = x.data();
    let kd = kernel.data();
    let mut out = Vec::with_capacity(b * o * oh * ow);
    for n in 0..b {
        for f in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias.map_or(T::zero(), |bt| bt.data()[f]);
                    for ch in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let r = (i * stride + u) as isize - pad as isize;
                                let s = (j * stride + v) as isize - pad as isize;
                                if r < 0 || s < 0 || r >= h as isize || s >= w as isize {
                                    continue;
                                }
                                let xi = ((n * c + ch) * h + r as usize) * w + s as usize;
                                let ki = ((f * c + ch) * kh + u) * kw + v;
                                acc = acc + xd[xi] * kd[ki];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::new(&[b, o, oh, ow], out).expect("consistent shape")
}

/// Window start positions along one axis, enumerated directly: every full
/// window, plus in ceil mode one trailing partial window when the full ones
/// stop short of the border.
pub fn window_starts(len: usize, size: usize, stride: usize, ceil_mode: bool) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut start = 0;
    while start + size <= len {
        starts.push(start);
        start += stride;
    }
    if ceil_mode && start < len {
        let covered = starts.last().map_or(0, |&s| s + size);
        if covered < len {
            starts.push(start);
        }
    }
    starts
}

/// Windowed mean over the in-bounds cells of each window.
pub fn local_avg_pool<T: Scalar>(x: &Tensor<T>, size: usize, stride: usize, ceil_mode: bool) -> Tensor<T> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let rows = window_starts(h, size, stride, ceil_mode);
    let cols = window_starts(w, size, stride, ceil_mode);
    let mut out = Vec::new();
    for n in 0..b {
        for ch in 0..c {
            for &r0 in &rows {
                for &c0 in &cols {
                    let mut acc = 0.0;
                    let mut count = 0usize;
                    for r in r0..r0 + size {
                        for s in c0..c0 + size {
                            if r < h && s < w {
                                acc += x.data()[((n * c + ch) * h + r) * w + s].f64();
                                count += 1;
                            }
                        }
                    }
                    out.push(T::c(acc / count as f64));
                }
            }
        }
    }
    Tensor::new(&[b, c, rows.len(), cols.len()], out).expect("consistent shape")
}

pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Vec<f64> {
    let hw = x.shape()[2] * x.shape()[3];
    x.data()
        .chunks(hw)
        .map(|p| p.iter().map(|v| v.f64()).sum::<f64>() / hw as f64)
        .collect()
}

pub fn global_max_pool<T: Scalar>(x: &Tensor<T>) -> Vec<f64> {
    let hw = x.shape()[2] * x.shape()[3];
    x.data()
        .chunks(hw)
        .map(|p| p.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

/// Unshifted softmax of each row.
pub fn softmax_naive(logits: &[f64], cols: usize) -> Vec<f64> {
    logits
        .chunks(cols)
        .flat_map(|row| {
            let e: Vec<f64> = row.iter().map(|v| v.exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(move |v| v / z)
        })
        .collect()
}
