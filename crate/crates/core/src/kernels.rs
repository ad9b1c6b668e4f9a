//! Raw slice kernels behind the tensor operations.
//!
//! Convolutions are 3x3, stride 1, zero padding 1. All loops run in a fixed
//! order so results are bit-reproducible.

use crate::tensor::Real;

/// Geometry of a batched convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvDims {
    fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Column range `[lo, hi)` of output positions whose tap `kx` lands inside the row.
#[inline]
fn tap_cols(kx: usize, width: usize) -> (usize, usize) {
    match kx {
        0 => (1, width),
        1 => (0, width),
        _ => (0, width.saturating_sub(1)),
    }
}

#[inline]
fn axpy<T: Real>(dst: &mut [T], src: &[T], alpha: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + alpha * s;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

pub(crate) fn conv2d_forward<T: Real>(
    dims: ConvDims,
    input: &[T],
    weight: &[T],
    bias: &[T],
    out: &mut [T],
) {
    let ConvDims {
        batch,
        in_c,
        out_c,
        height: h,
        width: w,
    } = dims;
    let plane = dims.plane();
    for n in 0..batch {
        for o in 0..out_c {
            let dst = &mut out[(n * out_c + o) * plane..][..plane];
            dst.fill(bias[o]);
            for c in 0..in_c {
                let src = &input[(n * in_c + c) * plane..][..plane];
                let k = &weight[(o * in_c + c) * 9..][..9];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = k[ky * 3 + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let (x0, x1) = tap_cols(kx, w);
                        if x0 >= x1 {
                            continue;
                        }
                        for y in 0..h {
                            let iy = y + ky;
                            if iy == 0 || iy > h {
                                continue;
                            }
                            let iy = iy - 1;
                            let d = &mut dst[y * w + x0..y * w + x1];
                            let s = &src[iy * w + x0 + kx - 1..iy * w + x1 + kx - 1];
                            axpy(d, s, wv);
                        }
                    }
                }
            }
        }
    }
}

/// Gradient with respect to the convolution input.
pub(crate) fn conv2d_backward_input<T: Real>(
    dims: ConvDims,
    grad_out: &[T],
    weight: &[T],
    grad_in: &mut [T],
) {
    let ConvDims {
        batch,
        in_c,
        out_c,
        height: h,
        width: w,
    } = dims;
    let plane = dims.plane();
    for n in 0..batch {
        for c in 0..in_c {
            let dst = &mut grad_in[(n * in_c + c) * plane..][..plane];
            for o in 0..out_c {
                let src = &grad_out[(n * out_c + o) * plane..][..plane];
                let k = &weight[(o * in_c + c) * 9..][..9];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = k[ky * 3 + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        // out[y, x] reads in[y + ky - 1, x + kx - 1]
                        let (x0, x1) = tap_cols(kx, w);
                        if x0 >= x1 {
                            continue;
                        }
                        for y in 0..h {
                            let iy = y + ky;
                            if iy == 0 || iy > h {
                                continue;
                            }
                            let iy = iy - 1;
                            let d = &mut dst[iy * w + x0 + kx - 1..iy * w + x1 + kx - 1];
                            let s = &src[y * w + x0..y * w + x1];
                            axpy(d, s, wv);
                        }
                    }
                }
            }
        }
    }
}

/// Gradients with respect to weights and bias, accumulated into the outputs.
pub(crate) fn conv2d_backward_params<T: Real>(
    dims: ConvDims,
    grad_out: &[T],
    input: &[T],
    grad_weight: &mut [T],
    grad_bias: &mut [T],
) {
    let ConvDims {
        batch,
        in_c,
        out_c,
        height: h,
        width: w,
    } = dims;
    let plane = dims.plane();
    for n in 0..batch {
        for o in 0..out_c {
            let g = &grad_out[(n * out_c + o) * plane..][..plane];
            grad_bias[o] = grad_bias[o] + g.iter().copied().sum::<T>();
            for c in 0..in_c {
                let src = &input[(n * in_c + c) * plane..][..plane];
                let k = &mut grad_weight[(o * in_c + c) * 9..][..9];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (x0, x1) = tap_cols(kx, w);
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = T::zero();
                        for y in 0..h {
                            let iy = y + ky;
                            if iy == 0 || iy > h {
                                continue;
                            }
                            let iy = iy - 1;
                            acc = acc
                                + dot(
                                    &g[y * w + x0..y * w + x1],
                                    &src[iy * w + x0 + kx - 1..iy * w + x1 + kx - 1],
                                );
                        }
                        k[ky * 3 + kx] = k[ky * 3 + kx] + acc;
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn leaky_relu<T: Real>(v: T, slope: T) -> T {
    if v >= T::zero() {
        v
    } else {
        slope * v
    }
}

#[inline]
pub(crate) fn leaky_relu_grad<T: Real>(v: T, slope: T) -> T {
    if v >= T::zero() {
        T::one()
    } else {
        slope
    }
}

/// Logistic function, clamped to the open interval `(0, 1)`.
#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    let s = if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    };
    let upper = T::one() - T::epsilon() / T::of(2.0);
    s.max(T::min_positive_value()).min(upper)
}
