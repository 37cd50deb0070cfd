//! Forward and backward loops for the dense ops.
//!
//! All spatial convolutions use symmetric zero padding `(k - 1) / 2` and
//! produce `(H - 1) / stride + 1` output rows, so output position `o` is
//! centred on input position `o * stride` for every odd kernel extent. A
//! 5×5 kernel with a zeroed outer ring therefore computes exactly what its
//! 3×3 core computes.

use crate::scalar::Scalar;

pub(crate) fn out_extent(input: usize, stride: usize) -> usize {
    (input - 1) / stride + 1
}

/// Input coordinate for output `o` and kernel tap `tap`, if inside the image.
#[inline]
fn source(o: usize, tap: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let pos = (o * stride + tap).checked_sub(pad)?;
    (pos < extent).then_some(pos)
}

/// `a (m×k) · b (k×n)`.
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `a (m×n) · bᵀ` where `b` is `k×n`; result is `m×k`.
pub(crate) fn matmul_bt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        for p in 0..k {
            let mut acc = T::zero();
            for j in 0..n {
                acc = acc + a[i * n + j] * b[p * n + j];
            }
            out[i * k + p] = acc;
        }
    }
    out
}

/// `aᵀ · b` where `a` is `m×k` and `b` is `m×n`; result is `k×n`.
pub(crate) fn matmul_at<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct SpatialDims {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
}

impl SpatialDims {
    pub fn oh(&self) -> usize {
        out_extent(self.h, self.stride)
    }

    pub fn ow(&self) -> usize {
        out_extent(self.w, self.stride)
    }

    pub fn pad(&self) -> usize {
        (self.k - 1) / 2
    }
}

pub(crate) fn depthwise_forward<T: Scalar>(x: &[T], kern: &[T], d: SpatialDims, c: usize) -> Vec<T> {
    let (oh, ow, pad) = (d.oh(), d.ow(), d.pad());
    let mut out = vec![T::zero(); d.n * oh * ow * c];
    for n in 0..d.n {
        for y in 0..oh {
            for xo in 0..ow {
                let obase = ((n * oh + y) * ow + xo) * c;
                for i in 0..d.k {
                    let Some(iy) = source(y, i, d.stride, pad, d.h) else { continue };
                    for j in 0..d.k {
                        let Some(ix) = source(xo, j, d.stride, pad, d.w) else { continue };
                        let ibase = ((n * d.h + iy) * d.w + ix) * c;
                        let kbase = (i * d.k + j) * c;
                        for ch in 0..c {
                            out[obase + ch] = out[obase + ch] + x[ibase + ch] * kern[kbase + ch];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dkernel)`.
pub(crate) fn depthwise_backward<T: Scalar>(
    x: &[T],
    kern: &[T],
    grad: &[T],
    d: SpatialDims,
    c: usize,
) -> (Vec<T>, Vec<T>) {
    let (oh, ow, pad) = (d.oh(), d.ow(), d.pad());
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); kern.len()];
    for n in 0..d.n {
        for y in 0..oh {
            for xo in 0..ow {
                let obase = ((n * oh + y) * ow + xo) * c;
                for i in 0..d.k {
                    let Some(iy) = source(y, i, d.stride, pad, d.h) else { continue };
                    for j in 0..d.k {
                        let Some(ix) = source(xo, j, d.stride, pad, d.w) else { continue };
                        let ibase = ((n * d.h + iy) * d.w + ix) * c;
                        let kbase = (i * d.k + j) * c;
                        for ch in 0..c {
                            let g = grad[obase + ch];
                            dx[ibase + ch] = dx[ibase + ch] + g * kern[kbase + ch];
                            dk[kbase + ch] = dk[kbase + ch] + g * x[ibase + ch];
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], d: SpatialDims, cin: usize, cout: usize) -> Vec<T> {
    let (oh, ow, pad) = (d.oh(), d.ow(), d.pad());
    let mut out = vec![T::zero(); d.n * oh * ow * cout];
    for n in 0..d.n {
        for y in 0..oh {
            for xo in 0..ow {
                let obase = ((n * oh + y) * ow + xo) * cout;
                for i in 0..d.k {
                    let Some(iy) = source(y, i, d.stride, pad, d.h) else { continue };
                    for j in 0..d.k {
                        let Some(ix) = source(xo, j, d.stride, pad, d.w) else { continue };
                        let ibase = ((n * d.h + iy) * d.w + ix) * cin;
                        let wbase = (i * d.k + j) * cin * cout;
                        for ci in 0..cin {
                            let xv = x[ibase + ci];
                            let wrow = &w[wbase + ci * cout..wbase + (ci + 1) * cout];
                            for (co, &wv) in wrow.iter().enumerate() {
                                out[obase + co] = out[obase + co] + xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw)`.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    grad: &[T],
    d: SpatialDims,
    cin: usize,
    cout: usize,
) -> (Vec<T>, Vec<T>) {
    let (oh, ow, pad) = (d.oh(), d.ow(), d.pad());
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    for n in 0..d.n {
        for y in 0..oh {
            for xo in 0..ow {
                let obase = ((n * oh + y) * ow + xo) * cout;
                for i in 0..d.k {
                    let Some(iy) = source(y, i, d.stride, pad, d.h) else { continue };
                    for j in 0..d.k {
                        let Some(ix) = source(xo, j, d.stride, pad, d.w) else { continue };
                        let ibase = ((n * d.h + iy) * d.w + ix) * cin;
                        let wbase = (i * d.k + j) * cin * cout;
                        for ci in 0..cin {
                            let xv = x[ibase + ci];
                            let mut acc = T::zero();
                            for co in 0..cout {
                                let g = grad[obase + co];
                                let widx = wbase + ci * cout + co;
                                acc = acc + g * w[widx];
                                dw[widx] = dw[widx] + g * xv;
                            }
                            dx[ibase + ci] = dx[ibase + ci] + acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}
