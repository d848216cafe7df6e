//! Single-sample layer kernels. Activations are channel-major `C x H x W`
//! buffers; convolution goes through im2col + GEMM.

use super::scalar::{gemm, Layout};
use super::Scalar;

/// A `C x H x W` activation map.
#[derive(Clone, Debug, PartialEq)]
pub struct Act<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Act<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![T::ZERO; c * h * w],
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// Static description of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_dim(&self, d: usize) -> usize {
        (d + 2 * self.pad - self.k) / self.stride + 1
    }

    #[cfg(test)]
    fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(x: &Act<T>, g: &ConvGeom, ho: usize, wo: usize) -> Vec<T> {
    let p = ho * wo;
    let mut cols = vec![T::ZERO; g.cin * g.k * g.k * p];
    for ci in 0..g.cin {
        let src = &x.data[ci * x.plane()..(ci + 1) * x.plane()];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    let srow = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < x.w as isize {
                            *d = srow[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, h: usize, w: usize, ho: usize, wo: usize) -> Vec<T> {
    let p = ho * wo;
    let mut out = vec![T::ZERO; g.cin * h * w];
    for ci in 0..g.cin {
        let dst = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    for (ox, s) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += *s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Convolution forward. Returns the output and the im2col buffer needed by
/// [`conv_backward`] (empty for pointwise convolutions, which reuse the input).
pub fn conv_forward<T: Scalar>(x: &Act<T>, g: &ConvGeom, weight: &[T], bias: &[T]) -> (Act<T>, Vec<T>) {
    debug_assert_eq!(x.c, g.cin);
    let ho = g.out_dim(x.h);
    let wo = g.out_dim(x.w);
    let p = ho * wo;
    let kk = g.cin * g.k * g.k;
    let mut out = Act::zeros(g.cout, ho, wo);
    for (co, b) in bias.iter().enumerate() {
        out.data[co * p..(co + 1) * p].fill(*b);
    }
    let cols = if g.is_pointwise() {
        Vec::new()
    } else {
        im2col(x, g, ho, wo)
    };
    let rhs = if g.is_pointwise() { &x.data } else { &cols };
    gemm(g.cout, kk, p, weight, Layout::N, rhs, Layout::N, T::ONE, &mut out.data);
    (out, cols)
}

/// Convolution backward: accumulates into `dweight`/`dbias`, returns the
/// input gradient when `need_dx`.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    x: &Act<T>,
    cols: &[T],
    g: &ConvGeom,
    weight: &[T],
    dout: &Act<T>,
    dweight: &mut [T],
    dbias: &mut [T],
    need_dx: bool,
) -> Option<Act<T>> {
    let (ho, wo) = (dout.h, dout.w);
    let p = ho * wo;
    let kk = g.cin * g.k * g.k;
    for (co, db) in dbias.iter_mut().enumerate() {
        let mut s = T::ZERO;
        for v in &dout.data[co * p..(co + 1) * p] {
            s += *v;
        }
        *db += s;
    }
    let lhs = if g.is_pointwise() { &x.data[..] } else { cols };
    // dW (cout x kk) += dout (cout x p) * cols^T (p x kk)
    gemm(g.cout, p, kk, &dout.data, Layout::N, lhs, Layout::T, T::ONE, dweight);
    if !need_dx {
        return None;
    }
    // dcols (kk x p) = W^T (kk x cout) * dout (cout x p)
    let mut dcols = vec![T::ZERO; kk * p];
    gemm(kk, g.cout, p, weight, Layout::T, &dout.data, Layout::N, T::ZERO, &mut dcols);
    if g.is_pointwise() {
        return Some(Act {
            c: g.cin,
            h: x.h,
            w: x.w,
            data: dcols,
        });
    }
    Some(Act {
        c: g.cin,
        h: x.h,
        w: x.w,
        data: col2im(&dcols, g, x.h, x.w, ho, wo),
    })
}

/// 2x2 stride-2 transposed convolution; weight layout `(cin, cout, 2, 2)`.
pub fn tconv_forward<T: Scalar>(x: &Act<T>, cout: usize, weight: &[T], bias: &[T]) -> Act<T> {
    let p = x.plane();
    let mut y = vec![T::ZERO; cout * 4 * p];
    // Y (cout*4 x p) = Wm^T (cout*4 x cin) * X (cin x p)
    gemm(cout * 4, x.c, p, weight, Layout::T, &x.data, Layout::N, T::ZERO, &mut y);
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut out = Act::zeros(cout, h2, w2);
    for co in 0..cout {
        let dst = &mut out.data[co * h2 * w2..(co + 1) * h2 * w2];
        for tap in 0..4 {
            let (a, b) = (tap / 2, tap % 2);
            let src = &y[(co * 4 + tap) * p..(co * 4 + tap + 1) * p];
            for i in 0..x.h {
                for j in 0..x.w {
                    dst[(2 * i + a) * w2 + 2 * j + b] = src[i * x.w + j] + bias[co];
                }
            }
        }
    }
    out
}

pub fn tconv_backward<T: Scalar>(
    x: &Act<T>,
    weight: &[T],
    dout: &Act<T>,
    dweight: &mut [T],
    dbias: &mut [T],
) -> Act<T> {
    let cout = dout.c;
    let p = x.plane();
    let (h2, w2) = (dout.h, dout.w);
    let mut dy = vec![T::ZERO; cout * 4 * p];
    for co in 0..cout {
        let src = &dout.data[co * h2 * w2..(co + 1) * h2 * w2];
        let mut s = T::ZERO;
        for v in src {
            s += *v;
        }
        dbias[co] += s;
        for tap in 0..4 {
            let (a, b) = (tap / 2, tap % 2);
            let dst = &mut dy[(co * 4 + tap) * p..(co * 4 + tap + 1) * p];
            for i in 0..x.h {
                for j in 0..x.w {
                    dst[i * x.w + j] = src[(2 * i + a) * w2 + 2 * j + b];
                }
            }
        }
    }
    // dWm (cin x cout*4) += X (cin x p) * dY^T (p x cout*4)
    gemm(x.c, p, cout * 4, &x.data, Layout::N, &dy, Layout::T, T::ONE, dweight);
    // dX (cin x p) = Wm (cin x cout*4) * dY (cout*4 x p)
    let mut dx = Act::zeros(x.c, x.h, x.w);
    gemm(x.c, cout * 4, p, weight, Layout::N, &dy, Layout::N, T::ZERO, &mut dx.data);
    dx
}

pub fn relu_inplace<T: Scalar>(a: &mut Act<T>) {
    for v in &mut a.data {
        if *v < T::ZERO {
            *v = T::ZERO;
        }
    }
}

/// Masks `grad` by the post-activation `out` (gradient flows where `out > 0`).
pub fn relu_backward_inplace<T: Scalar>(out: &Act<T>, grad: &mut Act<T>) {
    for (g, o) in grad.data.iter_mut().zip(&out.data) {
        if *o <= T::ZERO {
            *g = T::ZERO;
        }
    }
}

/// Channel concatenation `[a; b]`.
pub fn concat<T: Scalar>(a: &Act<T>, b: &Act<T>) -> Act<T> {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Act {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

/// Splits a concatenation gradient back into its `a.c` and remaining parts.
pub fn split<T: Scalar>(g: Act<T>, first_c: usize) -> (Act<T>, Act<T>) {
    let cut = first_c * g.h * g.w;
    let mut data = g.data;
    let rest = data.split_off(cut);
    (
        Act {
            c: first_c,
            h: g.h,
            w: g.w,
            data,
        },
        Act {
            c: g.c - first_c,
            h: g.h,
            w: g.w,
            data: rest,
        },
    )
}
