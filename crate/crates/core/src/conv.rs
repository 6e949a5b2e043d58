//! Stride-1 "same" 2-d convolution kernels on single `[C, H, W]` images.

use crate::scalar::Scalar;
use crate::tensor::{matmul, transpose};

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub dilation: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        (self.dilation * (self.k / 2)) as isize
    }

    /// Output rows/cols touched by tap offset `off` along an axis of length `n`.
    #[inline]
    fn valid(off: isize, n: usize) -> (usize, usize) {
        let lo = (-off).max(0) as usize;
        let hi = (n as isize - off).clamp(0, n as isize) as usize;
        (lo.min(hi), hi)
    }

    #[inline]
    fn taps(&self) -> impl Iterator<Item = (usize, isize, isize)> + '_ {
        let pad = self.pad();
        let d = self.dilation as isize;
        let k = self.k;
        (0..k * k).map(move |t| {
            let ky = (t / k) as isize;
            let kx = (t % k) as isize;
            (t, ky * d - pad, kx * d - pad)
        })
    }
}

/// `[c_in * k * k, h * w]` patch matrix; out-of-image taps are zero.
fn im2col<T: Scalar>(input: &[T], g: ConvGeom) -> Vec<T> {
    let hw = g.h * g.w;
    let kk = g.k * g.k;
    let mut cols = vec![T::zero(); g.c_in * kk * hw];
    for ci in 0..g.c_in {
        let src = &input[ci * hw..(ci + 1) * hw];
        for (t, dy, dx) in g.taps() {
            let dst = &mut cols[(ci * kk + t) * hw..(ci * kk + t + 1) * hw];
            let (y0, y1) = ConvGeom::valid(dy, g.h);
            let (x0, x1) = ConvGeom::valid(dx, g.w);
            if x0 >= x1 {
                continue;
            }
            for y in y0..y1 {
                let sy = (y as isize + dy) as usize;
                let sx0 = (x0 as isize + dx) as usize;
                dst[y * g.w + x0..y * g.w + x1].copy_from_slice(&src[sy * g.w + sx0..sy * g.w + sx0 + (x1 - x0)]);
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im<T: Scalar>(cols: &[T], g: ConvGeom) -> Vec<T> {
    let hw = g.h * g.w;
    let kk = g.k * g.k;
    let mut out = vec![T::zero(); g.c_in * hw];
    for ci in 0..g.c_in {
        let dst = &mut out[ci * hw..(ci + 1) * hw];
        for (t, dy, dx) in g.taps() {
            let src = &cols[(ci * kk + t) * hw..(ci * kk + t + 1) * hw];
            let (y0, y1) = ConvGeom::valid(dy, g.h);
            let (x0, x1) = ConvGeom::valid(dx, g.w);
            if x0 >= x1 {
                continue;
            }
            for y in y0..y1 {
                let sy = (y as isize + dy) as usize;
                let sx0 = (x0 as isize + dx) as usize;
                let d = &mut dst[sy * g.w + sx0..sy * g.w + sx0 + (x1 - x0)];
                for (o, &v) in d.iter_mut().zip(&src[y * g.w + x0..y * g.w + x1]) {
                    *o += v;
                }
            }
        }
    }
    out
}

pub fn conv2d_forward<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: ConvGeom,
) -> Vec<T> {
    let hw = g.h * g.w;
    let kdim = g.c_in * g.k * g.k;
    let mut out = if g.k == 1 {
        matmul(weight, input, g.c_out, kdim, hw)
    } else {
        matmul(weight, &im2col(input, g), g.c_out, kdim, hw)
    };
    if let Some(b) = bias {
        for (plane, &bv) in out.chunks_mut(hw).zip(b) {
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    g: ConvGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hw = g.h * g.w;
    let kdim = g.c_in * g.k * g.k;
    let gb = grad_out.chunks(hw).map(|p| p.iter().copied().sum()).collect();
    let owned;
    let cols: &[T] = if g.k == 1 {
        input
    } else {
        owned = im2col(input, g);
        &owned
    };
    // dW = dY cols^T, dcols = W^T dY
    let gw = matmul(grad_out, &transpose(cols, kdim, hw), g.c_out, hw, kdim);
    let gcols = matmul(&transpose(weight, g.c_out, kdim), grad_out, kdim, g.c_out, hw);
    let gi = if g.k == 1 { gcols } else { col2im(&gcols, g) };
    (gi, gw, gb)
}

/// Max pooling with a square window equal to the stride; trailing partial
/// windows are kept, so the output is `ceil(h / f) x ceil(w / f)`.
pub fn max_pool<T: Scalar>(input: &[T], c: usize, h: usize, w: usize, f: usize) -> (Vec<T>, usize, usize) {
    let oh = h.div_ceil(f);
    let ow = w.div_ceil(f);
    let mut out = vec![T::neg_infinity(); c * oh * ow];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = input[(ch * h + y) * w + x];
                let o = &mut out[(ch * oh + y / f) * ow + x / f];
                if v > *o {
                    *o = v;
                }
            }
        }
    }
    (out, oh, ow)
}
