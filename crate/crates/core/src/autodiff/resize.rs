//! Bilinear resizing with half-pixel centers (`align_corners = false`),
//! reflective padding and cropping.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Source sample positions: `src = max(0, (dst + 0.5) * in/out - 0.5)`,
/// neighbours clamped to the last row/column.
fn taps(out: usize, inp: usize) -> Vec<Tap> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(inp - 1);
            let hi = (lo + 1).min(inp - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

fn check_target(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::Validation(format!(
            "resize target must be at least 1x1, got {h}x{w}"
        )));
    }
    Ok(())
}

pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    check_target(height, width)?;
    let [b, c, h, w] = x.shape();
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    let ty = taps(height, h);
    let tx = taps(width, w);
    let mut out = Tensor::zeros([b, c, height, width]);
    out.data_mut()
        .par_chunks_mut(height * width)
        .enumerate()
        .for_each(|(p, dst)| {
            let src = x.plane(p / c, p % c);
            for (i, ty) in ty.iter().enumerate() {
                let fy = T::from_f64(ty.frac);
                let gy = T::one() - fy;
                let r0 = &src[ty.lo * w..(ty.lo + 1) * w];
                let r1 = &src[ty.hi * w..(ty.hi + 1) * w];
                for (j, tx) in tx.iter().enumerate() {
                    let fx = T::from_f64(tx.frac);
                    let gx = T::one() - fx;
                    dst[i * width + j] =
                        gy * (gx * r0[tx.lo] + fx * r0[tx.hi]) + fy * (gx * r1[tx.lo] + fx * r1[tx.hi]);
                }
            }
        });
    Ok(out)
}

pub fn resize_by_factor<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    bilinear_resize(x, x.height() * factor, x.width() * factor)
}

/// Adjoint of [`bilinear_resize`]: maps a gradient on the resized map back to
/// an input of `height x width`.
pub fn bilinear_resize_grad<T: Scalar>(
    gy: &Tensor<T>,
    height: usize,
    width: usize,
) -> Result<Tensor<T>> {
    check_target(height, width)?;
    let [b, c, oh, ow] = gy.shape();
    if (oh, ow) == (height, width) {
        return Ok(gy.clone());
    }
    let ty = taps(oh, height);
    let tx = taps(ow, width);
    let mut dx = Tensor::zeros([b, c, height, width]);
    dx.data_mut()
        .par_chunks_mut(height * width)
        .enumerate()
        .for_each(|(p, dst)| {
            let g = gy.plane(p / c, p % c);
            for (i, ty) in ty.iter().enumerate() {
                let fy = T::from_f64(ty.frac);
                let gyw = T::one() - fy;
                for (j, tx) in tx.iter().enumerate() {
                    let fx = T::from_f64(tx.frac);
                    let gxw = T::one() - fx;
                    let v = g[i * ow + j];
                    dst[ty.lo * width + tx.lo] += gyw * gxw * v;
                    dst[ty.lo * width + tx.hi] += gyw * fx * v;
                    dst[ty.hi * width + tx.lo] += fy * gxw * v;
                    dst[ty.hi * width + tx.hi] += fy * fx * v;
                }
            }
        });
    Ok(dx)
}

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`),
/// folded as often as needed for pads wider than the input.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    /// Smallest bottom/right padding that makes both dims multiples of `m`.
    pub fn to_multiple(height: usize, width: usize, m: usize) -> Self {
        Self {
            top: 0,
            bottom: height.next_multiple_of(m) - height,
            left: 0,
            right: width.next_multiple_of(m) - width,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.top + self.bottom + self.left + self.right == 0
    }
}

pub(crate) fn reflect_pad<T: Scalar>(x: &Tensor<T>, pad: Padding) -> Tensor<T> {
    let [b, c, h, w] = x.shape();
    let (oh, ow) = (h + pad.top + pad.bottom, w + pad.left + pad.right);
    let mut out = Tensor::zeros([b, c, oh, ow]);
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(p, dst)| {
            let src = x.plane(p / c, p % c);
            for i in 0..oh {
                let si = reflect_index(i as isize - pad.top as isize, h);
                for j in 0..ow {
                    let sj = reflect_index(j as isize - pad.left as isize, w);
                    dst[i * ow + j] = src[si * w + sj];
                }
            }
        });
    out
}

pub(crate) fn reflect_pad_grad<T: Scalar>(gy: &Tensor<T>, pad: Padding, h: usize, w: usize) -> Tensor<T> {
    let [b, c, oh, ow] = gy.shape();
    let mut dx = Tensor::zeros([b, c, h, w]);
    dx.data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(p, dst)| {
            let g = gy.plane(p / c, p % c);
            for i in 0..oh {
                let si = reflect_index(i as isize - pad.top as isize, h);
                for j in 0..ow {
                    let sj = reflect_index(j as isize - pad.left as isize, w);
                    dst[si * w + sj] += g[i * ow + j];
                }
            }
        });
    dx
}

pub(crate) fn crop<T: Scalar>(
    x: &Tensor<T>,
    top: usize,
    left: usize,
    height: usize,
    width: usize,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.shape();
    if top + height > h || left + width > w || height == 0 || width == 0 {
        return Err(Error::shape(
            "crop window",
            &x.shape(),
            &[top, left, height, width],
        ));
    }
    Ok(Tensor::from_fn([b, c, height, width], |[bi, ci, i, j]| {
        x.get(bi, ci, top + i, left + j)
    }))
}

pub(crate) fn crop_grad<T: Scalar>(
    gy: &Tensor<T>,
    top: usize,
    left: usize,
    h: usize,
    w: usize,
) -> Tensor<T> {
    let [b, c, ch, cw] = gy.shape();
    let mut dx = Tensor::zeros([b, c, h, w]);
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..ch {
                for j in 0..cw {
                    dx.set(bi, ci, top + i, left + j, gy.get(bi, ci, i, j));
                }
            }
        }
    }
    dx
}
