//! Atrous (dilated) convolutions with "same" zero padding.
//!
//! For kernel size `k` (odd), stride `s` and rate `r`:
//!
//! ```text
//! out[b,o,i,j] = sum_{c,u,v} w[o,c,u,v] * x[b, c, i*s + r*(u - k/2), j*s + r*(v - k/2)]
//! ```
//!
//! with out-of-range reads as zero and output size `ceil(H/s) x ceil(W/s)`.
//! Full convolutions go through im2col and a gemm; depthwise convolutions are
//! direct loops over each channel plane.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub dilation: usize,
    pub separable: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
            stride: 1,
            dilation: 1,
            separable: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn separable(mut self, separable: bool) -> Self {
        self.separable = separable;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(Error::Validation(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.dilation == 0 {
            return Err(Error::Validation("dilation rate must be >= 1".into()));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::Validation(format!(
                "stride must be 1 or 2, got {}",
                self.stride
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Validation("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Learnable weights, excluding any bias.
    pub fn param_count(&self) -> usize {
        let k2 = self.kernel_size * self.kernel_size;
        if self.separable {
            self.in_channels * k2 + self.in_channels * self.out_channels
        } else {
            self.in_channels * self.out_channels * k2
        }
    }

    /// Zero padding applied on each side.
    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel_size - 1) / 2
    }

    /// Spatial extent covered by one output pixel, `r*(k-1) + 1`.
    pub fn effective_extent(&self) -> usize {
        self.dilation * (self.kernel_size - 1) + 1
    }

    pub fn output_dims(&self, height: usize, width: usize) -> (usize, usize) {
        (out_dim(height, self.stride), out_dim(width, self.stride))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConvWeights<T> {
    /// `weight` is `[out, in, k, k]`; `bias` is `[out, 1, 1, 1]`.
    Full {
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
    },
    /// `depthwise` is `[in, 1, k, k]`; `pointwise` is `[out, in, 1, 1]`.
    Separable {
        depthwise: Tensor<T>,
        pointwise: Tensor<T>,
    },
}

/// Applies an atrous convolution (full or depthwise-separable) outside of any
/// recorded graph.
pub fn atrous_conv2d<T: Scalar>(
    x: &Tensor<T>,
    weights: &ConvWeights<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    if x.channels() != spec.in_channels {
        return Err(Error::shape(
            "atrous_conv2d input channels",
            &x.shape(),
            &[spec.in_channels],
        ));
    }
    let k = spec.kernel_size;
    match weights {
        ConvWeights::Full { weight, bias } => {
            let expected = [spec.out_channels, spec.in_channels, k, k];
            if weight.shape() != expected {
                return Err(Error::shape("atrous_conv2d weight", &weight.shape(), &expected));
            }
            conv_forward(
                x,
                weight,
                bias.as_ref().map(|b| b.data()),
                spec.stride,
                spec.dilation,
            )
        }
        ConvWeights::Separable {
            depthwise,
            pointwise,
        } => {
            let dw_shape = [spec.in_channels, 1, k, k];
            let pw_shape = [spec.out_channels, spec.in_channels, 1, 1];
            if depthwise.shape() != dw_shape {
                return Err(Error::shape("depthwise weight", &depthwise.shape(), &dw_shape));
            }
            if pointwise.shape() != pw_shape {
                return Err(Error::shape("pointwise weight", &pointwise.shape(), &pw_shape));
            }
            let mid = depthwise_forward(x, depthwise, spec.stride, spec.dilation)?;
            conv_forward(&mid, pointwise, None, 1, 1)
        }
    }
}

pub(crate) fn out_dim(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

/// Output indices `i` in `0..out` whose source `i*s + off` lies in `0..n`.
#[inline]
fn valid_range(out: usize, n: usize, stride: usize, off: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let hi = if (n as isize) - off <= 0 {
        0
    } else {
        ((n as isize - off) + s - 1) / s
    };
    let lo = (lo.max(0) as usize).min(out);
    let hi = (hi.max(0) as usize).min(out);
    (lo, hi.max(lo))
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    k: usize,
    stride: usize,
    dilation: usize,
}

impl Geometry {
    fn offset(&self, u: usize) -> isize {
        self.dilation as isize * (u as isize - (self.k / 2) as isize)
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }
}

fn im2col<T: Scalar>(g: &Geometry, x: &[T], cols: &mut [T]) {
    let hw_out = g.ho * g.wo;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for u in 0..g.k {
            let dy = g.offset(u);
            let (i0, i1) = valid_range(g.ho, g.h, g.stride, dy);
            for v in 0..g.k {
                let dx = g.offset(v);
                let (j0, j1) = valid_range(g.wo, g.w, g.stride, dx);
                let row = ((c * g.k + u) * g.k + v) * hw_out;
                let dst = &mut cols[row..row + hw_out];
                dst.fill(T::zero());
                for i in i0..i1 {
                    let sy = (i * g.stride) as isize + dy;
                    let src_row = &plane[sy as usize * g.w..(sy as usize + 1) * g.w];
                    let out_row = &mut dst[i * g.wo..(i + 1) * g.wo];
                    for j in j0..j1 {
                        let sx = (j * g.stride) as isize + dx;
                        out_row[j] = src_row[sx as usize];
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &Geometry, cols: &[T], dx_item: &mut [T]) {
    let hw_out = g.ho * g.wo;
    for c in 0..g.c {
        let plane = &mut dx_item[c * g.h * g.w..(c + 1) * g.h * g.w];
        for u in 0..g.k {
            let dy = g.offset(u);
            let (i0, i1) = valid_range(g.ho, g.h, g.stride, dy);
            for v in 0..g.k {
                let dx = g.offset(v);
                let (j0, j1) = valid_range(g.wo, g.w, g.stride, dx);
                let row = ((c * g.k + u) * g.k + v) * hw_out;
                let src = &cols[row..row + hw_out];
                for i in i0..i1 {
                    let sy = (i * g.stride) as isize + dy;
                    let dst_row = &mut plane[sy as usize * g.w..(sy as usize + 1) * g.w];
                    let col_row = &src[i * g.wo..(i + 1) * g.wo];
                    for j in j0..j1 {
                        let sx = (j * g.stride) as isize + dx;
                        dst_row[sx as usize] += col_row[j];
                    }
                }
            }
        }
    }
}

fn full_geometry<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    dilation: usize,
) -> Result<Geometry> {
    let [_, c, h, wd] = x.shape();
    let [_, wc, k, k2] = w.shape();
    if wc != c || k != k2 || k % 2 == 0 {
        return Err(Error::shape("conv2d input vs weight", &x.shape(), &w.shape()));
    }
    Ok(Geometry {
        c,
        h,
        w: wd,
        ho: out_dim(h, stride),
        wo: out_dim(wd, stride),
        k,
        stride,
        dilation,
    })
}

pub(crate) fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    dilation: usize,
) -> Result<Tensor<T>> {
    let g = full_geometry(x, w, stride, dilation)?;
    let cout = w.batch();
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::shape("conv2d bias", &[b.len()], &[cout]));
        }
    }
    let ckk = g.c * g.k * g.k;
    let hw_out = g.ho * g.wo;
    let mut out = Tensor::zeros([x.batch(), cout, g.ho, g.wo]);
    out.data_mut()
        .par_chunks_mut(cout * hw_out)
        .enumerate()
        .for_each(|(b, out_item)| {
            let x_item = x.item(b);
            let mut cols_buf;
            let cols: &[T] = if g.is_pointwise() {
                x_item
            } else {
                cols_buf = vec![T::zero(); ckk * hw_out];
                im2col(&g, x_item, &mut cols_buf);
                &cols_buf
            };
            T::gemm(
                false,
                false,
                cout,
                hw_out,
                ckk,
                T::one(),
                w.data(),
                cols,
                T::zero(),
                out_item,
            );
            if let Some(bias) = bias {
                for (o, &bv) in bias.iter().enumerate() {
                    for v in &mut out_item[o * hw_out..(o + 1) * hw_out] {
                        *v += bv;
                    }
                }
            }
        });
    Ok(out)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    dilation: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> Result<ConvGrads<T>> {
    let g = full_geometry(x, w, stride, dilation)?;
    let cout = w.batch();
    let ckk = g.c * g.k * g.k;
    let hw_out = g.ho * g.wo;
    let per_item: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..x.batch())
        .into_par_iter()
        .map(|b| {
            let gy_item = gy.item(b);
            let x_item = x.item(b);
            let dw = need_dw.then(|| {
                let mut cols_buf;
                let cols: &[T] = if g.is_pointwise() {
                    x_item
                } else {
                    cols_buf = vec![T::zero(); ckk * hw_out];
                    im2col(&g, x_item, &mut cols_buf);
                    &cols_buf
                };
                let mut dw = vec![T::zero(); cout * ckk];
                T::gemm(
                    false,
                    true,
                    cout,
                    ckk,
                    hw_out,
                    T::one(),
                    gy_item,
                    cols,
                    T::zero(),
                    &mut dw,
                );
                dw
            });
            let dx = need_dx.then(|| {
                let mut dx_item = vec![T::zero(); g.c * g.h * g.w];
                if g.is_pointwise() {
                    T::gemm(
                        true,
                        false,
                        ckk,
                        hw_out,
                        cout,
                        T::one(),
                        w.data(),
                        gy_item,
                        T::zero(),
                        &mut dx_item,
                    );
                } else {
                    let mut dcols = vec![T::zero(); ckk * hw_out];
                    T::gemm(
                        true,
                        false,
                        ckk,
                        hw_out,
                        cout,
                        T::one(),
                        w.data(),
                        gy_item,
                        T::zero(),
                        &mut dcols,
                    );
                    col2im(&g, &dcols, &mut dx_item);
                }
                dx_item
            });
            (dx, dw)
        })
        .collect();

    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let item_len = x.item_len();
    for (b, (dx_item, dw_item)) in per_item.into_iter().enumerate() {
        if let (Some(dx), Some(src)) = (dx.as_mut(), dx_item) {
            dx.data_mut()[b * item_len..(b + 1) * item_len].copy_from_slice(&src);
        }
        if let (Some(dw), Some(src)) = (dw.as_mut(), dw_item) {
            for (a, s) in dw.data_mut().iter_mut().zip(src) {
                *a += s;
            }
        }
    }
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); cout];
        for b in 0..gy.batch() {
            for (o, acc) in db.iter_mut().enumerate() {
                *acc += gy.plane(b, o).iter().copied().sum::<T>();
            }
        }
        db
    });
    Ok(ConvGrads { dx, dw, db })
}

fn depthwise_geometry<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    dilation: usize,
) -> Result<Geometry> {
    let [_, c, h, wd] = x.shape();
    let [wc, one, k, k2] = w.shape();
    if wc != c || one != 1 || k != k2 || k % 2 == 0 {
        return Err(Error::shape("depthwise input vs weight", &x.shape(), &w.shape()));
    }
    Ok(Geometry {
        c,
        h,
        w: wd,
        ho: out_dim(h, stride),
        wo: out_dim(wd, stride),
        k,
        stride,
        dilation,
    })
}

pub(crate) fn depthwise_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    dilation: usize,
) -> Result<Tensor<T>> {
    let g = depthwise_geometry(x, w, stride, dilation)?;
    let mut out = Tensor::zeros([x.batch(), g.c, g.ho, g.wo]);
    let kk = g.k * g.k;
    out.data_mut()
        .par_chunks_mut(g.ho * g.wo)
        .enumerate()
        .for_each(|(p, out_plane)| {
            let c = p % g.c;
            let plane = x.plane(p / g.c, c);
            let kernel = &w.data()[c * kk..(c + 1) * kk];
            for u in 0..g.k {
                let dy = g.offset(u);
                let (i0, i1) = valid_range(g.ho, g.h, g.stride, dy);
                for v in 0..g.k {
                    let dx = g.offset(v);
                    let (j0, j1) = valid_range(g.wo, g.w, g.stride, dx);
                    if j0 == j1 {
                        continue;
                    }
                    let wv = kernel[u * g.k + v];
                    for i in i0..i1 {
                        let sy = ((i * g.stride) as isize + dy) as usize;
                        let src = &plane[sy * g.w..(sy + 1) * g.w];
                        let dst = &mut out_plane[i * g.wo..(i + 1) * g.wo];
                        if g.stride == 1 {
                            let sx0 = (j0 as isize + dx) as usize;
                            for (d, &s) in dst[j0..j1].iter_mut().zip(&src[sx0..sx0 + j1 - j0]) {
                                *d += wv * s;
                            }
                        } else {
                            for j in j0..j1 {
                                let sx = ((j * g.stride) as isize + dx) as usize;
                                dst[j] += wv * src[sx];
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

pub(crate) fn depthwise_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    dilation: usize,
    need_dx: bool,
    need_dw: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let g = depthwise_geometry(x, w, stride, dilation)?;
    let kk = g.k * g.k;
    let planes = x.batch() * g.c;
    let per_plane: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..planes)
        .into_par_iter()
        .map(|p| {
            let (b, c) = (p / g.c, p % g.c);
            let plane = x.plane(b, c);
            let gplane = gy.plane(b, c);
            let kernel = &w.data()[c * kk..(c + 1) * kk];
            let mut dx = need_dx.then(|| vec![T::zero(); g.h * g.w]);
            let mut dw = need_dw.then(|| vec![T::zero(); kk]);
            for u in 0..g.k {
                let dy = g.offset(u);
                let (i0, i1) = valid_range(g.ho, g.h, g.stride, dy);
                for v in 0..g.k {
                    let dxo = g.offset(v);
                    let (j0, j1) = valid_range(g.wo, g.w, g.stride, dxo);
                    let wv = kernel[u * g.k + v];
                    let mut acc = T::zero();
                    for i in i0..i1 {
                        let sy = ((i * g.stride) as isize + dy) as usize;
                        let grow = &gplane[i * g.wo..(i + 1) * g.wo];
                        for j in j0..j1 {
                            let sx = ((j * g.stride) as isize + dxo) as usize;
                            let gv = grow[j];
                            if let Some(dx) = dx.as_mut() {
                                dx[sy * g.w + sx] += wv * gv;
                            }
                            acc += gv * plane[sy * g.w + sx];
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[u * g.k + v] = acc;
                    }
                }
            }
            (dx, dw)
        })
        .collect();

    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let plane_len = g.h * g.w;
    for (p, (dx_plane, dw_plane)) in per_plane.into_iter().enumerate() {
        if let (Some(dx), Some(src)) = (dx.as_mut(), dx_plane) {
            dx.data_mut()[p * plane_len..(p + 1) * plane_len].copy_from_slice(&src);
        }
        if let (Some(dw), Some(src)) = (dw.as_mut(), dw_plane) {
            let c = p % g.c;
            for (a, s) in dw.data_mut()[c * kk..(c + 1) * kk].iter_mut().zip(src) {
                *a += s;
            }
        }
    }
    Ok((dx, dw))
}
