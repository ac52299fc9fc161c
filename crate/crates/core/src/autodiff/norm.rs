//! Batch normalization over `(batch, height, width)` per channel.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
/// Weight kept by the running statistics on each update.
pub const MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running mean and (biased) variance of one normalization layer.
///
/// The first training batch initializes the statistics directly; later
/// batches blend in with `running = MOMENTUM * running + (1 - MOMENTUM) * batch`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub initialized: bool,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            initialized: false,
        }
    }

    pub fn update(&mut self, mean: &[f64], var: &[f64]) {
        if !self.initialized {
            self.mean = mean.to_vec();
            self.var = var.to_vec();
            self.initialized = true;
            return;
        }
        for (r, &m) in self.mean.iter_mut().zip(mean) {
            *r = MOMENTUM * *r + (1.0 - MOMENTUM) * m;
        }
        for (r, &v) in self.var.iter_mut().zip(var) {
            *r = MOMENTUM * *r + (1.0 - MOMENTUM) * v;
        }
    }
}

pub(crate) struct TrainForward<T> {
    pub y: Tensor<T>,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub(crate) fn check_affine<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T]) -> Result<()> {
    let c = x.channels();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(
            "batch_norm gamma/beta",
            &x.shape(),
            &[gamma.len(), beta.len()],
        ));
    }
    Ok(())
}

fn gather_channel<T: Scalar>(x: &Tensor<T>, c: usize) -> Vec<T> {
    let mut v = Vec::with_capacity(x.batch() * x.plane_len());
    for b in 0..x.batch() {
        v.extend_from_slice(x.plane(b, c));
    }
    v
}

fn scatter_channels<T: Scalar>(shape: [usize; 4], channels: Vec<Vec<T>>) -> Tensor<T> {
    let mut out = Tensor::zeros(shape);
    let plane = shape[2] * shape[3];
    for (c, vals) in channels.into_iter().enumerate() {
        for b in 0..shape[0] {
            let start = out.offset(b, c, 0, 0);
            out.data_mut()[start..start + plane].copy_from_slice(&vals[b * plane..(b + 1) * plane]);
        }
    }
    out
}

pub(crate) fn train_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> TrainForward<T> {
    let n = (x.batch() * x.plane_len()) as f64;
    let per_channel: Vec<(Vec<T>, Vec<T>, T, f64, f64)> = (0..x.channels())
        .into_par_iter()
        .map(|c| {
            let vals = gather_channel(x, c);
            let mean = vals.iter().map(|v| v.as_f64()).sum::<f64>() / n;
            let var = vals
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / n;
            let inv_std = 1.0 / (var + eps).sqrt();
            let xhat: Vec<T> = vals
                .iter()
                .map(|v| T::from_f64((v.as_f64() - mean) * inv_std))
                .collect();
            let y = xhat.iter().map(|&h| gamma[c] * h + beta[c]).collect();
            (y, xhat, T::from_f64(inv_std), mean, var)
        })
        .collect();
    let shape = x.shape();
    let mut ys = Vec::with_capacity(per_channel.len());
    let mut xhats = Vec::with_capacity(per_channel.len());
    let mut inv_std = Vec::new();
    let mut mean = Vec::new();
    let mut var = Vec::new();
    for (y, h, s, m, v) in per_channel {
        ys.push(y);
        xhats.push(h);
        inv_std.push(s);
        mean.push(m);
        var.push(v);
    }
    TrainForward {
        y: scatter_channels(shape, ys),
        xhat: scatter_channels(shape, xhats),
        inv_std,
        mean,
        var,
    }
}

/// Returns `(dx, dgamma, dbeta)` for the batch-statistics forward.
pub(crate) fn train_backward<T: Scalar>(
    gy: &Tensor<T>,
    xhat: &Tensor<T>,
    gamma: &[T],
    inv_std: &[T],
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let n = T::from_f64((gy.batch() * gy.plane_len()) as f64);
    let per_channel: Vec<(Vec<T>, T, T)> = (0..gy.channels())
        .into_par_iter()
        .map(|c| {
            let g = gather_channel(gy, c);
            let h = gather_channel(xhat, c);
            let dbeta: T = g.iter().copied().sum();
            let dgamma: T = g.iter().zip(&h).map(|(&a, &b)| a * b).sum();
            let scale = gamma[c] * inv_std[c] / n;
            let dx = g
                .iter()
                .zip(&h)
                .map(|(&gv, &hv)| scale * (n * gv - dbeta - hv * dgamma))
                .collect();
            (dx, dgamma, dbeta)
        })
        .collect();
    let mut dxs = Vec::new();
    let mut dgamma = Vec::new();
    let mut dbeta = Vec::new();
    for (dx, dg, db) in per_channel {
        dxs.push(dx);
        dgamma.push(dg);
        dbeta.push(db);
    }
    (scatter_channels(gy.shape(), dxs), dgamma, dbeta)
}

/// Normalization with frozen statistics: `y = gamma * (x - mean) * inv_std + beta`.
pub(crate) fn eval_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    inv_std: &[T],
) -> Tensor<T> {
    let mut y = x.clone();
    let c = x.channels();
    let plane = x.plane_len();
    y.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(p, vals)| {
            let ch = p % c;
            let (m, s, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for v in vals {
                *v = g * (*v - m) * s + b;
            }
        });
    y
}

pub(crate) fn eval_backward<T: Scalar>(
    x: &Tensor<T>,
    gy: &Tensor<T>,
    gamma: &[T],
    mean: &[T],
    inv_std: &[T],
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let c = x.channels();
    let mut dx = gy.clone();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..x.batch() {
        for ch in 0..c {
            let xs = x.plane(b, ch);
            let gs = gy.plane(b, ch);
            let mut dg = T::zero();
            let mut db = T::zero();
            for (&xv, &gv) in xs.iter().zip(gs) {
                dg += gv * (xv - mean[ch]) * inv_std[ch];
                db += gv;
            }
            dgamma[ch] += dg;
            dbeta[ch] += db;
        }
    }
    let plane = x.plane_len();
    dx.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(p, vals)| {
            let s = gamma[p % c] * inv_std[p % c];
            for v in vals {
                *v *= s;
            }
        });
    (dx, dgamma, dbeta)
}

/// Batch normalization outside of a recorded graph. Train mode normalizes
/// with batch statistics and updates `stats`; eval mode requires `stats` to
/// have seen at least one training batch.
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
    mode: Mode,
    stats: &mut RunningStats,
) -> Result<Tensor<T>> {
    check_affine(x, gamma, beta)?;
    if eps <= 0.0 {
        return Err(Error::Validation(format!("batch_norm eps must be > 0, got {eps}")));
    }
    match mode {
        Mode::Train => {
            let fwd = train_forward(x, gamma, beta, eps);
            stats.update(&fwd.mean, &fwd.var);
            Ok(fwd.y)
        }
        Mode::Eval => {
            let (mean, inv_std) = frozen_stats::<T>(stats, eps)?;
            Ok(eval_forward(x, gamma, beta, &mean, &inv_std))
        }
    }
}

pub(crate) fn frozen_stats<T: Scalar>(stats: &RunningStats, eps: f64) -> Result<(Vec<T>, Vec<T>)> {
    if !stats.initialized {
        return Err(Error::State(
            "batch_norm eval mode before any training step (running statistics uninitialized)"
                .into(),
        ));
    }
    let mean = stats.mean.iter().map(|&m| T::from_f64(m)).collect();
    let inv_std = stats
        .var
        .iter()
        .map(|&v| T::from_f64(1.0 / (v + eps).sqrt()))
        .collect();
    Ok((mean, inv_std))
}
