//! Per-pixel softmax over channels and the class-weighted cross-entropy.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Channel softmax at every pixel, with max-subtraction.
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = x.shape();
    let plane = h * w;
    let mut out = x.clone();
    let data = out.data_mut();
    let mut buf = vec![T::zero(); c];
    for bi in 0..b {
        let base = bi * c * plane;
        for p in 0..plane {
            let mut max = T::neg_infinity();
            for (k, slot) in buf.iter_mut().enumerate() {
                *slot = data[base + k * plane + p];
                max = max.max(*slot);
            }
            let mut total = T::zero();
            for slot in buf.iter_mut() {
                *slot = (*slot - max).exp();
                total += *slot;
            }
            for (k, &v) in buf.iter().enumerate() {
                data[base + k * plane + p] = v / total;
            }
        }
    }
    out
}

/// Backward of [`softmax_channels`] given its output `p`:
/// `dx_k = p_k * (dy_k - sum_j dy_j p_j)`.
pub(crate) fn softmax_grad<T: Scalar>(p: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = p.shape();
    let plane = h * w;
    let mut dx = Tensor::zeros(p.shape());
    for bi in 0..b {
        let base = bi * c * plane;
        for q in 0..plane {
            let mut dot = T::zero();
            for k in 0..c {
                let i = base + k * plane + q;
                dot += gy.data()[i] * p.data()[i];
            }
            for k in 0..c {
                let i = base + k * plane + q;
                dx.data_mut()[i] = p.data()[i] * (gy.data()[i] - dot);
            }
        }
    }
    dx
}

pub(crate) struct CeForward<T> {
    pub loss: T,
    pub probs: Tensor<T>,
    pub normalizer: T,
}

/// `sum_px w[y] * -log softmax(z)[y] / sum_px w[y]`, skipping `ignore` pixels.
///
/// `targets` are in `(batch, y, x)` order and must cover every pixel of `logits`.
pub(crate) fn weighted_ce_forward<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[u8],
    weights: &[f64],
    ignore: u8,
) -> Result<CeForward<T>> {
    let [b, c, h, w] = logits.shape();
    let plane = h * w;
    if targets.len() != b * plane {
        return Err(Error::shape(
            "cross-entropy targets",
            &logits.shape(),
            &[targets.len()],
        ));
    }
    if weights.len() != c {
        return Err(Error::shape("cross-entropy weights", &[c], &[weights.len()]));
    }
    let probs = softmax_channels(logits);
    let mut loss = 0.0f64;
    let mut normalizer = 0.0f64;
    for bi in 0..b {
        for q in 0..plane {
            let y = targets[bi * plane + q];
            if y == ignore {
                continue;
            }
            let y = y as usize;
            if y >= c {
                return Err(Error::Validation(format!(
                    "target class {y} out of range for {c} logit channels"
                )));
            }
            let wy = weights[y];
            if wy == 0.0 {
                continue;
            }
            // log-sum-exp directly on the logits for an accurate -log p_y
            let z = |k: usize| logits.data()[(bi * c + k) * plane + q].as_f64();
            let max = (0..c).map(z).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..c).map(|k| (z(k) - max).exp()).sum::<f64>().ln();
            loss += wy * (lse - z(y));
            normalizer += wy;
        }
    }
    if normalizer <= 0.0 {
        return Err(Error::NoContributingPixels);
    }
    Ok(CeForward {
        loss: T::from_f64(loss / normalizer),
        probs,
        normalizer: T::from_f64(normalizer),
    })
}

pub(crate) fn weighted_ce_backward<T: Scalar>(
    probs: &Tensor<T>,
    targets: &[u8],
    weights: &[f64],
    ignore: u8,
    normalizer: T,
    upstream: T,
) -> Tensor<T> {
    let [b, c, h, w] = probs.shape();
    let plane = h * w;
    let mut dx = Tensor::zeros(probs.shape());
    for bi in 0..b {
        for q in 0..plane {
            let y = targets[bi * plane + q];
            if y == ignore {
                continue;
            }
            let wy = T::from_f64(weights[y as usize]);
            if wy == T::zero() {
                continue;
            }
            let scale = upstream * wy / normalizer;
            for k in 0..c {
                let i = (bi * c + k) * plane + q;
                let delta = if k == y as usize { T::one() } else { T::zero() };
                dx.data_mut()[i] = scale * (probs.data()[i] - delta);
            }
        }
    }
    dx
}
