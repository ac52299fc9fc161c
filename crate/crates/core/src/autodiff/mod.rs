//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! A [`Graph`] records every forward op together with whatever it needs for
//! the backward pass. Nodes are appended in execution order, so a reverse
//! sweep over the tape is a valid topological order.

pub mod container;
pub mod conv;
pub mod norm;
pub mod resize;
pub mod softmax;

use std::sync::atomic::{AtomicU64, Ordering};

pub use container::{read_container, write_container, ContainerHeader, NamedArray};
pub use conv::{atrous_conv2d, ConvSpec, ConvWeights};
pub use norm::{batch_norm, Mode, RunningStats};
pub use resize::{bilinear_resize, bilinear_resize_grad, resize_by_factor, Padding};
pub use softmax::softmax_channels;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one particular [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        dilation: usize,
    },
    Depthwise {
        x: Var,
        w: Var,
        stride: usize,
        dilation: usize,
    },
    BatchNormTrain {
        gamma: Var,
        beta: Var,
        x: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Resize {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    ReflectPad {
        x: Var,
        pad: Padding,
    },
    Crop {
        x: Var,
        top: usize,
        left: usize,
    },
    Softmax {
        x: Var,
    },
    WeightedCe {
        logits: Var,
        probs: Tensor<T>,
        targets: Vec<u8>,
        weights: Vec<f64>,
        ignore: u8,
        normalizer: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::Usage(
                "variable was not recorded on this graph (no forward pass recorded)".into(),
            ));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Leaf => false,
            _ => inputs.iter().any(|v| self.nodes[v.index].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// A leaf whose gradient is tracked (weights, or inputs under test).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, &[]);
        self.nodes[v.index].needs_grad = true;
        v
    }

    /// A leaf treated as a constant by [`Graph::backward`].
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.graph, self.id, "variable belongs to another graph");
        &self.nodes[v.index].value
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        dilation: usize,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        if let Some(b) = bias {
            self.check(b)?;
        }
        let out = conv::conv_forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b).data()),
            stride,
            dilation,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(
            out,
            Op::Conv {
                x,
                w,
                bias,
                stride,
                dilation,
            },
            &inputs,
        ))
    }

    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize, dilation: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let out = conv::depthwise_forward(self.value(x), self.value(w), stride, dilation)?;
        Ok(self.push(
            out,
            Op::Depthwise {
                x,
                w,
                stride,
                dilation,
            },
            &[x, w],
        ))
    }

    /// Depthwise `k x k` atrous conv followed by a `1 x 1` pointwise conv.
    pub fn separable_conv2d(
        &mut self,
        x: Var,
        depthwise: Var,
        pointwise: Var,
        stride: usize,
        dilation: usize,
    ) -> Result<Var> {
        let mid = self.depthwise_conv2d(x, depthwise, stride, dilation)?;
        self.conv2d(mid, pointwise, None, 1, 1)
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: Mode,
        stats: &mut RunningStats,
    ) -> Result<Var> {
        for v in [x, gamma, beta] {
            self.check(v)?;
        }
        let xv = self.value(x);
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        norm::check_affine(xv, &g, &b)?;
        match mode {
            Mode::Train => {
                let fwd = norm::train_forward(xv, &g, &b, eps);
                stats.update(&fwd.mean, &fwd.var);
                Ok(self.push(
                    fwd.y,
                    Op::BatchNormTrain {
                        x,
                        gamma,
                        beta,
                        xhat: fwd.xhat,
                        inv_std: fwd.inv_std,
                    },
                    &[x, gamma, beta],
                ))
            }
            Mode::Eval => {
                let (mean, inv_std) = norm::frozen_stats::<T>(stats, eps)?;
                let y = norm::eval_forward(xv, &g, &b, &mean, &inv_std);
                Ok(self.push(
                    y,
                    Op::BatchNormEval {
                        x,
                        gamma,
                        beta,
                        mean,
                        inv_std,
                    },
                    &[x, gamma, beta],
                ))
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let y = self.value(x).map(|v| v.max(T::zero()));
        Ok(self.push(y, Op::Relu { x }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", &va.shape(), &vb.shape()));
        }
        let mut y = va.clone();
        y.add_assign(vb);
        Ok(self.push(y, Op::Add { a, b }, &[a, b]))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        for &p in parts {
            self.check(p)?;
        }
        let [b, _, h, w] = self.value(first).shape();
        let mut channels = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s[0] != b || s[2] != h || s[3] != w {
                return Err(Error::shape("concat", &self.value(first).shape(), &s));
            }
            channels += s[1];
        }
        let mut y = Tensor::zeros([b, channels, h, w]);
        let plane = h * w;
        for bi in 0..b {
            let mut c0 = 0;
            for &p in parts {
                let v = self.value(p);
                let n = v.channels() * plane;
                let dst = y.offset(bi, c0, 0, 0);
                y.data_mut()[dst..dst + n].copy_from_slice(v.item(bi));
                c0 += v.channels();
            }
        }
        Ok(self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    pub fn resize(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        self.check(x)?;
        let y = resize::bilinear_resize(self.value(x), height, width)?;
        Ok(self.push(y, Op::Resize { x }, &[x]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        let [b, c, _, _] = v.shape();
        let n = T::from_f64(v.plane_len() as f64);
        let y = Tensor::from_fn([b, c, 1, 1], |[bi, ci, _, _]| {
            v.plane(bi, ci).iter().copied().sum::<T>() / n
        });
        Ok(self.push(y, Op::GlobalAvgPool { x }, &[x]))
    }

    pub fn reflect_pad(&mut self, x: Var, pad: Padding) -> Result<Var> {
        self.check(x)?;
        let y = resize::reflect_pad(self.value(x), pad);
        Ok(self.push(y, Op::ReflectPad { x, pad }, &[x]))
    }

    pub fn crop(&mut self, x: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var> {
        self.check(x)?;
        let y = resize::crop(self.value(x), top, left, height, width)?;
        Ok(self.push(y, Op::Crop { x, top, left }, &[x]))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let y = softmax::softmax_channels(self.value(x));
        Ok(self.push(y, Op::Softmax { x }, &[x]))
    }

    /// Class-weighted mean cross-entropy; `targets` are `(batch, y, x)`-ordered
    /// class ids and `ignore` marks pixels that contribute nothing.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: Vec<u8>,
        weights: Vec<f64>,
        ignore: u8,
    ) -> Result<Var> {
        self.check(logits)?;
        let fwd = softmax::weighted_ce_forward(self.value(logits), &targets, &weights, ignore)?;
        Ok(self.push(
            Tensor::scalar(fwd.loss),
            Op::WeightedCe {
                logits,
                probs: fwd.probs,
                targets,
                weights,
                ignore,
                normalizer: fwd.normalizer,
            },
            &[logits],
        ))
    }

    /// Gradient of a scalar output with respect to every tracked leaf.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients<T>> {
        self.check(output)?;
        let shape = self.value(output).shape();
        self.backward(output, Tensor::full(shape, T::one()))
    }

    /// Propagates `upstream` (the gradient of some scalar with respect to
    /// `output`) back to every tracked leaf.
    pub fn backward(&self, output: Var, upstream: Tensor<T>) -> Result<Gradients<T>> {
        self.check(output)?;
        let out_shape = self.value(output).shape();
        if upstream.shape() != out_shape {
            return Err(Error::shape("backward upstream", &upstream.shape(), &out_shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[output.index] = Some(upstream);

        for i in (0..=output.index).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &gy, &mut grads)?;
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !(matches!(node.op, Op::Leaf) && node.needs_grad) {
                *g = None;
            }
        }
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.index].needs_grad
    }

    fn propagate(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let mut acc = |v: Var, g: Tensor<T>| accumulate(grads, v, g);
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                x,
                w,
                bias,
                stride,
                dilation,
            } => {
                let g = conv::conv_backward(
                    self.value(*x),
                    self.value(*w),
                    gy,
                    *stride,
                    *dilation,
                    self.wants(*x),
                    self.wants(*w),
                    bias.is_some_and(|b| self.wants(b)),
                )?;
                if let Some(dx) = g.dx {
                    acc(*x, dx);
                }
                if let Some(dw) = g.dw {
                    acc(*w, dw);
                }
                if let (Some(b), Some(db)) = (bias, g.db) {
                    let shape = self.value(*b).shape();
                    acc(*b, Tensor::from_vec(shape, db)?);
                }
            }
            Op::Depthwise {
                x,
                w,
                stride,
                dilation,
            } => {
                let (dx, dw) = conv::depthwise_backward(
                    self.value(*x),
                    self.value(*w),
                    gy,
                    *stride,
                    *dilation,
                    self.wants(*x),
                    self.wants(*w),
                )?;
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let g = self.value(*gamma).data().to_vec();
                let (dx, dgamma, dbeta) = norm::train_backward(gy, xhat, &g, inv_std);
                acc(*x, dx);
                acc(*gamma, Tensor::from_vec(self.value(*gamma).shape(), dgamma)?);
                acc(*beta, Tensor::from_vec(self.value(*beta).shape(), dbeta)?);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let g = self.value(*gamma).data().to_vec();
                let (dx, dgamma, dbeta) = norm::eval_backward(self.value(*x), gy, &g, mean, inv_std);
                acc(*x, dx);
                acc(*gamma, Tensor::from_vec(self.value(*gamma).shape(), dgamma)?);
                acc(*beta, Tensor::from_vec(self.value(*beta).shape(), dbeta)?);
            }
            Op::Relu { x } => {
                let mut dx = gy.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    if y <= T::zero() {
                        *d = T::zero();
                    }
                }
                acc(*x, dx);
            }
            Op::Add { a, b } => {
                acc(*a, gy.clone());
                acc(*b, gy.clone());
            }
            Op::Concat { parts } => {
                let [bsz, _, h, w] = gy.shape();
                let plane = h * w;
                let mut c0 = 0;
                for &p in parts {
                    let shape = self.value(p).shape();
                    let c = shape[1];
                    let mut part = Tensor::zeros(shape);
                    for bi in 0..bsz {
                        let src = gy.offset(bi, c0, 0, 0);
                        let dst = part.offset(bi, 0, 0, 0);
                        part.data_mut()[dst..dst + c * plane]
                            .copy_from_slice(&gy.data()[src..src + c * plane]);
                    }
                    c0 += c;
                    acc(p, part);
                }
            }
            Op::Resize { x } => {
                let v = self.value(*x);
                acc(*x, resize::bilinear_resize_grad(gy, v.height(), v.width())?);
            }
            Op::GlobalAvgPool { x } => {
                let v = self.value(*x);
                let n = T::from_f64(v.plane_len() as f64);
                let dx = Tensor::from_fn(v.shape(), |[b, c, _, _]| gy.get(b, c, 0, 0) / n);
                acc(*x, dx);
            }
            Op::ReflectPad { x, pad } => {
                let v = self.value(*x);
                acc(*x, resize::reflect_pad_grad(gy, *pad, v.height(), v.width()));
            }
            Op::Crop { x, top, left } => {
                let v = self.value(*x);
                acc(*x, resize::crop_grad(gy, *top, *left, v.height(), v.width()));
            }
            Op::Softmax { x } => {
                acc(*x, softmax::softmax_grad(&node.value, gy));
            }
            Op::WeightedCe {
                logits,
                probs,
                targets,
                weights,
                ignore,
                normalizer,
            } => {
                let dx = softmax::weighted_ce_backward(
                    probs,
                    targets,
                    weights,
                    *ignore,
                    *normalizer,
                    gy.data()[0],
                );
                acc(*logits, dx);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.index] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    graph: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when the leaf is untracked or the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get_mut(v.index).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests;
