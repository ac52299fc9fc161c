#![allow(dead_code)]

pub mod oracles;

use glacio::autodiff::{Graph, Mode, Var};
use glacio::model::{NetworkSpec, ParameterSet};
use glacio::rng::SeedStream;
use glacio::Tensor;

pub const FD_STEP: f64 = 1e-5;

pub fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut rng = SeedStream::new(seed);
    Tensor::from_fn(shape, |_| rng.normal())
}

/// `sum(upstream * y)` for one fresh recording of `op`.
fn probe_loss<F>(inputs: &[Tensor<f64>], upstream: &Tensor<f64>, op: &F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let y = op(&mut g, &vars);
    g.value(y).dot(upstream)
}

/// Largest relative gap, over all inputs, between the tape gradient of
/// `sum(upstream * op(inputs))` and central differences. Each input's gap is
/// `max|analytic - numeric| / max(max|analytic|, max|numeric|)`.
pub fn fd_relative_error<F>(inputs: Vec<Tensor<f64>>, op: F, seed: u64) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let y = op(&mut g, &vars);
    let upstream = random(g.value(y).shape(), seed);
    let grads = g.backward(y, upstream.clone()).expect("backward");

    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut perturbed = inputs.clone();
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let x0 = inputs[i].data()[j];
            perturbed[i].data_mut()[j] = x0 + FD_STEP;
            let up = probe_loss(&perturbed, &upstream, &op);
            perturbed[i].data_mut()[j] = x0 - FD_STEP;
            let down = probe_loss(&perturbed, &upstream, &op);
            perturbed[i].data_mut()[j] = x0;
            *n = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_gap(analytic.data(), &numeric));
    }
    worst
}

pub fn relative_gap(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Narrow network with every optional part switched on.
pub fn probe_spec(num_classes: usize) -> NetworkSpec {
    NetworkSpec {
        base_channels: 4,
        aspp_channels: 4,
        decoder_channels: 4,
        low_level_channels: 4,
        skip_reduce_channels: 2,
        deep_u_lab: true,
        ..NetworkSpec::with_classes(num_classes)
    }
}

fn model_loss(params: &ParameterSet<f64>, input: &Tensor<f64>, targets: &[u8], weights: &[f64]) -> f64 {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let x = g.constant(input.clone());
    let fwd = params.forward(&mut g, &vars, x, Mode::Train).expect("forward");
    let loss = g
        .weighted_cross_entropy(fwd.logits, targets.to_vec(), weights.to_vec(), glacio::dataset::IGNORE)
        .expect("loss");
    g.value(loss).data()[0]
}

/// Central-difference check of the full training loss (forward pass plus
/// weighted cross-entropy) on a `1 x 3 x size x size` input, with respect to
/// the input and `per_tensor` sampled entries of every parameter tensor.
pub fn model_fd_relative_error(size: usize, per_tensor: usize, seed: u64) -> f64 {
    let k = 3;
    let params = ParameterSet::<f64>::build(&probe_spec(k), seed).expect("build");
    let input = random([1, 3, size, size], seed + 1);
    let mut rng = SeedStream::new(seed + 2);
    let targets: Vec<u8> = (0..size * size).map(|_| rng.below(k) as u8).collect();
    let weights = vec![0.5, 1.0, 1.5];

    let mut g = Graph::new();
    let vars = params.bind(&mut g, true);
    let x = g.variable(input.clone());
    let fwd = params.forward(&mut g, &vars, x, Mode::Train).expect("forward");
    let loss = g
        .weighted_cross_entropy(fwd.logits, targets.clone(), weights.clone(), glacio::dataset::IGNORE)
        .expect("loss");
    let grads = g.backward_scalar(loss).expect("backward");

    let numeric_at = |params: &ParameterSet<f64>, input: &Tensor<f64>| model_loss(params, input, &targets, &weights);

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (p, v) in vars.iter().enumerate() {
        let grad = grads.get(*v).expect("parameter gradient");
        let n = params.params()[p].value.len();
        for _ in 0..per_tensor.min(n) {
            let j = rng.below(n);
            let mut moved = params.clone();
            let x0 = moved.params()[p].value.data()[j];
            moved.params_mut()[p].value.data_mut()[j] = x0 + FD_STEP;
            let up = numeric_at(&moved, &input);
            moved.params_mut()[p].value.data_mut()[j] = x0 - FD_STEP;
            let down = numeric_at(&moved, &input);
            analytic.push(grad.data()[j]);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    let grad_x = grads.get(x).expect("input gradient");
    for _ in 0..per_tensor * 4 {
        let j = rng.below(input.len());
        let mut moved = input.clone();
        moved.data_mut()[j] += FD_STEP;
        let up = numeric_at(&params, &moved);
        moved.data_mut()[j] -= 2.0 * FD_STEP;
        let down = numeric_at(&params, &moved);
        analytic.push(grad_x.data()[j]);
        numeric.push((up - down) / (2.0 * FD_STEP));
    }
    relative_gap(&analytic, &numeric)
}

/// Finite-difference gap of every differentiable op, in `(op, gap)` pairs.
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    use glacio::autodiff::{Padding, RunningStats};
    let mut out = Vec::new();
    for (stride, dilation) in [(1, 1), (2, 1), (1, 2), (2, 3)] {
        let e = fd_relative_error(
            vec![random([2, 3, 7, 6], 1), random([4, 3, 3, 3], 2), random([4, 1, 1, 1], 3)],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, dilation).unwrap(),
            4,
        );
        out.push(("conv2d", e));
        let e = fd_relative_error(
            vec![random([2, 3, 7, 6], 5), random([3, 1, 3, 3], 6)],
            |g, v| g.depthwise_conv2d(v[0], v[1], stride, dilation).unwrap(),
            7,
        );
        out.push(("depthwise_conv2d", e));
    }
    out.push((
        "conv2d_1x1",
        fd_relative_error(
            vec![random([1, 4, 5, 5], 8), random([2, 4, 1, 1], 9)],
            |g, v| g.conv2d(v[0], v[1], None, 1, 1).unwrap(),
            10,
        ),
    ));
    out.push((
        "separable_conv2d",
        fd_relative_error(
            vec![random([2, 3, 6, 6], 11), random([3, 1, 3, 3], 12), random([5, 3, 1, 1], 13)],
            |g, v| g.separable_conv2d(v[0], v[1], v[2], 1, 2).unwrap(),
            14,
        ),
    ));
    out.push((
        "batch_norm",
        fd_relative_error(
            vec![random([3, 2, 4, 3], 15), random([2, 1, 1, 1], 16), random([2, 1, 1, 1], 17)],
            |g, v| {
                let mut stats = RunningStats::new(2);
                g.batch_norm(v[0], v[1], v[2], 1e-5, Mode::Train, &mut stats).unwrap()
            },
            18,
        ),
    ));
    out.push((
        "batch_norm_eval",
        fd_relative_error(
            vec![random([2, 2, 3, 3], 19), random([2, 1, 1, 1], 20), random([2, 1, 1, 1], 21)],
            |g, v| {
                let mut stats = RunningStats {
                    mean: vec![0.3, -0.2],
                    var: vec![1.5, 0.7],
                    initialized: true,
                };
                g.batch_norm(v[0], v[1], v[2], 1e-5, Mode::Eval, &mut stats).unwrap()
            },
            22,
        ),
    ));
    out.push((
        "relu",
        fd_relative_error(vec![random([2, 3, 4, 4], 23)], |g, v| g.relu(v[0]).unwrap(), 24),
    ));
    out.push((
        "add",
        fd_relative_error(
            vec![random([1, 2, 3, 3], 25), random([1, 2, 3, 3], 26)],
            |g, v| g.add(v[0], v[1]).unwrap(),
            27,
        ),
    ));
    out.push((
        "concat",
        fd_relative_error(
            vec![random([2, 1, 3, 3], 28), random([2, 3, 3, 3], 29), random([2, 2, 3, 3], 30)],
            |g, v| g.concat(v).unwrap(),
            31,
        ),
    ));
    for (h, w) in [(9, 11), (2, 3), (4, 4), (1, 1)] {
        out.push((
            "resize",
            fd_relative_error(vec![random([2, 2, 4, 5], 32)], move |g, v| g.resize(v[0], h, w).unwrap(), 33),
        ));
    }
    out.push((
        "global_avg_pool",
        fd_relative_error(vec![random([2, 3, 4, 5], 34)], |g, v| g.global_avg_pool(v[0]).unwrap(), 35),
    ));
    out.push((
        "reflect_pad",
        fd_relative_error(
            vec![random([1, 2, 4, 5], 36)],
            |g, v| {
                let pad = Padding {
                    top: 1,
                    bottom: 3,
                    left: 2,
                    right: 4,
                };
                g.reflect_pad(v[0], pad).unwrap()
            },
            37,
        ),
    ));
    out.push((
        "crop",
        fd_relative_error(vec![random([2, 2, 6, 7], 38)], |g, v| g.crop(v[0], 1, 2, 4, 3).unwrap(), 39),
    ));
    out.push((
        "softmax",
        fd_relative_error(vec![random([2, 4, 3, 3], 40)], |g, v| g.softmax(v[0]).unwrap(), 41),
    ));
    out.push((
        "weighted_cross_entropy",
        fd_relative_error(
            vec![random([2, 3, 3, 4], 42)],
            |g, v| {
                let mut rng = SeedStream::new(43);
                let targets: Vec<u8> = (0..24)
                    .map(|i| if i % 7 == 3 { glacio::dataset::IGNORE } else { rng.below(3) as u8 })
                    .collect();
                g.weighted_cross_entropy(v[0], targets, vec![0.4, 1.2, 2.0], glacio::dataset::IGNORE)
                    .unwrap()
            },
            44,
        ),
    ));
    out
}
