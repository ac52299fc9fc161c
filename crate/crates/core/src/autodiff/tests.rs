use super::*;
use crate::rng::SeedStream;

fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut rng = SeedStream::new(seed);
    Tensor::from_fn(shape, |_| rng.normal())
}

#[test]
fn backward_without_forward_is_usage_error() {
    let mut other = Graph::<f64>::new();
    let v = other.variable(random([1, 1, 2, 2], 1));
    let g = Graph::<f64>::new();
    let err = g.backward_scalar(v).err().unwrap();
    assert!(matches!(err, Error::Usage(_)));
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(random([2, 3, 6, 6], 2));
    let w = g.variable(random([4, 3, 3, 3], 3));
    let y = g.conv2d(x, w, None, 2, 2).unwrap();
    let shape = g.value(y).shape();
    let grads = g.backward(y, Tensor::zeros(shape)).unwrap();
    assert!(grads.get(w).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(random([1, 2, 4, 4], 4));
    let w = g.variable(random([2, 1, 3, 3], 5));
    let y = g.depthwise_conv2d(x, w, 1, 1).unwrap();
    let grads = g.backward(y, random([1, 2, 4, 4], 6)).unwrap();
    assert!(grads.get(x).is_none());
    assert!(grads.get(w).is_some());
}

#[test]
fn shared_inputs_accumulate() {
    // y = x + x  =>  dy/dx = 2
    let mut g = Graph::<f64>::new();
    let x = g.variable(random([1, 1, 2, 2], 7));
    let y = g.add(x, x).unwrap();
    let grads = g.backward_scalar(y).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 2.0));
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.variable(random([1, 1, 2, 2], 8));
    let b = g.variable(random([1, 1, 3, 2], 9));
    let msg = g.add(a, b).unwrap_err().to_string();
    assert!(msg.contains("[1, 1, 2, 2]") && msg.contains("[1, 1, 3, 2]"));
    assert!(g.concat(&[a, b]).is_err());
    assert!(g.concat(&[]).is_err());
    let up = random([1, 1, 3, 3], 10);
    assert!(g.backward(a, up).is_err());
}

#[test]
fn concat_then_split_gradients() {
    let mut g = Graph::<f64>::new();
    let a = g.variable(random([2, 1, 2, 2], 11));
    let b = g.variable(random([2, 2, 2, 2], 12));
    let c = g.concat(&[a, b]).unwrap();
    assert_eq!(g.value(c).shape(), [2, 3, 2, 2]);
    assert_eq!(g.value(c).get(1, 2, 1, 1), g.value(b).get(1, 1, 1, 1));
    let up = random([2, 3, 2, 2], 13);
    let grads = g.backward(c, up.clone()).unwrap();
    assert_eq!(grads.get(a).unwrap().get(1, 0, 0, 1), up.get(1, 0, 0, 1));
    assert_eq!(grads.get(b).unwrap().get(0, 1, 1, 0), up.get(0, 2, 1, 0));
}
