//! Central finite-difference checks of single-layer networks.
//!
//! Instances are drawn on a dyadic grid (multiples of 1/8, perturbation a
//! power of two) so that every forward pass, every analytic gradient and every
//! difference quotient is exact in f32. Any disagreement then comes from the
//! gradient code, not from rounding, and the elementwise relative error can be
//! held to the strict bound. Piecewise-linear layers are kept away from their
//! kinks by more than the perturbation.

use std::time::{Duration, Instant};

use obfnet::nn::{Conv2d, Dense, Layer, MaxPool2d, Network, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DENOMINATOR_GUARD: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct InstanceResult {
    pub kind: &'static str,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug)]
pub struct SuiteResult {
    pub instances: Vec<InstanceResult>,
    pub elapsed: Duration,
}

impl SuiteResult {
    pub fn max_rel_error(&self) -> f64 {
        self.instances.iter().map(|i| i.max_rel_error).fold(0.0, f64::max)
    }

    pub fn kinds(&self) -> Vec<&'static str> {
        let mut kinds: Vec<_> = self.instances.iter().map(|i| i.kind).collect();
        kinds.sort_unstable();
        kinds.dedup();
        kinds
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_GUARD)
}

fn grid(rng: &mut ChaCha8Rng, max_steps: i32) -> f32 {
    rng.gen_range(-max_steps..=max_steps) as f32 / 8.0
}

/// Nonzero grid values, so ReLU inputs stay at least 1/8 from the kink.
fn grid_nonzero(rng: &mut ChaCha8Rng, max_steps: i32) -> f32 {
    loop {
        let v = grid(rng, max_steps);
        if v != 0.0 {
            return v;
        }
    }
}

fn tensor(shape: Vec<usize>, mut f: impl FnMut() -> f32) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| f()).collect()).unwrap()
}

/// `L = Σ c·y` in f64; exact for grid-valued outputs.
fn projected(net: &Network, x: &Tensor, c: &[f32]) -> f64 {
    let y = net.predict(x).unwrap();
    y.data().iter().zip(c).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum()
}

/// Compares analytic input and parameter gradients of `layer` at `x`
/// against central differences with step `h`.
pub fn check_layer(layer: Layer, input_shape: Vec<usize>, x: Tensor, h: f32, rng: &mut ChaCha8Rng) -> InstanceResult {
    let kind = layer.kind_name();
    let net = Network::new(input_shape.clone(), vec![layer.clone()]).unwrap();
    let trace = net.forward(&x).unwrap();
    let c = tensor(trace.output().shape().to_vec(), || grid(rng, 8));
    let grads = net.backward(&trace, &c).unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0usize;

    let analytic_input = grads.input().expect("input gradient requested");
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (projected(&net, &plus, c.data()) - projected(&net, &minus, c.data())) / (2.0 * f64::from(h));
        worst = worst.max(rel_error(f64::from(analytic_input.data()[i]), numeric));
        checked += 1;
    }

    for (p, analytic) in grads.layer(0).iter().enumerate() {
        for j in 0..analytic.len() {
            let eval = |delta: f32| {
                let mut shifted = layer.clone();
                shifted.params_mut()[p].data_mut()[j] += delta;
                let net = Network::new(input_shape.clone(), vec![shifted]).unwrap();
                projected(&net, &x, c.data())
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * f64::from(h));
            worst = worst.max(rel_error(f64::from(analytic.data()[j]), numeric));
            checked += 1;
        }
    }
    InstanceResult {
        kind,
        checked,
        max_rel_error: worst,
    }
}

fn dense_instance(rng: &mut ChaCha8Rng) -> InstanceResult {
    let (din, dout, batch) = (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=3));
    let mut d = Dense::new(din, dout, rng);
    d.weight = tensor(vec![dout, din], || grid(rng, 8));
    d.bias = tensor(vec![dout], || grid(rng, 8));
    let x = tensor(vec![batch, din], || grid(rng, 8));
    check_layer(Layer::Dense(d), vec![din], x, 0.125, rng)
}

fn conv_instance(rng: &mut ChaCha8Rng) -> InstanceResult {
    let (ic, oc) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
    let k = rng.gen_range(1..=3);
    let stride = rng.gen_range(1..=2);
    let padding = rng.gen_range(0..=k.min(2));
    let (h, w) = (rng.gen_range(k..=6), rng.gen_range(k..=6));
    let batch = rng.gen_range(1..=2);
    let mut conv = Conv2d::new(ic, oc, k, stride, padding, rng);
    conv.weight = tensor(vec![oc, ic, k, k], || grid(rng, 8));
    conv.bias = tensor(vec![oc], || grid(rng, 8));
    let x = tensor(vec![batch, ic, h, w], || grid(rng, 8));
    check_layer(Layer::Conv2d(conv), vec![ic, h, w], x, 0.125, rng)
}

fn maxpool_instance(rng: &mut ChaCha8Rng) -> InstanceResult {
    let size = rng.gen_range(1..=3);
    let stride = rng.gen_range(1..=size);
    let c = rng.gen_range(1..=2);
    let (h, w) = (rng.gen_range(size..=6), rng.gen_range(size..=6));
    let batch = rng.gen_range(1..=2);
    // globally distinct values 1/8 apart keep every window's maximum unique
    let n = batch * c * h * w;
    let mut steps: Vec<i32> = (-(n as i32)..n as i32).collect();
    steps.shuffle(rng);
    let x = Tensor::new(vec![batch, c, h, w], steps[..n].iter().map(|&s| s as f32 / 8.0).collect()).unwrap();
    check_layer(Layer::MaxPool2d(MaxPool2d { size, stride }), vec![c, h, w], x, 1.0 / 32.0, rng)
}

fn relu_instance(rng: &mut ChaCha8Rng) -> InstanceResult {
    let (n, batch) = (rng.gen_range(1..=20), rng.gen_range(1..=3));
    let x = tensor(vec![batch, n], || grid_nonzero(rng, 16));
    check_layer(Layer::Relu, vec![n], x, 1.0 / 16.0, rng)
}

fn flatten_instance(rng: &mut ChaCha8Rng) -> InstanceResult {
    let shape = vec![rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4)];
    let mut full = vec![rng.gen_range(1..=2)];
    full.extend(&shape);
    let x = tensor(full, || grid(rng, 8));
    check_layer(Layer::Flatten, shape, x, 0.125, rng)
}

fn reshape_instance(rng: &mut ChaCha8Rng) -> InstanceResult {
    let (a, b) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
    let batch = rng.gen_range(1..=2);
    let x = tensor(vec![batch, a * b], || grid(rng, 8));
    check_layer(Layer::Reshape(vec![1, a, b]), vec![a * b], x, 0.125, rng)
}

/// 120 instances covering every layer kind.
pub fn run_suite(seed: u64) -> SuiteResult {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan: [(usize, fn(&mut ChaCha8Rng) -> InstanceResult); 6] = [
        (30, dense_instance),
        (35, conv_instance),
        (25, maxpool_instance),
        (14, relu_instance),
        (8, flatten_instance),
        (8, reshape_instance),
    ];
    let mut instances = Vec::new();
    for (count, make) in plan {
        for _ in 0..count {
            instances.push(make(&mut rng));
        }
    }
    SuiteResult {
        instances,
        elapsed: start.elapsed(),
    }
}
