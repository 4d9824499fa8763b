#![allow(dead_code)]

pub mod gradient_suite;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfi_separation::tensor::{Graph, Shape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape, scale: f64) -> Tensor {
    let data = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Tensor whose entries stay at least `margin` away from zero (keeps ReLU-like
/// kinks out of finite-difference stencils).
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: Shape, margin: f64) -> Tensor {
    let data = (0..shape.numel())
        .map(|_| {
            let v: f64 = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Reduces `y` to a scalar through a fixed random projection.
pub fn project(g: &mut Graph, y: Var, seed: u64) -> Var {
    let mut r = rng(seed);
    let weights = random_tensor(&mut r, g.shape(y), 1.0);
    let w = g.constant(weights);
    let prod = g.mul(y, w).unwrap();
    g.sum(prod)
}

pub type Builder<'a> = &'a dyn Fn(&mut Graph, &[Var]) -> Var;

fn loss_at(inputs: &[Tensor], f: Builder) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).item()
}

/// Largest relative error between analytic and central-difference
/// derivatives: one random direction per input plus every coordinate of
/// inputs with at most `elementwise_limit` entries.
pub fn gradient_check(inputs: &[Tensor], f: Builder, h: f64, elementwise_limit: usize, seed: u64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        let dir = random_tensor(&mut r, inputs[i].shape(), 1.0);
        let numeric = directional(inputs, i, &dir, f, h);
        let exact: f64 = analytic[i].data().iter().zip(dir.data()).map(|(a, b)| a * b).sum();
        worst = worst.max(rel_err(exact, numeric));
        if inputs[i].shape().numel() <= elementwise_limit {
            for j in 0..inputs[i].shape().numel() {
                let mut e = Tensor::zeros(inputs[i].shape());
                e.data_mut()[j] = 1.0;
                let numeric = directional(inputs, i, &e, f, h);
                let exact = analytic[i].data()[j];
                if exact.abs().max(numeric.abs()) > 1e-6 {
                    worst = worst.max(rel_err(exact, numeric));
                } else {
                    worst = worst.max((exact - numeric).abs());
                }
            }
        }
    }
    worst
}

fn directional(inputs: &[Tensor], i: usize, dir: &Tensor, f: Builder, h: f64) -> f64 {
    let shifted = |sign: f64| {
        let mut xs = inputs.to_vec();
        for (x, d) in xs[i].data_mut().iter_mut().zip(dir.data()) {
            *x += sign * h * d;
        }
        loss_at(&xs, f)
    };
    (shifted(1.0) - shifted(-1.0)) / (2.0 * h)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
