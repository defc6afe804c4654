//! Central finite-difference checks against the analytic backward pass.
//!
//! The numerical side only ever evaluates forward passes on graphs built from
//! constants, so it shares no code with the backward rules it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Result, Tensor, Var};

pub const FD_STEP: f64 = 1e-4;
pub const GRAD_TOLERANCE: f64 = 1e-3;
/// Elements per input compared; larger inputs are sampled at an even stride.
pub const MAX_CHECKED_ELEMENTS: usize = 48;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Distance of the fixture to the nearest non-differentiable point.
    pub kink_margin: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Evaluates the scalar built by `build` with every input recorded as a constant.
pub fn evaluate<F>(inputs: &[Tensor<f64>], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.value(out).item()
}

/// Central difference of the scalar function at one element of one input.
pub fn numerical_derivative<F>(inputs: &[Tensor<f64>], which: usize, element: usize, h: f64, build: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut shifted = inputs.to_vec();
    let orig = inputs[which].data()[element];
    shifted[which].data_mut()[element] = orig + h;
    let plus = evaluate(&shifted, build)?;
    shifted[which].data_mut()[element] = orig - h;
    let minus = evaluate(&shifted, build)?;
    Ok((plus - minus) / (2.0 * h))
}

fn sampled_indices(len: usize) -> Vec<usize> {
    if len <= MAX_CHECKED_ELEMENTS {
        (0..len).collect()
    } else {
        let step = len as f64 / MAX_CHECKED_ELEMENTS as f64;
        (0..MAX_CHECKED_ELEMENTS).map(|i| (i as f64 * step) as usize).collect()
    }
}

/// Compares analytic and numerical gradients of a scalar with respect to every input.
pub fn check_gradients<F>(name: &str, inputs: &[Tensor<f64>], build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let kink_margin = g.kink_margin();
    let grads = g.backward(loss)?;
    let mut max_rel_error = 0.0f64;
    let mut checked = 0;
    for (i, v) in vars.iter().enumerate() {
        let zeros;
        let analytic = match grads.get(*v) {
            Some(t) => t.data(),
            None => {
                zeros = vec![0.0; inputs[i].numel()];
                &zeros
            }
        };
        for e in sampled_indices(inputs[i].numel()) {
            let numeric = numerical_derivative(inputs, i, e, FD_STEP, &build)?;
            max_rel_error = max_rel_error.max(relative_error(analytic[e], numeric));
            checked += 1;
        }
    }
    Ok(GradCheck { name: name.to_string(), max_rel_error, checked, kink_margin })
}

/// Reduces `y` to a scalar `sum(y * r)` with a fixed pseudo-random `r`, so that
/// every output element contributes with a distinct weight.
pub fn random_projection(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let r = g.constant(r);
    let prod = g.mul(y, r)?;
    Ok(g.sum(prod))
}

/// Uniform values whose magnitude lies in `[margin, 1]`, with random sign.
pub fn random_away_from_zero(shape: &[usize], margin: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let mag = rng.gen_range(margin..1.0);
        if rng.gen::<bool>() {
            mag
        } else {
            -mag
        }
    })
}

pub fn random_uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// A random permutation of an evenly spaced grid, so distinct values differ by `spacing`.
pub fn random_distinct(shape: &[usize], spacing: f64, seed: u64) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * spacing).collect();
    vals.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Tensor::from_fn(shape.to_vec(), |i| vals[i])
}
