#![allow(dead_code)]

use rand::Rng as _;
use rand_distr::StandardNormal;
use swr_core::nn::{Architecture, Network};
use swr_core::rng::Rng;
use swr_core::tensor::{Tape, Tensor, Var};

pub fn normal(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Standard-normal entries pushed away from zero, so kinks of ReLU-like ops
/// are never within a finite-difference step.
pub fn normal_off_zero(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    normal(shape, rng).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

/// Normal entries with every value distinct by a margin, so max pooling has
/// no near-ties.
pub fn distinct(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let data = order.iter().map(|&k| (k as f64 - n as f64 / 2.0) * 0.1).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Builds an op on a fresh tape from leaf inputs.
pub type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Var + 'a;

fn scalar_output(build: &Build<'_>, inputs: &[Tensor<f64>], weights: &Tensor<f64>, grad: bool) -> (Tape<f64>, Var, Vec<Var>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
    let out = build(&mut tape, &vars);
    let w = weights.reshape(tape.value(out).shape()).unwrap();
    let s = tape.weighted_sum(out, w).unwrap();
    (tape, s, vars)
}

/// Largest norm-wise relative error between reverse-mode gradients and
/// central differences of `sum(weights * op(inputs))`, over all inputs.
pub fn gradient_error(build: &Build<'_>, inputs: &[Tensor<f64>], rng: &mut Rng) -> f64 {
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).shape().to_vec()
    };
    let weights = normal(&probe, rng);
    let (mut tape, s, vars) = scalar_output(build, inputs, &weights, true);
    let mut grads = tape.backward(s).unwrap();

    let h = 1e-6;
    let mut worst = 0.0f64;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.take(*var).unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let mut numeric = Vec::with_capacity(inputs[k].len());
        for j in 0..inputs[k].len() {
            let eval = |delta: f64| {
                let mut moved = inputs.to_vec();
                moved[k].data_mut()[j] += delta;
                let (tape, s, _) = scalar_output(build, &moved, &weights, false);
                tape.value(s).data()[0]
            };
            numeric.push((eval(h) - eval(-h)) / (2.0 * h));
        }
        let numeric = Tensor::from_vec(inputs[k].shape(), numeric).unwrap();
        let mut diff = analytic.clone();
        diff.axpy(-1.0, &numeric).unwrap();
        let scale = analytic.frobenius_norm().max(numeric.frobenius_norm()).max(1e-12);
        worst = worst.max(diff.frobenius_norm() / scale);
    }
    worst
}

/// Random bias-carrying MLP with 1 to 3 hidden layers and ReLU or leaky ReLU.
pub fn random_mlp(rng: &mut Rng) -> Architecture {
    let depth = rng.random_range(1..=3);
    let act = if rng.random_bool(0.5) {
        "relu".to_string()
    } else {
        format!("lrelu({})", rng.random_range(0.01..0.3))
    };
    let mut s = format!("seq:{}", rng.random_range(3..12));
    for _ in 0..depth {
        s += &format!("|dense({})|{act}", rng.random_range(2..16));
    }
    s += &format!("|dense({})", rng.random_range(2..8));
    s.parse().unwrap()
}

/// Random bias-free CNN: one or two convolutions with max pooling.
pub fn random_cnn(rng: &mut Rng) -> Architecture {
    let c = rng.random_range(1..=3);
    let hw = rng.random_range(8..=12);
    let act = if rng.random_bool(0.5) { "relu" } else { "lrelu(0.1)" };
    let mut s = format!("seq:{c}x{hw}x{hw}|conv-nb({},3)|{act}|maxpool(2)", rng.random_range(2..6));
    if rng.random_bool(0.5) {
        s += &format!("|conv-nb({},2)|{act}", rng.random_range(2..6));
    }
    s += &format!("|flatten|dense-nb({})|{act}|dense-nb({})", rng.random_range(3..10), rng.random_range(2..6));
    s.parse().unwrap()
}

/// Random CNN with batch norm after every convolution.
pub fn random_cnn_bn(rng: &mut Rng) -> Architecture {
    let hw = rng.random_range(8..=10);
    format!(
        "seq:2x{hw}x{hw}|conv-nb({},3)|bn|relu|maxpool(2)|conv-nb({},2)|bn|relu|flatten|head|dense({})|relu|dense(3)",
        rng.random_range(2..5),
        rng.random_range(2..5),
        rng.random_range(3..8)
    )
    .parse()
    .unwrap()
}

/// Fills every bias with standard-normal values.
pub fn randomize_biases(net: &mut Network<f64>, rng: &mut Rng) {
    for layer in net.layers_mut() {
        if let Some(b) = layer.bias.as_mut() {
            *b = normal(b.shape(), rng);
        }
    }
}

/// Multiplies each weighted layer by a factor in `[0.3, 0.8]` or `[1.3, 3]`,
/// so every layer's norm is well away from its initial norm.
pub fn perturb_norms(net: &mut Network<f64>, rng: &mut Rng) {
    for layer in net.layers_mut() {
        if let Some(w) = layer.weight.as_mut() {
            let c = if rng.random_bool(0.5) {
                rng.random_range(0.3..0.8)
            } else {
                rng.random_range(1.3..3.0)
            };
            w.scale(c);
        }
    }
}

pub fn batch_for(arch: &Architecture, n: usize, rng: &mut Rng) -> Tensor<f64> {
    let mut shape = vec![n];
    shape.extend(&arch.input);
    normal(&shape, rng)
}
