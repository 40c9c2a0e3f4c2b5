mod common;

use common::{distinct, gradient_error, normal, normal_off_zero};
use swr_core::nn::{Architecture, Network};
use swr_core::rng;
use swr_core::tensor::{Tape, Tensor};

const TIGHT: f64 = 1e-6;
const LOOSE: f64 = 1e-4;

#[test]
fn matmul_gradients() {
    let mut r = rng::stream(1, 0);
    for (m, k, n) in [(1, 1, 1), (3, 4, 2), (5, 2, 7)] {
        let inputs = [normal(&[m, k], &mut r), normal(&[k, n], &mut r)];
        let err = gradient_error(&|t, v| t.matmul(v[0], v[1]).unwrap(), &inputs, &mut r);
        assert!(err <= TIGHT, "{m}x{k}x{n}: {err}");
    }
}

#[test]
fn bias_gradients() {
    let mut r = rng::stream(2, 0);
    let inputs = [normal(&[4, 3], &mut r), normal(&[3], &mut r)];
    assert!(gradient_error(&|t, v| t.add_bias(v[0], v[1]).unwrap(), &inputs, &mut r) <= TIGHT);
    let inputs = [normal(&[2, 3, 2, 2], &mut r), normal(&[3], &mut r)];
    assert!(gradient_error(&|t, v| t.add_bias(v[0], v[1]).unwrap(), &inputs, &mut r) <= TIGHT);
}

#[test]
fn conv_gradients() {
    let mut r = rng::stream(3, 0);
    for (stride, padding, k, hw) in [(1, 0, 3, 6), (2, 1, 3, 7), (1, 2, 2, 6), (3, 0, 1, 7)] {
        let inputs = [normal(&[2, 2, hw, hw], &mut r), normal(&[3, 2, k, k], &mut r)];
        let err = gradient_error(&|t, v| t.conv2d(v[0], v[1], stride, padding).unwrap(), &inputs, &mut r);
        assert!(err <= TIGHT, "stride {stride} padding {padding}: {err}");
    }
}

#[test]
fn activation_gradients() {
    let mut r = rng::stream(4, 0);
    let x = [normal_off_zero(&[3, 5], &mut r)];
    assert!(gradient_error(&|t, v| t.relu(v[0]).unwrap(), &x, &mut r) <= LOOSE);
    assert!(gradient_error(&|t, v| t.leaky_relu(v[0], 0.2).unwrap(), &x, &mut r) <= LOOSE);
}

#[test]
fn maxpool_gradients() {
    let mut r = rng::stream(5, 0);
    let x = [distinct(&[2, 2, 5, 5], &mut r)];
    assert!(gradient_error(&|t, v| t.maxpool2d(v[0], 2, 2).unwrap(), &x, &mut r) <= LOOSE);
    assert!(gradient_error(&|t, v| t.maxpool2d(v[0], 3, 1).unwrap(), &x, &mut r) <= LOOSE);
}

#[test]
fn batchnorm_gradients() {
    let mut r = rng::stream(6, 0);
    for shape in [vec![6, 3], vec![3, 2, 3, 3]] {
        let c = shape[1];
        let inputs = [normal(&shape, &mut r), normal(&[c], &mut r), normal(&[c], &mut r)];
        let err = gradient_error(
            &|t, v| t.batchnorm(v[0], v[1], v[2], None, 0.1, 1e-5).unwrap(),
            &inputs,
            &mut r,
        );
        assert!(err <= LOOSE, "{shape:?}: {err}");
    }
}

#[test]
fn cross_entropy_gradients() {
    let mut r = rng::stream(7, 0);
    let labels = vec![2, 0, 1, 2];
    let inputs = [normal(&[4, 3], &mut r)];
    let err = gradient_error(&|t, v| t.softmax_cross_entropy(v[0], &labels).unwrap(), &inputs, &mut r);
    assert!(err <= TIGHT, "{err}");
}

#[test]
fn reshape_and_flatten_gradients() {
    let mut r = rng::stream(8, 0);
    let x = [normal(&[2, 3, 2], &mut r)];
    assert!(gradient_error(&|t, v| t.flatten(v[0]).unwrap(), &x, &mut r) <= TIGHT);
    assert!(gradient_error(&|t, v| t.reshape(v[0], &[3, 4]).unwrap(), &x, &mut r) <= TIGHT);
}

/// Whole-network gradient of the loss with respect to every parameter.
fn network_error(arch: &str, seed: u64) -> f64 {
    let arch: Architecture = arch.parse().unwrap();
    let mut r = rng::stream(seed, 0);
    let net = Network::<f64>::build(&arch, seed).unwrap();
    let mut x_shape = vec![4];
    x_shape.extend(&arch.input);
    let x = normal(&x_shape, &mut r);
    let labels = vec![0, 1, 1, 0];

    let loss_of = |net: &Network<f64>| {
        let mut n = net.clone();
        let mut tape = Tape::new();
        let f = n.forward_tape(&mut tape, &x).unwrap();
        let l = tape.softmax_cross_entropy(f.logits, &labels).unwrap();
        tape.value(l).data()[0]
    };

    let mut n = net.clone();
    let mut tape = Tape::new();
    let f = n.forward_tape(&mut tape, &x).unwrap();
    let l = tape.softmax_cross_entropy(f.logits, &labels).unwrap();
    let mut grads = tape.backward(l).unwrap();

    let h = 1e-6;
    let mut worst = 0.0f64;
    for (k, var) in f.params.iter().enumerate() {
        let analytic = grads.take(*var).unwrap();
        let mut numeric = Vec::new();
        for j in 0..analytic.len() {
            let mut plus = net.clone();
            plus.parameters_mut()[k].data_mut()[j] += h;
            let mut minus = net.clone();
            minus.parameters_mut()[k].data_mut()[j] -= h;
            numeric.push((loss_of(&plus) - loss_of(&minus)) / (2.0 * h));
        }
        let numeric = Tensor::from_vec(analytic.shape(), numeric).unwrap();
        let mut diff = analytic.clone();
        diff.axpy(-1.0, &numeric).unwrap();
        let scale = analytic.frobenius_norm().max(numeric.frobenius_norm()).max(1e-12);
        worst = worst.max(diff.frobenius_norm() / scale);
    }
    worst
}

#[test]
fn mlp_parameter_gradients() {
    let err = network_error("seq:5|dense(4)|lrelu(0.1)|dense(3)|relu|dense(2)", 11);
    assert!(err <= LOOSE, "{err}");
}

#[test]
fn cnn_bn_parameter_gradients() {
    let err = network_error(
        "seq:2x7x7|conv-nb(3,3)|bn|lrelu(0.1)|maxpool(2,1)|flatten|head|dense(4)|lrelu(0.1)|dense(2)",
        12,
    );
    assert!(err <= LOOSE, "{err}");
}
