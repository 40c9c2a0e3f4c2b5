//! Norm, balance and proportionality diagnostics.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, LayerKind, Network};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Balance of two weighted layers, ordered so `init_i <= init_j`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceRecord {
    pub i: usize,
    pub j: usize,
    pub r0: f64,
    pub rt: f64,
    pub b: f64,
}

/// `|r_t - r_0|` where `r = norm_j / norm_i`. Arguments are
/// `(current, initial)` norms for layers `i` and `j`; the pair is reordered
/// when layer `i` has the larger initial norm.
pub fn balance_pair(
    (i, cur_i, init_i): (usize, f64, f64),
    (j, cur_j, init_j): (usize, f64, f64),
) -> Result<BalanceRecord> {
    if [cur_i, init_i, cur_j, init_j].iter().any(|&n| n.is_nan() || n <= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "balance needs positive norms, got current ({cur_i}, {cur_j}) initial ({init_i}, {init_j})"
        )));
    }
    if init_i > init_j {
        return balance_pair((j, cur_j, init_j), (i, cur_i, init_i));
    }
    let r0 = init_j / init_i;
    let rt = cur_j / cur_i;
    Ok(BalanceRecord {
        i,
        j,
        r0,
        rt,
        b: (rt - r0).abs(),
    })
}

/// Balance of every pair of weighted layers.
pub fn balance_pairs<T: Scalar>(net: &Network<T>) -> Result<Vec<BalanceRecord>> {
    let norms = net.weight_norms();
    let mut out = Vec::new();
    for (a, na) in norms.iter().enumerate() {
        for nb in &norms[a + 1..] {
            out.push(balance_pair(
                (na.layer, na.current.as_f64(), na.init.as_f64()),
                (nb.layer, nb.current.as_f64(), nb.init.as_f64()),
            )?);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BalanceSummary {
    pub pairs: usize,
    pub mean: f64,
    pub max: f64,
}

pub fn balance_summary<T: Scalar>(net: &Network<T>) -> Result<BalanceSummary> {
    let pairs = balance_pairs(net)?;
    if pairs.is_empty() {
        return Ok(BalanceSummary::default());
    }
    let max = pairs.iter().map(|p| p.b).fold(0.0, f64::max);
    let mean = pairs.iter().map(|p| p.b).sum::<f64>() / pairs.len() as f64;
    Ok(BalanceSummary {
        pairs: pairs.len(),
        mean,
        max,
    })
}

/// Entry-wise `l_{p,q}` norm over the rows of `w` (first axis; remaining axes
/// flattened). Either exponent may be `f64::INFINITY`, meaning a maximum.
pub fn entrywise_pq_norm<T: Scalar>(w: &Tensor<T>, p: f64, q: f64) -> Result<f64> {
    if !(p >= 1.0 && q >= 1.0) {
        return Err(Error::InvalidArgument(format!("p = {p}, q = {q}: both must be >= 1")));
    }
    let rows = w.shape()[0];
    let cols = w.len() / rows;
    let row_norm = |r: usize| {
        let row = w.data()[r * cols..(r + 1) * cols].iter().map(|v| v.as_f64().abs());
        if p.is_infinite() {
            row.fold(0.0, f64::max)
        } else {
            row.map(|v| v.powf(p)).sum::<f64>().powf(1.0 / p)
        }
    };
    let row_norms = (0..rows).map(row_norm);
    Ok(if q.is_infinite() {
        row_norms.fold(0.0, f64::max)
    } else {
        row_norms.map(|v| v.powf(q)).sum::<f64>().powf(1.0 / q)
    })
}

/// Product of weight Frobenius norms. `exact` is false when the network has
/// layers the bound does not cover (convolution, batch norm, non-1-Lipschitz
/// activations), in which case the value is only indicative.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzBound {
    pub value: f64,
    pub exact: bool,
}

pub fn lipschitz_upper_bound<T: Scalar>(net: &Network<T>) -> LipschitzBound {
    let exact = net.layers().iter().all(|l| match l.kind {
        LayerKind::Dense { .. } | LayerKind::Flatten => true,
        LayerKind::Activation(Activation::Relu) => true,
        LayerKind::Activation(Activation::LeakyRelu(s)) => s.abs() <= 1.0,
        _ => false,
    });
    let value = net
        .weight_norms()
        .iter()
        .map(|n| n.current.as_f64())
        .product();
    LipschitzBound { value, exact }
}

/// Largest `||f(x) - f(y)|| / ||x - y||` over `pairs` standard-normal input
/// pairs, evaluated in inference mode.
pub fn empirical_lipschitz<T: Scalar>(net: &Network<T>, pairs: usize, rng: &mut Rng) -> Result<f64> {
    let d = net.architecture().input_len();
    let draw = |rng: &mut Rng| -> Vec<T> {
        (0..pairs * d)
            .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
            .collect()
    };
    let x = Tensor::from_vec(&[pairs, d], draw(rng))?;
    let y = Tensor::from_vec(&[pairs, d], draw(rng))?;
    let fx = net.predict(&x)?;
    let fy = net.predict(&y)?;
    let k = fx.len() / pairs;
    let dist = |a: &[T], b: &[T]| {
        a.iter()
            .zip(b)
            .map(|(&u, &v)| (u.as_f64() - v.as_f64()).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut best = 0.0f64;
    for r in 0..pairs {
        let dx = dist(&x.data()[r * d..(r + 1) * d], &y.data()[r * d..(r + 1) * d]);
        if dx > 0.0 {
            let df = dist(&fx.data()[r * k..(r + 1) * k], &fy.data()[r * k..(r + 1) * k]);
            best = best.max(df / dx);
        }
    }
    Ok(best)
}

/// Largest per-sample relative deviation `||f_b(x) - C f_a(x)||_inf /
/// ||C f_a(x)||_inf` over the rows of `inputs` (absolute when the reference
/// output is zero).
pub fn proportionality_residual<T: Scalar>(
    a: &Network<T>,
    b: &Network<T>,
    c: f64,
    inputs: &Tensor<T>,
) -> Result<f64> {
    let fa = a.predict(inputs)?;
    let fb = b.predict(inputs)?;
    fa.check_same_shape("proportionality_residual", &fb)?;
    let n = inputs.shape()[0];
    let k = fa.len() / n;
    let mut worst = 0.0f64;
    for r in 0..n {
        let mut dev = 0.0f64;
        let mut scale = 0.0f64;
        for j in r * k..(r + 1) * k {
            let reference = c * fa.data()[j].as_f64();
            dev = dev.max((fb.data()[j].as_f64() - reference).abs());
            scale = scale.max(reference.abs());
        }
        worst = worst.max(if scale > 0.0 { dev / scale } else { dev });
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;
    use crate::rng;

    #[test]
    fn balance_examples() {
        let r = balance_pair((0, 1.0, 1.0), (1, 4.0, 2.0)).unwrap();
        assert_eq!((r.r0, r.rt, r.b), (2.0, 4.0, 2.0));
        assert_eq!(balance_pair((0, 1.0, 1.0), (1, 2.0, 2.0)).unwrap().b, 0.0);
        let c = balance_pair((0, 0.5 * 1.0 + 0.5 * 1.0, 1.0), (1, 0.5 * 2.0 + 0.5 * 4.0, 2.0)).unwrap();
        assert_eq!((c.rt, c.b), (3.0, 1.0));
        assert!(balance_pair((0, 0.0, 1.0), (1, 1.0, 1.0)).is_err());
    }

    #[test]
    fn balance_is_order_independent() {
        let a = balance_pair((3, 1.5, 2.0), (7, 0.7, 0.9)).unwrap();
        let b = balance_pair((7, 0.7, 0.9), (3, 1.5, 2.0)).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.i, a.j), (7, 3));
    }

    #[test]
    fn balance_summary_edges() {
        let fresh = Network::<f64>::build(&"mlp:4-3-3-2".parse().unwrap(), 0).unwrap();
        let s = balance_summary(&fresh).unwrap();
        assert_eq!((s.pairs, s.mean, s.max), (3, 0.0, 0.0));
        let single = Network::<f64>::build(&"mlp:4-2".parse().unwrap(), 0).unwrap();
        assert_eq!(balance_summary(&single).unwrap().pairs, 0);
    }

    #[test]
    fn pq_norm_examples() {
        let w = Tensor::<f64>::from_f64(&[2, 2], &[3.0, 4.0, 0.0, 0.0]).unwrap();
        assert_eq!(entrywise_pq_norm(&w, 2.0, 2.0).unwrap(), 5.0);
        let w = Tensor::<f64>::from_f64(&[2, 2], &[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(entrywise_pq_norm(&w, 1.0, f64::INFINITY).unwrap(), 3.5);
        assert!(entrywise_pq_norm(&w, 0.5, 2.0).is_err());
    }

    #[test]
    fn lipschitz_bound_examples() {
        let arch: Architecture = "seq:2|dense-nb(2)|relu|dense-nb(2)".parse().unwrap();
        let mut net = Network::<f64>::build(&arch, 0).unwrap();
        net.layers_mut()[0].weight = Some(Tensor::from_f64(&[2, 2], &[2.0, 0.0, 0.0, 0.0]).unwrap());
        net.layers_mut()[2].weight = Some(Tensor::from_f64(&[2, 2], &[0.0, 3.0, 0.0, 0.0]).unwrap());
        let bound = lipschitz_upper_bound(&net);
        assert_eq!(bound, LipschitzBound { value: 6.0, exact: true });
        net.layers_mut()[2].weight.as_mut().unwrap().scale(0.0);
        assert_eq!(lipschitz_upper_bound(&net).value, 0.0);
        let cnn = Network::<f64>::build(&"cnn:1x28x28:2".parse().unwrap(), 0).unwrap();
        assert!(!lipschitz_upper_bound(&cnn).exact);
    }

    #[test]
    fn empirical_estimate_respects_bound() {
        let net = Network::<f64>::build(&"mlp-nobias:8-16-16-4".parse().unwrap(), 3).unwrap();
        let mut r = rng::stream(0, 0);
        let est = empirical_lipschitz(&net, 1000, &mut r).unwrap();
        assert!(est > 0.0 && est <= lipschitz_upper_bound(&net).value);
    }

    #[test]
    fn residual_examples() {
        let a = Network::<f64>::build(&"mlp:5-4-3".parse().unwrap(), 0).unwrap();
        let b = Network::<f64>::build(&"mlp:5-4-3".parse().unwrap(), 1).unwrap();
        let x = Tensor::from_vec(&[3, 5], (0..15).map(|i| (i as f64).sin()).collect()).unwrap();
        assert_eq!(proportionality_residual(&a, &a, 1.0, &x).unwrap(), 0.0);
        assert!(proportionality_residual(&a, &b, 1.0, &x).unwrap() > 0.1);
    }
}
