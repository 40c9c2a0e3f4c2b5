//! Soft weight rescaling, proportional rescaling and the baseline methods it
//! is compared against.
//!
//! Rescaling walks the layers in order and keeps a cumulative product of the
//! weight factors seen so far. Each bias is multiplied by that product, which
//! makes the logits of a homogeneous network scale by the final product `C`.
//! A batch-norm layer absorbs any uniform scaling of its input, so the
//! product restarts at the layer's own factor there; its running statistics
//! are rescaled so evaluation mode sees the same normalized values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerKind, Network};
use crate::rng::{self, streams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwrConfig {
    /// Coefficient for layers before the classifier head.
    pub lambda_f: f64,
    /// Coefficient for the classifier head.
    pub lambda_c: f64,
}

impl SwrConfig {
    pub fn uniform(lambda: f64) -> Self {
        Self {
            lambda_f: lambda,
            lambda_c: lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_f", self.lambda_f), ("lambda_c", self.lambda_c)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Coefficient that applies to layer `index` of `net`.
    pub fn lambda_for<T: Scalar>(&self, net: &Network<T>, index: usize) -> f64 {
        if index >= net.classifier_start() {
            self.lambda_c
        } else {
            self.lambda_f
        }
    }
}

/// Factors applied by one rescaling pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleReport {
    /// Indices of the weighted layers, in order.
    pub layers: Vec<usize>,
    /// Weight factor `c_l` of each weighted layer.
    pub factors: Vec<f64>,
    /// Cumulative product applied to each weighted layer's bias.
    pub cumulative: Vec<f64>,
    /// Factor by which the logits scale.
    pub output_scale: f64,
}

impl ScaleReport {
    pub fn min_factor(&self) -> f64 {
        self.factors.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_factor(&self) -> f64 {
        self.factors.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `(lambda * n_init + (1 - lambda) * n_cur) / n_cur`, or 1 for a zero layer.
///
/// Evaluated as `1 + lambda * (n_init - n_cur) / n_cur`, which is exactly 1
/// when `lambda = 0` or the norms agree.
pub fn swr_scale_factor<T: Scalar>(n_init: T, n_cur: T, lambda: T) -> T {
    if n_cur == T::zero() {
        return T::one();
    }
    T::one() + lambda * (n_init - n_cur) / n_cur
}

fn apply_factors<T: Scalar>(net: &mut Network<T>, factors: &[T]) -> Result<ScaleReport> {
    let weighted = net.weighted_layers();
    if factors.len() != weighted.len() {
        return Err(Error::InvalidArgument(format!(
            "{} factors for {} weighted layers",
            factors.len(),
            weighted.len()
        )));
    }
    if let Some(c) = factors.iter().find(|c| !(c.is_finite() && **c > T::zero())) {
        return Err(Error::InvalidArgument(format!("scale factor {c} must be positive")));
    }
    let mut cumulative = Vec::with_capacity(factors.len());
    let mut cum = T::one();
    for (&index, &c) in weighted.iter().zip(factors) {
        let layer = &mut net.layers_mut()[index];
        if let LayerKind::BatchNorm { .. } = layer.kind {
            if let Some(rs) = layer.running.as_mut() {
                for m in &mut rs.mean {
                    *m *= cum;
                }
                for v in &mut rs.var {
                    *v *= cum * cum;
                }
            }
            cum = c;
        } else {
            cum *= c;
        }
        layer.weight.as_mut().expect("weighted layer").scale(c);
        if let Some(b) = layer.bias.as_mut() {
            b.scale(cum);
        }
        cumulative.push(cum.as_f64());
    }
    Ok(ScaleReport {
        layers: weighted,
        factors: factors.iter().map(|c| c.as_f64()).collect(),
        cumulative,
        output_scale: cum.as_f64(),
    })
}

/// One soft-weight-rescaling pass over every weighted layer.
pub fn swr_step<T: Scalar>(net: &mut Network<T>, cfg: &SwrConfig) -> Result<ScaleReport> {
    cfg.validate()?;
    let factors: Vec<T> = net
        .weighted_layers()
        .into_iter()
        .map(|i| {
            let layer = &net.layers()[i];
            let n_init = layer.init_norm().expect("weighted layer has an initial norm");
            let n_cur = layer.weight_norm().expect("weighted layer");
            swr_scale_factor(n_init, n_cur, T::lit(cfg.lambda_for(net, i)))
        })
        .collect();
    apply_factors(net, &factors)
}

/// Scales weighted layer `l` by `factors[l]` and its bias by the cumulative
/// product, so a homogeneous network's logits scale by the returned
/// `output_scale`.
pub fn rescale_proportional<T: Scalar>(net: &mut Network<T>, factors: &[T]) -> Result<ScaleReport> {
    apply_factors(net, factors)
}

/// Scales every weight by its factor and leaves biases as they are.
pub fn rescale_weights_only<T: Scalar>(net: &mut Network<T>, factors: &[T]) -> Result<()> {
    let weighted = net.weighted_layers();
    if factors.len() != weighted.len() {
        return Err(Error::InvalidArgument(format!(
            "{} factors for {} weighted layers",
            factors.len(),
            weighted.len()
        )));
    }
    for (&index, &c) in weighted.iter().zip(factors) {
        net.layers_mut()[index]
            .weight
            .as_mut()
            .expect("weighted layer")
            .scale(c);
    }
    Ok(())
}

/// Resets every weighted layer's reference norm to its current norm.
pub fn swr_reinit_norms<T: Scalar>(net: &mut Network<T>) {
    for layer in net.layers_mut() {
        if let Some(n) = layer.weight_norm() {
            layer.set_init_norm(n);
        }
    }
}

/// Gradient of `lambda / 2 * ||theta||^2`.
pub fn l2_grad<T: Scalar>(theta: &Tensor<T>, lambda: T) -> Tensor<T> {
    theta.scaled(lambda)
}

/// Gradient of `lambda / 2 * ||theta - theta0||^2`.
pub fn l2_init_grad<T: Scalar>(theta: &Tensor<T>, theta0: &Tensor<T>, lambda: T) -> Result<Tensor<T>> {
    let mut g = theta.clone();
    g.axpy(-T::one(), theta0)?;
    g.scale(lambda);
    Ok(g)
}

/// `theta <- (1 - lambda) * theta + lambda * theta0` for every parameter.
pub fn shrink_perturb<T: Scalar>(net: &mut Network<T>, theta0: &[Tensor<T>], lambda: T) -> Result<()> {
    if !(lambda >= T::zero() && lambda <= T::one()) {
        return Err(Error::InvalidArgument(format!("shrink-perturb lambda {lambda} outside [0, 1]")));
    }
    let params = net.parameters_mut();
    if params.len() != theta0.len() {
        return Err(Error::InvalidArgument(format!(
            "{} snapshot tensors for {} parameters",
            theta0.len(),
            params.len()
        )));
    }
    for (p, p0) in params.into_iter().zip(theta0) {
        p.check_same_shape("shrink_perturb", p0)?;
        for (v, &v0) in p.data_mut().iter_mut().zip(p0.data()) {
            *v = (T::one() - lambda) * *v + lambda * v0;
        }
    }
    Ok(())
}

/// Layers redrawn by [`head_reset`]: the last layer of a pure MLP, otherwise
/// every dense layer of the classifier head.
pub fn head_reset_layers<T: Scalar>(net: &Network<T>) -> Vec<usize> {
    let dense: Vec<usize> = (net.classifier_start()..net.layers().len())
        .filter(|&i| matches!(net.layers()[i].kind, LayerKind::Dense { .. }))
        .collect();
    if net.classifier_start() == 0 {
        dense.last().copied().into_iter().collect()
    } else {
        dense
    }
}

/// Redraws the head layers from the initializer. Their reference norms become
/// the new norms. Returns the indices of the reset layers.
pub fn head_reset<T: Scalar>(net: &mut Network<T>, seed: u64) -> Result<Vec<usize>> {
    let layers = head_reset_layers(net);
    for &i in &layers {
        let mut rng = rng::stream(seed, streams::indexed(streams::HEAD_RESET, i as u64));
        net.reinitialize_layer(i, &mut rng)?;
    }
    Ok(layers)
}

/// Regularization or re-initialization method of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum RegularizerConfig {
    #[default]
    None,
    Swr {
        #[serde(flatten)]
        swr: SwrConfig,
        /// Reset reference norms whenever the learning rate decays.
        reinit_on_decay: bool,
    },
    L2 {
        lambda: f64,
    },
    L2Init {
        lambda: f64,
    },
    ShrinkPerturb {
        lambda: f64,
    },
    HeadReset,
}

impl RegularizerConfig {
    pub fn name(&self) -> &'static str {
        match self {
            RegularizerConfig::None => "vanilla",
            RegularizerConfig::Swr { .. } => "swr",
            RegularizerConfig::L2 { .. } => "l2",
            RegularizerConfig::L2Init { .. } => "l2_init",
            RegularizerConfig::ShrinkPerturb { .. } => "shrink_perturb",
            RegularizerConfig::HeadReset => "head_reset",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            RegularizerConfig::Swr { swr, .. } => swr.validate(),
            RegularizerConfig::L2 { lambda } | RegularizerConfig::L2Init { lambda } => {
                if lambda.is_finite() && *lambda >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(format!("lambda {lambda} must be >= 0")))
                }
            }
            RegularizerConfig::ShrinkPerturb { lambda } => {
                if (0.0..=1.0).contains(lambda) {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")))
                }
            }
            RegularizerConfig::None | RegularizerConfig::HeadReset => Ok(()),
        }
    }

    /// True for methods that act once at each data-update boundary.
    pub fn fires_at_boundary(&self) -> bool {
        matches!(
            self,
            RegularizerConfig::ShrinkPerturb { .. } | RegularizerConfig::HeadReset
        )
    }
}
