//! SGD and Adam updates, learning-rate schedules and update clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_LR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// Multiplies `lr` by `factor` once for every milestone `m <= epoch`.
    /// Epochs are counted from 0.
    StepDecay {
        lr: f64,
        milestones: Vec<usize>,
        factor: f64,
    },
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule::Constant { lr }
    }

    pub fn step_decay(lr: f64, milestones: Vec<usize>, factor: f64) -> Result<Self> {
        let s = LrSchedule::StepDecay {
            lr,
            milestones,
            factor,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let lr = match self {
            LrSchedule::Constant { lr } => *lr,
            LrSchedule::StepDecay {
                lr,
                milestones,
                factor,
            } => {
                if milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidArgument(format!(
                        "milestones {milestones:?} must be strictly increasing"
                    )));
                }
                if !(*factor > 0.0 && *factor <= 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "decay factor {factor} outside (0, 1]"
                    )));
                }
                *lr
            }
        };
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {lr} must be >= 0")));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self {
            LrSchedule::Constant { lr } => *lr,
            LrSchedule::StepDecay {
                lr,
                milestones,
                factor,
            } => {
                let passed = milestones.iter().filter(|&&m| m <= epoch).count();
                lr * factor.powi(passed as i32)
            }
        }
    }

    /// True when the learning rate drops at the start of `epoch`.
    pub fn is_milestone(&self, epoch: usize) -> bool {
        match self {
            LrSchedule::Constant { .. } => false,
            LrSchedule::StepDecay { milestones, .. } => milestones.contains(&epoch),
        }
    }
}

/// Per-step limit on how far a parameter tensor may move.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Clip {
    #[default]
    None,
    /// Rescales each gradient tensor to Frobenius norm at most `max`.
    GradNorm { max: f64 },
    /// Shortens each update so that `| ||W + d||^2 - ||W||^2 | <= bound`.
    SqNormChange { bound: f64 },
}

impl Clip {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Clip::None => Ok(()),
            Clip::GradNorm { max: v } | Clip::SqNormChange { bound: v } => {
                if v.is_finite() && v > 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(format!("clip threshold {v} must be positive")))
                }
            }
        }
    }
}

/// Scales `grad` in place so its Frobenius norm is at most `max`.
pub fn clip_grad_norm<T: Scalar>(grad: &mut Tensor<T>, max: T) {
    let n = grad.frobenius_norm();
    if n > max {
        grad.scale(max / n);
    }
}

/// Largest `alpha` in `[0, 1]` such that every point of `w + s * delta` for
/// `s` in `[0, alpha]` changes the squared norm of `w` by at most `bound`.
pub fn sq_norm_change_step<T: Scalar>(w: &Tensor<T>, delta: &Tensor<T>, bound: T) -> T {
    let a = w.dot(delta).expect("update matches parameter").as_f64();
    let d = delta.dot(delta).expect("same tensor").as_f64();
    let b = bound.as_f64();
    if d == 0.0 {
        return T::one();
    }
    let change = |s: f64| 2.0 * s * a + s * s * d;
    let c1 = change(1.0);
    if c1.abs() <= b && (a >= 0.0 || change((-a / d).min(1.0)) >= -b) {
        return T::one();
    }
    // The change is a convex parabola through 0: take the first crossing of -b
    // (on the way down) or +b.
    let mut alpha = 1.0f64;
    if a < 0.0 && a * a >= d * b {
        let r = (-a - (a * a - d * b).sqrt()) / d;
        alpha = alpha.min(r);
    }
    let r = (-a + (a * a + d * b).sqrt()) / d;
    alpha = alpha.min(r);
    T::lit(alpha.clamp(0.0, 1.0))
}

fn check_grads<T: Scalar>(params: &[&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(
            "optimizer",
            format!("{} parameters but {} gradients", params.len(), grads.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        p.check_same_shape("optimizer", g)?;
        if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of parameter {i} has non-finite entry {} at index {j}",
                g.data()[j]
            )));
        }
    }
    Ok(())
}

fn apply<T: Scalar>(p: &mut Tensor<T>, mut delta: Tensor<T>, clip: Clip) {
    if let Clip::SqNormChange { bound } = clip {
        let alpha = sq_norm_change_step(p, &delta, T::lit(bound));
        if alpha < T::one() {
            delta.scale(alpha);
        }
    }
    p.axpy(T::one(), &delta).expect("update matches parameter");
}

fn clipped_grad<T: Scalar>(g: &Tensor<T>, clip: Clip) -> Tensor<T> {
    let mut g = g.clone();
    if let Clip::GradNorm { max } = clip {
        clip_grad_norm(&mut g, T::lit(max));
    }
    g
}

/// Adam with bias correction. Moments are created lazily on the first step.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Restores a saved state.
    pub fn from_state(
        lr: f64,
        step: u64,
        m: Vec<Tensor<T>>,
        v: Vec<Tensor<T>>,
    ) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::InvalidArgument("Adam moments do not pair up".into()));
        }
        Ok(Self {
            step,
            m,
            v,
            ..Self::new(lr)
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.v
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], clip: Clip) -> Result<()> {
        check_grads(params, grads)?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len()
            || self.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape())
        {
            return Err(Error::shape(
                "adam",
                "parameter shapes changed since the previous step".to_string(),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let g = clipped_grad(&grads[i], clip);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let mut delta = Vec::with_capacity(g.len());
            for ((m, v), &g) in m.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                delta.push(-lr * m_hat / (v_hat.sqrt() + eps));
            }
            apply(p, Tensor::from_vec(p.shape(), delta)?, clip);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step<T: Scalar>(&self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], clip: Clip) -> Result<()> {
        check_grads(params, grads)?;
        for (p, g) in params.iter_mut().zip(grads) {
            let delta = clipped_grad(g, clip).scaled(-T::lit(self.lr));
            apply(p, delta, clip);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer<T> {
    Adam(Adam<T>),
    Sgd(Sgd),
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(lr)),
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd { lr }),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Adam(_) => OptimizerKind::Adam,
            Optimizer::Sgd(_) => OptimizerKind::Sgd,
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Adam(a) => a.lr,
            Optimizer::Sgd(s) => s.lr,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        match self {
            Optimizer::Adam(a) => a.lr = lr,
            Optimizer::Sgd(s) => s.lr = lr,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], clip: Clip) -> Result<()> {
        match self {
            Optimizer::Adam(a) => a.step(params, grads, clip),
            Optimizer::Sgd(s) => s.step(params, grads, clip),
        }
    }
}
