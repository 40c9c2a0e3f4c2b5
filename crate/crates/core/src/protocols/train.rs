use crate::data::{batch_indices, Dataset};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::optim::{Clip, LrSchedule, Optimizer, OptimizerKind};
use crate::plasticity::{self, RegularizerConfig, ScaleReport};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// Everything that shapes a training step.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub clip: Clip,
    pub regularizer: RegularizerConfig,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.schedule.validate()?;
        self.clip.validate()?;
        self.regularizer.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub lr: f64,
    pub steps: usize,
    pub last_scale: Option<ScaleReport>,
}

/// A network with its optimizer, initial snapshot and step logic.
pub struct Trainer<T: Scalar> {
    pub net: Network<T>,
    pub optimizer: Optimizer<T>,
    pub settings: TrainSettings,
    theta0: Vec<Tensor<T>>,
    tape: Tape<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(net: Network<T>, settings: TrainSettings) -> Result<Self> {
        let theta0 = net.parameters().into_iter().cloned().collect();
        Self::with_initial(net, theta0, settings)
    }

    /// Like [`Trainer::new`], with the reference parameters for anchored
    /// regularizers given explicitly (e.g. when resuming a run).
    pub fn with_initial(net: Network<T>, theta0: Vec<Tensor<T>>, settings: TrainSettings) -> Result<Self> {
        settings.validate()?;
        let shapes_match = theta0.len() == net.parameters().len()
            && theta0.iter().zip(net.parameters()).all(|(a, b)| a.shape() == b.shape());
        if !shapes_match {
            return Err(Error::InvalidArgument(
                "initial parameters do not match the network".into(),
            ));
        }
        let optimizer = Optimizer::new(settings.optimizer, settings.schedule.lr_at(0));
        Ok(Self {
            net,
            optimizer,
            settings,
            theta0,
            tape: Tape::new(),
        })
    }

    /// Snapshot of the parameters taken at construction.
    pub fn initial_parameters(&self) -> &[Tensor<T>] {
        &self.theta0
    }

    pub fn reset_optimizer(&mut self) {
        self.optimizer = Optimizer::new(self.settings.optimizer, self.optimizer.lr());
    }

    /// One optimizer step on a batch. Returns the mean cross-entropy before the
    /// update and the rescaling report when soft weight rescaling is active.
    pub fn step(&mut self, x: &Tensor<T>, labels: &[usize]) -> Result<(f64, Option<ScaleReport>)> {
        self.tape.reset();
        let fwd = self.net.forward_tape(&mut self.tape, x)?;
        let loss = self.tape.softmax_cross_entropy(fwd.logits, labels)?;
        let loss_value = self.tape.value(loss).data()[0].as_f64();
        let mut grads = self.tape.backward(loss)?;
        let params = self.net.parameters();
        let mut g: Vec<Tensor<T>> = fwd
            .params
            .iter()
            .zip(&params)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        match self.settings.regularizer {
            RegularizerConfig::L2 { lambda } => {
                for (gi, p) in g.iter_mut().zip(&params) {
                    gi.axpy(T::lit(lambda), p)?;
                }
            }
            RegularizerConfig::L2Init { lambda } => {
                for ((gi, p), p0) in g.iter_mut().zip(&params).zip(&self.theta0) {
                    gi.axpy(T::one(), &plasticity::l2_init_grad(p, p0, T::lit(lambda))?)?;
                }
            }
            _ => {}
        }
        let clip = self.settings.clip;
        self.optimizer.step(&mut self.net.parameters_mut(), &g, clip)?;
        let report = match &self.settings.regularizer {
            RegularizerConfig::Swr { swr, .. } => Some(plasticity::swr_step(&mut self.net, swr)?),
            _ => None,
        };
        Ok((loss_value, report))
    }

    /// One pass over `ds`. `lr_epoch` indexes the learning-rate schedule;
    /// `(order_seed, order_epoch)` fixes the batch order.
    pub fn train_epoch(
        &mut self,
        ds: &Dataset,
        lr_epoch: usize,
        order_seed: u64,
        order_epoch: usize,
    ) -> Result<EpochStats> {
        let lr = self.settings.schedule.lr_at(lr_epoch);
        self.optimizer.set_lr(lr);
        if lr_epoch > 0 && self.settings.schedule.is_milestone(lr_epoch) {
            if let RegularizerConfig::Swr {
                reinit_on_decay: true,
                ..
            } = self.settings.regularizer
            {
                plasticity::swr_reinit_norms(&mut self.net);
            }
        }
        let needs_pairs = self.net.has_batch_norm();
        let mut total = 0.0;
        let mut seen = 0usize;
        let mut steps = 0;
        let mut last_scale = None;
        for idx in batch_indices(ds.len(), self.settings.batch_size, order_seed, order_epoch) {
            if needs_pairs && idx.len() < 2 {
                continue;
            }
            let (x, y) = ds.gather::<T>(&idx)?;
            let (loss, report) = self.step(&x, &y)?;
            total += loss * idx.len() as f64;
            seen += idx.len();
            steps += 1;
            if report.is_some() {
                last_scale = report;
            }
        }
        Ok(EpochStats {
            mean_loss: if seen > 0 { total / seen as f64 } else { f64::NAN },
            lr,
            steps,
            last_scale,
        })
    }

    /// Applies the boundary method (shrink-and-perturb or head reset), if
    /// configured. Returns true when something fired.
    pub fn at_boundary(&mut self, reset_seed: u64) -> Result<bool> {
        match self.settings.regularizer {
            RegularizerConfig::ShrinkPerturb { lambda } => {
                plasticity::shrink_perturb(&mut self.net, &self.theta0, T::lit(lambda))?;
                Ok(true)
            }
            RegularizerConfig::HeadReset => {
                plasticity::head_reset(&mut self.net, reset_seed)?;
                Ok(true)
            }
            _ => Ok(false),
        }
    }
}

/// Rows of a prediction matrix whose argmax equals the label, as a fraction.
pub fn accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty batch".into()));
    }
    let pred = logits.argmax_rows()?;
    if pred.len() != labels.len() {
        return Err(Error::shape(
            "accuracy",
            format!("{} predictions for {} labels", pred.len(), labels.len()),
        ));
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

const EVAL_CHUNK: usize = 2048;

/// Predicted class of every sample, in inference mode.
pub fn predictions<T: Scalar>(net: &Network<T>, ds: &Dataset) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(ds.len());
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let (x, _) = ds.gather::<T>(chunk)?;
        out.extend(net.predict(&x)?.argmax_rows()?);
    }
    Ok(out)
}

/// Test accuracy in inference mode.
pub fn evaluate<T: Scalar>(net: &Network<T>, ds: &Dataset) -> Result<f64> {
    let pred = predictions(net, ds)?;
    let hits = pred.iter().zip(ds.labels()).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / ds.len() as f64)
}
