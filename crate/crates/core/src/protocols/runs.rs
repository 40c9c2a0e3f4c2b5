use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::optim::Optimizer;
use crate::plasticity;
use crate::rng::{derive_seed, streams};
use crate::scalar::Scalar;

use super::record::RecordContext;
use super::train::{evaluate, predictions, Trainer};
use super::{ProtocolConfig, ProtocolKind, RunRecord, TaskData};

pub type Sink<'a> = dyn FnMut(RunRecord) -> Result<()> + 'a;

fn phase_seed(seed: u64, phase: u64) -> u64 {
    derive_seed(seed, streams::indexed(streams::PHASE, phase))
}

const RESET_OFFSET: u64 = 1 << 16;
const ARM_OFFSET: u64 = 1 << 20;

fn check_kind(cfg: &ProtocolConfig, allowed: &[ProtocolKind]) -> Result<()> {
    cfg.validate()?;
    if allowed.contains(&cfg.kind) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "protocol {} cannot run as {}",
            cfg.kind.name(),
            allowed.iter().map(|k| k.name()).collect::<Vec<_>>().join(" or ")
        )))
    }
}

struct Arm<'a, T: Scalar> {
    trainer: Trainer<T>,
    ctx: &'a RecordContext<'a>,
    name: &'static str,
    magnitude: Option<f64>,
}

impl<T: Scalar> Arm<'_, T> {
    /// Trains one epoch, evaluates, and emits a row. Returns test accuracy.
    #[allow(clippy::too_many_arguments)]
    fn epoch(
        &mut self,
        train: &Dataset,
        test: &Dataset,
        stage: usize,
        epoch: usize,
        order_seed: u64,
        order_epoch: usize,
        sink: &mut Sink<'_>,
    ) -> Result<f64> {
        let stats = self.trainer.train_epoch(train, epoch, order_seed, order_epoch)?;
        if !stats.mean_loss.is_finite() && stats.steps > 0 {
            return Err(Error::NonFinite(format!(
                "training loss became {} in epoch {epoch}",
                stats.mean_loss
            )));
        }
        let acc = evaluate(&self.trainer.net, test)?;
        sink(self.ctx.record(
            &self.trainer.net,
            self.name,
            stage,
            epoch,
            Some(stats.mean_loss),
            acc,
            stats.lr,
            stats.last_scale.as_ref(),
            self.magnitude,
        )?)?;
        Ok(acc)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarmStartResult {
    pub phase1_final: f64,
    pub warm_final: f64,
    pub scratch_final: f64,
}

/// Trains on a random `warm_fraction` of the data, applies the boundary
/// method, then trains on all data. A from-scratch arm trains on all data
/// with the same batch order as the second phase.
pub fn run_warm_start<T: Scalar>(
    cfg: &ProtocolConfig,
    data: &TaskData,
    seed: u64,
    sink: &mut Sink<'_>,
) -> Result<WarmStartResult> {
    check_kind(cfg, &[ProtocolKind::WarmStart])?;
    let epochs = cfg.effective_epochs();
    let run_id = cfg.run_id(seed);
    let ctx = RecordContext {
        run_id: &run_id,
        protocol: cfg.kind,
        method: cfg.regularizer.name(),
        seed,
    };
    let (subset, full) = data::split_fraction(&data.train, cfg.warm_fraction, seed)?;

    let net = Network::<T>::build(&cfg.model, seed)?;
    let mut arm = Arm {
        trainer: Trainer::new(net.clone(), cfg.settings())?,
        ctx: &ctx,
        name: "main",
        magnitude: None,
    };
    let mut phase1_final = 0.0;
    for e in 0..epochs {
        phase1_final = arm.epoch(&subset, &data.test, 1, e, phase_seed(seed, 1), e, sink)?;
    }
    arm.trainer.at_boundary(phase_seed(seed, RESET_OFFSET + 2))?;
    let mut warm_final = 0.0;
    for e in 0..epochs {
        warm_final = arm.epoch(&full, &data.test, 2, epochs + e, phase_seed(seed, 2), e, sink)?;
    }

    let mut scratch = Arm {
        trainer: Trainer::new(net, cfg.settings())?,
        ctx: &ctx,
        name: "scratch",
        magnitude: None,
    };
    let mut scratch_final = 0.0;
    for e in 0..epochs {
        scratch_final = scratch.epoch(&full, &data.test, 1, e, phase_seed(seed, 2), e, sink)?;
    }
    Ok(WarmStartResult {
        phase1_final,
        warm_final,
        scratch_final,
    })
}

/// Accuracy lost across each stage switch: the last accuracy of stage `k-1`
/// minus the first accuracy of stage `k`.
pub fn boundary_drops(stage_accs: &[Vec<f64>]) -> Vec<f64> {
    stage_accs
        .windows(2)
        .filter_map(|w| Some(w[0].last()? - w[1].first()?))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContinualResult {
    /// Test accuracy after every epoch, grouped by stage.
    pub stage_accs: Vec<Vec<f64>>,
    pub drops: Vec<f64>,
    pub final_acc: f64,
}

impl ContinualResult {
    pub fn mean_drop(&self) -> f64 {
        if self.drops.is_empty() {
            0.0
        } else {
            self.drops.iter().sum::<f64>() / self.drops.len() as f64
        }
    }
}

/// Splits the training data into `chunks` random chunks and trains one stage
/// per chunk, either on all chunks seen so far or on the current one alone.
pub fn run_continual<T: Scalar>(
    cfg: &ProtocolConfig,
    data: &TaskData,
    seed: u64,
    sink: &mut Sink<'_>,
) -> Result<ContinualResult> {
    check_kind(cfg, &[ProtocolKind::ContinualFull, ProtocolKind::ContinualLimited])?;
    let epochs = cfg.effective_epochs();
    let run_id = cfg.run_id(seed);
    let ctx = RecordContext {
        run_id: &run_id,
        protocol: cfg.kind,
        method: cfg.regularizer.name(),
        seed,
    };
    let schedule = data::make_chunks(data.train.len(), cfg.chunks, cfg.access_mode(), seed)?;
    let mut arm = Arm {
        trainer: Trainer::new(Network::<T>::build(&cfg.model, seed)?, cfg.settings())?,
        ctx: &ctx,
        name: "main",
        magnitude: None,
    };
    let mut stage_accs = Vec::with_capacity(cfg.chunks);
    for stage in 1..=cfg.chunks {
        if stage > 1 {
            arm.trainer.at_boundary(phase_seed(seed, RESET_OFFSET + stage as u64))?;
        }
        let ds = data::stage_data(&schedule, &data.train, stage)?;
        let mut accs = Vec::with_capacity(epochs);
        for e in 0..epochs {
            let global = (stage - 1) * epochs + e;
            accs.push(arm.epoch(&ds, &data.test, stage, global, phase_seed(seed, stage as u64), e, sink)?);
        }
        stage_accs.push(accs);
    }
    let drops = boundary_drops(&stage_accs);
    let final_acc = *stage_accs.last().and_then(|s| s.last()).expect("at least one epoch");
    Ok(ContinualResult {
        stage_accs,
        drops,
        final_acc,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SingleTaskResult<T: Scalar> {
    pub accs: Vec<f64>,
    pub losses: Vec<f64>,
    pub final_acc: f64,
    /// Network and optimizer after the last epoch, for checkpointing.
    pub net: Network<T>,
    pub optimizer: Optimizer<T>,
}

fn train_single<T: Scalar>(
    arm: &mut Arm<'_, T>,
    data: &TaskData,
    epochs: usize,
    first_epoch: usize,
    order: (u64, usize),
    sink: &mut Sink<'_>,
) -> Result<Vec<f64>> {
    let (order_seed, first_order_epoch) = order;
    (0..epochs)
        .map(|e| {
            arm.epoch(
                &data.train,
                &data.test,
                1,
                first_epoch + e,
                order_seed,
                first_order_epoch + e,
                sink,
            )
        })
        .collect()
}

/// Trains one network on the whole training set.
pub fn run_single_task<T: Scalar>(
    cfg: &ProtocolConfig,
    data: &TaskData,
    seed: u64,
    sink: &mut Sink<'_>,
) -> Result<SingleTaskResult<T>> {
    let net = Network::<T>::build(&cfg.model, seed)?;
    let optimizer = Optimizer::new(cfg.optimizer, cfg.schedule.lr_at(0));
    resume_single_task(cfg, data, seed, net, optimizer, 0, sink)
}

/// Continues a single-task run from `first_epoch` with the given network and
/// optimizer state. Batch order, learning rate and the initial parameters
/// used by anchored regularizers all follow from `seed` and the epoch, so
/// resuming from a checkpoint retraces the uninterrupted run.
pub fn resume_single_task<T: Scalar>(
    cfg: &ProtocolConfig,
    data: &TaskData,
    seed: u64,
    net: Network<T>,
    optimizer: Optimizer<T>,
    first_epoch: usize,
    sink: &mut Sink<'_>,
) -> Result<SingleTaskResult<T>> {
    check_kind(cfg, &[ProtocolKind::SingleTask])?;
    let epochs = cfg.effective_epochs();
    if first_epoch >= epochs {
        return Err(Error::Config(format!(
            "cannot resume at epoch {first_epoch} of a {epochs}-epoch run"
        )));
    }
    if net.architecture() != &cfg.model {
        return Err(Error::Config(format!(
            "network {} does not match configured model {}",
            net.architecture(),
            cfg.model
        )));
    }
    let run_id = cfg.run_id(seed);
    let ctx = RecordContext {
        run_id: &run_id,
        protocol: cfg.kind,
        method: cfg.regularizer.name(),
        seed,
    };
    let initial = Network::<T>::build(&cfg.model, seed)?;
    let mut trainer = Trainer::with_initial(net, initial.parameters().into_iter().cloned().collect(), cfg.settings())?;
    trainer.optimizer = optimizer;
    let mut arm = Arm {
        trainer,
        ctx: &ctx,
        name: "main",
        magnitude: None,
    };
    let mut losses = Vec::new();
    let mut rows = |r: RunRecord| {
        losses.push(r.train_loss.unwrap_or(f64::NAN));
        sink(r)
    };
    let accs = train_single(
        &mut arm,
        data,
        epochs - first_epoch,
        first_epoch,
        (phase_seed(seed, 1), first_epoch),
        &mut rows,
    )?;
    let final_acc = *accs.last().expect("epochs > 0");
    Ok(SingleTaskResult {
        accs,
        losses,
        final_acc,
        net: arm.trainer.net,
        optimizer: arm.trainer.optimizer,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RescaleRow {
    pub magnitude: f64,
    pub base_acc: f64,
    pub proportional_acc: f64,
    /// Every test prediction of the proportional arm matches the unscaled one.
    pub argmax_identical: bool,
    pub naive_acc: f64,
    /// Best accuracy during further training, when any was configured.
    pub proportional_best: Option<f64>,
    pub naive_best: Option<f64>,
}

/// Trains a network, then for every magnitude `m` scales each weighted layer
/// by `m`: proportionally (biases follow the cumulative product) and naively
/// (biases untouched). Reports accuracy right after scaling and the best
/// accuracy over further training with a fresh optimizer.
pub fn run_rescale_robustness<T: Scalar>(
    cfg: &ProtocolConfig,
    data: &TaskData,
    seed: u64,
    sink: &mut Sink<'_>,
) -> Result<Vec<RescaleRow>> {
    check_kind(cfg, &[ProtocolKind::RescaleRobustness])?;
    let epochs = cfg.effective_epochs();
    let post = cfg.effective_post_scale_epochs();
    let run_id = cfg.run_id(seed);
    let ctx = RecordContext {
        run_id: &run_id,
        protocol: cfg.kind,
        method: cfg.regularizer.name(),
        seed,
    };
    let mut arm = Arm {
        trainer: Trainer::new(Network::<T>::build(&cfg.model, seed)?, cfg.settings())?,
        ctx: &ctx,
        name: "main",
        magnitude: None,
    };
    train_single(&mut arm, data, epochs, 0, (phase_seed(seed, 1), 0), sink)?;
    let base = arm.trainer.net;
    let base_pred = predictions(&base, &data.test)?;
    let base_acc = evaluate(&base, &data.test)?;
    let layers = base.weighted_layers().len();

    let mut rows = Vec::with_capacity(cfg.magnitudes.len());
    for (i, &m) in cfg.magnitudes.iter().enumerate() {
        let factors = vec![T::lit(m); layers];
        let mut prop = base.clone();
        plasticity::rescale_proportional(&mut prop, &factors)?;
        let mut naive = base.clone();
        plasticity::rescale_weights_only(&mut naive, &factors)?;
        let prop_pred = predictions(&prop, &data.test)?;
        let proportional_acc = evaluate(&prop, &data.test)?;
        let naive_acc = evaluate(&naive, &data.test)?;

        let mut best = [None, None];
        for (k, (name, net, acc)) in [("proportional", prop, proportional_acc), ("naive", naive, naive_acc)]
            .into_iter()
            .enumerate()
        {
            let mut scaled = Arm {
                trainer: Trainer::new(net, cfg.settings())?,
                ctx: &ctx,
                name,
                magnitude: Some(m),
            };
            sink(ctx.record(&scaled.trainer.net, name, 1, epochs - 1, None, acc, 0.0, None, Some(m))?)?;
            if post > 0 {
                let order = phase_seed(seed, ARM_OFFSET + (2 * i + k) as u64);
                let accs = train_single(&mut scaled, data, post, epochs, (order, 0), sink)?;
                best[k] = accs.into_iter().reduce(f64::max);
            }
        }
        rows.push(RescaleRow {
            magnitude: m,
            base_acc,
            proportional_acc,
            argmax_identical: prop_pred == base_pred,
            naive_acc,
            proportional_best: best[0],
            naive_best: best[1],
        });
    }
    Ok(rows)
}
