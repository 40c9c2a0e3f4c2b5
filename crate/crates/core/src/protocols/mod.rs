//! Experimental procedures: warm-starting, continual learning over data
//! chunks, single-task training and the rescaling robustness check.
//!
//! Every run is a pure function of its configuration and seed. Progress is
//! reported as [`RunRecord`] rows passed to a caller-supplied sink.

mod record;
mod runs;
mod train;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{self, AccessMode, Dataset, GaussianMixture, Split};
use crate::error::{Error, Result};
use crate::nn::Architecture;
use crate::optim::{Clip, LrSchedule, OptimizerKind, DEFAULT_LR};
use crate::plasticity::RegularizerConfig;

pub use record::{RunRecord, ScaleSummary};
pub use runs::{
    boundary_drops, resume_single_task, run_continual, run_rescale_robustness, run_single_task, run_warm_start,
    ContinualResult, RescaleRow, SingleTaskResult, WarmStartResult,
};
pub use train::{accuracy, evaluate, predictions, EpochStats, TrainSettings, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    WarmStart,
    ContinualFull,
    ContinualLimited,
    SingleTask,
    RescaleRobustness,
}

impl ProtocolKind {
    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::WarmStart => "warm_start",
            ProtocolKind::ContinualFull => "continual_full",
            ProtocolKind::ContinualLimited => "continual_limited",
            ProtocolKind::SingleTask => "single_task",
            ProtocolKind::RescaleRobustness => "rescale_robustness",
        }
    }
}

/// Where training and test data come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSpec {
    Mnist { dir: PathBuf },
    Cifar10 { dir: PathBuf },
    Cifar100 { dir: PathBuf },
    Synthetic {
        mixture: GaussianMixture,
        train: usize,
        test: usize,
    },
}

/// Training and held-out data of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub test: Dataset,
}

impl DataSpec {
    /// Loads the data, keeping at most `max_train` training samples (drawn
    /// with `seed`).
    pub fn load(&self, max_train: Option<usize>, seed: u64) -> Result<TaskData> {
        let (train, test) = match self {
            DataSpec::Mnist { dir } => (
                data::load_mnist(dir, Split::Train)?,
                data::load_mnist(dir, Split::Test)?,
            ),
            DataSpec::Cifar10 { dir } => (
                data::load_cifar10(dir, Split::Train)?,
                data::load_cifar10(dir, Split::Test)?,
            ),
            DataSpec::Cifar100 { dir } => (
                data::load_cifar100(dir, Split::Train)?,
                data::load_cifar100(dir, Split::Test)?,
            ),
            DataSpec::Synthetic {
                mixture,
                train,
                test,
            } => (mixture.train(*train)?, mixture.test(*test)?),
        };
        let train = match max_train {
            Some(cap) => data::cap_samples(&train, cap, seed)?,
            None => train,
        };
        Ok(TaskData { train, test })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolConfig {
    pub kind: ProtocolKind,
    pub model: Architecture,
    pub data: DataSpec,
    pub regularizer: RegularizerConfig,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub clip: Clip,
    /// Epochs per phase (warm start), per stage (continual), or in total.
    pub epochs: usize,
    pub seeds: Vec<u64>,
    /// Seed for subsampling the training data, shared by all runs.
    pub data_seed: u64,
    pub max_train_samples: Option<usize>,
    /// Upper limit applied to `epochs` and `post_scale_epochs`.
    pub max_epochs: Option<usize>,
    /// Share of the training data seen in the first warm-start phase.
    pub warm_fraction: f64,
    pub chunks: usize,
    pub magnitudes: Vec<f64>,
    pub post_scale_epochs: usize,
    /// Optional identifier prefix for the emitted rows.
    pub run_name: Option<String>,
}

impl ProtocolConfig {
    pub fn new(kind: ProtocolKind, model: Architecture, data: DataSpec) -> Self {
        Self {
            kind,
            model,
            data,
            regularizer: RegularizerConfig::None,
            optimizer: OptimizerKind::Adam,
            schedule: LrSchedule::constant(DEFAULT_LR),
            batch_size: 256,
            clip: Clip::None,
            epochs: 100,
            seeds: vec![0],
            data_seed: 0,
            max_train_samples: None,
            max_epochs: None,
            warm_fraction: 0.5,
            chunks: 10,
            magnitudes: vec![0.2, 0.5, 2.0, 5.0],
            post_scale_epochs: 50,
            run_name: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.settings().validate().map_err(|e| match e {
            Error::InvalidArgument(m) => Error::Config(m),
            e => e,
        })?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(self.warm_fraction > 0.0 && self.warm_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "warm_fraction {} outside (0, 1]",
                self.warm_fraction
            )));
        }
        if self.chunks == 0 {
            return Err(Error::Config("chunks must be positive".into()));
        }
        if let Some(m) = self.magnitudes.iter().find(|m| !(m.is_finite() && **m > 0.0)) {
            return Err(Error::Config(format!("scaling magnitude {m} must be positive")));
        }
        if self.max_epochs == Some(0) || self.max_train_samples == Some(0) {
            return Err(Error::Config("caps must be positive".into()));
        }
        crate::nn::Network::<f64>::build(&self.model, 0)?;
        Ok(())
    }

    pub fn settings(&self) -> TrainSettings {
        TrainSettings {
            optimizer: self.optimizer,
            schedule: self.schedule.clone(),
            batch_size: self.batch_size,
            clip: self.clip,
            regularizer: self.regularizer.clone(),
        }
    }

    pub fn effective_epochs(&self) -> usize {
        self.max_epochs.map_or(self.epochs, |m| self.epochs.min(m))
    }

    pub fn effective_post_scale_epochs(&self) -> usize {
        self.max_epochs
            .map_or(self.post_scale_epochs, |m| self.post_scale_epochs.min(m))
    }

    pub fn access_mode(&self) -> AccessMode {
        match self.kind {
            ProtocolKind::ContinualLimited => AccessMode::Limited,
            _ => AccessMode::Full,
        }
    }

    pub fn load_data(&self) -> Result<TaskData> {
        self.data.load(self.max_train_samples, self.data_seed)
    }

    pub fn run_id(&self, seed: u64) -> String {
        let base = self
            .run_name
            .clone()
            .unwrap_or_else(|| self.kind.name().to_string());
        format!("{base}-{}-s{seed}", self.regularizer.name())
    }
}
