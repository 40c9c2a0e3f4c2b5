//! Run configuration files.
//!
//! A configuration is a list of `key = value` lines. Keys may be dotted
//! (`data.dir`), or grouped under a `[section]` header, which prefixes every
//! key that follows. `#` starts a comment. Lists are comma separated.
//!
//! ```text
//! protocol = warm_start
//! model = mlp:784-100-100-10
//! method = swr
//! lambda = 1e-4
//!
//! [data]
//! source = mnist
//! dir = data/mnist
//! ```
//!
//! Every key must be known and must apply to the chosen protocol, method,
//! data source, schedule and clip; anything else is rejected before a run
//! starts.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use swr_core::data::GaussianMixture;
use swr_core::nn::Architecture;
use swr_core::optim::{Clip, LrSchedule, OptimizerKind, DEFAULT_LR};
use swr_core::plasticity::{RegularizerConfig, SwrConfig};
use swr_core::protocols::{DataSpec, ProtocolConfig, ProtocolKind};

use crate::error::{CliError, Result};

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "protocol",
    "model",
    "data.source",
    "data.dir",
    "data.dim",
    "data.classes",
    "data.radius",
    "data.seed",
    "data.train",
    "data.test",
    "method",
    "lambda",
    "swr.lambda_f",
    "swr.lambda_c",
    "swr.reinit_on_decay",
    "optimizer",
    "lr",
    "schedule",
    "schedule.milestones",
    "schedule.factor",
    "batch_size",
    "clip",
    "clip.value",
    "epochs",
    "seeds",
    "data_seed",
    "max_train_samples",
    "max_epochs",
    "warm_fraction",
    "chunks",
    "magnitudes",
    "post_scale_epochs",
    "run_name",
    "output.dir",
    "output.verbosity",
];

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    value: String,
    /// Line in the source file, or `None` for command-line overrides.
    line: Option<usize>,
}

/// Parsed but not yet interpreted configuration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, Entry>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| CliError::Config(format!("line {n}: unterminated section header")))?
                    .trim();
                if name.is_empty() || name.contains(char::is_whitespace) {
                    return Err(CliError::Config(format!("line {n}: bad section name `{name}`")));
                }
                section = format!("{name}.");
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {n}: expected `key = value`")))?;
            let key = format!("{section}{}", key.trim());
            let key = if key == "data" { "data.source".to_string() } else { key };
            if !KEYS.contains(&key.as_str()) {
                return Err(CliError::Config(format!("line {n}: unknown key `{key}`")));
            }
            let value = value.trim().trim_matches('"').to_string();
            if value.is_empty() {
                return Err(CliError::Config(format!("line {n}: `{key}` has no value")));
            }
            if let Some(prev) = entries.insert(key.clone(), Entry { value, line: Some(n) }) {
                return Err(CliError::Config(format!(
                    "line {n}: `{key}` already set on line {}",
                    prev.line.unwrap_or(0)
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Sets or replaces a key, as a command-line override.
    pub fn set(&mut self, key: &str, value: impl Display) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(CliError::Config(format!("unknown key `{key}`")));
        }
        self.entries.insert(
            key.to_string(),
            Entry {
                value: value.to_string(),
                line: None,
            },
        );
        Ok(())
    }

    pub fn remove(&mut self, key: &str) {
        self.entries.remove(key);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    pub fn build(&self) -> Result<RunConfig> {
        let r = Reader {
            raw: self,
            used: RefCell::new(BTreeSet::new()),
        };
        let cfg = build(&r)?;
        let unused: Vec<String> = self
            .entries
            .iter()
            .filter(|(k, _)| !r.used.borrow().contains(k.as_str()))
            .map(|(k, e)| match e.line {
                Some(n) => format!("`{k}` (line {n})"),
                None => format!("`{k}`"),
            })
            .collect();
        if !unused.is_empty() {
            return Err(CliError::Config(format!(
                "{} not used by this configuration",
                unused.join(", ")
            )));
        }
        cfg.protocol.validate()?;
        Ok(cfg)
    }
}

/// A fully interpreted configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub protocol: ProtocolConfig,
    pub out_dir: PathBuf,
    /// 0 prints nothing, 1 a summary per run, 2 a line per epoch.
    pub verbosity: u8,
}

struct Reader<'a> {
    raw: &'a RawConfig,
    used: RefCell<BTreeSet<&'static str>>,
}

impl Reader<'_> {
    fn str(&self, key: &'static str) -> Option<&str> {
        let v = self.raw.get(key)?;
        self.used.borrow_mut().insert(key);
        Some(v)
    }

    fn err(&self, key: &str, msg: impl Display) -> CliError {
        match self.raw.entries.get(key).and_then(|e| e.line) {
            Some(n) => CliError::Config(format!("line {n}: `{key}`: {msg}")),
            None => CliError::Config(format!("`{key}`: {msg}")),
        }
    }

    fn opt<T: FromStr>(&self, key: &'static str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.str(key)
            .map(|v| v.parse::<T>().map_err(|e| self.err(key, format!("`{v}`: {e}"))))
            .transpose()
    }

    fn or<T: FromStr>(&self, key: &'static str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.opt(key)?.unwrap_or(default))
    }

    fn required<T: FromStr>(&self, key: &'static str, what: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.opt(key)?
            .ok_or_else(|| CliError::Config(format!("`{key}` is required {what}")))
    }

    fn list<T: FromStr>(&self, key: &'static str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        self.str(key)
            .map(|v| {
                v.split(',')
                    .map(|s| s.trim().parse::<T>().map_err(|e| self.err(key, format!("`{s}`: {e}"))))
                    .collect()
            })
            .transpose()
    }
}

fn protocol_kind(name: &str) -> Option<ProtocolKind> {
    [
        ProtocolKind::WarmStart,
        ProtocolKind::ContinualFull,
        ProtocolKind::ContinualLimited,
        ProtocolKind::SingleTask,
        ProtocolKind::RescaleRobustness,
    ]
    .into_iter()
    .find(|k| k.name() == name)
}

fn build(r: &Reader<'_>) -> Result<RunConfig> {
    let kind_name: String = r.required("protocol", "(or use a protocol subcommand)")?;
    let kind = protocol_kind(&kind_name).ok_or_else(|| r.err("protocol", format!("unknown protocol `{kind_name}`")))?;
    let model: Architecture = r.required("model", "")?;
    let data = data_spec(r)?;
    let mut cfg = ProtocolConfig::new(kind, model, data);
    cfg.regularizer = regularizer(r)?;

    cfg.optimizer = match r.str("optimizer").unwrap_or("adam") {
        "adam" => OptimizerKind::Adam,
        "sgd" => OptimizerKind::Sgd,
        other => return Err(r.err("optimizer", format!("unknown optimizer `{other}`"))),
    };
    let lr = r.or("lr", DEFAULT_LR)?;
    cfg.schedule = match r.str("schedule").unwrap_or("constant") {
        "constant" => LrSchedule::constant(lr),
        "step_decay" => {
            let milestones = r
                .list("schedule.milestones")?
                .ok_or_else(|| CliError::Config("step_decay needs `schedule.milestones`".into()))?;
            LrSchedule::step_decay(lr, milestones, r.or("schedule.factor", 0.1)?)?
        }
        other => return Err(r.err("schedule", format!("unknown schedule `{other}`"))),
    };
    cfg.clip = match r.str("clip").unwrap_or("none") {
        "none" => Clip::None,
        "grad_norm" => Clip::GradNorm {
            max: r.required("clip.value", "for grad_norm clipping")?,
        },
        "sq_norm_change" => Clip::SqNormChange {
            bound: r.required("clip.value", "for sq_norm_change clipping")?,
        },
        other => return Err(r.err("clip", format!("unknown clip `{other}`"))),
    };

    cfg.batch_size = r.or("batch_size", cfg.batch_size)?;
    cfg.epochs = r.or("epochs", cfg.epochs)?;
    if let Some(seeds) = r.list("seeds")? {
        cfg.seeds = seeds;
    }
    cfg.data_seed = r.or("data_seed", cfg.data_seed)?;
    cfg.max_train_samples = r.opt("max_train_samples")?;
    cfg.max_epochs = r.opt("max_epochs")?;
    if kind == ProtocolKind::WarmStart {
        cfg.warm_fraction = r.or("warm_fraction", cfg.warm_fraction)?;
    }
    if matches!(kind, ProtocolKind::ContinualFull | ProtocolKind::ContinualLimited) {
        cfg.chunks = r.or("chunks", cfg.chunks)?;
    }
    if kind == ProtocolKind::RescaleRobustness {
        if let Some(m) = r.list("magnitudes")? {
            cfg.magnitudes = m;
        }
        cfg.post_scale_epochs = r.or("post_scale_epochs", cfg.post_scale_epochs)?;
    }
    cfg.run_name = r.opt("run_name")?;

    Ok(RunConfig {
        protocol: cfg,
        out_dir: r.or("output.dir", PathBuf::from("runs"))?,
        verbosity: r.or("output.verbosity", 1)?,
    })
}

fn data_spec(r: &Reader<'_>) -> Result<DataSpec> {
    let source = r
        .str("data.source")
        .ok_or_else(|| CliError::Config("`data.source` is required".into()))?;
    let dir = || r.required::<PathBuf>("data.dir", &format!("for {source} data"));
    Ok(match source {
        "mnist" => DataSpec::Mnist { dir: dir()? },
        "cifar10" => DataSpec::Cifar10 { dir: dir()? },
        "cifar100" => DataSpec::Cifar100 { dir: dir()? },
        "synthetic" => {
            let mut mixture = GaussianMixture::new(
                r.required("data.dim", "for synthetic data")?,
                r.required("data.classes", "for synthetic data")?,
                r.or("data.seed", 0)?,
            );
            mixture.radius = r.or("data.radius", GaussianMixture::DEFAULT_RADIUS)?;
            DataSpec::Synthetic {
                mixture,
                train: r.required("data.train", "for synthetic data")?,
                test: r.required("data.test", "for synthetic data")?,
            }
        }
        other => return Err(r.err("data.source", format!("unknown data source `{other}`"))),
    })
}

fn regularizer(r: &Reader<'_>) -> Result<RegularizerConfig> {
    let method = r.str("method").unwrap_or("vanilla");
    let lambda = |what: &str| r.required::<f64>("lambda", &format!("for {what}"));
    Ok(match method {
        "vanilla" | "none" => RegularizerConfig::None,
        "swr" => {
            let shared: Option<f64> = r.opt("lambda")?;
            let part = |key: &'static str| -> Result<f64> {
                r.opt(key)?
                    .or(shared)
                    .ok_or_else(|| CliError::Config(format!("swr needs `lambda` or `{key}`")))
            };
            RegularizerConfig::Swr {
                swr: SwrConfig {
                    lambda_f: part("swr.lambda_f")?,
                    lambda_c: part("swr.lambda_c")?,
                },
                reinit_on_decay: r.or("swr.reinit_on_decay", false)?,
            }
        }
        "l2" => RegularizerConfig::L2 { lambda: lambda("l2")? },
        "l2_init" => RegularizerConfig::L2Init {
            lambda: lambda("l2_init")?,
        },
        "shrink_perturb" => RegularizerConfig::ShrinkPerturb {
            lambda: lambda("shrink_perturb")?,
        },
        "head_reset" => RegularizerConfig::HeadReset,
        other => return Err(r.err("method", format!("unknown method `{other}`"))),
    })
}
