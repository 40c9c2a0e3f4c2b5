use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use swr_core::optim::Optimizer;
use swr_core::protocols::{
    resume_single_task, run_continual, run_rescale_robustness, run_single_task, run_warm_start, ProtocolKind,
    RunRecord, TaskData,
};

use crate::checkpoint::Checkpoint;
use crate::config::{RawConfig, RunConfig};
use crate::error::{CliError, Result};
use crate::metrics_log::{read_metrics, MetricsWriter};
use crate::plot::{emit_plot, Quantity};

#[derive(Debug, Parser)]
#[command(name = "swr", version, about = "Soft weight rescaling experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Run configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Run only this seed instead of the configured list.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory for metrics, checkpoints and plots.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Regularization method, replacing the configured one.
    #[arg(long, global = true)]
    pub method: Option<String>,

    /// Method strength; several values run one sweep entry each.
    #[arg(long, global = true, num_args = 1.., value_delimiter = ',')]
    pub lambda: Vec<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one network on the full training set and save a checkpoint.
    Train {
        /// Continue from a checkpoint written by an earlier `train`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train on part of the data, then on all of it, next to a fresh network.
    WarmStart,
    /// Train over a sequence of data chunks.
    Continual,
    /// Rescale a trained network proportionally and naively.
    RescaleCheck,
    /// Summarize metrics logs.
    Metrics {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Draw metrics logs as an SVG line chart.
    Plot {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// `accuracy` or `balance`.
        #[arg(long, default_value = "accuracy")]
        quantity: Quantity,
        /// Output file; defaults to a name derived from the first log.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

pub fn main_with_args<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            return ExitCode::from(CliError::Usage(String::new()).exit_code());
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.into()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Metrics { files } => {
            no_run_flags(&cli, "metrics")?;
            summarize(files)
        }
        Command::Plot { files, quantity, svg } => {
            no_run_flags(&cli, "plot")?;
            let out = match svg {
                Some(p) => p.clone(),
                None => {
                    let stem = files[0].file_stem().unwrap_or_default().to_string_lossy();
                    let name = format!("{stem}-{}.svg", if *quantity == Quantity::Accuracy { "accuracy" } else { "balance" });
                    match &cli.out {
                        Some(dir) => dir.join(name),
                        None => files[0].with_file_name(name),
                    }
                }
            };
            let refs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
            emit_plot(&refs, &out, *quantity)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        _ => run_protocol(&cli),
    }
}

fn no_run_flags(cli: &Cli, command: &str) -> Result<()> {
    if cli.config.is_some() || cli.seed.is_some() || cli.method.is_some() || !cli.lambda.is_empty() {
        return Err(CliError::Usage(format!(
            "`{command}` reads metrics logs only; --config, --seed, --method and --lambda do not apply"
        )));
    }
    Ok(())
}

fn allowed_kinds(command: &Command) -> &'static [ProtocolKind] {
    match command {
        Command::Train { .. } => &[ProtocolKind::SingleTask],
        Command::WarmStart => &[ProtocolKind::WarmStart],
        Command::Continual => &[ProtocolKind::ContinualFull, ProtocolKind::ContinualLimited],
        Command::RescaleCheck => &[ProtocolKind::RescaleRobustness],
        Command::Metrics { .. } | Command::Plot { .. } => &[],
    }
}

/// Reads the configuration, applies command-line overrides and validates
/// every sweep entry before anything runs.
pub fn prepare(cli: &Cli) -> Result<Vec<RunConfig>> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config is required for this command".into()))?;
    let mut raw = RawConfig::load(path)?;
    let allowed = allowed_kinds(&cli.command);
    if raw.get("protocol").is_none() {
        raw.set("protocol", allowed[0].name())?;
    }
    if let Some(method) = &cli.method {
        for key in ["lambda", "swr.lambda_f", "swr.lambda_c", "swr.reinit_on_decay"] {
            raw.remove(key);
        }
        raw.set("method", method)?;
    }
    if let Some(seed) = cli.seed {
        raw.set("seeds", seed)?;
    }
    if let Some(out) = &cli.out {
        raw.set("output.dir", out.display())?;
    }

    let variants = if cli.lambda.is_empty() {
        vec![raw]
    } else {
        let base = raw.get("run_name").or(raw.get("protocol")).unwrap_or("run").to_string();
        cli.lambda
            .iter()
            .map(|&l| {
                let mut v = raw.clone();
                v.set("lambda", l)?;
                if cli.lambda.len() > 1 {
                    v.set("run_name", format!("{base}-lambda{l}"))?;
                }
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?
    };
    let configs = variants.iter().map(RawConfig::build).collect::<Result<Vec<_>>>()?;
    for c in &configs {
        if !allowed.contains(&c.protocol.kind) {
            return Err(CliError::Config(format!(
                "protocol {} does not match this command (expected {})",
                c.protocol.kind.name(),
                allowed.iter().map(|k| k.name()).collect::<Vec<_>>().join(" or ")
            )));
        }
    }
    Ok(configs)
}

fn check_data(cfg: &RunConfig, data: &TaskData) -> Result<()> {
    let model = &cfg.protocol.model;
    let want: usize = model.input.iter().product();
    let got = data.train.sample_len();
    if want != got {
        return Err(CliError::Config(format!(
            "model input {:?} ({want} values) does not fit samples of shape {:?}",
            model.input,
            data.train.sample_shape()
        )));
    }
    let outputs = swr_core::Network64::build(model, 0)?.num_classes();
    if outputs < data.train.num_classes() {
        return Err(CliError::Config(format!(
            "model has {outputs} outputs but the data has {} classes",
            data.train.num_classes()
        )));
    }
    Ok(())
}

fn run_protocol(cli: &Cli) -> Result<()> {
    let configs = prepare(cli)?;
    let resume = match &cli.command {
        Command::Train { resume: Some(p) } => Some(Checkpoint::<f64>::load(p)?),
        _ => None,
    };
    if let (Some(ck), Some(seed)) = (&resume, cli.seed) {
        if ck.seed != seed {
            return Err(CliError::Config(format!(
                "checkpoint was written by seed {}, not {seed}",
                ck.seed
            )));
        }
    }
    let data = configs[0].protocol.load_data()?;
    for cfg in &configs {
        check_data(cfg, &data)?;
    }
    for cfg in &configs {
        std::fs::create_dir_all(&cfg.out_dir)
            .map_err(|e| CliError::Other(format!("{}: {e}", cfg.out_dir.display())))?;
        let seeds = match &resume {
            Some(ck) => vec![ck.seed],
            None => cfg.protocol.seeds.clone(),
        };
        for seed in seeds {
            run_one(cfg, &data, seed, resume.as_ref())?;
        }
    }
    Ok(())
}

fn run_one(cfg: &RunConfig, data: &TaskData, seed: u64, resume: Option<&Checkpoint<f64>>) -> Result<()> {
    let p = &cfg.protocol;
    let run_id = p.run_id(seed);
    let metrics_path = cfg.out_dir.join(format!("{run_id}.jsonl"));
    let mut writer = match resume {
        Some(_) => MetricsWriter::append(&metrics_path)?,
        None => MetricsWriter::create(&metrics_path)?,
    };
    let verbose = cfg.verbosity >= 2;
    let mut sink = |r: RunRecord| -> swr_core::Result<()> {
        writer.write(&r).map_err(|source| swr_core::Error::Io {
            path: metrics_path.clone(),
            source,
        })?;
        if verbose {
            println!(
                "{} {} stage {} epoch {}: loss {} acc {:.4}",
                r.run_id,
                r.arm,
                r.stage,
                r.epoch,
                r.train_loss.map_or("-".into(), |l| format!("{l:.4}")),
                r.test_acc
            );
        }
        Ok(())
    };
    let summary = match p.kind {
        ProtocolKind::SingleTask => {
            let result = match resume {
                Some(ck) => {
                    let optimizer = ck
                        .optimizer
                        .clone()
                        .unwrap_or_else(|| Optimizer::new(p.optimizer, p.schedule.lr_at(ck.next_epoch)));
                    resume_single_task(p, data, seed, ck.net.clone(), optimizer, ck.next_epoch, &mut sink)?
                }
                None => run_single_task::<f64>(p, data, seed, &mut sink)?,
            };
            let ckpt = cfg.out_dir.join(format!("{run_id}.ckpt"));
            Checkpoint {
                net: result.net,
                optimizer: Some(result.optimizer),
                seed,
                next_epoch: p.effective_epochs(),
            }
            .save(&ckpt)?;
            format!("final accuracy {:.4}, checkpoint {}", result.final_acc, ckpt.display())
        }
        ProtocolKind::WarmStart => {
            let r = run_warm_start::<f64>(p, data, seed, &mut sink)?;
            format!(
                "phase 1 {:.4}, warm-started {:.4}, from scratch {:.4}",
                r.phase1_final, r.warm_final, r.scratch_final
            )
        }
        ProtocolKind::ContinualFull | ProtocolKind::ContinualLimited => {
            let r = run_continual::<f64>(p, data, seed, &mut sink)?;
            format!("final accuracy {:.4}, mean boundary drop {:.4}", r.final_acc, r.mean_drop())
        }
        ProtocolKind::RescaleRobustness => {
            let rows = run_rescale_robustness::<f64>(p, data, seed, &mut sink)?;
            let mut table = format!(
                "\n{:>9}  {:>8}  {:>12}  {:>9}  {:>8}",
                "magnitude", "base", "proportional", "identical", "naive"
            );
            for r in rows {
                table += &format!(
                    "\n{:>9}  {:>8.4}  {:>12.4}  {:>9}  {:>8.4}",
                    r.magnitude,
                    r.base_acc,
                    r.proportional_acc,
                    if r.argmax_identical { "yes" } else { "no" },
                    r.naive_acc
                );
            }
            table
        }
    };
    if cfg.verbosity >= 1 {
        println!("{run_id}: {summary}");
        println!("  metrics: {} ({} rows)", writer.path().display(), writer.rows());
    }
    Ok(())
}

fn summarize(files: &[PathBuf]) -> Result<()> {
    println!(
        "{:<36} {:<13} {:>5} {:>6} {:>9} {:>9} {:>10} {:>9}",
        "run", "arm", "rows", "epoch", "final_acc", "best_acc", "final_loss", "balance"
    );
    for f in files {
        let rows = read_metrics(f)?;
        let mut groups: BTreeMap<(String, String), Vec<&RunRecord>> = BTreeMap::new();
        for r in &rows {
            let arm = match r.magnitude {
                Some(m) => format!("{} x{m}", r.arm),
                None => r.arm.clone(),
            };
            groups.entry((r.run_id.clone(), arm)).or_default().push(r);
        }
        for ((run, arm), rs) in groups {
            let last = rs.iter().max_by_key(|r| r.epoch).expect("non-empty group");
            let best = rs.iter().map(|r| r.test_acc).fold(f64::NEG_INFINITY, f64::max);
            println!(
                "{:<36} {:<13} {:>5} {:>6} {:>9.4} {:>9.4} {:>10} {:>9.4}",
                run,
                arm,
                rs.len(),
                last.epoch,
                last.test_acc,
                best,
                last.train_loss.map_or("-".into(), |l| format!("{l:.4}")),
                last.balance_mean
            );
        }
    }
    Ok(())
}
