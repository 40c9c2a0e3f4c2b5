use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use swr_cli::checkpoint::Checkpoint;
use swr_cli::config::RawConfig;
use swr_cli::metrics_log::read_metrics;
use swr_core::nn::Mode;
use swr_core::Tensor64;

fn swr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swr")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn synthetic(protocol: &str, extra: &str) -> String {
    format!(
        "protocol = {protocol}\nmodel = mlp:6-12-3\nbatch_size = 16\nepochs = 2\nseeds = 1\n{extra}\n\
         [data]\nsource = synthetic\ndim = 6\nclasses = 3\ntrain = 120\ntest = 60\n[output]\nverbosity = 1\n"
    )
}

fn run_cfg(cmd: &str, cfg: &Path, out: &Path, more: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(more);
    swr(&args)
}

#[test]
fn train_writes_one_row_per_epoch_and_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "t.cfg", &synthetic("single_task", "method = swr\nlambda = 0.01"));
    let o = run_cfg("train", &cfg, dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_metrics(&dir.path().join("single_task-swr-s1.jsonl")).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 1]);
    assert!(rows.iter().all(|r| r.scale.is_some() && r.weight_norms.len() == 2));
    assert!(dir.path().join("single_task-swr-s1.ckpt").exists());
    assert!(stdout(&o).contains("final accuracy"));
}

#[test]
fn seed_flag_and_method_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "t.cfg", &synthetic("single_task", "method = swr\nlambda = 0.01"));
    let o = run_cfg("train", &cfg, dir.path(), &["--seed", "9", "--method", "head_reset"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_metrics(&dir.path().join("single_task-head_reset-s9.jsonl")).unwrap();
    assert!(rows.iter().all(|r| r.method == "head_reset" && r.seed == 9 && r.scale.is_none()));
}

#[test]
fn lambda_sweep_writes_one_log_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "t.cfg", &synthetic("single_task", "method = l2"));
    let o = run_cfg("train", &cfg, dir.path(), &["--lambda", "0.001,0.01"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for l in ["0.001", "0.01"] {
        assert!(dir.path().join(format!("single_task-lambda{l}-l2-s1.jsonl")).exists());
    }
}

#[test]
fn rescale_check_prints_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "r.cfg",
        &synthetic("rescale_robustness", "magnitudes = 0.5, 5\npost_scale_epochs = 1"),
    );
    let o = run_cfg("rescale-check", &cfg, dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("proportional") && out.contains("naive"), "{out}");
    let table: Vec<&str> = out.lines().filter(|l| l.trim_start().starts_with("0.5") || l.trim_start().starts_with('5')).collect();
    assert_eq!(table.len(), 2, "{out}");
    assert!(table.iter().all(|l| l.contains("yes")));
}

#[test]
fn warm_start_and_continual_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "w.cfg", &synthetic("warm_start", "method = shrink_perturb\nlambda = 0.4"));
    let o = run_cfg("warm-start", &cfg, dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = dir.path().join("warm_start-shrink_perturb-s1.jsonl");
    let rows = read_metrics(&log).unwrap();
    assert_eq!(rows.iter().filter(|r| r.arm == "main").count(), 4);
    assert_eq!(rows.iter().filter(|r| r.arm == "scratch").count(), 2);

    let svg = dir.path().join("w.svg");
    let o = swr(&["plot", log.to_str().unwrap(), "--svg", svg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&svg).unwrap();
    assert_eq!(text.matches("<polyline").count(), 2);
    assert_eq!(text.matches("stroke-dasharray").count(), 2);

    let cfg = config(dir.path(), "c.cfg", &synthetic("continual_limited", "chunks = 3"));
    let o = run_cfg("continual", &cfg, dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("mean boundary drop"));
}

#[test]
fn metrics_and_balance_plot_read_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "t.cfg", &synthetic("single_task", ""));
    assert!(run_cfg("train", &cfg, dir.path(), &[]).status.success());
    let log = dir.path().join("single_task-vanilla-s1.jsonl");
    let o = swr(&["metrics", log.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("single_task-vanilla-s1"));

    let o = swr(&["plot", log.to_str().unwrap(), "--quantity", "balance"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = std::fs::read_to_string(dir.path().join("single_task-vanilla-s1-balance.svg")).unwrap();
    assert!(svg.contains("mean balance") && svg.matches("<polyline").count() == 1);
}

#[test]
fn empty_log_cannot_be_plotted() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("empty.jsonl");
    std::fs::write(&log, "").unwrap();
    let o = swr(&["plot", log.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("empty"));
}

#[test]
fn unknown_flag_prints_usage() {
    let o = swr(&["train", "--bogus"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    let o = swr(&["train"]);
    assert_eq!(o.status.code(), Some(64));
}

#[test]
fn error_kinds_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = config(dir.path(), "bad.cfg", &synthetic("single_task", "learning_rate = 3"));
    assert_eq!(run_cfg("train", &bad, dir.path(), &[]).status.code(), Some(2));

    let wrong = config(dir.path(), "wrong.cfg", &synthetic("warm_start", ""));
    assert_eq!(run_cfg("train", &wrong, dir.path(), &[]).status.code(), Some(2));

    let missing = config(
        dir.path(),
        "m.cfg",
        "model = mlp:784-10\n[data]\nsource = mnist\ndir = /nonexistent/mnist\n",
    );
    let o = run_cfg("train", &missing, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let nan = config(
        dir.path(),
        "n.cfg",
        &synthetic("single_task", "optimizer = sgd\nlr = 1e200"),
    );
    let o = run_cfg("train", &nan, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn no_compute_starts_on_an_invalid_sweep_entry() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "s.cfg", &synthetic("single_task", "method = swr"));
    let o = run_cfg("train", &cfg, dir.path(), &["--lambda", "0.1,2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(std::fs::read_dir(dir.path()).unwrap().all(|e| !e.unwrap().path().to_string_lossy().ends_with(".jsonl")));
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "t.cfg",
        &synthetic("single_task", "method = swr\nlambda = 0.01").replace("mlp:6-12-3", "seq:6|dense(12)|lrelu(0.1)|dense(3)"),
    );
    assert!(run_cfg("train", &cfg, dir.path(), &[]).status.success());
    let path = dir.path().join("single_task-swr-s1.ckpt");
    let ck = Checkpoint::<f64>::load(&path).unwrap();
    let again = dir.path().join("again.ckpt");
    ck.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

    let mut data = Vec::new();
    let mut state = 12345u64;
    for _ in 0..6 * 32 {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        data.push(((state >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0);
    }
    let x = Tensor64::from_vec(&[32, 6], data).unwrap();
    let mut net = ck.net.clone();
    let a = net.forward(&x, Mode::Eval).unwrap();
    let b = Checkpoint::<f64>::load(&again).unwrap().net.forward(&x, Mode::Eval).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_matches_the_trained_network_within_f32_precision() {
    use swr_core::protocols::{run_single_task, DataSpec, ProtocolConfig, ProtocolKind};
    let spec = DataSpec::Synthetic {
        mixture: swr_core::data::GaussianMixture::new(6, 3, 2),
        train: 200,
        test: 50,
    };
    let mut cfg = ProtocolConfig::new(ProtocolKind::SingleTask, "seq:6|dense(10)|relu|dense(3)".parse().unwrap(), spec);
    cfg.epochs = 3;
    cfg.batch_size = 20;
    let data = cfg.load_data().unwrap();
    let r = run_single_task::<f64>(&cfg, &data, 0, &mut |_| Ok(())).unwrap();
    let ck = Checkpoint {
        net: r.net.clone(),
        optimizer: Some(r.optimizer),
        seed: 0,
        next_epoch: 3,
    };
    let mut bytes = Vec::new();
    ck.write(&mut bytes).unwrap();
    let back = Checkpoint::<f64>::read(&mut bytes.as_slice()).unwrap();
    let (x, _) = data.test.all::<f64>().unwrap();
    let a = r.net.predict(&x).unwrap();
    let b = back.net.predict(&x).unwrap();
    let scale = a.max_abs();
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() <= 1e-5 * scale, "{u} vs {v}");
    }
    assert_eq!(back.optimizer, ck.optimizer);
}

#[test]
fn resumed_training_follows_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let long = synthetic("single_task", "method = swr\nlambda = 0.01").replace("epochs = 2", "epochs = 4");
    let whole_dir = dir.path().join("whole");
    let cfg = config(dir.path(), "long.cfg", &long);
    assert!(run_cfg("train", &cfg, &whole_dir, &[]).status.success());

    let part_dir = dir.path().join("part");
    let short = config(dir.path(), "short.cfg", &synthetic("single_task", "method = swr\nlambda = 0.01"));
    assert!(run_cfg("train", &short, &part_dir, &[]).status.success());
    let ckpt = part_dir.join("single_task-swr-s1.ckpt");
    let o = run_cfg("train", &cfg, &part_dir, &["--resume", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    let whole = read_metrics(&whole_dir.join("single_task-swr-s1.jsonl")).unwrap();
    let resumed = read_metrics(&part_dir.join("single_task-swr-s1.jsonl")).unwrap();
    assert_eq!(resumed.len(), 4);
    for (a, b) in whole.iter().zip(&resumed) {
        assert_eq!(a.epoch, b.epoch);
        assert!((a.test_acc - b.test_acc).abs() <= 0.02, "epoch {}: {} vs {}", a.epoch, a.test_acc, b.test_acc);
        for (x, y) in a.weight_norms.iter().zip(&b.weight_norms) {
            assert!((x - y).abs() <= 1e-4 * x, "epoch {}: {x} vs {y}", a.epoch);
        }
    }

    let o = run_cfg("train", &cfg, &part_dir, &["--resume", ckpt.to_str().unwrap(), "--seed", "2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn resuming_from_a_future_format_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "t.cfg", &synthetic("single_task", ""));
    assert!(run_cfg("train", &cfg, dir.path(), &[]).status.success());
    let ckpt = dir.path().join("single_task-vanilla-s1.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
    std::fs::write(&ckpt, bytes).unwrap();
    let o = run_cfg("train", &cfg, dir.path(), &["--resume", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("version 2"), "{}", stderr(&o));
}

#[test]
fn shipped_presets_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "cfg") {
            RawConfig::load(&path)
                .and_then(|r| r.build())
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 5);
}
