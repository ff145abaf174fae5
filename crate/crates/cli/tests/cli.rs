use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cmat(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmat"))
        .args(args)
        .current_dir(dir)
        .env_remove("CMAT_WORKERS")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const QUICK: &str = "env = matrix\nmodel = cmat\nd_model = 16\nheads = 2\nencoder_blocks = 1\ndecoder_blocks = 1\n\
workers = 2\nhorizon = 4\ntotal_steps = 16\neval_interval = 1\neval_episodes = 2\nseeds = 7\noutput_dir = out\n";

#[test]
fn bad_configs_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.cfg"), "env = matrix\nmodel = cmat\nlearning_rate = 1\n").unwrap();
    let o = cmat(&["train", "--config", "bad.cfg"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("learning_rate") && err.contains("line 3"), "{err}");

    let o = cmat(&["train"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let o = cmat(&["train", "--config", "missing.cfg"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn oracle_prints_the_optimum() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("spread.cfg"), "env = spread\nmodel = cmat\n").unwrap();
    let o = cmat(&["oracle", "--config", "spread.cfg"], tmp.path());
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let value = |key: &str| -> f64 {
        let line = out.lines().find(|l| l.starts_with(key)).unwrap();
        line.split_whitespace().nth(1).unwrap().parse().unwrap()
    };
    assert!((value("optimal_return") - 3.9402).abs() < 1e-9);
    assert!((value("greedy_rollout_return") - 3.9402).abs() < 1e-9);
}

#[test]
fn grad_check_passes_for_one_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cmat(&["grad-check", "--kind", "simultaneous", "--quiet"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("simultaneous: worst relative error"));
}

#[test]
fn train_evaluate_and_plot() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("quick.cfg"), QUICK).unwrap();
    let o = cmat(&["train", "--config", "quick.cfg", "--quiet"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(o.stderr.is_empty());
    let run = tmp.path().join("out/seed_7");
    assert!(run.join("checkpoint.bin").is_file());

    let o = cmat(
        &["evaluate", "--config", "quick.cfg", "--checkpoint", "out/seed_7/checkpoint.bin", "--episodes", "3"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("episodes 3"));

    let o = cmat(&["plot-data", "out/seed_7", "--out", "plot.csv"], tmp.path());
    assert_eq!(o.status.code(), Some(0));
    let plot = fs::read_to_string(tmp.path().join("plot.csv")).unwrap();
    assert!(plot.starts_with("env_steps,mean_return,std_return,runs\n"));
    assert_eq!(plot.lines().count(), 3);
}

#[test]
fn overrides_replace_seeds_output_and_workers() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("quick.cfg"), QUICK).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_cmat"))
        .args(["train", "--config", "quick.cfg", "--seed-override", "3", "--out", "elsewhere", "--quiet"])
        .current_dir(tmp.path())
        .env("CMAT_WORKERS", "1")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let effective = fs::read_to_string(tmp.path().join("elsewhere/seed_3/config.effective")).unwrap();
    assert!(effective.contains("workers = 1\n"));
    assert!(effective.contains("seeds = 3\n"));

    let o = Command::new(env!("CARGO_BIN_EXE_cmat"))
        .args(["train", "--config", "quick.cfg"])
        .current_dir(tmp.path())
        .env("CMAT_WORKERS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn fine_tuning_a_baseline_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = QUICK.replace("model = cmat", "model = simultaneous");
    fs::write(tmp.path().join("sim.cfg"), cfg).unwrap();
    assert_eq!(cmat(&["train", "--config", "sim.cfg", "--quiet"], tmp.path()).status.code(), Some(0));
    let o = cmat(
        &["finetune", "--config", "sim.cfg", "--checkpoint", "out/seed_7/checkpoint.bin", "--mode", "action"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}
