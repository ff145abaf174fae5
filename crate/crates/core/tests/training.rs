use std::fs;
use std::path::PathBuf;

use cmat::env::{EnvSpec, MatrixGameSpec, SpreadGridSpec};
use cmat::experiment::{
    emit_plot_data, read_evals, read_metrics, run_experiment, run_finetune, seed_dir, write_metrics,
    ExperimentConfig, CHECKPOINT_FILE,
};
use cmat::policy::ModelKind;
use cmat::trainer::{
    encode_checkpoint, freeze_partition, train, FinetuneMode, MetricRow, TrainConfig, Trainer,
};
use cmat::Error;

fn quick(env: EnvSpec, kind: ModelKind) -> TrainConfig {
    let mut cfg = TrainConfig::new(env, kind).unwrap();
    cfg.model.d_model = 16;
    cfg.model.heads = 2;
    cfg.model.encoder_blocks = 1;
    cfg.model.decoder_blocks = 1;
    cfg.workers = 2;
    cfg.horizon = 6;
    cfg.total_steps = 60;
    cfg.eval_interval = 2;
    cfg.eval_episodes = 2;
    cfg.ppo.epochs = 2;
    cfg.ppo.minibatch_size = 4;
    cfg.seed = 4;
    cfg
}

fn spread() -> EnvSpec {
    EnvSpec::Spread(SpreadGridSpec::default())
}

fn without_time(rows: &[MetricRow]) -> Vec<MetricRow> {
    rows.iter().map(|r| MetricRow { wall_seconds: 0.0, ..r.clone() }).collect()
}

#[test]
fn training_is_deterministic() {
    for kind in ModelKind::ALL {
        let cfg = quick(spread(), kind);
        let a = train(cfg.clone()).unwrap();
        let b = train(cfg.clone()).unwrap();
        assert_eq!(without_time(&a.metrics), without_time(&b.metrics), "{kind}");
        assert_eq!(a.evals, b.evals);
        assert_eq!(
            encode_checkpoint(&a.store, &cfg.model).unwrap(),
            encode_checkpoint(&b.store, &cfg.model).unwrap()
        );
        assert_eq!(a.metrics.len(), 5);
        assert_eq!(a.metrics.last().unwrap().env_steps, 60);
    }
}

#[test]
fn evaluation_cadence_covers_start_interval_and_end() {
    let outcome = train(quick(spread(), ModelKind::Cmat)).unwrap();
    let updates: Vec<usize> = outcome.evals.iter().map(|e| e.update).collect();
    assert_eq!(updates, vec![0, 2, 4, 5]);
}

#[test]
fn a_zero_budget_leaves_parameters_untouched() {
    let mut cfg = quick(spread(), ModelKind::Cmat);
    cfg.total_steps = 0;
    let fresh = Trainer::new(cfg.clone()).unwrap();
    let initial = fresh.store().clone();
    let outcome = train(cfg).unwrap();
    assert!(outcome.metrics.is_empty());
    assert_eq!(outcome.evals.len(), 1);
    for ((_, _, p), (_, _, q)) in initial.iter().zip(outcome.store.iter()) {
        assert!(p.value.bit_eq(&q.value));
    }
}

#[test]
fn freeze_masks_partition_every_parameter() {
    for kind in [ModelKind::Cmat, ModelKind::CmatLastConsensus] {
        let trainer = Trainer::new(quick(spread(), kind)).unwrap();
        let store = trainer.store();
        for mode in [FinetuneMode::Consensus, FinetuneMode::Action] {
            let (trainable, frozen) = freeze_partition(store, mode).unwrap();
            assert_eq!(trainable.len() + frozen.len(), store.len());
            assert!(trainable.iter().all(|t| !frozen.contains(t)));
            assert!(!trainable.is_empty() && !frozen.is_empty());
        }
    }
}

#[test]
fn fine_tuning_moves_only_trainable_parameters() {
    let base = train(quick(spread(), ModelKind::Cmat)).unwrap();
    for mode in [FinetuneMode::Consensus, FinetuneMode::Action] {
        let mut trainer = Trainer::with_parameters(quick(spread(), ModelKind::Cmat), base.store.clone()).unwrap();
        trainer.apply_finetune_mask(mode).unwrap();
        trainer.run(|_, _| {}).unwrap();
        let (trainable, _) = freeze_partition(&base.store, mode).unwrap();
        let mut moved = 0;
        for ((_, name, before), (_, _, after)) in base.store.iter().zip(trainer.store().iter()) {
            if trainable.iter().any(|t| t == name) {
                moved += usize::from(!before.value.bit_eq(&after.value));
            } else {
                assert!(before.value.bit_eq(&after.value), "{mode}: frozen {name} changed");
            }
        }
        assert!(moved > 0, "{mode}: nothing trained");
    }
}

#[test]
fn fine_tuning_needs_a_consensus_model() {
    let mut trainer = Trainer::new(quick(spread(), ModelKind::MatSequential)).unwrap();
    assert!(matches!(trainer.apply_finetune_mask(FinetuneMode::Action), Err(Error::Config(_))));
}

#[test]
fn mismatched_parameters_are_refused() {
    let other = Trainer::new(quick(spread(), ModelKind::Simultaneous)).unwrap();
    let err = Trainer::with_parameters(quick(spread(), ModelKind::Cmat), other.store().clone()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn invalid_settings_are_config_errors() {
    let mut cfg = quick(spread(), ModelKind::Cmat);
    cfg.workers = 0;
    assert!(matches!(Trainer::new(cfg), Err(Error::Config(_))));
    let mut cfg = quick(spread(), ModelKind::Cmat);
    cfg.model.n_actions = 2;
    assert!(matches!(Trainer::new(cfg), Err(Error::Config(_))));
    let mut cfg = quick(spread(), ModelKind::Cmat);
    cfg.ppo.clip = -0.1;
    assert!(matches!(Trainer::new(cfg), Err(Error::Config(_))));
}

fn experiment(dir: &std::path::Path, kind: ModelKind, seeds: Vec<u64>) -> ExperimentConfig {
    ExperimentConfig {
        train: quick(EnvSpec::Matrix(MatrixGameSpec::default()), kind),
        seeds,
        output_dir: dir.to_path_buf(),
    }
}

#[test]
fn experiments_write_one_directory_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = experiment(tmp.path(), ModelKind::Cmat, vec![1, 2, 3]);
    let summary = run_experiment(&cfg, &mut |_| {}).unwrap();
    assert_eq!(summary.seeds.len(), 3);
    for seed in [1, 2, 3] {
        let dir = seed_dir(tmp.path(), seed);
        for f in ["metrics.csv", "timing.csv", "eval.csv", "config.effective", CHECKPOINT_FILE] {
            assert!(dir.join(f).is_file(), "{}/{f}", dir.display());
        }
        let effective = ExperimentConfig::load(dir.join("config.effective")).unwrap();
        assert_eq!(effective.seeds, vec![seed]);
        assert_eq!(effective.for_seed(seed), cfg.for_seed(seed));
        assert_eq!(read_metrics(&dir.join("metrics.csv")).unwrap().len(), 5);
        assert_eq!(read_evals(&dir.join("eval.csv")).unwrap().len(), 4);
    }
    let summary_csv = fs::read_to_string(tmp.path().join("summary.csv")).unwrap();
    assert_eq!(summary_csv.lines().count(), 6);

    let ft_dir = tmp.path().join("finetune");
    let ft = ExperimentConfig {
        seeds: vec![1],
        output_dir: ft_dir.clone(),
        ..cfg.clone()
    };
    let ckpt = seed_dir(tmp.path(), 1).join(CHECKPOINT_FILE);
    run_finetune(&ft, &ckpt, FinetuneMode::Action, &mut |_| {}).unwrap();
    assert!(seed_dir(&ft_dir, 1).join(CHECKPOINT_FILE).is_file());
}

#[test]
fn metrics_survive_a_csv_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let outcome = train(quick(spread(), ModelKind::Simultaneous)).unwrap();
    let path = tmp.path().join("metrics.csv");
    write_metrics(&path, &outcome.metrics).unwrap();
    let back = read_metrics(&path).unwrap();
    assert_eq!(back.len(), outcome.metrics.len());
    for (a, b) in back.iter().zip(&outcome.metrics) {
        assert_eq!((a.update, a.env_steps), (b.update, b.env_steps));
        assert_eq!(a.critic_loss, b.critic_loss);
        assert_eq!(a.mean_return.to_bits(), b.mean_return.to_bits());
    }
}

fn fake_run(root: &std::path::Path, name: &str, points: &[(usize, f64)]) -> PathBuf {
    let dir = root.join(name);
    fs::create_dir_all(&dir).unwrap();
    let rows: Vec<MetricRow> = points
        .iter()
        .enumerate()
        .map(|(i, &(env_steps, mean_return))| MetricRow {
            update: i + 1,
            env_steps,
            mean_return,
            std_return: 0.0,
            critic_loss: 0.0,
            actor_loss: 0.0,
            entropy: 0.0,
            clip_fraction: 0.0,
            approx_kl: 0.0,
            wall_seconds: 0.0,
        })
        .collect();
    write_metrics(&dir.join("metrics.csv"), &rows).unwrap();
    dir
}

fn read_plot(path: &std::path::Path) -> Vec<Vec<f64>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("env_steps,mean_return,std_return,runs"));
    lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect()
}

#[test]
fn plot_data_averages_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = fake_run(tmp.path(), "a", &[(10, 0.0), (20, 0.0)]);
    let b = fake_run(tmp.path(), "b", &[(10, 100.0), (20, 100.0)]);
    let out = tmp.path().join("plot.csv");
    assert!(emit_plot_data(&[a.clone(), b], &out).unwrap().is_empty());
    assert_eq!(read_plot(&out), vec![vec![10.0, 50.0, 50.0, 2.0], vec![20.0, 50.0, 50.0, 2.0]]);

    emit_plot_data(&[a], &out).unwrap();
    assert!(read_plot(&out).iter().all(|r| r[2] == 0.0));
}

#[test]
fn plot_data_warns_about_different_grids() {
    let tmp = tempfile::tempdir().unwrap();
    let a = fake_run(tmp.path(), "a", &[(10, 1.0), (20, 2.0), (30, 3.0)]);
    let b = fake_run(tmp.path(), "b", &[(15, 5.0), (30, 7.0)]);
    let out = tmp.path().join("plot.csv");
    let warnings = emit_plot_data(&[a, b], &out).unwrap();
    assert_eq!(warnings.len(), 1);
    let rows = read_plot(&out);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], vec![15.0, 3.0, 2.0, 2.0]);
    assert_eq!(rows[1], vec![30.0, 5.0, 2.0, 2.0]);
    assert!(matches!(emit_plot_data(&[], &out), Err(Error::Config(_))));
}
