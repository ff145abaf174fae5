//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use cmat::env::{EnvSpec, JointObservation, MatrixGameSpec, SpreadGridSpec};
use cmat::experiment::{
    ablate_m, block_grad_checks, model_grad_check, oracle_report, random_observations, run_experiment,
    run_failure_case, seed_dir, small_model_config, ExperimentConfig, MatrixOutcome, CHECKPOINT_FILE,
};
use cmat::params::ParameterStore;
use cmat::policy::{LossForm, ModelConfig, ModelKind, PolicyModel};
use cmat::rl::{cmat_ratio, gae, ppo_losses, LossTargets, PpoConfig};
use cmat::tensor::{Tape, Tensor};
use cmat::trainer::{freeze_partition, FinetuneMode, TrainConfig, Trainer};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn matrix() -> EnvSpec {
    EnvSpec::Matrix(MatrixGameSpec::default())
}

fn spread() -> EnvSpec {
    EnvSpec::Spread(SpreadGridSpec::default())
}

fn final_greedy(trainer: &Trainer) -> f64 {
    trainer.evals().last().map_or(f64::NAN, |e| e.mean_return)
}

fn matrix_optimum() -> Outcome {
    let mut lines = Vec::new();
    let mut hits = 0;
    let mut slowest = 0.0f64;
    for seed in 0..5 {
        let mut cfg = TrainConfig::new(matrix(), ModelKind::Cmat).map_err(|e| e.to_string())?;
        cfg.seed = seed;
        let started = Instant::now();
        let mut trainer = Trainer::new(cfg).map_err(|e| e.to_string())?;
        trainer.run(|_, _| {}).map_err(|e| e.to_string())?;
        let secs = started.elapsed().as_secs_f64();
        slowest = slowest.max(secs);
        let ret = final_greedy(&trainer);
        hits += usize::from(ret >= 95.0);
        lines.push(format!("seed {seed}: {ret} at {} steps in {secs:.1}s", trainer.env_steps()));
    }
    check(
        hits >= 4 && slowest < 120.0,
        format!("{hits}/5 seeds >= 95 ({})", lines.join("; ")),
    )
}

fn failure_case() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = ExperimentConfig {
        train: TrainConfig::new(matrix(), ModelKind::Cmat).map_err(|e| e.to_string())?,
        seeds: vec![0],
        output_dir: tmp.path().to_path_buf(),
    };
    let report = run_failure_case(&cfg, 20, &mut |_| {}).map_err(|e| e.to_string())?;
    let ours = report.rate(ModelKind::Cmat, MatrixOutcome::Optimal);
    let seq = report.rate(ModelKind::MatSequential, MatrixOutcome::Optimal);
    check(
        ours >= seq,
        format!("(B,B) rate over 20 seeds: cmat {ours:.3}, mat-sequential {seq:.3}"),
    )
}

fn spread_oracle() -> Outcome {
    let gamma = PpoConfig::default().gamma;
    let oracle = oracle_report(&spread(), gamma).map_err(|e| e.to_string())?;
    let optimum = oracle.optimal_return;
    let extraction = (oracle.greedy_rollout_return - optimum).abs();
    let mut lines = Vec::new();
    let mut hits = 0;
    for seed in 0..5 {
        let mut cfg = TrainConfig::new(spread(), ModelKind::Cmat).map_err(|e| e.to_string())?;
        cfg.total_steps = 200_000;
        cfg.eval_episodes = 1;
        cfg.seed = seed;
        let mut trainer = Trainer::new(cfg).map_err(|e| e.to_string())?;
        trainer.run(|_, _| {}).map_err(|e| e.to_string())?;
        let evals = trainer.evals();
        let fin = evals.last().map_or(f64::NAN, |e| e.discounted_return);
        let first = evals.iter().find(|e| e.discounted_return >= 0.9 * optimum).map(|e| e.env_steps);
        hits += usize::from(fin >= 0.9 * optimum);
        lines.push(format!(
            "seed {seed}: final {fin:.4}, first reached at {}",
            first.map_or("never".into(), |s| format!("{s} steps"))
        ));
    }
    check(
        hits >= 3 && extraction <= 1e-9,
        format!(
            "optimum {optimum:.4}, extraction gap {extraction:.1e}; {hits}/5 seeds >= 90% ({})",
            lines.join("; ")
        ),
    )
}

fn gradient_integrity() -> Outcome {
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    for kind in ModelKind::ALL {
        let r = model_grad_check(kind, 0, 1e-5, 1e-4).map_err(|e| e.to_string())?;
        worst = worst.max(r.worst());
        if !r.passed {
            failed.push(kind.to_string());
        }
    }
    let mut worst_block = 0.0f64;
    for (name, r) in block_grad_checks(0, 1e-5, 1e-4).map_err(|e| e.to_string())? {
        worst_block = worst_block.max(r.worst());
        if !r.passed {
            failed.push(format!("block {name}"));
        }
    }
    check(
        failed.is_empty(),
        format!("worst relative error: full models {worst:.2e}, blocks {worst_block:.2e}; failing: {failed:?}"),
    )
}

fn cmat_forward(model: &PolicyModel, store: &ParameterStore, obs: &JointObservation) -> (f64, Vec<f64>, Vec<f64>) {
    let PolicyModel::Cmat(m) = model else { unreachable!() };
    let mut tape = Tape::new();
    let p = store.bind_constant(&mut tape);
    let x = tape.constant(Tensor::new([1, obs.n_agents(), obs.width()], obs.data().to_vec()).unwrap());
    let (enc, cons, logits) = m.forward(&mut tape, &p, x).unwrap();
    (
        tape.value(enc.value).item(),
        tape.value(cons.vector).data().to_vec(),
        tape.value(logits).data().to_vec(),
    )
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn order_independence() -> Outcome {
    let (n, w, a) = (4, 6, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut dv, mut dc, mut dl) = (0.0f64, 0.0f64, 0.0f64);
    for kind in [ModelKind::Cmat, ModelKind::CmatLastConsensus] {
        let (model, mut store) = PolicyModel::build(&ModelConfig::new(kind, w, a, n), 1).map_err(|e| e.to_string())?;
        // The critic's output layer starts at zero; give it weight so the value check means something.
        let id = store.id("critic_mlp.1.weight").ok_or("no critic output layer")?;
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        for obs in random_observations(n, w, 100, &mut rng) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let (v, c, logits) = cmat_forward(&model, &store, &obs);
            let (vp, cp, lp) = cmat_forward(&model, &store, &obs.permuted(&perm));
            let expected: Vec<f64> = perm.iter().flat_map(|&i| logits[i * a..(i + 1) * a].to_vec()).collect();
            if v == 0.0 {
                return Err("critic output is identically zero".into());
            }
            dv = dv.max((v - vp).abs());
            dc = dc.max(max_diff(&c, &cp));
            dl = dl.max(max_diff(&lp, &expected));
        }
    }
    check(
        dv <= 1e-9 && dc <= 1e-9 && dl <= 1e-9,
        format!("100 permutations per kind; max change: value {dv:.1e}, consensus {dc:.1e}, permuted logits {dl:.1e}"),
    )
}

fn normalization() -> Outcome {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for kind in ModelKind::ALL {
        let cfg = ModelConfig::new(kind, 3, 2, 2);
        for draw in 0..100 {
            let (model, store) = PolicyModel::build(&cfg, 1000 + draw).map_err(|e| e.to_string())?;
            let obs = &random_observations(2, 3, 1, &mut rng)[0];
            let table = model.joint_log_prob_table(&store, obs).map_err(|e| e.to_string())?;
            let total: f64 = table.iter().map(|l| l.exp()).sum();
            worst = worst.max((total - 1.0).abs());
        }
    }
    check(worst <= 1e-9, format!("100 draws per kind, max |sum - 1| = {worst:.1e}"))
}

fn gae_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut worst_mc, mut td_mismatch) = (0.0f64, 0usize);
    for _ in 0..200 {
        let len = rng.random_range(1..20);
        let gamma = rng.random_range(0.5..1.0);
        let rewards: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
        let values: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dones: Vec<bool> = (0..len).map(|t| t + 1 == len || rng.random_bool(0.2)).collect();
        let (adv, _) = gae(&rewards, &values, &dones, 0.0, gamma, 1.0);
        for t in 0..len {
            let mut brute = 0.0;
            let mut w = 1.0;
            for k in t..len {
                brute += w * rewards[k];
                w *= gamma;
                if dones[k] {
                    break;
                }
            }
            worst_mc = worst_mc.max((adv[t] - (brute - values[t])).abs());
        }
        let bootstrap = rng.random_range(-1.0..1.0);
        let mut ends = dones.clone();
        ends[len - 1] = rng.random_bool(0.5);
        let (adv, _) = gae(&rewards, &values, &ends, bootstrap, gamma, 0.0);
        for t in 0..len {
            let next = if t + 1 < len { values[t + 1] } else { bootstrap };
            let delta = if ends[t] {
                rewards[t] - values[t]
            } else {
                rewards[t] + gamma * next - values[t]
            };
            td_mismatch += usize::from(adv[t] != delta);
        }
    }
    check(
        worst_mc <= 1e-10 && td_mismatch == 0,
        format!("200 random trajectories; lambda=1 max error {worst_mc:.1e}, lambda=0 mismatches {td_mismatch}"),
    )
}

fn ratio_identity() -> Outcome {
    let (mut ratio_err, mut form_err) = (0.0f64, 0.0f64);
    for kind in ModelKind::ALL {
        let cfg = small_model_config(kind);
        let (model, store) = PolicyModel::build(&cfg, 3).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let obs = random_observations(cfg.n_agents, cfg.obs_width, 16, &mut rng);
        let actions: Vec<Vec<usize>> = (0..16)
            .map(|_| (0..cfg.n_agents).map(|_| rng.random_range(0..cfg.n_actions)).collect())
            .collect();
        let advantages: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let returns: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let behavior: Vec<Vec<f64>> = {
            let mut tape = Tape::new();
            let p = store.bind_constant(&mut tape);
            let e = model.evaluate(&mut tape, &p, &obs, &actions).map_err(|e| e.to_string())?;
            tape.value(e.log_probs).data().chunks(cfg.n_agents).map(<[f64]>::to_vec).collect()
        };
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let e = model.evaluate(&mut tape, &p, &obs, &actions).map_err(|e| e.to_string())?;
        let current: Vec<Vec<f64>> = tape.value(e.log_probs).data().chunks(cfg.n_agents).map(<[f64]>::to_vec).collect();
        for r in cmat_ratio(&current, &behavior).map_err(|e| e.to_string())? {
            ratio_err = ratio_err.max((r - 1.0).abs());
        }
        let targets = LossTargets {
            behavior_log_probs: &behavior,
            advantages: &advantages,
            returns: &returns,
        };
        let ppo = PpoConfig::default();
        let joint = ppo_losses(&mut tape, &e, LossForm::Joint, targets, &ppo).map_err(|e| e.to_string())?;
        let per_agent = ppo_losses(&mut tape, &e, LossForm::PerAgent, targets, &ppo).map_err(|e| e.to_string())?;
        form_err = form_err.max((tape.value(joint.actor).item() - tape.value(per_agent.actor).item()).abs());
    }
    check(
        ratio_err <= 1e-12 && form_err <= 1e-12,
        format!("all kinds; max |ratio - 1| {ratio_err:.1e}, loss-form gap {form_err:.1e}"),
    )
}

fn finetune_contracts() -> Outcome {
    let base_cfg = TrainConfig::new(matrix(), ModelKind::Cmat).map_err(|e| e.to_string())?;
    let mut base = Trainer::new(base_cfg.clone()).map_err(|e| e.to_string())?;
    base.run(|_, _| {}).map_err(|e| e.to_string())?;
    let before = base.store().clone();
    let pre = base.evaluate_greedy().map_err(|e| e.to_string())?.mean().unwrap_or(f64::NAN);
    let mut ok = pre.is_finite();
    let mut lines = vec![format!("pre-finetune greedy return {pre}")];
    for mode in [FinetuneMode::Consensus, FinetuneMode::Action] {
        let mut cfg = base_cfg.clone();
        cfg.total_steps = 100 * cfg.batch_steps();
        cfg.eval_interval = 0;
        cfg.seed = 1;
        let mut trainer = Trainer::with_parameters(cfg, before.clone()).map_err(|e| e.to_string())?;
        trainer.apply_finetune_mask(mode).map_err(|e| e.to_string())?;
        trainer.run(|_, _| {}).map_err(|e| e.to_string())?;
        let (trainable, frozen) = freeze_partition(&before, mode).map_err(|e| e.to_string())?;
        let changed: Vec<&str> = before
            .iter()
            .zip(trainer.store().iter())
            .filter(|((_, _, a), (_, _, b))| !a.value.bit_eq(&b.value))
            .map(|((_, name, _), _)| name)
            .collect();
        let frozen_moved = changed.iter().filter(|n| frozen.iter().any(|f| f == *n)).count();
        let trainable_moved = changed.iter().filter(|n| trainable.iter().any(|t| t == *n)).count();
        let post = trainer.evaluate_greedy().map_err(|e| e.to_string())?.mean().unwrap_or(f64::NAN);
        let holds = trainer.updates_done() == 100 && frozen_moved == 0 && trainable_moved > 0 && post >= 0.9 * pre;
        ok &= holds;
        lines.push(format!(
            "{mode}: {} updates, frozen changed {frozen_moved}/{}, trainable changed {trainable_moved}/{}, return {post}",
            trainer.updates_done(),
            frozen.len(),
            trainable.len()
        ));
    }
    check(ok, lines.join("; "))
}

fn curve_shape(path: &Path) -> Result<(String, usize), String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let header = text.lines().next().unwrap_or("").to_string();
    Ok((header, text.lines().count()))
}

fn ablation() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = ExperimentConfig {
        train: TrainConfig::new(matrix(), ModelKind::Cmat).map_err(|e| e.to_string())?,
        seeds: (0..5).collect(),
        output_dir: tmp.path().to_path_buf(),
    };
    let arms = ablate_m(&cfg, &mut |_| {}).map_err(|e| e.to_string())?;
    let labels: Vec<&str> = arms.iter().map(|a| a.label.as_str()).collect();
    let expected = ["m_0", "m_1", "m_2", "m_4", "last_consensus"];
    let mut shapes = Vec::new();
    for label in &labels {
        shapes.push(curve_shape(&tmp.path().join(format!("{label}.csv")))?);
    }
    let comparable = shapes.windows(2).all(|w| w[0] == w[1]);
    let returns = |label: &str| {
        arms.iter()
            .find(|a| a.label == label)
            .map(|a| a.summary.final_returns())
            .unwrap_or_default()
    };
    let (full, none) = (returns("m_2"), returns("m_0"));
    let wins = full.iter().zip(&none).filter(|(f, z)| f >= z).count();
    check(
        labels == expected && comparable && full.len() == 5 && wins >= 3,
        format!("arms {labels:?}, curve files comparable: {comparable}; m=n {full:?} vs m=0 {none:?}, m=n >= m=0 in {wins}/5"),
    )
}

fn determinism() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for kind in [ModelKind::Cmat, ModelKind::MatSequential] {
        let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
        let mut train = TrainConfig::new(spread(), kind).map_err(|e| e.to_string())?;
        train.total_steps = 4096;
        for d in &dirs {
            let cfg = ExperimentConfig {
                train: train.clone(),
                seeds: vec![11],
                output_dir: d.path().to_path_buf(),
            };
            run_experiment(&cfg, &mut |_| {}).map_err(|e| e.to_string())?;
        }
        let read = |d: &tempfile::TempDir, f: &str| fs::read(seed_dir(d.path(), 11).join(f)).map_err(|e| e.to_string());
        let metrics = read(&dirs[0], "metrics.csv")? == read(&dirs[1], "metrics.csv")?;
        let ckpt = read(&dirs[0], CHECKPOINT_FILE)? == read(&dirs[1], CHECKPOINT_FILE)?;
        ok &= metrics && ckpt;
        lines.push(format!("{kind}: metrics identical {metrics}, checkpoint identical {ckpt}"));
    }
    check(ok, lines.join("; "))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("matrix-game optimum", matrix_optimum),
        ("failure-case comparison", failure_case),
        ("spread oracle match", spread_oracle),
        ("gradient integrity", gradient_integrity),
        ("order independence", order_independence),
        ("joint normalization", normalization),
        ("advantage estimation", gae_correctness),
        ("ratio identity", ratio_identity),
        ("fine-tune freeze contracts", finetune_contracts),
        ("consensus-iteration ablation", ablation),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = format!("{}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|x| *x == id || name.contains(x.as_str())) {
            continue;
        }
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {id:>2} {name} [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL {id:>2} {name} [{secs:.1}s]: {detail}");
            }
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
