use cmat::experiment::{random_observations, small_model_config};
use cmat::params::ParameterStore;
use cmat::policy::{LossForm, ModelKind, PolicyModel};
use cmat::rl::{clipped_surrogate, cmat_ratio, gae, normalize, ppo_losses, soft_update, Adam, LossTargets, PpoConfig};
use cmat::tensor::{Tape, Tensor};
use cmat::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn gae_with_lambda_one_is_discounted_return_minus_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let len = rng.random_range(1..12);
        let rewards: Vec<f64> = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
        let values: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut dones = vec![false; len];
        dones[len - 1] = true;
        let gamma = 0.97;
        let (adv, ret) = gae(&rewards, &values, &dones, 123.0, gamma, 1.0);
        for t in 0..len {
            let brute: f64 = (t..len).map(|k| gamma.powi((k - t) as i32) * rewards[k]).sum();
            assert!((adv[t] - (brute - values[t])).abs() < 1e-10);
            assert!((ret[t] - brute).abs() < 1e-10);
        }
    }
}

#[test]
fn gae_with_lambda_zero_is_td_residual() {
    let rewards = [0.3, -1.0, 2.0, 0.5];
    let values = [0.1, 0.4, -0.2, 0.7];
    let dones = [false, true, false, false];
    let (adv, _) = gae(&rewards, &values, &dones, 0.9, 0.99, 0.0);
    let expected = [
        0.3 + 0.99 * 0.4 - 0.1,
        -1.0 - 0.4,
        2.0 + 0.99 * 0.7 - (-0.2),
        0.5 + 0.99 * 0.9 - 0.7,
    ];
    assert_eq!(adv, expected);
}

#[test]
fn gae_three_step_hand_recursion() {
    // Backwards: δ₂ = 1.5, δ₁ = −0.05, δ₀ = 0.95 and A_t = δ_t + 0.855·A_{t+1}.
    let (adv, ret) = gae(&[1.0, 0.0, 2.0], &[0.5; 3], &[false, false, true], 0.0, 0.9, 0.95);
    let expected = [2.0037875, 1.2325, 1.5];
    for t in 0..3 {
        assert!((adv[t] - expected[t]).abs() < 1e-12, "{adv:?}");
        assert!((ret[t] - expected[t] - 0.5).abs() < 1e-12);
    }
}

#[test]
fn gae_bootstraps_only_through_live_steps() {
    let (live, _) = gae(&[0.0], &[0.0], &[false], 2.0, 0.5, 0.9);
    let (dead, _) = gae(&[0.0], &[0.0], &[true], 2.0, 0.5, 0.9);
    assert_eq!(live, vec![1.0]);
    assert_eq!(dead, vec![0.0]);
}

#[test]
fn ratio_identity_and_log_shift() {
    let current = vec![vec![-0.3, -1.2], vec![-0.7, -0.1]];
    assert_eq!(cmat_ratio(&current, &current).unwrap(), vec![1.0, 1.0]);
    let mut shifted = current.clone();
    shifted[0][1] += std::f64::consts::LN_2;
    let r = cmat_ratio(&shifted, &current).unwrap();
    assert!((r[0] - 2.0).abs() < 1e-12);
    assert_eq!(r[1], 1.0);
}

#[test]
fn joint_ratio_is_product_of_agent_ratios() {
    let behavior: Vec<Vec<f64>> = vec![vec![-0.5, -1.5, -0.2]];
    let current: Vec<Vec<f64>> = vec![vec![-0.4, -1.9, -0.3]];
    let per_agent: f64 = current[0].iter().zip(&behavior[0]).map(|(c, b)| (c - b).exp()).product();
    let joint = cmat_ratio(&current, &behavior).unwrap()[0];
    assert!((joint - per_agent).abs() < 1e-12);
}

#[test]
fn non_finite_ratio_names_the_step() {
    let behavior = vec![vec![0.0], vec![-1000.0]];
    let current = vec![vec![0.0], vec![0.0]];
    match cmat_ratio(&current, &behavior) {
        Err(Error::Numeric { what, .. }) => assert!(what.contains("step 1"), "{what}"),
        other => panic!("expected numeric error, got {other:?}"),
    }
}

fn surrogate(ratio: &[f64], adv: &[f64], clip: f64) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let r = tape.leaf(Tensor::vector(ratio.to_vec()), true);
    let a = tape.constant(Tensor::vector(adv.to_vec()));
    let s = clipped_surrogate(&mut tape, r, a, clip).unwrap();
    let grads = tape.backward(s).unwrap();
    (tape.value(s).item(), grads.get(r).unwrap().data().to_vec())
}

#[test]
fn surrogate_takes_the_clipped_branch() {
    let (value, _) = surrogate(&[1.5], &[2.0], 0.2);
    assert!((value - 2.4).abs() < 1e-12);
}

#[test]
fn surrogate_with_zero_advantage_is_zero() {
    let (value, _) = surrogate(&[0.3, 1.0, 4.0], &[0.0; 3], 0.2);
    assert_eq!(value, 0.0);
}

#[test]
fn clipped_sample_passes_no_gradient() {
    let eps = 0.2;
    let (value, grad) = surrogate(&[1.0 + 2.0 * eps, 1.1], &[3.0, 3.0], eps);
    assert!((value - ((1.0 + eps) * 3.0 + 1.1 * 3.0) / 2.0).abs() < 1e-12);
    assert_eq!(grad[0], 0.0);
    assert!((grad[1] - 1.5).abs() < 1e-12);
}

struct Batch {
    model: PolicyModel,
    store: ParameterStore,
    obs: Vec<cmat::env::JointObservation>,
    actions: Vec<Vec<usize>>,
    behavior: Vec<Vec<f64>>,
    advantages: Vec<f64>,
    returns: Vec<f64>,
}

fn batch(kind: ModelKind, size: usize, seed: u64, offset: f64) -> Batch {
    let cfg = small_model_config(kind);
    let (model, store) = PolicyModel::build(&cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let obs = random_observations(cfg.n_agents, cfg.obs_width, size, &mut rng);
    let actions: Vec<Vec<usize>> = (0..size)
        .map(|_| (0..cfg.n_agents).map(|_| rng.random_range(0..cfg.n_actions)).collect())
        .collect();
    let current = current_log_probs(&model, &store, &obs, &actions);
    let behavior = current
        .iter()
        .map(|row| row.iter().map(|lp| lp + offset * rng.random_range(-1.0..1.0)).collect())
        .collect();
    Batch {
        model,
        store,
        obs,
        actions,
        behavior,
        advantages: (0..size).map(|_| rng.random_range(-1.0..1.0)).collect(),
        returns: (0..size).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

fn current_log_probs(
    model: &PolicyModel,
    store: &ParameterStore,
    obs: &[cmat::env::JointObservation],
    actions: &[Vec<usize>],
) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let p = store.bind_constant(&mut tape);
    let e = model.evaluate(&mut tape, &p, obs, actions).unwrap();
    let n = obs[0].n_agents();
    tape.value(e.log_probs).data().chunks(n).map(<[f64]>::to_vec).collect()
}

#[test]
fn unchanged_parameters_give_unit_ratios_and_agreeing_loss_forms() {
    for kind in ModelKind::ALL {
        let b = batch(kind, 8, 3, 0.0);
        let mut tape = Tape::new();
        let p = b.store.bind_constant(&mut tape);
        let e = b.model.evaluate(&mut tape, &p, &b.obs, &b.actions).unwrap();
        let current: Vec<Vec<f64>> = tape.value(e.log_probs).data().chunks(2).map(<[f64]>::to_vec).collect();
        for r in cmat_ratio(&current, &b.behavior).unwrap() {
            assert!((r - 1.0).abs() <= 1e-12);
        }
        let targets = LossTargets {
            behavior_log_probs: &b.behavior,
            advantages: &b.advantages,
            returns: &b.returns,
        };
        let cfg = PpoConfig::default();
        let joint = ppo_losses(&mut tape, &e, LossForm::Joint, targets, &cfg).unwrap();
        let per_agent = ppo_losses(&mut tape, &e, LossForm::PerAgent, targets, &cfg).unwrap();
        let mean_adv = b.advantages.iter().sum::<f64>() / b.advantages.len() as f64;
        assert!((tape.value(joint.actor).item() + mean_adv).abs() <= 1e-12);
        assert!((tape.value(joint.actor).item() - tape.value(per_agent.actor).item()).abs() <= 1e-12);
        assert_eq!(joint.clip_fraction, 0.0);
    }
}

#[test]
fn huge_clip_range_recovers_the_vanilla_policy_gradient() {
    let b = batch(ModelKind::Cmat, 6, 11, 0.3);
    let cfg = PpoConfig {
        clip: 1e12,
        entropy_coef: 0.0,
        value_coef: 0.0,
        ..PpoConfig::default()
    };
    let clipped: Vec<Option<Tensor>> = {
        let mut tape = Tape::new();
        let p = b.store.bind(&mut tape);
        let e = b.model.evaluate(&mut tape, &p, &b.obs, &b.actions).unwrap();
        let targets = LossTargets {
            behavior_log_probs: &b.behavior,
            advantages: &b.advantages,
            returns: &b.returns,
        };
        let terms = ppo_losses(&mut tape, &e, LossForm::Joint, targets, &cfg).unwrap();
        let mut g = tape.backward(terms.actor).unwrap();
        p.vars().iter().map(|&v| g.take(v)).collect()
    };
    let vanilla: Vec<Option<Tensor>> = {
        let mut tape = Tape::new();
        let p = b.store.bind(&mut tape);
        let e = b.model.evaluate(&mut tape, &p, &b.obs, &b.actions).unwrap();
        let joint = tape.sum_axis(e.log_probs, 1).unwrap();
        let old: Vec<f64> = b.behavior.iter().map(|r| r.iter().sum()).collect();
        let old = tape.constant(Tensor::vector(old));
        let lr = tape.sub(joint, old).unwrap();
        let ratio = tape.exp(lr);
        let adv = tape.constant(Tensor::vector(b.advantages.clone()));
        let s = tape.mul(ratio, adv).unwrap();
        let s = tape.mean(s);
        let loss = tape.neg(s);
        let mut g = tape.backward(loss).unwrap();
        p.vars().iter().map(|&v| g.take(v)).collect()
    };
    let mut compared = 0;
    for (a, v) in clipped.iter().zip(&vanilla) {
        match (a, v) {
            (Some(a), Some(v)) => {
                assert!(a.max_abs_diff(v) <= 1e-12);
                compared += 1;
            }
            (None, None) => {}
            _ => panic!("gradient present in only one formulation"),
        }
    }
    assert!(compared > 0);
}

#[test]
fn loss_over_equal_minibatches_ignores_partition_order() {
    let b = batch(ModelKind::Cmat, 12, 5, 0.1);
    let cfg = PpoConfig::default();
    let loss_of = |idx: &[usize]| -> f64 {
        let obs: Vec<_> = idx.iter().map(|&i| b.obs[i].clone()).collect();
        let actions: Vec<_> = idx.iter().map(|&i| b.actions[i].clone()).collect();
        let behavior: Vec<_> = idx.iter().map(|&i| b.behavior[i].clone()).collect();
        let adv: Vec<_> = idx.iter().map(|&i| b.advantages[i]).collect();
        let ret: Vec<_> = idx.iter().map(|&i| b.returns[i]).collect();
        let mut tape = Tape::new();
        let p = b.store.bind_constant(&mut tape);
        let e = b.model.evaluate(&mut tape, &p, &obs, &actions).unwrap();
        let targets = LossTargets {
            behavior_log_probs: &behavior,
            advantages: &adv,
            returns: &ret,
        };
        let t = ppo_losses(&mut tape, &e, LossForm::Joint, targets, &cfg).unwrap();
        tape.value(t.total).item()
    };
    let full = loss_of(&(0..12).collect::<Vec<_>>());
    let parts: Vec<Vec<usize>> = vec![(0..4).collect(), (4..8).collect(), (8..12).collect()];
    let forward: f64 = parts.iter().map(|p| loss_of(p)).sum::<f64>() / 3.0;
    let backward: f64 = parts.iter().rev().map(|p| loss_of(p)).sum::<f64>() / 3.0;
    assert!((forward - backward).abs() <= 1e-12);
    assert!((forward - full).abs() <= 1e-12);
}

#[test]
fn normalized_advantages_have_zero_mean_unit_std() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs: Vec<f64> = (0..256).map(|_| rng.random_range(-5.0..40.0)).collect();
    let z = normalize(&xs);
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    let std = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64).sqrt();
    assert!(mean.abs() <= 1e-9);
    assert!((std - 1.0).abs() <= 1e-6);
    assert_eq!(normalize(&[3.0; 5]), vec![0.0; 5]);
    assert!(normalize(&[]).is_empty());
}

fn scalar_store(values: &[f64]) -> ParameterStore {
    let mut s = ParameterStore::new("t");
    for (i, &v) in values.iter().enumerate() {
        s.register(format!("p{i}"), Tensor::vector(vec![v])).unwrap();
    }
    s
}

#[test]
fn soft_update_boundaries_and_midpoint() {
    let online = scalar_store(&[2.0, -4.0]);
    let mut target = scalar_store(&[0.0, 1.0]);
    soft_update(&mut target, &online, 0.0).unwrap();
    assert_eq!(target.by_name("p0").unwrap().data(), &[0.0]);
    soft_update(&mut target, &online, 0.5).unwrap();
    assert_eq!(target.by_name("p0").unwrap().data(), &[1.0]);
    assert_eq!(target.by_name("p1").unwrap().data(), &[-1.5]);
    soft_update(&mut target, &online, 1.0).unwrap();
    assert_eq!(target.by_name("p1").unwrap().data(), &[-4.0]);

    let mut other = scalar_store(&[0.0]);
    assert!(matches!(soft_update(&mut other, &online, 0.5), Err(Error::Contract(_))));
}

#[test]
fn adam_examples() {
    let mut store = scalar_store(&[0.0, 5.0, 1.0]);
    let frozen = store.id("p2").unwrap();
    store.set_frozen(frozen, true);
    let mut adam = Adam::new(&store, 0.1);
    let g = |v: f64| Some(Tensor::vector(vec![v]));
    adam.step(&mut store, &[g(1.0), g(0.0), g(3.0)]).unwrap();
    // First bias-corrected step moves by lr · g / (|g| + eps).
    assert!((store.by_name("p0").unwrap().data()[0] + 0.1).abs() < 1e-8);
    assert_eq!(store.by_name("p1").unwrap().data(), &[5.0]);
    assert_eq!(store.by_name("p2").unwrap().data(), &[1.0]);
    assert_eq!(adam.steps(2), 0);
    adam.step(&mut store, &[None, g(0.0), None]).unwrap();
    assert_eq!(adam.steps(0), 1);
    assert_eq!(adam.steps(1), 2);
}

#[test]
fn ppo_config_rejects_out_of_range_values() {
    for bad in [
        PpoConfig { clip: 0.0, ..PpoConfig::default() },
        PpoConfig { lambda: 1.5, ..PpoConfig::default() },
        PpoConfig { epochs: 0, ..PpoConfig::default() },
        PpoConfig { lr: -1.0, ..PpoConfig::default() },
        PpoConfig { tau: 2.0, ..PpoConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
}
