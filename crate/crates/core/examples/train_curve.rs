//! Trains a policy and prints the greedy evaluation curve.
//!
//! Usage: `train_curve [seed] [matrix|spread] [kind] [steps]`

use cmat::env::{EnvSpec, MatrixGameSpec, SpreadGridSpec};
use cmat::policy::ModelKind;
use cmat::trainer::{TrainConfig, Trainer};

fn main() -> cmat::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let env = match args.get(2).map(String::as_str) {
        Some("spread") => EnvSpec::Spread(SpreadGridSpec::default()),
        _ => EnvSpec::Matrix(MatrixGameSpec::default()),
    };
    let kind = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(ModelKind::Cmat);
    let mut cfg = TrainConfig::new(env, kind)?;
    cfg.seed = seed;
    if let Some(steps) = args.get(4).and_then(|s| s.parse().ok()) {
        cfg.total_steps = steps;
    }
    let mut trainer = Trainer::new(cfg)?;
    trainer.run(|row, eval| {
        if let Some(e) = eval {
            println!(
                "update {:4}  steps {:7}  sampled {:8.3}  greedy {:8.3}  discounted {:8.4}",
                row.update, row.env_steps, row.mean_return, e.mean_return, e.discounted_return
            );
        }
    })?;
    Ok(())
}
