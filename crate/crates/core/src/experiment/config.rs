//! Plain-text experiment configuration.
//!
//! One `key = value` pair per line; `#` starts a comment. Every key must be
//! known, may appear once, and `env` plus `model` are required. Lists are
//! comma-separated.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::env::{EnvSpec, MatrixGameSpec, SpreadGridSpec};
use crate::error::{Error, Result};
use crate::policy::ModelKind;
use crate::trainer::TrainConfig;

/// Every recognized key, in the order the effective config is written.
pub const KEYS: &[&str] = &[
    "env",
    "matrix.payoff",
    "spread.agents",
    "spread.length",
    "spread.landmarks",
    "spread.starts",
    "spread.horizon",
    "spread.collision_penalty",
    "model",
    "m",
    "zero_consensus",
    "d_model",
    "heads",
    "encoder_blocks",
    "decoder_blocks",
    "compressor_heads",
    "max_positions",
    "order",
    "clip",
    "gamma",
    "lambda",
    "entropy_coef",
    "value_coef",
    "epochs",
    "minibatch_size",
    "tau",
    "lr",
    "normalize_advantages",
    "total_steps",
    "workers",
    "horizon",
    "eval_interval",
    "eval_episodes",
    "seeds",
    "output_dir",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Shared settings; the seed is replaced per run.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

struct Entries<'a> {
    map: HashMap<&'a str, (&'a str, usize)>,
}

impl<'a> Entries<'a> {
    fn parse(text: &'a str) -> Result<Self> {
        let mut map = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {line_no}: expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::config(format!("line {line_no}: unknown key `{key}`")));
            }
            if let Some((_, first)) = map.insert(key, (value, line_no)) {
                return Err(Error::config(format!(
                    "line {line_no}: key `{key}` already set on line {first}"
                )));
            }
        }
        Ok(Self { map })
    }

    fn raw(&self, key: &str) -> Option<(&'a str, usize)> {
        self.map.get(key).copied()
    }

    fn required(&self, key: &str) -> Result<(&'a str, usize)> {
        self.raw(key)
            .ok_or_else(|| Error::config(format!("missing required key `{key}`")))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key).map(|(v, line)| parse_value(key, v, line)).transpose()
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.raw(key)
            .map(|(v, line)| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_value(key, s, line))
                    .collect()
            })
            .transpose()
    }

    fn set<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn reject_prefix(&self, prefix: &str, env: &str) -> Result<()> {
        let mut stray: Vec<_> = self.map.iter().filter(|(k, _)| k.starts_with(prefix)).collect();
        stray.sort_by_key(|(_, (_, line))| *line);
        match stray.first() {
            Some((k, (_, line))) => Err(Error::config(format!(
                "line {line}: key `{k}` does not apply to env {env}"
            ))),
            None => Ok(()),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("line {line}: invalid value {value:?} for key `{key}`")))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let e = Entries::parse(text)?;

        let (env_name, env_line) = e.required("env")?;
        let env = match env_name {
            "matrix" => {
                e.reject_prefix("spread.", "matrix")?;
                let mut spec = MatrixGameSpec::default();
                if let Some(p) = e.list::<f64>("matrix.payoff")? {
                    let (_, line) = e.required("matrix.payoff")?;
                    if p.len() != 4 || p.iter().any(|v| !v.is_finite()) {
                        return Err(Error::config(format!(
                            "line {line}: `matrix.payoff` needs 4 finite numbers, row-major by agent 2's action"
                        )));
                    }
                    spec.payoff = [[p[0], p[1]], [p[2], p[3]]];
                }
                EnvSpec::Matrix(spec)
            }
            "spread" => {
                e.reject_prefix("matrix.", "spread")?;
                let mut spec = SpreadGridSpec::default();
                e.set("spread.agents", &mut spec.agents)?;
                e.set("spread.length", &mut spec.length)?;
                e.set("spread.horizon", &mut spec.horizon)?;
                e.set("spread.collision_penalty", &mut spec.collision_penalty)?;
                if let Some(l) = e.list("spread.landmarks")? {
                    spec.landmarks = l;
                }
                if let Some(s) = e.list("spread.starts")? {
                    spec.starts = s;
                }
                spec.validate()?;
                EnvSpec::Spread(spec)
            }
            other => {
                return Err(Error::config(format!(
                    "line {env_line}: unknown env {other:?} (expected matrix or spread)"
                )))
            }
        };

        let (kind_name, kind_line) = e.required("model")?;
        let kind: ModelKind = kind_name
            .parse()
            .map_err(|_| Error::config(format!("line {kind_line}: unknown model kind {kind_name:?}")))?;
        let mut train = TrainConfig::new(env, kind)?;

        let model = &mut train.model;
        if let Some(m) = e.get("m")? {
            *model = model.clone().with_iterations(m);
        }
        e.set("zero_consensus", &mut model.zero_consensus)?;
        e.set("d_model", &mut model.d_model)?;
        e.set("heads", &mut model.heads)?;
        e.set("encoder_blocks", &mut model.encoder_blocks)?;
        e.set("decoder_blocks", &mut model.decoder_blocks)?;
        e.set("compressor_heads", &mut model.compressor_heads)?;
        e.set("max_positions", &mut model.max_positions)?;
        if let Some(o) = e.list("order")? {
            model.order = o;
        }

        let ppo = &mut train.ppo;
        e.set("clip", &mut ppo.clip)?;
        e.set("gamma", &mut ppo.gamma)?;
        e.set("lambda", &mut ppo.lambda)?;
        e.set("entropy_coef", &mut ppo.entropy_coef)?;
        e.set("value_coef", &mut ppo.value_coef)?;
        e.set("epochs", &mut ppo.epochs)?;
        e.set("minibatch_size", &mut ppo.minibatch_size)?;
        e.set("tau", &mut ppo.tau)?;
        e.set("lr", &mut ppo.lr)?;
        e.set("normalize_advantages", &mut ppo.normalize_advantages)?;

        e.set("total_steps", &mut train.total_steps)?;
        e.set("workers", &mut train.workers)?;
        e.set("horizon", &mut train.horizon)?;
        e.set("eval_interval", &mut train.eval_interval)?;
        e.set("eval_episodes", &mut train.eval_episodes)?;

        let seeds = e.list("seeds")?.unwrap_or_else(|| vec![0]);
        if seeds.is_empty() {
            return Err(Error::config("`seeds` must list at least one seed"));
        }
        let output_dir = e.get::<String>("output_dir")?.unwrap_or_else(|| "runs".into()).into();
        train.validate()?;
        Ok(Self {
            train,
            seeds,
            output_dir,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Training settings for one seed.
    pub fn for_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    /// Every key with its resolved value; parses back to `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let (m, p) = (&t.model, &t.ppo);
        let join = |xs: &[usize]| xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("env", t.env.name().into());
        match &t.env {
            EnvSpec::Matrix(spec) => {
                let f = spec.payoff.iter().flatten().map(f64::to_string).collect::<Vec<_>>();
                kv("matrix.payoff", f.join(","));
            }
            EnvSpec::Spread(spec) => {
                kv("spread.agents", spec.agents.to_string());
                kv("spread.length", spec.length.to_string());
                kv("spread.landmarks", join(&spec.landmarks));
                kv("spread.starts", join(&spec.starts));
                kv("spread.horizon", spec.horizon.to_string());
                kv("spread.collision_penalty", spec.collision_penalty.to_string());
            }
        }
        kv("model", m.kind.to_string());
        kv("m", m.consensus_iterations.to_string());
        kv("zero_consensus", m.zero_consensus.to_string());
        kv("d_model", m.d_model.to_string());
        kv("heads", m.heads.to_string());
        kv("encoder_blocks", m.encoder_blocks.to_string());
        kv("decoder_blocks", m.decoder_blocks.to_string());
        kv("compressor_heads", m.compressor_heads.to_string());
        kv("max_positions", m.max_positions.to_string());
        kv("order", join(&m.order));
        kv("clip", p.clip.to_string());
        kv("gamma", p.gamma.to_string());
        kv("lambda", p.lambda.to_string());
        kv("entropy_coef", p.entropy_coef.to_string());
        kv("value_coef", p.value_coef.to_string());
        kv("epochs", p.epochs.to_string());
        kv("minibatch_size", p.minibatch_size.to_string());
        kv("tau", p.tau.to_string());
        kv("lr", p.lr.to_string());
        kv("normalize_advantages", p.normalize_advantages.to_string());
        kv("total_steps", t.total_steps.to_string());
        kv("workers", t.workers.to_string());
        kv("horizon", t.horizon.to_string());
        kv("eval_interval", t.eval_interval.to_string());
        kv("eval_episodes", t.eval_episodes.to_string());
        kv("seeds", self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
        kv("output_dir", self.output_dir.display().to_string());
        s
    }
}
