//! CSV files written per run.
//!
//! `metrics.csv` carries only quantities that are a pure function of the
//! configuration and seed, so re-runs reproduce it byte for byte. Wall-clock
//! durations go to `timing.csv` next to it.

use std::path::Path;

use crate::error::{Error, Result};
use crate::trainer::{EvalRow, MetricRow};

pub const METRICS_HEADER: [&str; 9] = [
    "update",
    "env_steps",
    "mean_return",
    "std_return",
    "critic_loss",
    "actor_loss",
    "entropy",
    "clip_fraction",
    "approx_kl",
];

pub const TIMING_HEADER: [&str; 2] = ["update", "wall_seconds"];

pub const EVAL_HEADER: [&str; 5] = ["update", "env_steps", "mean_return", "std_return", "discounted_return"];

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::config(format!("csv: {other:?}")),
    }
}

fn write_rows(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let found: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if found != header {
        return Err(Error::config(format!(
            "{}: header {found:?} does not match {header:?}",
            path.display()
        )));
    }
    r.records().map(|x| x.map_err(csv_err)).collect()
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, path: &Path) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::config(format!("{}: bad field {i} in row {rec:?}", path.display())))
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    write_rows(
        path,
        &METRICS_HEADER,
        rows.iter().map(|r| {
            vec![
                r.update.to_string(),
                r.env_steps.to_string(),
                r.mean_return.to_string(),
                r.std_return.to_string(),
                r.critic_loss.to_string(),
                r.actor_loss.to_string(),
                r.entropy.to_string(),
                r.clip_fraction.to_string(),
                r.approx_kl.to_string(),
            ]
        }),
    )
}

/// Reads `metrics.csv`; wall-clock time is not stored there and reads as 0.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    read_rows(path, &METRICS_HEADER)?
        .iter()
        .map(|rec| {
            Ok(MetricRow {
                update: field(rec, 0, path)?,
                env_steps: field(rec, 1, path)?,
                mean_return: field(rec, 2, path)?,
                std_return: field(rec, 3, path)?,
                critic_loss: field(rec, 4, path)?,
                actor_loss: field(rec, 5, path)?,
                entropy: field(rec, 6, path)?,
                clip_fraction: field(rec, 7, path)?,
                approx_kl: field(rec, 8, path)?,
                wall_seconds: 0.0,
            })
        })
        .collect()
}

pub fn write_timing(path: &Path, rows: &[MetricRow]) -> Result<()> {
    write_rows(
        path,
        &TIMING_HEADER,
        rows.iter().map(|r| vec![r.update.to_string(), r.wall_seconds.to_string()]),
    )
}

pub fn write_evals(path: &Path, rows: &[EvalRow]) -> Result<()> {
    write_rows(
        path,
        &EVAL_HEADER,
        rows.iter().map(|r| {
            vec![
                r.update.to_string(),
                r.env_steps.to_string(),
                r.mean_return.to_string(),
                r.std_return.to_string(),
                r.discounted_return.to_string(),
            ]
        }),
    )
}

pub fn read_evals(path: &Path) -> Result<Vec<EvalRow>> {
    read_rows(path, &EVAL_HEADER)?
        .iter()
        .map(|rec| {
            Ok(EvalRow {
                update: field(rec, 0, path)?,
                env_steps: field(rec, 1, path)?,
                mean_return: field(rec, 2, path)?,
                std_return: field(rec, 3, path)?,
                discounted_return: field(rec, 4, path)?,
            })
        })
        .collect()
}

/// Writes arbitrary rows under `header`.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_rows(path, header, rows.iter().cloned())
}
