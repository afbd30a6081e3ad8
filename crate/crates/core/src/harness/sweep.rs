use std::fmt;
use std::io::Write;
use std::str::FromStr;

use super::config::{DataSource, ExperimentConfig};
use super::{load_data, split_data, train_on, RunReport};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Shots,
    Tasks,
    Cut,
    Snr,
}

impl SweepKind {
    /// Configuration key each grid value is written to.
    pub fn key(self) -> &'static str {
        match self {
            SweepKind::Shots => "meta.shots",
            SweepKind::Tasks => "meta.tasks",
            SweepKind::Cut => "run.cut",
            SweepKind::Snr => "channel.snr_db",
        }
    }
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepKind::Shots => "shots",
            SweepKind::Tasks => "tasks",
            SweepKind::Cut => "cut",
            SweepKind::Snr => "snr",
        })
    }
}

impl FromStr for SweepKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shots" => Ok(SweepKind::Shots),
            "tasks" => Ok(SweepKind::Tasks),
            "cut" => Ok(SweepKind::Cut),
            "snr" => Ok(SweepKind::Snr),
            _ => Err(Error::config(format!("unknown sweep kind {s:?} (shots, tasks, cut, snr)"))),
        }
    }
}

/// One (grid value, seed) result.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub kind: SweepKind,
    pub value: String,
    pub seed: u64,
    pub report: RunReport,
}

const HEADER: [&str; 16] = [
    "sweep",
    "value",
    "seed",
    "mode",
    "accuracy",
    "precision",
    "recall",
    "f1",
    "coverage",
    "inefficiency",
    "p1",
    "bytes_fwd",
    "bytes_bwd",
    "device_flops",
    "aggregator_flops",
    "final_step_query_loss",
];

fn record(row: &SweepRow) -> Vec<String> {
    let r = &row.report;
    vec![
        row.kind.to_string(),
        row.value.clone(),
        row.seed.to_string(),
        r.mode.to_string(),
        r.final_accuracy().to_string(),
        r.metrics.precision.to_string(),
        r.metrics.recall.to_string(),
        r.metrics.f1.to_string(),
        r.coverage.to_string(),
        r.inefficiency.to_string(),
        r.p1.to_string(),
        r.bytes_fwd.to_string(),
        r.bytes_bwd.to_string(),
        r.device_flops.to_string(),
        r.aggregator_flops.to_string(),
        r.query_loss_curve.last().copied().unwrap_or(f64::NAN).to_string(),
    ]
}

/// Runs `train` for every grid value and seed, in grid order, writing one
/// long-form CSV row per run. Each row is flushed as soon as it is known, so
/// a failing point leaves the earlier rows on disk.
pub fn sweep<W: Write>(kind: SweepKind, grid: &[String], seeds: &[u64], base: &ExperimentConfig, out: W) -> Result<Vec<SweepRow>> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::config("sweep needs a nonempty grid and at least one seed"));
    }
    // Omniglot decoding is the expensive part; do it once.
    let raw = match base.data {
        DataSource::Omniglot(_) => Some(load_data(base)?),
        DataSource::Synth => None,
    };
    let mut csv = csv::Writer::from_writer(out);
    csv.write_record(HEADER)?;
    csv.flush()?;
    let mut rows = Vec::with_capacity(grid.len() * seeds.len());
    for value in grid {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.set(kind.key(), value)?;
            let data = match &raw {
                Some(d) => split_data(&cfg, d.clone())?,
                None => split_data(&cfg, load_data(&cfg)?)?,
            };
            log::info!("sweep {kind} = {value}, seed {seed}");
            let report = train_on(&cfg, &data)?;
            let row = SweepRow {
                kind,
                value: value.clone(),
                seed,
                report,
            };
            csv.write_record(record(&row))?;
            csv.flush()?;
            rows.push(row);
        }
    }
    Ok(rows)
}
