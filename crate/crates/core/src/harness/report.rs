use std::io::{Read, Write};

use super::config::{ExperimentConfig, Mode};
use super::metrics::ClassificationMetrics;
use crate::conformal::CpResult;
use crate::error::{Error, Result};
use crate::meta::EpochLog;
use crate::nn::Parameters;

/// Outcome of one `train` call. The CSV form carries no wall-clock values,
/// so identical seeds give identical files.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub mode: Mode,
    /// `section.key` pairs that reproduce the run.
    pub config: Vec<(String, String)>,
    pub seed: u64,
    pub init_seed: u64,
    /// Mean query accuracy over meta-test episodes after each SGD step
    /// (index 0 is before adaptation).
    pub accuracy_curve: Vec<f64>,
    pub query_loss_curve: Vec<f64>,
    /// Pooled over all meta-test queries after the last step.
    pub metrics: ClassificationMetrics,
    pub coverage: f64,
    pub inefficiency: f64,
    pub cp: Vec<(usize, CpResult)>,
    pub p1: f64,
    pub bytes_fwd: u64,
    pub bytes_bwd: u64,
    /// Per-item forward cost of each side.
    pub device_flops: u64,
    pub aggregator_flops: u64,
    pub final_meta_loss: Option<f64>,
    /// Meta-test episodes whose final evaluation hit an unrecoverable fade.
    pub lost_evaluations: usize,
    /// Not written to the CSV (holds wall times).
    pub meta_log: Vec<EpochLog>,
    /// Joined model parameters the meta-test adaptation started from.
    pub init_params: Parameters<f32>,
}

impl RunReport {
    pub fn final_accuracy(&self) -> f64 {
        *self.accuracy_curve.last().expect("curve has the step-0 point")
    }

    /// Long-form rows `(kind, key, value)`.
    pub fn rows(&self) -> Vec<(String, String, String)> {
        let mut rows = Vec::new();
        let mut push = |kind: &str, key: &str, value: String| rows.push((kind.to_string(), key.to_string(), value));
        for (k, v) in &self.config {
            push("config", k, v.clone());
        }
        push("seed", "run", self.seed.to_string());
        push("seed", "init", self.init_seed.to_string());
        push("metric", "mode", self.mode.to_string());
        push("metric", "accuracy", self.metrics.accuracy.to_string());
        push("metric", "precision", self.metrics.precision.to_string());
        push("metric", "recall", self.metrics.recall.to_string());
        push("metric", "f1", self.metrics.f1.to_string());
        let absent: Vec<String> = self.metrics.absent_classes.iter().map(|c| c.to_string()).collect();
        push("metric", "absent_classes", absent.join(" "));
        push("metric", "coverage", self.coverage.to_string());
        push("metric", "inefficiency", self.inefficiency.to_string());
        push("metric", "p1", self.p1.to_string());
        push("metric", "bytes_fwd", self.bytes_fwd.to_string());
        push("metric", "bytes_bwd", self.bytes_bwd.to_string());
        push("metric", "device_flops", self.device_flops.to_string());
        push("metric", "aggregator_flops", self.aggregator_flops.to_string());
        push(
            "metric",
            "final_meta_loss",
            self.final_meta_loss.map_or_else(String::new, |v| v.to_string()),
        );
        push("metric", "lost_evaluations", self.lost_evaluations.to_string());
        for (s, a) in self.accuracy_curve.iter().enumerate() {
            push("accuracy_curve", &s.to_string(), a.to_string());
        }
        for (s, l) in self.query_loss_curve.iter().enumerate() {
            push("loss_curve", &s.to_string(), l.to_string());
        }
        for (task, r) in &self.cp {
            push("cp_coverage", &task.to_string(), r.coverage.to_string());
            push("cp_inefficiency", &task.to_string(), r.inefficiency.to_string());
            push("cp_q_hat", &task.to_string(), r.q_hat.to_string());
        }
        rows
    }

    /// `kind,key,value` CSV with one header row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["kind", "key", "value"])?;
        for (kind, key, value) in self.rows() {
            out.write_record([kind, key, value])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

/// Rebuilds the configuration echoed in a report CSV.
pub fn config_from_report<R: Read>(r: R) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut seen = 0;
    for rec in csv::Reader::from_reader(r).records() {
        let rec = rec?;
        if rec.get(0) == Some("config") {
            let (k, v) = (rec.get(1).unwrap_or(""), rec.get(2).unwrap_or(""));
            cfg.set(k, v)?;
            seen += 1;
        }
    }
    if seen == 0 {
        return Err(Error::input("report has no config rows"));
    }
    Ok(cfg)
}
