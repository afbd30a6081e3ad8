//! Split (validation-based) conformal prediction over softmax outputs.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Slack before the ceiling in the order-statistic index, so that
/// `(n+1)(1-α)` landing on an integer is not bumped up by roundoff.
const INDEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CPConfig {
    pub alpha: f64,
    /// Share of the pool used for calibration; the rest is validation.
    pub cal_fraction: f64,
}

impl Default for CPConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            cal_fraction: 0.5,
        }
    }
}

impl CPConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.cal_fraction > 0.0 && self.cal_fraction < 1.0) {
            return Err(Error::config(format!(
                "calibration fraction must lie in (0, 1), got {}",
                self.cal_fraction
            )));
        }
        Ok(())
    }
}

/// Probability rows with their true labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationSet {
    pub probs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl CalibrationSet {
    pub fn new(probs: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if probs.len() != labels.len() {
            return Err(Error::input(format!("{} probability rows for {} labels", probs.len(), labels.len())));
        }
        Ok(Self { probs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Random disjoint split into (calibration, validation). Both halves get
    /// at least one example when the pool has two or more.
    pub fn split<R: Rng>(&self, cal_fraction: f64, rng: &mut R) -> Result<(Self, Self)> {
        if self.len() < 2 {
            return Err(Error::config("need at least two examples to split calibration/validation"));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let n_cal = ((self.len() as f64 * cal_fraction).round() as usize).clamp(1, self.len() - 1);
        let pick = |ids: &[usize]| Self {
            probs: ids.iter().map(|&i| self.probs[i].clone()).collect(),
            labels: ids.iter().map(|&i| self.labels[i]).collect(),
        };
        Ok((pick(&idx[..n_cal]), pick(&idx[n_cal..])))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub classes: Vec<usize>,
    pub threshold: f64,
}

impl PredictionSet {
    pub fn contains(&self, y: usize) -> bool {
        self.classes.contains(&y)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Nonconformity score `1 - p[label]` per example.
pub fn nc_scores(probs: &[Vec<f64>], labels: &[usize]) -> Result<Vec<f64>> {
    if probs.len() != labels.len() {
        return Err(Error::input(format!("{} probability rows for {} labels", probs.len(), labels.len())));
    }
    probs
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (row, &y))| {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::input(format!("row {i} sums to {sum}, not 1")));
            }
            let p = row
                .get(y)
                .ok_or_else(|| Error::input(format!("label {y} out of range for {} classes", row.len())))?;
            Ok((1.0 - p).clamp(0.0, 1.0))
        })
        .collect()
}

/// 1-based rank of the calibration order statistic used as threshold.
pub fn threshold_rank(n: usize, alpha: f64) -> usize {
    (((n as f64 + 1.0) * (1.0 - alpha) - INDEX_TOL).ceil().max(1.0)) as usize
}

/// The `⌈(n+1)(1-α)⌉`-th smallest score, or `+∞` when that rank exceeds `n`.
pub fn conformal_threshold(scores: &[f64], alpha: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::config("conformal threshold needs at least one calibration score"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let k = threshold_rank(scores.len(), alpha);
    if k > scores.len() {
        return Ok(f64::INFINITY);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[k - 1])
}

/// `{ y : 1 - p[y] <= q̂ }`.
pub fn prediction_set(probs_row: &[f64], q_hat: f64) -> PredictionSet {
    PredictionSet {
        classes: probs_row
            .iter()
            .enumerate()
            .filter(|(_, &p)| 1.0 - p <= q_hat)
            .map(|(y, _)| y)
            .collect(),
        threshold: q_hat,
    }
}

/// Fraction of sets containing their label; 0 for no examples.
pub fn coverage(sets: &[PredictionSet], labels: &[usize]) -> f64 {
    if sets.is_empty() {
        return 0.0;
    }
    let hit = sets.iter().zip(labels).filter(|(s, &y)| s.contains(y)).count();
    hit as f64 / sets.len() as f64
}

/// Mean set size; 0 for no examples.
pub fn inefficiency(sets: &[PredictionSet]) -> f64 {
    if sets.is_empty() {
        return 0.0;
    }
    sets.iter().map(PredictionSet::len).sum::<usize>() as f64 / sets.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpResult {
    pub n_cal: usize,
    pub alpha: f64,
    pub q_hat: f64,
    pub coverage: f64,
    pub inefficiency: f64,
    pub empty_sets: usize,
}

/// Calibrates on `cal` and scores the prediction sets built for `val`.
pub fn evaluate(cal: &CalibrationSet, val: &CalibrationSet, alpha: f64) -> Result<CpResult> {
    let q_hat = conformal_threshold(&nc_scores(&cal.probs, &cal.labels)?, alpha)?;
    let sets: Vec<PredictionSet> = val.probs.iter().map(|p| prediction_set(p, q_hat)).collect();
    Ok(CpResult {
        n_cal: cal.len(),
        alpha,
        q_hat,
        coverage: coverage(&sets, &val.labels),
        inefficiency: inefficiency(&sets),
        empty_sets: sets.iter().filter(|s| s.is_empty()).count(),
    })
}

/// Writes the `task_id,n_cal,alpha,q_hat,coverage,inefficiency` report.
pub fn write_cp_report<W: Write>(w: W, rows: &[(usize, CpResult)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["task_id", "n_cal", "alpha", "q_hat", "coverage", "inefficiency"])?;
    for (task, r) in rows {
        out.write_record([
            task.to_string(),
            r.n_cal.to_string(),
            r.alpha.to_string(),
            r.q_hat.to_string(),
            r.coverage.to_string(),
            r.inefficiency.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
