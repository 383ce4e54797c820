//! Student evaluation, robustness statistics over epoch-indexed accuracy
//! curves, the pixel-noise label-preservation probe, and curve export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::MlpModel;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Per-run accuracy and loss series, one point per evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub config_hash: u64,
    /// 1-based epoch index of each evaluation.
    pub epochs: Vec<usize>,
    pub accuracy: Vec<f64>,
    pub loss: Vec<f64>,
}

impl MetricsRecord {
    pub fn new(run_id: impl Into<String>, config_hash: u64) -> Self {
        Self {
            run_id: run_id.into(),
            config_hash,
            epochs: Vec::new(),
            accuracy: Vec::new(),
            loss: Vec::new(),
        }
    }

    pub fn push(&mut self, epoch: usize, accuracy: f64, loss: f64) {
        self.epochs.push(epoch);
        self.accuracy.push(accuracy);
        self.loss.push(loss);
    }

    pub fn mean_accuracy(&self) -> f64 {
        self.accuracy.iter().sum::<f64>() / self.accuracy.len().max(1) as f64
    }

    pub fn peak_accuracy(&self) -> f64 {
        self.accuracy.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn final_accuracy(&self) -> f64 {
        self.accuracy.last().copied().unwrap_or(f64::NAN)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobustnessSummary {
    pub mu: f64,
    pub sigma2: f64,
    pub acc_max: f64,
    /// `mu − sigma2`.
    pub objective: f64,
}

impl RobustnessSummary {
    /// Flat `key=value` block.
    pub fn to_text(&self) -> String {
        format!(
            "mu={}\nsigma2={}\nacc_max={}\nobjective={}\n",
            self.mu, self.sigma2, self.acc_max, self.objective
        )
    }
}

/// Argmax accuracy of `model` on `data`; ties resolve to the lowest class.
pub fn evaluate(model: &MlpModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Invalid("cannot evaluate on an empty dataset".into()));
    }
    let logits = model.predict(&data.x)?;
    let hits = logits
        .argmax_rows()
        .iter()
        .zip(&data.y)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

/// Averages runs pointwise per epoch, then reports the mean and population
/// variance of that averaged curve together with the best single point.
pub fn summarize_runs(records: &[MetricsRecord]) -> Result<RobustnessSummary> {
    let first = records
        .first()
        .ok_or_else(|| Error::Invalid("summarize_runs: no records".into()))?;
    let len = first.accuracy.len();
    if len == 0 {
        return Err(Error::Invalid("summarize_runs: empty accuracy series".into()));
    }
    if let Some(r) = records.iter().find(|r| r.accuracy.len() != len) {
        return Err(Error::Invalid(format!(
            "summarize_runs: run `{}` has {} points, expected {len}",
            r.run_id,
            r.accuracy.len()
        )));
    }
    let runs = records.len() as f64;
    let averaged: Vec<f64> = (0..len)
        .map(|t| records.iter().map(|r| r.accuracy[t]).sum::<f64>() / runs)
        .collect();
    let mu = averaged.iter().sum::<f64>() / len as f64;
    let sigma2 = averaged.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / len as f64;
    let acc_max = records
        .iter()
        .flat_map(|r| r.accuracy.iter().copied())
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(RobustnessSummary {
        mu,
        sigma2,
        acc_max,
        objective: mu - sigma2,
    })
}

/// Fraction of `trials` Gaussian perturbations `ε ~ N(0, variance)` of
/// `sample` for which the model keeps the clean argmax label.
pub fn noise_sensitivity(
    sample: &Tensor,
    model: &MlpModel,
    variance: f64,
    trials: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if !(variance > 0.0 && variance.is_finite()) {
        return Err(Error::Invalid(format!("noise variance must be positive, got {variance}")));
    }
    if trials == 0 {
        return Err(Error::Invalid("trials must be positive".into()));
    }
    let d = sample.numel();
    let clean = sample.reshape(&[1, d])?;
    let label = model.predict(&clean)?.argmax_rows()[0];
    let std = variance.sqrt();
    let mut noisy = Vec::with_capacity(trials * d);
    for _ in 0..trials {
        noisy.extend(clean.data().iter().map(|v| v + std * rng.normal()));
    }
    let noisy = Tensor::new(vec![trials, d], noisy)?;
    let kept = model
        .predict(&noisy)?
        .argmax_rows()
        .into_iter()
        .filter(|&p| p == label)
        .count();
    Ok(kept as f64 / trials as f64)
}

pub const CURVE_HEADER: &str = "run_id,epoch,accuracy,loss";

pub fn curves_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for r in records {
        for i in 0..r.accuracy.len() {
            let _ = writeln!(out, "{},{},{},{}", r.run_id, r.epochs[i], r.accuracy[i], r.loss[i]);
        }
    }
    out
}

/// Writes every record's points as `run_id,epoch,accuracy,loss` rows.
pub fn export_curves(records: &[MetricsRecord], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, curves_csv(records))?;
    Ok(())
}
