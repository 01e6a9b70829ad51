//! Forecast evaluation: NRMSE on point forecasts and empirical CRPS /
//! CRPS_sum on ensembles.
//!
//! `crps_empirical` integrates the squared difference between the
//! empirical step CDF and the indicator exactly, segment by segment
//! over the sorted samples. The energy-form identity
//! `(1/S)Σ|x_s − x| − (1/(2S²))ΣΣ|x_s − x_s'|` is kept in the tests as
//! the independent oracle for the same quantity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecasting::ForecastEnsemble;
use crate::training::Row;

/// Denominator used by [`nrmse`]: the mean absolute value avoids
/// sign-cancellation blowups on zero-mean data; `Mean` is the literal
/// printed form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalizer {
    MeanAbs,
    Mean,
}

impl Default for Normalizer {
    fn default() -> Self {
        Normalizer::MeanAbs
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub nrmse: f64,
    pub crps_sum: f64,
    pub n_steps: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub per_step_rmse: Vec<f64>,
    pub per_step_crps: Vec<f64>,
}

/// Root mean squared error over all cells, normalized by the scale of
/// the true data.
pub fn nrmse(pred: &[Row], truth: &[Row], normalizer: Normalizer) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Misaligned(format!(
            "pred has {} steps, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    let d = truth[0].len();
    let mut sq = 0.0;
    let mut count = 0usize;
    let mut norm_acc = 0.0;
    for (p_row, t_row) in pred.iter().zip(truth) {
        if p_row.len() != d || t_row.len() != d {
            return Err(Error::Misaligned("ragged rows in nrmse".into()));
        }
        for (p, t) in p_row.iter().zip(t_row) {
            sq += (p - t) * (p - t);
            norm_acc += match normalizer {
                Normalizer::MeanAbs => t.abs(),
                Normalizer::Mean => *t,
            };
            count += 1;
        }
    }
    let denom = norm_acc / count as f64;
    if denom <= 0.0 {
        return Err(Error::Degenerate(format!(
            "nrmse normalizer is {denom}; data scale is unusable"
        )));
    }
    Ok((sq / count as f64).sqrt() / denom)
}

/// Exact CRPS of the empirical CDF of `samples` against outcome `x`,
/// via piecewise-constant segment integration.
pub fn crps_empirical(samples: &[f64], x: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("crps of an empty sample set".into()));
    }
    if !x.is_finite() || samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("crps inputs".into()));
    }
    let mut pts = samples.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut bounds = pts.clone();
    bounds.push(x);
    bounds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let s = samples.len() as f64;
    let mut total = 0.0;
    for w in bounds.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        // on the open interval (a, b) the CDF and indicator are constant
        let cdf = pts.partition_point(|&v| v <= a) as f64 / s;
        let ind = if x <= a { 1.0 } else { 0.0 };
        total += (cdf - ind) * (cdf - ind) * (b - a);
    }
    Ok(total)
}

/// CRPS of across-dimension sums, averaged over the horizon: per step,
/// each sample is reduced to its sum over dimensions, the truth row
/// likewise, and the empirical CRPS of those sums is averaged.
pub fn crps_sum(ens: &ForecastEnsemble, truth: &[Row]) -> Result<f64> {
    let per_step = crps_sum_per_step(ens, truth)?;
    Ok(per_step.iter().sum::<f64>() / per_step.len() as f64)
}

/// Per-step CRPS of across-dimension sums.
pub fn crps_sum_per_step(ens: &ForecastEnsemble, truth: &[Row]) -> Result<Vec<f64>> {
    if ens.horizon() != truth.len() || truth.is_empty() {
        return Err(Error::Misaligned(format!(
            "ensemble horizon {} vs truth steps {}",
            ens.horizon(),
            truth.len()
        )));
    }
    let d = ens.data_dim();
    let mut out = Vec::with_capacity(truth.len());
    for (step, t_row) in truth.iter().enumerate() {
        if t_row.len() != d {
            return Err(Error::Misaligned(format!(
                "truth row {step} has width {} vs ensemble dim {d}",
                t_row.len()
            )));
        }
        let sums: Vec<f64> = ens
            .samples
            .iter()
            .map(|s| s[step].iter().sum::<f64>())
            .collect();
        let t_sum: f64 = t_row.iter().sum();
        out.push(crps_empirical(&sums, t_sum)?);
    }
    Ok(out)
}

/// Bundles point and ensemble scores into one record.
pub fn evaluate(
    point: &[Row],
    ens: &ForecastEnsemble,
    truth: &[Row],
    normalizer: Normalizer,
    seed: u64,
) -> Result<MetricReport> {
    let nrmse_val = nrmse(point, truth, normalizer)?;
    let per_step_crps = crps_sum_per_step(ens, truth)?;
    let crps_val = per_step_crps.iter().sum::<f64>() / per_step_crps.len() as f64;
    let per_step_rmse = point
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            (p.iter()
                .zip(t)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / t.len() as f64)
                .sqrt()
        })
        .collect();
    Ok(MetricReport {
        nrmse: nrmse_val,
        crps_sum: crps_val,
        n_steps: truth.len(),
        n_samples: ens.n_samples(),
        seed,
        per_step_rmse,
        per_step_crps,
    })
}
