//! Gaussian-mixture point estimation over forecast ensembles: fit a
//! diagonal-covariance GMM to the per-step sample cloud by EM, pick the
//! component count by BIC, and return the center of the heaviest
//! component as the point forecast.
//!
//! Fitting sorts the input points lexicographically first, which makes
//! the seeding and every EM reduction independent of the sample order —
//! [`pointwise_forecast`] is bitwise permutation-invariant in the
//! sample axis.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecasting::ForecastEnsemble;
use crate::rng::{derive, purpose};

/// Variance floor guarding against component collapse.
pub const COV_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmConfig {
    pub k_candidates: Vec<usize>,
    pub max_iter: usize,
    /// Relative log-likelihood improvement below which EM stops.
    pub tol: f64,
    pub seed: u64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            k_candidates: vec![1, 2, 3],
            max_iter: 200,
            tol: 1e-7,
            seed: 0,
        }
    }
}

/// Fitted mixture with diagonal covariances.
#[derive(Debug, Clone)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    /// K×d component means.
    pub means: Vec<Vec<f64>>,
    /// K×d diagonal covariances, floored at [`COV_FLOOR`].
    pub vars: Vec<Vec<f64>>,
    pub log_likelihood_trace: Vec<f64>,
    pub bic: f64,
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.weights.len()
    }
}

fn log_component_density(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    const LN_2PI: f64 = 1.8378770664093453;
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((&xv, &m), &v)| {
            let d = xv - m;
            -0.5 * (d * d / v + v.ln() + LN_2PI)
        })
        .sum()
}

fn log_sum_exp(vals: &[f64]) -> f64 {
    let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx.is_infinite() {
        return mx;
    }
    mx + vals.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

/// Seeding in the k-means++ style: the first center is a seeded draw,
/// each next center is drawn with probability proportional to the
/// squared distance to the nearest chosen center. Operates on the
/// already-sorted points, so the choice is order-independent.
fn seed_centers(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let m = points.len();
    let mut centers = Vec::with_capacity(k);
    centers.push(points[rng.gen_range(0..m)].clone());
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p, &centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // all remaining mass at the chosen centers; spread arbitrarily
            points[rng.gen_range(0..m)].clone()
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = m - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            points[pick].clone()
        };
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &next));
        }
        centers.push(next);
    }
    centers
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// EM from a fixed seeding for one component count. Returns the fitted
/// model without the BIC field populated.
fn em_fit(points: &[Vec<f64>], k: usize, cfg: &GmmConfig, rng: &mut impl Rng) -> GmmModel {
    let m = points.len();
    let d = points[0].len();

    let mut means = seed_centers(points, k, rng);
    // global per-dimension variance as the starting spread
    let mut global_mean = vec![0.0; d];
    for p in points {
        for (g, &v) in global_mean.iter_mut().zip(p) {
            *g += v / m as f64;
        }
    }
    let mut global_var = vec![0.0; d];
    for p in points {
        for (g, (&v, &mu)) in global_var.iter_mut().zip(p.iter().zip(&global_mean)) {
            *g += (v - mu) * (v - mu) / m as f64;
        }
    }
    for g in &mut global_var {
        *g = g.max(COV_FLOOR);
    }
    let mut vars = vec![global_var.clone(); k];
    let mut weights = vec![1.0 / k as f64; k];

    let mut trace: Vec<f64> = Vec::new();
    let mut resp = vec![vec![0.0; k]; m];
    for _ in 0..cfg.max_iter {
        // E-step
        let mut loglik = 0.0;
        for (i, p) in points.iter().enumerate() {
            let logs: Vec<f64> = (0..k)
                .map(|c| weights[c].ln() + log_component_density(p, &means[c], &vars[c]))
                .collect();
            let lse = log_sum_exp(&logs);
            loglik += lse;
            for c in 0..k {
                resp[i][c] = (logs[c] - lse).exp();
            }
        }
        if let Some(&prev) = trace.last() {
            debug_assert!(
                loglik >= prev - 1e-8 * (1.0 + prev.abs()),
                "EM log-likelihood decreased: {prev} -> {loglik}"
            );
            trace.push(loglik);
            if (loglik - prev).abs() <= cfg.tol * (1.0 + prev.abs()) {
                break;
            }
        } else {
            trace.push(loglik);
        }
        // M-step
        for c in 0..k {
            let nk: f64 = (0..m).map(|i| resp[i][c]).sum();
            let nk_safe = nk.max(1e-300);
            weights[c] = nk / m as f64;
            for j in 0..d {
                let mu: f64 = (0..m).map(|i| resp[i][c] * points[i][j]).sum::<f64>() / nk_safe;
                means[c][j] = mu;
            }
            for j in 0..d {
                let v: f64 = (0..m)
                    .map(|i| {
                        let dj = points[i][j] - means[c][j];
                        resp[i][c] * dj * dj
                    })
                    .sum::<f64>()
                    / nk_safe;
                vars[c][j] = v.max(COV_FLOOR);
            }
        }
    }

    GmmModel {
        weights,
        means,
        vars,
        log_likelihood_trace: trace,
        bic: f64::INFINITY,
    }
}

/// Fits a GMM for every candidate component count and keeps the one
/// with the lowest BIC (ties favor the smaller count).
pub fn fit_gmm(points: &[Vec<f64>], cfg: &GmmConfig) -> Result<GmmModel> {
    if points.is_empty() {
        return Err(Error::Empty("gmm needs at least one point".into()));
    }
    let d = points[0].len();
    if d == 0 {
        return Err(Error::Degenerate("gmm needs d >= 1".into()));
    }
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::ShapeMismatch("ragged point rows".into()));
    }
    if cfg.k_candidates.is_empty() {
        return Err(Error::Config("gmm.k_candidates must be nonempty".into()));
    }
    let m = points.len();
    let max_k = *cfg.k_candidates.iter().max().unwrap();
    if max_k == 0 {
        return Err(Error::Config("gmm component counts must be >= 1".into()));
    }
    if m < max_k {
        return Err(Error::Degenerate(format!(
            "{m} points cannot support {max_k} components"
        )));
    }

    // sort once; everything downstream is then order-independent
    let mut sorted: Vec<Vec<f64>> = points.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut ks: Vec<usize> = cfg.k_candidates.clone();
    ks.sort_unstable();
    ks.dedup();

    let mut best: Option<GmmModel> = None;
    for &k in &ks {
        let mut rng = derive(cfg.seed, &[purpose::GMM, k as u64]);
        let mut model = em_fit(&sorted, k, cfg, &mut rng);
        let loglik = *model.log_likelihood_trace.last().unwrap();
        let n_params = (k - 1) + 2 * k * d;
        model.bic = -2.0 * loglik + n_params as f64 * (m as f64).ln();
        best = match best {
            None => Some(model),
            Some(b) if model.bic < b.bic => Some(model),
            Some(b) => Some(b),
        };
    }
    let model = best.unwrap();
    debug_assert!((model.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    Ok(model)
}

/// Center of the heaviest component; ties break to the lowest index.
pub fn select_point(gmm: &GmmModel) -> Result<Vec<f64>> {
    if gmm.means.is_empty() {
        return Err(Error::Degenerate("select_point on an unfitted model".into()));
    }
    let mut best = 0;
    for (i, &w) in gmm.weights.iter().enumerate() {
        if w > gmm.weights[best] {
            best = i;
        }
    }
    Ok(gmm.means[best].clone())
}

/// Per-step GMM point forecast over an ensemble: fits the S×d cloud at
/// each horizon step independently and stacks the selected centers.
pub fn pointwise_forecast(ens: &ForecastEnsemble, cfg: &GmmConfig) -> Result<Vec<Vec<f64>>> {
    if ens.n_samples() < 2 {
        return Err(Error::Degenerate(
            "pointwise forecast needs at least 2 samples".into(),
        ));
    }
    (0..ens.horizon())
        .into_par_iter()
        .map(|step| {
            let step_cfg = GmmConfig {
                seed: cfg.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                ..cfg.clone()
            };
            let gmm = fit_gmm(&ens.points_at(step), &step_cfg)?;
            select_point(&gmm)
        })
        .collect()
}
