//! Closed-form diffusion math: the beta schedule and its derived
//! quantities, forward noising, the tractable forward posterior, and the
//! x0-parameterized reverse sampling step.
//!
//! Conventions: diffusion steps are 1-indexed (`n` in `1..=N`), with
//! `alpha_bar(0) = 1`. The reverse-step mean is
//!
//! ```text
//! mu = sqrt(alpha_n) * (1 - abar_{n-1}) / (1 - abar_n) * x^n
//!    + sqrt(abar_{n-1}) * beta_n      / (1 - abar_n) * x0_pred
//! ```
//!
//! and the injected noise variance is the forward-posterior variance
//! `btilde_n = (1 - abar_{n-1}) / (1 - abar_n) * beta_n`, with
//! `btilde_1 = beta_1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the beta schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

/// Precomputed schedule vectors; immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    n_steps: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

/// Diagonal Gaussian: mean and strictly positive per-dimension variance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDiag {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianDiag {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::ShapeMismatch(format!(
                "gaussian mean len {} vs var len {}",
                mean.len(),
                var.len()
            )));
        }
        if var.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidRange(
                "gaussian variance must be strictly positive".into(),
            ));
        }
        Ok(Self { mean, var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Standard normal of the given width.
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }
}

/// Builds a schedule with `n_steps` betas interpolated linearly from
/// `beta_min` to `beta_max` inclusive.
pub fn build_schedule(
    n_steps: usize,
    beta_min: f64,
    beta_max: f64,
    kind: ScheduleKind,
) -> Result<DiffusionSchedule> {
    if n_steps < 1 {
        return Err(Error::InvalidRange("n_steps must be >= 1".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::InvalidRange(format!(
            "need 0 < beta_min <= beta_max < 1, got {beta_min} and {beta_max}"
        )));
    }
    let ScheduleKind::Linear = kind;
    let betas: Vec<f64> = if n_steps == 1 {
        vec![beta_min]
    } else {
        (0..n_steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (n_steps - 1) as f64)
            .collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(n_steps);
    let mut acc = 1.0;
    for &a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    let mut posterior_vars = Vec::with_capacity(n_steps);
    posterior_vars.push(betas[0]);
    for i in 1..n_steps {
        posterior_vars.push((1.0 - alpha_bars[i - 1]) / (1.0 - alpha_bars[i]) * betas[i]);
    }
    Ok(DiffusionSchedule {
        n_steps,
        betas,
        alphas,
        alpha_bars,
        posterior_vars,
    })
}

impl DiffusionSchedule {
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    fn check_step(&self, n: usize) -> Result<()> {
        if n < 1 || n > self.n_steps {
            return Err(Error::StepOutOfRange {
                n,
                max: self.n_steps,
            });
        }
        Ok(())
    }

    pub fn beta(&self, n: usize) -> f64 {
        self.betas[n - 1]
    }

    pub fn alpha(&self, n: usize) -> f64 {
        self.alphas[n - 1]
    }

    /// Cumulative product of alphas up to step `n`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, n: usize) -> f64 {
        if n == 0 {
            1.0
        } else {
            self.alpha_bars[n - 1]
        }
    }

    pub fn posterior_var(&self, n: usize) -> f64 {
        self.posterior_vars[n - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_vars(&self) -> &[f64] {
        &self.posterior_vars
    }

    /// Closed-form forward sample
    /// `x^n = sqrt(abar_n) x0 + sqrt(1 - abar_n) eps`.
    pub fn forward_sample(&self, x0: &[f64], n: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_step(n)?;
        if x0.len() != eps.len() {
            return Err(Error::ShapeMismatch(format!(
                "x0 len {} vs eps len {}",
                x0.len(),
                eps.len()
            )));
        }
        let ab = self.alpha_bar(n);
        let (cs, cn) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0
            .iter()
            .zip(eps)
            .map(|(&x, &e)| cs * x + cn * e)
            .collect())
    }

    /// One forward transition `x^n = sqrt(1 - beta_n) x^{n-1} + sqrt(beta_n) eps`.
    pub fn forward_step(&self, x_prev: &[f64], n: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_step(n)?;
        if x_prev.len() != eps.len() {
            return Err(Error::ShapeMismatch(format!(
                "x_prev len {} vs eps len {}",
                x_prev.len(),
                eps.len()
            )));
        }
        let b = self.beta(n);
        let (cs, cn) = ((1.0 - b).sqrt(), b.sqrt());
        Ok(x_prev
            .iter()
            .zip(eps)
            .map(|(&x, &e)| cs * x + cn * e)
            .collect())
    }

    /// Tractable posterior `q(x^{n-1} | x^n, x0)` as a diagonal Gaussian
    /// with isotropic variance `btilde_n`.
    pub fn forward_posterior(&self, xn: &[f64], x0: &[f64], n: usize) -> Result<GaussianDiag> {
        self.check_step(n)?;
        if xn.len() != x0.len() {
            return Err(Error::ShapeMismatch(format!(
                "xn len {} vs x0 len {}",
                xn.len(),
                x0.len()
            )));
        }
        let (c_x0, c_xn) = self.reverse_coefficients(n);
        let mean = x0
            .iter()
            .zip(xn)
            .map(|(&x0v, &xnv)| c_x0 * x0v + c_xn * xnv)
            .collect();
        let var = vec![self.posterior_var(n); x0.len()];
        GaussianDiag::new(mean, var)
    }

    /// Coefficients `(on x0, on x^n)` of the posterior / reverse mean.
    /// At `n = 1` they are exactly `(1, 0)` since `1 - abar_1 = beta_1`.
    pub fn reverse_coefficients(&self, n: usize) -> (f64, f64) {
        if n == 1 {
            return (1.0, 0.0);
        }
        let ab_n = self.alpha_bar(n);
        let ab_prev = self.alpha_bar(n - 1);
        let denom = 1.0 - ab_n;
        let c_x0 = ab_prev.sqrt() * self.beta(n) / denom;
        let c_xn = self.alpha(n).sqrt() * (1.0 - ab_prev) / denom;
        (c_x0, c_xn)
    }

    /// One ancestral reverse step with the denoiser's data prediction in
    /// place of the true `x0`. Noise injection is forbidden at `n = 1`.
    pub fn reverse_step(
        &self,
        xn: &[f64],
        x0_pred: &[f64],
        n: usize,
        noise: &[f64],
        add_noise: bool,
    ) -> Result<Vec<f64>> {
        self.check_step(n)?;
        if xn.len() != x0_pred.len() || xn.len() != noise.len() {
            return Err(Error::ShapeMismatch(format!(
                "reverse_step widths xn={} x0_pred={} noise={}",
                xn.len(),
                x0_pred.len(),
                noise.len()
            )));
        }
        if add_noise && n == 1 {
            return Err(Error::Contract(
                "no noise injection at the final reverse step (n = 1)".into(),
            ));
        }
        let (c_x0, c_xn) = self.reverse_coefficients(n);
        let sigma = if add_noise {
            self.posterior_var(n).sqrt()
        } else {
            0.0
        };
        Ok(xn
            .iter()
            .zip(x0_pred)
            .zip(noise)
            .map(|((&xnv, &x0v), &nv)| c_x0 * x0v + c_xn * xnv + sigma * nv)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn sched2() -> DiffusionSchedule {
        build_schedule(2, 0.1, 0.2, ScheduleKind::Linear).unwrap()
    }

    #[test]
    fn single_step_identities() {
        let s = build_schedule(1, 0.5, 0.5, ScheduleKind::Linear).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alpha_bars(), &[0.5]);
        assert_eq!(s.posterior_vars(), &[0.5]);
    }

    #[test]
    fn two_step_products() {
        let s = sched2();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(build_schedule(0, 0.1, 0.2, ScheduleKind::Linear).is_err());
        assert!(build_schedule(5, 0.0, 0.2, ScheduleKind::Linear).is_err());
        assert!(build_schedule(5, 0.3, 0.2, ScheduleKind::Linear).is_err());
        assert!(build_schedule(5, 0.3, 1.0, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn alpha_bar_monotone_and_consistent() {
        let s = build_schedule(100, 1e-4, 0.1, ScheduleKind::Linear).unwrap();
        let mut acc = 1.0;
        for n in 1..=100 {
            acc *= s.alpha(n);
            assert!((s.alpha_bar(n) - acc).abs() <= 1e-15 * acc.abs().max(1.0));
            assert!(s.alpha_bar(n) < s.alpha_bar(n - 1));
            assert!(s.posterior_var(n) <= s.beta(n) + 1e-15);
        }
        assert_eq!(s.posterior_var(1), s.beta(1));
    }

    #[test]
    fn rebuild_is_bit_identical() {
        let a = build_schedule(64, 3e-4, 0.05, ScheduleKind::Linear).unwrap();
        let b = build_schedule(64, 3e-4, 0.05, ScheduleKind::Linear).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_sample_plug_in() {
        let s = sched2();
        let out = s.forward_sample(&[1.0, 1.0], 2, &[1.0, -1.0]).unwrap();
        let a = 0.72f64.sqrt();
        let b = 0.28f64.sqrt();
        assert!((out[0] - (a + b)).abs() < 1e-15);
        assert!((out[1] - (a - b)).abs() < 1e-15);
    }

    #[test]
    fn forward_sample_zero_noise_and_zero_signal() {
        // near-zero betas keep the signal.
        let s = build_schedule(3, 1e-12, 1e-12, ScheduleKind::Linear).unwrap();
        let v = [0.3, -2.0];
        let out = s.forward_sample(&v, 3, &[0.0, 0.0]).unwrap();
        assert!((out[0] - v[0]).abs() < 1e-9);
        assert!((out[1] - v[1]).abs() < 1e-9);

        let s = sched2();
        let e = [0.7, -0.1];
        let out = s.forward_sample(&[0.0, 0.0], 2, &e).unwrap();
        let c = 0.28f64.sqrt();
        assert!((out[0] - c * e[0]).abs() < 1e-15);
        assert!((out[1] - c * e[1]).abs() < 1e-15);
    }

    #[test]
    fn step_bounds_checked() {
        let s = sched2();
        assert!(s.forward_sample(&[0.0], 0, &[0.0]).is_err());
        assert!(s.forward_sample(&[0.0], 3, &[0.0]).is_err());
        assert!(s.forward_posterior(&[0.0], &[0.0], 3).is_err());
        assert!(s
            .reverse_step(&[0.0], &[0.0], 3, &[0.0], false)
            .is_err());
    }

    #[test]
    fn posterior_at_step_one_returns_x0() {
        let s = sched2();
        let x0 = [0.4, -1.3];
        let g = s.forward_posterior(&[9.0, -9.0], &x0, 1).unwrap();
        assert!((g.mean[0] - x0[0]).abs() < 1e-15);
        assert!((g.mean[1] - x0[1]).abs() < 1e-15);
        assert_eq!(g.var, vec![s.beta(1); 2]);
    }

    /// Independent transcription of the posterior-mean coefficients,
    /// kept separate from `reverse_coefficients` on purpose.
    fn posterior_mean_oracle(s: &DiffusionSchedule, xn: &[f64], x0: &[f64], n: usize) -> Vec<f64> {
        let ab_n = s.alpha_bar(n);
        let ab_p = if n == 1 { 1.0 } else { s.alpha_bars()[n - 2] };
        let beta_n = s.betas()[n - 1];
        let alpha_n = 1.0 - beta_n;
        xn.iter()
            .zip(x0)
            .map(|(&xnv, &x0v)| {
                (ab_p.sqrt() * beta_n / (1.0 - ab_n)) * x0v
                    + (alpha_n.sqrt() * (1.0 - ab_p) / (1.0 - ab_n)) * xnv
            })
            .collect()
    }

    #[test]
    fn posterior_matches_independent_oracle() {
        let s = sched2();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        for _ in 0..50 {
            let x0: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let xn: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let g = s.forward_posterior(&xn, &x0, 2).unwrap();
            let oracle = posterior_mean_oracle(&s, &xn, &x0, 2);
            for (a, b) in g.mean.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn posterior_mean_equals_epsilon_form() {
        // substituting x^n = sqrt(abar) x0 + sqrt(1-abar) eps must give the
        // standard epsilon-parameterized mean.
        let s = build_schedule(10, 1e-3, 0.2, ScheduleKind::Linear).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        for n in 1..=10 {
            let x0: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let eps: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let xn = s.forward_sample(&x0, n, &eps).unwrap();
            let mean = s.forward_posterior(&xn, &x0, n).unwrap().mean;
            let ab = s.alpha_bar(n);
            let alpha = s.alpha(n);
            let beta = s.beta(n);
            for i in 0..4 {
                let eps_form = (xn[i] - beta / (1.0 - ab).sqrt() * eps[i]) / alpha.sqrt();
                assert!(
                    (mean[i] - eps_form).abs() < 1e-10,
                    "n={n} i={i}: {} vs {}",
                    mean[i],
                    eps_form
                );
            }
        }
    }

    #[test]
    fn reverse_step_final_returns_prediction_exactly() {
        let s = sched2();
        let x0 = [1.25, -0.5];
        let out = s.reverse_step(&[3.0, 3.0], &x0, 1, &[0.0, 0.0], false).unwrap();
        assert_eq!(out, x0.to_vec());
        let (c0, c1) = s.reverse_coefficients(1);
        assert_eq!(c0, 1.0);
        assert_eq!(c1, 0.0);
    }

    #[test]
    fn reverse_step_noise_at_final_step_is_contract_violation() {
        let s = sched2();
        match s.reverse_step(&[0.0], &[0.0], 1, &[1.0], true) {
            Err(Error::Contract(_)) => {}
            other => panic!("expected contract violation, got {other:?}"),
        }
    }

    #[test]
    fn frozen_chain_limit() {
        // with x0_pred = xn and beta -> 0 the step tends to the identity;
        // the tolerance allows for cancellation in 1 - abar at tiny betas.
        let s = build_schedule(4, 1e-9, 1e-9, ScheduleKind::Linear).unwrap();
        let x = [0.8, -0.2];
        let out = s.reverse_step(&x, &x, 3, &[0.0, 0.0], false).unwrap();
        assert!((out[0] - x[0]).abs() < 1e-6);
        assert!((out[1] - x[1]).abs() < 1e-6);
    }

    #[test]
    fn oracle_denoiser_chain_recovers_x0_for_many_lengths() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(77);
        for n_steps in 1..=100usize {
            let s = build_schedule(n_steps, 1e-4, 0.1, ScheduleKind::Linear).unwrap();
            let x0: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut x: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for n in (1..=n_steps).rev() {
                x = s.reverse_step(&x, &x0, n, &[0.0, 0.0], false).unwrap();
            }
            for i in 0..2 {
                assert!(
                    (x[i] - x0[i]).abs() < 1e-10,
                    "N={n_steps}: {} vs {}",
                    x[i],
                    x0[i]
                );
            }
        }
    }

    #[test]
    fn compositional_chain_matches_closed_form_statistics() {
        // iterate the one-step kernel with fresh noise and compare the
        // empirical mean/variance to the closed form at n = N.
        let s = build_schedule(10, 0.02, 0.3, ScheduleKind::Linear).unwrap();
        let x0 = [1.5, -0.75];
        let draws = 20_000;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(123);
        let mut sums = [0.0f64; 2];
        let mut sumsq = [0.0f64; 2];
        for _ in 0..draws {
            let mut x = x0.to_vec();
            for n in 1..=10 {
                let eps: Vec<f64> = (0..2)
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                x = s.forward_step(&x, n, &eps).unwrap();
            }
            for i in 0..2 {
                sums[i] += x[i];
                sumsq[i] += x[i] * x[i];
            }
        }
        let ab = s.alpha_bar(10);
        let want_var = 1.0 - ab;
        for i in 0..2 {
            let mean = sums[i] / draws as f64;
            let var = sumsq[i] / draws as f64 - mean * mean;
            let se_mean = (want_var / draws as f64).sqrt();
            let se_var = want_var * (2.0 / draws as f64).sqrt();
            let want_mean = ab.sqrt() * x0[i];
            assert!(
                (mean - want_mean).abs() < 4.0 * se_mean,
                "mean[{i}] {mean} vs {want_mean}"
            );
            assert!(
                (var - want_var).abs() < 4.0 * se_var,
                "var[{i}] {var} vs {want_var}"
            );
        }
    }
}
