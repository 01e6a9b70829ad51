//! Observe-then-forecast autoregression: roll the recurrence over the
//! observed history with posterior latents, then sample future steps
//! one at a time — latent from the prior, full reverse diffusion chain
//! from `N(0, I)`, recurrence update with the sampled point.
//!
//! Ensembles use one master seed with a counter-derived stream per
//! sample, so results are reproducible and independent of evaluation
//! order; samples run in parallel and merge by index.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::latent::RecurrenceContext;
use crate::model::{Model, Variant};
use crate::nn::LstmState;
use crate::params::ParameterSet;
use crate::rng::{derive, normal_vec, purpose};
use crate::schedule::DiffusionSchedule;
use crate::tape::{concat_cols, Tape};
use crate::tensor::Tensor;
use crate::training::Row;

/// Sampled future trajectories, `samples[s][step][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastEnsemble {
    pub samples: Vec<Vec<Row>>,
    /// Index of the last observed step in the source series.
    pub t0: usize,
    pub seed: u64,
}

impl ForecastEnsemble {
    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn horizon(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn data_dim(&self) -> usize {
        self.samples
            .first()
            .and_then(|s| s.first())
            .map_or(0, Vec::len)
    }

    /// Values of all samples at one (step, dim) cell.
    pub fn values_at(&self, step: usize, dim: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s[step][dim]).collect()
    }

    /// The S×d points of one forecast step, row per sample.
    pub fn points_at(&self, step: usize) -> Vec<Row> {
        self.samples.iter().map(|s| s[step].clone()).collect()
    }
}

/// Rolls the recurrence over `history` using posterior latents
/// (the observation loop); latent noise comes from a stream derived
/// from `(seed, OBSERVE)`.
pub fn condition_on_history(
    model: &Model,
    params: &ParameterSet,
    history: &[Row],
    seed: u64,
) -> Result<RecurrenceContext> {
    if history.is_empty() {
        return Err(Error::Empty("history must hold at least one step".into()));
    }
    let d = model.cfg.data_dim;
    for (t, row) in history.iter().enumerate() {
        if row.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "history row {t} has width {} vs data dim {d}",
                row.len()
            )));
        }
    }
    let mut rng = derive(seed, &[purpose::OBSERVE]);
    let hidden = model.cfg.hidden_width;

    let tape = Tape::new();
    let p = params.bind(&tape);
    let mut h = tape.constant(Tensor::zeros(&[1, hidden]));
    let mut c = tape.constant(Tensor::zeros(&[1, hidden]));
    for row in history {
        let x = tape.constant(Tensor::row(row));
        let (h2, c2) = match model.cfg.variant {
            Variant::Lstm => model.lstm.step(&p, x, h, c),
            _ => {
                let post_in = concat_cols(&tape, &[h, x]);
                let (qm, qv) = model.posterior.as_ref().unwrap().forward(&p, post_in);
                let eps = normal_vec(&mut rng, model.cfg.latent_width);
                let z = crate::latent::reparam(
                    model.projector.as_ref().unwrap(),
                    &tape,
                    &p,
                    qm,
                    qv,
                    &eps,
                );
                crate::latent::recurrence_step(&model.lstm, &tape, &p, x, z, h, c)
            }
        };
        h = h2;
        c = c2;
    }
    let state = LstmState {
        h: h.value().data().to_vec(),
        c: c.value().data().to_vec(),
    };
    if !state.h.iter().chain(&state.c).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("conditioned recurrence state".into()));
    }
    Ok(RecurrenceContext {
        state,
        step_index: history.len(),
    })
}

/// One future trajectory from a cloned context. Per-step draw order:
/// latent noise, then the variant's own sampling noise (diffusion:
/// `x^N` then per-step reverse noise; Gaussian decoder: one draw).
fn sample_trajectory(
    model: &Model,
    params: &ParameterSet,
    sched: &DiffusionSchedule,
    ctx: &RecurrenceContext,
    horizon: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Row>> {
    let d = model.cfg.data_dim;
    let mut state = ctx.state.clone();
    let mut out = Vec::with_capacity(horizon);

    for _ in 0..horizon {
        let tape = Tape::new();
        let p = params.bind(&tape);
        let h = tape.constant(Tensor::row(&state.h));
        let c = tape.constant(Tensor::row(&state.c));

        let (x_next, h2, c2) = match model.cfg.variant {
            Variant::Lstm => {
                let pred = model.head.as_ref().unwrap().apply(&p, h);
                let x_next = pred.value().data().to_vec();
                let x_const = tape.constant(Tensor::row(&x_next));
                let (h2, c2) = model.lstm.step(&p, x_const, h, c);
                (x_next, h2, c2)
            }
            variant => {
                let eps_z = normal_vec(rng, model.cfg.latent_width);
                let (pm, pv) = match &model.prior {
                    Some(encoder) => encoder.forward(&p, h),
                    None => (
                        tape.constant(Tensor::zeros(&[1, model.cfg.latent_width])),
                        tape.constant(Tensor::ones(&[1, model.cfg.latent_width])),
                    ),
                };
                let z = crate::latent::reparam(
                    model.projector.as_ref().unwrap(),
                    &tape,
                    &p,
                    pm,
                    pv,
                    &eps_z,
                );
                let x_next = if variant == Variant::VlstmStandardPrior {
                    let (dm, dv) = model.decoder.as_ref().unwrap().forward(&p, z);
                    let eps = normal_vec(rng, d);
                    dm.value()
                        .data()
                        .iter()
                        .zip(dv.value().data())
                        .zip(&eps)
                        .map(|((&m, &v), &e)| m + v.sqrt() * e)
                        .collect::<Vec<f64>>()
                } else {
                    // reverse diffusion chain seeded from N(0, I)
                    let denoiser = model.denoiser.as_ref().unwrap();
                    let mut x = normal_vec(rng, d);
                    for n in (1..=sched.n_steps()).rev() {
                        let pred = denoiser.forward(&tape, &p, &x, n, z).value();
                        let add_noise = n > 1;
                        let noise = if add_noise {
                            normal_vec(rng, d)
                        } else {
                            vec![0.0; d]
                        };
                        x = sched.reverse_step(&x, pred.data(), n, &noise, add_noise)?;
                    }
                    x
                };
                let x_const = tape.constant(Tensor::row(&x_next));
                let (h2, c2) =
                    crate::latent::recurrence_step(&model.lstm, &tape, &p, x_const, z, h, c);
                (x_next, h2, c2)
            }
        };
        if !x_next.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("sampled forecast step".into()));
        }
        state = LstmState {
            h: h2.value().data().to_vec(),
            c: c2.value().data().to_vec(),
        };
        out.push(x_next);
    }
    Ok(out)
}

/// Samples an ensemble of `n_samples` trajectories of length `horizon`
/// from the conditioned context.
pub fn forecast(
    model: &Model,
    params: &ParameterSet,
    sched: &DiffusionSchedule,
    ctx: &RecurrenceContext,
    horizon: usize,
    n_samples: usize,
    seed: u64,
) -> Result<ForecastEnsemble> {
    if n_samples == 0 {
        return Err(Error::Empty("ensemble needs at least one sample".into()));
    }
    let samples: Result<Vec<Vec<Row>>> = (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = derive(seed, &[purpose::FORECAST, s as u64]);
            sample_trajectory(model, params, sched, ctx, horizon, &mut rng)
        })
        .collect();
    Ok(ForecastEnsemble {
        samples: samples?,
        t0: ctx.step_index,
        seed,
    })
}

/// Per-(step, dim, level) empirical quantiles via linear interpolation
/// of order statistics; indexed `[step][dim][level]`.
pub fn quantile_bands(ens: &ForecastEnsemble, levels: &[f64]) -> Result<Vec<Vec<Vec<f64>>>> {
    if ens.n_samples() == 0 {
        return Err(Error::Empty("quantiles of an empty ensemble".into()));
    }
    if levels.iter().any(|&l| !(0.0..=1.0).contains(&l)) {
        return Err(Error::InvalidRange(
            "quantile levels must be in [0,1]".into(),
        ));
    }
    let (h, d) = (ens.horizon(), ens.data_dim());
    let mut out = vec![vec![vec![0.0; levels.len()]; d]; h];
    for (step, row) in out.iter_mut().enumerate() {
        for (dim, cell) in row.iter_mut().enumerate() {
            let mut vals = ens.values_at(step, dim);
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (li, &level) in levels.iter().enumerate() {
                cell[li] = interpolate_quantile(&vals, level);
            }
        }
    }
    Ok(out)
}

/// R-7 style quantile on sorted values.
fn interpolate_quantile(sorted: &[f64], level: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = level * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Last-value persistence baseline: repeats the final observed row.
pub fn persistence_forecast(last_observed: &[f64], horizon: usize) -> Vec<Row> {
    (0..horizon).map(|_| last_observed.to_vec()).collect()
}
