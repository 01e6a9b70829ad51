//! Step-wise training of a variant on sliding windows under the dual
//! objective (latent KL plus diffusion reconstruction), with seeded
//! shuffling, batched first-order adaptive-moment updates, global-norm
//! gradient clipping, and plateau learning-rate decay.
//!
//! Randomness discipline: the draws for window `w` in epoch `e` come
//! from an independent stream derived from `(seed, TRAIN, e, w)`, so
//! batch evaluation order (including parallel evaluation) cannot change
//! results.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{kl_term, recurrence_step, reparam};
use crate::model::{Model, Variant};
use crate::params::{BoundParams, ParameterSet};
use crate::rng::{derive, normal_vec, purpose};
use crate::schedule::DiffusionSchedule;
use crate::tape::{concat_cols, Tape, Tx};
use crate::tensor::Tensor;

pub type Row = Vec<f64>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without relative improvement before the LR halves.
    pub patience: usize,
    pub lr_decay: f64,
    pub seed: u64,
    pub grad_clip: f64,
    /// Cap on windows visited per epoch (after the seeded shuffle).
    pub windows_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 8,
            patience: 10,
            lr_decay: 0.5,
            seed: 0,
            grad_clip: 5.0,
            windows_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("train.learning_rate must be > 0".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return Err(Error::Config("train.lr_decay must be in (0, 1)".into()));
        }
        if self.patience < 1 {
            return Err(Error::Config("train.patience must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.grad_clip <= 0.0 {
            return Err(Error::Config("train.grad_clip must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub kl: f64,
    pub recon: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Per-epoch wall time; informational, never serialized into
    /// reproducible outputs.
    pub epoch_seconds: Vec<f64>,
    pub wall_seconds: f64,
}

impl PartialEq for EpochRecord {
    fn eq(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.total == other.total
            && self.kl == other.kl
            && self.recon == other.recon
            && self.lr == other.lr
    }
}

/// Pre-drawn randomness for one window evaluation: per time step the
/// diffusion step index, the forward noise, and the latent noise, in
/// that draw order.
#[derive(Debug, Clone)]
pub struct WindowDraws {
    pub steps: Vec<StepDraws>,
}

#[derive(Debug, Clone)]
pub struct StepDraws {
    pub n: usize,
    pub eps_diff: Vec<f64>,
    pub eps_z: Vec<f64>,
}

pub fn draw_window(
    rng: &mut impl Rng,
    len: usize,
    data_dim: usize,
    latent_width: usize,
    n_steps: usize,
) -> WindowDraws {
    let steps = (0..len)
        .map(|_| StepDraws {
            n: rng.gen_range(1..=n_steps),
            eps_diff: normal_vec(rng, data_dim),
            eps_z: normal_vec(rng, latent_width),
        })
        .collect();
    WindowDraws { steps }
}

/// Builds the loss graph for one window on `tape`. Returns
/// `(total, kl, recon)` with `total = kl + recon` by construction.
pub fn window_loss<'t>(
    model: &Model,
    tape: &'t Tape,
    p: &BoundParams<'t>,
    sched: &DiffusionSchedule,
    window: &[Row],
    draws: &WindowDraws,
) -> Result<(Tx<'t>, Tx<'t>, Tx<'t>)> {
    let d = model.cfg.data_dim;
    for (t, row) in window.iter().enumerate() {
        if row.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "window row {t} has width {} vs data dim {d}",
                row.len()
            )));
        }
    }
    if draws.steps.len() < window.len() {
        return Err(Error::ShapeMismatch(format!(
            "draws cover {} steps, window has {}",
            draws.steps.len(),
            window.len()
        )));
    }

    let hidden = model.cfg.hidden_width;
    let mut h = tape.constant(Tensor::zeros(&[1, hidden]));
    let mut c = tape.constant(Tensor::zeros(&[1, hidden]));
    let mut kl_acc = tape.constant(Tensor::scalar(0.0));
    let mut recon_acc = tape.constant(Tensor::scalar(0.0));

    for (t, row) in window.iter().enumerate() {
        let dr = &draws.steps[t];
        let x = tape.constant(Tensor::row(row));
        match model.cfg.variant {
            Variant::Lstm => {
                let pred = model.head.as_ref().unwrap().apply(p, h);
                let diff = pred.sub(x);
                recon_acc = recon_acc.add(diff.mul(diff).sum());
                let (h2, c2) = model.lstm.step(p, x, h, c);
                h = h2;
                c = c2;
            }
            Variant::VlstmStandardPrior => {
                let post_in = concat_cols(tape, &[h, x]);
                let (qm, qv) = model.posterior.as_ref().unwrap().forward(p, post_in);
                let pm = tape.constant(Tensor::zeros(&[1, model.cfg.latent_width]));
                let pv = tape.constant(Tensor::ones(&[1, model.cfg.latent_width]));
                kl_acc = kl_acc.add(kl_term(qm, qv, pm, pv));
                let z = reparam(
                    model.projector.as_ref().unwrap(),
                    tape,
                    p,
                    qm,
                    qv,
                    &dr.eps_z,
                );
                let (dm, dv) = model.decoder.as_ref().unwrap().forward(p, z);
                // Gaussian negative log likelihood of x under the decoder
                let diff = x.sub(dm);
                let nll = dv
                    .ln()
                    .add(diff.mul(diff).div(dv))
                    .add_scalar((2.0 * std::f64::consts::PI).ln())
                    .sum()
                    .scale(0.5);
                recon_acc = recon_acc.add(nll);
                let (h2, c2) = recurrence_step(&model.lstm, tape, p, x, z, h, c);
                h = h2;
                c = c2;
            }
            Variant::VlstmDiffusion | Variant::Stochdiff => {
                let post_in = concat_cols(tape, &[h, x]);
                let (qm, qv) = model.posterior.as_ref().unwrap().forward(p, post_in);
                let (pm, pv) = match &model.prior {
                    Some(encoder) => encoder.forward(p, h),
                    None => (
                        tape.constant(Tensor::zeros(&[1, model.cfg.latent_width])),
                        tape.constant(Tensor::ones(&[1, model.cfg.latent_width])),
                    ),
                };
                kl_acc = kl_acc.add(kl_term(qm, qv, pm, pv));
                let z = reparam(
                    model.projector.as_ref().unwrap(),
                    tape,
                    p,
                    qm,
                    qv,
                    &dr.eps_z,
                );
                let xn = sched.forward_sample(row, dr.n, &dr.eps_diff)?;
                let pred = model
                    .denoiser
                    .as_ref()
                    .unwrap()
                    .forward(tape, p, &xn, dr.n, z);
                let diff = pred.sub(x);
                recon_acc = recon_acc.add(diff.mul(diff).sum());
                let (h2, c2) = recurrence_step(&model.lstm, tape, p, x, z, h, c);
                h = h2;
                c = c2;
            }
        }
    }
    Ok((kl_acc.add(recon_acc), kl_acc, recon_acc))
}

/// Plain-value dual objective over one window: draws the per-step
/// randomness from `rng`, accumulates KL and reconstruction terms, and
/// returns `(total, kl, recon)`.
pub fn dual_loss(
    model: &Model,
    params: &ParameterSet,
    sched: &DiffusionSchedule,
    window: &[Row],
    rng: &mut impl Rng,
) -> Result<(f64, f64, f64)> {
    let draws = draw_window(
        rng,
        window.len(),
        model.cfg.data_dim,
        model.cfg.latent_width,
        sched.n_steps(),
    );
    let tape = Tape::new();
    let p = params.bind(&tape);
    let (total, kl, recon) = window_loss(model, &tape, &p, sched, window, &draws)?;
    Ok((total.item(), kl.item(), recon.item()))
}

/// Plateau rule: halve the learning rate after `patience` consecutive
/// epochs without a relative improvement of at least 1e-6 over the best
/// observed loss.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub lr: f64,
    patience: usize,
    decay: f64,
    best: f64,
    stall: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, patience: usize, decay: f64) -> Self {
        Self {
            lr,
            patience,
            decay,
            best: f64::INFINITY,
            stall: 0,
        }
    }

    /// Observes one epoch loss; returns true when the LR was decayed.
    pub fn observe(&mut self, loss: f64) -> bool {
        let improved = if self.best.is_finite() {
            loss < self.best - 1e-6 * self.best.abs().max(1e-12)
        } else {
            loss < self.best
        };
        if improved {
            self.best = loss;
            self.stall = 0;
            return false;
        }
        self.stall += 1;
        if self.stall >= self.patience {
            self.lr *= self.decay;
            self.stall = 0;
            return true;
        }
        false
    }
}

/// First-order adaptive-moment optimizer over a [`ParameterSet`].
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &ParameterSet) -> Self {
        let shapes: Vec<Tensor> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            m: shapes.clone(),
            v: shapes,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut ParameterSet, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let (_, value, grad) = params.entry_mut(i);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..value.len() {
                let g = grad.data()[j];
                let mj = self.beta1 * m.data()[j] + (1.0 - self.beta1) * g;
                let vj = self.beta2 * v.data()[j] + (1.0 - self.beta2) * g * g;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + self.eps);
                value.data_mut()[j] -= update;
            }
        }
    }
}

/// Scales all gradients so the global L2 norm does not exceed `clip`.
fn clip_gradients(params: &mut ParameterSet, clip: f64) {
    let norm = params.grad_norm();
    if norm > clip {
        let scale = clip / norm;
        for i in 0..params.len() {
            let (_, _, grad) = params.entry_mut(i);
            grad.scale_assign(scale);
        }
    }
}

/// Trains the model on the given windows. Deterministic in
/// `cfg.seed`: the returned parameters and report are identical across
/// runs on one platform.
pub fn train(
    model: &Model,
    sched: &DiffusionSchedule,
    windows: &[Vec<Row>],
    cfg: &TrainConfig,
) -> Result<(ParameterSet, TrainReport)> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::Empty("training needs at least one window".into()));
    }
    let start = std::time::Instant::now();
    let mut params = model.init_params(cfg.seed);
    let mut adam = Adam::new(&params);
    let mut plateau = PlateauScheduler::new(cfg.learning_rate, cfg.patience, cfg.lr_decay);
    let mut report = TrainReport {
        epochs: Vec::with_capacity(cfg.epochs),
        epoch_seconds: Vec::with_capacity(cfg.epochs),
        wall_seconds: 0.0,
    };

    for epoch in 0..cfg.epochs {
        let epoch_start = std::time::Instant::now();
        let mut order: Vec<usize> = (0..windows.len()).collect();
        let mut shuffle_rng = derive(cfg.seed, &[purpose::TRAIN, epoch as u64, u64::MAX]);
        order.shuffle(&mut shuffle_rng);
        if let Some(cap) = cfg.windows_per_epoch {
            order.truncate(cap.max(1));
        }

        let (mut total, mut kl, mut recon) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            params.zero_grads();
            // Windows in a batch evaluate in parallel; the reduction
            // below runs in batch order, so results are order-fixed.
            let results: Vec<Result<(Vec<Tensor>, f64, f64, f64)>> = batch
                .par_iter()
                .map(|&wi| {
                    let mut rng =
                        derive(cfg.seed, &[purpose::TRAIN, epoch as u64, wi as u64]);
                    let draws = draw_window(
                        &mut rng,
                        windows[wi].len(),
                        model.cfg.data_dim,
                        model.cfg.latent_width,
                        sched.n_steps(),
                    );
                    let tape = Tape::new();
                    let bound = params.bind(&tape);
                    let (t_loss, k_loss, r_loss) =
                        window_loss(model, &tape, &bound, sched, &windows[wi], &draws)?;
                    let (tv, kv, rv) = (t_loss.item(), k_loss.item(), r_loss.item());
                    if !tv.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "loss at epoch {epoch}, window {wi}"
                        )));
                    }
                    let grads = tape.backward(t_loss);
                    Ok((params.grads_of(&bound, &grads), tv, kv, rv))
                })
                .collect();
            for res in results {
                let (grad_vec, tv, kv, rv) = res?;
                params.add_grad_vec(&grad_vec);
                total += tv;
                kl += kv;
                recon += rv;
            }
            clip_gradients(&mut params, cfg.grad_clip);
            adam.step(&mut params, plateau.lr);
        }

        report.epochs.push(EpochRecord {
            epoch,
            total,
            kl,
            recon,
            lr: plateau.lr,
        });
        report.epoch_seconds.push(epoch_start.elapsed().as_secs_f64());
        plateau.observe(total);
        if !params.all_finite() {
            return Err(Error::NonFinite(format!(
                "parameters diverged after epoch {epoch}"
            )));
        }
    }
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_variant, ModelConfig};
    use crate::schedule::{build_schedule, ScheduleKind};

    fn toy_cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            data_dim: 2,
            hidden_width: 4,
            latent_width: 3,
            embed_width: 4,
            attention_heads: 1,
            denoiser_hidden: 5,
            encoder_hidden: 4,
        }
    }

    fn toy_window(len: usize) -> Vec<Row> {
        (0..len)
            .map(|t| vec![(t as f64 * 0.7).sin(), (t as f64 * 0.3).cos()])
            .collect()
    }

    #[test]
    fn total_is_kl_plus_recon_and_kl_nonnegative() {
        let sched = build_schedule(5, 1e-3, 0.2, ScheduleKind::Linear).unwrap();
        for variant in Variant::all() {
            let model = build_variant(&toy_cfg(variant)).unwrap();
            let params = model.init_params(3);
            let mut rng = derive(3, &[purpose::TRAIN, 0, 0]);
            let (total, kl, recon) =
                dual_loss(&model, &params, &sched, &toy_window(4), &mut rng).unwrap();
            assert!(
                (total - (kl + recon)).abs() <= 1e-12 * total.abs().max(1.0),
                "{variant:?}: {total} vs {kl} + {recon}"
            );
            assert!(kl >= 0.0, "{variant:?} kl = {kl}");
            if variant == Variant::Lstm {
                assert_eq!(kl, 0.0);
            }
        }
    }

    #[test]
    fn zero_length_window_gives_zeros() {
        let sched = build_schedule(5, 1e-3, 0.2, ScheduleKind::Linear).unwrap();
        let model = build_variant(&toy_cfg(Variant::Stochdiff)).unwrap();
        let params = model.init_params(3);
        let mut rng = derive(3, &[purpose::TRAIN, 0, 0]);
        let out = dual_loss(&model, &params, &sched, &[], &mut rng).unwrap();
        assert_eq!(out, (0.0, 0.0, 0.0));
    }

    #[test]
    fn kl_collapses_when_posterior_equals_prior() {
        // zero encoder weights: both prior and posterior emit (0, ln 2)
        // regardless of input, so the KL term vanishes.
        let sched = build_schedule(5, 1e-3, 0.2, ScheduleKind::Linear).unwrap();
        let model = build_variant(&toy_cfg(Variant::Stochdiff)).unwrap();
        let mut params = model.init_params(3);
        for name in params.names().to_vec() {
            if name.starts_with("prior.") || name.starts_with("posterior.") {
                params.get_mut(&name).unwrap().fill(0.0);
            }
        }
        let mut rng = derive(3, &[purpose::TRAIN, 0, 0]);
        let (total, kl, recon) =
            dual_loss(&model, &params, &sched, &toy_window(5), &mut rng).unwrap();
        assert!(kl.abs() < 1e-12, "kl = {kl}");
        assert!((total - recon).abs() < 1e-12);
    }

    #[test]
    fn dual_loss_is_seed_deterministic() {
        let sched = build_schedule(5, 1e-3, 0.2, ScheduleKind::Linear).unwrap();
        let model = build_variant(&toy_cfg(Variant::Stochdiff)).unwrap();
        let params = model.init_params(3);
        let a = dual_loss(
            &model,
            &params,
            &sched,
            &toy_window(4),
            &mut derive(9, &[purpose::TRAIN, 1, 2]),
        )
        .unwrap();
        let b = dual_loss(
            &model,
            &params,
            &sched,
            &toy_window(4),
            &mut derive(9, &[purpose::TRAIN, 1, 2]),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn plateau_halves_exactly_once_per_stall() {
        let mut p = PlateauScheduler::new(1.0, 10, 0.5);
        assert!(!p.observe(5.0)); // sets best
        let mut halvings = 0;
        for _ in 0..10 {
            if p.observe(5.0) {
                halvings += 1;
            }
        }
        assert_eq!(halvings, 1, "10 stagnant epochs decay exactly once");
        assert_eq!(p.lr, 0.5);
        // improvement resets the stall counter
        assert!(!p.observe(4.0));
        for _ in 0..9 {
            assert!(!p.observe(4.0));
        }
        assert!(p.observe(4.0));
        assert_eq!(p.lr, 0.25);
    }

    #[test]
    fn tiny_improvements_do_not_reset_plateau() {
        let mut p = PlateauScheduler::new(1.0, 3, 0.5);
        p.observe(1.0);
        // improvements below the 1e-6 relative threshold count as stalls
        p.observe(1.0 - 1e-9);
        p.observe(1.0 - 2e-9);
        assert!(p.observe(1.0 - 3e-9));
        assert_eq!(p.lr, 0.5);
    }

    #[test]
    fn training_is_reproducible_and_lr_non_increasing() {
        let sched = build_schedule(4, 1e-3, 0.2, ScheduleKind::Linear).unwrap();
        let model = build_variant(&toy_cfg(Variant::Stochdiff)).unwrap();
        let windows: Vec<Vec<Row>> = (0..3).map(|_| toy_window(4)).collect();
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 2,
            seed: 11,
            patience: 2,
            ..TrainConfig::default()
        };
        let (pa, ra) = train(&model, &sched, &windows, &cfg).unwrap();
        let (pb, rb) = train(&model, &sched, &windows, &cfg).unwrap();
        assert_eq!(ra.epochs, rb.epochs);
        for (name, t) in pa.iter() {
            assert_eq!(pb.get(name).unwrap(), t, "parameter {name} differs");
        }
        for w in ra.epochs.windows(2) {
            assert!(w[1].lr <= w[0].lr, "lr must be non-increasing");
        }
    }

    #[test]
    fn lstm_variant_learns_noiseless_sine() {
        let sched = build_schedule(4, 1e-3, 0.2, ScheduleKind::Linear).unwrap();
        let mut cfg = toy_cfg(Variant::Lstm);
        cfg.data_dim = 1;
        let model = build_variant(&cfg).unwrap();
        let series: Vec<Row> = (0..80)
            .map(|t| vec![(t as f64 * 0.4).sin()])
            .collect();
        let windows: Vec<Vec<Row>> = series.windows(16).step_by(8).map(<[Row]>::to_vec).collect();
        let tcfg = TrainConfig {
            epochs: 200,
            batch_size: 4,
            seed: 5,
            learning_rate: 5e-3,
            ..TrainConfig::default()
        };
        let (_, report) = train(&model, &sched, &windows, &tcfg).unwrap();
        let first = report.epochs.first().unwrap().recon;
        let last = report.epochs.last().unwrap().recon;
        assert!(
            last < 0.1 * first,
            "recon should drop by 10x: {first} -> {last}"
        );
    }
}
