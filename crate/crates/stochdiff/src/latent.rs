//! Per-step latent recurrence: learned Gaussian prior over the latent,
//! approximate posterior, reparameterized sampling with an FCN
//! projection, the closed-form diagonal KL, and the LSTM recurrence
//! update on `concat(x_t, z_t)`.
//!
//! During training the latent fed to both the denoiser and the
//! recurrence is the posterior sample; the prior is trained through the
//! KL term only. During forecasting the latent comes from the prior.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, Fcn, LstmCell, LstmState};
use crate::params::{BoundParams, ParameterSet};
use crate::schedule::GaussianDiag;
use crate::tape::{concat_cols, Tape, Tx};
use crate::tensor::Tensor;

/// Lower bound applied to every encoder variance head.
pub const VAR_FLOOR: f64 = 1e-6;

/// Where a latent sample was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentSource {
    Prior,
    Posterior,
}

#[derive(Debug, Clone)]
pub struct LatentSample {
    pub z: Vec<f64>,
    pub source: LatentSource,
}

/// Rolling recurrence state plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrenceContext {
    pub state: LstmState,
    pub step_index: usize,
}

impl RecurrenceContext {
    /// Fresh context with `h_0 = 0`.
    pub fn initial(hidden: usize) -> Self {
        Self {
            state: LstmState::zeros(hidden),
            step_index: 0,
        }
    }
}

/// Two-layer Gaussian encoder: a tanh trunk followed by a mean head and
/// a softplus variance head (floored at [`VAR_FLOOR`]).
#[derive(Debug, Clone)]
pub struct GaussianEncoder {
    trunk: Fcn,
    mean_head: Fcn,
    var_head: Fcn,
    pub input_width: usize,
    pub latent_width: usize,
}

impl GaussianEncoder {
    pub fn new(name: &str, input_width: usize, hidden_width: usize, latent_width: usize) -> Self {
        Self {
            trunk: Fcn::new(
                format!("{name}.trunk"),
                vec![input_width, hidden_width],
                Activation::Tanh,
                Activation::Tanh,
            ),
            mean_head: Fcn::new(
                format!("{name}.mean"),
                vec![hidden_width, latent_width],
                Activation::Identity,
                Activation::Identity,
            ),
            var_head: Fcn::new(
                format!("{name}.var"),
                vec![hidden_width, latent_width],
                Activation::Identity,
                Activation::Softplus,
            ),
            input_width,
            latent_width,
        }
    }

    pub fn init(&self, ps: &mut ParameterSet, rng: &mut impl Rng) {
        self.trunk.init(ps, rng);
        self.mean_head.init(ps, rng);
        self.var_head.init(ps, rng);
    }

    /// Tape forward pass; `input` is 1×input_width. Returns (mean, var).
    pub fn forward<'t>(&self, p: &BoundParams<'t>, input: Tx<'t>) -> (Tx<'t>, Tx<'t>) {
        let hidden = self.trunk.apply(p, input);
        let mean = self.mean_head.apply(p, hidden);
        let var = self.var_head.apply(p, hidden).clamp_min(VAR_FLOOR);
        (mean, var)
    }

    /// Plain-value evaluation into a [`GaussianDiag`].
    pub fn gaussian(&self, params: &ParameterSet, input: &[f64]) -> Result<GaussianDiag> {
        if input.len() != self.input_width {
            return Err(Error::ShapeMismatch(format!(
                "encoder input len {} vs configured {}",
                input.len(),
                self.input_width
            )));
        }
        let tape = Tape::new();
        let p = params.bind(&tape);
        let x = tape.constant(Tensor::row(input));
        let (mean, var) = self.forward(&p, x);
        GaussianDiag::new(mean.value().data().to_vec(), var.value().data().to_vec())
    }
}

/// Prior parameters from the hidden state alone (never sees `x_t`).
pub fn prior_params(
    encoder: &GaussianEncoder,
    params: &ParameterSet,
    ctx: &RecurrenceContext,
) -> Result<GaussianDiag> {
    encoder.gaussian(params, &ctx.state.h)
}

/// Posterior parameters from the hidden state and the current observation.
pub fn posterior_params(
    encoder: &GaussianEncoder,
    params: &ParameterSet,
    ctx: &RecurrenceContext,
    x_t: &[f64],
) -> Result<GaussianDiag> {
    let mut input = Vec::with_capacity(ctx.state.h.len() + x_t.len());
    input.extend_from_slice(&ctx.state.h);
    input.extend_from_slice(x_t);
    encoder.gaussian(params, &input)
}

/// Reparameterized draw on the tape: `z = proj(mean + sqrt(var) ⊙ eps)`
/// with `eps` a pre-drawn constant, so gradients flow pathwise through
/// mean and variance.
pub fn reparam<'t>(
    projector: &Fcn,
    tape: &'t Tape,
    p: &BoundParams<'t>,
    mean: Tx<'t>,
    var: Tx<'t>,
    eps: &[f64],
) -> Tx<'t> {
    let noise = tape.constant(Tensor::row(eps));
    let sample = mean.add(var.sqrt().mul(noise));
    projector.apply(p, sample)
}

/// Plain-value reparameterized projection of a Gaussian draw.
pub fn reparam_project(
    projector: &Fcn,
    params: &ParameterSet,
    g: &GaussianDiag,
    eps: &[f64],
    source: LatentSource,
) -> Result<LatentSample> {
    if eps.len() != g.dim() {
        return Err(Error::ShapeMismatch(format!(
            "eps len {} vs latent width {}",
            eps.len(),
            g.dim()
        )));
    }
    let tape = Tape::new();
    let p = params.bind(&tape);
    let mean = tape.constant(Tensor::row(&g.mean));
    let var = tape.constant(Tensor::row(&g.var));
    let z = reparam(projector, &tape, &p, mean, var, eps);
    Ok(LatentSample {
        z: z.value().data().to_vec(),
        source,
    })
}

/// Closed-form KL divergence between diagonal Gaussians,
/// `KL(q || p) = 1/2 Σ [ ln(p/q) + (q + (mq - mp)²)/p − 1 ]`.
pub fn kl_diag(q: &GaussianDiag, p: &GaussianDiag) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::ShapeMismatch(format!(
            "kl widths {} vs {}",
            q.dim(),
            p.dim()
        )));
    }
    if q.var.iter().chain(&p.var).any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidRange("kl needs positive variances".into()));
    }
    let mut total = 0.0;
    for i in 0..q.dim() {
        let (qv, pv) = (q.var[i], p.var[i]);
        let dm = q.mean[i] - p.mean[i];
        total += 0.5 * ((pv / qv).ln() + (qv + dm * dm) / pv - 1.0);
    }
    Ok(total.max(0.0))
}

/// KL term on the tape; same closed form as [`kl_diag`].
pub fn kl_term<'t>(q_mean: Tx<'t>, q_var: Tx<'t>, p_mean: Tx<'t>, p_var: Tx<'t>) -> Tx<'t> {
    let dm = q_mean.sub(p_mean);
    let ratio = p_var.div(q_var).ln();
    let quad = q_var.add(dm.mul(dm)).div(p_var);
    ratio.add(quad).add_scalar(-1.0).sum().scale(0.5)
}

/// One recurrence update `h_t = f(concat(x_t, z_t), h_{t-1})`; the step
/// counter advances by exactly one.
pub fn recurrence_update(
    cell: &LstmCell,
    params: &ParameterSet,
    ctx: &RecurrenceContext,
    x_t: &[f64],
    z_t: &LatentSample,
) -> Result<RecurrenceContext> {
    let mut input = Vec::with_capacity(x_t.len() + z_t.z.len());
    input.extend_from_slice(x_t);
    input.extend_from_slice(&z_t.z);
    let state = crate::nn::lstm_step(cell, params, &input, &ctx.state)?;
    Ok(RecurrenceContext {
        state,
        step_index: ctx.step_index + 1,
    })
}

/// Tape version of the recurrence input concatenation.
pub fn recurrence_step<'t>(
    cell: &LstmCell,
    tape: &'t Tape,
    p: &BoundParams<'t>,
    x_t: Tx<'t>,
    z_t: Tx<'t>,
    h: Tx<'t>,
    c: Tx<'t>,
) -> (Tx<'t>, Tx<'t>) {
    let input = concat_cols(tape, &[x_t, z_t]);
    cell.step(p, input, h, c)
}
