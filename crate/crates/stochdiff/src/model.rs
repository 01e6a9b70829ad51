//! Variant assembly: the shared recurrence plus the pieces that differ
//! across the ablation ladder.
//!
//! - `lstm` — deterministic regressor: predict `x_t` from `h_{t-1}`,
//!   squared-error loss, no latent and no ensemble spread.
//! - `vlstm_standard_prior` — per-step VAE: posterior encoder with a
//!   fixed `N(0, I)` prior and a one-shot Gaussian decoder over `x_t`.
//! - `vlstm_diffusion` — the diffusion decoder conditioned on the
//!   latent, still with the fixed `N(0, I)` prior.
//! - `stochdiff` — the full model: learned prior from `h_{t-1}`,
//!   diffusion decoder, dual KL + reconstruction objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::latent::GaussianEncoder;
use crate::nn::{Activation, Fcn, LstmCell};
use crate::params::ParameterSet;
use crate::rng::{derive, purpose};
use crate::schedule::GaussianDiag;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Lstm,
    VlstmStandardPrior,
    VlstmDiffusion,
    Stochdiff,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(Variant::Lstm),
            "vlstm_standard_prior" => Ok(Variant::VlstmStandardPrior),
            "vlstm_diffusion" => Ok(Variant::VlstmDiffusion),
            "stochdiff" => Ok(Variant::Stochdiff),
            other => Err(Error::UnknownVariant(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Lstm => "lstm",
            Variant::VlstmStandardPrior => "vlstm_standard_prior",
            Variant::VlstmDiffusion => "vlstm_diffusion",
            Variant::Stochdiff => "stochdiff",
        }
    }

    /// Whether forecasts are single-valued (no ensemble spread).
    pub fn is_deterministic(&self) -> bool {
        matches!(self, Variant::Lstm)
    }

    pub fn uses_diffusion(&self) -> bool {
        matches!(self, Variant::VlstmDiffusion | Variant::Stochdiff)
    }

    pub fn uses_latent(&self) -> bool {
        !matches!(self, Variant::Lstm)
    }

    /// Whether the prior over the latent is learned from the hidden state.
    pub fn learned_prior(&self) -> bool {
        matches!(self, Variant::Stochdiff)
    }

    pub fn all() -> [Variant; 4] {
        [
            Variant::Lstm,
            Variant::VlstmStandardPrior,
            Variant::VlstmDiffusion,
            Variant::Stochdiff,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub data_dim: usize,
    pub hidden_width: usize,
    pub latent_width: usize,
    pub embed_width: usize,
    pub attention_heads: usize,
    pub denoiser_hidden: usize,
    pub encoder_hidden: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("data_dim", self.data_dim),
            ("hidden_width", self.hidden_width),
            ("latent_width", self.latent_width),
            ("embed_width", self.embed_width),
            ("attention_heads", self.attention_heads),
            ("denoiser_hidden", self.denoiser_hidden),
            ("encoder_hidden", self.encoder_hidden),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.embed_width % self.attention_heads != 0 {
            return Err(Error::Config(format!(
                "embed_width {} must be divisible by attention_heads {}",
                self.embed_width, self.attention_heads
            )));
        }
        Ok(())
    }
}

/// Assembled components for one variant. Parameters live separately in a
/// [`ParameterSet`] so the same assembly serves training, forecasting
/// and checkpoint validation.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub lstm: LstmCell,
    pub prior: Option<GaussianEncoder>,
    pub posterior: Option<GaussianEncoder>,
    pub projector: Option<Fcn>,
    pub denoiser: Option<Denoiser>,
    pub decoder: Option<GaussianEncoder>,
    pub head: Option<Fcn>,
}

/// Builds the component assembly for the configured variant.
pub fn build_variant(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let d = cfg.data_dim;
    let latent = cfg.latent_width;
    let variant = cfg.variant;

    let lstm_input = if variant.uses_latent() { d + latent } else { d };
    let lstm = LstmCell::new("lstm", lstm_input, cfg.hidden_width);

    let prior = variant
        .learned_prior()
        .then(|| GaussianEncoder::new("prior", cfg.hidden_width, cfg.encoder_hidden, latent));
    let posterior = variant.uses_latent().then(|| {
        GaussianEncoder::new(
            "posterior",
            cfg.hidden_width + d,
            cfg.encoder_hidden,
            latent,
        )
    });
    let projector = variant.uses_latent().then(|| {
        Fcn::new(
            "projector",
            vec![latent, latent],
            Activation::Identity,
            Activation::Identity,
        )
    });
    let denoiser = variant.uses_diffusion().then(|| {
        Denoiser::new(
            "denoiser",
            DenoiserConfig {
                data_dim: d,
                latent_width: latent,
                embed_width: cfg.embed_width,
                attention_heads: cfg.attention_heads,
                hidden_width: cfg.denoiser_hidden,
            },
        )
    });
    let decoder = matches!(variant, Variant::VlstmStandardPrior)
        .then(|| GaussianEncoder::new("decoder", latent, cfg.encoder_hidden, d));
    let head = matches!(variant, Variant::Lstm).then(|| {
        Fcn::new(
            "head",
            vec![cfg.hidden_width, cfg.encoder_hidden, d],
            Activation::Tanh,
            Activation::Identity,
        )
    });

    Ok(Model {
        cfg: *cfg,
        lstm,
        prior,
        posterior,
        projector,
        denoiser,
        decoder,
        head,
    })
}

impl Model {
    /// Fresh parameters for this assembly, deterministic in `seed`.
    pub fn init_params(&self, seed: u64) -> ParameterSet {
        let mut rng = derive(seed, &[purpose::INIT]);
        let mut ps = ParameterSet::new();
        self.init_into(&mut ps, &mut rng);
        ps
    }

    fn init_into(&self, ps: &mut ParameterSet, rng: &mut impl Rng) {
        self.lstm.init(ps, rng);
        if let Some(e) = &self.prior {
            e.init(ps, rng);
        }
        if let Some(e) = &self.posterior {
            e.init(ps, rng);
        }
        if let Some(f) = &self.projector {
            f.init(ps, rng);
        }
        if let Some(dn) = &self.denoiser {
            dn.init(ps, rng);
        }
        if let Some(e) = &self.decoder {
            e.init(ps, rng);
        }
        if let Some(f) = &self.head {
            f.init(ps, rng);
        }
    }

    /// Verifies that `params` carries exactly this assembly's layout.
    pub fn validate_params(&self, params: &ParameterSet) -> Result<()> {
        let expected = self.init_params(0);
        params.validate_layout(&expected)
    }

    /// Prior over the latent given the current hidden state: learned for
    /// the full model, standard normal for the fixed-prior variants.
    pub fn prior_gaussian(&self, params: &ParameterSet, h: &[f64]) -> Result<GaussianDiag> {
        match &self.prior {
            Some(encoder) => encoder.gaussian(params, h),
            None => Ok(GaussianDiag::standard(self.cfg.latent_width)),
        }
    }
}
