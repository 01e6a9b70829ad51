//! Declarative run configuration: one TOML document with strict keys
//! covering data, windows, schedule, model widths, training, forecast,
//! GMM, metrics, monitor and ablation settings. Unknown keys are
//! rejected at parse time; every CLI run writes the fully resolved
//! document beside its outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Impute, SynthSpec, WindowSpec};
use crate::error::{Error, Result};
use crate::metrics::Normalizer;
use crate::model::{ModelConfig, Variant};
use crate::monitor::PointMode;
use crate::point_estimate::GmmConfig;
use crate::schedule::{DiffusionSchedule, ScheduleKind};
use crate::training::TrainConfig;

pub const DATA_DIR_ENV: &str = "STOCHDIFF_DATA_DIR";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub window: WindowSpec,
    pub schedule: ScheduleSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub forecast: ForecastSection,
    pub gmm: GmmSection,
    pub metrics: MetricsSection,
    pub monitor: MonitorSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSection::default(),
            window: WindowSpec {
                window: 50,
                horizon: 10,
                stride: 1,
            },
            schedule: ScheduleSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            forecast: ForecastSection::default(),
            gmm: GmmSection::default(),
            metrics: MetricsSection::default(),
            monitor: MonitorSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// CSV file (single series) or directory of CSVs (one per subject).
    pub path: Option<PathBuf>,
    /// Synthetic recipe used when no path is given.
    pub synth: Option<SynthSpec>,
    pub normalize: bool,
    pub split_fraction: f64,
    pub split_mode: SplitMode,
    pub impute: Impute,
    pub timestamp_column: Option<String>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            synth: None,
            normalize: true,
            split_fraction: 0.7,
            split_mode: SplitMode::Temporal,
            impute: Impute::Reject,
            timestamp_column: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    #[default]
    Temporal,
    Subject,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub n_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            n_steps: 100,
            beta_min: 1e-4,
            beta_max: 0.1,
            kind: ScheduleKind::Linear,
        }
    }
}

impl ScheduleSection {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        crate::schedule::build_schedule(self.n_steps, self.beta_min, self.beta_max, self.kind)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: Variant,
    pub hidden_width: usize,
    pub latent_width: usize,
    pub embed_width: usize,
    pub attention_heads: usize,
    pub denoiser_hidden: usize,
    pub encoder_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            variant: Variant::Stochdiff,
            hidden_width: 16,
            latent_width: 8,
            embed_width: 16,
            attention_heads: 1,
            denoiser_hidden: 32,
            encoder_hidden: 16,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, data_dim: usize) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            data_dim,
            hidden_width: self.hidden_width,
            latent_width: self.latent_width,
            embed_width: self.embed_width,
            attention_heads: self.attention_heads,
            denoiser_hidden: self.denoiser_hidden,
            encoder_hidden: self.encoder_hidden,
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub lr_decay: f64,
    pub grad_clip: f64,
    pub windows_per_epoch: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            learning_rate: d.learning_rate,
            epochs: d.epochs,
            batch_size: d.batch_size,
            patience: d.patience,
            lr_decay: d.lr_decay,
            grad_clip: d.grad_clip,
            windows_per_epoch: d.windows_per_epoch,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            patience: self.patience,
            lr_decay: self.lr_decay,
            seed,
            grad_clip: self.grad_clip,
            windows_per_epoch: self.windows_per_epoch,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastSection {
    pub n_samples: usize,
    pub levels: Vec<f64>,
    /// Forecast origins used when evaluating on a test split.
    pub eval_windows: usize,
}

impl Default for ForecastSection {
    fn default() -> Self {
        Self {
            n_samples: 100,
            levels: vec![0.05, 0.5, 0.95],
            eval_windows: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmSection {
    pub k_candidates: Vec<usize>,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for GmmSection {
    fn default() -> Self {
        let d = GmmConfig::default();
        Self {
            k_candidates: d.k_candidates,
            max_iter: d.max_iter,
            tol: d.tol,
        }
    }
}

impl GmmSection {
    pub fn to_gmm_config(&self, seed: u64) -> GmmConfig {
        GmmConfig {
            k_candidates: self.k_candidates.clone(),
            max_iter: self.max_iter,
            tol: self.tol,
            seed,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub normalizer: Normalizer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonitorSection {
    pub threshold: f64,
    pub position_stride: usize,
    pub n_samples: usize,
    pub point_mode: PointMode,
}

impl Default for MonitorSection {
    fn default() -> Self {
        Self {
            threshold: 0.30,
            position_stride: 1,
            n_samples: 40,
            point_mode: PointMode::Gmm,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            variants: Variant::all().to_vec(),
            seeds: vec![0, 1, 2],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    /// Strict parse: unknown keys are rejected with the offending key named.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        if !(self.data.split_fraction > 0.0 && self.data.split_fraction < 1.0) {
            return Err(Error::Config("data.split_fraction must be in (0,1)".into()));
        }
        if self.forecast.n_samples == 0 {
            return Err(Error::Config("forecast.n_samples must be >= 1".into()));
        }
        if self
            .forecast
            .levels
            .iter()
            .any(|l| !(0.0..=1.0).contains(l))
        {
            return Err(Error::Config("forecast.levels must lie in [0,1]".into()));
        }
        if self.forecast.eval_windows == 0 {
            return Err(Error::Config("forecast.eval_windows must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.monitor.threshold) {
            return Err(Error::Config("monitor.threshold must be in [0,1)".into()));
        }
        self.schedule.build().map(|_| ())?;
        self.train.to_train_config(0).validate()?;
        if self.data.path.is_none() && self.data.synth.is_none() {
            return Err(Error::Config(
                "data needs either a path or a synth recipe".into(),
            ));
        }
        Ok(())
    }

    /// Resolves the data path against `STOCHDIFF_DATA_DIR` when relative.
    pub fn resolved_data_path(&self) -> Option<PathBuf> {
        self.data.path.as_ref().map(|p| {
            if p.is_relative() {
                if let Ok(base) = std::env::var(DATA_DIR_ENV) {
                    return Path::new(&base).join(p);
                }
            }
            p.clone()
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
