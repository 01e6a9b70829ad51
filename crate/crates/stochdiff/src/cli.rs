//! The `stochdiff` command line: train, forecast, evaluate, ablate,
//! synth and simulate subcommands wired over the library modules.
//!
//! Every run writes its fully resolved configuration beside the outputs
//! and is byte-for-byte reproducible under a fixed `(config, seed)`;
//! progress and timing go to stderr so output files stay deterministic.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SplitMode};
use crate::data::{
    load_csv, sliding_windows, split_subjects, split_temporal, synth_generate, write_csv,
    LoadConfig, NormStats, TimeSeries, WindowSpec,
};
use crate::error::{Error, Result};
use crate::forecasting::{
    condition_on_history, forecast, persistence_forecast, quantile_bands, ForecastEnsemble,
};
use crate::metrics::{nrmse, MetricReport};
use crate::model::{build_variant, Model, Variant};
use crate::monitor::{simulate_stream, Forecaster, StreamModel};
use crate::params::{checkpoint_load, checkpoint_save, ParameterSet};
use crate::point_estimate::pointwise_forecast;
use crate::schedule::DiffusionSchedule;
use crate::training::{train, Row};

#[derive(Parser)]
#[command(
    name = "stochdiff",
    about = "Diffusion-based probabilistic time-series forecasting with a learned latent prior"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model variant on the configured dataset.
    Train(CommonArgs),
    /// Forecast from a checkpoint over the tail of a series.
    Forecast(ForecastArgs),
    /// Score forecast files against a truth series.
    Evaluate(EvaluateArgs),
    /// Train and evaluate every configured variant.
    Ablate(CommonArgs),
    /// Generate a synthetic dataset CSV.
    Synth(CommonArgs),
    /// Replay a series through the streaming drop monitor.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ForecastArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Directory holding checkpoint.bin and norm.json from `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Series CSV; the model conditions on its trailing window.
    #[arg(long)]
    series: PathBuf,
    /// Overrides forecast.n_samples.
    #[arg(long)]
    samples: Option<usize>,
    /// Also emit an SVG plot of bands and point forecast.
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Directory holding ensemble.csv and bands.csv from `forecast`.
    #[arg(long)]
    forecast_dir: PathBuf,
    /// Truth CSV aligned with the forecast horizon.
    #[arg(long)]
    truth: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Directory holding checkpoint.bin and norm.json (omit with --oracle).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Amplitude series CSV (univariate).
    #[arg(long)]
    series: PathBuf,
    /// Replay with the truth-reading oracle instead of a model.
    #[arg(long)]
    oracle: bool,
    /// Overrides monitor.threshold.
    #[arg(long)]
    threshold: Option<f64>,
}

/// Entry point; returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(args) => run_with(&args, cmd_train),
        Command::Forecast(args) => {
            run_with(&args.common, |cfg, seed, out| cmd_forecast(cfg, seed, out, &args))
        }
        Command::Evaluate(args) => {
            run_with(&args.common, |cfg, seed, out| cmd_evaluate(cfg, seed, out, &args))
        }
        Command::Ablate(args) => run_with(&args, cmd_ablate),
        Command::Synth(args) => run_with(&args, cmd_synth),
        Command::Simulate(args) => {
            run_with(&args.common, |cfg, seed, out| cmd_simulate(cfg, seed, out, &args))
        }
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            let record = serde_json::json!({ "error": e.to_string() });
            eprintln!("{record}");
            1
        }
    }
}

fn run_with(
    args: &CommonArgs,
    body: impl FnOnce(&RunConfig, u64, &Path) -> Result<()>,
) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let seed = cfg.seed;
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| Error::io(args.out_dir.display().to_string(), e))?;
    write_text(&args.out_dir.join("resolved_config.toml"), &cfg.to_toml())?;
    body(&cfg, seed, &args.out_dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------
// shared experiment plumbing (reused by the acceptance suite)
// ---------------------------------------------------------------------

/// Normalized train/test material plus the fitted statistics.
pub struct Prepared {
    pub train: Vec<TimeSeries>,
    pub test: Vec<TimeSeries>,
    pub raw_test: Vec<TimeSeries>,
    pub stats: NormStats,
    pub data_dim: usize,
}

/// Loads the configured data source: a synthetic recipe, a single CSV,
/// or a directory of per-subject CSVs (sorted by file name).
pub fn load_series(cfg: &RunConfig, seed: u64) -> Result<Vec<TimeSeries>> {
    if let Some(path) = cfg.resolved_data_path() {
        let load_cfg = LoadConfig {
            impute: cfg.data.impute,
            timestamp_column: cfg.data.timestamp_column.clone(),
        };
        if path.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(&path)
                .map_err(|e| Error::io(path.display().to_string(), e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::Empty(format!(
                    "no CSV files under {}",
                    path.display()
                )));
            }
            return files.iter().map(|f| load_csv(f, &load_cfg)).collect();
        }
        return Ok(vec![load_csv(&path, &load_cfg)?]);
    }
    let spec = cfg
        .data
        .synth
        .as_ref()
        .ok_or_else(|| Error::Config("no data source configured".into()))?;
    Ok(vec![synth_generate(spec, seed)?])
}

/// Splits and normalizes the configured data.
pub fn prepare(cfg: &RunConfig, seed: u64) -> Result<Prepared> {
    let series = load_series(cfg, seed)?;
    let (raw_train, raw_test) = match cfg.data.split_mode {
        SplitMode::Temporal => {
            if series.len() != 1 {
                return Err(Error::Config(
                    "temporal split expects a single series; use split_mode = \"subject\"".into(),
                ));
            }
            let (tr, te) = split_temporal(&series[0], cfg.data.split_fraction)?;
            (vec![tr], vec![te])
        }
        SplitMode::Subject => split_subjects(series, cfg.data.split_fraction, seed)?,
    };
    let data_dim = raw_train[0].dim();
    if raw_train.iter().chain(&raw_test).any(|s| s.dim() != data_dim) {
        return Err(Error::ShapeMismatch(
            "subjects disagree on dimension count".into(),
        ));
    }

    if cfg.data.normalize {
        let merged = TimeSeries::from_values(
            raw_train
                .iter()
                .flat_map(|s| s.values.iter().cloned())
                .collect(),
        );
        let refs: Vec<&TimeSeries> = raw_train.iter().chain(raw_test.iter()).collect();
        let (_, normed, stats) = crate::data::zscore_fit_apply(&merged, &refs)?;
        let (train, test) = normed.split_at(raw_train.len());
        Ok(Prepared {
            train: train.to_vec(),
            test: test.to_vec(),
            raw_test,
            stats,
            data_dim,
        })
    } else {
        Ok(Prepared {
            train: raw_train.clone(),
            test: raw_test.clone(),
            raw_test,
            stats: NormStats::identity(data_dim),
            data_dim,
        })
    }
}

/// Full window+horizon spans from every training series, used as the
/// step-wise modelling sequences.
pub fn training_windows(prepared: &Prepared, spec: &WindowSpec) -> Result<Vec<Vec<Row>>> {
    let mut out = Vec::new();
    for series in &prepared.train {
        for pair in sliding_windows(series, spec)? {
            out.push(pair.full());
        }
    }
    Ok(out)
}

/// Evaluation of one trained variant over evenly spaced forecast
/// origins on the test side, in the raw data domain.
#[derive(Debug, Clone, Serialize)]
pub struct EvalOutcome {
    pub nrmse: f64,
    pub crps_sum: f64,
    pub persistence_nrmse: f64,
    pub origins: usize,
}

pub fn evaluate_on_test(
    model: &Model,
    params: &ParameterSet,
    sched: &DiffusionSchedule,
    prepared: &Prepared,
    cfg: &RunConfig,
    seed: u64,
) -> Result<EvalOutcome> {
    let wspec = &cfg.window;
    let n_samples = if model.cfg.variant.is_deterministic() {
        1
    } else {
        cfg.forecast.n_samples
    };
    // pooled over all origins: one NRMSE over every (origin, step, dim)
    // cell, and CRPS averaged over every (origin, step)
    let mut all_point: Vec<Row> = Vec::new();
    let mut all_truth: Vec<Row> = Vec::new();
    let mut all_persist: Vec<Row> = Vec::new();
    let mut crps_steps: Vec<f64> = Vec::new();
    let mut origins = 0usize;

    for (si, (norm_series, raw_series)) in
        prepared.test.iter().zip(&prepared.raw_test).enumerate()
    {
        if norm_series.len() < wspec.span() {
            continue;
        }
        let max_start = norm_series.len() - wspec.span();
        let want = cfg.forecast.eval_windows.max(1);
        let mut starts: Vec<usize> = if want == 1 || max_start == 0 {
            vec![0]
        } else {
            (0..want)
                .map(|i| (i * max_start) / (want - 1))
                .collect()
        };
        starts.dedup();

        for start in starts {
            let observed = &norm_series.values[start..start + wspec.window];
            let truth = &raw_series.values[start + wspec.window..start + wspec.span()];
            let origin_seed = seed
                .wrapping_add((si as u64) << 32)
                .wrapping_add(start as u64);
            let ctx = condition_on_history(model, params, observed, origin_seed)?;
            let ens = forecast(model, params, sched, &ctx, wspec.horizon, n_samples, origin_seed)?;
            let raw_ens = ForecastEnsemble {
                samples: ens
                    .samples
                    .iter()
                    .map(|s| s.iter().map(|r| prepared.stats.invert_row(r)).collect())
                    .collect(),
                t0: ens.t0,
                seed: ens.seed,
            };
            let point: Vec<Row> = if model.cfg.variant.is_deterministic() {
                raw_ens.samples[0].clone()
            } else {
                pointwise_forecast(&raw_ens, &cfg.gmm.to_gmm_config(origin_seed))?
            };
            all_point.extend_from_slice(&point);
            all_truth.extend_from_slice(truth);
            crps_steps.extend(crate::metrics::crps_sum_per_step(&raw_ens, truth)?);
            let last_raw = &raw_series.values[start + wspec.window - 1];
            all_persist.extend(persistence_forecast(last_raw, wspec.horizon));
            origins += 1;
        }
    }
    if origins == 0 {
        return Err(Error::Degenerate(
            "test split is too short for a single forecast origin".into(),
        ));
    }
    Ok(EvalOutcome {
        nrmse: nrmse(&all_point, &all_truth, cfg.metrics.normalizer)?,
        crps_sum: crps_steps.iter().sum::<f64>() / crps_steps.len() as f64,
        persistence_nrmse: nrmse(&all_persist, &all_truth, cfg.metrics.normalizer)?,
        origins,
    })
}

// ---------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------

fn cmd_train(cfg: &RunConfig, seed: u64, out_dir: &Path) -> Result<()> {
    let started = std::time::Instant::now();
    let prepared = prepare(cfg, seed)?;
    let windows = training_windows(&prepared, &cfg.window)?;
    let model = build_variant(&cfg.model.to_model_config(prepared.data_dim))?;
    let sched = cfg.schedule.build()?;
    let (params, report) = train(&model, &sched, &windows, &cfg.train.to_train_config(seed))?;

    checkpoint_save(&params, &out_dir.join("checkpoint.bin"))?;
    write_text(
        &out_dir.join("norm.json"),
        &serde_json::to_string_pretty(&prepared.stats).unwrap(),
    )?;
    let mut lines = String::new();
    for record in &report.epochs {
        lines.push_str(&serde_json::to_string(record).unwrap());
        lines.push('\n');
    }
    write_text(&out_dir.join("train_report.jsonl"), &lines)?;
    let last = report.epochs.last().unwrap();
    eprintln!(
        "trained {} for {} epochs in {:.1}s (final total loss {:.6})",
        model.cfg.variant.name(),
        report.epochs.len(),
        started.elapsed().as_secs_f64(),
        last.total
    );
    Ok(())
}

struct LoadedModel {
    model: Model,
    params: ParameterSet,
    stats: NormStats,
    sched: DiffusionSchedule,
}

fn load_checkpoint_dir(cfg: &RunConfig, dir: &Path, data_dim: usize) -> Result<LoadedModel> {
    let model = build_variant(&cfg.model.to_model_config(data_dim))?;
    let params = checkpoint_load(&dir.join("checkpoint.bin"))?;
    model.validate_params(&params)?;
    let stats_path = dir.join("norm.json");
    let stats: NormStats = if stats_path.exists() {
        serde_json::from_str(
            &std::fs::read_to_string(&stats_path)
                .map_err(|e| Error::io(stats_path.display().to_string(), e))?,
        )
        .map_err(|e| Error::Config(format!("norm.json: {e}")))?
    } else {
        NormStats::identity(data_dim)
    };
    if stats.mean.len() != data_dim {
        return Err(Error::ShapeMismatch(format!(
            "norm stats cover {} dims, data has {data_dim}",
            stats.mean.len()
        )));
    }
    Ok(LoadedModel {
        model,
        params,
        stats,
        sched: cfg.schedule.build()?,
    })
}

fn cmd_forecast(cfg: &RunConfig, seed: u64, out_dir: &Path, args: &ForecastArgs) -> Result<()> {
    let load_cfg = LoadConfig {
        impute: cfg.data.impute,
        timestamp_column: cfg.data.timestamp_column.clone(),
    };
    let series = load_csv(&args.series, &load_cfg)?;
    let lm = load_checkpoint_dir(cfg, &args.checkpoint, series.dim())?;
    let wspec = &cfg.window;
    if series.len() < wspec.window {
        return Err(Error::Degenerate(format!(
            "series of length {} is shorter than the window {}",
            series.len(),
            wspec.window
        )));
    }
    let n_samples = args.samples.unwrap_or(cfg.forecast.n_samples);
    let observed_raw = &series.values[series.len() - wspec.window..];
    let observed: Vec<Row> = observed_raw.iter().map(|r| lm.stats.apply_row(r)).collect();
    let ctx = condition_on_history(&lm.model, &lm.params, &observed, seed)?;
    let ens = forecast(
        &lm.model,
        &lm.params,
        &lm.sched,
        &ctx,
        wspec.horizon,
        n_samples,
        seed,
    )?;
    let raw_ens = ForecastEnsemble {
        samples: ens
            .samples
            .iter()
            .map(|s| s.iter().map(|r| lm.stats.invert_row(r)).collect())
            .collect(),
        t0: series.len(),
        seed,
    };
    let point: Vec<Row> = if lm.model.cfg.variant.is_deterministic() || n_samples < 2 {
        raw_ens.samples[0].clone()
    } else {
        pointwise_forecast(&raw_ens, &cfg.gmm.to_gmm_config(seed))?
    };
    let bands = quantile_bands(&raw_ens, &cfg.forecast.levels)?;

    // ensemble.csv: sample_id,step,dim,value
    let mut text = String::from("sample_id,step,dim,value\n");
    for (s, sample) in raw_ens.samples.iter().enumerate() {
        for (step, row) in sample.iter().enumerate() {
            for (dim, v) in row.iter().enumerate() {
                text.push_str(&format!("{s},{step},{dim},{v}\n"));
            }
        }
    }
    write_text(&out_dir.join("ensemble.csv"), &text)?;

    // bands.csv: step,dim,level,value,point
    let mut text = String::from("step,dim,level,value,point\n");
    for (step, per_dim) in bands.iter().enumerate() {
        for (dim, per_level) in per_dim.iter().enumerate() {
            for (li, v) in per_level.iter().enumerate() {
                text.push_str(&format!(
                    "{step},{dim},{},{v},{}\n",
                    cfg.forecast.levels[li], point[step][dim]
                ));
            }
        }
    }
    write_text(&out_dir.join("bands.csv"), &text)?;

    if args.svg {
        let svg = render_svg(observed_raw, &bands, &point, &cfg.forecast.levels);
        write_text(&out_dir.join("forecast.svg"), &svg)?;
    }
    eprintln!(
        "forecast horizon {} with {} samples written to {}",
        wspec.horizon,
        raw_ens.n_samples(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, seed: u64, out_dir: &Path, args: &EvaluateArgs) -> Result<()> {
    let (ens, point) = read_forecast_dir(&args.forecast_dir)?;
    let truth = load_csv(&args.truth, &LoadConfig::default())?;
    if truth.len() != ens.horizon() || truth.dim() != ens.data_dim() {
        return Err(Error::Misaligned(format!(
            "truth is {}x{}, forecast is {}x{}",
            truth.len(),
            truth.dim(),
            ens.horizon(),
            ens.data_dim()
        )));
    }
    let report: MetricReport = crate::metrics::evaluate(
        &point,
        &ens,
        &truth.values,
        cfg.metrics.normalizer,
        seed,
    )?;
    write_text(
        &out_dir.join("metrics.json"),
        &serde_json::to_string_pretty(&report).unwrap(),
    )?;
    eprintln!("nrmse {:.6}, crps_sum {:.6}", report.nrmse, report.crps_sum);
    Ok(())
}

/// Reads ensemble.csv and the point column of bands.csv.
fn read_forecast_dir(dir: &Path) -> Result<(ForecastEnsemble, Vec<Row>)> {
    let parse = |path: &Path| -> Result<Vec<Vec<f64>>> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.is_empty() {
                continue;
            }
            let fields: Result<Vec<f64>> = line
                .split(',')
                .map(|f| {
                    f.parse::<f64>().map_err(|_| Error::Parse {
                        line: i + 1,
                        msg: format!("bad number {f:?} in {}", path.display()),
                    })
                })
                .collect();
            rows.push(fields?);
        }
        if rows.is_empty() {
            return Err(Error::Empty(format!("{} has no rows", path.display())));
        }
        Ok(rows)
    };

    let ens_rows = parse(&dir.join("ensemble.csv"))?;
    let mut n_samples = 0usize;
    let mut horizon = 0usize;
    let mut dims = 0usize;
    for row in &ens_rows {
        if row.len() != 4 {
            return Err(Error::Misaligned("ensemble.csv wants 4 columns".into()));
        }
        n_samples = n_samples.max(row[0] as usize + 1);
        horizon = horizon.max(row[1] as usize + 1);
        dims = dims.max(row[2] as usize + 1);
    }
    let mut samples = vec![vec![vec![0.0; dims]; horizon]; n_samples];
    for row in &ens_rows {
        samples[row[0] as usize][row[1] as usize][row[2] as usize] = row[3];
    }
    let ens = ForecastEnsemble {
        samples,
        t0: 0,
        seed: 0,
    };

    let band_rows = parse(&dir.join("bands.csv"))?;
    let mut point = vec![vec![0.0; dims]; horizon];
    for row in &band_rows {
        if row.len() != 5 {
            return Err(Error::Misaligned("bands.csv wants 5 columns".into()));
        }
        let (step, dim) = (row[0] as usize, row[1] as usize);
        if step >= horizon || dim >= dims {
            return Err(Error::Misaligned(
                "bands.csv indexes outside the ensemble shape".into(),
            ));
        }
        point[step][dim] = row[4];
    }
    Ok((ens, point))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AblationRow {
    variant: String,
    seed: u64,
    nrmse: f64,
    /// Absent for deterministic variants, mirroring the usual "-" cell.
    crps_sum: Option<f64>,
    persistence_nrmse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AblationMean {
    variant: String,
    nrmse: f64,
    crps_sum: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    rows: Vec<AblationRow>,
    means: Vec<AblationMean>,
}

fn cmd_ablate(cfg: &RunConfig, seed: u64, out_dir: &Path) -> Result<()> {
    let report = run_ablation(cfg, seed)?;
    write_text(
        &out_dir.join("ablation.json"),
        &serde_json::to_string_pretty(&report).unwrap(),
    )?;
    for mean in &report.means {
        eprintln!(
            "{:<22} nrmse {:.4} crps_sum {}",
            mean.variant,
            mean.nrmse,
            mean.crps_sum
                .map_or("-".to_string(), |v| format!("{v:.4}")),
        );
    }
    Ok(())
}

/// Trains and evaluates every configured variant on the same data for
/// every configured seed.
pub fn run_ablation(cfg: &RunConfig, seed: u64) -> Result<AblationReport> {
    let prepared = prepare(cfg, seed)?;
    let sched = cfg.schedule.build()?;
    let windows = training_windows(&prepared, &cfg.window)?;
    let mut rows = Vec::new();
    for &variant in &cfg.ablate.variants {
        for &run_seed in &cfg.ablate.seeds {
            let model_cfg = cfg
                .model
                .with_variant(variant)
                .to_model_config(prepared.data_dim);
            let model = build_variant(&model_cfg)?;
            let (params, _) = train(&model, &sched, &windows, &cfg.train.to_train_config(run_seed))?;
            let outcome = evaluate_on_test(&model, &params, &sched, &prepared, cfg, run_seed)?;
            eprintln!(
                "ablate {:<22} seed {} nrmse {:.4} crps {:.4} (persistence {:.4})",
                variant.name(),
                run_seed,
                outcome.nrmse,
                outcome.crps_sum,
                outcome.persistence_nrmse
            );
            rows.push(AblationRow {
                variant: variant.name().to_string(),
                seed: run_seed,
                nrmse: outcome.nrmse,
                crps_sum: (!variant.is_deterministic()).then_some(outcome.crps_sum),
                persistence_nrmse: outcome.persistence_nrmse,
            });
        }
    }
    let means = cfg
        .ablate
        .variants
        .iter()
        .map(|v| {
            let vrows: Vec<&AblationRow> = rows
                .iter()
                .filter(|r| r.variant == v.name())
                .collect();
            let n = vrows.len() as f64;
            AblationMean {
                variant: v.name().to_string(),
                nrmse: vrows.iter().map(|r| r.nrmse).sum::<f64>() / n,
                crps_sum: (!v.is_deterministic()).then(|| {
                    vrows.iter().filter_map(|r| r.crps_sum).sum::<f64>() / n
                }),
            }
        })
        .collect();
    Ok(AblationReport { rows, means })
}

impl AblationReport {
    pub fn mean_crps(&self, variant: Variant) -> Option<f64> {
        self.means
            .iter()
            .find(|m| m.variant == variant.name())
            .and_then(|m| m.crps_sum)
    }

    pub fn variants(&self) -> Vec<String> {
        self.means.iter().map(|m| m.variant.clone()).collect()
    }

    pub fn row_crps(&self, variant: Variant) -> Vec<Option<f64>> {
        self.rows
            .iter()
            .filter(|r| r.variant == variant.name())
            .map(|r| r.crps_sum)
            .collect()
    }
}

fn cmd_synth(cfg: &RunConfig, seed: u64, out_dir: &Path) -> Result<()> {
    let spec = cfg
        .data
        .synth
        .as_ref()
        .ok_or_else(|| Error::Config("synth subcommand needs data.synth".into()))?;
    let series = synth_generate(spec, seed)?;
    write_csv(&series, &out_dir.join("synth.csv"))?;
    eprintln!(
        "wrote {} steps x {} dims to {}",
        series.len(),
        series.dim(),
        out_dir.join("synth.csv").display()
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct SimulateSummary {
    n_alerts: usize,
    n_positions: usize,
    mean_lead: Option<f64>,
    min_lead: Option<usize>,
    max_lead: Option<usize>,
    threshold: f64,
    oracle: bool,
}

fn cmd_simulate(cfg: &RunConfig, seed: u64, out_dir: &Path, args: &SimulateArgs) -> Result<()> {
    let series = load_csv(
        &args.series,
        &LoadConfig {
            impute: cfg.data.impute,
            timestamp_column: cfg.data.timestamp_column.clone(),
        },
    )?;
    let threshold = args.threshold.unwrap_or(cfg.monitor.threshold);

    let loaded;
    let forecaster = if args.oracle {
        Forecaster::Oracle
    } else {
        let dir = args.checkpoint.as_ref().ok_or_else(|| {
            Error::Config("simulate needs --checkpoint unless --oracle is set".into())
        })?;
        loaded = load_checkpoint_dir(cfg, dir, series.dim())?;
        Forecaster::Model(StreamModel {
            model: &loaded.model,
            params: &loaded.params,
            sched: &loaded.sched,
            norm: Some(&loaded.stats),
            n_samples: cfg.monitor.n_samples,
            point_mode: cfg.monitor.point_mode,
            gmm: cfg.gmm.to_gmm_config(seed),
        })
    };
    let (alerts, trace) = simulate_stream(
        &forecaster,
        &series,
        &cfg.window,
        threshold,
        cfg.monitor.position_stride,
        seed,
    )?;

    let mut text = String::new();
    for a in &alerts {
        text.push_str(&serde_json::to_string(a).unwrap());
        text.push('\n');
    }
    write_text(&out_dir.join("alerts.jsonl"), &text)?;
    let mut text = String::new();
    for t in &trace {
        text.push_str(&serde_json::to_string(t).unwrap());
        text.push('\n');
    }
    write_text(&out_dir.join("trace.jsonl"), &text)?;

    let leads: Vec<usize> = alerts
        .iter()
        .map(|a| a.target_step - a.issue_step)
        .collect();
    let summary = SimulateSummary {
        n_alerts: alerts.len(),
        n_positions: trace.len(),
        mean_lead: (!leads.is_empty())
            .then(|| leads.iter().sum::<usize>() as f64 / leads.len() as f64),
        min_lead: leads.iter().min().copied(),
        max_lead: leads.iter().max().copied(),
        threshold,
        oracle: args.oracle,
    };
    write_text(
        &out_dir.join("summary.json"),
        &serde_json::to_string_pretty(&summary).unwrap(),
    )?;
    eprintln!(
        "{} alerts over {} stream positions",
        alerts.len(),
        trace.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------
// SVG rendering
// ---------------------------------------------------------------------

/// Standalone SVG: per dimension one band polygon (outermost levels),
/// one point polyline, and the observed tail as context.
fn render_svg(
    observed: &[Row],
    bands: &[Vec<Vec<f64>>],
    point: &[Row],
    levels: &[f64],
) -> String {
    let dims = point.first().map_or(0, Vec::len);
    let horizon = point.len();
    let obs_len = observed.len();
    let (w, h_per, margin) = (800.0, 150.0, 30.0);
    let total_h = h_per * dims as f64 + margin;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{total_h}\" \
         viewBox=\"0 0 {w} {total_h}\">\n"
    );
    let (lo_level, hi_level) = (0usize, levels.len() - 1);
    for dim in 0..dims {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for row in observed {
            lo = lo.min(row[dim]);
            hi = hi.max(row[dim]);
        }
        for step in bands {
            lo = lo.min(step[dim][lo_level]);
            hi = hi.max(step[dim][hi_level]);
        }
        if hi - lo < 1e-9 {
            hi = lo + 1.0;
        }
        let y0 = h_per * dim as f64 + margin / 2.0;
        let scale_y = |v: f64| y0 + (h_per - margin) * (1.0 - (v - lo) / (hi - lo));
        let scale_x = |i: f64| margin + (w - 2.0 * margin) * i / (obs_len + horizon - 1) as f64;

        // observed context line
        let mut pts = String::new();
        for (i, row) in observed.iter().enumerate() {
            pts.push_str(&format!("{:.3},{:.3} ", scale_x(i as f64), scale_y(row[dim])));
        }
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"#555555\" stroke-width=\"1\" points=\"{}\"/>\n",
            pts.trim_end()
        ));

        // band polygon: upper edge left->right, lower edge right->left
        let mut poly = String::new();
        for (k, step) in bands.iter().enumerate() {
            poly.push_str(&format!(
                "{:.3},{:.3} ",
                scale_x((obs_len + k) as f64),
                scale_y(step[dim][hi_level])
            ));
        }
        for (k, step) in bands.iter().enumerate().rev() {
            poly.push_str(&format!(
                "{:.3},{:.3} ",
                scale_x((obs_len + k) as f64),
                scale_y(step[dim][lo_level])
            ));
        }
        svg.push_str(&format!(
            "<polygon fill=\"#7fbf7f\" fill-opacity=\"0.5\" stroke=\"none\" points=\"{}\"/>\n",
            poly.trim_end()
        ));

        // point forecast polyline
        let mut pts = String::new();
        for (k, row) in point.iter().enumerate() {
            pts.push_str(&format!(
                "{:.3},{:.3} ",
                scale_x((obs_len + k) as f64),
                scale_y(row[dim])
            ));
        }
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"#d2691e\" stroke-width=\"1.5\" \
             stroke-dasharray=\"4 2\" points=\"{}\"/>\n",
            pts.trim_end()
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
