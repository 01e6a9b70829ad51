//! Data ingestion and preparation: CSV loading with imputation rules,
//! per-dimension z-score normalization fitted on training rows only,
//! sliding-window sampling, temporal and subject-level splits, and the
//! synthetic generators used by the desk-scale experiments.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive, normal_vec, purpose};
use crate::training::Row;

/// T×d series with column names and optional raw timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub values: Vec<Row>,
    pub columns: Vec<String>,
    pub timestamps: Option<Vec<String>>,
}

impl TimeSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn from_values(values: Vec<Row>) -> Self {
        let d = values.first().map_or(0, Vec::len);
        Self {
            values,
            columns: (0..d).map(|i| format!("x{i}")).collect(),
            timestamps: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Impute {
    Reject,
    ForwardFill,
}

impl Default for Impute {
    fn default() -> Self {
        Impute::Reject
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoadConfig {
    pub impute: Impute,
    /// Column excluded from the values and kept as raw timestamps.
    pub timestamp_column: Option<String>,
}

/// Loads a headered, comma-separated numeric CSV.
pub fn load_csv(path: &Path, cfg: &LoadConfig) -> Result<TimeSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(path.display().to_string(), std::io::Error::other(e.to_string())),
            _ => Error::Parse {
                line: 1,
                msg: e.to_string(),
            },
        })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.is_empty() {
        return Err(Error::Empty(format!("{} has no header", path.display())));
    }
    let ts_idx = match &cfg.timestamp_column {
        Some(name) => Some(
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Config(format!("timestamp column {name} not found")))?,
        ),
        None => None,
    };
    let columns: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != ts_idx)
        .map(|(_, h)| h.clone())
        .collect();
    if columns.is_empty() {
        return Err(Error::Empty("no value columns".into()));
    }

    let mut values: Vec<Row> = Vec::new();
    let mut timestamps: Vec<String> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e
                .position()
                .map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != headers.len() {
            return Err(Error::Parse {
                line,
                msg: format!(
                    "row has {} fields, header has {}",
                    record.len(),
                    headers.len()
                ),
            });
        }
        let mut row = Vec::with_capacity(columns.len());
        for (i, field) in record.iter().enumerate() {
            if Some(i) == ts_idx {
                timestamps.push(field.to_string());
                continue;
            }
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("non-numeric token {field:?} in column {}", headers[i]),
            })?;
            row.push(v);
        }
        if row.iter().any(|v| !v.is_finite()) {
            match cfg.impute {
                Impute::Reject => {
                    return Err(Error::Parse {
                        line,
                        msg: "non-finite value (set impute = \"forward_fill\" to repair)".into(),
                    })
                }
                Impute::ForwardFill => {
                    let prev = values.last().ok_or(Error::Parse {
                        line,
                        msg: "non-finite value in the first row cannot be forward-filled".into(),
                    })?;
                    for (j, v) in row.iter_mut().enumerate() {
                        if !v.is_finite() {
                            *v = prev[j];
                        }
                    }
                }
            }
        }
        values.push(row);
    }
    if values.is_empty() {
        return Err(Error::Empty(format!("{} has no data rows", path.display())));
    }
    Ok(TimeSeries {
        values,
        columns,
        timestamps: ts_idx.map(|_| timestamps),
    })
}

/// Writes a series as a headered CSV with full-precision floats.
pub fn write_csv(series: &TimeSeries, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&series.columns.join(","));
    out.push('\n');
    for row in &series.values {
        let fields: Vec<String> = row.iter().map(f64::to_string).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Per-dimension normalization statistics fitted on training rows only.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Dimensions with zero training variance pass through unchanged.
    pub constant_dims: Vec<bool>,
}

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
            constant_dims: vec![false; dim],
        }
    }

    pub fn apply_row(&self, row: &[f64]) -> Row {
        row.iter()
            .enumerate()
            .map(|(j, &v)| {
                if self.constant_dims[j] {
                    v
                } else {
                    (v - self.mean[j]) / self.std[j]
                }
            })
            .collect()
    }

    pub fn invert_row(&self, row: &[f64]) -> Row {
        row.iter()
            .enumerate()
            .map(|(j, &v)| {
                if self.constant_dims[j] {
                    v
                } else {
                    v * self.std[j] + self.mean[j]
                }
            })
            .collect()
    }

    pub fn apply(&self, series: &TimeSeries) -> TimeSeries {
        TimeSeries {
            values: series.values.iter().map(|r| self.apply_row(r)).collect(),
            columns: series.columns.clone(),
            timestamps: series.timestamps.clone(),
        }
    }

    pub fn invert(&self, series: &TimeSeries) -> TimeSeries {
        TimeSeries {
            values: series.values.iter().map(|r| self.invert_row(r)).collect(),
            columns: series.columns.clone(),
            timestamps: series.timestamps.clone(),
        }
    }
}

/// Fits z-score statistics on `train` and applies them to `train` and
/// every series in `others`.
pub fn zscore_fit_apply(
    train: &TimeSeries,
    others: &[&TimeSeries],
) -> Result<(TimeSeries, Vec<TimeSeries>, NormStats)> {
    if train.is_empty() {
        return Err(Error::Empty("normalization needs training rows".into()));
    }
    let d = train.dim();
    let t = train.len() as f64;
    let mut mean = vec![0.0; d];
    for row in &train.values {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v / t;
        }
    }
    let mut var = vec![0.0; d];
    for row in &train.values {
        for (s, (&v, &m)) in var.iter_mut().zip(row.iter().zip(&mean)) {
            *s += (v - m) * (v - m) / t;
        }
    }
    let std: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
    // accumulation drift can leave a tiny nonzero std on constant columns
    let constant_dims: Vec<bool> = std
        .iter()
        .zip(&mean)
        .map(|(&s, &m)| s <= 1e-12 * m.abs().max(1.0))
        .collect();
    let stats = NormStats {
        mean,
        std: std
            .iter()
            .zip(&constant_dims)
            .map(|(&s, &flat)| if flat { 1.0 } else { s })
            .collect(),
        constant_dims,
    };
    let norm_train = stats.apply(train);
    let norm_others = others.iter().map(|s| stats.apply(s)).collect();
    Ok((norm_train, norm_others, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub window: usize,
    pub horizon: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_stride() -> usize {
    1
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.window < 1 || self.horizon < 1 || self.stride < 1 {
            return Err(Error::Config(
                "window, horizon and stride must all be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn span(&self) -> usize {
        self.window + self.horizon
    }
}

/// One (observed, future) pair cut from a series.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    pub observed: Vec<Row>,
    pub future: Vec<Row>,
    /// Index of the first observed row in the source series.
    pub start: usize,
}

impl WindowPair {
    /// The full observed+future span as one modelling sequence.
    pub fn full(&self) -> Vec<Row> {
        let mut rows = self.observed.clone();
        rows.extend_from_slice(&self.future);
        rows
    }
}

/// Windows at offsets `0, stride, 2·stride, …`; each covers
/// `window + horizon` contiguous steps.
pub fn sliding_windows(series: &TimeSeries, spec: &WindowSpec) -> Result<Vec<WindowPair>> {
    spec.validate()?;
    let span = spec.span();
    if series.len() < span {
        return Err(Error::Degenerate(format!(
            "series of length {} is too short for window {} + horizon {}",
            series.len(),
            spec.window,
            spec.horizon
        )));
    }
    let count = (series.len() - span) / spec.stride + 1;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let start = i * spec.stride;
        out.push(WindowPair {
            observed: series.values[start..start + spec.window].to_vec(),
            future: series.values[start + spec.window..start + span].to_vec(),
            start,
        });
    }
    Ok(out)
}

/// Cuts one series at `floor(fraction · T)`.
pub fn split_temporal(series: &TimeSeries, fraction: f64) -> Result<(TimeSeries, TimeSeries)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidRange("split fraction must be in (0,1)".into()));
    }
    let cut = (fraction * series.len() as f64).floor() as usize;
    if cut == 0 || cut >= series.len() {
        return Err(Error::Empty(format!(
            "temporal split at {cut} leaves an empty side"
        )));
    }
    let train = TimeSeries {
        values: series.values[..cut].to_vec(),
        columns: series.columns.clone(),
        timestamps: series.timestamps.as_ref().map(|t| t[..cut].to_vec()),
    };
    let test = TimeSeries {
        values: series.values[cut..].to_vec(),
        columns: series.columns.clone(),
        timestamps: series.timestamps.as_ref().map(|t| t[cut..].to_vec()),
    };
    Ok((train, test))
}

/// Partitions whole series by a seeded shuffle; `floor(fraction · n)`
/// series go to the training side.
pub fn split_subjects(
    series: Vec<TimeSeries>,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<TimeSeries>, Vec<TimeSeries>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidRange("split fraction must be in (0,1)".into()));
    }
    let n = series.len();
    let cut = (fraction * n as f64).floor() as usize;
    if cut == 0 || cut >= n {
        return Err(Error::Empty(format!(
            "subject split of {n} series at fraction {fraction} leaves an empty side"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive(seed, &[purpose::SPLIT]));
    let train_set: std::collections::HashSet<usize> = order[..cut].iter().copied().collect();
    let mut train = Vec::with_capacity(cut);
    let mut test = Vec::with_capacity(n - cut);
    for (i, s) in series.into_iter().enumerate() {
        if train_set.contains(&i) {
            train.push(s);
        } else {
            test.push(s);
        }
    }
    Ok((train, test))
}

/// An injected relative drop: the value at `at` is the first one scaled
/// down by `depth`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropEvent {
    pub at: usize,
    pub depth: f64,
}

/// Synthetic dataset recipes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SynthSpec {
    /// Multichannel sinusoids with phase offsets plus Gaussian noise.
    SineNoise {
        len: usize,
        dims: usize,
        period: f64,
        amplitude: f64,
        noise: f64,
    },
    /// AR(1) whose coefficient and noise scale switch by a hidden
    /// two-state Markov regime shared across dimensions.
    RegimeAr {
        len: usize,
        dims: usize,
        coef_calm: f64,
        coef_volatile: f64,
        noise_calm: f64,
        noise_volatile: f64,
        switch_prob: f64,
    },
    /// Positive amplitude track with injected relative drops; drops
    /// recover after `recover_after` steps (0 = permanent).
    DropSignal {
        len: usize,
        base: f64,
        #[serde(default)]
        wiggle: f64,
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        drops: Vec<DropEvent>,
        #[serde(default)]
        random_drops: usize,
        #[serde(default = "default_drop_depth")]
        drop_depth: f64,
        #[serde(default)]
        recover_after: usize,
    },
}

fn default_drop_depth() -> f64 {
    0.4
}

/// Generates a synthetic series; a pure function of `(spec, seed)`.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<TimeSeries> {
    let mut rng = derive(seed, &[purpose::DATA]);
    match spec {
        SynthSpec::SineNoise {
            len,
            dims,
            period,
            amplitude,
            noise,
        } => {
            if *len == 0 || *dims == 0 || *period <= 0.0 {
                return Err(Error::Config("sine_noise needs len, dims, period > 0".into()));
            }
            let mut values = Vec::with_capacity(*len);
            for t in 0..*len {
                let eps = normal_vec(&mut rng, *dims);
                let row = (0..*dims)
                    .map(|i| {
                        let phase = i as f64 * 2.0 * std::f64::consts::PI / *dims as f64;
                        amplitude
                            * ((2.0 * std::f64::consts::PI * t as f64 / period) + phase).sin()
                            + noise * eps[i]
                    })
                    .collect();
                values.push(row);
            }
            Ok(TimeSeries::from_values(values))
        }
        SynthSpec::RegimeAr {
            len,
            dims,
            coef_calm,
            coef_volatile,
            noise_calm,
            noise_volatile,
            switch_prob,
        } => {
            if *len == 0 || *dims == 0 {
                return Err(Error::Config("regime_ar needs len, dims > 0".into()));
            }
            if !(0.0..=1.0).contains(switch_prob) {
                return Err(Error::Config("switch_prob must be in [0,1]".into()));
            }
            let mut values: Vec<Row> = Vec::with_capacity(*len);
            let mut volatile = false;
            let mut prev = vec![0.0; *dims];
            for t in 0..*len {
                if t > 0 && rng.gen_range(0.0..1.0) < *switch_prob {
                    volatile = !volatile;
                }
                let (coef, scale) = if volatile {
                    (*coef_volatile, *noise_volatile)
                } else {
                    (*coef_calm, *noise_calm)
                };
                let eps = normal_vec(&mut rng, *dims);
                let row: Row = prev
                    .iter()
                    .zip(&eps)
                    .map(|(&p, &e)| coef * p + scale * e)
                    .collect();
                prev = row.clone();
                values.push(row);
            }
            Ok(TimeSeries::from_values(values))
        }
        SynthSpec::DropSignal {
            len,
            base,
            wiggle,
            noise,
            drops,
            random_drops,
            drop_depth,
            recover_after,
        } => {
            if *len == 0 || *base <= 0.0 {
                return Err(Error::Config("drop_signal needs len > 0 and base > 0".into()));
            }
            if wiggle.abs() >= 0.5 || *noise < 0.0 || noise.abs() >= 0.5 {
                return Err(Error::Config(
                    "drop_signal wiggle and noise must stay below 0.5 to keep amplitudes positive"
                        .into(),
                ));
            }
            let mut events: Vec<DropEvent> = drops.clone();
            for e in &events {
                if e.at >= *len || !(0.0..1.0).contains(&e.depth) {
                    return Err(Error::Config(format!(
                        "drop at {} depth {} is out of range",
                        e.at, e.depth
                    )));
                }
            }
            // seeded extra drops, kept clear of the edges and each other
            let min_gap = recover_after + 15;
            let mut guard = 0;
            while events.len() < drops.len() + random_drops && guard < 10_000 {
                guard += 1;
                let at = rng.gen_range(len / 5..len - len / 10);
                if events.iter().all(|e| at.abs_diff(e.at) >= min_gap) {
                    events.push(DropEvent {
                        at,
                        depth: *drop_depth,
                    });
                }
            }
            events.sort_by_key(|e| e.at);

            let mut values = Vec::with_capacity(*len);
            let mut level = 1.0;
            for t in 0..*len {
                for e in &events {
                    if t == e.at {
                        level *= 1.0 - e.depth;
                    }
                    if *recover_after > 0 && t == e.at + recover_after {
                        level /= 1.0 - e.depth;
                    }
                }
                let smooth = base * (1.0 + wiggle * (2.0 * std::f64::consts::PI * t as f64 / 50.0).sin());
                let jitter = 1.0 + noise * normal_vec(&mut rng, 1)[0].clamp(-3.0, 3.0);
                values.push(vec![smooth * level * jitter.max(0.05)]);
            }
            Ok(TimeSeries::from_values(values))
        }
    }
}
