//! Streaming drop monitor: replay a univariate amplitude series through
//! sliding-window observation, forecast ahead, and raise an alert when a
//! predicted relative drop against the trailing reference maximum
//! exceeds the threshold.
//!
//! Causality is structural — the forecaster only ever receives the
//! trailing observed window — and audited: every trace entry records the
//! observed index range, which must never reach past the issue step.

use serde::{Deserialize, Serialize};

use crate::data::{NormStats, TimeSeries, WindowSpec};
use crate::error::{Error, Result};
use crate::forecasting::{condition_on_history, forecast, quantile_bands};
use crate::model::Model;
use crate::params::ParameterSet;
use crate::point_estimate::{pointwise_forecast, GmmConfig};
use crate::schedule::DiffusionSchedule;

/// One raised alert. `issue_step` is the index of the last observed row
/// when the alert fired; `target_step` is the predicted drop location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropAlert {
    pub issue_step: usize,
    pub target_step: usize,
    /// Predicted relative drop against the reference level.
    pub drop: f64,
    pub reference: f64,
}

/// Point-forecast reduction used inside the monitor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointMode {
    Gmm,
    Median,
}

/// One stream position in the replay trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEntry {
    pub issue_step: usize,
    pub observed_start: usize,
    /// Exclusive end of the observed range.
    pub observed_end: usize,
    pub point_forecast: Vec<f64>,
}

/// Flags step `t` when `(ref - a[t]) / ref > threshold` with `ref` the
/// maximum over the `ref_window` trailing amplitudes (exclusive of `t`).
pub fn detect_drops(
    amplitude: &[f64],
    threshold: f64,
    ref_window: usize,
) -> Result<Vec<(usize, f64)>> {
    if amplitude.iter().any(|&a| !(a > 0.0)) {
        return Err(Error::InvalidRange(
            "amplitudes must be strictly positive".into(),
        ));
    }
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::InvalidRange("threshold must be in [0,1)".into()));
    }
    if ref_window < 1 {
        return Err(Error::InvalidRange("reference window must be >= 1".into()));
    }
    let mut flags = Vec::new();
    for t in 1..amplitude.len() {
        let lo = t.saturating_sub(ref_window);
        let reference = amplitude[lo..t].iter().cloned().fold(f64::MIN, f64::max);
        let drop = (reference - amplitude[t]) / reference;
        if drop > threshold {
            flags.push((t, drop));
        }
    }
    Ok(flags)
}

/// The stream's forecast source: a trained model (with optional
/// normalization wrapping) or the truth-reading oracle used for
/// equivalence testing.
pub enum Forecaster<'a> {
    Model(StreamModel<'a>),
    Oracle,
}

pub struct StreamModel<'a> {
    pub model: &'a Model,
    pub params: &'a ParameterSet,
    pub sched: &'a DiffusionSchedule,
    pub norm: Option<&'a NormStats>,
    pub n_samples: usize,
    pub point_mode: PointMode,
    pub gmm: GmmConfig,
}

/// Replays `series` position by position. At each issue position the
/// forecaster sees exactly the trailing `spec.window` observations,
/// predicts `spec.horizon` steps, and drop detection runs over the
/// observed tail plus the predictions; only flags inside the predicted
/// region raise alerts. Alerts deduplicate per target step, keeping the
/// earliest issue.
pub fn simulate_stream(
    forecaster: &Forecaster<'_>,
    series: &TimeSeries,
    spec: &WindowSpec,
    threshold: f64,
    position_stride: usize,
    seed: u64,
) -> Result<(Vec<DropAlert>, Vec<TraceEntry>)> {
    spec.validate()?;
    if series.dim() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "the monitor expects a univariate amplitude channel, got d={}",
            series.dim()
        )));
    }
    if position_stride < 1 {
        return Err(Error::InvalidRange("position stride must be >= 1".into()));
    }
    if series.len() < spec.span() {
        return Err(Error::Degenerate(format!(
            "series of length {} is shorter than one window span {}",
            series.len(),
            spec.span()
        )));
    }
    if let Forecaster::Model(m) = forecaster {
        m.model.validate_params(m.params)?;
        if m.n_samples == 0 {
            return Err(Error::Empty("monitor needs at least one sample".into()));
        }
    }
    let amplitudes: Vec<f64> = series.values.iter().map(|r| r[0]).collect();
    if amplitudes.iter().any(|&a| !(a > 0.0)) {
        return Err(Error::InvalidRange(
            "amplitudes must be strictly positive".into(),
        ));
    }

    let mut alerts: Vec<DropAlert> = Vec::new();
    let mut seen_targets = std::collections::HashSet::new();
    let mut trace = Vec::new();

    let mut k = spec.window;
    while k + spec.horizon <= series.len() {
        let obs_start = k - spec.window;
        let observed = &series.values[obs_start..k];

        let predicted: Vec<f64> = match forecaster {
            Forecaster::Oracle => series.values[k..k + spec.horizon]
                .iter()
                .map(|r| r[0])
                .collect(),
            Forecaster::Model(m) => {
                let rows: Vec<Vec<f64>> = match m.norm {
                    Some(stats) => observed.iter().map(|r| stats.apply_row(r)).collect(),
                    None => observed.to_vec(),
                };
                let pos_seed = seed.wrapping_add((k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let ctx = condition_on_history(m.model, m.params, &rows, pos_seed)?;
                let ens = forecast(
                    m.model,
                    m.params,
                    m.sched,
                    &ctx,
                    spec.horizon,
                    m.n_samples,
                    pos_seed,
                )?;
                let points: Vec<Vec<f64>> = match m.point_mode {
                    PointMode::Gmm => pointwise_forecast(&ens, &m.gmm)?,
                    PointMode::Median => {
                        let bands = quantile_bands(&ens, &[0.5])?;
                        bands.iter().map(|step| vec![step[0][0]]).collect()
                    }
                };
                points
                    .iter()
                    .map(|r| {
                        let raw = match m.norm {
                            Some(stats) => stats.invert_row(r)[0],
                            None => r[0],
                        };
                        // a non-positive predicted amplitude is itself a
                        // drastic drop; floor it so detection stays defined
                        raw.max(1e-12)
                    })
                    .collect()
            }
        };

        let issue_step = k - 1;
        trace.push(TraceEntry {
            issue_step,
            observed_start: obs_start,
            observed_end: k,
            point_forecast: predicted.clone(),
        });

        let mut window_amps: Vec<f64> = amplitudes[obs_start..k].to_vec();
        window_amps.extend_from_slice(&predicted);
        for (idx, drop) in detect_drops(&window_amps, threshold, spec.window)? {
            if idx < spec.window {
                continue; // already-observed region
            }
            let target_step = k + (idx - spec.window);
            if seen_targets.insert(target_step) {
                let lo = idx.saturating_sub(spec.window);
                let reference = window_amps[lo..idx].iter().cloned().fold(f64::MIN, f64::max);
                alerts.push(DropAlert {
                    issue_step,
                    target_step,
                    drop,
                    reference,
                });
            }
        }
        k += position_stride;
    }

    // causality audit: nothing read past the issue step
    for entry in &trace {
        if entry.observed_end > entry.issue_step + 1 {
            return Err(Error::Contract(format!(
                "look-ahead detected: observed up to {} at issue step {}",
                entry.observed_end, entry.issue_step
            )));
        }
    }
    Ok((alerts, trace))
}

/// Outcome of matching alerts against known injected drop events.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventOutcome {
    pub event_step: usize,
    pub detected: bool,
    /// `target - issue` of the earliest matching alert.
    pub lead_time: Option<usize>,
}

/// Matches each known event to the earliest alert whose target falls in
/// `[event, event + horizon]`.
pub fn match_events(alerts: &[DropAlert], events: &[usize], horizon: usize) -> Vec<EventOutcome> {
    events
        .iter()
        .map(|&at| {
            let hit = alerts
                .iter()
                .filter(|a| a.target_step >= at && a.target_step <= at + horizon)
                .min_by_key(|a| (a.issue_step, a.target_step));
            EventOutcome {
                event_step: at,
                detected: hit.is_some(),
                lead_time: hit.map(|a| a.target_step - a.issue_step),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, DropEvent, SynthSpec};
    use proptest::prelude::*;

    #[test]
    fn constant_series_has_no_flags() {
        let flags = detect_drops(&[2.0; 50], 0.3, 10).unwrap();
        assert!(flags.is_empty());
    }

    #[test]
    fn forty_percent_drop_is_flagged_thirty_is_not() {
        let flags = detect_drops(&[1.0, 0.6], 0.3, 5).unwrap();
        assert_eq!(flags.len(), 1);
        assert_eq!(flags[0].0, 1);
        assert!((flags[0].1 - 0.4).abs() < 1e-12);

        // exactly at threshold: strict comparison, not flagged (0.25 is
        // exactly representable, unlike a 0.30 drop from 1.0 to 0.7)
        let flags = detect_drops(&[1.0, 0.75], 0.25, 5).unwrap();
        assert!(flags.is_empty());
        let flags = detect_drops(&[1.0, 0.5], 0.25, 5).unwrap();
        assert_eq!(flags.len(), 1);
    }

    #[test]
    fn nonpositive_amplitudes_rejected() {
        assert!(detect_drops(&[1.0, 0.0, 2.0], 0.3, 5).is_err());
        assert!(detect_drops(&[1.0, -0.5], 0.3, 5).is_err());
    }

    #[test]
    fn reference_is_trailing_maximum() {
        // slow decay: each step drops 20% vs the previous but more vs the
        // windowed max, so the window length decides what is flagged.
        let amps = [1.0, 0.8, 0.64, 0.512];
        let wide = detect_drops(&amps, 0.3, 3).unwrap();
        assert_eq!(wide.iter().map(|f| f.0).collect::<Vec<_>>(), vec![2, 3]);
        let narrow = detect_drops(&amps, 0.3, 1).unwrap();
        assert!(narrow.is_empty(), "20% single-step drops stay unflagged");
    }

    fn drop_series(len: usize, drops: Vec<DropEvent>) -> TimeSeries {
        synth_generate(
            &SynthSpec::DropSignal {
                len,
                base: 2.0,
                wiggle: 0.0,
                noise: 0.0,
                drops,
                random_drops: 0,
                drop_depth: 0.4,
                recover_after: 25,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn oracle_alerts_coincide_with_ground_truth() {
        let spec = WindowSpec {
            window: 20,
            horizon: 5,
            stride: 1,
        };
        let series = drop_series(
            160,
            vec![
                DropEvent { at: 60, depth: 0.4 },
                DropEvent { at: 110, depth: 0.5 },
            ],
        );
        let amps: Vec<f64> = series.values.iter().map(|r| r[0]).collect();
        let (alerts, trace) =
            simulate_stream(&Forecaster::Oracle, &series, &spec, 0.3, 1, 0).unwrap();

        // ground truth restricted to reachable targets
        let truth: Vec<(usize, f64)> = detect_drops(&amps, 0.3, spec.window)
            .unwrap()
            .into_iter()
            .filter(|&(t, _)| t >= spec.window)
            .collect();
        let got: Vec<(usize, f64)> = alerts.iter().map(|a| (a.target_step, a.drop)).collect();
        assert_eq!(got.len(), truth.len());
        for ((gt, gd), (tt, td)) in got.iter().zip(&truth) {
            assert_eq!(gt, tt);
            assert!((gd - td).abs() < 1e-12);
        }
        // every alert predicts strictly ahead of its issue step
        for a in &alerts {
            assert!(a.target_step > a.issue_step);
        }
        // causality audit on the trace
        for e in &trace {
            assert!(e.observed_end <= e.issue_step + 1);
        }
        // the oracle sees the first drop before it happens
        let first = alerts.iter().find(|a| a.target_step == 60).unwrap();
        assert!(first.issue_step < 60, "oracle alert must lead the event");
    }

    #[test]
    fn flat_series_yields_no_alerts() {
        let spec = WindowSpec {
            window: 10,
            horizon: 4,
            stride: 1,
        };
        let series = drop_series(80, vec![]);
        let (alerts, _) =
            simulate_stream(&Forecaster::Oracle, &series, &spec, 0.3, 1, 0).unwrap();
        assert!(alerts.is_empty());
    }

    #[test]
    fn multivariate_series_rejected() {
        let spec = WindowSpec {
            window: 5,
            horizon: 2,
            stride: 1,
        };
        let series = TimeSeries::from_values(vec![vec![1.0, 1.0]; 20]);
        assert!(simulate_stream(&Forecaster::Oracle, &series, &spec, 0.3, 1, 0).is_err());
    }

    #[test]
    fn event_matching_reports_lead_time() {
        let alerts = vec![
            DropAlert {
                issue_step: 58,
                target_step: 60,
                drop: 0.4,
                reference: 2.0,
            },
            DropAlert {
                issue_step: 61,
                target_step: 62,
                drop: 0.41,
                reference: 2.0,
            },
        ];
        let outcomes = match_events(&alerts, &[60, 100], 5);
        assert!(outcomes[0].detected);
        assert_eq!(outcomes[0].lead_time, Some(2));
        assert!(!outcomes[1].detected);
    }

    proptest! {
        #[test]
        fn detect_drops_is_scale_invariant(
            amps in proptest::collection::vec(0.1..10.0f64, 2..60),
            c in 0.01..100.0f64,
        ) {
            let base = detect_drops(&amps, 0.3, 8).unwrap();
            let scaled: Vec<f64> = amps.iter().map(|a| a * c).collect();
            let got = detect_drops(&scaled, 0.3, 8).unwrap();
            prop_assert_eq!(base.len(), got.len());
            for ((t1, d1), (t2, d2)) in base.iter().zip(&got) {
                prop_assert_eq!(t1, t2);
                prop_assert!((d1 - d2).abs() < 1e-12);
            }
        }
    }
}
