//! Temporal data model: sampling grids, glucose traces, driver events,
//! episodes, and forecast-window extraction.
//!
//! Time is integer minutes from the episode origin. No calendar or timezone
//! handling happens here; any wall-clock metadata stays an opaque string at
//! the orchestration layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::quantize;

pub const GLUCOSE_MIN_MGDL: f64 = 10.0;
pub const GLUCOSE_MAX_MGDL: f64 = 800.0;

/// Gaps longer than this are flagged `Missing` when resampling. Two skipped
/// CGM samples is the usual sensor-dropout convention.
pub const DEFAULT_MAX_GAP_MIN: i64 = 30;

/// Uniform sampling grid: timestamps are `start_min + k * step_min`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub start_min: i64,
    pub step_min: i64,
    pub n_points: usize,
}

impl TimeGrid {
    pub fn new(start_min: i64, step_min: i64, n_points: usize) -> Result<Self> {
        if step_min <= 0 {
            return Err(Error::validation(format!(
                "TimeGrid.step_min must be > 0, got {step_min}"
            )));
        }
        if n_points == 0 {
            return Err(Error::validation("TimeGrid.n_points must be >= 1"));
        }
        Ok(Self { start_min, step_min, n_points })
    }

    pub fn time_at(&self, index: usize) -> i64 {
        self.start_min + index as i64 * self.step_min
    }

    /// Last sampled timestamp.
    pub fn last_min(&self) -> i64 {
        self.time_at(self.n_points - 1)
    }

    /// Span covered by the grid, half-open: `[start, start + n_points*step)`.
    /// Events anywhere in the span are valid even when they fall between the
    /// last sample and the span end.
    pub fn span_contains(&self, t_min: i64) -> bool {
        t_min >= self.start_min && t_min < self.start_min + self.n_points as i64 * self.step_min
    }

    /// Index of the sample at exactly `t_min`, if grid-aligned and in range.
    pub fn index_of(&self, t_min: i64) -> Option<usize> {
        let off = t_min - self.start_min;
        if off < 0 || off % self.step_min != 0 {
            return None;
        }
        let idx = (off / self.step_min) as usize;
        (idx < self.n_points).then_some(idx)
    }

    pub fn times(&self) -> impl Iterator<Item = i64> + '_ {
        (0..self.n_points).map(|k| self.time_at(k))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Measured,
    Interpolated,
    Missing,
}

impl Quality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Quality::Measured => "measured",
            Quality::Interpolated => "interpolated",
            Quality::Missing => "missing",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "measured" => Ok(Quality::Measured),
            "interpolated" => Ok(Quality::Interpolated),
            "missing" => Ok(Quality::Missing),
            other => Err(Error::validation(format!("unknown quality flag {other:?}"))),
        }
    }
}

/// Glucose series on a grid. Values are finite, clamped to the plausibility
/// range, and quantized to 1e-6 mg/dL at construction so that serialized and
/// in-memory records agree exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlucoseTrace {
    pub grid: TimeGrid,
    pub values: Vec<f64>,
    pub quality: Vec<Quality>,
}

impl GlucoseTrace {
    pub fn new(grid: TimeGrid, values: Vec<f64>, quality: Vec<Quality>) -> Result<Self> {
        if values.len() != grid.n_points || quality.len() != grid.n_points {
            return Err(Error::validation(format!(
                "GlucoseTrace length mismatch: grid has {} points, got {} values / {} flags",
                grid.n_points,
                values.len(),
                quality.len()
            )));
        }
        let values: Vec<f64> = values.into_iter().map(|v| quantize(v, 6)).collect();
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::validation(format!(
                    "GlucoseTrace.values[{i}] is not finite"
                )));
            }
            if *v < GLUCOSE_MIN_MGDL || *v > GLUCOSE_MAX_MGDL {
                return Err(Error::validation(format!(
                    "GlucoseTrace.values[{i}] = {v} outside [{GLUCOSE_MIN_MGDL}, {GLUCOSE_MAX_MGDL}]"
                )));
            }
        }
        Ok(Self { grid, values, quality })
    }

    pub fn is_missing(&self, index: usize) -> bool {
        self.quality[index] == Quality::Missing
    }
}

pub fn clamp_glucose(v: f64) -> f64 {
    v.clamp(GLUCOSE_MIN_MGDL, GLUCOSE_MAX_MGDL)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Bolus,
    Meal,
    Exercise,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Bolus => "bolus",
            EventKind::Meal => "meal",
            EventKind::Exercise => "exercise",
        }
    }
}

/// A driver impulse: insulin bolus (U), meal (g carbohydrate), or exercise
/// (dimensionless intensity with a duration). Magnitudes are quantized to
/// 1e-6 at construction, matching the serialized precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriverEvent {
    pub t_min: i64,
    pub kind: EventKind,
    pub magnitude: f64,
    pub duration_min: i64,
}

impl DriverEvent {
    pub fn new(t_min: i64, kind: EventKind, magnitude: f64, duration_min: i64) -> Result<Self> {
        if !magnitude.is_finite() || magnitude < 0.0 {
            return Err(Error::validation(format!(
                "DriverEvent.magnitude must be finite and >= 0, got {magnitude}"
            )));
        }
        if duration_min < 0 {
            return Err(Error::validation(format!(
                "DriverEvent.duration_min must be >= 0, got {duration_min}"
            )));
        }
        match kind {
            EventKind::Bolus | EventKind::Meal => {
                if duration_min != 0 {
                    return Err(Error::validation(format!(
                        "{} events are impulses and need duration_min = 0, got {duration_min}",
                        kind.as_str()
                    )));
                }
            }
            EventKind::Exercise => {
                if duration_min == 0 {
                    return Err(Error::validation(
                        "exercise events need duration_min > 0",
                    ));
                }
                if magnitude > 1.0 {
                    return Err(Error::validation(format!(
                        "exercise intensity must be in [0, 1], got {magnitude}"
                    )));
                }
            }
        }
        Ok(Self { t_min, kind, magnitude: quantize(magnitude, 6), duration_min })
    }

    pub fn bolus(t_min: i64, units: f64) -> Result<Self> {
        Self::new(t_min, EventKind::Bolus, units, 0)
    }

    pub fn meal(t_min: i64, grams: f64) -> Result<Self> {
        Self::new(t_min, EventKind::Meal, grams, 0)
    }

    pub fn exercise(t_min: i64, intensity: f64, duration_min: i64) -> Result<Self> {
        Self::new(t_min, EventKind::Exercise, intensity, duration_min)
    }
}

/// One episode: a patient day (or longer stretch) of CGM data plus its event
/// log. Synthetic episodes also carry the noise-free latent trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub patient_id: String,
    pub episode_id: String,
    pub cgm: GlucoseTrace,
    pub events: Vec<DriverEvent>,
    pub latent_glucose: Option<GlucoseTrace>,
}

impl EpisodeRecord {
    pub fn new(
        patient_id: impl Into<String>,
        episode_id: impl Into<String>,
        cgm: GlucoseTrace,
        events: Vec<DriverEvent>,
        latent_glucose: Option<GlucoseTrace>,
    ) -> Result<Self> {
        for pair in events.windows(2) {
            if pair[1].t_min < pair[0].t_min {
                return Err(Error::validation(format!(
                    "events out of order: t={} after t={}",
                    pair[1].t_min, pair[0].t_min
                )));
            }
        }
        for ev in &events {
            if !cgm.grid.span_contains(ev.t_min) {
                return Err(Error::validation(format!(
                    "event at t={} outside grid span [{}, {})",
                    ev.t_min,
                    cgm.grid.start_min,
                    cgm.grid.start_min + cgm.grid.n_points as i64 * cgm.grid.step_min
                )));
            }
        }
        if let Some(latent) = &latent_glucose {
            if latent.grid != cgm.grid {
                return Err(Error::validation(
                    "latent_glucose grid differs from cgm grid",
                ));
            }
        }
        Ok(Self {
            patient_id: patient_id.into(),
            episode_id: episode_id.into(),
            cgm,
            events,
            latent_glucose,
        })
    }
}

/// One forecast task instance: `anchor` is the index of the last context
/// point, context covers `[anchor+1-context_len, anchor]`, targets sit at
/// `anchor + h` for each horizon offset `h`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForecastWindow {
    pub patient_id: String,
    pub episode_id: String,
    pub anchor: usize,
    /// Absolute time of the anchor point; unique per patient across episodes.
    pub anchor_t_min: i64,
    pub context_len: usize,
    pub horizons: Vec<usize>,
}

/// Linear interpolation of irregular samples onto a grid, with the default
/// 30-minute gap rule.
pub fn resample_to_grid(samples: &[(i64, f64)], grid: TimeGrid) -> Result<GlucoseTrace> {
    resample_to_grid_with_gap(samples, grid, DEFAULT_MAX_GAP_MIN)
}

pub fn resample_to_grid_with_gap(
    samples: &[(i64, f64)],
    grid: TimeGrid,
    max_gap_min: i64,
) -> Result<GlucoseTrace> {
    if samples.is_empty() {
        return Err(Error::validation("no samples"));
    }
    for pair in samples.windows(2) {
        if pair[1].0 <= pair[0].0 {
            return Err(Error::validation(format!(
                "unsorted samples: t={} follows t={}",
                pair[1].0, pair[0].0
            )));
        }
    }
    let mut values = Vec::with_capacity(grid.n_points);
    let mut quality = Vec::with_capacity(grid.n_points);
    let mut hi = 0usize;
    for t in grid.times() {
        while hi < samples.len() && samples[hi].0 < t {
            hi += 1;
        }
        let (v, q) = if hi == samples.len() {
            (samples[samples.len() - 1].1, Quality::Missing)
        } else if samples[hi].0 == t {
            (samples[hi].1, Quality::Measured)
        } else if hi == 0 {
            (samples[0].1, Quality::Missing)
        } else {
            let (t0, v0) = samples[hi - 1];
            let (t1, v1) = samples[hi];
            let frac = (t - t0) as f64 / (t1 - t0) as f64;
            let v = v0 + frac * (v1 - v0);
            let q = if t1 - t0 > max_gap_min { Quality::Missing } else { Quality::Interpolated };
            (v, q)
        };
        values.push(clamp_glucose(v));
        quality.push(q);
    }
    GlucoseTrace::new(grid, values, quality)
}

/// Enumerates every valid forecast window. An anchor `t` is valid when the
/// full context fits (`t + 1 >= context_len`), every target index stays on
/// the grid, and no context or target point is flagged missing. Output is
/// ordered by anchor.
pub fn extract_windows(
    episode: &EpisodeRecord,
    context_len: usize,
    horizons: &[usize],
    stride: usize,
) -> Result<Vec<ForecastWindow>> {
    if context_len == 0 {
        return Err(Error::validation("context_len must be >= 1"));
    }
    if stride == 0 {
        return Err(Error::validation("stride must be >= 1"));
    }
    if horizons.is_empty() {
        return Err(Error::validation("horizons must be non-empty"));
    }
    if horizons.iter().any(|&h| h == 0) {
        return Err(Error::validation("horizon offsets must be >= 1"));
    }
    let n = episode.cgm.grid.n_points;
    let max_h = *horizons.iter().max().unwrap();
    let mut out = Vec::new();
    if n < context_len + max_h {
        return Ok(out);
    }
    let first = context_len - 1;
    let last = n - 1 - max_h;
    let mut anchor = first;
    while anchor <= last {
        let context_ok =
            (anchor + 1 - context_len..=anchor).all(|i| !episode.cgm.is_missing(i));
        let targets_ok = horizons.iter().all(|&h| !episode.cgm.is_missing(anchor + h));
        if context_ok && targets_ok {
            out.push(ForecastWindow {
                patient_id: episode.patient_id.clone(),
                episode_id: episode.episode_id.clone(),
                anchor,
                anchor_t_min: episode.cgm.grid.time_at(anchor),
                context_len,
                horizons: horizons.to_vec(),
            });
        }
        anchor += stride;
    }
    Ok(out)
}
