//! Feature specification and design-matrix construction.
//!
//! Channel layout per row, in canonical channel order:
//! - `cgm_lags`: context glucose values oldest to newest, mg/dL.
//! - `time_of_day`: sin/cos of the anchor's minute of day.
//! - `raw_events`: per-kind impulse sums over the context steps
//!   (bolus, meal, exercise blocks, each context-length wide).
//! - `iob`/`cob`/`rag`: the encoded channel evaluated at the anchor and
//!   projected to each forecast horizon, using only events at or before the
//!   anchor (kernel tails are known once the dose or meal happened, so the
//!   projection leaks nothing).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, KernelSpec};
use crate::error::{Error, Result};
use crate::timeline::{EpisodeRecord, EventKind, ForecastWindow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    CgmLags,
    TimeOfDay,
    RawEvents,
    Iob,
    Cob,
    Rag,
}

pub const CANONICAL_CHANNELS: [Channel; 6] = [
    Channel::CgmLags,
    Channel::TimeOfDay,
    Channel::RawEvents,
    Channel::Iob,
    Channel::Cob,
    Channel::Rag,
];

impl Channel {
    pub fn as_str(&self) -> &'static str {
        match self {
            Channel::CgmLags => "cgm_lags",
            Channel::TimeOfDay => "time_of_day",
            Channel::RawEvents => "raw_events",
            Channel::Iob => "iob",
            Channel::Cob => "cob",
            Channel::Rag => "rag",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        CANONICAL_CHANNELS
            .iter()
            .find(|c| c.as_str() == s)
            .copied()
            .ok_or_else(|| Error::config(format!("unknown channel {s:?}")))
    }

    pub fn is_driver(&self) -> bool {
        matches!(self, Channel::RawEvents | Channel::Iob | Channel::Cob | Channel::Rag)
    }

    fn is_encoded(&self) -> bool {
        matches!(self, Channel::Iob | Channel::Cob | Channel::Rag)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub channels: Vec<Channel>,
    pub context_len: usize,
    pub lag_stride: usize,
    /// Raw impulses and encoded channels describe the same events twice;
    /// mixing them must be asked for explicitly.
    pub allow_raw_and_encoded: bool,
}

impl FeatureSpec {
    pub fn new(channels: &[Channel], context_len: usize, lag_stride: usize) -> Result<Self> {
        Self::build(channels, context_len, lag_stride, false)
    }

    pub fn with_raw_and_encoded(
        channels: &[Channel],
        context_len: usize,
        lag_stride: usize,
    ) -> Result<Self> {
        Self::build(channels, context_len, lag_stride, true)
    }

    fn build(
        channels: &[Channel],
        context_len: usize,
        lag_stride: usize,
        allow_raw_and_encoded: bool,
    ) -> Result<Self> {
        let set: BTreeSet<Channel> = channels.iter().copied().collect();
        if !set.contains(&Channel::CgmLags) {
            return Err(Error::config("feature spec must include cgm_lags"));
        }
        if context_len == 0 || lag_stride == 0 {
            return Err(Error::config("context_len and lag_stride must be >= 1"));
        }
        let has_raw = set.contains(&Channel::RawEvents);
        let has_encoded = set.iter().any(|c| c.is_encoded());
        if has_raw && has_encoded && !allow_raw_and_encoded {
            return Err(Error::config(
                "raw_events and encoded channels together need the explicit flag",
            ));
        }
        let channels: Vec<Channel> =
            CANONICAL_CHANNELS.iter().copied().filter(|c| set.contains(c)).collect();
        Ok(Self { channels, context_len, lag_stride, allow_raw_and_encoded })
    }

    pub fn has(&self, ch: Channel) -> bool {
        self.channels.contains(&ch)
    }

    pub fn n_lags(&self) -> usize {
        (self.context_len - 1) / self.lag_stride + 1
    }

    /// Columns contributed by one channel given the horizon count.
    pub fn channel_width(&self, ch: Channel, n_horizons: usize) -> usize {
        match ch {
            Channel::CgmLags => self.n_lags(),
            Channel::TimeOfDay => 2,
            Channel::RawEvents => 3 * self.context_len,
            Channel::Iob | Channel::Cob | Channel::Rag => 1 + n_horizons,
        }
    }

    pub fn is_subset_of(&self, other: &FeatureSpec) -> bool {
        self.context_len == other.context_len
            && self.lag_stride == other.lag_stride
            && self.channels.iter().all(|c| other.channels.contains(c))
    }
}

/// Stable identity of one forecast window across tables and reports.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WindowKey {
    pub patient: String,
    pub episode: String,
    pub anchor_t_min: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub spec: FeatureSpec,
    /// Horizon offsets in grid steps, ascending.
    pub horizons: Vec<usize>,
    /// Minutes per grid step, shared by every source episode.
    pub step_min: i64,
    /// Channel owning each column.
    pub col_channels: Vec<Channel>,
    pub n_cols: usize,
    /// Row-major feature storage.
    pub x: Vec<f64>,
    /// Targets per horizon (same index order as `horizons`).
    pub y: Vec<Vec<f64>>,
    pub keys: Vec<WindowKey>,
    /// Glucose at the anchor, for the persistence baseline.
    pub last_cgm: Vec<f64>,
    pub episode_ids: BTreeSet<String>,
}

impl DesignMatrix {
    pub fn n_rows(&self) -> usize {
        self.keys.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn columns_of(&self, ch: Channel) -> Vec<usize> {
        self.col_channels
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == ch)
            .map(|(i, _)| i)
            .collect()
    }

    /// Restricts to a channel subset; the result is identical to building
    /// the matrix with the restricted spec directly. This is the matched-pair
    /// contract: the univariate design is literally a column selection of
    /// the multivariate one.
    pub fn restrict(&self, channels: &[Channel]) -> Result<DesignMatrix> {
        let sub = if self.spec.allow_raw_and_encoded {
            FeatureSpec::with_raw_and_encoded(channels, self.spec.context_len, self.spec.lag_stride)?
        } else {
            FeatureSpec::new(channels, self.spec.context_len, self.spec.lag_stride)?
        };
        if !sub.is_subset_of(&self.spec) {
            return Err(Error::config(
                "restriction channels are not a subset of the source spec",
            ));
        }
        let keep: Vec<usize> = self
            .col_channels
            .iter()
            .enumerate()
            .filter(|(_, c)| sub.channels.contains(c))
            .map(|(i, _)| i)
            .collect();
        let mut x = Vec::with_capacity(self.n_rows() * keep.len());
        for r in 0..self.n_rows() {
            let row = self.row(r);
            x.extend(keep.iter().map(|&c| row[c]));
        }
        Ok(DesignMatrix {
            spec: sub,
            horizons: self.horizons.clone(),
            step_min: self.step_min,
            col_channels: keep.iter().map(|&c| self.col_channels[c]).collect(),
            n_cols: keep.len(),
            x,
            y: self.y.clone(),
            keys: self.keys.clone(),
            last_cgm: self.last_cgm.clone(),
            episode_ids: self.episode_ids.clone(),
        })
    }

    /// 1/0 column mask keeping only the given channels; used for the
    /// capacity-matched MLP pair.
    pub fn mask_for(&self, channels: &[Channel]) -> Vec<f64> {
        self.col_channels
            .iter()
            .map(|c| if channels.contains(c) { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Per-patient kernel overrides: patient id -> (insulin tau, carb tau).
pub type PatientTaus = BTreeMap<String, (f64, f64)>;

pub struct DesignOptions<'a> {
    pub encoder: &'a EncoderConfig,
    /// Horizon offsets in grid steps, ascending.
    pub horizons: &'a [usize],
    pub patient_taus: Option<&'a PatientTaus>,
}

struct ChannelKernels {
    insulin: KernelSpec,
    carb: KernelSpec,
}

fn kernels_for(
    patient: &str,
    opts: &DesignOptions,
) -> Result<ChannelKernels> {
    let (itau, ctau) = match opts.patient_taus.and_then(|m| m.get(patient)) {
        Some(&(i, c)) => (i, c),
        None => (opts.encoder.insulin_tau_min, opts.encoder.carb_tau_min),
    };
    Ok(ChannelKernels { insulin: KernelSpec::gamma2(itau)?, carb: KernelSpec::gamma2(ctau)? })
}

/// Builds the design matrix for the given windows. Row order follows the
/// input window order; the caller is responsible for passing windows in a
/// deterministic order (the pipeline sorts episodes by id and windows by
/// anchor).
pub fn build_design_matrix(
    episodes: &[EpisodeRecord],
    windows: &[ForecastWindow],
    spec: &FeatureSpec,
    opts: &DesignOptions,
) -> Result<DesignMatrix> {
    opts.encoder.validate()?;
    if opts.horizons.is_empty() {
        return Err(Error::config("horizons must be non-empty"));
    }
    for pair in opts.horizons.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::config("horizons must be strictly ascending"));
        }
    }
    let by_id: BTreeMap<&str, usize> =
        episodes.iter().enumerate().map(|(i, e)| (e.episode_id.as_str(), i)).collect();
    let step_min = episodes.first().map(|e| e.cgm.grid.step_min).unwrap_or(0);
    if episodes.iter().any(|e| e.cgm.grid.step_min != step_min) {
        return Err(Error::validation("episodes disagree on grid step"));
    }

    let n_h = opts.horizons.len();
    let mut col_channels = Vec::new();
    for ch in &spec.channels {
        col_channels.extend(std::iter::repeat(*ch).take(spec.channel_width(*ch, n_h)));
    }
    let n_cols = col_channels.len();

    let mut x = Vec::with_capacity(windows.len() * n_cols);
    let mut y: Vec<Vec<f64>> = vec![Vec::with_capacity(windows.len()); n_h];
    let mut keys = Vec::with_capacity(windows.len());
    let mut last_cgm = Vec::with_capacity(windows.len());
    let mut episode_ids = BTreeSet::new();

    for w in windows {
        let ep_idx = *by_id.get(w.episode_id.as_str()).ok_or_else(|| {
            Error::validation(format!("window references unknown episode {:?}", w.episode_id))
        })?;
        let ep = &episodes[ep_idx];
        let grid = &ep.cgm.grid;
        if w.context_len != spec.context_len {
            return Err(Error::validation(format!(
                "window context {} does not match spec context {}",
                w.context_len, spec.context_len
            )));
        }
        let max_h = *opts.horizons.last().unwrap();
        if w.anchor + max_h >= grid.n_points || w.anchor + 1 < spec.context_len {
            return Err(Error::validation(format!(
                "window anchor {} out of range for episode {:?}",
                w.anchor, w.episode_id
            )));
        }
        let anchor_t = grid.time_at(w.anchor);
        let kernels = kernels_for(&w.patient_id, opts)?;
        let past_events: Vec<_> =
            ep.events.iter().filter(|e| e.t_min <= anchor_t).copied().collect();

        for ch in &spec.channels {
            match ch {
                Channel::CgmLags => {
                    let n_lags = spec.n_lags();
                    for j in (0..n_lags).rev() {
                        x.push(ep.cgm.values[w.anchor - j * spec.lag_stride]);
                    }
                }
                Channel::TimeOfDay => {
                    let tod = (anchor_t.rem_euclid(1440)) as f64;
                    let angle = 2.0 * std::f64::consts::PI * tod / 1440.0;
                    x.push(angle.sin());
                    x.push(angle.cos());
                }
                Channel::RawEvents => {
                    let ctx_start_t = grid.time_at(w.anchor + 1 - spec.context_len);
                    for kind in [EventKind::Bolus, EventKind::Meal, EventKind::Exercise] {
                        let mut bins = vec![0.0; spec.context_len];
                        for ev in past_events.iter().filter(|e| e.kind == kind) {
                            if ev.t_min >= ctx_start_t {
                                let idx = ((ev.t_min - ctx_start_t) / grid.step_min) as usize;
                                bins[idx.min(spec.context_len - 1)] += ev.magnitude;
                            }
                        }
                        x.extend(bins);
                    }
                }
                Channel::Iob => {
                    push_projected(&mut x, &past_events, EventKind::Bolus, anchor_t, grid.step_min, opts.horizons, |el| {
                        kernels.insulin.remaining_fraction(el)
                    });
                }
                Channel::Cob => {
                    push_projected(&mut x, &past_events, EventKind::Meal, anchor_t, grid.step_min, opts.horizons, |el| {
                        kernels.carb.remaining_fraction(el)
                    });
                }
                Channel::Rag => {
                    let f_bio = opts.encoder.f_bio;
                    push_projected(&mut x, &past_events, EventKind::Meal, anchor_t, grid.step_min, opts.horizons, |el| {
                        f_bio * kernels.carb.activity_normalized(el)
                    });
                }
            }
        }

        for (hi, h) in opts.horizons.iter().enumerate() {
            y[hi].push(ep.cgm.values[w.anchor + h]);
        }
        keys.push(WindowKey {
            patient: w.patient_id.clone(),
            episode: w.episode_id.clone(),
            anchor_t_min: anchor_t,
        });
        last_cgm.push(ep.cgm.values[w.anchor]);
        episode_ids.insert(w.episode_id.clone());
    }

    Ok(DesignMatrix {
        spec: spec.clone(),
        horizons: opts.horizons.to_vec(),
        step_min,
        col_channels,
        n_cols,
        x,
        y,
        keys,
        last_cgm,
        episode_ids,
    })
}

/// Channel value at the anchor plus its projection to each horizon, using
/// only events at or before the anchor.
fn push_projected(
    x: &mut Vec<f64>,
    past_events: &[crate::timeline::DriverEvent],
    kind: EventKind,
    anchor_t: i64,
    step_min: i64,
    horizons: &[usize],
    weight: impl Fn(f64) -> f64,
) {
    let at = |query_t: i64| {
        past_events
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| e.magnitude * weight((query_t - e.t_min) as f64))
            .sum::<f64>()
    };
    x.push(at(anchor_t));
    for h in horizons {
        x.push(at(anchor_t + *h as i64 * step_min));
    }
}
