//! Causal probes: does a forecaster respond to dose edits the way the
//! simulator says it should? Probe episodes are simulated noise-free, a
//! handful of anchors are drawn per patient, and each anchor gets a small
//! dose grid per scenario (insulin boluses, carb loads). Ground truth is the
//! latent glucose of the counterfactual run at the scenario's probe horizon.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::features::{build_design_matrix, Channel, DesignMatrix, DesignOptions, FeatureSpec};
use crate::forecast::models::{forecast, TrainedModel, TrainingProbes};
use crate::physio::{counterfactual_pair, simulate, EventEdit, PatientParams, SimConfig};
use crate::policy::{generate_schedule, PolicySpec, MIN_PER_DAY};
use crate::rng::stream;
use crate::timeline::{DriverEvent, EpisodeRecord, ForecastWindow};

/// Truth differences at or below this are treated as ties and excluded at
/// pair generation; it matches the serialization precision of traces.
pub const TIE_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeScenario {
    Insulin,
    Carb,
}

impl ProbeScenario {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProbeScenario::Insulin => "insulin",
            ProbeScenario::Carb => "carb",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub insulin_doses: Vec<f64>,
    pub carb_grams: Vec<f64>,
    pub insulin_horizon_min: i64,
    pub carb_horizon_min: i64,
    /// Monotonicity tolerance in mg/dL.
    pub epsilon: f64,
    /// Anchors drawn per patient per scenario.
    pub n_anchors: usize,
    pub seed_tag: String,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            insulin_doses: vec![0.0, 2.0, 4.0],
            carb_grams: vec![0.0, 20.0, 40.0],
            insulin_horizon_min: 120,
            carb_horizon_min: 60,
            epsilon: 0.5,
            n_anchors: 6,
            seed_tag: "probe".to_string(),
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, doses) in
            [("insulin_doses", &self.insulin_doses), ("carb_grams", &self.carb_grams)]
        {
            if doses.len() < 2 {
                return Err(Error::config(format!("{name} needs at least 2 entries")));
            }
            for pair in doses.windows(2) {
                if pair[1] <= pair[0] {
                    return Err(Error::config(format!("{name} must be strictly ascending")));
                }
            }
            if doses[0] < 0.0 {
                return Err(Error::config(format!("{name} must be non-negative")));
            }
        }
        if self.epsilon < 0.0 {
            return Err(Error::config("probe epsilon must be >= 0"));
        }
        if self.n_anchors == 0 {
            return Err(Error::config("n_anchors must be >= 1"));
        }
        Ok(())
    }
}

/// One anchor's dose grid: the feature row the model would see per dose and
/// the simulator's noise-free outcome at the probe horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseProbe {
    pub scenario: ProbeScenario,
    pub patient_id: String,
    pub episode_id: String,
    pub anchor_t_min: i64,
    pub probe_horizon_min: i64,
    pub doses: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
    pub truths: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub col_channels: Vec<Channel>,
    pub horizons: Vec<usize>,
    pub step_min: i64,
    pub probes: Vec<DoseProbe>,
}

/// A single ranked comparison: two doses at one anchor whose true outcomes
/// differ by more than the tie tolerance. `sign` is +1 when the higher dose
/// truly leads to higher glucose at the probe horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionPair {
    pub probe_index: usize,
    pub lo_dose_index: usize,
    pub hi_dose_index: usize,
    pub sign: f64,
}

impl ProbeSet {
    pub fn merge(mut sets: Vec<ProbeSet>) -> Result<ProbeSet> {
        let first = sets
            .first()
            .ok_or_else(|| Error::validation("no probe sets to merge"))?;
        let (col_channels, horizons, step_min) =
            (first.col_channels.clone(), first.horizons.clone(), first.step_min);
        let mut probes = Vec::new();
        for set in &mut sets {
            if set.col_channels != col_channels
                || set.horizons != horizons
                || set.step_min != step_min
            {
                return Err(Error::validation("probe sets were built under different specs"));
            }
            probes.append(&mut set.probes);
        }
        Ok(ProbeSet { col_channels, horizons, step_min, probes })
    }

    /// All dose pairs with distinct ground truth, ties excluded.
    pub fn pairs(&self) -> Vec<InterventionPair> {
        let mut out = Vec::new();
        for (pi, probe) in self.probes.iter().enumerate() {
            for i in 0..probe.doses.len() {
                for j in i + 1..probe.doses.len() {
                    let diff = probe.truths[j] - probe.truths[i];
                    if diff.abs() > TIE_EPSILON {
                        out.push(InterventionPair {
                            probe_index: pi,
                            lo_dose_index: i,
                            hi_dose_index: j,
                            sign: diff.signum(),
                        });
                    }
                }
            }
        }
        out
    }

    fn head_for(&self, probe: &DoseProbe, model_horizons: &[usize]) -> Result<usize> {
        let steps = (probe.probe_horizon_min / self.step_min) as usize;
        model_horizons.iter().position(|h| *h == steps).ok_or_else(|| {
            Error::validation(format!(
                "model has no forecast head at the {} min probe horizon",
                probe.probe_horizon_min
            ))
        })
    }
}

fn probe_event(scenario: ProbeScenario, t_min: i64, dose: f64) -> Result<DriverEvent> {
    match scenario {
        ProbeScenario::Insulin => DriverEvent::bolus(t_min, dose),
        ProbeScenario::Carb => DriverEvent::meal(t_min, dose),
    }
}

/// Generates one patient's probes. The probe episode is simulated noise-free
/// from a schedule drawn on its own keyed stream, so it never collides with
/// benchmark episodes.
pub fn generate_probe_set(
    params: &PatientParams,
    patient_index: u32,
    master_seed: u64,
    policy: &PolicySpec,
    days: usize,
    spec: &FeatureSpec,
    opts: &DesignOptions,
    cfg: &ProbeConfig,
) -> Result<ProbeSet> {
    cfg.validate()?;
    let duration = days as i64 * MIN_PER_DAY;
    let mut sim_cfg = SimConfig::new(duration, master_seed, patient_index);
    sim_cfg.cgm_noise = false;
    let mut sched_rng = stream(master_seed, patient_index, "probe-schedule");
    let events = generate_schedule(params, policy, days, &mut sched_rng, &sim_cfg)?;
    let base = simulate(params, &events, &sim_cfg)?;
    let step = base.cgm.grid.step_min;
    let n = base.cgm.grid.n_points;

    let max_h = *opts
        .horizons
        .iter()
        .max()
        .ok_or_else(|| Error::config("probe generation needs at least one horizon"))?;
    let scenarios: [(ProbeScenario, &Vec<f64>, i64); 2] = [
        (ProbeScenario::Insulin, &cfg.insulin_doses, cfg.insulin_horizon_min),
        (ProbeScenario::Carb, &cfg.carb_grams, cfg.carb_horizon_min),
    ];
    let mut h_steps = [0usize; 2];
    for (i, (sc, _, h_min)) in scenarios.iter().enumerate() {
        if *h_min < step {
            return Err(Error::config(format!(
                "{} probe horizon {} min is shorter than the {} min grid step",
                sc.as_str(),
                h_min,
                step
            )));
        }
        if h_min % step != 0 {
            return Err(Error::config(format!(
                "{} probe horizon {} min is not a multiple of the {} min grid step",
                sc.as_str(),
                h_min,
                step
            )));
        }
        let hs = (h_min / step) as usize;
        if !opts.horizons.contains(&hs) {
            return Err(Error::config(format!(
                "{} probe horizon {} min is missing from the model horizons",
                sc.as_str(),
                h_min
            )));
        }
        h_steps[i] = hs;
    }

    let lo_anchor = spec.context_len - 1;
    let hi_anchor = n
        .checked_sub(1 + max_h)
        .filter(|hi| *hi >= lo_anchor)
        .ok_or_else(|| Error::validation("probe episode too short for context plus horizon"))?;
    let n_valid = hi_anchor - lo_anchor + 1;
    let k = cfg.n_anchors.min(n_valid);
    let mut anchor_rng = stream(master_seed, patient_index, &cfg.seed_tag);
    let mut anchors: Vec<usize> = rand::seq::index::sample(&mut anchor_rng, n_valid, k)
        .into_iter()
        .map(|i| lo_anchor + i)
        .collect();
    anchors.sort_unstable();

    let pid = base.patient_id.clone();
    let episode_id = format!("{pid}_probe");
    let latent = base
        .latent_glucose
        .as_ref()
        .ok_or_else(|| Error::validation("probe simulation produced no latent trace"))?;

    let mut probes = Vec::new();
    let mut col_channels = Vec::new();
    for (si, (scenario, doses, h_min)) in scenarios.iter().enumerate() {
        for &anchor in &anchors {
            let anchor_t = base.cgm.grid.time_at(anchor);
            let target = anchor + h_steps[si];
            let mut rows = Vec::with_capacity(doses.len());
            let mut truths = Vec::with_capacity(doses.len());
            for &dose in doses.iter() {
                let (edit, evts) = if dose == 0.0 {
                    (EventEdit::NoOp, events.clone())
                } else {
                    let ev = probe_event(*scenario, anchor_t, dose)?;
                    (EventEdit::Add(ev), Vec::new())
                };
                let truth = if dose == 0.0 {
                    latent.values[target]
                } else {
                    let (_, edited) = counterfactual_pair(params, &events, &edit, &sim_cfg)?;
                    edited
                        .latent_glucose
                        .as_ref()
                        .ok_or_else(|| {
                            Error::validation("counterfactual run produced no latent trace")
                        })?
                        .values[target]
                };
                let row_events = if dose == 0.0 {
                    evts
                } else {
                    crate::physio::apply_edit(&events, &edit)?
                };
                let row_ep = EpisodeRecord::new(
                    &pid,
                    &episode_id,
                    base.cgm.clone(),
                    row_events,
                    None,
                )?;
                let window = ForecastWindow {
                    patient_id: pid.clone(),
                    episode_id: episode_id.clone(),
                    anchor,
                    anchor_t_min: anchor_t,
                    context_len: spec.context_len,
                    horizons: opts.horizons.to_vec(),
                };
                let dm = build_design_matrix(&[row_ep], &[window], spec, opts)?;
                if col_channels.is_empty() {
                    col_channels = dm.col_channels.clone();
                }
                rows.push(dm.row(0).to_vec());
                truths.push(truth);
            }
            probes.push(DoseProbe {
                scenario: *scenario,
                patient_id: pid.clone(),
                episode_id: episode_id.clone(),
                anchor_t_min: anchor_t,
                probe_horizon_min: *h_min,
                doses: (*doses).clone(),
                rows,
                truths,
            });
        }
    }
    Ok(ProbeSet { col_channels, horizons: opts.horizons.to_vec(), step_min: step, probes })
}

/// Predictions per probe per dose at that probe's horizon. The probe rows
/// are restricted to the model's channels, so a univariate model sees
/// identical rows across doses.
pub fn predict_probes(model: &TrainedModel, set: &ProbeSet) -> Result<Vec<Vec<f64>>> {
    let keep: Vec<usize> = if set.col_channels == model.col_channels {
        (0..set.col_channels.len()).collect()
    } else {
        let keep: Vec<usize> = set
            .col_channels
            .iter()
            .enumerate()
            .filter(|(_, c)| model.channels.contains(c))
            .map(|(i, _)| i)
            .collect();
        let restricted: Vec<Channel> = keep.iter().map(|&i| set.col_channels[i]).collect();
        if restricted != model.col_channels {
            return Err(Error::validation(
                "model feature layout does not match the probe rows",
            ));
        }
        keep
    };
    let mut preds = Vec::with_capacity(set.probes.len());
    let mut buf = Vec::new();
    for probe in &set.probes {
        let head = set.head_for(probe, &model.horizons)?;
        let mut per_dose = Vec::with_capacity(probe.rows.len());
        for row in &probe.rows {
            buf.clear();
            buf.extend(keep.iter().map(|&i| row[i]));
            per_dose.push(forecast(model, &buf, Some(&probe.patient_id))?[head]);
        }
        preds.push(per_dose);
    }
    Ok(preds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingStats {
    pub error: f64,
    pub n_pairs: usize,
    /// Pairs the model left exactly tied; each counts half an error, the
    /// expected cost of guessing.
    pub predicted_ties: usize,
}

pub fn ranking_error_from_predictions(
    set: &ProbeSet,
    preds: &[Vec<f64>],
) -> Result<RankingStats> {
    let pairs = set.pairs();
    if pairs.is_empty() {
        return Err(Error::validation("no intervention pairs; generate probes first"));
    }
    let mut err_acc = 0.0;
    let mut ties = 0usize;
    for p in &pairs {
        let diff = preds[p.probe_index][p.hi_dose_index] - preds[p.probe_index][p.lo_dose_index];
        if diff == 0.0 {
            err_acc += 0.5;
            ties += 1;
        } else if diff.signum() != p.sign {
            err_acc += 1.0;
        }
    }
    Ok(RankingStats { error: err_acc / pairs.len() as f64, n_pairs: pairs.len(), predicted_ties: ties })
}

pub fn treatment_ranking_error(model: &TrainedModel, set: &ProbeSet) -> Result<RankingStats> {
    let preds = predict_probes(model, set)?;
    ranking_error_from_predictions(set, &preds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityResult {
    pub violation_rate: f64,
    pub n_comparisons: usize,
    /// True when predictions never move with dose at any anchor; the
    /// signature of a model without driver channels.
    pub insensitive: bool,
    pub max_sensitivity: f64,
}

pub fn dose_monotonicity_from_predictions(
    set: &ProbeSet,
    preds: &[Vec<f64>],
    epsilon: f64,
) -> Result<MonotonicityResult> {
    if epsilon < 0.0 {
        return Err(Error::config("epsilon must be >= 0"));
    }
    if set.probes.is_empty() {
        return Err(Error::validation("no probes to check"));
    }
    let mut violations = 0usize;
    let mut comparisons = 0usize;
    let mut max_sens = 0.0f64;
    for (pi, probe) in set.probes.iter().enumerate() {
        let p = &preds[pi];
        let lo = p.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max_sens = max_sens.max(hi - lo);
        for i in 0..p.len() - 1 {
            let diff = p[i + 1] - p[i];
            let violated = match probe.scenario {
                ProbeScenario::Insulin => diff > epsilon,
                ProbeScenario::Carb => diff < -epsilon,
            };
            comparisons += 1;
            if violated {
                violations += 1;
            }
        }
    }
    Ok(MonotonicityResult {
        violation_rate: violations as f64 / comparisons as f64,
        n_comparisons: comparisons,
        insensitive: max_sens == 0.0,
        max_sensitivity: max_sens,
    })
}

pub fn dose_monotonicity_check(
    model: &TrainedModel,
    set: &ProbeSet,
    epsilon: f64,
) -> Result<MonotonicityResult> {
    let preds = predict_probes(model, set)?;
    dose_monotonicity_from_predictions(set, &preds, epsilon)
}

/// Hinge ranking penalty over (pred_lo, pred_hi, sign) triples:
/// mean of max(0, margin - sign * (pred_hi - pred_lo)). Zero exactly when
/// every pair is ordered correctly with at least the margin to spare.
pub fn ranking_penalty(pairs: &[(f64, f64, f64)], margin: f64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let total: f64 = pairs
        .iter()
        .map(|(lo, hi, sign)| (margin - sign * (hi - lo)).max(0.0))
        .sum();
    total / pairs.len() as f64
}

/// Model-level penalty over a probe set, used for reporting.
pub fn model_ranking_penalty(
    model: &TrainedModel,
    set: &ProbeSet,
    margin: f64,
) -> Result<f64> {
    let preds = predict_probes(model, set)?;
    let triples: Vec<(f64, f64, f64)> = set
        .pairs()
        .iter()
        .map(|p| {
            (
                preds[p.probe_index][p.lo_dose_index],
                preds[p.probe_index][p.hi_dose_index],
                p.sign,
            )
        })
        .collect();
    Ok(ranking_penalty(&triples, margin))
}

/// Bridges a probe set into the mlp training regularizer. The set must be
/// built under the same feature spec and horizons as the training matrix.
pub fn training_probes(set: &ProbeSet, dm: &DesignMatrix) -> Result<TrainingProbes> {
    if set.col_channels != dm.col_channels {
        return Err(Error::validation(
            "training probes were built under a different feature spec",
        ));
    }
    if set.horizons != dm.horizons {
        return Err(Error::validation("training probes use different horizons"));
    }
    let pairs = set.pairs();
    let n_cols = dm.n_cols;
    let mut rows_lo = Vec::with_capacity(pairs.len() * n_cols);
    let mut rows_hi = Vec::with_capacity(pairs.len() * n_cols);
    let mut signs = Vec::with_capacity(pairs.len());
    let mut heads = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let probe = &set.probes[p.probe_index];
        rows_lo.extend_from_slice(&probe.rows[p.lo_dose_index]);
        rows_hi.extend_from_slice(&probe.rows[p.hi_dose_index]);
        signs.push(p.sign);
        heads.push(set.head_for(probe, &dm.horizons)?);
    }
    Ok(TrainingProbes { n_cols, rows_lo, rows_hi, signs, heads })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioStats {
    pub scenario: ProbeScenario,
    pub n_pairs: usize,
    pub ranking_error: f64,
    pub violation_rate: f64,
    pub n_comparisons: usize,
    pub insensitive: bool,
    pub max_sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub monotonicity_violation_rate: f64,
    pub ranking_error: f64,
    pub n_pairs: usize,
    pub insensitive: bool,
    pub scenarios: Vec<ScenarioStats>,
}

pub fn probe_report(model: &TrainedModel, set: &ProbeSet, epsilon: f64) -> Result<ProbeReport> {
    let pooled_rank = treatment_ranking_error(model, set)?;
    let pooled_mono = dose_monotonicity_check(model, set, epsilon)?;
    let mut scenarios = Vec::new();
    for scenario in [ProbeScenario::Insulin, ProbeScenario::Carb] {
        let probes: Vec<DoseProbe> =
            set.probes.iter().filter(|p| p.scenario == scenario).cloned().collect();
        if probes.is_empty() {
            continue;
        }
        let sub = ProbeSet {
            col_channels: set.col_channels.clone(),
            horizons: set.horizons.clone(),
            step_min: set.step_min,
            probes,
        };
        let rank = treatment_ranking_error(model, &sub)?;
        let mono = dose_monotonicity_check(model, &sub, epsilon)?;
        scenarios.push(ScenarioStats {
            scenario,
            n_pairs: rank.n_pairs,
            ranking_error: rank.error,
            violation_rate: mono.violation_rate,
            n_comparisons: mono.n_comparisons,
            insensitive: mono.insensitive,
            max_sensitivity: mono.max_sensitivity,
        });
    }
    Ok(ProbeReport {
        monotonicity_violation_rate: pooled_mono.violation_rate,
        ranking_error: pooled_rank.error,
        n_pairs: pooled_rank.n_pairs,
        insensitive: pooled_mono.insensitive,
        scenarios,
    })
}
