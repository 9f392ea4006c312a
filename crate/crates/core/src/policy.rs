//! Behavior policy: habitual meals, matching meal boluses via the carb
//! ratio, optional snacks and exercise, and hyperglycemia corrections.
//!
//! Corrections need simulated glucose, so schedule generation replays the
//! simulator minute-by-minute with the exact loop structure `simulate` uses:
//! at every CGM sample, if the observed (noisy) glucose exceeds the
//! correction threshold and the cooldown has elapsed, a correction bolus of
//! (G - target)/CF units is appended and applied. Because impulse timing and
//! the noise stream match `simulate` exactly, feeding the returned schedule
//! back through `simulate` reproduces the replayed trajectory bit for bit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physio::{ActivitySchedule, PatientParams, SimConfig, Stepper};
use crate::rng;
use crate::timeline::{clamp_glucose, DriverEvent};

pub const MIN_PER_DAY: i64 = 1440;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    /// Habitual meal minutes-of-day.
    pub meal_times_min: Vec<i64>,
    /// Day-to-day variation of actual meal times, minutes.
    pub meal_time_jitter_sd: f64,
    pub meal_grams_mean: Vec<f64>,
    pub meal_grams_sd: Vec<f64>,
    pub snack_prob: f64,
    pub snack_grams_mean: f64,
    pub snack_grams_sd: f64,
    pub correction_threshold: f64,
    pub correction_cooldown_min: i64,
    /// Signed offset of the meal bolus around the meal time, minutes.
    pub bolus_timing_offset_sd: f64,
    pub exercise_prob: f64,
    pub policy_seed_tag: String,
}

impl Default for PolicySpec {
    fn default() -> Self {
        Self {
            meal_times_min: vec![420, 750, 1110],
            meal_time_jitter_sd: 5.0,
            meal_grams_mean: vec![55.0, 80.0, 95.0],
            meal_grams_sd: vec![10.0, 15.0, 20.0],
            snack_prob: 0.15,
            snack_grams_mean: 20.0,
            snack_grams_sd: 5.0,
            correction_threshold: 180.0,
            correction_cooldown_min: 120,
            bolus_timing_offset_sd: 10.0,
            exercise_prob: 0.25,
            policy_seed_tag: "policy".to_string(),
        }
    }
}

impl PolicySpec {
    pub fn validate(&self) -> Result<()> {
        if self.meal_times_min.len() != self.meal_grams_mean.len()
            || self.meal_times_min.len() != self.meal_grams_sd.len()
        {
            return Err(Error::config(
                "meal_times_min, meal_grams_mean, meal_grams_sd must have equal lengths",
            ));
        }
        for t in &self.meal_times_min {
            if !(0..MIN_PER_DAY).contains(t) {
                return Err(Error::config(format!("meal time {t} outside [0, 1440)")));
            }
        }
        for (name, p) in [("snack_prob", self.snack_prob), ("exercise_prob", self.exercise_prob)]
        {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if self.correction_threshold <= 150.0 {
            return Err(Error::config(format!(
                "correction_threshold must exceed the plausible basal range (> 150), got {}",
                self.correction_threshold
            )));
        }
        if self.correction_cooldown_min < 0
            || self.meal_time_jitter_sd < 0.0
            || self.bolus_timing_offset_sd < 0.0
            || self.snack_grams_sd < 0.0
        {
            return Err(Error::config("policy sds and cooldown must be >= 0"));
        }
        Ok(())
    }
}

fn gauss(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    if sd == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sd).expect("valid sd").sample(rng)
}

/// Generates the full event schedule for `days` days. Deterministic given
/// (params, spec, days, stream, sim config); the stream drives the policy's
/// own randomness while the CGM noise consumed during replay comes from the
/// simulator's keyed noise stream so that replayed and final traces agree.
pub fn generate_schedule(
    params: &PatientParams,
    spec: &PolicySpec,
    days: usize,
    stream: &mut ChaCha8Rng,
    sim_cfg: &SimConfig,
) -> Result<Vec<DriverEvent>> {
    spec.validate()?;
    params.validate()?;
    sim_cfg.validate()?;
    let duration = days as i64 * MIN_PER_DAY;
    if sim_cfg.duration_min != duration {
        return Err(Error::config(format!(
            "sim config duration {} does not match {} days",
            sim_cfg.duration_min, days
        )));
    }

    // Open-loop plan: meals, their boluses, snacks, exercise.
    let mut events: Vec<DriverEvent> = Vec::new();
    for day in 0..days as i64 {
        let day_start = day * MIN_PER_DAY;
        let day_end = day_start + MIN_PER_DAY - 1;
        for (i, habitual) in spec.meal_times_min.iter().enumerate() {
            let t = (day_start + habitual + gauss(stream, spec.meal_time_jitter_sd).round() as i64)
                .clamp(day_start, day_end);
            let grams =
                (spec.meal_grams_mean[i] + gauss(stream, spec.meal_grams_sd[i])).max(10.0);
            let bolus_t = (t + gauss(stream, spec.bolus_timing_offset_sd).round() as i64)
                .clamp(0, duration - 1);
            events.push(DriverEvent::meal(t, grams)?);
            events.push(DriverEvent::bolus(bolus_t, grams / params.cr)?);
        }
        if stream.gen::<f64>() < spec.snack_prob {
            let t = stream.gen_range(day_start + 780..=day_start + 1020);
            let grams = (spec.snack_grams_mean + gauss(stream, spec.snack_grams_sd)).max(5.0);
            let bolus_t =
                (t + gauss(stream, spec.bolus_timing_offset_sd).round() as i64).clamp(0, duration - 1);
            events.push(DriverEvent::meal(t, grams)?);
            events.push(DriverEvent::bolus(bolus_t, grams / params.cr)?);
        }
        if stream.gen::<f64>() < spec.exercise_prob {
            let start = stream.gen_range(day_start + 480..=day_start + 1140);
            let intensity = stream.gen_range(0.3..=0.8);
            let duration_min = *[30_i64, 45, 60]
                .get(stream.gen_range(0..3usize))
                .unwrap();
            events.push(DriverEvent::exercise(start, intensity, duration_min)?);
        }
    }
    events.sort_by_key(|e| e.t_min);

    // Closed-loop replay to place corrections. The loop mirrors `simulate`:
    // impulses due at a minute are applied before integrating through it,
    // and samples land at t = 0, step, 2*step, ...
    let schedule = ActivitySchedule::from_events(&events);
    let mut stepper = Stepper::new(params.clone(), sim_cfg.ode_step_min);
    let mut noise_rng = rng::stream(sim_cfg.master_seed, sim_cfg.patient_index, "cgm-noise");
    let noise = if sim_cfg.cgm_noise && params.cgm_noise_sd > 0.0 {
        Some(Normal::new(0.0, params.cgm_noise_sd).expect("valid sd"))
    } else {
        None
    };
    let sample_noise = move |rng: &mut ChaCha8Rng| noise.map(|n| n.sample(rng)).unwrap_or(0.0);

    let mut corrections: Vec<DriverEvent> = Vec::new();
    let mut pending: Option<DriverEvent> = None;
    let mut last_correction: i64 = i64::MIN / 2;
    let mut next_event = 0usize;

    // Sample 0 at t=0 consumes noise but cannot trigger anything useful:
    // the patient starts at equilibrium.
    let _ = sample_noise(&mut noise_rng);

    for minute in 0..duration {
        while next_event < events.len() && events[next_event].t_min == minute {
            stepper.apply_impulse(&events[next_event]);
            next_event += 1;
        }
        if let Some(corr) = pending.take() {
            debug_assert_eq!(corr.t_min, minute);
            stepper.apply_impulse(&corr);
            corrections.push(corr);
        }
        stepper.advance(1.0, &schedule)?;
        let t = minute + 1;
        if t % sim_cfg.grid_step_min == 0 && t < duration {
            let observed = clamp_glucose(stepper.state().g + sample_noise(&mut noise_rng));
            if observed > spec.correction_threshold
                && t - last_correction >= spec.correction_cooldown_min
            {
                let units = (observed - params.target) / params.cf;
                pending = Some(DriverEvent::bolus(t, units)?);
                last_correction = t;
            }
        }
    }
    if let Some(corr) = pending {
        // Fires only when the trigger sample sits in the final minute; the
        // bolus still belongs to the schedule.
        corrections.push(corr);
    }

    events.extend(corrections);
    events.sort_by_key(|e| e.t_min);
    Ok(events)
}

/// Convenience wrapper building the policy stream from the seed material.
pub fn policy_stream(spec: &PolicySpec, master_seed: u64, patient_index: u32) -> ChaCha8Rng {
    rng::stream(master_seed, patient_index, &spec.policy_seed_tag)
}
