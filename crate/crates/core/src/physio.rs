//! Virtual-patient simulator: Bergman-style minimal model with
//! two-compartment subcutaneous insulin kinetics, two-compartment gut
//! absorption, and circadian plus exercise modulation of insulin
//! sensitivity.
//!
//! State equations (t in minutes):
//!
//! ```text
//! dG/dt    = -(p1 + X*s(t))*G + p1*Gb + 1000*Ra(t)/Vg
//! dX/dt    = -p2*X + p3*Ip(t)
//! dIsc1/dt = -Isc1/tau_i1              (+ bolus jumps)
//! dIsc2/dt =  Isc1/tau_i1 - Isc2/tau_i2
//! Ip       =  Isc2/(tau_i2*Vi)
//! dQ1/dt   = -Q1/tau_m                 (+ meal jumps)
//! dQ2/dt   =  Q1/tau_m - Q2/tau_m
//! Ra       =  f_bio*Q2/tau_m           (g/min; the 1000 converts g to mg)
//! s(t)     = (1 + a_circ*sin(2*pi*(t - phi_circ)/1440)) * (1 + e_gain*activity(t))
//! ```
//!
//! Boluses and meals are impulses applied as state jumps at their event
//! minute; exercise contributes to `activity(t)` for its duration and has no
//! after-effect. Integration is classical RK4 at a fixed step.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::timeline::{
    clamp_glucose, DriverEvent, EpisodeRecord, EventKind, GlucoseTrace, Quality, TimeGrid,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientParams {
    /// Basal glucose, mg/dL.
    pub gb: f64,
    /// Insulin sensitivity; the per-unit glucose effect scales with si/vi.
    pub si: f64,
    /// Glucose effectiveness, 1/min.
    pub p1: f64,
    /// Remote-insulin decay, 1/min.
    pub p2: f64,
    /// Remote-insulin gain; sampled as si*p2 so steady-state action tracks si.
    pub p3: f64,
    pub tau_i1: f64,
    pub tau_i2: f64,
    /// Insulin distribution volume proxy (arbitrary units; tuned so one unit
    /// of insulin moves glucose by a realistic few tens of mg/dL).
    pub vi: f64,
    pub tau_m: f64,
    /// Carb bioavailability in (0, 1].
    pub f_bio: f64,
    /// Glucose distribution volume, dL.
    pub vg: f64,
    /// Circadian amplitude of insulin sensitivity, [0, 0.5].
    pub a_circ: f64,
    /// Circadian phase, minute of day.
    pub phi_circ: f64,
    /// Exercise sensitivity multiplier, >= 0.
    pub e_gain: f64,
    pub cgm_noise_sd: f64,
    /// Carb ratio, g/U.
    pub cr: f64,
    /// Correction factor, mg/dL per U.
    pub cf: f64,
    /// Correction target, mg/dL.
    pub target: f64,
}

impl PatientParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("si", self.si),
            ("p1", self.p1),
            ("p2", self.p2),
            ("tau_i1", self.tau_i1),
            ("tau_i2", self.tau_i2),
            ("vi", self.vi),
            ("tau_m", self.tau_m),
            ("vg", self.vg),
            ("cr", self.cr),
            ("cf", self.cf),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::validation(format!(
                    "PatientParams.{name} must be > 0, got {v}"
                )));
            }
        }
        if !(70.0..=180.0).contains(&self.gb) {
            return Err(Error::validation(format!(
                "PatientParams.gb must be in [70, 180], got {}",
                self.gb
            )));
        }
        if !(self.f_bio > 0.0 && self.f_bio <= 1.0) {
            return Err(Error::validation(format!(
                "PatientParams.f_bio must be in (0, 1], got {}",
                self.f_bio
            )));
        }
        if !(0.0..=0.5).contains(&self.a_circ) {
            return Err(Error::validation(format!(
                "PatientParams.a_circ must be in [0, 0.5], got {}",
                self.a_circ
            )));
        }
        if self.e_gain < 0.0 || self.cgm_noise_sd < 0.0 {
            return Err(Error::validation(
                "PatientParams.e_gain and cgm_noise_sd must be >= 0",
            ));
        }
        Ok(())
    }

    /// Mid-cohort reference patient used in tests and examples.
    pub fn reference() -> Self {
        let spec = CohortSpec::default();
        let mid = |b: (f64, f64)| (b.0 + b.1) / 2.0;
        let gmid = |b: (f64, f64)| (b.0 * b.1).sqrt();
        let si = gmid(spec.si);
        let p2 = gmid(spec.p2);
        Self {
            gb: mid(spec.gb),
            si,
            p1: gmid(spec.p1),
            p2,
            p3: si * p2,
            tau_i1: gmid(spec.tau_i1),
            tau_i2: gmid(spec.tau_i2),
            vi: gmid(spec.vi),
            tau_m: gmid(spec.tau_m),
            f_bio: mid(spec.f_bio),
            vg: gmid(spec.vg),
            a_circ: mid(spec.a_circ),
            phi_circ: mid(spec.phi_circ),
            e_gain: mid(spec.e_gain),
            cgm_noise_sd: mid(spec.cgm_noise_sd),
            cr: gmid(spec.cr),
            cf: gmid(spec.cf),
            target: mid(spec.target),
        }
    }
}

/// Per-parameter sampling bounds. Rate constants, time constants, volumes,
/// si, cr, and cf are drawn log-uniformly; the rest uniformly. Degenerate
/// bounds (lo == hi) pin the parameter, which is how the homogeneous cohort
/// is expressed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_patients: usize,
    pub days: usize,
    pub gb: (f64, f64),
    pub si: (f64, f64),
    pub p1: (f64, f64),
    pub p2: (f64, f64),
    pub tau_i1: (f64, f64),
    pub tau_i2: (f64, f64),
    pub vi: (f64, f64),
    pub tau_m: (f64, f64),
    pub f_bio: (f64, f64),
    pub vg: (f64, f64),
    pub a_circ: (f64, f64),
    pub phi_circ: (f64, f64),
    pub e_gain: (f64, f64),
    pub cgm_noise_sd: (f64, f64),
    pub cr: (f64, f64),
    pub cf: (f64, f64),
    pub target: (f64, f64),
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_patients: 20,
            days: 14,
            gb: (105.0, 160.0),
            // 12.5x span: an order-of-magnitude spread survives sampling.
            si: (8.0e-5, 1.0e-3),
            p1: (0.015, 0.035),
            p2: (0.015, 0.035),
            tau_i1: (50.0, 80.0),
            tau_i2: (50.0, 80.0),
            vi: (5.5e-4, 1.1e-3),
            tau_m: (50.0, 85.0),
            f_bio: (0.8, 1.0),
            vg: (110.0, 180.0),
            a_circ: (0.05, 0.3),
            phi_circ: (0.0, 1440.0),
            e_gain: (0.5, 1.5),
            cgm_noise_sd: (8.0, 16.0),
            cr: (6.0, 21.0),
            cf: (12.0, 30.0),
            target: (90.0, 110.0),
        }
    }
}

impl CohortSpec {
    /// Every parameter pinned at the default mid-point: exchangeable patients
    /// differing only in their noise and policy draws.
    pub fn homogeneous() -> Self {
        let p = PatientParams::reference();
        let d = Self::default();
        Self {
            n_patients: d.n_patients,
            days: d.days,
            gb: (p.gb, p.gb),
            si: (p.si, p.si),
            p1: (p.p1, p.p1),
            p2: (p.p2, p.p2),
            tau_i1: (p.tau_i1, p.tau_i1),
            tau_i2: (p.tau_i2, p.tau_i2),
            vi: (p.vi, p.vi),
            tau_m: (p.tau_m, p.tau_m),
            f_bio: (p.f_bio, p.f_bio),
            vg: (p.vg, p.vg),
            a_circ: (p.a_circ, p.a_circ),
            phi_circ: (p.phi_circ, p.phi_circ),
            e_gain: (p.e_gain, p.e_gain),
            cgm_noise_sd: (p.cgm_noise_sd, p.cgm_noise_sd),
            cr: (p.cr, p.cr),
            cf: (p.cf, p.cf),
            target: (p.target, p.target),
        }
    }
}

fn draw_uniform(rng: &mut impl Rng, bounds: (f64, f64), name: &str) -> Result<f64> {
    let (lo, hi) = bounds;
    if lo > hi || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::config(format!("bounds inverted for {name}: ({lo}, {hi})")));
    }
    if lo == hi {
        return Ok(lo);
    }
    Ok(rng.gen_range(lo..=hi))
}

fn draw_log_uniform(rng: &mut impl Rng, bounds: (f64, f64), name: &str) -> Result<f64> {
    let (lo, hi) = bounds;
    if !(lo > 0.0) {
        return Err(Error::config(format!(
            "log-uniform bounds for {name} must be > 0, got ({lo}, {hi})"
        )));
    }
    if lo == hi {
        return Ok(lo);
    }
    Ok(draw_uniform(rng, (lo.ln(), hi.ln()), name)?.exp())
}

/// Draws one patient. Deterministic in (spec, patient_index, master_seed)
/// and independent of how many other patients are drawn: each patient gets
/// its own keyed stream. Parameters are consumed in field order.
pub fn sample_patient(
    spec: &CohortSpec,
    patient_index: u32,
    master_seed: u64,
) -> Result<PatientParams> {
    let mut rng = rng::stream(master_seed, patient_index, "patient-params");
    let gb = draw_uniform(&mut rng, spec.gb, "gb")?;
    let si = draw_log_uniform(&mut rng, spec.si, "si")?;
    let p1 = draw_log_uniform(&mut rng, spec.p1, "p1")?;
    let p2 = draw_log_uniform(&mut rng, spec.p2, "p2")?;
    let tau_i1 = draw_log_uniform(&mut rng, spec.tau_i1, "tau_i1")?;
    let tau_i2 = draw_log_uniform(&mut rng, spec.tau_i2, "tau_i2")?;
    let vi = draw_log_uniform(&mut rng, spec.vi, "vi")?;
    let tau_m = draw_log_uniform(&mut rng, spec.tau_m, "tau_m")?;
    let f_bio = draw_uniform(&mut rng, spec.f_bio, "f_bio")?;
    let vg = draw_log_uniform(&mut rng, spec.vg, "vg")?;
    let a_circ = draw_uniform(&mut rng, spec.a_circ, "a_circ")?;
    let phi_circ = draw_uniform(&mut rng, spec.phi_circ, "phi_circ")?;
    let e_gain = draw_uniform(&mut rng, spec.e_gain, "e_gain")?;
    let cgm_noise_sd = draw_uniform(&mut rng, spec.cgm_noise_sd, "cgm_noise_sd")?;
    let cr = draw_log_uniform(&mut rng, spec.cr, "cr")?;
    let cf = draw_log_uniform(&mut rng, spec.cf, "cf")?;
    let target = draw_uniform(&mut rng, spec.target, "target")?;
    let params = PatientParams {
        gb,
        si,
        p1,
        p2,
        p3: si * p2,
        tau_i1,
        tau_i2,
        vi,
        tau_m,
        f_bio,
        vg,
        a_circ,
        phi_circ,
        e_gain,
        cgm_noise_sd,
        cr,
        cf,
        target,
    };
    params.validate()?;
    Ok(params)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentState {
    pub g: f64,
    pub x: f64,
    pub isc1: f64,
    pub isc2: f64,
    pub q1: f64,
    pub q2: f64,
}

impl LatentState {
    pub fn equilibrium(params: &PatientParams) -> Self {
        Self { g: params.gb, x: 0.0, isc1: 0.0, isc2: 0.0, q1: 0.0, q2: 0.0 }
    }

    fn is_finite(&self) -> bool {
        self.g.is_finite()
            && self.x.is_finite()
            && self.isc1.is_finite()
            && self.isc2.is_finite()
            && self.q1.is_finite()
            && self.q2.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub ode_step_min: f64,
    pub duration_min: i64,
    pub grid_step_min: i64,
    pub master_seed: u64,
    pub patient_index: u32,
    pub cgm_noise: bool,
}

impl SimConfig {
    pub fn new(duration_min: i64, master_seed: u64, patient_index: u32) -> Self {
        Self {
            ode_step_min: 1.0,
            duration_min,
            grid_step_min: 5,
            master_seed,
            patient_index,
            cgm_noise: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ode_step_min > 0.0) {
            return Err(Error::validation("SimConfig.ode_step_min must be > 0"));
        }
        if self.duration_min <= 0 || self.grid_step_min <= 0 {
            return Err(Error::validation(
                "SimConfig.duration_min and grid_step_min must be > 0",
            ));
        }
        let ratio = self.grid_step_min as f64 / self.ode_step_min;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return Err(Error::validation(format!(
                "ode_step_min {} must divide grid_step_min {}",
                self.ode_step_min, self.grid_step_min
            )));
        }
        if self.duration_min % self.grid_step_min != 0 {
            return Err(Error::validation(format!(
                "duration_min {} must be a multiple of grid_step_min {}",
                self.duration_min, self.grid_step_min
            )));
        }
        Ok(())
    }
}

/// Sum of intensities of exercise events active at time t (half-open
/// intervals `[start, start + duration)`).
#[derive(Debug, Clone, Default)]
pub struct ActivitySchedule {
    intervals: Vec<(f64, f64, f64)>,
}

impl ActivitySchedule {
    pub fn from_events(events: &[DriverEvent]) -> Self {
        let intervals = events
            .iter()
            .filter(|e| e.kind == EventKind::Exercise)
            .map(|e| (e.t_min as f64, (e.t_min + e.duration_min) as f64, e.magnitude))
            .collect();
        Self { intervals }
    }

    pub fn at(&self, t: f64) -> f64 {
        self.intervals
            .iter()
            .filter(|(a, b, _)| t >= *a && t < *b)
            .map(|(_, _, m)| m)
            .sum()
    }
}

fn sensitivity(params: &PatientParams, t: f64, activity: f64) -> f64 {
    let circ = 1.0
        + params.a_circ * (2.0 * std::f64::consts::PI * (t - params.phi_circ) / 1440.0).sin();
    circ * (1.0 + params.e_gain * activity)
}

fn rhs(params: &PatientParams, s: &LatentState, sens: f64) -> LatentState {
    let ip = s.isc2 / (params.tau_i2 * params.vi);
    let ra_g = params.f_bio * s.q2 / params.tau_m;
    LatentState {
        g: -(params.p1 + s.x * sens) * s.g + params.p1 * params.gb + 1000.0 * ra_g / params.vg,
        x: -params.p2 * s.x + params.p3 * ip,
        isc1: -s.isc1 / params.tau_i1,
        isc2: s.isc1 / params.tau_i1 - s.isc2 / params.tau_i2,
        q1: -s.q1 / params.tau_m,
        q2: s.q1 / params.tau_m - s.q2 / params.tau_m,
    }
}

/// Low-level integrator with explicit impulse application, shared by the
/// open-loop simulator and the closed-loop behavior policy replay.
#[derive(Debug, Clone)]
pub struct Stepper {
    params: PatientParams,
    state: LatentState,
    t: f64,
    ode_step: f64,
}

impl Stepper {
    pub fn new(params: PatientParams, ode_step: f64) -> Self {
        let state = LatentState::equilibrium(&params);
        Self { params, state, t: 0.0, ode_step }
    }

    pub fn state(&self) -> &LatentState {
        &self.state
    }

    pub fn t_min(&self) -> f64 {
        self.t
    }

    pub fn params(&self) -> &PatientParams {
        &self.params
    }

    /// Applies a bolus or meal as a state jump. Exercise events carry no
    /// state; they enter through the activity schedule.
    pub fn apply_impulse(&mut self, event: &DriverEvent) {
        match event.kind {
            EventKind::Bolus => self.state.isc1 += event.magnitude,
            EventKind::Meal => self.state.q1 += event.magnitude,
            EventKind::Exercise => {}
        }
    }

    /// Integrates forward by `dt_min` (a multiple of the ODE step) with RK4.
    pub fn advance(&mut self, dt_min: f64, schedule: &ActivitySchedule) -> Result<()> {
        let n_steps = (dt_min / self.ode_step).round() as usize;
        let h = self.ode_step;
        for _ in 0..n_steps {
            let t = self.t;
            let s = self.state;
            let k1 = rhs(&self.params, &s, sensitivity(&self.params, t, schedule.at(t)));
            let mid_sens = sensitivity(&self.params, t + 0.5 * h, schedule.at(t + 0.5 * h));
            let k2 = rhs(&self.params, &add_scaled(&s, &k1, 0.5 * h), mid_sens);
            let k3 = rhs(&self.params, &add_scaled(&s, &k2, 0.5 * h), mid_sens);
            let end_sens = sensitivity(&self.params, t + h, schedule.at(t + h));
            let k4 = rhs(&self.params, &add_scaled(&s, &k3, h), end_sens);
            self.state = LatentState {
                g: s.g + h / 6.0 * (k1.g + 2.0 * k2.g + 2.0 * k3.g + k4.g),
                x: s.x + h / 6.0 * (k1.x + 2.0 * k2.x + 2.0 * k3.x + k4.x),
                isc1: s.isc1 + h / 6.0 * (k1.isc1 + 2.0 * k2.isc1 + 2.0 * k3.isc1 + k4.isc1),
                isc2: s.isc2 + h / 6.0 * (k1.isc2 + 2.0 * k2.isc2 + 2.0 * k3.isc2 + k4.isc2),
                q1: s.q1 + h / 6.0 * (k1.q1 + 2.0 * k2.q1 + 2.0 * k3.q1 + k4.q1),
                q2: s.q2 + h / 6.0 * (k1.q2 + 2.0 * k2.q2 + 2.0 * k3.q2 + k4.q2),
            };
            self.t += h;
            if !self.state.is_finite() {
                return Err(Error::validation(format!("diverged at t={}", self.t)));
            }
        }
        Ok(())
    }
}

fn add_scaled(s: &LatentState, d: &LatentState, h: f64) -> LatentState {
    LatentState {
        g: s.g + h * d.g,
        x: s.x + h * d.x,
        isc1: s.isc1 + h * d.isc1,
        isc2: s.isc2 + h * d.isc2,
        q1: s.q1 + h * d.q1,
        q2: s.q2 + h * d.q2,
    }
}

/// Runs the model over `[0, duration)` and returns the episode with both the
/// noisy CGM trace and the noise-free latent trace on the sampling grid.
pub fn simulate(
    params: &PatientParams,
    events: &[DriverEvent],
    cfg: &SimConfig,
) -> Result<EpisodeRecord> {
    params.validate()?;
    cfg.validate()?;
    for ev in events {
        if ev.t_min < 0 || ev.t_min >= cfg.duration_min {
            return Err(Error::validation(format!(
                "event at t={} outside run duration [0, {})",
                ev.t_min, cfg.duration_min
            )));
        }
    }
    let mut sorted: Vec<DriverEvent> = events.to_vec();
    sorted.sort_by_key(|e| e.t_min);
    let schedule = ActivitySchedule::from_events(&sorted);

    let n_points = (cfg.duration_min / cfg.grid_step_min) as usize;
    let grid = TimeGrid::new(0, cfg.grid_step_min, n_points)?;
    let mut latent = Vec::with_capacity(n_points);
    let mut stepper = Stepper::new(params.clone(), cfg.ode_step_min);
    let mut next_event = 0usize;
    latent.push(stepper.state().g);
    for minute in 0..cfg.duration_min {
        while next_event < sorted.len() && sorted[next_event].t_min == minute {
            stepper.apply_impulse(&sorted[next_event]);
            next_event += 1;
        }
        stepper.advance(1.0, &schedule)?;
        let t = minute + 1;
        if t % cfg.grid_step_min == 0 && t < cfg.duration_min {
            latent.push(stepper.state().g);
        }
    }

    let latent_clamped: Vec<f64> = latent.iter().map(|g| clamp_glucose(*g)).collect();
    let cgm_values: Vec<f64> = if cfg.cgm_noise && params.cgm_noise_sd > 0.0 {
        let mut noise_rng = rng::stream(cfg.master_seed, cfg.patient_index, "cgm-noise");
        let normal = Normal::new(0.0, params.cgm_noise_sd)
            .map_err(|e| Error::config(format!("cgm noise: {e}")))?;
        latent
            .iter()
            .map(|g| clamp_glucose(g + normal.sample(&mut noise_rng)))
            .collect()
    } else {
        latent_clamped.clone()
    };

    let quality = vec![Quality::Measured; n_points];
    let cgm = GlucoseTrace::new(grid, cgm_values, quality.clone())?;
    let latent_trace = GlucoseTrace::new(grid, latent_clamped, quality)?;
    let patient_id = format!("p{:03}", cfg.patient_index);
    EpisodeRecord::new(patient_id.clone(), patient_id, cgm, sorted, Some(latent_trace))
}

/// A single-event edit for counterfactual runs.
#[derive(Debug, Clone, PartialEq)]
pub enum EventEdit {
    NoOp,
    Add(DriverEvent),
    Remove(usize),
    Rescale { index: usize, factor: f64 },
}

/// Runs base and edited event lists under identical, noise-free conditions.
/// Any difference between the two latent traces is attributable to the edit.
pub fn counterfactual_pair(
    params: &PatientParams,
    base_events: &[DriverEvent],
    edit: &EventEdit,
    cfg: &SimConfig,
) -> Result<(EpisodeRecord, EpisodeRecord)> {
    let mut quiet = cfg.clone();
    quiet.cgm_noise = false;
    let edited_events = apply_edit(base_events, edit)?;
    let base = simulate(params, base_events, &quiet)?;
    let edited = simulate(params, &edited_events, &quiet)?;
    Ok((base, edited))
}

pub fn apply_edit(events: &[DriverEvent], edit: &EventEdit) -> Result<Vec<DriverEvent>> {
    let mut out = events.to_vec();
    match edit {
        EventEdit::NoOp => {}
        EventEdit::Add(ev) => {
            let pos = out.partition_point(|e| e.t_min <= ev.t_min);
            out.insert(pos, *ev);
        }
        EventEdit::Remove(index) => {
            if *index >= out.len() {
                return Err(Error::validation(format!(
                    "edit references nonexistent event index {index} (have {})",
                    out.len()
                )));
            }
            out.remove(*index);
        }
        EventEdit::Rescale { index, factor } => {
            if *index >= out.len() {
                return Err(Error::validation(format!(
                    "edit references nonexistent event index {index} (have {})",
                    out.len()
                )));
            }
            let ev = out[*index];
            out[*index] = DriverEvent::new(ev.t_min, ev.kind, ev.magnitude * factor, ev.duration_min)?;
        }
    }
    Ok(out)
}
