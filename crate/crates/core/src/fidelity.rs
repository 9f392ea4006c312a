//! Event-log degradation: turns the simulator's ground-truth driver events
//! into the kind of diary a patient actually keeps. Time jitter, magnitude
//! noise, systematic carb misreporting, and event dropout are all applied to
//! the *logged* copy only; the latent events keep driving the simulation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timeline::{DriverEvent, EventKind};

/// Which events are eligible for dropout. Real diaries mostly omit snacks
/// and exercise; corrections go unlogged less often, and "everything" exists
/// for ablations that wipe the driver channels entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutScope {
    SnacksExercise,
    PlusCorrections,
    AllEvents,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    /// Gaussian sd of the logged-time error, minutes.
    pub jitter_sd_min: f64,
    /// Multiplicative lognormal sd of logged carbs (exact sd of the factor).
    pub carb_noise_frac: f64,
    /// Multiplicative lognormal sd of logged doses.
    pub dose_noise_frac: f64,
    pub dropout_prob: f64,
    /// Meals below this gram count qualify as snacks for dropout purposes.
    pub snack_grams_threshold: f64,
    /// Systematic carb misreporting: logged grams scale by (1 + bias).
    pub carb_bias_frac: f64,
    pub dropout_scope: DropoutScope,
    pub seed_tag: String,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            jitter_sd_min: 0.0,
            carb_noise_frac: 0.0,
            dose_noise_frac: 0.0,
            dropout_prob: 0.0,
            snack_grams_threshold: 30.0,
            carb_bias_frac: 0.0,
            dropout_scope: DropoutScope::SnacksExercise,
            seed_tag: "degrade".to_string(),
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.jitter_sd_min < 0.0
            || self.carb_noise_frac < 0.0
            || self.dose_noise_frac < 0.0
        {
            return Err(Error::config("fidelity noise fractions must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(Error::config(format!(
                "dropout_prob must be in [0, 1], got {}",
                self.dropout_prob
            )));
        }
        if self.carb_bias_frac <= -1.0 {
            return Err(Error::config(format!(
                "carb_bias_frac must be > -1, got {}",
                self.carb_bias_frac
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.jitter_sd_min == 0.0
            && self.carb_noise_frac == 0.0
            && self.dose_noise_frac == 0.0
            && self.dropout_prob == 0.0
            && self.carb_bias_frac == 0.0
    }
}

/// Named fidelity presets, ordered from benign to hostile.
pub fn preset(name: &str) -> Result<PerturbationConfig> {
    let base = PerturbationConfig::default();
    match name {
        "clean" => Ok(base),
        "paper-C2" => Ok(PerturbationConfig {
            jitter_sd_min: 30.0,
            carb_noise_frac: 0.4,
            dose_noise_frac: 0.2,
            dropout_prob: 0.2,
            carb_bias_frac: -0.1,
            dropout_scope: DropoutScope::PlusCorrections,
            ..base
        }),
        "extreme" => Ok(PerturbationConfig {
            jitter_sd_min: 45.0,
            carb_noise_frac: 0.5,
            dose_noise_frac: 0.3,
            dropout_prob: 0.5,
            carb_bias_frac: -0.2,
            dropout_scope: DropoutScope::PlusCorrections,
            ..base
        }),
        other => Err(Error::config(format!(
            "unknown fidelity preset {other:?}; known: clean, paper-C2, extreme"
        ))),
    }
}

pub fn ordered_preset_names() -> Vec<&'static str> {
    vec!["clean", "paper-C2", "extreme"]
}

/// Mean-one multiplicative lognormal: sigma^2 = ln(1 + frac^2) makes the
/// factor's standard deviation exactly `frac`.
fn lognormal_factor(rng: &mut ChaCha8Rng, frac: f64) -> f64 {
    if frac == 0.0 {
        return 1.0;
    }
    let sigma2 = (1.0 + frac * frac).ln();
    let dist = LogNormal::new(-0.5 * sigma2, sigma2.sqrt()).expect("valid lognormal");
    dist.sample(rng)
}

fn dropout_eligible(ev: &DriverEvent, events: &[DriverEvent], cfg: &PerturbationConfig) -> bool {
    match cfg.dropout_scope {
        DropoutScope::AllEvents => true,
        DropoutScope::SnacksExercise => match ev.kind {
            EventKind::Exercise => true,
            EventKind::Meal => ev.magnitude < cfg.snack_grams_threshold,
            EventKind::Bolus => false,
        },
        DropoutScope::PlusCorrections => match ev.kind {
            EventKind::Exercise => true,
            EventKind::Meal => ev.magnitude < cfg.snack_grams_threshold,
            // Correction boluses cannot be identified exactly after the
            // fact; a bolus with no meal within 45 minutes is treated as
            // one, which matches how the policy spaces its doses.
            EventKind::Bolus => !events.iter().any(|m| {
                m.kind == EventKind::Meal && (m.t_min - ev.t_min).abs() <= 45
            }),
        },
    }
}

/// Applies the configured degradation. Output is re-sorted by time; logged
/// times stay integer minutes and are clamped to be non-negative. Identity
/// configuration returns the input exactly.
pub fn degrade_events(
    events: &[DriverEvent],
    cfg: &PerturbationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DriverEvent>> {
    cfg.validate()?;
    if cfg.is_identity() {
        return Ok(events.to_vec());
    }
    let jitter = if cfg.jitter_sd_min > 0.0 {
        Some(Normal::new(0.0, cfg.jitter_sd_min).expect("valid sd"))
    } else {
        None
    };
    let mut out = Vec::with_capacity(events.len());
    for ev in events {
        if cfg.dropout_prob > 0.0 && dropout_eligible(ev, events, cfg) {
            if rng.gen::<f64>() < cfg.dropout_prob {
                continue;
            }
        }
        let t = match jitter {
            Some(n) => (ev.t_min + n.sample(rng).round() as i64).max(0),
            None => ev.t_min,
        };
        let magnitude = match ev.kind {
            EventKind::Meal => {
                ev.magnitude * (1.0 + cfg.carb_bias_frac) * lognormal_factor(rng, cfg.carb_noise_frac)
            }
            EventKind::Bolus => ev.magnitude * lognormal_factor(rng, cfg.dose_noise_frac),
            EventKind::Exercise => ev.magnitude,
        };
        out.push(DriverEvent::new(t, ev.kind, magnitude, ev.duration_min)?);
    }
    out.sort_by_key(|e| e.t_min);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{mean, std_dev};
    use crate::rng::stream;

    fn sample_events() -> Vec<DriverEvent> {
        vec![
            DriverEvent::meal(420, 55.0).unwrap(),
            DriverEvent::bolus(425, 5.0).unwrap(),
            DriverEvent::meal(800, 20.0).unwrap(),
            DriverEvent::exercise(900, 0.5, 45).unwrap(),
            DriverEvent::bolus(1000, 2.0).unwrap(),
        ]
    }

    #[test]
    fn zero_config_is_identity() {
        let events = sample_events();
        let mut rng = stream(1, 0, "degrade");
        let out = degrade_events(&events, &PerturbationConfig::default(), &mut rng).unwrap();
        assert_eq!(out, events);
    }

    #[test]
    fn full_dropout_keeps_only_boluses() {
        let events = sample_events();
        let cfg = PerturbationConfig {
            dropout_prob: 1.0,
            snack_grams_threshold: f64::INFINITY,
            ..PerturbationConfig::default()
        };
        let mut rng = stream(1, 0, "degrade");
        let out = degrade_events(&events, &cfg, &mut rng).unwrap();
        assert!(out.iter().all(|e| e.kind == EventKind::Bolus));
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn all_events_scope_can_empty_the_log() {
        let events = sample_events();
        let cfg = PerturbationConfig {
            dropout_prob: 1.0,
            dropout_scope: DropoutScope::AllEvents,
            ..PerturbationConfig::default()
        };
        let mut rng = stream(1, 0, "degrade");
        let out = degrade_events(&events, &cfg, &mut rng).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn correction_scope_uses_meal_proximity() {
        let events = sample_events();
        let cfg = PerturbationConfig {
            dropout_prob: 1.0,
            snack_grams_threshold: 0.0,
            dropout_scope: DropoutScope::PlusCorrections,
            ..PerturbationConfig::default()
        };
        let mut rng = stream(1, 0, "degrade");
        let out = degrade_events(&events, &cfg, &mut rng).unwrap();
        // The bolus at 425 sits next to the meal at 420 and survives; the
        // lone bolus at 1000 is treated as a correction and dropped, as is
        // all exercise.
        let kinds: Vec<(EventKind, i64)> = out.iter().map(|e| (e.kind, e.t_min)).collect();
        assert_eq!(
            kinds,
            vec![(EventKind::Meal, 420), (EventKind::Bolus, 425), (EventKind::Meal, 800)]
        );
    }

    #[test]
    fn carb_noise_moments() {
        let cfg = PerturbationConfig {
            carb_noise_frac: 0.3,
            ..PerturbationConfig::default()
        };
        let mut rng = stream(7, 0, "degrade");
        let mut ratios = Vec::with_capacity(10_000);
        for _ in 0..10_000 {
            let out =
                degrade_events(&[DriverEvent::meal(0, 60.0).unwrap()], &cfg, &mut rng).unwrap();
            ratios.push(out[0].magnitude / 60.0);
        }
        let sd = std_dev(&ratios);
        assert!((sd - 0.3).abs() < 0.01, "sd {sd}");
        assert!((mean(&ratios) - 1.0).abs() < 0.01, "mean {}", mean(&ratios));
    }

    #[test]
    fn jittered_times_integer_and_sorted() {
        let cfg = PerturbationConfig {
            jitter_sd_min: 25.0,
            ..PerturbationConfig::default()
        };
        let mut rng = stream(3, 0, "degrade");
        let events: Vec<DriverEvent> =
            (0..50).map(|i| DriverEvent::meal(i * 30, 40.0).unwrap()).collect();
        let out = degrade_events(&events, &cfg, &mut rng).unwrap();
        assert_eq!(out.len(), events.len());
        for pair in out.windows(2) {
            assert!(pair[0].t_min <= pair[1].t_min);
        }
        assert!(out.iter().all(|e| e.t_min >= 0));
    }

    #[test]
    fn presets_are_ordered_and_valid() {
        let mut prev_jitter = -1.0;
        for name in ordered_preset_names() {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap();
            assert!(cfg.jitter_sd_min > prev_jitter);
            prev_jitter = cfg.jitter_sd_min;
        }
        assert!(preset("bogus").is_err());
        let c2 = preset("paper-C2").unwrap();
        assert!((15.0..=30.0).contains(&c2.jitter_sd_min));
        assert!((0.2..=0.4).contains(&c2.carb_noise_frac));
    }
}
