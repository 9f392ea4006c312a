//! Run configuration: a flat `KEY = VALUE` file, every key optional, every
//! value overridable through `DRIVERLENS_<KEY>` environment variables. The
//! canonical serialization doubles as the config hash input, so two configs
//! hash equal exactly when every effective value matches.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::delta::LossKind;
use crate::error::{Error, Result};
use crate::fidelity;
use crate::forecast::models::{MlpHyper, ModelFamily};
use crate::forecast::Channel;
use crate::physio::CohortSpec;
use crate::policy::{PolicySpec, MIN_PER_DAY};
use crate::probe::ProbeConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CohortKind {
    Default,
    Homogeneous,
}

impl CohortKind {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(CohortKind::Default),
            "homogeneous" => Ok(CohortKind::Homogeneous),
            other => Err(Error::config(format!(
                "config field `cohort`: unknown cohort {other:?}; known: default, homogeneous"
            ))),
        }
    }

    fn as_str(&self) -> &'static str {
        match self {
            CohortKind::Default => "default",
            CohortKind::Homogeneous => "homogeneous",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriverEncoding {
    Encoded,
    Raw,
}

impl DriverEncoding {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "encoded" => Ok(DriverEncoding::Encoded),
            "raw" => Ok(DriverEncoding::Raw),
            other => Err(Error::config(format!(
                "config field `encoding`: unknown encoding {other:?}; known: encoded, raw"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DriverEncoding::Encoded => "encoded",
            DriverEncoding::Raw => "raw",
        }
    }

    pub fn driver_channels(&self) -> Vec<Channel> {
        match self {
            DriverEncoding::Encoded => vec![Channel::Iob, Channel::Cob, Channel::Rag],
            DriverEncoding::Raw => vec![Channel::RawEvents],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FamilyKind {
    Persistence,
    PatientMean,
    Ridge,
    Mlp,
}

impl FamilyKind {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "persistence" => Ok(FamilyKind::Persistence),
            "patient_mean" => Ok(FamilyKind::PatientMean),
            "ridge" => Ok(FamilyKind::Ridge),
            "mlp" => Ok(FamilyKind::Mlp),
            other => Err(Error::config(format!(
                "config field `family`: unknown family {other:?}; known: persistence, patient_mean, ridge, mlp"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FamilyKind::Persistence => "persistence",
            FamilyKind::PatientMean => "patient_mean",
            FamilyKind::Ridge => "ridge",
            FamilyKind::Mlp => "mlp",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub master_seed: u64,
    pub out_dir: PathBuf,
    pub workers: usize,
    pub cohort: CohortKind,
    pub n_patients: usize,
    pub days: usize,
    pub preset: String,
    pub sweep_presets: Vec<String>,
    pub grid_step_min: i64,
    pub context_len: usize,
    pub lag_stride: usize,
    pub window_stride: usize,
    pub horizons_min: Vec<i64>,
    pub loss: LossKind,
    pub tod_in_base: bool,
    pub encoding: DriverEncoding,
    pub insulin_tau_min: f64,
    pub carb_tau_min: f64,
    pub per_patient_taus: bool,
    pub family: FamilyKind,
    /// Per-row ridge strength; the solver sees `ridge_lambda * n_train_rows`.
    pub ridge_lambda: f64,
    pub mlp_hidden: usize,
    pub mlp_lr: f64,
    pub mlp_epochs: usize,
    pub mlp_batch: usize,
    pub lambda_causal: f64,
    pub causal_margin: f64,
    pub train_frac: f64,
    pub bootstrap_reps: usize,
    pub permutation_reps: usize,
    pub probe_days: usize,
    pub probe_n_anchors: usize,
    pub probe_insulin_doses: Vec<f64>,
    pub probe_carb_grams: Vec<f64>,
    pub probe_insulin_horizon_min: i64,
    pub probe_carb_horizon_min: i64,
    pub probe_epsilon: f64,
    pub bounds_overrides: BTreeMap<String, (f64, f64)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let probe = ProbeConfig::default();
        RunConfig {
            master_seed: 42,
            out_dir: PathBuf::from("out"),
            workers: 1,
            cohort: CohortKind::Default,
            n_patients: 20,
            days: 14,
            preset: "clean".to_string(),
            sweep_presets: vec!["clean".into(), "paper-C2".into(), "extreme".into()],
            grid_step_min: 5,
            context_len: 24,
            lag_stride: 1,
            window_stride: 1,
            horizons_min: vec![30, 60, 120],
            loss: LossKind::Rmse,
            tod_in_base: true,
            encoding: DriverEncoding::Encoded,
            insulin_tau_min: 75.0,
            carb_tau_min: 40.0,
            per_patient_taus: false,
            family: FamilyKind::Ridge,
            ridge_lambda: 0.1,
            mlp_hidden: 32,
            mlp_lr: 0.01,
            mlp_epochs: 40,
            mlp_batch: 256,
            lambda_causal: 0.0,
            causal_margin: 2.0,
            train_frac: 0.7,
            bootstrap_reps: 1000,
            permutation_reps: 20,
            probe_days: 2,
            probe_n_anchors: probe.n_anchors,
            probe_insulin_doses: probe.insulin_doses,
            probe_carb_grams: probe.carb_grams,
            probe_insulin_horizon_min: probe.insulin_horizon_min,
            probe_carb_horizon_min: probe.carb_horizon_min,
            probe_epsilon: probe.epsilon,
            bounds_overrides: BTreeMap::new(),
        }
    }
}

const BOUND_NAMES: [&str; 17] = [
    "gb", "si", "p1", "p2", "tau_i1", "tau_i2", "vi", "tau_m", "f_bio", "vg", "a_circ",
    "phi_circ", "e_gain", "cgm_noise_sd", "cr", "cf", "target",
];

fn known_keys() -> Vec<String> {
    let mut keys: Vec<String> = [
        "master_seed",
        "out_dir",
        "workers",
        "cohort",
        "n_patients",
        "days",
        "preset",
        "sweep_presets",
        "grid_step_min",
        "context_len",
        "lag_stride",
        "window_stride",
        "horizons_min",
        "loss",
        "tod_in_base",
        "encoding",
        "insulin_tau_min",
        "carb_tau_min",
        "per_patient_taus",
        "family",
        "ridge_lambda",
        "mlp_hidden",
        "mlp_lr",
        "mlp_epochs",
        "mlp_batch",
        "lambda_causal",
        "causal_margin",
        "train_frac",
        "bootstrap_reps",
        "permutation_reps",
        "probe_days",
        "probe_n_anchors",
        "probe_insulin_doses",
        "probe_carb_grams",
        "probe_insulin_horizon_min",
        "probe_carb_horizon_min",
        "probe_epsilon",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for b in BOUND_NAMES {
        keys.push(format!("bounds_{b}"));
    }
    keys
}

fn parse_scalar<T: std::str::FromStr>(key: &str, raw: &str, kind: &str) -> Result<T> {
    raw.parse::<T>().map_err(|_| {
        Error::config(format!("config field `{key}`: invalid {kind} `{raw}`"))
    })
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("config field `{key}`: invalid bool `{raw}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, raw: &str, kind: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(|s| parse_scalar::<T>(key, s.trim(), kind))
        .collect()
}

fn parse_pair(key: &str, raw: &str) -> Result<(f64, f64)> {
    let v: Vec<f64> = parse_list(key, raw, "float")?;
    if v.len() != 2 {
        return Err(Error::config(format!(
            "config field `{key}`: expected `lo,hi`, got `{raw}`"
        )));
    }
    Ok((v[0], v[1]))
}

impl RunConfig {
    /// Parses file text. Later `DRIVERLENS_<KEY>` environment variables win
    /// over file values; unknown keys and duplicate keys are errors.
    pub fn from_str_with_env(text: &str) -> Result<RunConfig> {
        let mut pairs: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw_line) in text.lines().enumerate() {
            let line = match raw_line.find('#') {
                Some(i) => &raw_line[..i],
                None => raw_line,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!(
                    "config line {}: expected `key = value`, got `{}`",
                    lineno + 1,
                    line
                ))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if pairs.insert(key.clone(), value).is_some() {
                return Err(Error::config(format!(
                    "config line {}: duplicate key `{key}`",
                    lineno + 1
                )));
            }
        }
        let known = known_keys();
        for key in pairs.keys() {
            if !known.iter().any(|k| k == key) {
                return Err(Error::config(format!("unknown config key `{key}`")));
            }
        }
        for key in &known {
            let env_name = format!("DRIVERLENS_{}", key.to_uppercase());
            if let Ok(v) = std::env::var(&env_name) {
                pairs.insert(key.clone(), v);
            }
        }
        Self::from_pairs(&pairs)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_str_with_env(&text)
    }

    fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (key, raw) in pairs {
            let raw = raw.as_str();
            match key.as_str() {
                "master_seed" => cfg.master_seed = parse_scalar(key, raw, "integer")?,
                "out_dir" => cfg.out_dir = PathBuf::from(raw),
                "workers" => cfg.workers = parse_scalar(key, raw, "integer")?,
                "cohort" => cfg.cohort = CohortKind::parse(raw)?,
                "n_patients" => cfg.n_patients = parse_scalar(key, raw, "integer")?,
                "days" => cfg.days = parse_scalar(key, raw, "integer")?,
                "preset" => cfg.preset = raw.to_string(),
                "sweep_presets" => {
                    cfg.sweep_presets =
                        raw.split(',').map(|s| s.trim().to_string()).collect();
                }
                "grid_step_min" => cfg.grid_step_min = parse_scalar(key, raw, "integer")?,
                "context_len" => cfg.context_len = parse_scalar(key, raw, "integer")?,
                "lag_stride" => cfg.lag_stride = parse_scalar(key, raw, "integer")?,
                "window_stride" => cfg.window_stride = parse_scalar(key, raw, "integer")?,
                "horizons_min" => cfg.horizons_min = parse_list(key, raw, "integer")?,
                "loss" => {
                    cfg.loss = LossKind::parse(raw).map_err(|e| {
                        Error::config(format!("config field `loss`: {e}"))
                    })?;
                }
                "tod_in_base" => cfg.tod_in_base = parse_bool(key, raw)?,
                "encoding" => cfg.encoding = DriverEncoding::parse(raw)?,
                "insulin_tau_min" => cfg.insulin_tau_min = parse_scalar(key, raw, "float")?,
                "carb_tau_min" => cfg.carb_tau_min = parse_scalar(key, raw, "float")?,
                "per_patient_taus" => cfg.per_patient_taus = parse_bool(key, raw)?,
                "family" => cfg.family = FamilyKind::parse(raw)?,
                "ridge_lambda" => cfg.ridge_lambda = parse_scalar(key, raw, "float")?,
                "mlp_hidden" => cfg.mlp_hidden = parse_scalar(key, raw, "integer")?,
                "mlp_lr" => cfg.mlp_lr = parse_scalar(key, raw, "float")?,
                "mlp_epochs" => cfg.mlp_epochs = parse_scalar(key, raw, "integer")?,
                "mlp_batch" => cfg.mlp_batch = parse_scalar(key, raw, "integer")?,
                "lambda_causal" => cfg.lambda_causal = parse_scalar(key, raw, "float")?,
                "causal_margin" => cfg.causal_margin = parse_scalar(key, raw, "float")?,
                "train_frac" => cfg.train_frac = parse_scalar(key, raw, "float")?,
                "bootstrap_reps" => cfg.bootstrap_reps = parse_scalar(key, raw, "integer")?,
                "permutation_reps" => {
                    cfg.permutation_reps = parse_scalar(key, raw, "integer")?
                }
                "probe_days" => cfg.probe_days = parse_scalar(key, raw, "integer")?,
                "probe_n_anchors" => cfg.probe_n_anchors = parse_scalar(key, raw, "integer")?,
                "probe_insulin_doses" => {
                    cfg.probe_insulin_doses = parse_list(key, raw, "float")?
                }
                "probe_carb_grams" => cfg.probe_carb_grams = parse_list(key, raw, "float")?,
                "probe_insulin_horizon_min" => {
                    cfg.probe_insulin_horizon_min = parse_scalar(key, raw, "integer")?
                }
                "probe_carb_horizon_min" => {
                    cfg.probe_carb_horizon_min = parse_scalar(key, raw, "integer")?
                }
                "probe_epsilon" => cfg.probe_epsilon = parse_scalar(key, raw, "float")?,
                other => {
                    if let Some(bound) = other.strip_prefix("bounds_") {
                        cfg.bounds_overrides
                            .insert(bound.to_string(), parse_pair(key, raw)?);
                    } else {
                        return Err(Error::config(format!("unknown config key `{other}`")));
                    }
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::config("config field `n_patients`: must be >= 1"));
        }
        if self.days == 0 {
            return Err(Error::config("config field `days`: must be >= 1"));
        }
        if self.workers == 0 {
            return Err(Error::config("config field `workers`: must be >= 1"));
        }
        if self.grid_step_min <= 0 {
            return Err(Error::config("config field `grid_step_min`: must be >= 1"));
        }
        if self.context_len == 0 || self.lag_stride == 0 || self.window_stride == 0 {
            return Err(Error::config(
                "config fields `context_len`, `lag_stride`, `window_stride`: must be >= 1",
            ));
        }
        if self.horizons_min.is_empty() {
            return Err(Error::config("config field `horizons_min`: must be non-empty"));
        }
        for pair in self.horizons_min.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::config(
                    "config field `horizons_min`: must be strictly ascending",
                ));
            }
        }
        for h in &self.horizons_min {
            if *h <= 0 || h % self.grid_step_min != 0 {
                return Err(Error::config(format!(
                    "config field `horizons_min`: {h} is not a positive multiple of grid_step_min"
                )));
            }
        }
        fidelity::preset(&self.preset)
            .map_err(|e| Error::config(format!("config field `preset`: {e}")))?;
        if self.sweep_presets.is_empty() {
            return Err(Error::config("config field `sweep_presets`: must be non-empty"));
        }
        for p in &self.sweep_presets {
            fidelity::preset(p)
                .map_err(|e| Error::config(format!("config field `sweep_presets`: {e}")))?;
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::config(
                "config field `train_frac`: must be strictly between 0 and 1",
            ));
        }
        if !(self.insulin_tau_min > 0.0) || !(self.carb_tau_min > 0.0) {
            return Err(Error::config(
                "config fields `insulin_tau_min`, `carb_tau_min`: must be > 0",
            ));
        }
        if self.ridge_lambda < 0.0 {
            return Err(Error::config("config field `ridge_lambda`: must be >= 0"));
        }
        if self.bootstrap_reps == 0 || self.permutation_reps == 0 {
            return Err(Error::config(
                "config fields `bootstrap_reps`, `permutation_reps`: must be >= 1",
            ));
        }
        if self.probe_days == 0 {
            return Err(Error::config("config field `probe_days`: must be >= 1"));
        }
        if MIN_PER_DAY % self.grid_step_min != 0 {
            return Err(Error::config(format!(
                "config field `grid_step_min`: {} must divide a day (1440 min)",
                self.grid_step_min
            )));
        }
        for (name, h) in [
            ("probe_insulin_horizon_min", self.probe_insulin_horizon_min),
            ("probe_carb_horizon_min", self.probe_carb_horizon_min),
        ] {
            if !self.horizons_min.contains(&h) {
                return Err(Error::config(format!(
                    "config field `{name}`: {h} must be listed in horizons_min so the model has a head there"
                )));
            }
        }
        self.probe_config().validate()?;
        for name in self.bounds_overrides.keys() {
            if !BOUND_NAMES.contains(&name.as_str()) {
                return Err(Error::config(format!("unknown config key `bounds_{name}`")));
            }
        }
        Ok(())
    }

    pub fn cohort_spec(&self) -> Result<CohortSpec> {
        let mut spec = match self.cohort {
            CohortKind::Default => CohortSpec::default(),
            CohortKind::Homogeneous => CohortSpec::homogeneous(),
        };
        spec.n_patients = self.n_patients;
        spec.days = self.days;
        for (name, bounds) in &self.bounds_overrides {
            match name.as_str() {
                "gb" => spec.gb = *bounds,
                "si" => spec.si = *bounds,
                "p1" => spec.p1 = *bounds,
                "p2" => spec.p2 = *bounds,
                "tau_i1" => spec.tau_i1 = *bounds,
                "tau_i2" => spec.tau_i2 = *bounds,
                "vi" => spec.vi = *bounds,
                "tau_m" => spec.tau_m = *bounds,
                "f_bio" => spec.f_bio = *bounds,
                "vg" => spec.vg = *bounds,
                "a_circ" => spec.a_circ = *bounds,
                "phi_circ" => spec.phi_circ = *bounds,
                "e_gain" => spec.e_gain = *bounds,
                "cgm_noise_sd" => spec.cgm_noise_sd = *bounds,
                "cr" => spec.cr = *bounds,
                "cf" => spec.cf = *bounds,
                "target" => spec.target = *bounds,
                other => {
                    return Err(Error::config(format!("unknown config key `bounds_{other}`")))
                }
            }
        }
        Ok(spec)
    }

    pub fn policy_spec(&self) -> PolicySpec {
        PolicySpec::default()
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            insulin_doses: self.probe_insulin_doses.clone(),
            carb_grams: self.probe_carb_grams.clone(),
            insulin_horizon_min: self.probe_insulin_horizon_min,
            carb_horizon_min: self.probe_carb_horizon_min,
            epsilon: self.probe_epsilon,
            n_anchors: self.probe_n_anchors,
            seed_tag: "probe".to_string(),
        }
    }

    pub fn mlp_hyper(&self) -> MlpHyper {
        MlpHyper {
            hidden: self.mlp_hidden,
            lr: self.mlp_lr,
            epochs: self.mlp_epochs,
            batch: self.mlp_batch,
            lambda_causal: self.lambda_causal,
            causal_margin: self.causal_margin,
        }
    }

    /// Model family with the effective ridge strength for `n_train_rows`
    /// rows. Per-row scaling keeps the shrinkage level independent of the
    /// dataset size, which makes subject-split comparisons fair.
    pub fn model_family(&self, n_train_rows: usize) -> ModelFamily {
        match self.family {
            FamilyKind::Persistence => ModelFamily::Persistence,
            FamilyKind::PatientMean => ModelFamily::PatientMean,
            FamilyKind::Ridge => ModelFamily::RidgeAr {
                lambda: self.ridge_lambda * n_train_rows as f64,
            },
            FamilyKind::Mlp => ModelFamily::Mlp { hyper: self.mlp_hyper() },
        }
    }

    pub fn horizon_steps(&self) -> Result<Vec<usize>> {
        self.horizons_min
            .iter()
            .map(|h| {
                if h % self.grid_step_min == 0 && *h > 0 {
                    Ok((h / self.grid_step_min) as usize)
                } else {
                    Err(Error::config(format!(
                        "horizon {h} min is not a positive multiple of grid_step_min"
                    )))
                }
            })
            .collect()
    }

    fn fmt_float(v: f64) -> String {
        // Shortest round-trip representation keeps the canonical text stable.
        format!("{v}")
    }

    fn fmt_float_list(vs: &[f64]) -> String {
        vs.iter().map(|v| Self::fmt_float(*v)).collect::<Vec<_>>().join(",")
    }

    fn fmt_int_list<T: std::fmt::Display>(vs: &[T]) -> String {
        vs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }

    /// Every effective value, one `key = value` line, fixed order. Also the
    /// config-hash preimage.
    pub fn canonical_string(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("master_seed", self.master_seed.to_string());
        line("out_dir", self.out_dir.display().to_string());
        line("workers", self.workers.to_string());
        line("cohort", self.cohort.as_str().to_string());
        line("n_patients", self.n_patients.to_string());
        line("days", self.days.to_string());
        line("preset", self.preset.clone());
        line("sweep_presets", self.sweep_presets.join(","));
        line("grid_step_min", self.grid_step_min.to_string());
        line("context_len", self.context_len.to_string());
        line("lag_stride", self.lag_stride.to_string());
        line("window_stride", self.window_stride.to_string());
        line("horizons_min", Self::fmt_int_list(&self.horizons_min));
        line("loss", self.loss.as_str().to_string());
        line("tod_in_base", self.tod_in_base.to_string());
        line("encoding", self.encoding.as_str().to_string());
        line("insulin_tau_min", Self::fmt_float(self.insulin_tau_min));
        line("carb_tau_min", Self::fmt_float(self.carb_tau_min));
        line("per_patient_taus", self.per_patient_taus.to_string());
        line("family", self.family.as_str().to_string());
        line("ridge_lambda", Self::fmt_float(self.ridge_lambda));
        line("mlp_hidden", self.mlp_hidden.to_string());
        line("mlp_lr", Self::fmt_float(self.mlp_lr));
        line("mlp_epochs", self.mlp_epochs.to_string());
        line("mlp_batch", self.mlp_batch.to_string());
        line("lambda_causal", Self::fmt_float(self.lambda_causal));
        line("causal_margin", Self::fmt_float(self.causal_margin));
        line("train_frac", Self::fmt_float(self.train_frac));
        line("bootstrap_reps", self.bootstrap_reps.to_string());
        line("permutation_reps", self.permutation_reps.to_string());
        line("probe_days", self.probe_days.to_string());
        line("probe_n_anchors", self.probe_n_anchors.to_string());
        line("probe_insulin_doses", Self::fmt_float_list(&self.probe_insulin_doses));
        line("probe_carb_grams", Self::fmt_float_list(&self.probe_carb_grams));
        line(
            "probe_insulin_horizon_min",
            self.probe_insulin_horizon_min.to_string(),
        );
        line("probe_carb_horizon_min", self.probe_carb_horizon_min.to_string());
        line("probe_epsilon", Self::fmt_float(self.probe_epsilon));
        for (name, (lo, hi)) in &self.bounds_overrides {
            line(
                &format!("bounds_{name}"),
                format!("{},{}", Self::fmt_float(*lo), Self::fmt_float(*hi)),
            );
        }
        s
    }

    /// First 16 hex chars of sha256 over the canonical string, out_dir and
    /// workers excluded: neither changes any computed value.
    pub fn config_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for line in self.canonical_string().lines() {
            if line.starts_with("out_dir = ") || line.starts_with("workers = ") {
                continue;
            }
            hasher.update(line.as_bytes());
            hasher.update([b'\n']);
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Channel lists for the matched pair. Time of day sits in both models
    /// when `tod_in_base`, otherwise it counts as a driver and only the
    /// multivariate side sees it.
    pub fn pair_channels(&self) -> (Vec<Channel>, Vec<Channel>) {
        let mut uni = vec![Channel::CgmLags];
        if self.tod_in_base {
            uni.push(Channel::TimeOfDay);
        }
        let mut multi = vec![Channel::CgmLags, Channel::TimeOfDay];
        multi.extend(self.encoding.driver_channels());
        (uni, multi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    // Tests mutating DRIVERLENS_* variables share the process environment
    // with every parse; serialize them.
    static ENV_LOCK: Mutex<()> = Mutex::new(());

    fn parse_locked(text: &str) -> Result<RunConfig> {
        let _guard = ENV_LOCK.lock().unwrap_or_else(|e| e.into_inner());
        RunConfig::from_str_with_env(text)
    }

    #[test]
    fn defaults_parse_from_empty_text() {
        let cfg = parse_locked("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.master_seed, 42);
        assert_eq!(cfg.horizons_min, vec![30, 60, 120]);
    }

    #[test]
    fn file_values_override_defaults() {
        let text = "\n# a comment\nmaster_seed = 7\nhorizons_min = 15, 30, 60, 120\nloss = mae\nfamily = mlp\nencoding = raw  # trailing comment\n";
        let cfg = parse_locked(text).unwrap();
        assert_eq!(cfg.master_seed, 7);
        assert_eq!(cfg.horizons_min, vec![15, 30, 60, 120]);
        assert_eq!(cfg.loss, LossKind::Mae);
        assert_eq!(cfg.family, FamilyKind::Mlp);
        assert_eq!(cfg.encoding, DriverEncoding::Raw);
    }

    #[test]
    fn env_override_wins() {
        let _guard = ENV_LOCK.lock().unwrap_or_else(|e| e.into_inner());
        std::env::set_var("DRIVERLENS_CONTEXT_LEN", "12");
        let cfg = RunConfig::from_str_with_env("context_len = 24");
        std::env::remove_var("DRIVERLENS_CONTEXT_LEN");
        assert_eq!(cfg.unwrap().context_len, 12);
    }

    #[test]
    fn unknown_and_duplicate_keys_error() {
        let err = parse_locked("not_a_key = 1").unwrap_err().to_string();
        assert!(err.contains("unknown config key `not_a_key`"), "{err}");
        let err = parse_locked("days = 1\ndays = 2")
            .unwrap_err()
            .to_string();
        assert!(err.contains("duplicate key `days`"), "{err}");
    }

    #[test]
    fn field_level_messages_name_the_field() {
        let err = parse_locked("ridge_lambda = soup")
            .unwrap_err()
            .to_string();
        assert!(err.contains("`ridge_lambda`"), "{err}");
        let err = parse_locked("train_frac = 1.5").unwrap_err().to_string();
        assert!(err.contains("`train_frac`"), "{err}");
        let err = parse_locked("preset = fuzzy").unwrap_err().to_string();
        assert!(err.contains("`preset`"), "{err}");
        let err = parse_locked("horizons_min = 30,31")
            .unwrap_err()
            .to_string();
        assert!(err.contains("horizons_min"), "{err}");
    }

    #[test]
    fn hash_ignores_out_dir_and_workers_only() {
        let base = RunConfig::default();
        let mut moved = base.clone();
        moved.out_dir = PathBuf::from("elsewhere");
        moved.workers = 8;
        assert_eq!(base.config_hash(), moved.config_hash());
        let mut tweaked = base.clone();
        tweaked.master_seed = 43;
        assert_ne!(base.config_hash(), tweaked.config_hash());
    }

    #[test]
    fn hash_is_sensitive_to_each_field_class() {
        let base = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        seen.insert(base.config_hash());
        let variants: Vec<RunConfig> = vec![
            {
                let mut c = base.clone();
                c.master_seed = 1;
                c
            },
            {
                let mut c = base.clone();
                c.n_patients = 5;
                c
            },
            {
                let mut c = base.clone();
                c.days = 7;
                c
            },
            {
                let mut c = base.clone();
                c.preset = "paper-C2".into();
                c
            },
            {
                let mut c = base.clone();
                c.context_len = 12;
                c
            },
            {
                let mut c = base.clone();
                c.horizons_min = vec![30, 60, 120, 240];
                c
            },
            {
                let mut c = base.clone();
                c.loss = LossKind::Mae;
                c
            },
            {
                let mut c = base.clone();
                c.tod_in_base = false;
                c
            },
            {
                let mut c = base.clone();
                c.ridge_lambda = 0.2;
                c
            },
            {
                let mut c = base.clone();
                c.bounds_overrides.insert("si".into(), (1e-4, 1e-4));
                c
            },
        ];
        for v in variants {
            assert!(seen.insert(v.config_hash()), "hash collision for a field change");
        }
    }

    #[test]
    fn cohort_spec_applies_overrides() {
        let cfg = parse_locked(
            "cohort = homogeneous\nn_patients = 4\ndays = 3\nbounds_si = 2e-4,2e-4\n",
        )
        .unwrap();
        let spec = cfg.cohort_spec().unwrap();
        assert_eq!(spec.n_patients, 4);
        assert_eq!(spec.days, 3);
        assert_eq!(spec.si, (2e-4, 2e-4));
        assert_eq!(spec.gb.0, spec.gb.1);
    }

    #[test]
    fn pair_channels_follow_tod_convention() {
        let cfg = RunConfig::default();
        let (uni, multi) = cfg.pair_channels();
        assert_eq!(uni, vec![Channel::CgmLags, Channel::TimeOfDay]);
        assert_eq!(
            multi,
            vec![Channel::CgmLags, Channel::TimeOfDay, Channel::Iob, Channel::Cob, Channel::Rag]
        );
        let mut cfg = RunConfig::default();
        cfg.tod_in_base = false;
        let (uni, _) = cfg.pair_channels();
        assert_eq!(uni, vec![Channel::CgmLags]);
    }
}
