//! End-to-end orchestration: simulate a cohort, degrade the event diaries,
//! train the matched pair, and run the benchmark, sweep, probe, and split
//! evaluations. Everything downstream of the config is deterministic in
//! (config, master_seed) and independent of the worker count: each patient
//! draws from keyed streams and workers merge by index.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{FamilyKind, RunConfig};
use crate::delta::{
    default_groups, delta_drivers, evaluate, permutation_importance, AttributionReport,
    DeltaReport, DeltaRow, LossKind, LossTable,
};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::fidelity::{self, PerturbationConfig};
use crate::forecast::features::{
    build_design_matrix, Channel, DesignMatrix, DesignOptions, FeatureSpec, PatientTaus,
};
use crate::forecast::models::{fit, fit_matched_pair, FitOptions, MatchedPair, TrainedModel};
use crate::numeric::sorted_quantile;
use crate::physio::{sample_patient, simulate, PatientParams, SimConfig};
use crate::policy::{generate_schedule, policy_stream, MIN_PER_DAY};
use crate::probe::{
    generate_probe_set, probe_report, training_probes, ProbeReport, ProbeSet, TIE_EPSILON,
};
use crate::rng::{global_stream, stream};
use crate::timeline::{extract_windows, EpisodeRecord, ForecastWindow, GlucoseTrace, TimeGrid};

/// Runs `f` over `0..n` on a bounded worker pool. Results merge by index, so
/// the output and the reported error never depend on `workers`; on failure
/// the error of the smallest failing index is returned.
pub fn parallel_map_indexed<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if workers == 0 {
        return Err(Error::config("workers must be >= 1"));
    }
    let w = workers.min(n.max(1));
    if w <= 1 {
        return (0..n).map(&f).collect();
    }
    let locals: Vec<Vec<(usize, Result<T>)>> = std::thread::scope(|scope| {
        let f = &f;
        let handles: Vec<_> = (0..w)
            .map(|k| {
                scope.spawn(move || {
                    let mut local = Vec::new();
                    let mut i = k;
                    while i < n {
                        local.push((i, f(i)));
                        i += w;
                    }
                    local
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    for local in locals {
        for (i, r) in local {
            slots[i] = Some(r);
        }
    }
    let mut out = Vec::with_capacity(n);
    for slot in slots {
        out.push(slot.expect("every index scheduled")?);
    }
    Ok(out)
}

/// One simulated patient: the whole-run episode plus its clean day slices.
/// Degraded diaries are derived on demand so one cohort serves every sweep
/// level.
#[derive(Debug, Clone)]
pub struct PatientData {
    pub index: u32,
    pub params: PatientParams,
    pub full: EpisodeRecord,
    pub clean_days: Vec<EpisodeRecord>,
    pub days: usize,
}

impl PatientData {
    pub fn patient_id(&self) -> &str {
        &self.full.patient_id
    }

    /// Day slices with the event diary degraded under `preset_name`. The
    /// degradation stream is keyed by the preset name, so repeated levels in
    /// a sweep reproduce identical diaries.
    pub fn degraded_days(
        &self,
        preset_name: &str,
        cfg: &PerturbationConfig,
        master_seed: u64,
    ) -> Result<Vec<EpisodeRecord>> {
        let mut rng = stream(master_seed, self.index, &format!("degrade-{preset_name}"));
        let logged = fidelity::degrade_events(&self.full.events, cfg, &mut rng)?;
        slice_days(&self.full, &logged, self.days)
    }
}

fn slice_trace(trace: &GlucoseTrace, grid: TimeGrid, lo: usize, hi: usize) -> Result<GlucoseTrace> {
    GlucoseTrace::new(grid, trace.values[lo..hi].to_vec(), trace.quality[lo..hi].to_vec())
}

/// Cuts a whole-run episode into per-day episodes `<pid>_dNN`, keeping
/// absolute times. Events jittered past the end of the run are dropped, the
/// same as a diary that simply ends at midnight.
pub fn slice_days(
    full: &EpisodeRecord,
    events: &[crate::timeline::DriverEvent],
    days: usize,
) -> Result<Vec<EpisodeRecord>> {
    let step = full.cgm.grid.step_min;
    if MIN_PER_DAY % step != 0 {
        return Err(Error::validation(format!(
            "grid step {step} does not divide a day"
        )));
    }
    let per_day = (MIN_PER_DAY / step) as usize;
    if full.cgm.grid.n_points != per_day * days {
        return Err(Error::validation(format!(
            "episode has {} points, expected {} for {} days",
            full.cgm.grid.n_points,
            per_day * days,
            days
        )));
    }
    let mut out = Vec::with_capacity(days);
    for day in 0..days {
        let lo = day * per_day;
        let hi = lo + per_day;
        let t_lo = day as i64 * MIN_PER_DAY;
        let t_hi = t_lo + MIN_PER_DAY;
        let grid = TimeGrid::new(t_lo, step, per_day)?;
        let cgm = slice_trace(&full.cgm, grid, lo, hi)?;
        let latent = full
            .latent_glucose
            .as_ref()
            .map(|l| slice_trace(l, grid, lo, hi))
            .transpose()?;
        let day_events: Vec<_> = events
            .iter()
            .filter(|e| e.t_min >= t_lo && e.t_min < t_hi)
            .cloned()
            .collect();
        out.push(EpisodeRecord::new(
            &full.patient_id,
            &format!("{}_d{day:02}", full.patient_id),
            cgm,
            day_events,
            latent,
        )?);
    }
    Ok(out)
}

/// Simulates one patient of the configured cohort.
pub fn build_patient(cfg: &RunConfig, index: u32) -> Result<PatientData> {
    let cohort = cfg.cohort_spec()?;
    let policy = cfg.policy_spec();
    let params = sample_patient(&cohort, index, cfg.master_seed)?;
    let duration = cfg.days as i64 * MIN_PER_DAY;
    let mut sim_cfg = SimConfig::new(duration, cfg.master_seed, index);
    sim_cfg.grid_step_min = cfg.grid_step_min;
    let mut rng = policy_stream(&policy, cfg.master_seed, index);
    let events = generate_schedule(&params, &policy, cfg.days, &mut rng, &sim_cfg)?;
    let full = simulate(&params, &events, &sim_cfg)?;
    let clean_days = slice_days(&full, &full.events, cfg.days)?;
    Ok(PatientData { index, params, full, clean_days, days: cfg.days })
}

#[derive(Debug, Clone)]
pub struct CohortData {
    pub patients: Vec<PatientData>,
}

pub fn build_cohort(cfg: &RunConfig) -> Result<CohortData> {
    let patients = parallel_map_indexed(cfg.n_patients, cfg.workers, |i| {
        build_patient(cfg, i as u32)
    })?;
    Ok(CohortData { patients })
}

impl CohortData {
    pub fn logged_days(&self, cfg: &RunConfig, preset_name: &str) -> Result<Vec<Vec<EpisodeRecord>>> {
        let perturb = fidelity::preset(preset_name)?;
        parallel_map_indexed(self.patients.len(), cfg.workers, |i| {
            self.patients[i].degraded_days(preset_name, &perturb, cfg.master_seed)
        })
    }

    pub fn patient_taus(&self) -> PatientTaus {
        self.patients
            .iter()
            .map(|p| (p.patient_id().to_string(), (p.params.tau_i2, p.params.tau_m)))
            .collect()
    }
}

/// Number of leading days used for training; at least one day stays on each
/// side of the split.
pub fn train_day_count(days: usize, train_frac: f64) -> Result<usize> {
    if days < 2 {
        return Err(Error::validation(
            "train/test split needs at least 2 days per patient",
        ));
    }
    let n = (days as f64 * train_frac).round() as usize;
    Ok(n.clamp(1, days - 1))
}

pub fn encoder_config(cfg: &RunConfig) -> EncoderConfig {
    EncoderConfig {
        insulin_tau_min: cfg.insulin_tau_min,
        carb_tau_min: cfg.carb_tau_min,
        per_patient_tau: cfg.per_patient_taus,
        ..EncoderConfig::default()
    }
}

/// Builds a design matrix over complete episodes with the configured window
/// stride.
pub fn design_for_episodes(
    cfg: &RunConfig,
    episodes: &[EpisodeRecord],
    channels: &[Channel],
    taus: Option<&PatientTaus>,
) -> Result<DesignMatrix> {
    let spec = FeatureSpec::new(channels, cfg.context_len, cfg.lag_stride)?;
    let enc = encoder_config(cfg);
    let horizons = cfg.horizon_steps()?;
    let opts = DesignOptions { encoder: &enc, horizons: &horizons, patient_taus: taus };
    let mut windows: Vec<ForecastWindow> = Vec::new();
    for ep in episodes {
        windows.extend(extract_windows(ep, cfg.context_len, &horizons, cfg.window_stride)?);
    }
    if windows.is_empty() {
        return Err(Error::validation(
            "no valid forecast windows; episodes are shorter than context plus horizon",
        ));
    }
    build_design_matrix(episodes, &windows, &spec, &opts)
}

/// Train/test design matrices for the multivariate channel set. The
/// univariate side is derived by restriction or masking downstream.
pub struct BenchMatrices {
    pub train: DesignMatrix,
    pub test: DesignMatrix,
    pub uni_channels: Vec<Channel>,
    pub multi_channels: Vec<Channel>,
}

pub fn bench_matrices(
    cfg: &RunConfig,
    cohort: &CohortData,
    preset_name: &str,
) -> Result<BenchMatrices> {
    let (uni_channels, multi_channels) = cfg.pair_channels();
    let logged = cohort.logged_days(cfg, preset_name)?;
    let n_train = train_day_count(cfg.days, cfg.train_frac)?;
    let mut train_eps = Vec::new();
    let mut test_eps = Vec::new();
    for days in &logged {
        train_eps.extend_from_slice(&days[..n_train]);
        test_eps.extend_from_slice(&days[n_train..]);
    }
    let taus = cohort.patient_taus();
    let taus = cfg.per_patient_taus.then_some(&taus);
    let train = design_for_episodes(cfg, &train_eps, &multi_channels, taus)?;
    let test = design_for_episodes(cfg, &test_eps, &multi_channels, taus)?;
    Ok(BenchMatrices { train, test, uni_channels, multi_channels })
}

/// Evaluates one side of the pair on the multivariate test matrix,
/// restricting columns when the model was trained on a subset.
pub fn evaluate_side(
    model: &TrainedModel,
    test: &DesignMatrix,
    loss: LossKind,
) -> Result<LossTable> {
    if model.n_cols == test.n_cols && model.col_channels == test.col_channels {
        evaluate(model, test, loss)
    } else {
        evaluate(model, &test.restrict(&model.channels)?, loss)
    }
}

/// Trains the matched pair for one preset, wiring causal training probes
/// into the mlp when `lambda_causal > 0`.
pub fn train_pair(
    cfg: &RunConfig,
    cohort: &CohortData,
    matrices: &BenchMatrices,
) -> Result<MatchedPair> {
    let family = cfg.model_family(matrices.train.n_rows());
    let probes_storage;
    let mut opts = FitOptions::seeded(cfg.master_seed);
    if cfg.family == FamilyKind::Mlp && cfg.lambda_causal > 0.0 {
        let set = cohort_probe_set(cfg, cohort, &matrices.multi_channels)?;
        probes_storage = training_probes(&set, &matrices.train)?;
        opts.probes = Some(&probes_storage);
    }
    fit_matched_pair(&matrices.train, &family, &matrices.uni_channels, &opts)
}

/// Probe sets for every cohort patient, merged.
pub fn cohort_probe_set(
    cfg: &RunConfig,
    cohort: &CohortData,
    channels: &[Channel],
) -> Result<ProbeSet> {
    let spec = FeatureSpec::new(channels, cfg.context_len, cfg.lag_stride)?;
    let enc = encoder_config(cfg);
    let horizons = cfg.horizon_steps()?;
    let taus = cohort.patient_taus();
    let taus = cfg.per_patient_taus.then_some(&taus);
    let probe_cfg = cfg.probe_config();
    let policy = cfg.policy_spec();
    let sets = parallel_map_indexed(cohort.patients.len(), cfg.workers, |i| {
        let p = &cohort.patients[i];
        let opts = DesignOptions { encoder: &enc, horizons: &horizons, patient_taus: taus };
        generate_probe_set(
            &p.params,
            p.index,
            cfg.master_seed,
            &policy,
            cfg.probe_days,
            &spec,
            &opts,
            &probe_cfg,
        )
    })?;
    ProbeSet::merge(sets)
}

/// Everything `bench` computes for one preset.
pub struct BenchOutputs {
    pub pair: MatchedPair,
    pub uni_table: LossTable,
    pub multi_table: LossTable,
    pub delta: DeltaReport,
    pub attribution: AttributionReport,
}

pub fn run_bench_for_preset(
    cfg: &RunConfig,
    cohort: &CohortData,
    preset_name: &str,
) -> Result<BenchOutputs> {
    let matrices = bench_matrices(cfg, cohort, preset_name)?;
    let pair = train_pair(cfg, cohort, &matrices)?;
    let uni_table = evaluate_side(&pair.uni, &matrices.test, cfg.loss)?;
    let multi_table = evaluate_side(&pair.multi, &matrices.test, cfg.loss)?;
    let mut boot_rng = global_stream(cfg.master_seed, "bootstrap");
    let delta = DeltaReport::build(
        &uni_table,
        &multi_table,
        cfg.tod_in_base,
        preset_name,
        cfg.bootstrap_reps,
        &mut boot_rng,
    )?;
    let mut perm_rng = global_stream(cfg.master_seed, "permutation");
    let attribution = permutation_importance(
        &pair.multi,
        &matrices.test,
        &default_groups(),
        cfg.loss,
        cfg.permutation_reps,
        &mut perm_rng,
    )?;
    Ok(BenchOutputs { pair, uni_table, multi_table, delta, attribution })
}

pub fn run_bench(cfg: &RunConfig) -> Result<BenchOutputs> {
    let cohort = build_cohort(cfg)?;
    run_bench_for_preset(cfg, &cohort, &cfg.preset.clone())
}

/// One fidelity level of a sweep: the full delta report plus the driver
/// attribution under that level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepLevel {
    pub level: String,
    pub delta: DeltaReport,
    pub attribution: AttributionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub levels: Vec<SweepLevel>,
}

impl SweepReport {
    /// Flat rows in level-major, horizon-minor order; the `sweep.csv` layout.
    pub fn rows(&self) -> Vec<(String, DeltaRow)> {
        let mut out = Vec::new();
        for level in &self.levels {
            for row in &level.delta.rows {
                out.push((level.level.clone(), row.clone()));
            }
        }
        out
    }
}

/// Re-degrades, retrains, and re-evaluates the matched pair at each fidelity
/// level with identical seeds, so the level axis is the only thing moving.
pub fn fidelity_sweep(cfg: &RunConfig, cohort: &CohortData, levels: &[String]) -> Result<SweepReport> {
    if levels.len() < 2 {
        return Err(Error::config(
            "fidelity sweep needs at least 2 levels; configure sweep_presets",
        ));
    }
    let mut out = Vec::with_capacity(levels.len());
    for level in levels {
        let bench = run_bench_for_preset(cfg, cohort, level)?;
        out.push(SweepLevel {
            level: level.clone(),
            delta: bench.delta,
            attribution: bench.attribution,
        });
    }
    Ok(SweepReport { levels: out })
}

pub fn run_sweep(cfg: &RunConfig) -> Result<SweepReport> {
    let cohort = build_cohort(cfg)?;
    fidelity_sweep(cfg, &cohort, &cfg.sweep_presets)
}

/// Probe outputs for both sides of the trained pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutputs {
    pub epsilon: f64,
    pub n_probes: usize,
    pub uni: ProbeReport,
    pub multi: ProbeReport,
}

pub fn run_probe_for_cohort(cfg: &RunConfig, cohort: &CohortData) -> Result<(ProbeOutputs, ProbeSet, MatchedPair)> {
    let matrices = bench_matrices(cfg, cohort, &cfg.preset)?;
    let pair = train_pair(cfg, cohort, &matrices)?;
    let set = cohort_probe_set(cfg, cohort, &matrices.multi_channels)?;
    let uni = probe_report(&pair.uni, &set, cfg.probe_epsilon)?;
    let multi = probe_report(&pair.multi, &set, cfg.probe_epsilon)?;
    let outputs = ProbeOutputs {
        epsilon: cfg.probe_epsilon,
        n_probes: set.probes.len(),
        uni,
        multi,
    };
    Ok((outputs, set, pair))
}

pub fn run_probe(cfg: &RunConfig) -> Result<(ProbeOutputs, ProbeSet, MatchedPair)> {
    let cohort = build_cohort(cfg)?;
    run_probe_for_cohort(cfg, &cohort)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitHorizonRow {
    pub horizon_min: i64,
    pub within: f64,
    pub cross: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFoldRow {
    pub patient: String,
    pub within: f64,
    pub cross: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub loss: LossKind,
    pub family: String,
    pub n_patients: usize,
    pub horizons_min: Vec<i64>,
    pub within_pooled: f64,
    pub cross_pooled: f64,
    /// cross / within pooled loss; > 1 means held-out patients are harder.
    pub ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub per_horizon: Vec<SplitHorizonRow>,
    pub per_patient: Vec<SplitFoldRow>,
}

/// Per-patient, per-horizon accumulated loss sums plus window count.
struct FoldAccum {
    sums: Vec<f64>,
    n: usize,
}

fn accumulate(table: &LossTable, loss: LossKind, n_horizons: usize) -> FoldAccum {
    let mut sums = vec![0.0; n_horizons];
    for rec in &table.records {
        for (h, e) in rec.errors.iter().enumerate() {
            sums[h] += loss.accumulant(*e);
        }
    }
    FoldAccum { sums, n: table.records.len() }
}

fn pooled_from_accums(accums: &[&FoldAccum], loss: LossKind, n_horizons: usize) -> f64 {
    let mut sums = vec![0.0; n_horizons];
    let mut n = 0usize;
    for a in accums {
        for h in 0..n_horizons {
            sums[h] += a.sums[h];
        }
        n += a.n;
    }
    let per_h: Vec<f64> = sums.iter().map(|s| loss.from_sum(*s, n)).collect();
    per_h.iter().sum::<f64>() / n_horizons as f64
}

/// Within- vs cross-subject evaluation. Each patient's within model trains on
/// that patient's own training days; the matching cross model trains on every
/// other patient's training days. Both are scored on the same held-out test
/// days, per-patient losses are averaged, and the bootstrap interval
/// resamples patients.
pub fn subject_split_eval(cfg: &RunConfig, cohort: &CohortData) -> Result<SplitReport> {
    let n_patients = cohort.patients.len();
    if n_patients < 2 {
        return Err(Error::validation(
            "subject split needs at least 2 patients; raise n_patients",
        ));
    }
    let (_, multi_channels) = cfg.pair_channels();
    let logged = cohort.logged_days(cfg, &cfg.preset)?;
    let n_train = train_day_count(cfg.days, cfg.train_frac)?;
    let taus_map = cohort.patient_taus();
    let taus = cfg.per_patient_taus.then_some(&taus_map);

    let others_train = |skip: usize| -> Vec<EpisodeRecord> {
        let mut eps = Vec::new();
        for (i, days) in logged.iter().enumerate() {
            if i != skip {
                eps.extend_from_slice(&days[..n_train]);
            }
        }
        eps
    };

    let n_horizons = cfg.horizons_min.len();
    let folds = parallel_map_indexed(n_patients, cfg.workers, |k| {
        let test_dm = design_for_episodes(cfg, &logged[k][n_train..], &multi_channels, taus)?;
        let within_train =
            design_for_episodes(cfg, &logged[k][..n_train], &multi_channels, taus)?;
        let within_model = fit(
            &within_train,
            &cfg.model_family(within_train.n_rows()),
            &FitOptions::seeded(cfg.master_seed),
        )?;
        let cross_train = design_for_episodes(cfg, &others_train(k), &multi_channels, taus)?;
        let cross_model = fit(
            &cross_train,
            &cfg.model_family(cross_train.n_rows()),
            &FitOptions::seeded(cfg.master_seed),
        )?;
        let within_table = evaluate(&within_model, &test_dm, cfg.loss)?;
        let cross_table = evaluate(&cross_model, &test_dm, cfg.loss)?;
        Ok((
            accumulate(&within_table, cfg.loss, n_horizons),
            accumulate(&cross_table, cfg.loss, n_horizons),
        ))
    })?;

    let fold_loss =
        |a: &FoldAccum| -> f64 { pooled_from_accums(&[a], cfg.loss, n_horizons) };
    let within_by_patient: Vec<f64> = folds.iter().map(|f| fold_loss(&f.0)).collect();
    let cross_by_patient: Vec<f64> = folds.iter().map(|f| fold_loss(&f.1)).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let within_pooled = mean(&within_by_patient);
    let cross_pooled = mean(&cross_by_patient);
    let ratio = cross_pooled / within_pooled;

    let mut rng = global_stream(cfg.master_seed, "split-bootstrap");
    let mut samples = Vec::with_capacity(cfg.bootstrap_reps);
    for _ in 0..cfg.bootstrap_reps {
        let mut w = 0.0;
        let mut c = 0.0;
        for _ in 0..n_patients {
            let i = rand::Rng::gen_range(&mut rng, 0..n_patients);
            w += within_by_patient[i];
            c += cross_by_patient[i];
        }
        if w > 0.0 {
            samples.push(c / w);
        }
    }
    if samples.is_empty() {
        return Err(Error::validation(
            "split bootstrap produced no finite ratio samples",
        ));
    }
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let ci_low = sorted_quantile(&samples, 0.025).min(ratio);
    let ci_high = sorted_quantile(&samples, 0.975).max(ratio);

    let per_horizon = (0..n_horizons)
        .map(|h| {
            let at_h = |a: &FoldAccum| cfg.loss.from_sum(a.sums[h], a.n);
            SplitHorizonRow {
                horizon_min: cfg.horizons_min[h],
                within: mean(&folds.iter().map(|f| at_h(&f.0)).collect::<Vec<_>>()),
                cross: mean(&folds.iter().map(|f| at_h(&f.1)).collect::<Vec<_>>()),
            }
        })
        .collect();
    let per_patient = cohort
        .patients
        .iter()
        .enumerate()
        .map(|(k, p)| SplitFoldRow {
            patient: p.patient_id().to_string(),
            within: within_by_patient[k],
            cross: cross_by_patient[k],
        })
        .collect();

    Ok(SplitReport {
        loss: cfg.loss,
        family: cfg.model_family(0).name().to_string(),
        n_patients,
        horizons_min: cfg.horizons_min.clone(),
        within_pooled,
        cross_pooled,
        ratio,
        ci_low,
        ci_high,
        per_horizon,
        per_patient,
    })
}

pub fn run_split(cfg: &RunConfig) -> Result<SplitReport> {
    let cohort = build_cohort(cfg)?;
    subject_split_eval(cfg, &cohort)
}

/// Direct delta rows between two loss tables; re-exported convenience for
/// callers holding tables rather than full bench outputs.
pub fn delta_rows(
    uni: &LossTable,
    multi: &LossTable,
    b_reps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DeltaRow>> {
    delta_drivers(uni, multi, b_reps, rng)
}

/// Leaves only pairs whose simulator truths are distinguishable; mirrors the
/// probe module's tie rule for external callers assembling custom sets.
pub fn distinguishable(delta_truth: f64) -> bool {
    delta_truth.abs() > TIE_EPSILON
}
