//! Report emission: every artifact the CLI writes, plus the loaders the
//! plotting step reads them back with. Each JSON report embeds the config
//! hash, master seed, and the time-of-day grouping convention; CSV files use
//! shortest round-trip float formatting so re-parsing gives back the exact
//! values.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::delta::{AttributionReport, DeltaReport};
use crate::error::{Error, Result};
use crate::io::save_episode;
use crate::pipeline::{BenchOutputs, CohortData, ProbeOutputs, SplitReport, SweepReport};
use crate::probe::ProbeSet;

pub const SWEEP_CSV_HEADER: &str =
    "noise_level,horizon_min,l_uni,l_multi,delta,pct,ci_low,ci_high,n";
pub const DELTA_CSV_HEADER: &str = "horizon_min,l_uni,l_multi,delta,pct,ci_low,ci_high,n";

/// Output tree under the configured out_dir.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub out_dir: PathBuf,
}

impl RunPaths {
    pub fn new(out_dir: &Path) -> Self {
        RunPaths { out_dir: out_dir.to_path_buf() }
    }

    pub fn episodes_dir(&self) -> PathBuf {
        self.out_dir.join("episodes")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.out_dir.join("reports")
    }

    pub fn plots_dir(&self) -> PathBuf {
        self.out_dir.join("plots")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.out_dir.join("models")
    }

    pub fn manifest(&self) -> PathBuf {
        self.out_dir.join("manifest.json")
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        ensure_dir(dir)?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::validation(format!("serialization failed: {e}")))?;
    json.push('\n');
    write_text(path, &json)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::validation(format!("malformed report {}: {e}", path.display())))
}

/// Provenance block embedded in every JSON report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub config_hash: String,
    pub master_seed: u64,
    /// Grouping convention: true means time of day is a base channel, not a
    /// driver.
    pub tod_in_base: bool,
    pub family: String,
    pub preset: String,
}

impl ReportMeta {
    pub fn from_config(cfg: &RunConfig) -> Self {
        ReportMeta {
            config_hash: cfg.config_hash(),
            master_seed: cfg.master_seed,
            tod_in_base: cfg.tod_in_base,
            family: cfg.family.as_str().to_string(),
            preset: cfg.preset.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReportFile {
    pub meta: ReportMeta,
    pub report: DeltaReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionFile {
    pub meta: ReportMeta,
    pub report: AttributionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFile {
    pub meta: ReportMeta,
    pub report: SweepReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFile {
    pub meta: ReportMeta,
    pub report: ProbeOutputs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub meta: ReportMeta,
    pub report: SplitReport,
}

/// Fails when a report is missing a configured horizon row.
pub fn check_report_complete(cfg: &RunConfig, report: &DeltaReport) -> Result<()> {
    for h in &cfg.horizons_min {
        if !report.rows.iter().any(|r| r.horizon_min == *h) {
            return Err(Error::guard(format!(
                "report incomplete: no row for the {h} min horizon"
            )));
        }
    }
    Ok(())
}

pub fn delta_csv(report: &DeltaReport) -> String {
    let mut out = String::from(DELTA_CSV_HEADER);
    out.push('\n');
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.horizon_min, r.l_uni, r.l_multi, r.delta, r.pct, r.ci_low, r.ci_high, r.n_windows
        );
    }
    out
}

pub fn sweep_csv(report: &SweepReport) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for (level, r) in report.rows() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            level, r.horizon_min, r.l_uni, r.l_multi, r.delta, r.pct, r.ci_low, r.ci_high,
            r.n_windows
        );
    }
    out
}

/// Parsed `sweep.csv` row; the plot step and tests read these back.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCsvRow {
    pub noise_level: String,
    pub horizon_min: i64,
    pub l_uni: f64,
    pub l_multi: f64,
    pub delta: f64,
    pub pct: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepCsvRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == SWEEP_CSV_HEADER => {}
        other => {
            return Err(Error::validation(format!(
                "sweep.csv header mismatch: expected `{SWEEP_CSV_HEADER}`, got {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 9 {
            return Err(Error::validation(format!(
                "sweep.csv line {}: expected 9 columns, got {}",
                i + 2,
                cells.len()
            )));
        }
        let parse_f = |j: usize| -> Result<f64> {
            cells[j].parse().map_err(|_| {
                Error::validation(format!("sweep.csv line {}: bad float `{}`", i + 2, cells[j]))
            })
        };
        rows.push(SweepCsvRow {
            noise_level: cells[0].to_string(),
            horizon_min: cells[1].parse().map_err(|_| {
                Error::validation(format!(
                    "sweep.csv line {}: bad horizon `{}`",
                    i + 2,
                    cells[1]
                ))
            })?,
            l_uni: parse_f(2)?,
            l_multi: parse_f(3)?,
            delta: parse_f(4)?,
            pct: parse_f(5)?,
            ci_low: parse_f(6)?,
            ci_high: parse_f(7)?,
            n: cells[8].parse().map_err(|_| {
                Error::validation(format!("sweep.csv line {}: bad count `{}`", i + 2, cells[8]))
            })?,
        });
    }
    Ok(rows)
}

pub fn write_bench_reports(
    cfg: &RunConfig,
    paths: &RunPaths,
    outputs: &BenchOutputs,
) -> Result<()> {
    check_report_complete(cfg, &outputs.delta)?;
    let meta = ReportMeta::from_config(cfg);
    let dir = paths.reports_dir();
    write_json(
        &dir.join("delta_report.json"),
        &DeltaReportFile { meta: meta.clone(), report: outputs.delta.clone() },
    )?;
    write_text(&dir.join("delta_report.csv"), &delta_csv(&outputs.delta))?;
    write_json(
        &dir.join("attribution.json"),
        &AttributionFile { meta, report: outputs.attribution.clone() },
    )?;
    let models = paths.models_dir();
    ensure_dir(&models)?;
    crate::forecast::models::save_model(&outputs.pair.uni, &models.join("uni.json"))?;
    crate::forecast::models::save_model(&outputs.pair.multi, &models.join("multi.json"))?;
    Ok(())
}

pub fn write_sweep_reports(cfg: &RunConfig, paths: &RunPaths, report: &SweepReport) -> Result<()> {
    for level in &report.levels {
        check_report_complete(cfg, &level.delta)?;
    }
    let dir = paths.reports_dir();
    write_text(&dir.join("sweep.csv"), &sweep_csv(report))?;
    write_json(
        &dir.join("sweep.json"),
        &SweepFile { meta: ReportMeta::from_config(cfg), report: report.clone() },
    )
}

/// One probe pair per line, with enough context to audit it by hand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePairLine {
    pub scenario: String,
    pub patient_id: String,
    pub anchor_t_min: i64,
    pub probe_horizon_min: i64,
    pub dose_lo: f64,
    pub dose_hi: f64,
    pub truth_lo: f64,
    pub truth_hi: f64,
    pub sign: f64,
}

pub fn probe_pairs_jsonl(set: &ProbeSet) -> String {
    let mut out = String::new();
    for p in set.pairs() {
        let probe = &set.probes[p.probe_index];
        let line = ProbePairLine {
            scenario: probe.scenario.as_str().to_string(),
            patient_id: probe.patient_id.clone(),
            anchor_t_min: probe.anchor_t_min,
            probe_horizon_min: probe.probe_horizon_min,
            dose_lo: probe.doses[p.lo_dose_index],
            dose_hi: probe.doses[p.hi_dose_index],
            truth_lo: probe.truths[p.lo_dose_index],
            truth_hi: probe.truths[p.hi_dose_index],
            sign: p.sign,
        };
        out.push_str(&serde_json::to_string(&line).expect("pair serialization"));
        out.push('\n');
    }
    out
}

pub fn write_probe_reports(
    cfg: &RunConfig,
    paths: &RunPaths,
    outputs: &ProbeOutputs,
    set: &ProbeSet,
) -> Result<()> {
    let dir = paths.reports_dir();
    write_json(
        &dir.join("probe_report.json"),
        &ProbeFile { meta: ReportMeta::from_config(cfg), report: outputs.clone() },
    )?;
    write_text(&dir.join("probe_pairs.jsonl"), &probe_pairs_jsonl(set))
}

pub fn write_split_report(cfg: &RunConfig, paths: &RunPaths, report: &SplitReport) -> Result<()> {
    write_json(
        &paths.reports_dir().join("split_report.json"),
        &SplitFile { meta: ReportMeta::from_config(cfg), report: report.clone() },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub master_seed: u64,
    pub preset: String,
    pub n_patients: usize,
    pub days: usize,
    pub grid_step_min: i64,
    /// Digest over every file digest, path order; changes when any byte of
    /// the dataset changes.
    pub data_hash: String,
    pub files: Vec<FileEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Writes the degraded episode files plus `manifest.json` and returns the
/// manifest. Episode stems are `episodes/<pid>_dNN`.
pub fn write_dataset(cfg: &RunConfig, paths: &RunPaths, cohort: &CohortData) -> Result<Manifest> {
    let dir = paths.episodes_dir();
    ensure_dir(&dir)?;
    let logged = cohort.logged_days(cfg, &cfg.preset)?;
    let mut rel_paths: Vec<String> = Vec::new();
    for days in &logged {
        for ep in days {
            let stem = dir.join(&ep.episode_id);
            save_episode(ep, &stem)?;
            for suffix in [".cgm.csv", ".events.jsonl", ".latent.csv"] {
                let p = format!("episodes/{}{}", ep.episode_id, suffix);
                if dir.join(format!("{}{}", ep.episode_id, suffix)).exists() {
                    rel_paths.push(p);
                }
            }
        }
    }
    rel_paths.sort();
    let mut files = Vec::with_capacity(rel_paths.len());
    let mut data_hasher = Sha256::new();
    for rel in &rel_paths {
        let digest = hash_file(&paths.out_dir.join(rel))?;
        data_hasher.update(rel.as_bytes());
        data_hasher.update([0u8]);
        data_hasher.update(digest.as_bytes());
        data_hasher.update([b'\n']);
        files.push(FileEntry { path: rel.clone(), sha256: digest });
    }
    let data_digest = data_hasher.finalize();
    let manifest = Manifest {
        config_hash: cfg.config_hash(),
        master_seed: cfg.master_seed,
        preset: cfg.preset.clone(),
        n_patients: cfg.n_patients,
        days: cfg.days,
        grid_step_min: cfg.grid_step_min,
        data_hash: data_digest[..8].iter().map(|b| format!("{b:02x}")).collect(),
        files,
    };
    write_json(&paths.manifest(), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delta::{DeltaRow, LossKind};
    use crate::pipeline::{run_bench, SweepLevel};

    fn tiny_config(out: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.n_patients = 2;
        cfg.days = 2;
        cfg.context_len = 12;
        cfg.bootstrap_reps = 20;
        cfg.permutation_reps = 2;
        cfg.window_stride = 12;
        cfg.out_dir = out.to_path_buf();
        cfg
    }

    fn demo_delta() -> DeltaReport {
        DeltaReport {
            loss: LossKind::Rmse,
            tod_in_base: true,
            noise_level: "clean".into(),
            n_episodes: 4,
            rows: vec![
                DeltaRow {
                    horizon_min: 30,
                    l_uni: 10.5,
                    l_multi: 9.25,
                    delta: 1.25,
                    pct: 11.904761904761905,
                    ci_low: 0.5,
                    ci_high: 2.0,
                    n_windows: 100,
                },
                DeltaRow {
                    horizon_min: 60,
                    l_uni: 20.0,
                    l_multi: 16.0,
                    delta: 4.0,
                    pct: 20.0,
                    ci_low: 2.5,
                    ci_high: 5.5,
                    n_windows: 100,
                },
            ],
        }
    }

    #[test]
    fn sweep_csv_round_trips_exactly() {
        let report = SweepReport {
            levels: vec![SweepLevel {
                level: "clean".into(),
                delta: demo_delta(),
                attribution: crate::delta::AttributionReport {
                    base_loss: 1.0,
                    entries: vec![],
                    residual_share: 1.0,
                    r_reps: 2,
                    n_windows: 10,
                },
            }],
        };
        let text = sweep_csv(&report);
        assert!(text.starts_with(SWEEP_CSV_HEADER));
        let rows = parse_sweep_csv(&text).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].noise_level, "clean");
        assert_eq!(rows[0].horizon_min, 30);
        assert_eq!(rows[0].l_uni, 10.5);
        assert_eq!(rows[0].pct, 11.904761904761905);
        assert_eq!(rows[1].delta, 4.0);
    }

    #[test]
    fn incomplete_report_trips_the_guard() {
        let mut cfg = RunConfig::default();
        cfg.horizons_min = vec![30, 60, 120];
        let report = demo_delta();
        let err = check_report_complete(&cfg, &report).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        assert!(err.to_string().contains("120 min"), "{err}");
    }

    #[test]
    fn dataset_manifest_counts_and_hash_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let paths = RunPaths::new(&cfg.out_dir);
        let cohort = crate::pipeline::build_cohort(&cfg).unwrap();
        let m1 = write_dataset(&cfg, &paths, &cohort).unwrap();
        // 2 patients x 2 days x 3 files per episode.
        assert_eq!(m1.files.len(), 12);
        let m2 = write_dataset(&cfg, &paths, &cohort).unwrap();
        assert_eq!(m1, m2);
        let mut other = cfg.clone();
        other.master_seed = 43;
        let dir2 = tempfile::tempdir().unwrap();
        other.out_dir = dir2.path().to_path_buf();
        let cohort2 = crate::pipeline::build_cohort(&other).unwrap();
        let m3 = write_dataset(&other, &RunPaths::new(&other.out_dir), &cohort2).unwrap();
        assert_ne!(m1.data_hash, m3.data_hash);
        assert_ne!(m1.config_hash, m3.config_hash);
    }

    #[test]
    fn bench_reports_serialize_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let paths = RunPaths::new(&cfg.out_dir);
        let outputs = run_bench(&cfg).unwrap();
        write_bench_reports(&cfg, &paths, &outputs).unwrap();
        let loaded: DeltaReportFile =
            read_json(&paths.reports_dir().join("delta_report.json")).unwrap();
        assert_eq!(loaded.report, outputs.delta);
        assert_eq!(loaded.meta.config_hash, cfg.config_hash());
        assert_eq!(loaded.meta.master_seed, cfg.master_seed);
        assert!(loaded.meta.tod_in_base);
        let att: AttributionFile =
            read_json(&paths.reports_dir().join("attribution.json")).unwrap();
        assert_eq!(att.report, outputs.attribution);
        let model = crate::forecast::models::load_model(&paths.models_dir().join("multi.json"))
            .unwrap();
        assert_eq!(model, outputs.pair.multi);
        let csv = std::fs::read_to_string(paths.reports_dir().join("delta_report.csv")).unwrap();
        assert!(csv.starts_with(DELTA_CSV_HEADER));
        assert_eq!(csv.lines().count(), 1 + outputs.delta.rows.len());
    }

    #[test]
    fn probe_pairs_jsonl_is_one_valid_object_per_line() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.probe_days = 1;
        cfg.probe_n_anchors = 2;
        let (outputs, set, _) = crate::pipeline::run_probe(&cfg).unwrap();
        let paths = RunPaths::new(&cfg.out_dir);
        write_probe_reports(&cfg, &paths, &outputs, &set).unwrap();
        let text =
            std::fs::read_to_string(paths.reports_dir().join("probe_pairs.jsonl")).unwrap();
        let mut n = 0;
        for line in text.lines() {
            let parsed: ProbePairLine = serde_json::from_str(line).unwrap();
            assert!(parsed.dose_hi > parsed.dose_lo);
            assert!(parsed.sign == 1.0 || parsed.sign == -1.0);
            n += 1;
        }
        assert_eq!(n, set.pairs().len());
        let probe_file: ProbeFile =
            read_json(&paths.reports_dir().join("probe_report.json")).unwrap();
        assert_eq!(probe_file.report, outputs);
    }
}
