//! Episode file I/O.
//!
//! An episode is stored as a pair of files sharing a stem:
//! `<stem>.cgm.csv` with header `t_min,glucose_mgdl,quality`, and
//! `<stem>.events.jsonl` with one JSON event object per line. Synthetic
//! episodes additionally persist `<stem>.latent.csv` (same CSV layout, no
//! quality column semantics beyond `measured`). UTF-8, LF line endings.
//!
//! The stem itself carries identity: `<patient_id>_d<NN>` names day `NN` of
//! a patient; a stem without the `_d` suffix is a single-episode patient.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::timeline::{DriverEvent, EpisodeRecord, GlucoseTrace, Quality, TimeGrid};

pub const CGM_HEADER: &str = "t_min,glucose_mgdl,quality";

/// Extracts the patient id from an episode stem: everything before a final
/// `_d<digits>` suffix, or the whole stem when no such suffix exists.
pub fn patient_id_from_stem(stem: &str) -> &str {
    if let Some(pos) = stem.rfind("_d") {
        let digits = &stem[pos + 2..];
        if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) {
            return &stem[..pos];
        }
    }
    stem
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_trace_csv(trace: &GlucoseTrace, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(trace.values.len() * 24);
    out.push_str(CGM_HEADER);
    out.push('\n');
    for (k, t) in trace.grid.times().enumerate() {
        out.push_str(&format!("{},{},{}\n", t, trace.values[k], trace.quality[k].as_str()));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_trace_csv(path: &Path) -> Result<GlucoseTrace> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l).unwrap_or("");
    if header != CGM_HEADER {
        return Err(Error::validation(format!(
            "{}: expected header {CGM_HEADER:?}, got {header:?}",
            path.display()
        )));
    }
    let mut times = Vec::new();
    let mut values = Vec::new();
    let mut quality = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let mut fields = line.split(',');
        let (t, v, q) = match (fields.next(), fields.next(), fields.next(), fields.next()) {
            (Some(t), Some(v), Some(q), None) => (t, v, q),
            _ => {
                return Err(Error::validation(format!(
                    "{} line {lineno}: expected 3 comma-separated fields",
                    path.display()
                )))
            }
        };
        let t: i64 = t.parse().map_err(|_| {
            Error::validation(format!("{} line {lineno}: bad t_min {t:?}", path.display()))
        })?;
        let v: f64 = v.parse().map_err(|_| {
            Error::validation(format!(
                "{} line {lineno}: bad glucose_mgdl {v:?}",
                path.display()
            ))
        })?;
        times.push(t);
        values.push(v);
        quality.push(Quality::parse(q).map_err(|e| {
            Error::validation(format!("{} line {lineno}: {e}", path.display()))
        })?);
    }
    if times.is_empty() {
        return Err(Error::validation(format!("{}: no data rows", path.display())));
    }
    let step = if times.len() >= 2 { times[1] - times[0] } else { 5 };
    let grid = TimeGrid::new(times[0], step, times.len())?;
    for (k, t) in times.iter().enumerate() {
        if *t != grid.time_at(k) {
            return Err(Error::validation(format!(
                "{} line {}: t_min {} breaks the uniform grid (expected {})",
                path.display(),
                k + 2,
                t,
                grid.time_at(k)
            )));
        }
    }
    GlucoseTrace::new(grid, values, quality)
}

/// Writes `<stem>.cgm.csv`, `<stem>.events.jsonl`, and when the latent trace
/// is present `<stem>.latent.csv`. `stem` is a path without extension.
pub fn save_episode(episode: &EpisodeRecord, stem: &Path) -> Result<()> {
    if let Some(dir) = stem.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    write_trace_csv(&episode.cgm, &with_suffix(stem, ".cgm.csv"))?;
    let events_path = with_suffix(stem, ".events.jsonl");
    let mut out = String::new();
    for ev in &episode.events {
        out.push_str(&serde_json::to_string(ev).expect("event serialization"));
        out.push('\n');
    }
    fs::write(&events_path, out).map_err(|e| Error::io(&events_path, e))?;
    if let Some(latent) = &episode.latent_glucose {
        write_trace_csv(latent, &with_suffix(stem, ".latent.csv"))?;
    }
    Ok(())
}

/// Loads an episode from its stem path; the episode id is the stem's file
/// name and the patient id is derived from it.
pub fn load_episode(stem: &Path) -> Result<EpisodeRecord> {
    let episode_id = stem
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::validation(format!("bad episode stem {:?}", stem)))?
        .to_string();
    let patient_id = patient_id_from_stem(&episode_id).to_string();
    let cgm = read_trace_csv(&with_suffix(stem, ".cgm.csv"))?;
    let events_path = with_suffix(stem, ".events.jsonl");
    let text = fs::read_to_string(&events_path).map_err(|e| Error::io(&events_path, e))?;
    let mut events = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let raw: DriverEvent = serde_json::from_str(line).map_err(|e| {
            Error::validation(format!(
                "{} line {}: {e}",
                events_path.display(),
                idx + 1
            ))
        })?;
        // Re-validate through the constructor so file edits cannot smuggle in
        // out-of-range magnitudes.
        events.push(
            DriverEvent::new(raw.t_min, raw.kind, raw.magnitude, raw.duration_min).map_err(
                |e| {
                    Error::validation(format!("{} line {}: {e}", events_path.display(), idx + 1))
                },
            )?,
        );
    }
    let latent_path = with_suffix(stem, ".latent.csv");
    let latent = if latent_path.exists() { Some(read_trace_csv(&latent_path)?) } else { None };
    EpisodeRecord::new(patient_id, episode_id, cgm, events, latent)
}

/// Lists episode stems (paths without the `.cgm.csv` suffix) in a directory,
/// sorted by name for deterministic iteration order.
pub fn list_episode_stems(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut stems = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let name = match name.to_str() {
            Some(n) => n,
            None => continue,
        };
        if let Some(stem) = name.strip_suffix(".cgm.csv") {
            stems.push(dir.join(stem));
        }
    }
    stems.sort();
    Ok(stems)
}
