//! Loss measurement and the headline statistic: the univariate-minus-
//! multivariate loss gap per horizon, with episode-level bootstrap
//! intervals and permutation-based channel attribution.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::features::{Channel, DesignMatrix, WindowKey};
use crate::forecast::models::{forecast, TrainedModel};
use crate::numeric::{pairwise_sum, sorted_quantile};

pub const DEFAULT_BOOTSTRAP_REPS: usize = 1000;
pub const DEFAULT_PERMUTATION_REPS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Rmse,
    Mae,
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Rmse => "rmse",
            LossKind::Mae => "mae",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rmse" => Ok(LossKind::Rmse),
            "mae" => Ok(LossKind::Mae),
            other => Err(Error::config(format!("unknown loss {other:?}; use rmse or mae"))),
        }
    }

    /// Aggregate from signed errors.
    pub fn aggregate(&self, errors: &[f64]) -> f64 {
        if errors.is_empty() {
            return 0.0;
        }
        let n = errors.len() as f64;
        match self {
            LossKind::Rmse => {
                let sq: Vec<f64> = errors.iter().map(|e| e * e).collect();
                (pairwise_sum(&sq) / n).sqrt()
            }
            LossKind::Mae => {
                let ab: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
                pairwise_sum(&ab) / n
            }
        }
    }

    /// Aggregate from an accumulated sum of squared (rmse) or absolute (mae)
    /// errors; used by the bootstrap which resamples episode-level sums.
    pub fn from_sum(&self, sum: f64, n: usize) -> f64 {
        if n == 0 {
            return 0.0;
        }
        match self {
            LossKind::Rmse => (sum / n as f64).sqrt(),
            LossKind::Mae => sum / n as f64,
        }
    }

    pub fn accumulant(&self, error: f64) -> f64 {
        match self {
            LossKind::Rmse => error * error,
            LossKind::Mae => error.abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForecastTask {
    pub horizons_min: Vec<i64>,
    pub loss: LossKind,
}

impl ForecastTask {
    pub fn new(horizons_min: Vec<i64>, loss: LossKind) -> Self {
        ForecastTask { horizons_min, loss }
    }

    /// Horizon offsets in grid steps.
    pub fn horizon_steps(&self, step_min: i64) -> Result<Vec<usize>> {
        if self.horizons_min.is_empty() {
            return Err(Error::config("task needs at least one horizon"));
        }
        let mut steps = Vec::with_capacity(self.horizons_min.len());
        for pair in self.horizons_min.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::config("horizons must be strictly ascending"));
            }
        }
        for h in &self.horizons_min {
            if *h <= 0 || h % step_min != 0 {
                return Err(Error::config(format!(
                    "horizon {h} min is not a positive multiple of the {step_min} min grid step"
                )));
            }
            steps.push((h / step_min) as usize);
        }
        Ok(steps)
    }
}

/// Signed per-horizon errors (prediction minus truth) for one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub key: WindowKey,
    pub errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTable {
    pub family: String,
    pub loss: LossKind,
    pub horizons_min: Vec<i64>,
    /// Aggregate loss per horizon, recomputable from the records.
    pub aggregate: Vec<f64>,
    pub records: Vec<EvalRecord>,
}

impl LossTable {
    pub fn n_windows(&self) -> usize {
        self.records.len()
    }

    pub fn recompute_aggregate(&self) -> Vec<f64> {
        (0..self.horizons_min.len())
            .map(|h| {
                let errs: Vec<f64> = self.records.iter().map(|r| r.errors[h]).collect();
                self.loss.aggregate(&errs)
            })
            .collect()
    }
}

fn check_leakage(model: &TrainedModel, dm: &DesignMatrix) -> Result<()> {
    let overlap: Vec<&String> =
        dm.episode_ids.iter().filter(|id| model.train_episodes.contains(*id)).collect();
    if !overlap.is_empty() {
        let shown: Vec<&str> = overlap.iter().take(5).map(|s| s.as_str()).collect();
        return Err(Error::guard(format!(
            "evaluation episodes overlap the training set ({} shared, e.g. {})",
            overlap.len(),
            shown.join(", ")
        )));
    }
    Ok(())
}

fn check_compat(model: &TrainedModel, dm: &DesignMatrix) -> Result<()> {
    if model.n_cols != dm.n_cols || model.col_channels != dm.col_channels {
        return Err(Error::validation(
            "model feature layout does not match the design matrix",
        ));
    }
    if model.horizons != dm.horizons {
        return Err(Error::validation("model horizons do not match the design matrix"));
    }
    Ok(())
}

/// Evaluates one model over the windows of a held-out design matrix.
pub fn evaluate(model: &TrainedModel, dm: &DesignMatrix, loss: LossKind) -> Result<LossTable> {
    check_compat(model, dm)?;
    check_leakage(model, dm)?;
    let n_h = dm.horizons.len();
    let mut records = Vec::with_capacity(dm.n_rows());
    for r in 0..dm.n_rows() {
        let key = &dm.keys[r];
        let preds = forecast(model, dm.row(r), Some(&key.patient))?;
        let errors: Vec<f64> = (0..n_h).map(|h| preds[h] - dm.y[h][r]).collect();
        records.push(EvalRecord { key: key.clone(), errors });
    }
    let horizons_min: Vec<i64> = dm.horizons.iter().map(|h| *h as i64 * dm.step_min).collect();
    let table = LossTable {
        family: model.family.name().to_string(),
        loss,
        horizons_min,
        aggregate: Vec::new(),
        records,
    };
    let aggregate = table.recompute_aggregate();
    Ok(LossTable { aggregate, ..table })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub horizon_min: i64,
    pub l_uni: f64,
    pub l_multi: f64,
    /// Positive when the driver channels helped.
    pub delta: f64,
    pub pct: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub loss: LossKind,
    pub tod_in_base: bool,
    pub noise_level: String,
    pub n_episodes: usize,
    pub rows: Vec<DeltaRow>,
}

/// Per-episode loss accumulants for both tables, the exchangeable unit of
/// the block bootstrap.
struct EpisodeCache {
    n: usize,
    /// Per horizon: (uni accumulant sum, multi accumulant sum).
    sums: Vec<(f64, f64)>,
}

fn episode_caches(uni: &LossTable, multi: &LossTable) -> Vec<EpisodeCache> {
    let n_h = uni.horizons_min.len();
    let mut order: Vec<&str> = Vec::new();
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    let mut grouped: Vec<Vec<usize>> = Vec::new();
    for (i, rec) in uni.records.iter().enumerate() {
        let slot = *index.entry(rec.key.episode.as_str()).or_insert_with(|| {
            order.push(rec.key.episode.as_str());
            grouped.push(Vec::new());
            grouped.len() - 1
        });
        grouped[slot].push(i);
    }
    grouped
        .iter()
        .map(|rows| {
            let sums = (0..n_h)
                .map(|h| {
                    let u: Vec<f64> = rows
                        .iter()
                        .map(|&i| uni.loss.accumulant(uni.records[i].errors[h]))
                        .collect();
                    let m: Vec<f64> = rows
                        .iter()
                        .map(|&i| multi.loss.accumulant(multi.records[i].errors[h]))
                        .collect();
                    (pairwise_sum(&u), pairwise_sum(&m))
                })
                .collect();
            EpisodeCache { n: rows.len(), sums }
        })
        .collect()
}

fn check_key_match(uni: &LossTable, multi: &LossTable) -> Result<()> {
    if uni.records.len() == multi.records.len()
        && uni.records.iter().zip(&multi.records).all(|(a, b)| a.key == b.key)
    {
        return Ok(());
    }
    let uni_keys: BTreeSet<&WindowKey> = uni.records.iter().map(|r| &r.key).collect();
    let multi_keys: BTreeSet<&WindowKey> = multi.records.iter().map(|r| &r.key).collect();
    let fmt = |keys: Vec<&&WindowKey>| -> String {
        keys.iter()
            .take(5)
            .map(|k| format!("{}/{}@{}", k.patient, k.episode, k.anchor_t_min))
            .collect::<Vec<_>>()
            .join(", ")
    };
    let missing_multi: Vec<&&WindowKey> = uni_keys.difference(&multi_keys).collect();
    let missing_uni: Vec<&&WindowKey> = multi_keys.difference(&uni_keys).collect();
    Err(Error::validation(format!(
        "loss tables are not paired: {} keys missing from the multivariate table ({}); \
         {} missing from the univariate table ({})",
        missing_multi.len(),
        fmt(missing_multi),
        missing_uni.len(),
        fmt(missing_uni),
    )))
}

/// The loss gap per horizon with a 95% episode-level bootstrap interval.
/// Both tables must cover identical windows in identical order.
pub fn delta_drivers(
    uni: &LossTable,
    multi: &LossTable,
    b_reps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DeltaRow>> {
    if uni.loss != multi.loss {
        return Err(Error::validation("loss tables use different loss kinds"));
    }
    if uni.horizons_min != multi.horizons_min {
        return Err(Error::validation("loss tables use different horizons"));
    }
    check_key_match(uni, multi)?;
    if uni.records.is_empty() {
        return Err(Error::validation("loss tables are empty"));
    }
    let caches = episode_caches(uni, multi);
    let n_ep = caches.len();
    if n_ep < 2 {
        return Err(Error::validation(
            "bootstrap interval needs at least 2 episodes; simulate more days",
        ));
    }
    let n_h = uni.horizons_min.len();
    let mut boot: Vec<Vec<f64>> = vec![Vec::with_capacity(b_reps); n_h];
    for _ in 0..b_reps {
        let mut n_total = 0usize;
        let mut sums = vec![(0.0, 0.0); n_h];
        for _ in 0..n_ep {
            let c = &caches[rng.gen_range(0..n_ep)];
            n_total += c.n;
            for h in 0..n_h {
                sums[h].0 += c.sums[h].0;
                sums[h].1 += c.sums[h].1;
            }
        }
        for h in 0..n_h {
            let lu = uni.loss.from_sum(sums[h].0, n_total);
            let lm = uni.loss.from_sum(sums[h].1, n_total);
            boot[h].push(lu - lm);
        }
    }
    let mut rows = Vec::with_capacity(n_h);
    for h in 0..n_h {
        let l_uni = uni.aggregate[h];
        let l_multi = multi.aggregate[h];
        let delta = l_uni - l_multi;
        let pct = if l_uni != 0.0 { 100.0 * delta / l_uni } else { 0.0 };
        boot[h].sort_by(|a, b| a.partial_cmp(b).unwrap());
        let ci_low = sorted_quantile(&boot[h], 0.025).min(delta);
        let ci_high = sorted_quantile(&boot[h], 0.975).max(delta);
        rows.push(DeltaRow {
            horizon_min: uni.horizons_min[h],
            l_uni,
            l_multi,
            delta,
            pct,
            ci_low,
            ci_high,
            n_windows: uni.records.len(),
        });
    }
    Ok(rows)
}

impl DeltaReport {
    pub fn build(
        uni: &LossTable,
        multi: &LossTable,
        tod_in_base: bool,
        noise_level: &str,
        b_reps: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<DeltaReport> {
        let rows = delta_drivers(uni, multi, b_reps, rng)?;
        let episodes: BTreeSet<&str> =
            uni.records.iter().map(|r| r.key.episode.as_str()).collect();
        Ok(DeltaReport {
            loss: uni.loss,
            tod_in_base,
            noise_level: noise_level.to_string(),
            n_episodes: episodes.len(),
            rows,
        })
    }
}

/// 95% percentile bootstrap interval for the mean of paired per-window
/// differences, resampling whole episodes.
pub fn bootstrap_mean_diff_ci(
    diffs_by_episode: &[Vec<f64>],
    b_reps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let n_ep = diffs_by_episode.len();
    if n_ep < 2 {
        return Err(Error::validation(
            "bootstrap interval needs at least 2 episodes; simulate more days",
        ));
    }
    let caches: Vec<(f64, usize)> =
        diffs_by_episode.iter().map(|d| (pairwise_sum(d), d.len())).collect();
    let total_n: usize = caches.iter().map(|c| c.1).sum();
    if total_n == 0 {
        return Err(Error::validation("bootstrap needs at least one difference"));
    }
    let point = caches.iter().map(|c| c.0).sum::<f64>() / total_n as f64;
    let mut means = Vec::with_capacity(b_reps);
    for _ in 0..b_reps {
        let mut sum = 0.0;
        let mut n = 0usize;
        for _ in 0..n_ep {
            let c = &caches[rng.gen_range(0..n_ep)];
            sum += c.0;
            n += c.1;
        }
        means.push(if n == 0 { 0.0 } else { sum / n as f64 });
    }
    means.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = sorted_quantile(&means, 0.025).min(point);
    let hi = sorted_quantile(&means, 0.975).max(point);
    Ok((lo, hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionEntry {
    pub group: String,
    pub loss_increase: f64,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub base_loss: f64,
    pub entries: Vec<AttributionEntry>,
    /// 1 minus the summed shares; 1.0 when no group shows any increase.
    pub residual_share: f64,
    pub r_reps: usize,
    pub n_windows: usize,
}

/// Default grouping used by reports: glucose history, clock, drivers.
pub fn default_groups() -> Vec<(String, Vec<Channel>)> {
    vec![
        ("cgm_history".to_string(), vec![Channel::CgmLags]),
        ("time_of_day".to_string(), vec![Channel::TimeOfDay]),
        (
            "drivers".to_string(),
            vec![Channel::RawEvents, Channel::Iob, Channel::Cob, Channel::Rag],
        ),
    ]
}

fn pooled_loss(
    model: &TrainedModel,
    dm: &DesignMatrix,
    loss: LossKind,
    permuted: Option<(&[usize], &[usize])>,
) -> Result<f64> {
    let n_h = dm.horizons.len();
    let mut acc = vec![Vec::with_capacity(dm.n_rows()); n_h];
    let mut buf = vec![0.0; dm.n_cols];
    for r in 0..dm.n_rows() {
        buf.copy_from_slice(dm.row(r));
        if let Some((perm, cols)) = permuted {
            let src = dm.row(perm[r]);
            for &c in cols {
                buf[c] = src[c];
            }
        }
        let preds = forecast(model, &buf, Some(&dm.keys[r].patient))?;
        for h in 0..n_h {
            acc[h].push(preds[h] - dm.y[h][r]);
        }
    }
    let per_h: Vec<f64> = acc.iter().map(|errs| loss.aggregate(errs)).collect();
    Ok(pairwise_sum(&per_h) / n_h as f64)
}

/// Permutation importance over channel groups: each group's columns are
/// jointly permuted across windows, the pooled loss increase is averaged
/// over `r_reps` permutations, and shares are normalized over the positive
/// increases. Groups without matching columns get share exactly 0.
pub fn permutation_importance(
    model: &TrainedModel,
    dm: &DesignMatrix,
    groups: &[(String, Vec<Channel>)],
    loss: LossKind,
    r_reps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<AttributionReport> {
    check_compat(model, dm)?;
    check_leakage(model, dm)?;
    if groups.is_empty() || r_reps == 0 {
        return Err(Error::config("need at least one group and one repetition"));
    }
    if dm.n_rows() < 2 {
        return Err(Error::validation("permutation importance needs at least 2 windows"));
    }
    let mut seen: BTreeSet<Channel> = BTreeSet::new();
    for (name, chans) in groups {
        for ch in chans {
            if !seen.insert(*ch) {
                return Err(Error::config(format!(
                    "channel {} appears in more than one group ({name})",
                    ch.as_str()
                )));
            }
        }
    }
    for ch in &dm.col_channels {
        if !seen.contains(ch) {
            return Err(Error::config(format!(
                "channel {} is not covered by any group",
                ch.as_str()
            )));
        }
    }

    let base_loss = pooled_loss(model, dm, loss, None)?;
    let mut increases = Vec::with_capacity(groups.len());
    let mut perm: Vec<usize> = (0..dm.n_rows()).collect();
    for (_, chans) in groups {
        let cols: Vec<usize> = dm
            .col_channels
            .iter()
            .enumerate()
            .filter(|(_, c)| chans.contains(c))
            .map(|(i, _)| i)
            .collect();
        if cols.is_empty() {
            increases.push(0.0);
            continue;
        }
        let mut acc = Vec::with_capacity(r_reps);
        for _ in 0..r_reps {
            for (i, p) in perm.iter_mut().enumerate() {
                *p = i;
            }
            perm.shuffle(rng);
            let l = pooled_loss(model, dm, loss, Some((&perm, &cols)))?;
            acc.push(l - base_loss);
        }
        increases.push(pairwise_sum(&acc) / r_reps as f64);
    }

    let denom: f64 = increases.iter().map(|i| i.max(0.0)).sum();
    let entries: Vec<AttributionEntry> = groups
        .iter()
        .zip(&increases)
        .map(|((name, _), inc)| AttributionEntry {
            group: name.clone(),
            loss_increase: *inc,
            share: if denom > 0.0 { inc.max(0.0) / denom } else { 0.0 },
        })
        .collect();
    let share_sum: f64 = entries.iter().map(|e| e.share).sum();
    Ok(AttributionReport {
        base_loss,
        entries,
        residual_share: 1.0 - share_sum,
        r_reps,
        n_windows: dm.n_rows(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecast::features::FeatureSpec;
    use crate::forecast::models::{fit, FitOptions, ModelFamily, RidgeHead};
    use crate::rng::global_stream;
    use rand_distr::{Distribution, Normal};
    use std::collections::BTreeMap;

    fn synth_matrix(
        x_cols: Vec<Vec<f64>>,
        y: Vec<Vec<f64>>,
        episodes_per: usize,
    ) -> DesignMatrix {
        let n = x_cols[0].len();
        let p = x_cols.len();
        let spec = FeatureSpec::new(&[Channel::CgmLags], p.max(1), 1).unwrap();
        let mut x = Vec::with_capacity(n * p);
        for r in 0..n {
            for c in &x_cols {
                x.push(c[r]);
            }
        }
        let keys: Vec<WindowKey> = (0..n)
            .map(|i| WindowKey {
                patient: "p0".to_string(),
                episode: format!("p0_d{:02}", i % episodes_per),
                anchor_t_min: i as i64 * 5,
            })
            .collect();
        let episode_ids = keys.iter().map(|k| k.episode.clone()).collect();
        DesignMatrix {
            spec,
            horizons: (1..=y.len()).collect(),
            step_min: 5,
            col_channels: vec![Channel::CgmLags; p],
            n_cols: p,
            last_cgm: x_cols[p - 1].clone(),
            x,
            y,
            keys,
            episode_ids,
        }
    }

    fn table_with_errors(errors: Vec<Vec<f64>>, loss: LossKind, episodes_per: usize) -> LossTable {
        let records: Vec<EvalRecord> = errors
            .into_iter()
            .enumerate()
            .map(|(i, errs)| EvalRecord {
                key: WindowKey {
                    patient: "p0".to_string(),
                    episode: format!("p0_d{:02}", i % episodes_per),
                    anchor_t_min: i as i64 * 5,
                },
                errors: errs,
            })
            .collect();
        let n_h = records[0].errors.len();
        let mut t = LossTable {
            family: "test".to_string(),
            loss,
            horizons_min: (1..=n_h as i64).map(|h| h * 5).collect(),
            aggregate: Vec::new(),
            records,
        };
        t.aggregate = t.recompute_aggregate();
        t
    }

    #[test]
    fn persistence_on_constant_series_has_zero_loss() {
        let xs = vec![130.0; 24];
        let y = vec![130.0; 24];
        let dm = synth_matrix(vec![xs], vec![y], 3);
        let mut model = fit(&dm, &ModelFamily::Persistence, &FitOptions::seeded(0)).unwrap();
        // Persistence has no trainable state; drop the recorded episode ids
        // so the leakage guard lets us score the same windows.
        model.train_episodes.clear();
        let table = evaluate(&model, &dm, LossKind::Rmse).unwrap();
        assert_eq!(table.aggregate, vec![0.0]);
    }

    #[test]
    fn aggregate_matches_independent_two_pass_recomputation() {
        let mut rng = global_stream(31, "delta-test");
        let n = 500;
        let errs: Vec<Vec<f64>> =
            (0..n).map(|_| vec![rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0)]).collect();
        for loss in [LossKind::Rmse, LossKind::Mae] {
            let table = table_with_errors(errs.clone(), loss, 10);
            for h in 0..2 {
                let naive = match loss {
                    LossKind::Rmse => {
                        let mut acc = 0.0;
                        for r in &table.records {
                            acc += r.errors[h] * r.errors[h];
                        }
                        (acc / n as f64).sqrt()
                    }
                    LossKind::Mae => {
                        let mut acc = 0.0;
                        for r in &table.records {
                            acc += r.errors[h].abs();
                        }
                        acc / n as f64
                    }
                };
                let rel = (table.aggregate[h] - naive).abs() / naive.abs();
                assert!(rel < 1e-10, "loss {loss:?} horizon {h}: rel err {rel}");
            }
        }
    }

    #[test]
    fn evaluate_rejects_train_test_overlap() {
        let xs = vec![130.0; 12];
        let y = vec![130.0; 12];
        let dm = synth_matrix(vec![xs], vec![y], 2);
        let model = fit(&dm, &ModelFamily::Persistence, &FitOptions::seeded(0)).unwrap();
        // The model remembers its training episode ids, which are exactly
        // the ids in dm.
        let err = evaluate(&model, &dm, LossKind::Rmse);
        assert!(err.is_err());
        let msg = err.unwrap_err().to_string();
        assert!(msg.contains("overlap"), "{msg}");
    }

    #[test]
    fn delta_matches_anchor_values() {
        // MAE 52 vs 48.65.
        let uni = table_with_errors(vec![vec![52.0]; 40], LossKind::Mae, 4);
        let multi = table_with_errors(vec![vec![48.65]; 40], LossKind::Mae, 4);
        let rows =
            delta_drivers(&uni, &multi, 200, &mut global_stream(1, "delta-test")).unwrap();
        assert!((rows[0].delta - 3.35).abs() < 1e-9);
        assert!(rows[0].ci_low <= rows[0].delta && rows[0].delta <= rows[0].ci_high);

        // RMSE 20.0 vs 20.3: the multivariate model is worse.
        let uni = table_with_errors(vec![vec![20.0]; 40], LossKind::Rmse, 4);
        let multi = table_with_errors(vec![vec![20.3]; 40], LossKind::Rmse, 4);
        let rows =
            delta_drivers(&uni, &multi, 200, &mut global_stream(1, "delta-test")).unwrap();
        assert!((rows[0].delta - (-0.3)).abs() < 1e-9);
    }

    #[test]
    fn identical_tables_give_zero_delta_and_pct() {
        let t = table_with_errors(vec![vec![7.0]; 30], LossKind::Rmse, 3);
        let rows = delta_drivers(&t, &t, 100, &mut global_stream(2, "delta-test")).unwrap();
        assert_eq!(rows[0].delta, 0.0);
        assert_eq!(rows[0].pct, 0.0);
        assert_eq!(rows[0].ci_low, 0.0);
        assert_eq!(rows[0].ci_high, 0.0);
    }

    #[test]
    fn key_mismatch_lists_missing_keys() {
        let uni = table_with_errors(vec![vec![5.0]; 10], LossKind::Rmse, 2);
        let mut multi = uni.clone();
        multi.records.remove(7);
        let err = delta_drivers(&uni, &multi, 100, &mut global_stream(3, "delta-test"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("missing from the multivariate table"), "{err}");
        assert!(err.contains("p0_d01@35"), "{err}");
    }

    #[test]
    fn delta_antisymmetry_mirrors_interval() {
        let mut rng = global_stream(4, "delta-test");
        let mk = |rng: &mut ChaCha8Rng, base: f64| -> LossTable {
            let errs: Vec<Vec<f64>> =
                (0..60).map(|_| vec![base + rng.gen_range(-3.0..3.0)]).collect();
            table_with_errors(errs, LossKind::Rmse, 6)
        };
        let a = mk(&mut rng, 20.0);
        let b = mk(&mut rng, 18.0);
        let fwd = delta_drivers(&a, &b, 500, &mut global_stream(5, "delta-test")).unwrap();
        let rev = delta_drivers(&b, &a, 500, &mut global_stream(5, "delta-test")).unwrap();
        assert!((fwd[0].delta + rev[0].delta).abs() < 1e-12);
        assert!((fwd[0].ci_low + rev[0].ci_high).abs() < 1e-12);
        assert!((fwd[0].ci_high + rev[0].ci_low).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_degenerate_diffs_give_point_interval() {
        let diffs = vec![vec![1.5; 20]; 5];
        let (lo, hi) =
            bootstrap_mean_diff_ci(&diffs, 300, &mut global_stream(6, "delta-test")).unwrap();
        assert_eq!(lo, 1.5);
        assert_eq!(hi, 1.5);
    }

    #[test]
    fn bootstrap_single_episode_is_an_error() {
        let diffs = vec![vec![1.0, 2.0]];
        let err = bootstrap_mean_diff_ci(&diffs, 100, &mut global_stream(7, "delta-test"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("at least 2 episodes"), "{err}");
    }

    #[test]
    fn bootstrap_coverage_on_normal_differences() {
        // Differences i.i.d. Normal(2, 1), 50 episodes x 100 windows; the
        // 95% interval must cover the true mean in at least 90% of trials.
        let normal = Normal::new(2.0, 1.0).unwrap();
        let mut gen_rng = global_stream(8, "delta-coverage-gen");
        let mut covered = 0;
        let trials = 200;
        for t in 0..trials {
            let diffs: Vec<Vec<f64>> = (0..50)
                .map(|_| (0..100).map(|_| normal.sample(&mut gen_rng)).collect())
                .collect();
            let mut boot_rng = global_stream(t as u64, "delta-coverage-boot");
            let (lo, hi) = bootstrap_mean_diff_ci(&diffs, 1000, &mut boot_rng).unwrap();
            if lo <= 2.0 && 2.0 <= hi {
                covered += 1;
            }
        }
        assert!(covered >= 180, "covered {covered}/{trials}");
    }

    #[test]
    fn interval_width_shrinks_with_more_episodes() {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut rng = global_stream(9, "delta-width-gen");
        let mut widths = Vec::new();
        for n_ep in [10usize, 40] {
            let diffs: Vec<Vec<f64>> = (0..n_ep)
                .map(|_| (0..50).map(|_| normal.sample(&mut rng)).collect())
                .collect();
            let (lo, hi) =
                bootstrap_mean_diff_ci(&diffs, 1000, &mut global_stream(10, "delta-width"))
                    .unwrap();
            widths.push(hi - lo);
        }
        assert!(widths[1] < widths[0], "widths {widths:?}");
    }

    #[test]
    fn bootstrap_is_deterministic_given_seed() {
        let mut rng = global_stream(11, "delta-test");
        let diffs: Vec<Vec<f64>> =
            (0..8).map(|_| (0..30).map(|_| rng.gen_range(-2.0..4.0)).collect()).collect();
        let a = bootstrap_mean_diff_ci(&diffs, 500, &mut global_stream(12, "boot")).unwrap();
        let b = bootstrap_mean_diff_ci(&diffs, 500, &mut global_stream(12, "boot")).unwrap();
        assert_eq!(a, b);
    }

    fn hand_model(dm: &DesignMatrix, w: Vec<f64>) -> TrainedModel {
        TrainedModel {
            family: ModelFamily::RidgeAr { lambda: 0.0 },
            channels: dm.spec.channels.clone(),
            context_len: dm.spec.context_len,
            lag_stride: dm.spec.lag_stride,
            horizons: dm.horizons.clone(),
            n_cols: dm.n_cols,
            col_channels: dm.col_channels.clone(),
            col_mean: vec![0.0; dm.n_cols],
            col_sd: vec![1.0; dm.n_cols],
            mask: None,
            heads: vec![RidgeHead { intercept: 0.0, w }],
            patient_means: BTreeMap::new(),
            global_mean: 0.0,
            y_mean: vec![0.0],
            y_sd: vec![1.0],
            mlp: None,
            train_seed: 0,
            train_episodes: BTreeSet::new(),
            train_data_hash: String::new(),
        }
    }

    #[test]
    fn attribution_concentrates_on_the_only_used_channel() {
        let mut rng = global_stream(13, "delta-test");
        let n = 80;
        let cgm: Vec<f64> = (0..n).map(|_| rng.gen_range(80.0..200.0)).collect();
        let iob: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..6.0)).collect();
        let y: Vec<f64> = iob.iter().map(|v| 3.0 * v).collect();
        let mut dm = synth_matrix(vec![cgm, iob], vec![y], 4);
        dm.col_channels = vec![Channel::CgmLags, Channel::Iob];
        dm.spec =
            FeatureSpec::new(&[Channel::CgmLags, Channel::Iob], 2, 1).unwrap();
        // Weight only on the iob column; predictions reproduce y exactly.
        let model = hand_model(&dm, vec![0.0, 3.0]);
        let report = permutation_importance(
            &model,
            &dm,
            &default_groups(),
            LossKind::Rmse,
            5,
            &mut global_stream(14, "perm"),
        )
        .unwrap();
        assert_eq!(report.base_loss, 0.0);
        let by_name: BTreeMap<&str, &AttributionEntry> =
            report.entries.iter().map(|e| (e.group.as_str(), e)).collect();
        assert_eq!(by_name["drivers"].share, 1.0);
        assert_eq!(by_name["cgm_history"].share, 0.0);
        assert_eq!(by_name["time_of_day"].share, 0.0);
        assert!(report.residual_share.abs() < 1e-12);
    }

    #[test]
    fn attribution_gives_drivers_exactly_zero_for_univariate_model() {
        let mut rng = global_stream(15, "delta-test");
        let n = 60;
        let cgm: Vec<f64> = (0..n).map(|_| rng.gen_range(80.0..200.0)).collect();
        let y: Vec<f64> = cgm.iter().map(|v| v + 10.0).collect();
        let dm = synth_matrix(vec![cgm], vec![y], 3);
        let model = hand_model(&dm, vec![1.0]);
        let report = permutation_importance(
            &model,
            &dm,
            &default_groups(),
            LossKind::Rmse,
            5,
            &mut global_stream(16, "perm"),
        )
        .unwrap();
        let drivers = report.entries.iter().find(|e| e.group == "drivers").unwrap();
        assert_eq!(drivers.loss_increase, 0.0);
        assert_eq!(drivers.share, 0.0);
    }

    #[test]
    fn attribution_residual_is_one_when_nothing_matters() {
        let mut rng = global_stream(17, "delta-test");
        let n = 40;
        let cgm: Vec<f64> = (0..n).map(|_| rng.gen_range(80.0..200.0)).collect();
        let y = vec![100.0; n];
        let dm = synth_matrix(vec![cgm], vec![y], 2);
        let model = hand_model(&dm, vec![0.0]);
        let report = permutation_importance(
            &model,
            &dm,
            &default_groups(),
            LossKind::Rmse,
            5,
            &mut global_stream(18, "perm"),
        )
        .unwrap();
        assert!(report.entries.iter().all(|e| e.share == 0.0));
        assert_eq!(report.residual_share, 1.0);
    }

    #[test]
    fn attribution_rejects_bad_groupings() {
        let dm = synth_matrix(vec![vec![1.0, 2.0, 3.0]], vec![vec![1.0, 2.0, 3.0]], 2);
        let model = hand_model(&dm, vec![1.0]);
        let dup = vec![
            ("a".to_string(), vec![Channel::CgmLags]),
            ("b".to_string(), vec![Channel::CgmLags]),
        ];
        let err = permutation_importance(
            &model,
            &dm,
            &dup,
            LossKind::Rmse,
            2,
            &mut global_stream(19, "perm"),
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("more than one group"), "{err}");
        let uncovered = vec![("tod".to_string(), vec![Channel::TimeOfDay])];
        let err = permutation_importance(
            &model,
            &dm,
            &uncovered,
            LossKind::Rmse,
            2,
            &mut global_stream(20, "perm"),
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("not covered"), "{err}");
    }

    #[test]
    fn task_horizon_validation() {
        let t = ForecastTask::new(vec![30, 60], LossKind::Rmse);
        assert_eq!(t.horizon_steps(5).unwrap(), vec![6, 12]);
        assert!(ForecastTask::new(vec![30, 31], LossKind::Rmse).horizon_steps(5).is_err());
        assert!(ForecastTask::new(vec![60, 30], LossKind::Rmse).horizon_steps(5).is_err());
        assert!(ForecastTask::new(vec![], LossKind::Rmse).horizon_steps(5).is_err());
    }
}
