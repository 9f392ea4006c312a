//! Model families and the shared training/prediction plumbing.
//!
//! The matched-pair contract lives here: a univariate and a multivariate
//! model are comparable only when family, hyperparameters, context, seed,
//! and training protocol are identical, with the input channels as the sole
//! difference. For ridge the univariate design matrix is a column
//! restriction of the multivariate one; for the mlp both variants share one
//! architecture and the univariate side zero-masks driver columns so
//! capacity is identical.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forecast::features::{Channel, DesignMatrix};
use crate::forecast::mlp::{MlpNet, ProbeBatch};
use crate::numeric::{mean, pairwise_sum, solve_spd};
use crate::rng::global_stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpHyper {
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lambda_causal: f64,
    /// Ranking margin in mg/dL; converted to standardized units at fit time.
    pub causal_margin: f64,
}

impl Default for MlpHyper {
    fn default() -> Self {
        MlpHyper { hidden: 32, lr: 0.01, epochs: 40, batch: 256, lambda_causal: 0.0, causal_margin: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelFamily {
    Persistence,
    PatientMean,
    RidgeAr { lambda: f64 },
    Mlp { hyper: MlpHyper },
}

impl ModelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            ModelFamily::Persistence => "persistence",
            ModelFamily::PatientMean => "patient_mean",
            ModelFamily::RidgeAr { .. } => "ridge_ar",
            ModelFamily::Mlp { .. } => "mlp",
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, ModelFamily::RidgeAr { .. } | ModelFamily::Mlp { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeHead {
    pub intercept: f64,
    pub w: Vec<f64>,
}

/// Ranking-constraint pairs in raw feature units, as produced by the probe
/// generator. Standardization and masking happen inside `fit` so the pairs
/// always see exactly what the model sees.
#[derive(Debug, Clone)]
pub struct TrainingProbes {
    pub n_cols: usize,
    pub rows_lo: Vec<f64>,
    pub rows_hi: Vec<f64>,
    /// +1 when the true outcome under `hi` exceeds the outcome under `lo`.
    pub signs: Vec<f64>,
    /// Horizon head each pair constrains.
    pub heads: Vec<usize>,
}

impl TrainingProbes {
    pub fn n_pairs(&self) -> usize {
        self.signs.len()
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions<'a> {
    pub seed: u64,
    /// Per-column 1/0 mask applied before standardization; the capacity-
    /// matched univariate mlp masks driver columns with it.
    pub mask: Option<Vec<f64>>,
    pub probes: Option<&'a TrainingProbes>,
}

impl<'a> FitOptions<'a> {
    pub fn seeded(seed: u64) -> Self {
        FitOptions { seed, mask: None, probes: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub family: ModelFamily,
    pub channels: Vec<Channel>,
    pub context_len: usize,
    pub lag_stride: usize,
    /// Horizon offsets in grid steps, ascending.
    pub horizons: Vec<usize>,
    pub n_cols: usize,
    pub col_channels: Vec<Channel>,
    pub col_mean: Vec<f64>,
    pub col_sd: Vec<f64>,
    pub mask: Option<Vec<f64>>,
    /// Ridge heads, one per horizon; empty for other families.
    pub heads: Vec<RidgeHead>,
    pub patient_means: BTreeMap<String, f64>,
    pub global_mean: f64,
    pub y_mean: Vec<f64>,
    pub y_sd: Vec<f64>,
    pub mlp: Option<MlpNet>,
    pub train_seed: u64,
    pub train_episodes: BTreeSet<String>,
    pub train_data_hash: String,
}

impl TrainedModel {
    fn n_lags(&self) -> usize {
        (self.context_len - 1) / self.lag_stride + 1
    }

    /// Ridge weight on the original (unstandardized) scale of one column.
    pub fn effective_weight(&self, horizon_index: usize, col: usize) -> f64 {
        self.heads[horizon_index].w[col] / self.col_sd[col]
    }

    fn standardize_row(&self, row: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for j in 0..self.n_cols {
            let masked = match &self.mask {
                Some(m) => row[j] * m[j],
                None => row[j],
            };
            out.push((masked - self.col_mean[j]) / self.col_sd[j]);
        }
    }
}

/// Hash of the training inputs, stored in the model artifact so a loaded
/// model can be traced back to the exact matrix it was fit on.
pub fn design_hash(dm: &DesignMatrix) -> String {
    let mut h = Sha256::new();
    for v in &dm.x {
        h.update(v.to_le_bytes());
    }
    for ys in &dm.y {
        for v in ys {
            h.update(v.to_le_bytes());
        }
    }
    for k in &dm.keys {
        h.update(k.patient.as_bytes());
        h.update([0]);
        h.update(k.episode.as_bytes());
        h.update([0]);
        h.update(k.anchor_t_min.to_le_bytes());
    }
    let digest = h.finalize();
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

struct Standardized {
    col_mean: Vec<f64>,
    col_sd: Vec<f64>,
    /// Row-major standardized features.
    xs: Vec<f64>,
}

fn standardize(dm: &DesignMatrix, mask: Option<&[f64]>) -> Standardized {
    let n = dm.n_rows();
    let p = dm.n_cols;
    let masked_at = |r: usize, j: usize| -> f64 {
        let v = dm.x[r * p + j];
        match mask {
            Some(m) => v * m[j],
            None => v,
        }
    };
    let mut col_mean = vec![0.0; p];
    let mut col_sd = vec![0.0; p];
    let mut col = vec![0.0; n];
    for j in 0..p {
        for r in 0..n {
            col[r] = masked_at(r, j);
        }
        let m = mean(&col);
        let sq: Vec<f64> = col.iter().map(|v| (v - m) * (v - m)).collect();
        let sd = (pairwise_sum(&sq) / n as f64).sqrt();
        col_mean[j] = m;
        col_sd[j] = if sd > 0.0 { sd } else { 1.0 };
    }
    let mut xs = vec![0.0; n * p];
    for r in 0..n {
        for j in 0..p {
            xs[r * p + j] = (masked_at(r, j) - col_mean[j]) / col_sd[j];
        }
    }
    Standardized { col_mean, col_sd, xs }
}

fn fit_ridge(
    xs: &[f64],
    dm: &DesignMatrix,
    lambda: f64,
) -> Result<Vec<RidgeHead>> {
    if lambda < 0.0 {
        return Err(Error::config("ridge lambda must be >= 0"));
    }
    let n = dm.n_rows();
    let p = dm.n_cols;
    // Gram matrix once; shared across horizons.
    let mut xtx = vec![0.0; p * p];
    for r in 0..n {
        let row = &xs[r * p..(r + 1) * p];
        for i in 0..p {
            let xi = row[i];
            if xi == 0.0 {
                continue;
            }
            for j in i..p {
                xtx[i * p + j] += xi * row[j];
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            xtx[i * p + j] = xtx[j * p + i];
        }
        xtx[i * p + i] += lambda;
    }
    let mut heads = Vec::with_capacity(dm.horizons.len());
    for ys in &dm.y {
        let intercept = mean(ys);
        let mut xty = vec![0.0; p];
        for r in 0..n {
            let yc = ys[r] - intercept;
            let row = &xs[r * p..(r + 1) * p];
            for j in 0..p {
                xty[j] += row[j] * yc;
            }
        }
        let w = solve_spd(&xtx, &xty, p).ok_or_else(|| {
            Error::validation(
                "ridge normal equations are singular; set lambda > 0 to regularize",
            )
        })?;
        heads.push(RidgeHead { intercept, w });
    }
    Ok(heads)
}

fn fit_mlp(
    xs: &[f64],
    dm: &DesignMatrix,
    hyper: &MlpHyper,
    seed: u64,
    y_mean: &[f64],
    y_sd: &[f64],
    col_mean: &[f64],
    col_sd: &[f64],
    mask: Option<&[f64]>,
    probes: Option<&TrainingProbes>,
) -> Result<MlpNet> {
    if hyper.hidden == 0 || hyper.batch == 0 || hyper.epochs == 0 {
        return Err(Error::config("mlp hidden, batch, and epochs must be >= 1"));
    }
    if !(hyper.lr > 0.0) || hyper.lambda_causal < 0.0 || hyper.causal_margin < 0.0 {
        return Err(Error::config("mlp lr must be > 0; lambda_causal and margin >= 0"));
    }
    let n = dm.n_rows();
    let p = dm.n_cols;
    let n_h = dm.horizons.len();

    let mut ys = vec![0.0; n * n_h];
    for (hi, col) in dm.y.iter().enumerate() {
        for r in 0..n {
            ys[r * n_h + hi] = (col[r] - y_mean[hi]) / y_sd[hi];
        }
    }

    let probe_batch = match probes {
        Some(tp) if hyper.lambda_causal > 0.0 => {
            if tp.n_cols != p {
                return Err(Error::validation(format!(
                    "probe rows have {} columns, design matrix has {}",
                    tp.n_cols, p
                )));
            }
            if tp.heads.iter().any(|h| *h >= n_h) {
                return Err(Error::validation("probe horizon index out of range"));
            }
            let std_rows = |raw: &[f64]| -> Vec<f64> {
                let mut out = vec![0.0; raw.len()];
                for r in 0..tp.n_pairs() {
                    for j in 0..p {
                        let v = match mask {
                            Some(m) => raw[r * p + j] * m[j],
                            None => raw[r * p + j],
                        };
                        out[r * p + j] = (v - col_mean[j]) / col_sd[j];
                    }
                }
                out
            };
            Some(ProbeBatch {
                x_lo: std_rows(&tp.rows_lo),
                x_hi: std_rows(&tp.rows_hi),
                signs: tp.signs.clone(),
                heads: tp.heads.clone(),
                margins: tp.heads.iter().map(|h| hyper.causal_margin / y_sd[*h]).collect(),
                lambda: hyper.lambda_causal,
            })
        }
        _ => None,
    };

    let mut net = MlpNet::init(p, hyper.hidden, n_h, &mut global_stream(seed, "mlp-init"));
    let mut shuffle_rng = global_stream(seed, "mlp-shuffle");
    let mut indices: Vec<usize> = (0..n).collect();
    let mut bx = Vec::with_capacity(hyper.batch * p);
    let mut by = Vec::with_capacity(hyper.batch * n_h);
    for _ in 0..hyper.epochs {
        indices.shuffle(&mut shuffle_rng);
        for chunk in indices.chunks(hyper.batch) {
            bx.clear();
            by.clear();
            for &r in chunk {
                bx.extend_from_slice(&xs[r * p..(r + 1) * p]);
                by.extend_from_slice(&ys[r * n_h..(r + 1) * n_h]);
            }
            let (_, g) = net.loss_and_grad(&bx, &by, probe_batch.as_ref());
            net.apply_step(&g, hyper.lr);
        }
    }
    if !net.params_flat().iter().all(|v| v.is_finite()) {
        return Err(Error::validation("mlp training diverged; lower the learning rate"));
    }
    Ok(net)
}

pub fn fit(dm: &DesignMatrix, family: &ModelFamily, opts: &FitOptions) -> Result<TrainedModel> {
    if dm.n_rows() == 0 {
        return Err(Error::validation("cannot fit a model on an empty design matrix"));
    }
    if let Some(m) = &opts.mask {
        if m.len() != dm.n_cols {
            return Err(Error::validation(format!(
                "mask has {} entries, design matrix has {} columns",
                m.len(),
                dm.n_cols
            )));
        }
    }
    let std = standardize(dm, opts.mask.as_deref());
    let n_h = dm.horizons.len();
    let mut y_mean = vec![0.0; n_h];
    let mut y_sd = vec![1.0; n_h];
    for (hi, ys) in dm.y.iter().enumerate() {
        y_mean[hi] = mean(ys);
        let sq: Vec<f64> = ys.iter().map(|v| (v - y_mean[hi]) * (v - y_mean[hi])).collect();
        let sd = (pairwise_sum(&sq) / ys.len() as f64).sqrt();
        y_sd[hi] = if sd > 0.0 { sd } else { 1.0 };
    }

    let mut heads = Vec::new();
    let mut patient_means = BTreeMap::new();
    let mut global_mean = 0.0;
    let mut mlp = None;

    match family {
        ModelFamily::Persistence => {}
        ModelFamily::PatientMean => {
            let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
            let mut total = 0.0;
            let mut count = 0usize;
            for (r, key) in dm.keys.iter().enumerate() {
                for ys in &dm.y {
                    let e = sums.entry(key.patient.clone()).or_insert((0.0, 0));
                    e.0 += ys[r];
                    e.1 += 1;
                    total += ys[r];
                    count += 1;
                }
            }
            patient_means =
                sums.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect();
            global_mean = total / count as f64;
        }
        ModelFamily::RidgeAr { lambda } => {
            heads = fit_ridge(&std.xs, dm, *lambda)?;
        }
        ModelFamily::Mlp { hyper } => {
            mlp = Some(fit_mlp(
                &std.xs,
                dm,
                hyper,
                opts.seed,
                &y_mean,
                &y_sd,
                &std.col_mean,
                &std.col_sd,
                opts.mask.as_deref(),
                opts.probes,
            )?);
        }
    }

    Ok(TrainedModel {
        family: family.clone(),
        channels: dm.spec.channels.clone(),
        context_len: dm.spec.context_len,
        lag_stride: dm.spec.lag_stride,
        horizons: dm.horizons.clone(),
        n_cols: dm.n_cols,
        col_channels: dm.col_channels.clone(),
        col_mean: std.col_mean,
        col_sd: std.col_sd,
        mask: opts.mask.clone(),
        heads,
        patient_means,
        global_mean,
        y_mean,
        y_sd,
        mlp,
        train_seed: opts.seed,
        train_episodes: dm.episode_ids.clone(),
        train_data_hash: design_hash(dm),
    })
}

/// Per-horizon predictions in mg/dL for one raw feature row. `patient` is
/// consulted only by the patient_mean family; unknown or absent patients
/// fall back to the training-set global mean.
pub fn forecast(model: &TrainedModel, row: &[f64], patient: Option<&str>) -> Result<Vec<f64>> {
    if row.len() != model.n_cols {
        return Err(Error::validation(format!(
            "feature row has {} values, model expects {}",
            row.len(),
            model.n_cols
        )));
    }
    let n_h = model.horizons.len();
    match &model.family {
        ModelFamily::Persistence => {
            let last = row[model.n_lags() - 1];
            Ok(vec![last; n_h])
        }
        ModelFamily::PatientMean => {
            let m = patient
                .and_then(|p| model.patient_means.get(p).copied())
                .unwrap_or(model.global_mean);
            Ok(vec![m; n_h])
        }
        ModelFamily::RidgeAr { .. } => {
            let mut xs = Vec::with_capacity(model.n_cols);
            model.standardize_row(row, &mut xs);
            let mut out = Vec::with_capacity(n_h);
            for head in &model.heads {
                let mut v = head.intercept;
                for (w, x) in head.w.iter().zip(&xs) {
                    v += w * x;
                }
                out.push(v);
            }
            Ok(out)
        }
        ModelFamily::Mlp { .. } => {
            let net = model.mlp.as_ref().ok_or_else(|| {
                Error::validation("mlp model artifact is missing network parameters")
            })?;
            let mut xs = Vec::with_capacity(model.n_cols);
            model.standardize_row(row, &mut xs);
            let raw = net.predict(&xs);
            Ok(raw
                .iter()
                .enumerate()
                .map(|(hi, v)| model.y_mean[hi] + model.y_sd[hi] * v)
                .collect())
        }
    }
}

/// The matched pair: identical family, hyperparameters, seed, and training
/// protocol; the univariate side differs only in which channels it can see.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub uni: TrainedModel,
    pub multi: TrainedModel,
}

/// Trains both sides of the pair on one multivariate design matrix. Linear
/// and baseline families train the univariate side on the column-restricted
/// matrix; the mlp keeps the full architecture and zero-masks driver columns
/// instead, so capacity and optimization dynamics match exactly.
pub fn fit_matched_pair(
    dm: &DesignMatrix,
    family: &ModelFamily,
    uni_channels: &[Channel],
    opts: &FitOptions,
) -> Result<MatchedPair> {
    if opts.mask.is_some() {
        return Err(Error::validation(
            "fit_matched_pair derives its own mask; pass FitOptions without one",
        ));
    }
    for ch in uni_channels {
        if ch.is_driver() {
            return Err(Error::validation(format!(
                "univariate side cannot include driver channel {}",
                ch.as_str()
            )));
        }
    }
    let multi = fit(dm, family, opts)?;
    let uni = match family {
        ModelFamily::Mlp { .. } => {
            let mut uni_opts = opts.clone();
            uni_opts.mask = Some(dm.mask_for(uni_channels));
            fit(dm, family, &uni_opts)?
        }
        _ => {
            let restricted = dm.restrict(uni_channels)?;
            fit(&restricted, family, opts)?
        }
    };
    Ok(MatchedPair { uni, multi })
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(model)
        .map_err(|e| Error::validation(format!("model serialization failed: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::validation(format!("model artifact {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecast::features::{FeatureSpec, WindowKey};
    use rand::Rng;

    fn synth_matrix(x_cols: Vec<Vec<f64>>, y: Vec<Vec<f64>>, patients: Vec<&str>) -> DesignMatrix {
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
                patient: patients[i % patients.len()].to_string(),
                episode: format!("{}_d00", patients[i % patients.len()]),
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

    #[test]
    fn ridge_lambda_zero_recovers_exact_linear_map() {
        let xs: Vec<f64> = (0..40).map(|i| 80.0 + i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
        let dm = synth_matrix(vec![xs], vec![ys], vec!["p0"]);
        let model =
            fit(&dm, &ModelFamily::RidgeAr { lambda: 0.0 }, &FitOptions::seeded(1)).unwrap();
        assert!((model.effective_weight(0, 0) - 2.0).abs() < 1e-9);
        let pred = forecast(&model, &[100.0], None).unwrap();
        assert!((pred[0] - 200.0).abs() < 1e-9);
    }

    #[test]
    fn ridge_residuals_orthogonal_to_features() {
        let mut rng = global_stream(5, "models-test");
        let n = 60;
        let cols: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..n).map(|_| rng.gen_range(60.0..250.0)).collect())
            .collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(60.0..250.0)).collect();
        let dm = synth_matrix(cols, vec![y.clone()], vec!["p0"]);
        let model =
            fit(&dm, &ModelFamily::RidgeAr { lambda: 0.0 }, &FitOptions::seeded(1)).unwrap();
        let mut dots = vec![0.0; dm.n_cols];
        for r in 0..n {
            let pred = forecast(&model, dm.row(r), None).unwrap()[0];
            let resid = y[r] - pred;
            for j in 0..dm.n_cols {
                let xs = (dm.row(r)[j] - model.col_mean[j]) / model.col_sd[j];
                dots[j] += xs * resid;
            }
        }
        for d in dots {
            assert!(d.abs() < 1e-8, "residual dot {d}");
        }
    }

    #[test]
    fn ridge_satisfies_normal_equations_with_lambda() {
        let mut rng = global_stream(6, "models-test");
        let n = 80;
        let cols: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let dm = synth_matrix(cols, vec![y.clone()], vec!["p0"]);
        let lambda = 3.7;
        let model = fit(&dm, &ModelFamily::RidgeAr { lambda }, &FitOptions::seeded(1)).unwrap();
        let p = dm.n_cols;
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|r| {
                (0..p)
                    .map(|j| (dm.row(r)[j] - model.col_mean[j]) / model.col_sd[j])
                    .collect()
            })
            .collect();
        let head = &model.heads[0];
        let mut lhs = vec![0.0; p];
        let mut rhs = vec![0.0; p];
        for j in 0..p {
            for r in 0..n {
                let mut xw = 0.0;
                for k in 0..p {
                    xw += xs[r][k] * head.w[k];
                }
                lhs[j] += xs[r][j] * xw;
                rhs[j] += xs[r][j] * (y[r] - head.intercept);
            }
            lhs[j] += lambda * head.w[j];
        }
        let res_norm: f64 =
            lhs.iter().zip(&rhs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let rhs_norm: f64 = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(res_norm < 1e-8 * rhs_norm, "residual {res_norm} vs rhs {rhs_norm}");
    }

    #[test]
    fn singular_system_with_lambda_zero_advises_regularization() {
        let xs: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let dup = xs.clone();
        let y: Vec<f64> = xs.iter().map(|x| 3.0 * x + 1.0).collect();
        let dm = synth_matrix(vec![xs, dup], vec![y], vec!["p0"]);
        let err = fit(&dm, &ModelFamily::RidgeAr { lambda: 0.0 }, &FitOptions::seeded(1))
            .unwrap_err();
        assert!(err.to_string().contains("lambda > 0"), "{err}");
    }

    #[test]
    fn persistence_returns_last_context_value_and_shifts_with_offset() {
        let xs: Vec<f64> = (0..20).map(|i| 100.0 + i as f64).collect();
        let last: Vec<f64> = xs.iter().map(|x| x + 1.0).collect();
        let y: Vec<f64> = xs.iter().map(|x| x + 2.0).collect();
        let dm = synth_matrix(vec![xs, last], vec![y], vec!["p0"]);
        let model = fit(&dm, &ModelFamily::Persistence, &FitOptions::seeded(0)).unwrap();
        let pred = forecast(&model, &[139.0, 140.0], None).unwrap();
        assert_eq!(pred, vec![140.0]);
        let shifted = forecast(&model, &[139.0 + 25.0, 140.0 + 25.0], None).unwrap();
        assert_eq!(shifted[0], 140.0 + 25.0);
    }

    #[test]
    fn patient_mean_matches_hand_computation() {
        let xs = vec![1.0, 2.0, 3.0, 4.0];
        let y = vec![100.0, 110.0, 200.0, 210.0];
        let dm = synth_matrix(vec![xs], vec![y], vec!["pa", "pb"]);
        // Rows alternate pa, pb, pa, pb.
        let model = fit(&dm, &ModelFamily::PatientMean, &FitOptions::seeded(0)).unwrap();
        let pa = forecast(&model, &[0.0], Some("pa")).unwrap()[0];
        let pb = forecast(&model, &[0.0], Some("pb")).unwrap()[0];
        assert_eq!(pa, 150.0);
        assert_eq!(pb, 160.0);
        let unknown = forecast(&model, &[0.0], Some("zz")).unwrap()[0];
        assert_eq!(unknown, 155.0);
    }

    #[test]
    fn ridge_prediction_matches_naive_dot_product() {
        let mut rng = global_stream(9, "models-test");
        let n = 50;
        let cols: Vec<Vec<f64>> =
            (0..5).map(|_| (0..n).map(|_| rng.gen_range(0.0..10.0)).collect()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(50.0..300.0)).collect();
        let dm = synth_matrix(cols, vec![y], vec!["p0"]);
        let model =
            fit(&dm, &ModelFamily::RidgeAr { lambda: 2.0 }, &FitOptions::seeded(1)).unwrap();
        let row = dm.row(17);
        let fast = forecast(&model, row, None).unwrap()[0];
        let mut naive = model.heads[0].intercept;
        for j in 0..dm.n_cols {
            naive += model.heads[0].w[j] * (row[j] - model.col_mean[j]) / model.col_sd[j];
        }
        assert!((fast - naive).abs() < 1e-12);
    }

    #[test]
    fn forecast_rejects_wrong_dimensionality() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y = xs.clone();
        let dm = synth_matrix(vec![xs], vec![y], vec!["p0"]);
        let model = fit(&dm, &ModelFamily::Persistence, &FitOptions::seeded(0)).unwrap();
        assert!(forecast(&model, &[1.0, 2.0], None).is_err());
    }

    fn sim_matrix() -> DesignMatrix {
        let params = crate::physio::PatientParams::reference();
        let mut cfg = crate::physio::SimConfig::new(1440, 33, 0);
        cfg.cgm_noise = false;
        let events = vec![
            crate::timeline::DriverEvent::meal(8 * 60, 50.0).unwrap(),
            crate::timeline::DriverEvent::bolus(8 * 60, 4.0).unwrap(),
            crate::timeline::DriverEvent::meal(13 * 60, 70.0).unwrap(),
        ];
        let ep = crate::physio::simulate(&params, &events, &cfg).unwrap();
        let windows = crate::timeline::extract_windows(&ep, 12, &[6, 12], 4).unwrap();
        let spec = FeatureSpec::new(
            &[
                Channel::CgmLags,
                Channel::TimeOfDay,
                Channel::Iob,
                Channel::Cob,
                Channel::Rag,
            ],
            12,
            1,
        )
        .unwrap();
        let enc = crate::encoders::EncoderConfig::default();
        let opts = crate::forecast::features::DesignOptions {
            encoder: &enc,
            horizons: &[6, 12],
            patient_taus: None,
        };
        crate::forecast::features::build_design_matrix(&[ep], &windows, &spec, &opts).unwrap()
    }

    #[test]
    fn matched_pair_ridge_equals_direct_restricted_fit() {
        let dm = sim_matrix();
        let family = ModelFamily::RidgeAr { lambda: 2.0 };
        let uni_channels = [Channel::CgmLags, Channel::TimeOfDay];
        let pair =
            fit_matched_pair(&dm, &family, &uni_channels, &FitOptions::seeded(3)).unwrap();
        let direct = fit(
            &dm.restrict(&uni_channels).unwrap(),
            &family,
            &FitOptions::seeded(3),
        )
        .unwrap();
        assert_eq!(pair.uni, direct);
        assert!(pair.multi.n_cols > pair.uni.n_cols);
        assert_eq!(pair.multi.family, pair.uni.family);
    }

    #[test]
    fn matched_pair_mlp_masks_instead_of_restricting() {
        let dm = sim_matrix();
        let hyper = MlpHyper { hidden: 6, epochs: 2, ..MlpHyper::default() };
        let family = ModelFamily::Mlp { hyper };
        let pair = fit_matched_pair(
            &dm,
            &family,
            &[Channel::CgmLags, Channel::TimeOfDay],
            &FitOptions::seeded(9),
        )
        .unwrap();
        assert!(pair.uni.mask.is_some());
        assert!(pair.multi.mask.is_none());
        assert_eq!(pair.uni.n_cols, pair.multi.n_cols);
        let (u, m) = (pair.uni.mlp.as_ref().unwrap(), pair.multi.mlp.as_ref().unwrap());
        assert_eq!((u.d_in, u.hidden, u.d_out), (m.d_in, m.hidden, m.d_out));
        // Driver columns are invisible to the masked side.
        let row = dm.row(5).to_vec();
        let mut perturbed = row.clone();
        for (j, ch) in dm.col_channels.iter().enumerate() {
            if ch.is_driver() {
                perturbed[j] += 100.0;
            }
        }
        assert_eq!(
            forecast(&pair.uni, &row, None).unwrap(),
            forecast(&pair.uni, &perturbed, None).unwrap()
        );
        assert_ne!(
            forecast(&pair.multi, &row, None).unwrap(),
            forecast(&pair.multi, &perturbed, None).unwrap()
        );
    }

    #[test]
    fn matched_pair_rejects_driver_channels_on_uni_side() {
        let dm = sim_matrix();
        let err = fit_matched_pair(
            &dm,
            &ModelFamily::RidgeAr { lambda: 1.0 },
            &[Channel::CgmLags, Channel::Iob],
            &FitOptions::seeded(1),
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("driver channel iob"), "{err}");
    }

    #[test]
    fn model_roundtrips_through_json() {
        let mut rng = global_stream(13, "models-test");
        let n = 40;
        let cols: Vec<Vec<f64>> =
            (0..3).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(80.0..200.0)).collect();
        let dm = synth_matrix(cols, vec![y], vec!["p0"]);
        for family in [
            ModelFamily::RidgeAr { lambda: 1.0 },
            ModelFamily::Mlp { hyper: MlpHyper { epochs: 3, ..MlpHyper::default() } },
        ] {
            let model = fit(&dm, &family, &FitOptions::seeded(4)).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("model.json");
            save_model(&model, &path).unwrap();
            let loaded = load_model(&path).unwrap();
            assert_eq!(model, loaded);
            let row = dm.row(7);
            assert_eq!(
                forecast(&model, row, None).unwrap(),
                forecast(&loaded, row, None).unwrap()
            );
        }
    }

    #[test]
    fn mlp_fit_is_seed_deterministic() {
        let mut rng = global_stream(14, "models-test");
        let n = 64;
        let cols: Vec<Vec<f64>> =
            (0..4).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(80.0..200.0)).collect();
        let dm = synth_matrix(cols, vec![y], vec!["p0"]);
        let hyper = MlpHyper { epochs: 5, ..MlpHyper::default() };
        let family = ModelFamily::Mlp { hyper };
        let a = fit(&dm, &family, &FitOptions::seeded(8)).unwrap();
        let b = fit(&dm, &family, &FitOptions::seeded(8)).unwrap();
        assert_eq!(a, b);
        let c = fit(&dm, &family, &FitOptions::seeded(9)).unwrap();
        assert_ne!(a.mlp, c.mlp);
    }

    #[test]
    fn masked_mlp_ignores_masked_columns() {
        let mut rng = global_stream(15, "models-test");
        let n = 64;
        let cols: Vec<Vec<f64>> =
            (0..3).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(80.0..200.0)).collect();
        let dm = synth_matrix(cols, vec![y], vec!["p0"]);
        let opts = FitOptions {
            seed: 2,
            mask: Some(vec![1.0, 1.0, 0.0]),
            probes: None,
        };
        let hyper = MlpHyper { epochs: 5, ..MlpHyper::default() };
        let model = fit(&dm, &ModelFamily::Mlp { hyper }, &opts).unwrap();
        let base = forecast(&model, &[0.3, -0.2, 0.9], None).unwrap();
        let varied = forecast(&model, &[0.3, -0.2, -5.0], None).unwrap();
        assert_eq!(base, varied);
    }

    #[test]
    fn causal_penalty_orders_probe_pairs_without_wrecking_mse() {
        // Target does not depend on the feature at all, so the MSE term has
        // no opinion about the probe ordering; the hinge term must fix it.
        let mut rng = global_stream(16, "models-test");
        let n = 128;
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| 150.0 + rng.gen_range(-10.0..10.0)).collect();
        let dm = synth_matrix(vec![xs], vec![y], vec!["p0"]);
        let n_pairs = 16;
        let probes = TrainingProbes {
            n_cols: 1,
            rows_lo: (0..n_pairs).map(|i| -0.8 + 0.01 * i as f64).collect(),
            rows_hi: (0..n_pairs).map(|i| 0.8 - 0.01 * i as f64).collect(),
            signs: vec![1.0; n_pairs],
            heads: vec![0; n_pairs],
        };
        let base_hyper = MlpHyper { epochs: 50, lr: 0.05, ..MlpHyper::default() };
        let plain = fit(
            &dm,
            &ModelFamily::Mlp { hyper: base_hyper.clone() },
            &FitOptions::seeded(3),
        )
        .unwrap();
        let causal_hyper = MlpHyper { lambda_causal: 5.0, causal_margin: 0.5, ..base_hyper };
        let opts = FitOptions { seed: 3, mask: None, probes: Some(&probes) };
        let causal = fit(&dm, &ModelFamily::Mlp { hyper: causal_hyper }, &opts).unwrap();
        let mut ordered = 0;
        for i in 0..n_pairs {
            let lo = forecast(&causal, &probes.rows_lo[i..=i], None).unwrap()[0];
            let hi = forecast(&causal, &probes.rows_hi[i..=i], None).unwrap()[0];
            if hi > lo {
                ordered += 1;
            }
        }
        assert_eq!(ordered, n_pairs);
        let rmse = |m: &TrainedModel| -> f64 {
            let mut acc = 0.0;
            for r in 0..n {
                let p = forecast(m, dm.row(r), None).unwrap()[0];
                acc += (p - dm.y[0][r]) * (p - dm.y[0][r]);
            }
            (acc / n as f64).sqrt()
        };
        let r_plain = rmse(&plain);
        let r_causal = rmse(&causal);
        assert!(
            r_causal < r_plain * 1.10,
            "causal rmse {r_causal} vs plain {r_plain}"
        );
    }
}
