//! Constant-velocity Kalman baseline and subset error metrics.

use std::io::Write;

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Vector2, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Example, TrajectoryPoint};
use crate::error::{Error, Result};
use crate::mining::{subset_size, MinedSubsets, ScoreTable};
use crate::{FRAME_DT, FUTURE_FRAMES, HISTORY_FRAMES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KalmanConfig {
    pub process_noise_accel_std: f64,
    pub measurement_noise_std: f64,
    /// Frames used for the finite-difference initial velocity.
    pub initial_velocity_window: usize,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        KalmanConfig { process_noise_accel_std: 1.0, measurement_noise_std: 0.5, initial_velocity_window: 2 }
    }
}

impl KalmanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.process_noise_accel_std > 0.0 && self.measurement_noise_std > 0.0) {
            return Err(Error::Config("Kalman noise levels must be positive".into()));
        }
        if !(2..=HISTORY_FRAMES).contains(&self.initial_velocity_window) {
            return Err(Error::Config(format!(
                "initial_velocity_window must lie in 2..={HISTORY_FRAMES}, got {}",
                self.initial_velocity_window
            )));
        }
        Ok(())
    }
}

fn pos(p: &TrajectoryPoint) -> Vector2<f64> {
    Vector2::new(p.lateral, p.longitudinal)
}

/// Filters the history with a constant-velocity model, then rolls the state
/// forward `horizon` frames without measurements. Returns position means.
pub fn kalman_cv_predict(history: &[TrajectoryPoint], horizon: usize, cfg: &KalmanConfig) -> Result<Vec<[f64; 2]>> {
    cfg.validate()?;
    let w = cfg.initial_velocity_window;
    if history.len() < w {
        return Err(Error::Argument(format!("history has {} frames, need at least {w}", history.len())));
    }
    let dt = FRAME_DT;
    let f = Matrix4::new(1.0, 0.0, dt, 0.0, 0.0, 1.0, 0.0, dt, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let (g0, g1) = (0.5 * dt * dt, dt);
    let qa = cfg.process_noise_accel_std.powi(2);
    let q = Matrix4::new(
        g0 * g0, 0.0, g0 * g1, 0.0,
        0.0, g0 * g0, 0.0, g0 * g1,
        g0 * g1, 0.0, g1 * g1, 0.0,
        0.0, g0 * g1, 0.0, g1 * g1,
    ) * qa;
    let h = Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
    let rm = cfg.measurement_noise_std.powi(2);
    let r = Matrix2::identity() * rm;

    let p0 = pos(&history[0]);
    let p1 = pos(&history[w - 1]);
    let span = (w - 1) as f64 * dt;
    let v0 = (p1 - p0) / span;
    let mut x = Vector4::new(p1.x, p1.y, v0.x, v0.y);
    let vvar = 2.0 * rm / (span * span);
    let mut p = Matrix4::from_diagonal(&Vector4::new(rm, rm, vvar, vvar));

    for (k, m) in history.iter().enumerate().skip(w) {
        x = f * x;
        p = f * p * f.transpose() + q;
        let s = h * p * h.transpose() + r;
        let s_inv = s
            .try_inverse()
            .ok_or_else(|| Error::Numeric(format!("singular innovation covariance at history frame {k}")))?;
        let gain = p * h.transpose() * s_inv;
        x += gain * (pos(m) - h * x);
        let a = Matrix4::identity() - gain * h;
        p = a * p * a.transpose() + gain * r * gain.transpose();
        if p.cholesky().is_none() {
            return Err(Error::Numeric(format!("state covariance lost positive-definiteness at history frame {k}")));
        }
    }

    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        x = f * x;
        out.push([x[0], x[1]]);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMode {
    /// Displacement at the last horizon frame.
    #[default]
    Terminal,
    /// Root mean squared displacement over all horizon frames.
    HorizonAveraged,
}

/// Per-example error between predicted and true future positions.
pub fn example_error(predicted: &[[f64; 2]], truth: &[[f64; 2]], mode: ErrorMode) -> Result<f64> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(Error::Argument(format!(
            "prediction has {} frames, ground truth {}",
            predicted.len(),
            truth.len()
        )));
    }
    let d2 = |a: &[f64; 2], b: &[f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    Ok(match mode {
        ErrorMode::Terminal => d2(predicted.last().unwrap(), truth.last().unwrap()).sqrt(),
        ErrorMode::HorizonAveraged => {
            (predicted.iter().zip(truth).map(|(a, b)| d2(a, b)).sum::<f64>() / truth.len() as f64).sqrt()
        }
    })
}

/// RMSE over a subset of per-example errors.
pub fn rmse(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::UndefinedMetric("RMSE of an empty subset".into()));
    }
    Ok((errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt())
}

/// Terminal-error RMSE of paired 5 s predictions.
pub fn rmse5(predicted: &[Vec<[f64; 2]>], truth: &[Vec<[f64; 2]>]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Argument(format!("{} predictions vs {} ground truths", predicted.len(), truth.len())));
    }
    let errors = predicted
        .iter()
        .zip(truth)
        .map(|(p, t)| example_error(p, t, ErrorMode::Terminal))
        .collect::<Result<Vec<_>>>()?;
    rmse(&errors)
}

pub fn subset_rmse(errors: &[f64], subset: &[usize]) -> Result<f64> {
    let picked: Vec<f64> = subset.iter().map(|&i| errors[i]).collect();
    rmse(&picked)
}

/// Kalman errors for every example.
pub fn prediction_errors(examples: &[Example], cfg: &KalmanConfig, mode: ErrorMode) -> Result<Vec<f64>> {
    examples
        .iter()
        .map(|e| {
            let pred = kalman_cv_predict(&e.history, FUTURE_FRAMES, cfg)?;
            let truth: Vec<[f64; 2]> = e.future.iter().map(|p| [p.lateral, p.longitudinal]).collect();
            example_error(&pred, &truth, mode)
        })
        .collect()
}

/// The `floor(r N)` largest errors, ties by ascending index.
pub fn top_error_indices(errors: &[f64], r: f64) -> Result<Vec<usize>> {
    let k = subset_size(errors.len(), r)?;
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

pub fn reference_labels(examples: &[Example], r: f64, cfg: &KalmanConfig) -> Result<Vec<usize>> {
    top_error_indices(&prediction_errors(examples, cfg, ErrorMode::Terminal)?, r)
}

pub fn delta_err(err_subset: f64, err_full: f64) -> Result<f64> {
    if !(err_full > 0.0) {
        return Err(Error::UndefinedMetric(format!("relative error change needs a positive full-set error, got {err_full}")));
    }
    Ok((err_subset - err_full) / err_full)
}

/// Fraction of `target` that `mined` contains.
pub fn coverage(mined: &[usize], target: &[usize]) -> Result<f64> {
    if target.is_empty() {
        return Err(Error::UndefinedMetric("coverage of an empty target set".into()));
    }
    let mined: std::collections::BTreeSet<usize> = mined.iter().copied().collect();
    let hit = target.iter().filter(|i| mined.contains(i)).count();
    Ok(hit as f64 / target.len() as f64)
}

/// Uniform sample of `floor(r n)` indices without replacement.
pub fn random_baseline(n: usize, r: f64, seed: u64) -> Result<Vec<usize>> {
    let k = subset_size(n, r)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ix = rand::seq::index::sample(&mut rng, n, k).into_vec();
    ix.sort_unstable();
    Ok(ix)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub name: String,
    pub size: usize,
    pub err: f64,
    pub delta_err: f64,
    pub cov_ref: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cov_external: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r: f64,
    pub lambda: f64,
    pub n: usize,
    pub error_mode: ErrorMode,
    pub random_seed: u64,
    pub err_full: f64,
    pub subsets: Vec<SubsetReport>,
    pub config_hash: String,
}

impl EvalReport {
    pub fn subset(&self, name: &str) -> Option<&SubsetReport> {
        self.subsets.iter().find(|s| s.name == name)
    }
}

pub struct ReportInputs<'a> {
    pub subsets: &'a MinedSubsets,
    pub errors: &'a [f64],
    pub error_mode: ErrorMode,
    pub random_seed: u64,
    /// Per-example errors of some other predictor, for coverage against its
    /// own top-error examples.
    pub external_errors: Option<&'a [f64]>,
    pub config_hash: &'a str,
}

pub fn build_report(inputs: &ReportInputs<'_>) -> Result<EvalReport> {
    let s = inputs.subsets;
    let n = inputs.errors.len();
    let r = s.r;
    let err_full = rmse(inputs.errors)?;
    let reference = top_error_indices(inputs.errors, r)?;
    let external = match inputs.external_errors {
        Some(e) if e.len() != n => {
            return Err(Error::Data(format!("external error file has {} rows, expected {n}", e.len())));
        }
        Some(e) => Some(top_error_indices(e, r)?),
        None => None,
    };
    let random = random_baseline(n, r, inputs.random_seed)?;
    let named: [(&str, &[usize]); 5] =
        [("D_X", &s.d_x), ("D_Z", &s.d_z), ("D_YX", &s.d_yx), ("random", &random), ("reference", &reference)];
    let mut subsets = Vec::new();
    for (name, set) in named {
        if let Some(&bad) = set.iter().find(|&&i| i >= n) {
            return Err(Error::Data(format!("subset {name} holds index {bad} but only {n} errors")));
        }
        let err = subset_rmse(inputs.errors, set)?;
        subsets.push(SubsetReport {
            name: name.to_string(),
            size: set.len(),
            err,
            delta_err: delta_err(err, err_full)?,
            cov_ref: coverage(set, &reference)?,
            cov_external: external.as_ref().map(|t| coverage(set, t)).transpose()?,
        });
    }
    Ok(EvalReport {
        r,
        lambda: s.lambda,
        n,
        error_mode: inputs.error_mode,
        random_seed: inputs.random_seed,
        err_full,
        subsets,
        config_hash: inputs.config_hash.to_string(),
    })
}

/// Mean relative error change of `seeds` random subsets.
pub fn random_delta_err(errors: &[f64], r: f64, seeds: impl IntoIterator<Item = u64>) -> Result<f64> {
    let full = rmse(errors)?;
    let mut sum = 0.0;
    let mut count = 0;
    for seed in seeds {
        sum += delta_err(subset_rmse(errors, &random_baseline(errors.len(), r, seed)?)?, full)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Argument("no random seeds given".into()));
    }
    Ok(sum / count as f64)
}

/// Equal-width histogram per score column: `score,bin_lo,bin_hi,count`.
pub fn write_histogram_csv<W: Write>(out: W, table: &ScoreTable, bins: usize) -> Result<()> {
    if bins == 0 {
        return Err(Error::Argument("histogram needs at least one bin".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["score", "bin_lo", "bin_hi", "count"])?;
    for (name, col) in [("C_x", &table.c_x), ("C_z", &table.c_z), ("C_yx", &table.c_yx)] {
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let mut counts = vec![0usize; bins];
        for &v in col.iter() {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        for (b, c) in counts.iter().enumerate() {
            let a = lo + b as f64 * width;
            w.write_record(&[name.to_string(), a.to_string(), (a + width).to_string(), c.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io("<histogram>", e))?;
    Ok(())
}

/// Per-example errors as `example_index,error_m`.
pub fn write_errors_csv<W: Write>(out: W, errors: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["example_index", "error_m"])?;
    for (i, e) in errors.iter().enumerate() {
        w.write_record(&[i.to_string(), e.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<errors>", e))?;
    Ok(())
}

#[derive(Deserialize)]
struct ErrorRow {
    example_index: usize,
    error_m: f64,
}

pub fn read_errors_csv<R: std::io::Read>(input: R) -> Result<Vec<f64>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let mut rows: Vec<ErrorRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    rows.sort_by_key(|r| r.example_index);
    for (i, row) in rows.iter().enumerate() {
        if row.example_index != i {
            return Err(Error::Schema(format!("error file is missing example_index {i}")));
        }
        if !row.error_m.is_finite() || row.error_m < 0.0 {
            return Err(Error::Data(format!("example {i}: invalid error {}", row.error_m)));
        }
    }
    Ok(rows.into_iter().map(|r| r.error_m).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points(f: impl Fn(f64) -> (f64, f64), n: usize, offset: usize) -> Vec<TrajectoryPoint> {
        (0..n)
            .map(|k| {
                let t = (k + offset) as f64 * FRAME_DT;
                let (x, y) = f(t);
                TrajectoryPoint { frame: (k + offset) as i64, lateral: x, longitudinal: y, lane_id: 1 }
            })
            .collect()
    }

    fn truth(f: impl Fn(f64) -> (f64, f64)) -> Vec<[f64; 2]> {
        points(f, FUTURE_FRAMES, HISTORY_FRAMES).iter().map(|p| [p.lateral, p.longitudinal]).collect()
    }

    #[test]
    fn constant_velocity_is_exact() {
        let f = |t: f64| (1.0 + 0.3 * t, 5.0 + 22.0 * t);
        let hist = points(f, HISTORY_FRAMES, 0);
        let pred = kalman_cv_predict(&hist, FUTURE_FRAMES, &KalmanConfig::default()).unwrap();
        for (p, t) in pred.iter().zip(truth(f)) {
            assert!((p[0] - t[0]).abs() < 1e-6 && (p[1] - t[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn stationary_target_stays_put() {
        let hist = points(|_| (3.0, 40.0), HISTORY_FRAMES, 0);
        let pred = kalman_cv_predict(&hist, FUTURE_FRAMES, &KalmanConfig::default()).unwrap();
        for p in pred {
            assert!((p[0] - 3.0).abs() < 1e-3 && (p[1] - 40.0).abs() < 1e-3);
        }
    }

    #[test]
    fn constant_acceleration_leaves_large_terminal_error() {
        let f = |t: f64| (0.0, 15.0 * t + t * t);
        let hist = points(f, HISTORY_FRAMES, 0);
        let pred = kalman_cv_predict(&hist, FUTURE_FRAMES, &KalmanConfig::default()).unwrap();
        let e = example_error(&pred, &truth(f), ErrorMode::Terminal).unwrap();
        // perfect velocity at T would still miss by a/2 * 5^2 = 25 m
        assert!(e >= 15.0, "{e}");
    }

    #[test]
    fn rmse_examples() {
        let t = vec![[0.0, 0.0]; 50];
        let shifted: Vec<[f64; 2]> = t.iter().map(|p| [p[0] + 3.0, p[1] + 4.0]).collect();
        assert_eq!(rmse5(&[t.clone()], &[t.clone()]).unwrap(), 0.0);
        assert!((rmse5(&[shifted.clone()], &[t.clone()]).unwrap() - 5.0).abs() < 1e-12);
        assert!((example_error(&shifted, &t, ErrorMode::HorizonAveraged).unwrap() - 5.0).abs() < 1e-12);
        assert!((rmse(&[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        assert!((rmse(&[3.0, 4.0]).unwrap() - 3.5355).abs() < 1e-4);
        assert!(example_error(&shifted[..49], &t, ErrorMode::Terminal).is_err());
    }

    #[test]
    fn delta_err_and_coverage() {
        assert!((delta_err(9.356, 4.496).unwrap() - 1.081).abs() < 5e-4);
        assert!((delta_err(6.697, 4.496).unwrap() - 0.4895).abs() < 5e-4);
        assert_eq!(delta_err(4.496, 4.496).unwrap(), 0.0);
        assert!(matches!(delta_err(1.0, 0.0), Err(Error::UndefinedMetric(_))));

        let target: Vec<usize> = (0..100).collect();
        let mined: Vec<usize> = (71..171).collect();
        assert_eq!(coverage(&mined, &target).unwrap(), 0.29);
        assert_eq!(coverage(&target, &target).unwrap(), 1.0);
        assert_eq!(coverage(&[200, 201], &target).unwrap(), 0.0);
        assert!(matches!(coverage(&[1], &[]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn reference_ties_and_full_ratio() {
        let zeros = vec![0.0; 20];
        assert_eq!(top_error_indices(&zeros, 0.1).unwrap(), vec![0, 1]);
        assert_eq!(top_error_indices(&zeros, 1.0).unwrap(), (0..20).collect::<Vec<_>>());
        let e = [1.0, 9.0, 3.0, 9.0, 0.5];
        assert_eq!(top_error_indices(&e, 0.4).unwrap(), vec![1, 3]);
    }

    #[test]
    fn random_baseline_is_seeded() {
        let a = random_baseline(500, 0.1, 3).unwrap();
        assert_eq!(a, random_baseline(500, 0.1, 3).unwrap());
        assert_ne!(a, random_baseline(500, 0.1, 4).unwrap());
        assert_eq!(a.len(), 50);
        assert_eq!(random_baseline(7, 1.0, 0).unwrap(), (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn report_on_full_subsets() {
        let errors: Vec<f64> = (0..10).map(|i| i as f64 * 0.5 + 0.1).collect();
        let all: Vec<usize> = (0..10).collect();
        let s = MinedSubsets {
            r: 1.0,
            lambda: 0.5,
            delta_x: None,
            delta_z: None,
            delta_yx: None,
            d_x: all.clone(),
            d_z: all.clone(),
            d_yx: all,
        };
        let rep = build_report(&ReportInputs {
            subsets: &s,
            errors: &errors,
            error_mode: ErrorMode::Terminal,
            random_seed: 0,
            external_errors: Some(&errors),
            config_hash: "h",
        })
        .unwrap();
        for sub in &rep.subsets {
            assert_eq!(sub.delta_err, 0.0);
            assert_eq!(sub.cov_ref, 1.0);
            assert_eq!(sub.cov_external, Some(1.0));
        }
    }

    #[test]
    fn errors_csv_round_trip() {
        let e = vec![0.0, 1.5, 2.25];
        let mut buf = Vec::new();
        write_errors_csv(&mut buf, &e).unwrap();
        assert_eq!(read_errors_csv(buf.as_slice()).unwrap(), e);
    }
}
