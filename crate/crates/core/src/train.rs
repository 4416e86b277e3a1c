//! Maximum-likelihood fitting of [`FlowModel`] parameters.
//!
//! The objective is the mean negative log-likelihood over a batch. Its
//! gradient comes from the reverse pass in [`crate::flow`]; central finite
//! differences are only used to verify it.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::split_dataset;
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 128,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-5,
            seed: 0,
            patience: 20,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub epsilon: f64,
}

/// Per-epoch losses. Entry 0 is the initialization, before any update.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub gradient_check: Option<GradCheckReport>,
}

impl TrainLog {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_nll", "val_nll"])?;
        for e in &self.epochs {
            w.write_record(&[e.epoch.to_string(), e.train_nll.to_string(), e.val_nll.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<trainlog>", e))?;
        Ok(())
    }
}

/// Mean of `-log p(v)` over the batch.
pub fn nll<R: AsRef<[f64]>>(model: &FlowModel, batch: &[R]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let mut ws = model.workspace();
    let mut sum = 0.0;
    for (i, v) in batch.iter().enumerate() {
        let lp = model.trace_into(v.as_ref(), &mut ws).map_err(|e| at_row(e, i))?;
        sum += -lp;
    }
    Ok(sum / batch.len() as f64)
}

fn at_row(e: Error, row: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("batch row {row}: {msg}")),
        other => other,
    }
}

/// Batch NLL and its exact gradient, as a model-shaped container.
pub fn grad_nll<R: AsRef<[f64]>>(model: &FlowModel, batch: &[R]) -> Result<(f64, FlowModel)> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let mut grad = model.zeros_like();
    let mut ws = model.workspace();
    let weight = 1.0 / batch.len() as f64;
    let mut sum = 0.0;
    for (i, v) in batch.iter().enumerate() {
        let lp = model.trace_into(v.as_ref(), &mut ws).map_err(|e| at_row(e, i))?;
        sum += -lp;
        model.backprop_into(weight, &mut ws, &mut grad);
    }
    Ok((sum / batch.len() as f64, grad))
}

/// Above this many parameters the check runs on a random subsample.
pub const FULL_CHECK_LIMIT: usize = 10_000;
pub const CHECK_SUBSAMPLE: usize = 256;
/// Denominator floor of the relative error, so parameters with near-zero
/// gradients are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// Parameter positions a gradient check visits for a model of `n` parameters.
pub fn check_indices(n: usize) -> Vec<usize> {
    if n > FULL_CHECK_LIMIT {
        let mut ix = rand::seq::index::sample(&mut ChaCha8Rng::seed_from_u64(n as u64), n, CHECK_SUBSAMPLE).into_vec();
        ix.sort_unstable();
        ix
    } else {
        (0..n).collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the analytic gradient with central differences.
pub fn finite_diff_check<R: AsRef<[f64]>>(model: &FlowModel, batch: &[R], epsilon: f64) -> Result<GradCheckReport> {
    let (_, grad) = grad_nll(model, batch)?;
    finite_diff_check_against(model, batch, epsilon, &grad.flat_params())
}

/// Checks a supplied flat gradient against central differences of [`nll`].
pub fn finite_diff_check_against<R: AsRef<[f64]>>(
    model: &FlowModel,
    batch: &[R],
    epsilon: f64,
    analytic: &[f64],
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) {
        return Err(Error::Argument(format!("epsilon must be positive, got {epsilon}")));
    }
    let n = model.param_count();
    if analytic.len() != n {
        return Err(Error::Argument(format!("gradient has {} entries, model has {n}", analytic.len())));
    }
    let indices = check_indices(n);

    let base = model.flat_params();
    let mut probe = model.clone();
    let mut params = base.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        checked: indices.len(),
        epsilon,
    };
    for &i in &indices {
        params[i] = base[i] + epsilon;
        probe.set_flat_params(&params)?;
        let up = nll(&probe, batch)?;
        params[i] = base[i] - epsilon;
        probe.set_flat_params(&params)?;
        let down = nll(&probe, batch)?;
        params[i] = base[i];
        let numeric = (up - down) / (2.0 * epsilon);
        let err = relative_error(analytic[i], numeric);
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst_param = model.param_path(i);
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    Ok(report)
}

/// Adam with decoupled weight decay on coupling weight matrices.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    decay_mask: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(model: &FlowModel) -> Self {
        let mut mask = model.zeros_like();
        for l in &mut mask.layers {
            l.net.w1.fill(1.0);
            l.net.w2.fill(1.0);
            l.net.w3.fill(1.0);
        }
        let n = model.param_count();
        Adam { m: vec![0.0; n], v: vec![0.0; n], decay_mask: mask.flat_params(), step: 0 }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= cfg.learning_rate
                * (m_hat / (v_hat.sqrt() + cfg.epsilon) + cfg.weight_decay * self.decay_mask[i] * params[i]);
        }
    }
}

fn validate(rows: &[Vec<f64>], cfg: &TrainConfig) -> Result<usize> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::Config(format!("learning_rate must be positive, got {}", cfg.learning_rate)));
    }
    if rows.len() < 2 * cfg.batch_size {
        return Err(Error::Config(format!(
            "{} training rows is fewer than twice the batch size {}",
            rows.len(),
            cfg.batch_size
        )));
    }
    let dim = rows[0].len();
    if let Some(i) = rows.iter().position(|r| r.len() != dim) {
        return Err(Error::Data(format!("training row {i} has length {}, expected {dim}", rows[i].len())));
    }
    Ok(dim)
}

/// Fits a fresh flow to `rows` (already standardized).
///
/// A seeded split holds out `validation_fraction` of the rows; the returned
/// parameters are those of the epoch with the lowest validation NLL,
/// counting the initialization as epoch 0.
pub fn train(rows: &[Vec<f64>], flow_cfg: &FlowConfig, cfg: &TrainConfig) -> Result<(FlowModel, TrainLog)> {
    let dim = validate(rows, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init_seed = rng.next_u64();
    let split_seed = rng.next_u64();
    let split = split_dataset(rows.len(), cfg.validation_fraction, split_seed)?;
    let val: Vec<&[f64]> = split.eval_indices.iter().map(|&i| rows[i].as_slice()).collect();
    let mut order = split.train_indices.clone();

    let mut model = FlowModel::random(dim, flow_cfg, init_seed)?;
    let mut log = TrainLog::default();
    let diverged = |epoch: usize, e: Error, log: &TrainLog| Error::Training {
        epoch,
        reason: e.to_string(),
        log: Box::new(log.clone()),
    };

    let train_rows: Vec<&[f64]> = order.iter().map(|&i| rows[i].as_slice()).collect();
    let init_train = nll(&model, &train_rows).map_err(|e| diverged(0, e, &log))?;
    let init_val = nll(&model, &val).map_err(|e| diverged(0, e, &log))?;
    log.epochs.push(EpochRecord { epoch: 0, train_nll: init_train, val_nll: init_val });
    let mut best_val = init_val;
    let mut best_params = model.flat_params();
    let mut since_best = 0;

    let mut adam = Adam::new(&model);
    let mut params = model.flat_params();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| rows[i].as_slice()).collect();
            let (loss, grad) = grad_nll(&model, &batch).map_err(|e| diverged(epoch, e, &log))?;
            let grad = grad.flat_params();
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(diverged(epoch, Error::Numeric("non-finite gradient".into()), &log));
            }
            loss_sum += loss * chunk.len() as f64;
            adam.update(&mut params, &grad, cfg);
            model.set_flat_params(&params)?;
        }
        let train_nll = loss_sum / order.len() as f64;
        let val_nll = nll(&model, &val).map_err(|e| diverged(epoch, e, &log))?;
        log.epochs.push(EpochRecord { epoch, train_nll, val_nll });
        log::debug!("epoch {epoch}: train {train_nll:.4} val {val_nll:.4}");
        if val_nll < best_val {
            best_val = val_nll;
            best_params.copy_from_slice(&params);
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    model.set_flat_params(&best_params)?;

    let check_rows = &val[..val.len().min(8)];
    log.gradient_check = Some(finite_diff_check(&model, check_rows, 1e-5)?);
    Ok((model, log))
}
