//! Training: Adam with warm-up/linear-decay scheduling, early stopping, the
//! batch loop, and run reporting.

use crate::checkpoint;
use crate::config::Config;
use crate::data::{make_windows, Dataset, Split, TrainStats};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_model, Metrics};
use crate::model::Model;
use crate::params::Params;
use crate::rng::{derive_rng, stream};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

/// Adam with bias-corrected moment estimates, keyed by parameter name.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One update over every parameter with a gradient entry.
    pub fn step(&mut self, params: &mut Params, grads: &HashMap<String, Vec<f64>>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, tensor) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let data = tensor.data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// Learning rate at `step` of `total_steps`: linear ramp from 0 over the
/// warm-up fraction, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, base_lr: f64, warmup_fraction: f64) -> f64 {
    let warmup = (total_steps as f64 * warmup_fraction).round() as u64;
    if step <= warmup {
        if warmup == 0 {
            return base_lr;
        }
        base_lr * step as f64 / warmup as f64
    } else {
        let rest = (total_steps - warmup) as f64;
        base_lr * (total_steps.saturating_sub(step)) as f64 / rest
    }
}

/// Tracks the best validation MSE, signalling a stop after `patience`
/// evaluations without improvement.
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    pub best_epoch: usize,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper { patience, best: f64::INFINITY, best_epoch: 0, since_best: 0 }
    }

    /// Records one validation result; returns `true` when the run should stop.
    pub fn update(&mut self, epoch: usize, val_mse: f64) -> bool {
        if val_mse < self.best {
            self.best = val_mse;
            self.best_epoch = epoch;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }

    pub fn improved(&self) -> bool {
        self.since_best == 0
    }

    pub fn best_val_mse(&self) -> f64 {
        self.best
    }
}

/// What one training run produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub train_loss: Vec<f64>,
    pub val_mse: Vec<f64>,
    pub val_mae: Vec<f64>,
    pub best_epoch: usize,
    pub test_mse: f64,
    pub test_mae: f64,
    pub seed: u64,
    pub config_hash: String,
    pub wall_clock_secs: f64,
    pub epochs_run: usize,
}

impl RunReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn write_epoch_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::from("epoch,train_loss,val_mse,val_mae\n");
        for e in 0..self.train_loss.len() {
            out.push_str(&format!("{},{},{},{}\n", e, self.train_loss[e], self.val_mse[e], self.val_mae[e]));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Product of [`train`]: the report plus the best-validation parameter set.
pub struct TrainOutcome {
    pub report: RunReport,
    pub best_params: Params,
    pub model: Model,
    pub stats: TrainStats,
}

/// Trains a model on a raw (unstandardized) dataset.
///
/// Per step: sample a batch, draw one random-dropping mask (training only),
/// apply it to inputs and targets, run the full pipeline, average per-sample
/// gradients, Adam-update, clamp the per-series parameters. Validation runs
/// after every epoch; test metrics come from the checkpoint with minimum
/// validation MSE.
pub fn train(config: &Config, dataset: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let started = Instant::now();
    let mut data = dataset.clone();
    let ranges = config.split.ranges(data.rows());
    let stats = TrainStats::fit(&data, ranges[0])?;
    stats.apply(&mut data);

    let train_windows = make_windows(ranges[0], config.model.len_input, config.model.len_pred, config.stride)?;
    let val_windows = make_windows(ranges[1], config.model.len_input, config.model.len_pred, config.stride)?;
    let test_windows = make_windows(ranges[2], config.model.len_input, config.model.len_pred, config.stride)?;

    let model = Model::new(config.model.clone(), data.cols())?;
    let mut params = model.init_params(config.train.seed);
    let mut adam = Adam::new();

    let batch = config.train.batch_size.max(1);
    let steps_per_epoch = train_windows.len().div_ceil(batch) as u64;
    let total_steps = steps_per_epoch * config.train.epochs as u64;

    let mut stopper = EarlyStopper::new(config.train.patience);
    let mut best_params = params.clone();
    let mut train_loss = Vec::new();
    let mut val_mse_hist = Vec::new();
    let mut val_mae_hist = Vec::new();
    let mut step: u64 = 0;
    let mut epochs_run = 0;

    let mut order: Vec<usize> = (0..train_windows.len()).collect();

    for epoch in 0..config.train.epochs {
        let mut shuffle_rng = derive_rng(config.train.seed, &[stream::SHUFFLE, epoch as u64]);
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(batch) {
            step += 1;
            let lr = lr_at(step, total_steps, config.train.lr, config.train.warmup_fraction);

            let mask = if config.model.rd_enabled {
                let mut mask_rng = derive_rng(config.train.seed, &[stream::DROP_MASK, step]);
                Some(model.rd().sample_mask(data.cols(), &mut mask_rng))
            } else {
                None
            };

            let results: Vec<Result<(f64, HashMap<String, Vec<f64>>)>> = chunk
                .par_iter()
                .enumerate()
                .map(|(slot, &w_idx)| {
                    let mut window = train_windows.window(&data, w_idx);
                    if let Some(m) = &mask {
                        crate::rd::apply_mask(m, &mut window.input, &mut window.target)?;
                    }
                    let mut sample_rng = derive_rng(config.train.seed, &[stream::SAMPLE, step, slot as u64]);
                    model.loss_and_grads(&params, &window, !config.model.rd_loss_on_dropped, mask.as_ref(), &mut sample_rng)
                })
                .collect();

            let mut grads: HashMap<String, Vec<f64>> = HashMap::new();
            let mut loss_sum = 0.0;
            let n = chunk.len() as f64;
            for r in results {
                let (loss, g) = r.map_err(|e| {
                    Error::Training(format!("step {step} (seed {}): {e}", config.train.seed))
                })?;
                loss_sum += loss;
                for (k, v) in g {
                    let acc = grads.entry(k).or_insert_with(|| vec![0.0; v.len()]);
                    for (a, b) in acc.iter_mut().zip(&v) {
                        *a += b;
                    }
                }
            }
            if !loss_sum.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at step {step} (seed {})",
                    config.train.seed
                )));
            }
            for v in grads.values_mut() {
                for g in v.iter_mut() {
                    *g /= n;
                }
            }

            adam.step(&mut params, &grads, lr);
            model.clamp_params(&mut params);

            epoch_loss += loss_sum / n;
            batches += 1.0;
        }

        epochs_run = epoch + 1;
        let val = evaluate_model(&model, &params, &data, &val_windows)?;
        train_loss.push(epoch_loss / batches);
        val_mse_hist.push(val.mse);
        val_mae_hist.push(val.mae);

        let stop = stopper.update(epoch, val.mse);
        if stopper.improved() {
            best_params = params.clone();
        }
        if stop {
            break;
        }
    }

    let test = evaluate_model(&model, &best_params, &data, &test_windows)?;
    let report = RunReport {
        train_loss,
        val_mse: val_mse_hist,
        val_mae: val_mae_hist,
        best_epoch: stopper.best_epoch,
        test_mse: test.mse,
        test_mae: test.mae,
        seed: config.train.seed,
        config_hash: config.hash(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        epochs_run,
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        checkpoint::save(&dir.join("checkpoint.bin"), config, &best_params)?;
        report.write_json(dir.join("report.json"))?;
        report.write_epoch_csv(dir.join("epochs.csv"))?;
    }

    Ok(TrainOutcome { report, best_params, model, stats })
}

/// Evaluates a split of a raw dataset with a trained parameter set.
pub fn evaluate_split(config: &Config, params: &Params, dataset: &Dataset, split: Split) -> Result<Metrics> {
    let mut data = dataset.clone();
    let ranges = config.split.ranges(data.rows());
    let stats = TrainStats::fit(&data, ranges[0])?;
    stats.apply(&mut data);
    let range = config.split.range_of(data.rows(), split);
    let windows = make_windows(range, config.model.len_input, config.model.len_pred, config.stride)?;
    let model = Model::new(config.model.clone(), data.cols())?;
    evaluate_model(&model, params, &data, &windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn adam_matches_reference_iteration_on_scalar_quadratic() {
        // Minimize f(x) = 0.5 x^2 (gradient x) and compare against a
        // hand-rolled bias-corrected Adam recurrence.
        let lr = 0.1;
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);

        let mut params = Params::new();
        params.insert("x", Tensor::scalar(3.0));
        let mut adam = Adam::new();

        let mut x_ref = 3.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=50 {
            let g = params.get("x").data()[0];
            let mut grads = HashMap::new();
            grads.insert("x".to_string(), vec![g]);
            adam.step(&mut params, &grads, lr);

            let g_ref = x_ref;
            m = b1 * m + (1.0 - b1) * g_ref;
            v = b2 * v + (1.0 - b2) * g_ref * g_ref;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            x_ref -= lr * m_hat / (v_hat.sqrt() + eps);

            let got = params.get("x").data()[0];
            assert!((got - x_ref).abs() <= 1e-12, "step {t}: {got} vs {x_ref}");
        }
        assert!(params.get("x").data()[0].abs() < 3.0);
    }

    #[test]
    fn lr_schedule_matches_closed_form() {
        let base = 5e-5;
        let total = 1000;
        let warmup_frac = 0.1; // warm-up ends at step 100
        assert_eq!(lr_at(0, total, base, warmup_frac), 0.0);
        assert_eq!(lr_at(100, total, base, warmup_frac), base);
        // Midpoint of the decay line: (100 + 1000) / 2 = 550 -> lr/2.
        let mid = lr_at(550, total, base, warmup_frac);
        assert!((mid - base / 2.0).abs() <= 1e-18, "{mid}");
        assert_eq!(lr_at(total, total, base, warmup_frac), 0.0);
    }

    #[test]
    fn early_stopping_halts_after_patience() {
        // Validation MSE falls until epoch 3, then rises monotonically; with
        // patience 5 the stop signal must come at epoch 3 + 5.
        let mut stopper = EarlyStopper::new(5);
        let mut stopped_at = None;
        for epoch in 0..100 {
            let val = if epoch <= 3 { 1.0 - 0.1 * epoch as f64 } else { 0.7 + 0.05 * epoch as f64 };
            if stopper.update(epoch, val) {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopper.best_epoch, 3);
        assert_eq!(stopped_at, Some(8));
    }
}
