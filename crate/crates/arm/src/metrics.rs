//! Evaluation metrics (MSE/MAE in standardized space) and the last-value
//! Repeat baseline.

use crate::data::{Dataset, WindowSet};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::Params;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

/// Averages squared and absolute errors over all windows, horizon steps and
/// channels of a split. No dropping, no dropout; deterministic given
/// parameters.
pub fn evaluate_model(model: &Model, params: &Params, data: &Dataset, windows: &WindowSet) -> Result<Metrics> {
    if windows.is_empty() {
        return Err(Error::Data("evaluation split has no windows".into()));
    }
    let per_window: Vec<Result<(f64, f64)>> = (0..windows.len())
        .into_par_iter()
        .map(|i| {
            let w = windows.window(data, i);
            let pred = model.predict(params, &w.input)?;
            let mut sse = 0.0;
            let mut sae = 0.0;
            for (p, t) in pred.data().iter().zip(&w.target) {
                let d = p - t;
                sse += d * d;
                sae += d.abs();
            }
            Ok((sse, sae))
        })
        .collect();
    let mut sse = 0.0;
    let mut sae = 0.0;
    for r in per_window {
        let (a, b) = r?;
        sse += a;
        sae += b;
    }
    let count = (windows.len() * windows.len_pred * data.cols()) as f64;
    Ok(Metrics { mse: sse / count, mae: sae / count })
}

/// Repeat baseline: every horizon step predicted as the last input value per
/// channel, aggregated exactly like [`evaluate_model`].
pub fn repeat_baseline(data: &Dataset, windows: &WindowSet) -> Result<Metrics> {
    if windows.is_empty() {
        return Err(Error::Data("evaluation split has no windows".into()));
    }
    let c = data.cols();
    let mut sse = 0.0;
    let mut sae = 0.0;
    for i in 0..windows.len() {
        let w = windows.window(data, i);
        let last_row = &w.input[(w.len_input - 1) * c..w.len_input * c];
        for h in 0..w.len_pred {
            for ch in 0..c {
                let d = last_row[ch] - w.target[h * c + ch];
                sse += d * d;
                sae += d.abs();
            }
        }
    }
    let count = (windows.len() * windows.len_pred * c) as f64;
    Ok(Metrics { mse: sse / count, mae: sae / count })
}
