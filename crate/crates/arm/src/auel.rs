//! Adaptive univariate effect learning: per-series output-distribution
//! estimation and MoE-based temporal-pattern initialization around the main
//! predictor.
//!
//! Distribution side: a learnable EMA mean with per-series decay `alpha`
//! (normalized weights `alpha^(L_I - t)`, most recent step heaviest), a
//! multi-window standard deviation with per-series nonnegative window weights,
//! and a per-series affine transform. At `alpha -> 1` with a single
//! full-length window this degenerates to instance normalization; at
//! `alpha -> 0` the mean becomes the last observed value.
//!
//! Temporal side: one shared mixture of experts maps each normalized series
//! (input plus current horizon) to a fresh horizon, first to initialize the
//! zero-filled horizon before the encoder-decoder and again to refine the
//! encoder-decoder output, each time with the pre-existing horizon as the
//! residual shortcut.

use crate::error::{Error, Result};
use crate::moe::{Moe, MoeConfig, Route};
use crate::params::{Bindings, Params};
use crate::rng::Rng;
use crate::tensor::{Graph, NodeId, Tensor};

pub const ALPHA_MIN: f64 = 1e-4;
pub const GAMMA_MIN: f64 = 1e-4;
pub const WEIGHT_SUM_MIN: f64 = 1e-6;

/// The reference lookback the default window sizes were chosen for; shorter
/// inputs scale the windows down proportionally.
pub const REFERENCE_LOOKBACK: usize = 720;

#[derive(Debug, Clone)]
pub struct AuelConfig {
    /// Learn per-series output distribution (EMA mean, multi-window std, affine).
    pub distribution: bool,
    /// Learn per-series temporal patterns with the mixture of experts.
    pub temporal: bool,
    pub epsilon: f64,
    /// Trailing-window lengths for the std estimate; sorted, each in `[2, L_I]`.
    pub window_lengths: Vec<usize>,
    pub moe_experts: usize,
    pub moe_dropout: f64,
}

impl Default for AuelConfig {
    fn default() -> Self {
        AuelConfig {
            distribution: true,
            temporal: true,
            epsilon: 1e-5,
            window_lengths: Vec::new(),
            moe_experts: 2,
            moe_dropout: 0.75,
        }
    }
}

/// Scales the reference window sizes down proportionally for short lookbacks,
/// clamping into `[2, len_input]` and deduplicating.
pub fn default_window_lengths(len_input: usize, reference_sizes: &[usize]) -> Vec<usize> {
    let scale = (len_input as f64 / REFERENCE_LOOKBACK as f64).min(1.0);
    let mut out: Vec<usize> = reference_sizes
        .iter()
        .map(|&s| ((s as f64 * scale).round() as usize).clamp(2, len_input))
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

#[derive(Debug, Clone)]
pub struct Auel {
    pub cfg: AuelConfig,
    len_input: usize,
    len_pred: usize,
    channels: usize,
    moe: Option<Moe>,
}

impl Auel {
    pub fn new(mut cfg: AuelConfig, len_input: usize, len_pred: usize, channels: usize) -> Result<Self> {
        if cfg.window_lengths.is_empty() {
            cfg.window_lengths = default_window_lengths(len_input, &[25, 145, 385]);
        }
        if cfg.window_lengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("window lengths must be strictly ascending".into()));
        }
        if let Some(&bad) = cfg.window_lengths.iter().find(|&&w| w < 2 || w > len_input) {
            return Err(Error::Config(format!("window length {bad} outside [2, {len_input}]")));
        }
        let moe = if cfg.temporal {
            Some(Moe::new(
                "auel.moe",
                MoeConfig::with_lengths(cfg.moe_experts, len_input + len_pred, len_pred, cfg.moe_dropout),
            )?)
        } else {
            None
        };
        Ok(Auel { cfg, len_input, len_pred, channels, moe })
    }

    pub fn moe(&self) -> Option<&Moe> {
        self.moe.as_ref()
    }

    pub fn windows(&self) -> &[usize] {
        &self.cfg.window_lengths
    }

    pub fn init_params(&self, params: &mut Params, rng: &mut Rng) {
        if self.cfg.distribution {
            let k = self.cfg.window_lengths.len();
            params.insert("auel.alpha", Tensor::full(1, self.channels, 0.9));
            params.insert("auel.window_weights", Tensor::full(k, self.channels, 1.0 / k as f64));
            params.insert("auel.gamma", Tensor::full(1, self.channels, 1.0));
            params.insert("auel.beta", Tensor::zeros(1, self.channels));
        }
        if let Some(moe) = &self.moe {
            moe.init_params(params, rng);
        }
    }

    /// Per-sample statistics `(E, S)`, both `1 x C`, from the input block
    /// only. Differentiable with respect to `alpha` and the window weights.
    pub fn stats(&self, graph: &mut Graph, bindings: &Bindings, x_input: NodeId) -> Result<(NodeId, NodeId)> {
        let shape = graph.value(x_input).shape();
        if shape != (self.len_input, self.channels) {
            return Err(Error::shape(
                "auel_stats",
                format!("input {:?}, expected ({}, {})", shape, self.len_input, self.channels),
            ));
        }
        let alpha = bindings.id("auel.alpha");
        let weights = bindings.id("auel.window_weights");
        let e = ema_mean(graph, x_input, alpha)?;
        let s = multi_window_std(graph, x_input, weights, &self.cfg.window_lengths)?;
        Ok((e, s))
    }

    /// `gamma * (x - E) / (S + eps) + beta`, broadcast over all rows of `x`.
    pub fn preprocess(
        &self,
        graph: &mut Graph,
        bindings: &Bindings,
        x: NodeId,
        e: NodeId,
        s: NodeId,
    ) -> Result<NodeId> {
        let gamma = bindings.id("auel.gamma");
        let beta = bindings.id("auel.beta");
        normalize(graph, x, e, s, gamma, beta, self.cfg.epsilon)
    }

    /// Keeps the input segment verbatim and replaces the horizon segment with
    /// the MoE prediction (zero residual: the horizon was zero-filled before
    /// normalization, and that pre-existing block is the shortcut).
    pub fn init_horizon(
        &self,
        graph: &mut Graph,
        bindings: &Bindings,
        xt_star: NodeId,
        training: bool,
        rng: &mut Rng,
    ) -> Result<(NodeId, Vec<Route>)> {
        let moe = self.moe.as_ref().expect("init_horizon requires the temporal component");
        let rows = graph.value(xt_star).rows();
        if rows != self.len_input + self.len_pred {
            return Err(Error::shape(
                "init_horizon",
                format!("{} rows, expected {}", rows, self.len_input + self.len_pred),
            ));
        }
        let mut routes = Vec::with_capacity(self.channels);
        let mut horizon_cols = Vec::with_capacity(self.channels);
        for c in 0..self.channels {
            let z = graph.slice_cols(xt_star, c, c + 1)?;
            let residual = graph.leaf(Tensor::zeros(self.len_pred, 1));
            let (y, route) = moe.forward(graph, bindings, z, residual, training, rng)?;
            routes.push(route);
            horizon_cols.push(y);
        }
        let horizon = concat_cols_all(graph, &horizon_cols)?;
        let input_part = graph.slice_rows(xt_star, 0, self.len_input)?;
        let xt = graph.concat_rows(input_part, horizon)?;
        Ok((xt, routes))
    }

    /// MoE refinement of the encoder-decoder output (residual: the output
    /// itself), then the inverse affine/statistics restoration.
    pub fn inverse(
        &self,
        graph: &mut Graph,
        bindings: &Bindings,
        xt_star: NodeId,
        x_ed: NodeId,
        e: NodeId,
        s: NodeId,
        training: bool,
        rng: &mut Rng,
    ) -> Result<(NodeId, Vec<Route>)> {
        if graph.value(x_ed).shape() != (self.len_pred, self.channels) {
            return Err(Error::shape(
                "auel_inverse",
                format!("{:?}, expected ({}, {})", graph.value(x_ed).shape(), self.len_pred, self.channels),
            ));
        }
        let mut routes = Vec::new();
        let x_m = if let Some(moe) = &self.moe {
            let input_part = graph.slice_rows(xt_star, 0, self.len_input)?;
            let mut cols = Vec::with_capacity(self.channels);
            for c in 0..self.channels {
                let zi = graph.slice_cols(input_part, c, c + 1)?;
                let zp = graph.slice_cols(x_ed, c, c + 1)?;
                let z = graph.concat_rows(zi, zp)?;
                let (y, route) = moe.forward(graph, bindings, z, zp, training, rng)?;
                routes.push(route);
                cols.push(y);
            }
            concat_cols_all(graph, &cols)?
        } else {
            x_ed
        };
        let out = if self.cfg.distribution {
            let gamma = bindings.id("auel.gamma");
            let beta = bindings.id("auel.beta");
            restore(graph, x_m, e, s, gamma, beta, self.cfg.epsilon)?
        } else {
            x_m
        };
        Ok((out, routes))
    }

    /// Post-step clamping: `alpha` into `[1e-4, 1 - 1e-4]`, window weights
    /// nonnegative with a per-series floor on their sum, `|gamma| >= 1e-4`.
    /// In-range values pass through bit-identically.
    pub fn clamp_params(&self, params: &mut Params) {
        if !self.cfg.distribution {
            return;
        }
        for a in params.get_mut("auel.alpha").data_mut() {
            *a = a.clamp(ALPHA_MIN, 1.0 - ALPHA_MIN);
        }
        let k = self.cfg.window_lengths.len();
        let weights = params.get_mut("auel.window_weights");
        for v in weights.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        for c in 0..self.channels {
            let sum: f64 = (0..k).map(|j| weights.at(j, c)).sum();
            if sum < WEIGHT_SUM_MIN {
                for j in 0..k {
                    weights.set(j, c, WEIGHT_SUM_MIN);
                }
            }
        }
        for g in params.get_mut("auel.gamma").data_mut() {
            if g.abs() < GAMMA_MIN {
                *g = if *g < 0.0 { -GAMMA_MIN } else { GAMMA_MIN };
            }
        }
    }
}

/// EMA mean over the time axis: `E_c = sum_t w_t x[t,c]` with normalized
/// weights `w_t = alpha_c^(L-t) / sum_s alpha_c^(L-s)`; the most recent step
/// carries the largest weight. `alpha` is a `1 x C` node with entries in (0,1).
pub fn ema_mean(graph: &mut Graph, x_input: NodeId, alpha: NodeId) -> Result<NodeId> {
    if let Some(&bad) = graph
        .value(alpha)
        .data()
        .iter()
        .find(|a| !(0.0 < **a && **a < 1.0))
    {
        return Err(Error::Config(format!("EMA alpha {bad} outside (0, 1)")));
    }
    let rows = graph.value(x_input).rows();
    let exponents: Vec<f64> = (0..rows).map(|r| (rows - 1 - r) as f64).collect();
    let e_col = graph.leaf(Tensor::col(&exponents));
    let log_alpha = graph.log(alpha)?;
    let powers = graph.matmul(e_col, log_alpha)?;
    let unnorm = graph.exp(powers)?;
    let z = graph.col_sum(unnorm)?;
    let weights = graph.div_row(unnorm, z)?;
    let weighted = graph.mul(weights, x_input)?;
    graph.col_sum(weighted)
}

/// Weighted average of trailing-window population standard deviations:
/// `S_c = sum_j p[j,c] std(x[L-w_j..L, c]) / sum_j p[j,c]`.
pub fn multi_window_std(graph: &mut Graph, x_input: NodeId, weights: NodeId, windows: &[usize]) -> Result<NodeId> {
    let rows = graph.value(x_input).rows();
    if let Some(&bad) = windows.iter().find(|&&w| w > rows) {
        return Err(Error::Config(format!("std window {bad} exceeds input length {rows}")));
    }
    let k = windows.len();
    if graph.value(weights).rows() != k {
        return Err(Error::shape(
            "multi_window_std",
            format!("{} weight rows for {} windows", graph.value(weights).rows(), k),
        ));
    }
    let mut stds = Vec::with_capacity(k);
    for &w in windows {
        let xw = graph.slice_rows(x_input, rows - w, rows)?;
        let mu = graph.col_mean(xw)?;
        let centered = graph.sub_row(xw, mu)?;
        let sq = graph.mul(centered, centered)?;
        let var = graph.col_mean(sq)?;
        stds.push(graph.sqrt(var)?);
    }
    let std_mat = concat_rows_all(graph, &stds)?;
    let num_terms = graph.mul(weights, std_mat)?;
    let num = graph.col_sum(num_terms)?;
    let den = graph.col_sum(weights)?;
    graph.div(num, den)
}

/// `gamma * (x - e) / (s + eps) + beta` with `e, s, gamma, beta` all `1 x C`.
pub fn normalize(
    graph: &mut Graph,
    x: NodeId,
    e: NodeId,
    s: NodeId,
    gamma: NodeId,
    beta: NodeId,
    eps: f64,
) -> Result<NodeId> {
    let centered = graph.sub_row(x, e)?;
    let denom = graph.add_scalar(s, eps)?;
    let scaled = graph.div_row(centered, denom)?;
    let with_gamma = graph.mul_row(scaled, gamma)?;
    graph.add_row(with_gamma, beta)
}

/// Inverse of [`normalize`]: `((x - beta) / gamma) * (s + eps) + e`.
pub fn restore(
    graph: &mut Graph,
    x: NodeId,
    e: NodeId,
    s: NodeId,
    gamma: NodeId,
    beta: NodeId,
    eps: f64,
) -> Result<NodeId> {
    let shifted = graph.sub_row(x, beta)?;
    let unscaled = graph.div_row(shifted, gamma)?;
    let denom = graph.add_scalar(s, eps)?;
    let rescaled = graph.mul_row(unscaled, denom)?;
    graph.add_row(rescaled, e)
}

pub(crate) fn concat_rows_all(graph: &mut Graph, parts: &[NodeId]) -> Result<NodeId> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = graph.concat_rows(acc, p)?;
    }
    Ok(acc)
}

pub(crate) fn concat_cols_all(graph: &mut Graph, parts: &[NodeId]) -> Result<NodeId> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = graph.concat_cols(acc, p)?;
    }
    Ok(acc)
}
