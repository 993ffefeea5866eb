//! The full forecasting pipeline: random dropping (training only, applied by
//! the caller) -> adaptive univariate effect stats/preprocess/horizon init ->
//! Transformer encoder-decoder with local smoothing -> MoE refinement and
//! inverse processing -> squared-error loss in globally standardized space.

use crate::auel::{default_window_lengths, Auel, AuelConfig};
use crate::backbone::{Backbone, BackboneConfig};
use crate::config::ModelConfig;
use crate::data::SeriesWindow;
use crate::error::{Error, Result};
use crate::mkls::MklsConfig;
use crate::moe::Route;
use crate::params::{Bindings, Params};
use crate::rd::{DropMask, RandomDropping};
use crate::rng::{derive_rng, stream, Rng};
use crate::tensor::{check_scalar_fn, GradCheckReport, Graph, NodeId, Tensor};
use std::collections::HashMap;

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    channels: usize,
    auel: Auel,
    backbone: Backbone,
    rd: RandomDropping,
}

pub struct ForwardOut {
    /// Forecast in standardized space, `L_P x C`.
    pub prediction: NodeId,
    pub routes: Vec<Route>,
}

impl Model {
    pub fn new(cfg: ModelConfig, channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("model needs at least one channel".into()));
        }
        let windows = if cfg.auel_windows.is_empty() {
            default_window_lengths(cfg.len_input, &cfg.mkls_kernels)
        } else {
            cfg.auel_windows.clone()
        };
        let auel = Auel::new(
            AuelConfig {
                distribution: cfg.auel_distribution,
                temporal: cfg.auel_temporal,
                epsilon: cfg.auel_epsilon,
                window_lengths: windows,
                moe_experts: cfg.moe_experts,
                moe_dropout: cfg.moe_dropout,
            },
            cfg.len_input,
            cfg.len_pred,
            channels,
        )?;
        let backbone = Backbone::new(
            BackboneConfig {
                dim: cfg.dim,
                heads: cfg.heads,
                enc_layers: cfg.enc_layers,
                dec_layers: cfg.dec_layers,
                label_len: cfg.label_len,
                mkls_pre: cfg.mkls_pre,
                mkls_post: cfg.mkls_post,
                mkls: MklsConfig { kernel_sizes: cfg.mkls_kernels.clone(), dropout: cfg.mkls_dropout },
            },
            cfg.len_input,
            cfg.len_pred,
            channels,
        )?;
        let rd = RandomDropping::new(cfg.rd_max_rate)?;
        Ok(Model { cfg, channels, auel, backbone, rd })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn rd(&self) -> &RandomDropping {
        &self.rd
    }

    pub fn auel(&self) -> &Auel {
        &self.auel
    }

    /// Fresh parameter set; the census of names is the module inventory.
    pub fn init_params(&self, seed: u64) -> Params {
        let mut rng = derive_rng(seed, &[stream::INIT]);
        let mut params = Params::new();
        self.auel.init_params(&mut params, &mut rng);
        self.backbone.init_params(&mut params, &mut rng);
        params
    }

    pub fn clamp_params(&self, params: &mut Params) {
        self.auel.clamp_params(params);
    }

    /// Builds the pipeline from an `L_I x C` input node to the restored
    /// `L_P x C` forecast.
    pub fn forward(
        &self,
        graph: &mut Graph,
        bindings: &Bindings,
        x_input: NodeId,
        training: bool,
        rng: &mut Rng,
    ) -> Result<ForwardOut> {
        let shape = graph.value(x_input).shape();
        if shape != (self.cfg.len_input, self.channels) {
            return Err(Error::shape(
                "model",
                format!("input {:?}, expected ({}, {})", shape, self.cfg.len_input, self.channels),
            ));
        }
        let zeros = graph.leaf(Tensor::zeros(self.cfg.len_pred, self.channels));
        let x_full = graph.concat_rows(x_input, zeros)?;

        let (e, s, x_star) = if self.cfg.auel_distribution {
            let (e, s) = self.auel.stats(graph, bindings, x_input)?;
            let x_star = self.auel.preprocess(graph, bindings, x_full, e, s)?;
            (e, s, x_star)
        } else {
            let e = graph.leaf(Tensor::zeros(1, self.channels));
            let s = graph.leaf(Tensor::zeros(1, self.channels));
            (e, s, x_full)
        };

        let mut routes = Vec::new();
        let xt = if self.cfg.auel_temporal {
            let (xt, mut r) = self.auel.init_horizon(graph, bindings, x_star, training, rng)?;
            routes.append(&mut r);
            xt
        } else {
            x_star
        };

        let x_ed = self.backbone.forecast_core(graph, bindings, xt, training, rng)?;

        let (prediction, mut r2) = self.auel.inverse(graph, bindings, x_star, x_ed, e, s, training, rng)?;
        routes.append(&mut r2);
        Ok(ForwardOut { prediction, routes })
    }

    /// MSE between prediction and target, optionally restricted to kept
    /// channels, plus the optional load-balancing term.
    fn loss_node(
        &self,
        graph: &mut Graph,
        out: &ForwardOut,
        target: NodeId,
        exclude_dropped: Option<&DropMask>,
    ) -> Result<NodeId> {
        let diff = graph.sub(out.prediction, target)?;
        let sq = graph.mul(diff, diff)?;
        let mut loss = match exclude_dropped {
            Some(mask) => {
                let kept: Vec<f64> = mask.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
                let kept_count = kept.iter().sum::<f64>() * self.cfg.len_pred as f64;
                let w = graph.leaf(Tensor::row(&kept));
                let weighted = graph.mul_row(sq, w)?;
                let total = graph.sum_all(weighted)?;
                graph.mul_scalar(total, 1.0 / kept_count)?
            }
            None => graph.mean_all(sq)?,
        };
        if self.cfg.moe_aux_weight > 0.0 && !out.routes.is_empty() {
            let aux = self.aux_balance_loss(graph, &out.routes)?;
            let aux = graph.mul_scalar(aux, self.cfg.moe_aux_weight)?;
            loss = graph.add(loss, aux)?;
        }
        Ok(loss)
    }

    /// Switch-style load balancing: `n_experts * sum_e f_e * mean_e(P_e)`
    /// over every routing decision of the sample.
    fn aux_balance_loss(&self, graph: &mut Graph, routes: &[Route]) -> Result<NodeId> {
        let n_exp = self.cfg.moe_experts;
        let mut counts = vec![0.0; n_exp];
        for r in routes {
            counts[r.expert] += 1.0;
        }
        let total = routes.len() as f64;
        let fractions: Vec<f64> = counts.iter().map(|c| c / total).collect();
        let prob_rows: Vec<NodeId> = routes.iter().map(|r| r.probs).collect();
        let probs = crate::auel::concat_rows_all(graph, &prob_rows)?;
        let mean_probs = graph.col_mean(probs)?;
        let f = graph.leaf(Tensor::row(&fractions));
        let prod = graph.mul(mean_probs, f)?;
        let s = graph.sum_all(prod)?;
        graph.mul_scalar(s, n_exp as f64)
    }

    /// One training sample: loss value and per-parameter gradients. The
    /// window is expected to be masked already when random dropping is on;
    /// `mask` only controls the optional exclude-dropped loss weighting.
    pub fn loss_and_grads(
        &self,
        params: &Params,
        window: &SeriesWindow,
        exclude_dropped: bool,
        mask: Option<&DropMask>,
        rng: &mut Rng,
    ) -> Result<(f64, HashMap<String, Vec<f64>>)> {
        let mut graph = Graph::new();
        let bindings = Bindings::bind(&mut graph, params);
        let x = graph.leaf(Tensor::new(window.len_input, window.channels, window.input.clone())?);
        let out = self.forward(&mut graph, &bindings, x, true, rng)?;
        let target = graph.leaf(Tensor::new(window.len_pred, window.channels, window.target.clone())?);
        let loss = self.loss_node(&mut graph, &out, target, if exclude_dropped { mask } else { None })?;
        graph.backward(loss)?;
        let value = graph.value(loss).data()[0];
        Ok((value, bindings.grads(&graph, params)))
    }

    /// Deterministic evaluation forecast for one input block.
    pub fn predict(&self, params: &Params, input: &[f64]) -> Result<Tensor> {
        let mut graph = Graph::new();
        let bindings = Bindings::bind(&mut graph, params);
        let x = graph.leaf(Tensor::new(self.cfg.len_input, self.channels, input.to_vec())?);
        let mut rng = derive_rng(0, &[]);
        let out = self.forward(&mut graph, &bindings, x, false, &mut rng)?;
        Ok(graph.value(out.prediction).clone())
    }
}

/// Toy shapes for the finite-difference suite.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        len_input: 8,
        len_pred: 4,
        dim: 4,
        heads: 2,
        moe_dropout: 0.0,
        mkls_dropout: 0.0,
        ..ModelConfig::default()
    }
}

/// Moves every parameter to a generic interior point so finite differences
/// see no routing ties or clamp boundaries.
pub fn randomize_params(params: &mut Params, seed: u64) {
    use rand::Rng as _;
    let mut rng = derive_rng(seed, &[stream::INIT, 77]);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let t = params.get_mut(&name);
        if name == "auel.alpha" {
            for v in t.data_mut() {
                *v = rng.gen_range(0.25..0.85);
            }
        } else if name == "auel.window_weights" {
            for v in t.data_mut() {
                *v = rng.gen_range(0.2..1.0);
            }
        } else if name == "auel.gamma" {
            for v in t.data_mut() {
                *v = rng.gen_range(0.7..1.4);
            }
        } else {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.25..0.25);
            }
        }
    }
}

/// Finite-difference check of every trainable parameter group of the full
/// pipeline at toy shapes, in evaluation mode (no stochastic ops). Returns
/// one report per group.
pub fn gradient_suite(seed: u64, tolerance: f64) -> Result<Vec<GradCheckReport>> {
    let channels = 3;
    let model = Model::new(toy_model_config(), channels)?;
    let mut params = model.init_params(seed);
    randomize_params(&mut params, seed);

    let mut rng = derive_rng(seed, &[stream::DATA, 5]);
    let x_vals = Tensor::normal(model.cfg.len_input, channels, 1.0, &mut rng);
    let target = Tensor::normal(model.cfg.len_pred, channels, 1.0, &mut rng);

    let groups: Vec<(&str, Box<dyn Fn(&str) -> bool>)> = vec![
        ("auel.distribution (alpha/p/gamma/beta)", Box::new(|n: &str| n.starts_with("auel.") && !n.starts_with("auel.moe"))),
        ("auel.moe (router + experts)", Box::new(|n: &str| n.starts_with("auel.moe"))),
        ("mkls (convs/Wq/Wk/Wv/PE)", Box::new(|n: &str| n.contains("mkls"))),
        ("backbone (proj/embed/attention/ff)", Box::new(|n: &str| n.starts_with("backbone.") && !n.contains("mkls"))),
    ];

    let mut reports = Vec::new();
    for (group_name, belongs) in groups {
        let subset: Vec<(String, Tensor)> = params
            .iter()
            .filter(|(n, _)| belongs(n))
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        if subset.is_empty() {
            continue;
        }
        let report = check_scalar_fn(group_name, &subset, tolerance, 1e-5, |g, ids| {
            // Bind the checked subset as the graph leaves under test and the
            // rest as constants at their current values.
            let mut map = HashMap::new();
            for (i, (n, _)) in subset.iter().enumerate() {
                map.insert(n.clone(), ids[i]);
            }
            for (n, t) in params.iter() {
                if !belongs(n) {
                    map.insert(n.to_string(), g.leaf(t.clone()));
                }
            }
            let bindings = Bindings::from_map(map);
            let x = g.leaf(x_vals.clone());
            let mut fwd_rng = derive_rng(seed, &[stream::SAMPLE, 1]);
            let out = model.forward(g, &bindings, x, false, &mut fwd_rng)?;
            let t = g.leaf(target.clone());
            let d = g.sub(out.prediction, t)?;
            let d2 = g.mul(d, d)?;
            g.mean_all(d2)
        })?;
        reports.push(report);
    }
    Ok(reports)
}
