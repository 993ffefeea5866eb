//! Switch-style top-1 mixture of experts mapping a length `L_I + L_P` series
//! vector to a length `L_P` prediction. The router picks one expert per
//! series per sample; its softmax probability multiplies the expert output so
//! the router stays differentiable. Expert output layers start at zero, so a
//! fresh mixture is the identity onto its residual.

use crate::error::{Error, Result};
use crate::params::{Bindings, Params};
use crate::rng::Rng;
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Debug, Clone)]
pub struct MoeConfig {
    pub num_experts: usize,
    /// Input vector length (`L_I + L_P`).
    pub len_in: usize,
    /// Output vector length (`L_P`).
    pub len_out: usize,
    /// Hidden width of each expert (`4 * (L_I + L_P)` by default).
    pub hidden: usize,
    pub dropout: f64,
}

impl MoeConfig {
    pub fn with_lengths(num_experts: usize, len_in: usize, len_out: usize, dropout: f64) -> Self {
        MoeConfig { num_experts, len_in, len_out, hidden: 4 * len_in, dropout }
    }
}

/// Routing decision for one series.
#[derive(Debug, Clone)]
pub struct Route {
    pub expert: usize,
    /// Softmax probability of the selected expert (host value).
    pub gate: f64,
    /// Graph node of the full `1 x num_experts` probability row.
    pub probs: NodeId,
    /// Graph node of the selected gate (`1 x 1`).
    pub gate_node: NodeId,
}

#[derive(Debug, Clone)]
pub struct Moe {
    prefix: String,
    pub cfg: MoeConfig,
}

impl Moe {
    pub fn new(prefix: impl Into<String>, cfg: MoeConfig) -> Result<Self> {
        if cfg.num_experts == 0 {
            return Err(Error::Config("mixture needs at least one expert".into()));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::Config(format!("expert dropout {} outside [0, 1)", cfg.dropout)));
        }
        Ok(Moe { prefix: prefix.into(), cfg })
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{}", self.prefix, suffix)
    }

    /// Registers router and expert parameters. The router starts at zero
    /// (ties broken toward expert 0); expert output layers start at zero.
    pub fn init_params(&self, params: &mut Params, rng: &mut Rng) {
        params.insert(self.name("router.w"), Tensor::zeros(self.cfg.num_experts, self.cfg.len_in));
        params.insert(self.name("router.b"), Tensor::zeros(self.cfg.num_experts, 1));
        for e in 0..self.cfg.num_experts {
            params.insert(
                self.name(&format!("expert{e}.w1")),
                Tensor::glorot(self.cfg.hidden, self.cfg.len_in, rng),
            );
            params.insert(self.name(&format!("expert{e}.b1")), Tensor::zeros(self.cfg.hidden, 1));
            params.insert(
                self.name(&format!("expert{e}.w2")),
                Tensor::zeros(self.cfg.len_out, self.cfg.hidden),
            );
            params.insert(self.name(&format!("expert{e}.b2")), Tensor::zeros(self.cfg.len_out, 1));
        }
    }

    /// Selects the expert for a `len_in x 1` input column: argmax of the
    /// router logits, ties broken by the lowest index.
    pub fn route(&self, graph: &mut Graph, bindings: &Bindings, z: NodeId) -> Result<Route> {
        let w = bindings.id(&self.name("router.w"));
        let b = bindings.id(&self.name("router.b"));
        let wz = graph.matmul(w, z)?;
        let logits = graph.add(wz, b)?;
        let row = graph.transpose(logits)?;
        let probs = graph.softmax(row)?;

        let logit_vals = graph.value(logits).data();
        let mut expert = 0usize;
        for (i, &v) in logit_vals.iter().enumerate() {
            if v > logit_vals[expert] {
                expert = i;
            }
        }
        let gate = graph.value(probs).data()[expert];
        let gate_node = graph.slice_cols(probs, expert, expert + 1)?;
        Ok(Route { expert, gate, probs, gate_node })
    }

    /// Gated expert output plus residual: `gate * Expert_selected(z) + residual`.
    ///
    /// `z` is `len_in x 1`, `residual` is `len_out x 1`. Only the selected
    /// expert participates, so only its parameters (and the router, through
    /// the gate) receive gradient.
    pub fn forward(
        &self,
        graph: &mut Graph,
        bindings: &Bindings,
        z: NodeId,
        residual: NodeId,
        training: bool,
        rng: &mut Rng,
    ) -> Result<(NodeId, Route)> {
        let zv = graph.value(z);
        if zv.shape() != (self.cfg.len_in, 1) {
            return Err(Error::shape("moe", format!("input {:?}, expected ({}, 1)", zv.shape(), self.cfg.len_in)));
        }
        let rv = graph.value(residual);
        if rv.shape() != (self.cfg.len_out, 1) {
            return Err(Error::shape(
                "moe",
                format!("residual {:?}, expected ({}, 1)", rv.shape(), self.cfg.len_out),
            ));
        }

        let route = self.route(graph, bindings, z)?;
        let e = route.expert;
        let w1 = bindings.id(&self.name(&format!("expert{e}.w1")));
        let b1 = bindings.id(&self.name(&format!("expert{e}.b1")));
        let w2 = bindings.id(&self.name(&format!("expert{e}.w2")));
        let b2 = bindings.id(&self.name(&format!("expert{e}.b2")));

        let h = graph.matmul(w1, z)?;
        let h = graph.add(h, b1)?;
        let h = graph.gelu(h)?;
        let h = graph.dropout(h, self.cfg.dropout, training, rng)?;
        let out = graph.matmul(w2, h)?;
        let out = graph.add(out, b2)?;
        let gated = graph.scale(out, route.gate_node)?;
        let y = graph.add(gated, residual)?;
        Ok((y, route))
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec![self.name("router.w"), self.name("router.b")];
        for e in 0..self.cfg.num_experts {
            for part in ["w1", "b1", "w2", "b2"] {
                names.push(self.name(&format!("expert{e}.{part}")));
            }
        }
        names
    }
}
