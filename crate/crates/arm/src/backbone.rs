//! Vanilla Transformer encoder-decoder with input projection, positional and
//! segment (task) embeddings, optionally wrapped by multi-kernel local
//! smoothing, producing the intermediate forecast from the horizon tokens.
//!
//! The encoder consumes the lookback token segment; the decoder consumes the
//! horizon segment (optionally with a prepended label segment) and
//! cross-attends to the encoder memory. Blocks are post-norm residual with a
//! `4d` feed-forward; attention itself carries no dropout. With smoothing
//! enabled, one pre-wrapper enhances each stack's input and a post-wrapper
//! runs in parallel with every attention sublayer.

use crate::error::{Error, Result};
use crate::mkls::{MklsBlock, MklsConfig};
use crate::params::{Bindings, Params};
use crate::rng::Rng;
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Debug, Clone)]
pub struct BackboneConfig {
    pub dim: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Length of the lookback tail prepended to the decoder segment
    /// (Informer-style); 0 feeds the decoder the horizon segment only.
    pub label_len: usize,
    pub mkls_pre: bool,
    pub mkls_post: bool,
    pub mkls: MklsConfig,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            dim: 16,
            heads: 8,
            enc_layers: 2,
            dec_layers: 1,
            label_len: 0,
            mkls_pre: true,
            mkls_post: true,
            mkls: MklsConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    len_input: usize,
    len_pred: usize,
    channels: usize,
    enc_pre: Option<MklsBlock>,
    enc_post: Vec<MklsBlock>,
    dec_pre: Option<MklsBlock>,
    dec_self_post: Vec<MklsBlock>,
    dec_cross_post: Vec<MklsBlock>,
}

const LN_EPS: f64 = 1e-5;

impl Backbone {
    pub fn new(cfg: BackboneConfig, len_input: usize, len_pred: usize, channels: usize) -> Result<Self> {
        if cfg.dim == 0 || cfg.heads == 0 || cfg.dim % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "model dim {} must be a positive multiple of {} heads",
                cfg.dim, cfg.heads
            )));
        }
        if cfg.enc_layers == 0 || cfg.dec_layers == 0 {
            return Err(Error::Config("need at least one encoder and one decoder layer".into()));
        }
        if cfg.label_len > len_input {
            return Err(Error::Config(format!(
                "label length {} exceeds input length {}",
                cfg.label_len, len_input
            )));
        }
        let dec_len = cfg.label_len + len_pred;

        let mut enc_pre = None;
        let mut dec_pre = None;
        let mut enc_post = Vec::new();
        let mut dec_self_post = Vec::new();
        let mut dec_cross_post = Vec::new();
        if cfg.mkls_pre {
            enc_pre = Some(MklsBlock::new("backbone.enc_pre_mkls", &cfg.mkls, len_input, cfg.dim)?);
            dec_pre = Some(MklsBlock::new("backbone.dec_pre_mkls", &cfg.mkls, dec_len, cfg.dim)?);
        }
        if cfg.mkls_post {
            for i in 0..cfg.enc_layers {
                enc_post.push(MklsBlock::new(
                    format!("backbone.enc{i}.post_mkls"),
                    &cfg.mkls,
                    len_input,
                    cfg.dim,
                )?);
            }
            for i in 0..cfg.dec_layers {
                dec_self_post.push(MklsBlock::new(
                    format!("backbone.dec{i}.self_post_mkls"),
                    &cfg.mkls,
                    dec_len,
                    cfg.dim,
                )?);
                dec_cross_post.push(MklsBlock::new(
                    format!("backbone.dec{i}.cross_post_mkls"),
                    &cfg.mkls,
                    dec_len,
                    cfg.dim,
                )?);
            }
        }
        Ok(Backbone {
            cfg,
            len_input,
            len_pred,
            channels,
            enc_pre,
            enc_post,
            dec_pre,
            dec_self_post,
            dec_cross_post,
        })
    }

    pub fn total_len(&self) -> usize {
        self.len_input + self.len_pred
    }

    fn init_attn(params: &mut Params, prefix: &str, dim: usize, rng: &mut Rng) {
        for part in ["wq", "wk", "wv", "wo"] {
            params.insert(format!("{prefix}.{part}"), Tensor::glorot(dim, dim, rng));
        }
        for part in ["bq", "bk", "bv", "bo"] {
            params.insert(format!("{prefix}.{part}"), Tensor::zeros(1, dim));
        }
    }

    fn init_norm(params: &mut Params, prefix: &str, dim: usize) {
        params.insert(format!("{prefix}.gamma"), Tensor::full(1, dim, 1.0));
        params.insert(format!("{prefix}.beta"), Tensor::zeros(1, dim));
    }

    fn init_ff(params: &mut Params, prefix: &str, dim: usize, rng: &mut Rng) {
        let hidden = 4 * dim;
        params.insert(format!("{prefix}.w1"), Tensor::glorot(dim, hidden, rng));
        params.insert(format!("{prefix}.b1"), Tensor::zeros(1, hidden));
        params.insert(format!("{prefix}.w2"), Tensor::glorot(hidden, dim, rng));
        params.insert(format!("{prefix}.b2"), Tensor::zeros(1, dim));
    }

    pub fn init_params(&self, params: &mut Params, rng: &mut Rng) {
        let d = self.cfg.dim;
        params.insert("backbone.input_proj.w", Tensor::glorot(self.channels, d, rng));
        params.insert("backbone.input_proj.b", Tensor::zeros(1, d));
        params.insert("backbone.pos_embed", Tensor::normal(self.total_len(), d, 0.02, rng));
        params.insert("backbone.task_embed_input", Tensor::normal(1, d, 0.02, rng));
        params.insert("backbone.task_embed_horizon", Tensor::normal(1, d, 0.02, rng));
        for i in 0..self.cfg.enc_layers {
            Self::init_attn(params, &format!("backbone.enc{i}.attn"), d, rng);
            Self::init_norm(params, &format!("backbone.enc{i}.norm1"), d);
            Self::init_ff(params, &format!("backbone.enc{i}.ff"), d, rng);
            Self::init_norm(params, &format!("backbone.enc{i}.norm2"), d);
        }
        for i in 0..self.cfg.dec_layers {
            Self::init_attn(params, &format!("backbone.dec{i}.self_attn"), d, rng);
            Self::init_norm(params, &format!("backbone.dec{i}.norm1"), d);
            Self::init_attn(params, &format!("backbone.dec{i}.cross_attn"), d, rng);
            Self::init_norm(params, &format!("backbone.dec{i}.norm2"), d);
            Self::init_ff(params, &format!("backbone.dec{i}.ff"), d, rng);
            Self::init_norm(params, &format!("backbone.dec{i}.norm3"), d);
        }
        params.insert("backbone.output_proj.w", Tensor::glorot(d, self.channels, rng));
        params.insert("backbone.output_proj.b", Tensor::zeros(1, self.channels));

        for block in self.mkls_blocks() {
            block.init_params(params, rng);
        }
    }

    fn mkls_blocks(&self) -> impl Iterator<Item = &MklsBlock> {
        self.enc_pre
            .iter()
            .chain(self.dec_pre.iter())
            .chain(self.enc_post.iter())
            .chain(self.dec_self_post.iter())
            .chain(self.dec_cross_post.iter())
    }

    /// Input projection plus positional and per-segment task embeddings.
    pub fn embed(&self, graph: &mut Graph, bindings: &Bindings, x: NodeId) -> Result<NodeId> {
        let shape = graph.value(x).shape();
        if shape != (self.total_len(), self.channels) {
            return Err(Error::shape(
                "embed",
                format!("input {:?}, expected ({}, {})", shape, self.total_len(), self.channels),
            ));
        }
        let w = bindings.id("backbone.input_proj.w");
        let b = bindings.id("backbone.input_proj.b");
        let proj = graph.matmul(x, w)?;
        let proj = graph.add_row(proj, b)?;
        let pos = bindings.id("backbone.pos_embed");
        let tokens = graph.add(proj, pos)?;
        let head = graph.slice_rows(tokens, 0, self.len_input)?;
        let head = graph.add_row(head, bindings.id("backbone.task_embed_input"))?;
        let tail = graph.slice_rows(tokens, self.len_input, self.total_len())?;
        let tail = graph.add_row(tail, bindings.id("backbone.task_embed_horizon"))?;
        graph.concat_rows(head, tail)
    }

    /// Scaled dot-product multi-head attention; `q_in` is `lq x d`, `kv_in`
    /// is `lk x d`, both in the shared model dimension.
    fn attention(&self, graph: &mut Graph, bindings: &Bindings, prefix: &str, q_in: NodeId, kv_in: NodeId) -> Result<NodeId> {
        let d = self.cfg.dim;
        if graph.value(q_in).cols() != d || graph.value(kv_in).cols() != d {
            return Err(Error::shape(
                "attention",
                format!(
                    "q {:?} / kv {:?} incompatible with model dim {}",
                    graph.value(q_in).shape(),
                    graph.value(kv_in).shape(),
                    d
                ),
            ));
        }
        let wq = bindings.id(&format!("{prefix}.wq"));
        let wk = bindings.id(&format!("{prefix}.wk"));
        let wv = bindings.id(&format!("{prefix}.wv"));
        let wo = bindings.id(&format!("{prefix}.wo"));
        let q = graph.matmul(q_in, wq)?;
        let q = graph.add_row(q, bindings.id(&format!("{prefix}.bq")))?;
        let k = graph.matmul(kv_in, wk)?;
        let k = graph.add_row(k, bindings.id(&format!("{prefix}.bk")))?;
        let v = graph.matmul(kv_in, wv)?;
        let v = graph.add_row(v, bindings.id(&format!("{prefix}.bv")))?;

        let dh = d / self.cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = graph.slice_cols(q, lo, hi)?;
            let kh = graph.slice_cols(k, lo, hi)?;
            let vh = graph.slice_cols(v, lo, hi)?;
            let kt = graph.transpose(kh)?;
            let scores = graph.matmul(qh, kt)?;
            let scores = graph.mul_scalar(scores, scale)?;
            let attn = graph.softmax(scores)?;
            heads.push(graph.matmul(attn, vh)?);
        }
        let merged = crate::auel::concat_cols_all(graph, &heads)?;
        let out = graph.matmul(merged, wo)?;
        graph.add_row(out, bindings.id(&format!("{prefix}.bo")))
    }

    fn layer_norm(&self, graph: &mut Graph, bindings: &Bindings, prefix: &str, x: NodeId) -> Result<NodeId> {
        let gamma = bindings.id(&format!("{prefix}.gamma"));
        let beta = bindings.id(&format!("{prefix}.beta"));
        graph.layer_norm(x, gamma, beta, LN_EPS)
    }

    fn feed_forward(&self, graph: &mut Graph, bindings: &Bindings, prefix: &str, x: NodeId) -> Result<NodeId> {
        let h = graph.matmul(x, bindings.id(&format!("{prefix}.w1")))?;
        let h = graph.add_row(h, bindings.id(&format!("{prefix}.b1")))?;
        let h = graph.gelu(h)?;
        let out = graph.matmul(h, bindings.id(&format!("{prefix}.w2")))?;
        graph.add_row(out, bindings.id(&format!("{prefix}.b2")))
    }

    /// One attention sublayer, post-norm. Without smoothing:
    /// `LN(x + Attn(x, kv))`. With a post-wrapper, the smoothing branch
    /// (`smooth(x) + x`) replaces the plain residual and the query takes the
    /// wrapper's positional table: `LN(mkls(x) + Attn(x + pe, kv))`.
    fn attn_sublayer(
        &self,
        graph: &mut Graph,
        bindings: &Bindings,
        attn_prefix: &str,
        norm_prefix: &str,
        mkls: Option<&MklsBlock>,
        x: NodeId,
        kv: Option<NodeId>,
        training: bool,
        rng: &mut Rng,
    ) -> Result<NodeId> {
        let (residual, q_in) = match mkls {
            Some(block) => (
                block.forward(graph, bindings, x, training, rng)?,
                block.post_q(graph, bindings, x)?,
            ),
            None => (x, x),
        };
        let kv_in = kv.unwrap_or(q_in);
        let attn = self.attention(graph, bindings, attn_prefix, q_in, kv_in)?;
        let summed = graph.add(residual, attn)?;
        self.layer_norm(graph, bindings, norm_prefix, summed)
    }

    fn ff_sublayer(&self, graph: &mut Graph, bindings: &Bindings, ff_prefix: &str, norm_prefix: &str, x: NodeId) -> Result<NodeId> {
        let ff = self.feed_forward(graph, bindings, ff_prefix, x)?;
        let summed = graph.add(x, ff)?;
        self.layer_norm(graph, bindings, norm_prefix, summed)
    }

    /// Full forecast from the normalized `(L_I + L_P) x C` block: embeds,
    /// encodes the lookback segment, decodes the horizon segment against the
    /// encoder memory, and projects back to channel space as `L_P x C`.
    pub fn forecast_core(&self, graph: &mut Graph, bindings: &Bindings, x: NodeId, training: bool, rng: &mut Rng) -> Result<NodeId> {
        let tokens = self.embed(graph, bindings, x)?;
        let enc_tokens = graph.slice_rows(tokens, 0, self.len_input)?;
        let dec_tokens = graph.slice_rows(tokens, self.len_input - self.cfg.label_len, self.total_len())?;

        let mut enc = match &self.enc_pre {
            Some(block) => block.pre_q(graph, bindings, enc_tokens, training, rng)?,
            None => enc_tokens,
        };
        for i in 0..self.cfg.enc_layers {
            enc = self.attn_sublayer(
                graph,
                bindings,
                &format!("backbone.enc{i}.attn"),
                &format!("backbone.enc{i}.norm1"),
                self.enc_post.get(i),
                enc,
                None,
                training,
                rng,
            )?;
            enc = self.ff_sublayer(graph, bindings, &format!("backbone.enc{i}.ff"), &format!("backbone.enc{i}.norm2"), enc)?;
        }
        let memory = enc;

        let mut dec = match &self.dec_pre {
            Some(block) => block.pre_q(graph, bindings, dec_tokens, training, rng)?,
            None => dec_tokens,
        };
        for i in 0..self.cfg.dec_layers {
            dec = self.attn_sublayer(
                graph,
                bindings,
                &format!("backbone.dec{i}.self_attn"),
                &format!("backbone.dec{i}.norm1"),
                self.dec_self_post.get(i),
                dec,
                None,
                training,
                rng,
            )?;
            dec = self.attn_sublayer(
                graph,
                bindings,
                &format!("backbone.dec{i}.cross_attn"),
                &format!("backbone.dec{i}.norm2"),
                self.dec_cross_post.get(i),
                dec,
                Some(memory),
                training,
                rng,
            )?;
            dec = self.ff_sublayer(graph, bindings, &format!("backbone.dec{i}.ff"), &format!("backbone.dec{i}.norm3"), dec)?;
        }

        let dec_len = graph.value(dec).rows();
        let horizon = graph.slice_rows(dec, dec_len - self.len_pred, dec_len)?;
        let out = graph.matmul(horizon, bindings.id("backbone.output_proj.w"))?;
        graph.add_row(out, bindings.id("backbone.output_proj.b"))
    }
}
