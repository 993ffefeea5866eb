//! Flat `key = value` configuration covering the model architecture, the
//! three module toggles, and the training loop.

use crate::data::SplitSpec;
use crate::error::{Error, Result};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub len_input: usize,
    pub len_pred: usize,
    pub dim: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub label_len: usize,

    pub auel_distribution: bool,
    pub auel_temporal: bool,
    pub auel_epsilon: f64,
    /// Explicit multi-window std lengths; empty derives them from the
    /// smoothing kernel sizes.
    pub auel_windows: Vec<usize>,
    pub moe_experts: usize,
    pub moe_dropout: f64,
    /// Switch-style load-balancing loss weight; 0 disables the term.
    pub moe_aux_weight: f64,

    pub rd_enabled: bool,
    pub rd_max_rate: f64,
    /// Keep dropped channels in the training loss (their targets are zeros).
    pub rd_loss_on_dropped: bool,

    pub mkls_kernels: Vec<usize>,
    pub mkls_dropout: f64,
    pub mkls_pre: bool,
    pub mkls_post: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            len_input: 720,
            len_pred: 96,
            dim: 16,
            heads: 8,
            enc_layers: 2,
            dec_layers: 1,
            label_len: 0,
            auel_distribution: true,
            auel_temporal: true,
            auel_epsilon: 1e-5,
            auel_windows: Vec::new(),
            moe_experts: 2,
            moe_dropout: 0.75,
            moe_aux_weight: 0.0,
            rd_enabled: true,
            rd_max_rate: 0.99,
            rd_loss_on_dropped: true,
            mkls_kernels: vec![25, 145, 385],
            mkls_dropout: 0.25,
            mkls_pre: true,
            mkls_post: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            epochs: 100,
            patience: 30,
            warmup_fraction: 0.10,
            batch_size: 32,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub stride: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split: SplitSpec::default(),
            stride: 1,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        if self.train.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.train.warmup_fraction) {
            return Err(Error::Config("warm-up fraction must be in [0, 1)".into()));
        }
        if self.train.patience == 0 {
            return Err(Error::Config("early-stopping patience must be >= 1".into()));
        }
        if self.model.len_input == 0 || self.model.len_pred == 0 {
            return Err(Error::Config("input and horizon lengths must be positive".into()));
        }
        Ok(())
    }

    /// Canonical flat text; parsing it back yields an equivalent config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        format!(
            "l_i = {}\nl_p = {}\nd = {}\nheads = {}\nenc_layers = {}\ndec_layers = {}\nlabel_len = {}\n\
             auel.distribution = {}\nauel.temporal = {}\nauel.epsilon = {}\nauel.windows = {}\n\
             moe.experts = {}\nmoe.dropout = {}\nmoe.aux_weight = {}\n\
             rd.enabled = {}\nrd.max_rate = {}\nrd.loss_on_dropped = {}\n\
             mkls.kernels = {}\nmkls.dropout = {}\nmkls.pre = {}\nmkls.post = {}\n\
             lr = {}\nepochs = {}\npatience = {}\nwarmup = {}\nbatch_size = {}\nseed = {}\n\
             split = {},{},{}\nstride = {}\n",
            m.len_input,
            m.len_pred,
            m.dim,
            m.heads,
            m.enc_layers,
            m.dec_layers,
            m.label_len,
            m.auel_distribution,
            m.auel_temporal,
            m.auel_epsilon,
            list(&m.auel_windows),
            m.moe_experts,
            m.moe_dropout,
            m.moe_aux_weight,
            m.rd_enabled,
            m.rd_max_rate,
            m.rd_loss_on_dropped,
            list(&m.mkls_kernels),
            m.mkls_dropout,
            m.mkls_pre,
            m.mkls_post,
            t.lr,
            t.epochs,
            t.patience,
            t.warmup_fraction,
            t.batch_size,
            t.seed,
            self.split.train,
            self.split.val,
            self.split.test,
            self.stride,
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {:?}", line_no + 1, raw)))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value).map_err(|e| Error::Config(format!("line {}: {e}", line_no + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Config::from_text(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for `{key}`")))
        }
        fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
            if value.is_empty() {
                return Ok(Vec::new());
            }
            value.split(',').map(|v| parse(key, v.trim())).collect()
        }
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "l_i" => m.len_input = parse(key, value)?,
            "l_p" => m.len_pred = parse(key, value)?,
            "d" => m.dim = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "enc_layers" => m.enc_layers = parse(key, value)?,
            "dec_layers" => m.dec_layers = parse(key, value)?,
            "label_len" => m.label_len = parse(key, value)?,
            "auel.distribution" => m.auel_distribution = parse(key, value)?,
            "auel.temporal" => m.auel_temporal = parse(key, value)?,
            "auel.epsilon" => m.auel_epsilon = parse(key, value)?,
            "auel.windows" => m.auel_windows = parse_list(key, value)?,
            "moe.experts" => m.moe_experts = parse(key, value)?,
            "moe.dropout" => m.moe_dropout = parse(key, value)?,
            "moe.aux_weight" => m.moe_aux_weight = parse(key, value)?,
            "rd.enabled" => m.rd_enabled = parse(key, value)?,
            "rd.max_rate" => m.rd_max_rate = parse(key, value)?,
            "rd.loss_on_dropped" => m.rd_loss_on_dropped = parse(key, value)?,
            "mkls.kernels" => m.mkls_kernels = parse_list(key, value)?,
            "mkls.dropout" => m.mkls_dropout = parse(key, value)?,
            "mkls.pre" => m.mkls_pre = parse(key, value)?,
            "mkls.post" => m.mkls_post = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "warmup" => t.warmup_fraction = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "split" => {
                let parts: Vec<f64> = value
                    .split(',')
                    .map(|v| parse("split", v.trim()))
                    .collect::<Result<_>>()?;
                if parts.len() != 3 {
                    return Err(Error::Config(format!("split needs 3 fractions, got {}", parts.len())));
                }
                self.split = SplitSpec::new(parts[0], parts[1], parts[2])?;
            }
            "stride" => self.stride = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Short hex digest of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_preserves_fields() {
        let mut cfg = Config::default();
        cfg.model.len_input = 96;
        cfg.model.len_pred = 24;
        cfg.model.dim = 16;
        cfg.model.rd_enabled = false;
        cfg.train.lr = 1e-3;
        cfg.train.seed = 7;
        cfg.stride = 2;
        let back = Config::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back.to_text(), cfg.to_text());
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = Config::from_text("# header\n\nl_i = 48  # lookback\nl_p = 12\nstride = 1\n").unwrap();
        assert_eq!(cfg.model.len_input, 48);
        assert_eq!(cfg.model.len_pred, 12);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = Config::from_text("l_x = 3\n").unwrap_err().to_string();
        assert!(err.contains("unknown key"), "{err}");
    }

    #[test]
    fn hash_changes_with_content() {
        let a = Config::default();
        let mut b = Config::default();
        b.train.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn defaults_follow_reference_settings() {
        let cfg = Config::default();
        assert_eq!(cfg.train.lr, 5e-5);
        assert_eq!(cfg.train.epochs, 100);
        assert_eq!(cfg.train.patience, 30);
        assert_eq!(cfg.train.warmup_fraction, 0.1);
        assert_eq!(cfg.model.mkls_kernels, vec![25, 145, 385]);
        assert_eq!(cfg.model.moe_dropout, 0.75);
        assert_eq!(cfg.model.mkls_dropout, 0.25);
        assert_eq!(cfg.model.enc_layers, 2);
        assert_eq!(cfg.model.dec_layers, 1);
        assert_eq!(cfg.model.heads, 8);
        assert_eq!(cfg.split, SplitSpec { train: 0.7, val: 0.1, test: 0.2 });
    }
}
