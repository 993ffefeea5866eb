//! Multi-kernel local smoothing: parallel depthwise 1-D convolutions of
//! several sizes, kernel dropout, average pooling, and channel-wise attention
//! that weights each kernel per channel, with a residual shortcut.
//!
//! Convolutions start at zero (weights and biases), so a fresh block is
//! exactly the identity and perturbs an enclosing network only through its
//! trainable positional tables. Kernels longer than the sequence are
//! center-cropped to the largest odd length that fits.

use crate::error::{Error, Result};
use crate::params::{Bindings, Params};
use crate::rng::Rng;
use crate::tensor::{Graph, NodeId, Tensor};
use rand::Rng as _;

#[derive(Debug, Clone)]
pub struct MklsConfig {
    /// Configured kernel sizes; effective sizes are cropped per instance.
    pub kernel_sizes: Vec<usize>,
    /// Kernel dropout rate `r_k`: the probability of zeroing each whole
    /// kernel output during training.
    pub dropout: f64,
}

impl Default for MklsConfig {
    fn default() -> Self {
        MklsConfig { kernel_sizes: vec![25, 145, 385], dropout: 0.25 }
    }
}

/// One smoothing block bound to a fixed sequence length and channel count.
#[derive(Debug, Clone)]
pub struct MklsBlock {
    prefix: String,
    pub seq_len: usize,
    pub dim: usize,
    /// Center-cropped kernel lengths actually instantiated.
    pub kernels: Vec<usize>,
    pub dropout: f64,
}

/// Largest odd kernel length `<= l`, never below 1.
fn crop_kernel(size: usize, l: usize) -> usize {
    let s = size.min(l);
    if s % 2 == 0 {
        (s - 1).max(1)
    } else {
        s.max(1)
    }
}

impl MklsBlock {
    pub fn new(prefix: impl Into<String>, cfg: &MklsConfig, seq_len: usize, dim: usize) -> Result<Self> {
        if cfg.kernel_sizes.is_empty() {
            return Err(Error::Config("at least one smoothing kernel required".into()));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::Config(format!("kernel dropout {} outside [0, 1)", cfg.dropout)));
        }
        if seq_len == 0 || dim == 0 {
            return Err(Error::Config("smoothing block needs positive length and width".into()));
        }
        let kernels = cfg.kernel_sizes.iter().map(|&s| crop_kernel(s, seq_len)).collect();
        Ok(MklsBlock {
            prefix: prefix.into(),
            seq_len,
            dim,
            kernels,
            dropout: cfg.dropout,
        })
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{}", self.prefix, suffix)
    }

    /// Conv weights and biases start at zero; the attention projections start
    /// as identity so the original channel structure is retained; the latent
    /// matrix starts at `1/n` so kernels begin equally weighted.
    pub fn init_params(&self, params: &mut Params, _rng: &mut Rng) {
        let n = self.kernels.len();
        for (j, &s) in self.kernels.iter().enumerate() {
            params.insert(self.name(&format!("conv{j}.kernel")), Tensor::zeros(s, self.dim));
            params.insert(self.name(&format!("conv{j}.bias")), Tensor::zeros(1, self.dim));
        }
        params.insert(self.name("wq"), Tensor::eye(self.dim));
        params.insert(self.name("wk"), Tensor::eye(self.dim));
        params.insert(self.name("wv"), Tensor::full(self.dim, n, 1.0 / n as f64));
        params.insert(self.name("pe_att"), Tensor::zeros(self.dim, self.seq_len));
        params.insert(self.name("pe_q"), Tensor::zeros(self.seq_len, self.dim));
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for j in 0..self.kernels.len() {
            names.push(self.name(&format!("conv{j}.kernel")));
            names.push(self.name(&format!("conv{j}.bias")));
        }
        for p in ["wq", "wk", "wv", "pe_att", "pe_q"] {
            names.push(self.name(p));
        }
        names
    }

    /// Per-kernel same-padded depthwise convolutions of `x` (`l x d`).
    pub fn kernel_outputs(&self, graph: &mut Graph, bindings: &Bindings, x: NodeId) -> Result<Vec<NodeId>> {
        self.check_input(graph, x)?;
        let mut outs = Vec::with_capacity(self.kernels.len());
        for j in 0..self.kernels.len() {
            let k = bindings.id(&self.name(&format!("conv{j}.kernel")));
            let b = bindings.id(&self.name(&format!("conv{j}.bias")));
            outs.push(graph.conv1d(x, k, b)?);
        }
        Ok(outs)
    }

    /// Average pooling with whole-kernel dropout: during training each
    /// kernel's output is zeroed independently with probability `r_k` and the
    /// sum is rescaled by `1/(1-r_k)`; at evaluation it is the plain mean.
    pub fn kernel_dropout_avg(
        &self,
        graph: &mut Graph,
        outputs: &[NodeId],
        training: bool,
        rng: &mut Rng,
    ) -> Result<NodeId> {
        let keep: Vec<bool> = if training && self.dropout > 0.0 {
            outputs.iter().map(|_| rng.gen::<f64>() >= self.dropout).collect()
        } else {
            vec![true; outputs.len()]
        };
        self.averaged_with_mask(graph, outputs, &keep, training)
    }

    pub(crate) fn averaged_with_mask(
        &self,
        graph: &mut Graph,
        outputs: &[NodeId],
        keep: &[bool],
        training: bool,
    ) -> Result<NodeId> {
        let n = outputs.len() as f64;
        let mut acc: Option<NodeId> = None;
        for (&out, &kept) in outputs.iter().zip(keep) {
            let term = if kept { out } else { graph.mul_scalar(out, 0.0)? };
            acc = Some(match acc {
                None => term,
                Some(a) => graph.add(a, term)?,
            });
        }
        let sum = acc.expect("at least one kernel");
        let scale = if training && self.dropout > 0.0 {
            1.0 / ((1.0 - self.dropout) * n)
        } else {
            1.0 / n
        };
        graph.mul_scalar(sum, scale)
    }

    /// Channel-wise kernel weights `M` (`d x n`):
    /// `softmax_rows(Wq (X^T + P_E) (Wk (Avg^T + P_E))^T / sqrt(d)) Wv`.
    pub fn channel_attention(&self, graph: &mut Graph, bindings: &Bindings, x: NodeId, avg: NodeId) -> Result<NodeId> {
        let wq = bindings.id(&self.name("wq"));
        let wk = bindings.id(&self.name("wk"));
        let wv = bindings.id(&self.name("wv"));
        let pe = bindings.id(&self.name("pe_att"));

        let xt = graph.transpose(x)?;
        let q_in = graph.add(xt, pe)?;
        let q = graph.matmul(wq, q_in)?;

        let at = graph.transpose(avg)?;
        let k_in = graph.add(at, pe)?;
        let k = graph.matmul(wk, k_in)?;

        let kt = graph.transpose(k)?;
        let scores = graph.matmul(q, kt)?;
        let scaled = graph.mul_scalar(scores, 1.0 / (self.dim as f64).sqrt())?;
        let attn = graph.softmax(scaled)?;
        graph.matmul(attn, wv)
    }

    /// Weighted kernel mix without the residual:
    /// `sum_j kernel_out_j[t,i] * M[i,j]`.
    pub fn smooth(&self, graph: &mut Graph, bindings: &Bindings, x: NodeId, training: bool, rng: &mut Rng) -> Result<NodeId> {
        let outs = self.kernel_outputs(graph, bindings, x)?;
        let avg = self.kernel_dropout_avg(graph, &outs, training, rng)?;
        let m = self.channel_attention(graph, bindings, x, avg)?;
        let mut acc: Option<NodeId> = None;
        for (j, &out) in outs.iter().enumerate() {
            let col = graph.slice_cols(m, j, j + 1)?;
            let row = graph.transpose(col)?;
            let weighted = graph.mul_row(out, row)?;
            acc = Some(match acc {
                None => weighted,
                Some(a) => graph.add(a, weighted)?,
            });
        }
        Ok(acc.expect("at least one kernel"))
    }

    /// The block output with its residual shortcut: `smooth(X) + X`.
    pub fn forward(&self, graph: &mut Graph, bindings: &Bindings, x: NodeId, training: bool, rng: &mut Rng) -> Result<NodeId> {
        let s = self.smooth(graph, bindings, x, training, rng)?;
        graph.add(s, x)
    }

    /// Q-path of the pre-wrapper: `forward(X) + P_E` feeding the enclosed
    /// attention block.
    pub fn pre_q(&self, graph: &mut Graph, bindings: &Bindings, x: NodeId, training: bool, rng: &mut Rng) -> Result<NodeId> {
        let f = self.forward(graph, bindings, x, training, rng)?;
        let pe_q = bindings.id(&self.name("pe_q"));
        graph.add(f, pe_q)
    }

    /// Q-path of the post-wrapper: `X + P_E` (the smoothing branch runs in
    /// parallel with the attention it wraps).
    pub fn post_q(&self, graph: &mut Graph, bindings: &Bindings, x: NodeId) -> Result<NodeId> {
        let pe_q = bindings.id(&self.name("pe_q"));
        graph.add(x, pe_q)
    }

    fn check_input(&self, graph: &Graph, x: NodeId) -> Result<()> {
        let shape = graph.value(x).shape();
        if shape != (self.seq_len, self.dim) {
            return Err(Error::shape(
                "mkls",
                format!("input {:?}, expected ({}, {})", shape, self.seq_len, self.dim),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::check_params_fn;
    use crate::rng::seed_rng;

    fn block(seq_len: usize, dim: usize, sizes: &[usize], dropout: f64) -> (MklsBlock, Params) {
        let cfg = MklsConfig { kernel_sizes: sizes.to_vec(), dropout };
        let b = MklsBlock::new("mkls", &cfg, seq_len, dim).unwrap();
        let mut params = Params::new();
        let mut rng = seed_rng(0);
        b.init_params(&mut params, &mut rng);
        (b, params)
    }

    fn randomize(block: &MklsBlock, params: &mut Params, seed: u64) {
        let mut rng = seed_rng(seed);
        for (j, &s) in block.kernels.iter().enumerate() {
            *params.get_mut(&format!("mkls.conv{j}.kernel")) = Tensor::normal(s, block.dim, 0.3, &mut rng);
            *params.get_mut(&format!("mkls.conv{j}.bias")) = Tensor::normal(1, block.dim, 0.1, &mut rng);
        }
        *params.get_mut("mkls.wq") = Tensor::normal(block.dim, block.dim, 0.4, &mut rng);
        *params.get_mut("mkls.wk") = Tensor::normal(block.dim, block.dim, 0.4, &mut rng);
        *params.get_mut("mkls.wv") = Tensor::normal(block.dim, block.kernels.len(), 0.4, &mut rng);
        *params.get_mut("mkls.pe_att") = Tensor::normal(block.dim, block.seq_len, 0.2, &mut rng);
        *params.get_mut("mkls.pe_q") = Tensor::normal(block.seq_len, block.dim, 0.2, &mut rng);
    }

    #[test]
    fn kernel_cropping_fits_short_sequences() {
        let (b, _) = block(8, 2, &[25, 145, 385], 0.25);
        assert_eq!(b.kernels, vec![7, 7, 7]);
        let (b, _) = block(96, 2, &[25, 145, 385], 0.25);
        assert_eq!(b.kernels, vec![25, 95, 95]);
        let (b, _) = block(720, 2, &[25, 145, 385], 0.25);
        assert_eq!(b.kernels, vec![25, 145, 385]);
    }

    #[test]
    fn delta_kernel_reproduces_input() {
        let (b, mut params) = block(6, 2, &[3], 0.0);
        // Center tap 1 on both channels.
        crate::params::assign(&mut params, "mkls.conv0.kernel", &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let mut g = Graph::new();
        let binds = Bindings::bind(&mut g, &params);
        let mut rng = seed_rng(1);
        let x_vals = Tensor::normal(6, 2, 1.0, &mut rng);
        let x = g.leaf(x_vals.clone());
        let outs = b.kernel_outputs(&mut g, &binds, x).unwrap();
        assert_eq!(g.value(outs[0]).data(), x_vals.data());
    }

    #[test]
    fn summing_kernel_preserves_constant_interior() {
        let (b, mut params) = block(8, 1, &[3], 0.0);
        crate::params::assign(&mut params, "mkls.conv0.kernel", &[0.2, 0.5, 0.3]).unwrap();
        let mut g = Graph::new();
        let binds = Bindings::bind(&mut g, &params);
        let c = 2.5;
        let x = g.leaf(Tensor::full(8, 1, c));
        let outs = b.kernel_outputs(&mut g, &binds, x).unwrap();
        let out = g.value(outs[0]);
        for t in 1..7 {
            assert!((out.at(t, 0) - c).abs() <= 1e-12);
        }
    }

    #[test]
    fn dropout_zero_average_is_plain_mean() {
        let (b, mut params) = block(5, 2, &[1, 3], 0.0);
        randomize(&b, &mut params, 2);
        let mut g = Graph::new();
        let binds = Bindings::bind(&mut g, &params);
        let mut rng = seed_rng(3);
        let x = g.leaf(Tensor::normal(5, 2, 1.0, &mut rng));
        let outs = b.kernel_outputs(&mut g, &binds, x).unwrap();
        let avg = b.kernel_dropout_avg(&mut g, &outs, true, &mut rng).unwrap();
        for i in 0..10 {
            let want = 0.5 * (g.value(outs[0]).data()[i] + g.value(outs[1]).data()[i]);
            assert!((g.value(avg).data()[i] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn all_kernels_dropped_gives_zero_block() {
        let (b, mut params) = block(4, 2, &[1, 3], 0.5);
        randomize(&b, &mut params, 4);
        let mut g = Graph::new();
        let binds = Bindings::bind(&mut g, &params);
        let mut rng = seed_rng(5);
        let x = g.leaf(Tensor::normal(4, 2, 1.0, &mut rng));
        let outs = b.kernel_outputs(&mut g, &binds, x).unwrap();
        let avg = b.averaged_with_mask(&mut g, &outs, &[false, false], true).unwrap();
        assert!(g.value(avg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kernel_dropout_expectation_matches_plain_mean() {
        // Delta kernels on a constant block: the no-dropout average is the
        // constant itself; the Monte-Carlo mean over 10k draws must be within
        // 2% under r_k = 0.25 with inverted rescaling.
        let (b, mut params) = block(3, 1, &[1, 1, 1, 1], 0.25);
        for j in 0..4 {
            crate::params::assign(&mut params, &format!("mkls.conv{j}.kernel"), &[1.0]).unwrap();
        }
        let c = 1.3;
        let mut rng = seed_rng(6);
        let mut sum = 0.0;
        let trials = 10_000;
        for _ in 0..trials {
            let mut g = Graph::new();
            let binds = Bindings::bind(&mut g, &params);
            let x = g.leaf(Tensor::full(3, 1, c));
            let outs = b.kernel_outputs(&mut g, &binds, x).unwrap();
            let avg = b.kernel_dropout_avg(&mut g, &outs, true, &mut rng).unwrap();
            sum += g.value(avg).data()[0];
        }
        let mean = sum / trials as f64;
        assert!((mean - c).abs() / c <= 0.02, "MC mean {mean} vs {c}");
    }

    #[test]
    fn zero_latent_matrix_silences_all_kernels() {
        let (b, mut params) = block(5, 3, &[3], 0.0);
        randomize(&b, &mut params, 7);
        crate::params::assign(&mut params, "mkls.wv", &[0.0; 3]).unwrap();
        let mut g = Graph::new();
        let binds = Bindings::bind(&mut g, &params);
        let mut rng = seed_rng(8);
        let x = g.leaf(Tensor::normal(5, 3, 1.0, &mut rng));
        let outs = b.kernel_outputs(&mut g, &binds, x).unwrap();
        let avg = b.kernel_dropout_avg(&mut g, &outs, false, &mut rng).unwrap();
        let m = b.channel_attention(&mut g, &binds, x, avg).unwrap();
        assert!(g.value(m).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_channel_attention_passes_latent_row() {
        let (b, mut params) = block(5, 1, &[3, 5], 0.0);
        randomize(&b, &mut params, 9);
        crate::params::assign(&mut params, "mkls.wv", &[0.7, -0.2]).unwrap();
        let mut g = Graph::new();
        let binds = Bindings::bind(&mut g, &params);
        let mut rng = seed_rng(10);
        let x = g.leaf(Tensor::normal(5, 1, 1.0, &mut rng));
        let outs = b.kernel_outputs(&mut g, &binds, x).unwrap();
        let avg = b.kernel_dropout_avg(&mut g, &outs, false, &mut rng).unwrap();
        let m = b.channel_attention(&mut g, &binds, x, avg).unwrap();
        // d = 1: the 1x1 affinity softmaxes to 1, so M is exactly the Wv row.
        assert_eq!(g.value(m).data(), &[0.7, -0.2]);
    }

    #[test]
    fn zero_init_block_is_identity_bitwise() {
        let mut shape_rng = seed_rng(11);
        for _ in 0..50 {
            use rand::Rng as _;
            let l = shape_rng.gen_range(1..40);
            let d = shape_rng.gen_range(1..8);
            let (b, params) = block(l, d, &[3, 9], 0.25);
            let mut g = Graph::new();
            let binds = Bindings::bind(&mut g, &params);
            let x_vals = Tensor::normal(l, d, 1.5, &mut shape_rng);
            let x = g.leaf(x_vals.clone());
            let mut rng = seed_rng(12);
            let y = b.forward(&mut g, &binds, x, true, &mut rng).unwrap();
            let bits_match = g
                .value(y)
                .data()
                .iter()
                .zip(x_vals.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(bits_match, "residual identity broken at {l}x{d}");
        }
    }

    #[test]
    fn pre_q_path_equals_input_at_zero_init() {
        let (b, params) = block(7, 3, &[3], 0.25);
        let mut g = Graph::new();
        let binds = Bindings::bind(&mut g, &params);
        let mut rng = seed_rng(13);
        let x_vals = Tensor::normal(7, 3, 1.0, &mut rng);
        let x = g.leaf(x_vals.clone());
        let q = b.pre_q(&mut g, &binds, x, true, &mut rng).unwrap();
        assert_eq!(g.value(q).data(), x_vals.data());
    }

    #[test]
    fn one_hot_kernel_weights_select_that_kernel() {
        let (b, mut params) = block(6, 2, &[1, 3], 0.0);
        randomize(&b, &mut params, 14);
        // Wv selects kernel 1 for every channel: rows of M become [0, 1].
        crate::params::assign(&mut params, "mkls.wv", &[0.0, 1.0, 0.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let binds = Bindings::bind(&mut g, &params);
        let mut rng = seed_rng(15);
        let x_vals = Tensor::normal(6, 2, 1.0, &mut rng);
        let x = g.leaf(x_vals.clone());
        let outs = b.kernel_outputs(&mut g, &binds, x).unwrap();
        let y = b.forward(&mut g, &binds, x, false, &mut rng).unwrap();
        for i in 0..12 {
            let want = g.value(outs[1]).data()[i] + x_vals.data()[i];
            assert!((g.value(y).data()[i] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_matches_straight_line_reimplementation() {
        let (l, d, sizes) = (6usize, 3usize, [3usize, 5]);
        let (b, mut params) = block(l, d, &sizes, 0.0);
        randomize(&b, &mut params, 16);
        let mut rng = seed_rng(17);
        let x_vals = Tensor::normal(l, d, 1.0, &mut rng);

        let mut g = Graph::new();
        let binds = Bindings::bind(&mut g, &params);
        let x = g.leaf(x_vals.clone());
        let y = b.forward(&mut g, &binds, x, false, &mut rng).unwrap();

        // Straight-line recomputation from the raw parameter arrays.
        let n = sizes.len();
        let mut conv = vec![vec![0.0; l * d]; n];
        for (j, &s) in sizes.iter().enumerate() {
            let k = params.get(&format!("mkls.conv{j}.kernel"));
            let bias = params.get(&format!("mkls.conv{j}.bias"));
            let pad = (s - 1) / 2;
            for ch in 0..d {
                for t in 0..l {
                    let mut acc = bias.data()[ch];
                    for tau in 0..s {
                        let src = t as isize + tau as isize - pad as isize;
                        if src >= 0 && (src as usize) < l {
                            acc += k.at(tau, ch) * x_vals.at(src as usize, ch);
                        }
                    }
                    conv[j][t * d + ch] = acc;
                }
            }
        }
        let mut avg = vec![0.0; l * d];
        for j in 0..n {
            for i in 0..l * d {
                avg[i] += conv[j][i] / n as f64;
            }
        }
        let (wq, wk, wv, pe) = (
            params.get("mkls.wq"),
            params.get("mkls.wk"),
            params.get("mkls.wv"),
            params.get("mkls.pe_att"),
        );
        // q = Wq (X^T + PE), k = Wk (Avg^T + PE), both d x l.
        let mut q = vec![0.0; d * l];
        let mut kk = vec![0.0; d * l];
        for i in 0..d {
            for t in 0..l {
                let mut sq = 0.0;
                let mut sk = 0.0;
                for u in 0..d {
                    sq += wq.at(i, u) * (x_vals.at(t, u) + pe.at(u, t));
                    sk += wk.at(i, u) * (avg[t * d + u] + pe.at(u, t));
                }
                q[i * l + t] = sq;
                kk[i * l + t] = sk;
            }
        }
        let mut m = vec![0.0; d * n];
        for i in 0..d {
            let mut scores = vec![0.0; d];
            for i2 in 0..d {
                let mut s = 0.0;
                for t in 0..l {
                    s += q[i * l + t] * kk[i2 * l + t];
                }
                scores[i2] = s / (d as f64).sqrt();
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..n {
                let mut acc = 0.0;
                for i2 in 0..d {
                    acc += exps[i2] / z * wv.at(i2, j);
                }
                m[i * n + j] = acc;
            }
        }
        for t in 0..l {
            for i in 0..d {
                let mut want = x_vals.at(t, i);
                for j in 0..n {
                    want += conv[j][t * d + i] * m[i * n + j];
                }
                let got = g.value(y).at(t, i);
                assert!((got - want).abs() <= 1e-12, "mismatch at ({t}, {i}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn kernel_weights_ignore_time_permutation_without_positional_table() {
        let (b, mut params) = block(6, 3, &[3], 0.0);
        randomize(&b, &mut params, 18);
        crate::params::assign(&mut params, "mkls.pe_att", &vec![0.0; 3 * 6]).unwrap();

        let mut rng = seed_rng(19);
        let x_vals = Tensor::normal(6, 3, 1.0, &mut rng);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut x_perm = Tensor::zeros(6, 3);
        for (to, &from) in perm.iter().enumerate() {
            for c in 0..3 {
                x_perm.set(to, c, x_vals.at(from, c));
            }
        }

        let m_of = |xv: &Tensor, avgv: &Tensor| {
            let mut g = Graph::new();
            let binds = Bindings::bind(&mut g, &params);
            let x = g.leaf(xv.clone());
            let avg = g.leaf(avgv.clone());
            let m = b.channel_attention(&mut g, &binds, x, avg).unwrap();
            g.value(m).data().to_vec()
        };

        // Use the input itself as the pooled tensor; both get permuted alike.
        let m_base = m_of(&x_vals, &x_vals);
        let m_perm = m_of(&x_perm, &x_perm);
        for (a, b) in m_base.iter().zip(&m_perm) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn all_parameters_pass_gradient_check() {
        let (b, mut params) = block(5, 3, &[3, 5], 0.0);
        randomize(&b, &mut params, 20);
        let mut rng = seed_rng(21);
        let x_vals = Tensor::normal(5, 3, 1.0, &mut rng);
        let target = Tensor::normal(5, 3, 1.0, &mut rng);
        let report = check_params_fn("mkls", &params, 1e-4, 1e-5, |g, binds| {
            let x = g.leaf(x_vals.clone());
            let mut rng = seed_rng(22);
            let q = b.pre_q(g, binds, x, false, &mut rng)?;
            let t = g.leaf(target.clone());
            let d = g.sub(q, t)?;
            let d2 = g.mul(d, d)?;
            g.mean_all(d2)
        })
        .unwrap();
        assert!(report.pass(), "{}", report.summary());
    }

    #[test]
    fn shapes_are_preserved_for_any_length() {
        for l in [1usize, 2, 5, 17] {
            let (b, params) = block(l, 4, &[25, 145, 385], 0.25);
            let mut g = Graph::new();
            let binds = Bindings::bind(&mut g, &params);
            let mut rng = seed_rng(23);
            let x = g.leaf(Tensor::normal(l, 4, 1.0, &mut rng));
            let y = b.forward(&mut g, &binds, x, true, &mut rng).unwrap();
            assert_eq!(g.value(y).shape(), (l, 4));
        }
    }

    #[test]
    fn gradients_flow_into_m_and_weighted_outputs() {
        // Keeps `concat_cols_all` honest for a single-column fold as used by
        // callers assembling per-kernel weighted pieces.
        let mut g = Graph::new();
        let a = g.param(Tensor::col(&[1.0, 2.0]));
        let out = crate::auel::concat_cols_all(&mut g, &[a]).unwrap();
        let s = g.sum_all(out).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 1.0]);
    }
}
