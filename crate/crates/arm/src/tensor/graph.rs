//! Eager tape of tensor operations with reverse-mode gradients.
//!
//! Ops are appended in execution order, so node ids form a topological order
//! and one reverse sweep visits each node exactly once. Gradients accumulate
//! additively at fan-out nodes. Every op validates shapes and rejects
//! non-finite outputs, naming the offending op.

use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;
use rand::Rng as _;

pub type NodeId = usize;

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    /// Tensor times a `1x1` node.
    Scale(NodeId, NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Gelu(NodeId),
    Relu(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// Row-wise softmax.
    Softmax(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    /// Depthwise same-padded 1-D convolution along rows (time), one kernel column per channel.
    Conv1d { x: NodeId, kernel: NodeId, bias: NodeId },
    /// Inverted dropout; the mask holds `0` or `1/(1-rate)` factors.
    Dropout { x: NodeId, mask: Vec<f64> },
    ConcatRows(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    SliceRows { x: NodeId, start: usize },
    SliceCols { x: NodeId, start: usize },
    SumAll(NodeId),
    MeanAll(NodeId),
    ColSum(NodeId),
    ColMean(NodeId),
    /// `(r x c) op (1 x c)`, broadcasting the row vector over rows.
    AddRow(NodeId, NodeId),
    SubRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    DivRow(NodeId, NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Tape of executed ops; owns forward values and, after `backward`, gradients.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Non-trainable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(Op::Leaf, value, false)
    }

    /// Trainable leaf; participates in `backward`.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(Op::Leaf, value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad, grad: None });
        self.nodes.len() - 1
    }

    fn push(&mut self, name: &'static str, op: Op, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push_unchecked(op, value, requires_grad))
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn same_shape(&self, name: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(name, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    fn row_vec_shape(&self, name: &'static str, m: NodeId, v: NodeId) -> Result<()> {
        let (mv, vv) = (self.value(m), self.value(v));
        if vv.rows() != 1 || vv.cols() != mv.cols() {
            return Err(Error::shape(
                name,
                format!("matrix {:?} with row vector {:?}", mv.shape(), vv.shape()),
            ));
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let out = zip(self.value(a), self.value(b), |x, y| x + y);
        self.push("add", Op::Add(a, b), out, self.needs_grad(&[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let out = zip(self.value(a), self.value(b), |x, y| x - y);
        self.push("sub", Op::Sub(a, b), out, self.needs_grad(&[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let out = zip(self.value(a), self.value(b), |x, y| x * y);
        self.push("mul", Op::Mul(a, b), out, self.needs_grad(&[a, b]))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("div", a, b)?;
        let out = zip(self.value(a), self.value(b), |x, y| x / y);
        self.push("div", Op::Div(a, b), out, self.needs_grad(&[a, b]))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let out = map(self.value(a), |x| x + c);
        self.push("add_scalar", Op::AddScalar(a), out, self.needs_grad(&[a]))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let out = map(self.value(a), |x| x * c);
        self.push("mul_scalar", Op::MulScalar(a, c), out, self.needs_grad(&[a]))
    }

    /// Multiplies a tensor by a `1x1` node (e.g. a routing gate).
    pub fn scale(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).shape() != (1, 1) {
            return Err(Error::shape("scale", format!("scale factor must be 1x1, got {:?}", self.value(s).shape())));
        }
        let f = self.value(s).data()[0];
        let out = map(self.value(a), |x| x * f);
        self.push("scale", Op::Scale(a, s), out, self.needs_grad(&[a, s]))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let out = map(self.value(a), f64::exp);
        self.push("exp", Op::Exp(a), out, self.needs_grad(&[a]))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let out = map(self.value(a), f64::ln);
        self.push("log", Op::Log(a), out, self.needs_grad(&[a]))
    }

    /// Square root; the gradient at exactly 0 is taken as 0 (subgradient convention,
    /// needed for the standard deviation of constant windows).
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let out = map(self.value(a), f64::sqrt);
        self.push("sqrt", Op::Sqrt(a), out, self.needs_grad(&[a]))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = map(self.value(a), gelu);
        self.push("gelu", Op::Gelu(a), out, self.needs_grad(&[a]))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = map(self.value(a), |x| x.max(0.0));
        self.push("relu", Op::Relu(a), out, self.needs_grad(&[a]))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let out = matmul(av, bv);
        self.push("matmul", Op::MatMul(a, b), out, self.needs_grad(&[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let out = transpose(self.value(a));
        self.push("transpose", Op::Transpose(a), out, self.needs_grad(&[a]))
    }

    /// Softmax over each row.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let (r, c) = v.shape();
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = &v.data()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out.data_mut()[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                out.data_mut()[i * c + j] /= sum;
            }
        }
        self.push("softmax", Op::Softmax(a), out, self.needs_grad(&[a]))
    }

    /// Row-wise layer normalization with affine parameters (`1 x c` each).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        self.row_vec_shape("layer_norm", x, gamma)?;
        self.row_vec_shape("layer_norm", x, beta)?;
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (r, c) = xv.shape();
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = &xv.data()[i * c..(i + 1) * c];
            let (mean, var) = mean_var(row);
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out.data_mut()[i * c + j] = gv.data()[j] * (row[j] - mean) * inv + bv.data()[j];
            }
        }
        self.push(
            "layer_norm",
            Op::LayerNorm { x, gamma, beta, eps },
            out,
            self.needs_grad(&[x, gamma, beta]),
        )
    }

    /// Depthwise same-padded 1-D convolution along the time axis.
    ///
    /// `x` is `l x c`, `kernel` is `s x c` with odd `s`, `bias` is `1 x c`;
    /// channel `ch` is convolved with kernel column `ch` only.
    pub fn conv1d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
        let (l, c) = xv.shape();
        let (s, kc) = kv.shape();
        if kc != c || bv.shape() != (1, c) {
            return Err(Error::shape(
                "conv1d",
                format!("input {:?}, kernel {:?}, bias {:?}", xv.shape(), kv.shape(), bv.shape()),
            ));
        }
        if s % 2 == 0 {
            return Err(Error::shape("conv1d", format!("kernel length {} must be odd", s)));
        }
        let pad = (s - 1) / 2;
        let mut out = Tensor::zeros(l, c);
        for ch in 0..c {
            for t in 0..l {
                let mut acc = bv.data()[ch];
                for tau in 0..s {
                    let src = t as isize + tau as isize - pad as isize;
                    if src >= 0 && (src as usize) < l {
                        acc += kv.at(tau, ch) * xv.at(src as usize, ch);
                    }
                }
                out.set(t, ch, acc);
            }
        }
        self.push("conv1d", Op::Conv1d { x, kernel, bias }, out, self.needs_grad(&[x, kernel, bias]))
    }

    /// Inverted dropout: keeps each element with probability `1-rate` and
    /// rescales kept elements by `1/(1-rate)`. Identity when not training or
    /// when `rate == 0`.
    pub fn dropout(&mut self, x: NodeId, rate: f64, training: bool, rng: &mut Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", rate)));
        }
        if !training || rate == 0.0 {
            let out = self.value(x).clone();
            let n = out.numel();
            return self.push("dropout", Op::Dropout { x, mask: vec![1.0; n] }, out, self.needs_grad(&[x]));
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let v = self.value(x);
        let data: Vec<f64> = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(v.rows(), v.cols(), data)?;
        self.push("dropout", Op::Dropout { x, mask }, out, self.needs_grad(&[x]))
    }

    // ---- shape ----

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::shape("concat_rows", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let mut data = Vec::with_capacity(av.numel() + bv.numel());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let out = Tensor::new(av.rows() + bv.rows(), av.cols(), data)?;
        self.push("concat_rows", Op::ConcatRows(a, b), out, self.needs_grad(&[a, b]))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::shape("concat_cols", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let (r, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut out = Tensor::zeros(r, ca + cb);
        for i in 0..r {
            for j in 0..ca {
                out.set(i, j, av.at(i, j));
            }
            for j in 0..cb {
                out.set(i, ca + j, bv.at(i, j));
            }
        }
        self.push("concat_cols", Op::ConcatCols(a, b), out, self.needs_grad(&[a, b]))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(x);
        if start > end || end > v.rows() {
            return Err(Error::shape("slice_rows", format!("[{start}, {end}) of {:?}", v.shape())));
        }
        let c = v.cols();
        let data = v.data()[start * c..end * c].to_vec();
        let out = Tensor::new(end - start, c, data)?;
        self.push("slice_rows", Op::SliceRows { x, start }, out, self.needs_grad(&[x]))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(x);
        if start > end || end > v.cols() {
            return Err(Error::shape("slice_cols", format!("[{start}, {end}) of {:?}", v.shape())));
        }
        let (r, w) = (v.rows(), end - start);
        let mut out = Tensor::zeros(r, w);
        for i in 0..r {
            for j in 0..w {
                out.set(i, j, v.at(i, start + j));
            }
        }
        self.push("slice_cols", Op::SliceCols { x, start }, out, self.needs_grad(&[x]))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push("sum_all", Op::SumAll(a), Tensor::scalar(s), self.needs_grad(&[a]))
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let s: f64 = v.data().iter().sum();
        let out = Tensor::scalar(s / v.numel() as f64);
        self.push("mean_all", Op::MeanAll(a), out, self.needs_grad(&[a]))
    }

    /// Column sums as a `1 x c` row.
    pub fn col_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let (r, c) = v.shape();
        let mut out = Tensor::zeros(1, c);
        for i in 0..r {
            for j in 0..c {
                out.data_mut()[j] += v.at(i, j);
            }
        }
        self.push("col_sum", Op::ColSum(a), out, self.needs_grad(&[a]))
    }

    /// Column means as a `1 x c` row.
    pub fn col_mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let (r, c) = v.shape();
        let mut out = Tensor::zeros(1, c);
        for i in 0..r {
            for j in 0..c {
                out.data_mut()[j] += v.at(i, j);
            }
        }
        for j in 0..c {
            out.data_mut()[j] /= r as f64;
        }
        self.push("col_mean", Op::ColMean(a), out, self.needs_grad(&[a]))
    }

    // ---- row broadcasting ----

    pub fn add_row(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        self.row_vec_shape("add_row", m, v)?;
        let out = zip_row(self.value(m), self.value(v), |x, y| x + y);
        self.push("add_row", Op::AddRow(m, v), out, self.needs_grad(&[m, v]))
    }

    pub fn sub_row(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        self.row_vec_shape("sub_row", m, v)?;
        let out = zip_row(self.value(m), self.value(v), |x, y| x - y);
        self.push("sub_row", Op::SubRow(m, v), out, self.needs_grad(&[m, v]))
    }

    pub fn mul_row(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        self.row_vec_shape("mul_row", m, v)?;
        let out = zip_row(self.value(m), self.value(v), |x, y| x * y);
        self.push("mul_row", Op::MulRow(m, v), out, self.needs_grad(&[m, v]))
    }

    pub fn div_row(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        self.row_vec_shape("div_row", m, v)?;
        let out = zip_row(self.value(m), self.value(v), |x, y| x / y);
        self.push("div_row", Op::DivRow(m, v), out, self.needs_grad(&[m, v]))
    }

    // ---- backward ----

    /// Backward from a `1 x 1` output, seeding with 1.
    pub fn backward(&mut self, output: NodeId) -> Result<()> {
        if self.value(output).shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("implicit seed needs a 1x1 output, got {:?}", self.value(output).shape()),
            ));
        }
        self.backward_seeded(output, Tensor::scalar(1.0))
    }

    /// Backward with an explicit seed of the output's shape.
    pub fn backward_seeded(&mut self, output: NodeId, seed: Tensor) -> Result<()> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), self.value(output).shape()),
            ));
        }
        self.accum(output, seed.data());
        for id in (0..=output).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[id].grad.clone() else { continue };
            self.propagate(id, &g);
        }
        Ok(())
    }

    fn accum(&mut self, id: NodeId, contrib: &[f64]) {
        let node = &mut self.nodes[id];
        if !node.requires_grad {
            return;
        }
        let grad = node.grad.get_or_insert_with(|| vec![0.0; node.value.numel()]);
        for (g, c) in grad.iter_mut().zip(contrib) {
            *g += c;
        }
    }

    fn propagate(&mut self, id: NodeId, g: &[f64]) {
        match self.nodes[id].op.clone() {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(a, g);
                self.accum(b, g);
            }
            Op::Sub(a, b) => {
                self.accum(a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accum(b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(self.value(b).data()).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = g.iter().zip(self.value(a).data()).map(|(g, x)| g * x).collect();
                self.accum(a, &da);
                self.accum(b, &db);
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let da: Vec<f64> = g.iter().zip(bv).map(|(g, y)| g / y).collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                self.accum(a, &da);
                self.accum(b, &db);
            }
            Op::AddScalar(a) => self.accum(a, g),
            Op::MulScalar(a, c) => {
                let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accum(a, &da);
            }
            Op::Scale(a, s) => {
                let f = self.value(s).data()[0];
                let da: Vec<f64> = g.iter().map(|v| v * f).collect();
                let ds: f64 = g.iter().zip(self.value(a).data()).map(|(g, x)| g * x).sum();
                self.accum(a, &da);
                self.accum(s, &[ds]);
            }
            Op::Exp(a) => {
                let da: Vec<f64> = g.iter().zip(self.nodes[id].value.data()).map(|(g, y)| g * y).collect();
                self.accum(a, &da);
            }
            Op::Log(a) => {
                let da: Vec<f64> = g.iter().zip(self.value(a).data()).map(|(g, x)| g / x).collect();
                self.accum(a, &da);
            }
            Op::Sqrt(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[id].value.data())
                    .map(|(g, y)| if *y == 0.0 { 0.0 } else { g / (2.0 * y) })
                    .collect();
                self.accum(a, &da);
            }
            Op::Gelu(a) => {
                let da: Vec<f64> = g.iter().zip(self.value(a).data()).map(|(g, x)| g * gelu_prime(*x)).collect();
                self.accum(a, &da);
            }
            Op::Relu(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accum(a, &da);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let gt = Tensor::new(self.nodes[id].value.rows(), self.nodes[id].value.cols(), g.to_vec()).unwrap();
                let da = matmul(&gt, &transpose(bv));
                let db = matmul(&transpose(av), &gt);
                self.accum(a, da.data());
                self.accum(b, db.data());
            }
            Op::Transpose(a) => {
                let (r, c) = self.nodes[id].value.shape();
                let gt = Tensor::new(r, c, g.to_vec()).unwrap();
                self.accum(a, transpose(&gt).data());
            }
            Op::Softmax(a) => {
                let y = &self.nodes[id].value;
                let (r, c) = y.shape();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        da[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accum(a, &da);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (xv, gv) = (self.value(x), self.value(gamma));
                let (r, c) = xv.shape();
                let mut dx = vec![0.0; r * c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..r {
                    let row = &xv.data()[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let (mean, var) = mean_var(row);
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let gy: Vec<f64> = gr.iter().zip(gv.data()).map(|(g, gm)| g * gm).collect();
                    let mean_gy: f64 = gy.iter().sum::<f64>() / c as f64;
                    let mean_gy_xhat: f64 = gy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[i * c + j] = inv * (gy[j] - mean_gy - xhat[j] * mean_gy_xhat);
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                }
                self.accum(x, &dx);
                self.accum(gamma, &dgamma);
                self.accum(beta, &dbeta);
            }
            Op::Conv1d { x, kernel, bias } => {
                let (xv, kv) = (self.value(x), self.value(kernel));
                let (l, c) = xv.shape();
                let s = kv.rows();
                let pad = (s - 1) / 2;
                let mut dx = vec![0.0; l * c];
                let mut dk = vec![0.0; s * c];
                let mut db = vec![0.0; c];
                for ch in 0..c {
                    for t in 0..l {
                        let gt = g[t * c + ch];
                        db[ch] += gt;
                        for tau in 0..s {
                            let src = t as isize + tau as isize - pad as isize;
                            if src >= 0 && (src as usize) < l {
                                dx[src as usize * c + ch] += kv.at(tau, ch) * gt;
                                dk[tau * c + ch] += xv.at(src as usize, ch) * gt;
                            }
                        }
                    }
                }
                self.accum(x, &dx);
                self.accum(kernel, &dk);
                self.accum(bias, &db);
            }
            Op::Dropout { x, mask } => {
                let da: Vec<f64> = g.iter().zip(&mask).map(|(g, m)| g * m).collect();
                self.accum(x, &da);
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(a).numel();
                self.accum(a, &g[..na]);
                self.accum(b, &g[na..]);
            }
            Op::ConcatCols(a, b) => {
                let (r, ca) = self.value(a).shape();
                let cb = self.value(b).cols();
                let mut da = vec![0.0; r * ca];
                let mut db = vec![0.0; r * cb];
                for i in 0..r {
                    for j in 0..ca {
                        da[i * ca + j] = g[i * (ca + cb) + j];
                    }
                    for j in 0..cb {
                        db[i * cb + j] = g[i * (ca + cb) + ca + j];
                    }
                }
                self.accum(a, &da);
                self.accum(b, &db);
            }
            Op::SliceRows { x, start } => {
                let (rx, c) = self.value(x).shape();
                let rows_out = self.nodes[id].value.rows();
                let mut dx = vec![0.0; rx * c];
                dx[start * c..(start + rows_out) * c].copy_from_slice(g);
                self.accum(x, &dx);
            }
            Op::SliceCols { x, start } => {
                let (r, cx) = self.value(x).shape();
                let cols_out = self.nodes[id].value.cols();
                let mut dx = vec![0.0; r * cx];
                for i in 0..r {
                    for j in 0..cols_out {
                        dx[i * cx + start + j] = g[i * cols_out + j];
                    }
                }
                self.accum(x, &dx);
            }
            Op::SumAll(a) => {
                let da = vec![g[0]; self.value(a).numel()];
                self.accum(a, &da);
            }
            Op::MeanAll(a) => {
                let n = self.value(a).numel();
                let da = vec![g[0] / n as f64; n];
                self.accum(a, &da);
            }
            Op::ColSum(a) => {
                let (r, c) = self.value(a).shape();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    da[i * c..(i + 1) * c].copy_from_slice(g);
                }
                self.accum(a, &da);
            }
            Op::ColMean(a) => {
                let (r, c) = self.value(a).shape();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j] / r as f64;
                    }
                }
                self.accum(a, &da);
            }
            Op::AddRow(m, v) => {
                self.accum(m, g);
                self.accum(v, &col_sums_of(g, self.value(m).shape()));
            }
            Op::SubRow(m, v) => {
                self.accum(m, g);
                let dv: Vec<f64> = col_sums_of(g, self.value(m).shape()).iter().map(|v| -v).collect();
                self.accum(v, &dv);
            }
            Op::MulRow(m, v) => {
                let (r, c) = self.value(m).shape();
                let (mv, vv) = (self.value(m).data(), self.value(v).data());
                let mut dm = vec![0.0; r * c];
                let mut dv = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        let gij = g[i * c + j];
                        dm[i * c + j] = gij * vv[j];
                        dv[j] += gij * mv[i * c + j];
                    }
                }
                self.accum(m, &dm);
                self.accum(v, &dv);
            }
            Op::DivRow(m, v) => {
                let (r, c) = self.value(m).shape();
                let (mv, vv) = (self.value(m).data(), self.value(v).data());
                let mut dm = vec![0.0; r * c];
                let mut dv = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        let gij = g[i * c + j];
                        dm[i * c + j] = gij / vv[j];
                        dv[j] += -gij * mv[i * c + j] / (vv[j] * vv[j]);
                    }
                }
                self.accum(m, &dm);
                self.accum(v, &dv);
            }
        }
    }
}

// ---- free-standing kernels ----

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&v| f(v)).collect();
    Tensor::new(t.rows(), t.cols(), data).unwrap()
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).unwrap()
}

fn zip_row(m: &Tensor, v: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (r, c) = m.shape();
    let mut out = Tensor::zeros(r, c);
    for i in 0..r {
        for j in 0..c {
            out.set(i, j, f(m.at(i, j), v.data()[j]));
        }
    }
    out
}

fn col_sums_of(g: &[f64], shape: (usize, usize)) -> Vec<f64> {
    let (r, c) = shape;
    let mut out = vec![0.0; c];
    for i in 0..r {
        for j in 0..c {
            out[j] += g[i * c + j];
        }
    }
    out
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = a.shape();
    let n = b.cols();
    let mut out = Tensor::zeros(m, n);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for i in 0..m {
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip != 0.0 {
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut od[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
    }
    out
}

pub(crate) fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = t.shape();
    let mut out = Tensor::zeros(c, r);
    for i in 0..r {
        for j in 0..c {
            out.set(j, i, t.at(i, j));
        }
    }
    out
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C0 * (x + GELU_C1 * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x)
}
