//! Central finite-difference verification of reverse-mode gradients.

use super::{Graph, NodeId, Tensor};
use crate::error::Result;
use crate::rng::{seed_rng, Rng};
use rand::Rng as _;

/// Outcome of checking one scalar function's gradients against central
/// finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub tolerance: f64,
    pub step: f64,
    /// Max relative error over all checked leaf entries.
    pub max_rel_err: f64,
    /// Leaf entry where the max was attained, as `name[index]`.
    pub worst: String,
    pub checked: usize,
    /// Entries flagged as sitting on a non-smooth point and excluded.
    pub skipped: Vec<String>,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: max rel err {:.3e} over {} entries (tol {:.1e}, {} skipped as non-smooth) -> {}",
            self.name,
            self.max_rel_err,
            self.checked,
            self.tolerance,
            self.skipped.len(),
            if self.pass() { "pass" } else { "FAIL" }
        )
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    if a.abs() <= 1e-6 && n.abs() <= 1e-6 {
        0.0
    } else {
        (a - n).abs() / a.abs().max(n.abs())
    }
}

/// Checks the gradient of a scalar-valued function of named tensor leaves.
///
/// `build` must construct the scalar output from leaves bound in the order of
/// `point`; it is re-invoked for every perturbed evaluation, so any internal
/// randomness must be re-seeded identically on each call.
pub fn check_scalar_fn(
    name: &str,
    point: &[(String, Tensor)],
    tolerance: f64,
    step: f64,
    build: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
) -> Result<GradCheckReport> {
    // Analytic gradients.
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = point.iter().map(|(_, t)| graph.param(t.clone())).collect();
    let out = build(&mut graph, &ids)?;
    graph.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(point)
        .map(|(&id, (_, t))| graph.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |tensors: &[(String, Tensor)]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|(_, t)| g.leaf(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        Ok(g.value(out).data()[0])
    };

    let mut work = point.to_vec();
    let f0 = eval(&work)?;
    let mut max_rel_err = 0.0f64;
    let mut worst = String::new();
    let mut checked = 0;
    let mut skipped = Vec::new();

    for li in 0..work.len() {
        for e in 0..work[li].1.numel() {
            let orig = work[li].1.data()[e];
            work[li].1.data_mut()[e] = orig + step;
            let fp = eval(&work)?;
            work[li].1.data_mut()[e] = orig - step;
            let fm = eval(&work)?;
            work[li].1.data_mut()[e] = orig;

            let label = format!("{}[{}]", work[li].0, e);
            let d_plus = (fp - f0) / step;
            let d_minus = (f0 - fm) / step;
            if (d_plus - d_minus).abs() > 1e-2 * (d_plus.abs() + d_minus.abs()) + 1e-7 {
                skipped.push(format!("{label}: skipped: non-smooth point"));
                continue;
            }
            let numeric = (fp - fm) / (2.0 * step);
            let err = rel_err(analytic[li][e], numeric);
            checked += 1;
            if err > max_rel_err {
                max_rel_err = err;
                worst = label;
            }
        }
    }

    Ok(GradCheckReport {
        name: name.to_string(),
        tolerance,
        step,
        max_rel_err,
        worst,
        checked,
        skipped,
    })
}

/// Names of the primitive ops with registered gradient checks.
pub fn named_ops() -> Vec<&'static str> {
    vec![
        "add", "sub", "mul", "div", "add_row", "sub_row", "mul_row", "div_row", "scale", "exp", "log", "sqrt",
        "gelu", "relu", "matmul", "transpose", "softmax", "layer_norm", "conv1d", "dropout", "concat_rows",
        "concat_cols", "slice_rows", "slice_cols", "sum_all", "mean_all", "col_sum", "col_mean",
    ]
}

fn rand_tensor(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

fn positive_tensor(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(0.3..2.0)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

/// Finite-difference check of one registered primitive at a seeded random point.
pub fn check_named_op(op: &str, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let mut rng = seed_rng(seed);
    let step = 1e-5;
    let sum_of = |g: &mut Graph, id: NodeId| g.sum_all(id);

    match op {
        "add" | "sub" | "mul" | "div" => {
            let a = rand_tensor(4, 3, &mut rng);
            let b = if op == "div" { positive_tensor(4, 3, &mut rng) } else { rand_tensor(4, 3, &mut rng) };
            let point = vec![("a".into(), a), ("b".into(), b)];
            let op_name = op.to_string();
            check_scalar_fn(op, &point, tolerance, step, move |g, ids| {
                let y = match op_name.as_str() {
                    "add" => g.add(ids[0], ids[1])?,
                    "sub" => g.sub(ids[0], ids[1])?,
                    "mul" => g.mul(ids[0], ids[1])?,
                    _ => g.div(ids[0], ids[1])?,
                };
                // Square keeps the reduction sensitive to every entry.
                let y2 = g.mul(y, y)?;
                sum_of(g, y2)
            })
        }
        "add_row" | "sub_row" | "mul_row" | "div_row" => {
            let m = rand_tensor(5, 4, &mut rng);
            let v = if op == "div_row" { positive_tensor(1, 4, &mut rng) } else { rand_tensor(1, 4, &mut rng) };
            let point = vec![("m".into(), m), ("v".into(), v)];
            let op_name = op.to_string();
            check_scalar_fn(op, &point, tolerance, step, move |g, ids| {
                let y = match op_name.as_str() {
                    "add_row" => g.add_row(ids[0], ids[1])?,
                    "sub_row" => g.sub_row(ids[0], ids[1])?,
                    "mul_row" => g.mul_row(ids[0], ids[1])?,
                    _ => g.div_row(ids[0], ids[1])?,
                };
                let y2 = g.mul(y, y)?;
                sum_of(g, y2)
            })
        }
        "scale" => {
            let point = vec![
                ("a".into(), rand_tensor(3, 3, &mut rng)),
                ("s".into(), rand_tensor(1, 1, &mut rng)),
            ];
            check_scalar_fn(op, &point, tolerance, step, move |g, ids| {
                let y = g.scale(ids[0], ids[1])?;
                let y2 = g.mul(y, y)?;
                sum_of(g, y2)
            })
        }
        "exp" | "gelu" | "relu" => {
            let point = vec![("a".into(), rand_tensor(4, 3, &mut rng))];
            let op_name = op.to_string();
            check_scalar_fn(op, &point, tolerance, step, move |g, ids| {
                let y = match op_name.as_str() {
                    "exp" => g.exp(ids[0])?,
                    "gelu" => g.gelu(ids[0])?,
                    _ => g.relu(ids[0])?,
                };
                let y2 = g.mul(y, y)?;
                sum_of(g, y2)
            })
        }
        "log" | "sqrt" => {
            let point = vec![("a".into(), positive_tensor(4, 3, &mut rng))];
            let op_name = op.to_string();
            check_scalar_fn(op, &point, tolerance, step, move |g, ids| {
                let y = if op_name == "log" { g.log(ids[0])? } else { g.sqrt(ids[0])? };
                let y2 = g.mul(y, y)?;
                sum_of(g, y2)
            })
        }
        "matmul" => {
            let point = vec![
                ("a".into(), rand_tensor(3, 4, &mut rng)),
                ("b".into(), rand_tensor(4, 2, &mut rng)),
            ];
            check_scalar_fn(op, &point, tolerance, step, move |g, ids| {
                let y = g.matmul(ids[0], ids[1])?;
                let y2 = g.mul(y, y)?;
                sum_of(g, y2)
            })
        }
        "transpose" => {
            let point = vec![("a".into(), rand_tensor(3, 5, &mut rng))];
            check_scalar_fn(op, &point, tolerance, step, move |g, ids| {
                let t = g.transpose(ids[0])?;
                let y2 = g.mul(t, t)?;
                sum_of(g, y2)
            })
        }
        "softmax" => {
            let w = rand_tensor(1, 8, &mut rng);
            let point = vec![("a".into(), rand_tensor(1, 8, &mut rng))];
            check_scalar_fn(op, &point, tolerance, step, move |g, ids| {
                let y = g.softmax(ids[0])?;
                let wn = g.leaf(w.clone());
                let yw = g.mul(y, wn)?;
                sum_of(g, yw)
            })
        }
        "layer_norm" => {
            let point = vec![
                ("x".into(), rand_tensor(4, 3, &mut rng)),
                ("gamma".into(), positive_tensor(1, 3, &mut rng)),
                ("beta".into(), rand_tensor(1, 3, &mut rng)),
            ];
            let w = rand_tensor(4, 3, &mut rng);
            check_scalar_fn(op, &point, tolerance, step, move |g, ids| {
                let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                let wn = g.leaf(w.clone());
                let yw = g.mul(y, wn)?;
                sum_of(g, yw)
            })
        }
        "conv1d" => {
            let point = vec![
                ("x".into(), rand_tensor(5, 2, &mut rng)),
                ("k".into(), rand_tensor(3, 2, &mut rng)),
                ("b".into(), rand_tensor(1, 2, &mut rng)),
            ];
            check_scalar_fn(op, &point, tolerance, step, move |g, ids| {
                let y = g.conv1d(ids[0], ids[1], ids[2])?;
                let y2 = g.mul(y, y)?;
                sum_of(g, y2)
            })
        }
        "dropout" => {
            let point = vec![("a".into(), rand_tensor(6, 4, &mut rng))];
            check_scalar_fn(op, &point, tolerance, step, move |g, ids| {
                // Re-seeded on every call so the mask stays fixed across perturbations.
                let mut mask_rng = seed_rng(99);
                let y = g.dropout(ids[0], 0.5, true, &mut mask_rng)?;
                let y2 = g.mul(y, y)?;
                sum_of(g, y2)
            })
        }
        "concat_rows" | "concat_cols" => {
            let point = vec![
                ("a".into(), rand_tensor(3, 3, &mut rng)),
                ("b".into(), rand_tensor(3, 3, &mut rng)),
            ];
            let op_name = op.to_string();
            check_scalar_fn(op, &point, tolerance, step, move |g, ids| {
                let y = if op_name == "concat_rows" {
                    g.concat_rows(ids[0], ids[1])?
                } else {
                    g.concat_cols(ids[0], ids[1])?
                };
                let y2 = g.mul(y, y)?;
                sum_of(g, y2)
            })
        }
        "slice_rows" | "slice_cols" => {
            let point = vec![("a".into(), rand_tensor(5, 5, &mut rng))];
            let op_name = op.to_string();
            check_scalar_fn(op, &point, tolerance, step, move |g, ids| {
                let y = if op_name == "slice_rows" {
                    g.slice_rows(ids[0], 1, 4)?
                } else {
                    g.slice_cols(ids[0], 1, 4)?
                };
                let y2 = g.mul(y, y)?;
                sum_of(g, y2)
            })
        }
        "sum_all" | "mean_all" => {
            let point = vec![("a".into(), rand_tensor(4, 4, &mut rng))];
            let op_name = op.to_string();
            check_scalar_fn(op, &point, tolerance, step, move |g, ids| {
                let y2 = g.mul(ids[0], ids[0])?;
                if op_name == "sum_all" {
                    g.sum_all(y2)
                } else {
                    g.mean_all(y2)
                }
            })
        }
        "col_sum" | "col_mean" => {
            let point = vec![("a".into(), rand_tensor(5, 3, &mut rng))];
            let op_name = op.to_string();
            check_scalar_fn(op, &point, tolerance, step, move |g, ids| {
                let y2 = g.mul(ids[0], ids[0])?;
                let y = if op_name == "col_sum" { g.col_sum(y2)? } else { g.col_mean(y2)? };
                let y3 = g.mul(y, y)?;
                sum_of(g, y3)
            })
        }
        other => Err(crate::error::Error::Config(format!("no gradient check registered for op `{other}`"))),
    }
}
