//! Named parameter store shared by the model modules, the optimizer, and the
//! checkpoint format.

use crate::error::{Error, Result};
use crate::tensor::{check_scalar_fn, GradCheckReport, Graph, NodeId, Tensor};
use indexmap::IndexMap;
use std::collections::HashMap;

/// Ordered map of named trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct Params {
    map: IndexMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        let prev = self.map.insert(name.clone(), tensor);
        assert!(prev.is_none(), "duplicate parameter `{name}`");
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }
}

/// Node ids of all parameters bound into one graph.
pub struct Bindings {
    ids: HashMap<String, NodeId>,
}

impl Bindings {
    /// Bindings over an explicit name-to-node map (mixed trainable and
    /// constant leaves), used by the gradient suite.
    pub fn from_map(ids: HashMap<String, NodeId>) -> Self {
        Bindings { ids }
    }

    /// Binds every parameter as a trainable leaf of `graph`.
    pub fn bind(graph: &mut Graph, params: &Params) -> Self {
        let mut ids = HashMap::with_capacity(params.len());
        for (name, tensor) in params.iter() {
            ids.insert(name.to_string(), graph.param(tensor.clone()));
        }
        Bindings { ids }
    }

    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    /// Per-parameter gradients after a backward pass; parameters that did not
    /// influence the output get zeros.
    pub fn grads(&self, graph: &Graph, params: &Params) -> HashMap<String, Vec<f64>> {
        let mut out = HashMap::with_capacity(self.ids.len());
        for (name, &id) in &self.ids {
            let g = graph
                .grad(id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; params.get(name).numel()]);
            out.insert(name.clone(), g);
        }
        out
    }
}

/// Finite-difference check of a scalar function of a parameter set.
pub fn check_params_fn(
    name: &str,
    params: &Params,
    tolerance: f64,
    step: f64,
    build: impl Fn(&mut Graph, &Bindings) -> Result<NodeId>,
) -> Result<GradCheckReport> {
    let point: Vec<(String, Tensor)> = params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    check_scalar_fn(name, &point, tolerance, step, |graph, ids| {
        let bindings = Bindings {
            ids: point
                .iter()
                .enumerate()
                .map(|(i, (n, _))| (n.clone(), ids[i]))
                .collect(),
        };
        build(graph, &bindings)
    })
}

/// Applies a gradient-descent-free elementwise update, used by tests.
pub fn assign(params: &mut Params, name: &str, values: &[f64]) -> Result<()> {
    let t = params.get_mut(name);
    if t.numel() != values.len() {
        return Err(Error::Config(format!(
            "assign to `{name}`: expected {} values, got {}",
            t.numel(),
            values.len()
        )));
    }
    t.data_mut().copy_from_slice(values);
    Ok(())
}
