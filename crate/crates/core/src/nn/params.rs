use std::collections::HashMap;

use crate::tensor::{Gradients, Graph, Prng, Result, Tensor, TensorError, Var};

/// Index of a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named learnable tensors. Insertion order is the
/// canonical traversal order for optimizers and checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name: parameter layouts are fixed by code.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        let idx = self.values.len();
        let previous = self.by_name.insert(name.clone(), idx);
        assert!(previous.is_none(), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(idx)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let current = &self.values[id.0];
        if current.shape() != value.shape() {
            return Err(TensorError::Dimension {
                op: "ParamSet::set",
                lhs: current.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Scalar weight count of every parameter whose name starts with one of
    /// `prefixes`.
    pub fn numel_with_prefix(&self, prefixes: &[&str]) -> usize {
        self.iter()
            .filter(|(_, n, _)| prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(_, _, v)| v.len())
            .sum()
    }
}

/// A [`Graph`] plus the lazily created leaf of every parameter it touches.
pub struct Session<'p> {
    pub graph: Graph,
    params: &'p ParamSet,
    bound: Vec<Option<Var>>,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self::with_graph(params, Graph::new())
    }

    /// Forward-only session: nothing requires gradients.
    pub fn inference(params: &'p ParamSet) -> Self {
        Self::with_graph(params, Graph::inference())
    }

    fn with_graph(params: &'p ParamSet, graph: Graph) -> Self {
        Self {
            graph,
            params,
            bound: vec![None; params.len()],
        }
    }

    /// Run `f` on a session whose graph is `graph` itself, so callers that
    /// own a bare [`Graph`] (e.g. gradient checks) can drive parameterised
    /// layers.
    pub fn scoped<R>(params: &'p ParamSet, graph: &mut Graph, f: impl FnOnce(&mut Session<'p>) -> R) -> R {
        let mut s = Self::with_graph(params, std::mem::take(graph));
        let out = f(&mut s);
        *graph = s.graph;
        out
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.param(self.params.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    /// Gradient of every parameter, in [`ParamSet`] order; parameters the
    /// loss never touched get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.params
            .iter()
            .zip(&self.bound)
            .map(|((_, _, value), bound)| {
                bound
                    .and_then(|v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(value.shape()))
            })
            .collect()
    }

    pub fn backward_params(&self, loss: Var) -> Result<Vec<Tensor>> {
        let grads = self.graph.backward(loss)?;
        Ok(self.param_grads(&grads))
    }
}

/// Builds a [`ParamSet`] with the standard initialisation rules.
pub struct Initializer<'a> {
    pub params: &'a mut ParamSet,
    pub prng: &'a mut Prng,
}

impl Initializer<'_> {
    /// Uniform in `±√(6 / (fan_in + fan_out))`.
    pub fn glorot(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = self.prng.uniform(-bound, bound, shape).expect("positive glorot bound");
        self.params.insert(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.params.insert(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.params.insert(name, Tensor::ones(shape))
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = self.prng.normal(0.0, std, shape).expect("positive std");
        self.params.insert(name, t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], lo: f64, hi: f64) -> ParamId {
        let t = self.prng.uniform(lo, hi, shape).expect("valid range");
        self.params.insert(name, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unused_params_get_zero_grads() {
        let mut set = ParamSet::new();
        let a = set.insert("a", Tensor::full(&[2], 3.0));
        let b = set.insert("b", Tensor::ones(&[3]));
        let mut s = Session::new(&set);
        let va = s.param(a);
        assert_eq!(s.param(a), va, "binding is cached");
        let loss = s.graph.sum(va).unwrap();
        let grads = s.backward_params(loss).unwrap();
        assert_eq!(grads[a.index()].data(), &[1.0, 1.0]);
        assert_eq!(grads[b.index()].data(), &[0.0; 3]);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_panic() {
        let mut set = ParamSet::new();
        set.insert("w", Tensor::ones(&[1]));
        set.insert("w", Tensor::ones(&[1]));
    }

    #[test]
    fn set_checks_shape() {
        let mut set = ParamSet::new();
        let a = set.insert("a", Tensor::ones(&[2]));
        assert!(set.set(a, Tensor::ones(&[3])).is_err());
        assert!(set.set(a, Tensor::zeros(&[2])).is_ok());
    }
}
