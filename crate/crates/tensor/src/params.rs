use std::collections::BTreeMap;

use crate::graph::{Graph, Tensor, Var};

/// Named parameter arrays, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
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

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    /// True when both sets have the same names with the same shapes.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.map.len() == other.map.len()
            && self
                .map
                .iter()
                .zip(&other.map)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        let map = self
            .map
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect();
        ParamSet { map }
    }

    /// Inserts every entry of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (k, v) in &other.map {
            self.map.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Registers every array in `graph`, trainable or as constants.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> Bound<'g> {
        let vars = self
            .map
            .iter()
            .map(|(k, v)| {
                let var = if trainable { graph.param(v.clone()) } else { graph.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { graph, vars }
    }
}

/// A [`ParamSet`] registered in a graph.
pub struct Bound<'g> {
    graph: &'g Graph,
    vars: BTreeMap<String, Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Panics on an unknown name: names come from the model definition.
    pub fn get(&self, name: &str) -> Var<'g> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'g>> {
        self.vars.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn vars(&self) -> Vec<Var<'g>> {
        self.vars.values().copied().collect()
    }

    /// Gradients of `loss` with respect to every bound parameter, by name.
    pub fn grads(&self, loss: Var<'g>) -> ParamSet {
        let names: Vec<&String> = self.vars.keys().collect();
        let vars: Vec<Var<'g>> = self.vars.values().copied().collect();
        let gs = self.graph.grad(loss, &vars);
        let map = names.into_iter().cloned().zip(gs).collect();
        ParamSet { map }
    }
}
