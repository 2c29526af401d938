use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;

use super::{Gradients, Tensor, Var};
use crate::rng::Rng;
use crate::{Error, Result};

/// Named, shaped parameters. Iteration order is the lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

static NEXT_BINDING: AtomicU64 = AtomicU64::new(1);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Missing(format!("parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Missing(format!("parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Parameters whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.entries.extend(other.entries);
    }

    /// Wraps every parameter in a graph leaf. One binding is shared by every
    /// consumer of a forward pass so that gradients accumulate per parameter.
    pub fn bind(&self, trainable: bool) -> BoundParams {
        let make = if trainable { Var::leaf } else { Var::constant };
        BoundParams {
            id: NEXT_BINDING.fetch_add(1, Ordering::Relaxed),
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), make(v.clone())))
                .collect(),
        }
    }
}

/// Graph leaves for a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    id: u64,
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Unique per call to [`ParamStore::bind`].
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Missing(format!("parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Per-parameter gradients, zero for parameters the output did not use.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), grads.get_or_zero(v)))
            .collect()
    }
}

/// Fan-in scaled uniform initialisation: weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
/// zero biases.
pub struct Initializer<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
}

impl Initializer<'_> {
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| self.rng.random_range(-bound..bound));
        self.store.insert(name, t);
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) {
        self.store.insert(name, Tensor::full(shape, value));
    }

    /// `name.weight` `[cout, k, k, cin/groups]` and `name.bias` `[cout]`.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, groups: usize) {
        let cpg = cin / groups;
        self.uniform(&format!("{name}.weight"), &[cout, k, k, cpg], k * k * cpg);
        self.constant(&format!("{name}.bias"), &[cout], 0.0);
    }

    /// `name.weight` `[cin, k, k, cout]` and `name.bias` `[cout]`.
    pub fn conv_transpose(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.uniform(&format!("{name}.weight"), &[cin, k, k, cout], cin * k * k);
        self.constant(&format!("{name}.bias"), &[cout], 0.0);
    }

    /// `name.weight` `[out, in]` and `name.bias` `[out]`.
    pub fn linear(&mut self, name: &str, cin: usize, cout: usize) {
        self.uniform(&format!("{name}.weight"), &[cout, cin], cin);
        self.constant(&format!("{name}.bias"), &[cout], 0.0);
    }

    pub fn layer_norm(&mut self, name: &str, c: usize) {
        self.constant(&format!("{name}.gamma"), &[c], 1.0);
        self.constant(&format!("{name}.beta"), &[c], 0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn bind_shares_one_leaf_per_name() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::scalar(2.0));
        let bound = store.bind(true);
        let x = bound.get("a").unwrap();
        let y = bound.get("a").unwrap();
        assert!(x.ptr_eq(y));
        assert!(store.bind(true).id() != bound.id());
    }

    #[test]
    fn initializer_is_deterministic() {
        let build = || {
            let mut store = ParamStore::new();
            let mut rng = stream(9, Stream::Params);
            let mut init = Initializer { store: &mut store, rng: &mut rng };
            init.conv("c", 4, 6, 3, 1);
            store
        };
        let a = build();
        assert_eq!(a, build());
        let w = a.get("c.weight").unwrap();
        assert_eq!(w.shape(), &[6, 3, 3, 4]);
        assert!(w.max_abs() <= 1.0 / 6.0);
        assert_eq!(a.get("c.bias").unwrap().max_abs(), 0.0);
    }

    #[test]
    fn missing_parameter_is_reported() {
        assert!(matches!(ParamStore::new().get("nope"), Err(Error::Missing(_))));
    }
}
