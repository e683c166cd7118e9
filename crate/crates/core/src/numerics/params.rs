use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::{Gradients, NumericsError, Tape, Tensor, Var};

/// Named parameter tensors in a stable (lexicographic) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NumericsError> {
        self.tensors
            .get(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, NumericsError> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of values.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Binds parameters onto `tape` lazily. Parameters whose name starts
    /// with one of `frozen` enter the tape as constants.
    pub fn bind<'p>(&'p self, frozen: &[&str]) -> Bound<'p> {
        Bound {
            store: self,
            vars: BTreeMap::new(),
            frozen: frozen.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Parameters of a [`ParamStore`] placed on one tape.
#[derive(Debug)]
pub struct Bound<'p> {
    store: &'p ParamStore,
    vars: BTreeMap<&'p str, Var>,
    frozen: Vec<String>,
}

impl<'p> Bound<'p> {
    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn get(&mut self, tape: &mut Tape, name: &str) -> Result<Var, NumericsError> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let (key, t) = self
            .store
            .tensors
            .get_key_value(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))?;
        let trainable = !self.is_frozen(name);
        let v = tape.leaf(&t.clone().with_requires_grad(trainable));
        self.vars.insert(key.as_str(), v);
        Ok(v)
    }

    /// Names of parameters touched by the forward pass so far.
    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().copied()
    }

    /// Gradients for every bound trainable parameter; parameters the root
    /// does not reach get zeros.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .filter(|(name, _)| !self.is_frozen(name))
            .map(|(name, &v)| {
                let n = self.store.tensors[*name].numel();
                (name.to_string(), grads.get_or_zeros(v, n))
            })
            .collect()
    }
}
