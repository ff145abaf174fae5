//! Named model parameters with freeze flags.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Index of a parameter inside its [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub frozen: bool,
}

/// Ordered, uniquely named parameter tensors plus the tag of the model that
/// owns them.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    kind: String,
    entries: IndexMap<String, Param>,
}

impl ParameterStore {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            entries: IndexMap::new(),
        }
    }

    /// Model-kind tag this store belongs to.
    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        let (idx, _) = self.entries.insert_full(
            name,
            Param {
                value,
                frozen: false,
            },
        );
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).expect("valid id").0
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.entries[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::contract(format!(
                "parameter shape {:?} cannot take value of shape {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    pub fn unfreeze_all(&mut self) {
        for p in self.entries.values_mut() {
            p.frozen = false;
        }
    }

    /// Freezes every parameter whose name starts with one of `prefixes`.
    pub fn freeze_prefixes(&mut self, prefixes: &[&str]) {
        for (name, p) in &mut self.entries {
            if prefixes.iter().any(|pre| name.starts_with(pre)) {
                p.frozen = true;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Param)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, p))| (ParamId(i), n.as_str(), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Records every parameter on `tape` as a borrowed leaf. Frozen
    /// parameters are recorded without gradient.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> Binding {
        self.bind_with(tape, |_, p| !p.frozen)
    }

    /// Records every parameter without gradient, for pure evaluation.
    pub fn bind_constant<'p>(&'p self, tape: &mut Tape<'p>) -> Binding {
        self.bind_with(tape, |_, _| false)
    }

    fn bind_with<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        wants_grad: impl Fn(&str, &Param) -> bool,
    ) -> Binding {
        let vars = self
            .entries
            .iter()
            .map(|(n, p)| tape.leaf_ref(&p.value, wants_grad(n, p)))
            .collect();
        Binding { vars }
    }

    /// True when `other` has the same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParameterStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, pa), (nb, pb))| na == nb && pa.value.shape() == pb.value.shape())
    }
}

/// Tape handles for each parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Wraps tape variables already laid out in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParameterStore::new("test");
        s.register("a", Tensor::zeros([2])).unwrap();
        assert!(s.register("a", Tensor::zeros([2])).is_err());
    }

    #[test]
    fn set_keeps_shape() {
        let mut s = ParameterStore::new("test");
        let id = s.register("a", Tensor::zeros([2])).unwrap();
        assert!(s.set(id, Tensor::zeros([3])).is_err());
        s.set(id, Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert_eq!(s.get(id).data(), &[1.0, 2.0]);
    }

    #[test]
    fn frozen_params_bind_without_grad() {
        let mut s = ParameterStore::new("test");
        let a = s.register("enc.w", Tensor::zeros([2])).unwrap();
        let b = s.register("dec.w", Tensor::zeros([2])).unwrap();
        s.freeze_prefixes(&["enc."]);
        let mut tape = Tape::new();
        let bind = s.bind(&mut tape);
        assert!(!tape.requires_grad(bind.var(a)));
        assert!(tape.requires_grad(bind.var(b)));
    }
}
