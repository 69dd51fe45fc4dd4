//! Named parameter store. Models keep their weights here between steps and
//! register them onto a fresh tape per step; the trainable flag decides
//! whether the tape will produce a gradient for a given tensor.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tape::{Elem, Owner, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ParamEntry<E> {
    pub tensor: Tensor<E>,
    pub trainable: bool,
    pub owner: Owner,
}

#[derive(Debug, Clone)]
pub struct ParamStore<E> {
    entries: BTreeMap<String, ParamEntry<E>>,
}

impl<E: Elem> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape handles for one registration of a store, keyed by parameter name.
pub type VarMap = BTreeMap<String, Var>;

impl<E: Elem> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<E>, trainable: bool, owner: Owner) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Wiring(format!("parameter `{name}` defined twice")));
        }
        self.entries.insert(name.to_string(), ParamEntry { tensor, trainable, owner });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<E>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Wiring(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry<E>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Wiring(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Result<ParamEntry<E>> {
        self.entries
            .remove(name)
            .ok_or_else(|| Error::Wiring(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<E>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry<E>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Freeze or unfreeze every parameter whose name satisfies `pred`.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool, trainable: bool) {
        for (name, entry) in self.entries.iter_mut() {
            if pred(name) {
                entry.trainable = trainable;
            }
        }
    }

    pub fn freeze_all(&mut self) {
        self.set_trainable_where(|_| true, false);
    }

    /// Register every parameter on `tape` under its owner scope.
    pub fn register_on(&self, tape: &mut Tape<E>) -> Result<VarMap> {
        self.register_inner(tape, false)
    }

    /// Register with every parameter marked frozen, regardless of flags.
    /// Evaluation passes use this so the tape retains nothing.
    pub fn register_frozen(&self, tape: &mut Tape<E>) -> Result<VarMap> {
        self.register_inner(tape, true)
    }

    fn register_inner(&self, tape: &mut Tape<E>, force_frozen: bool) -> Result<VarMap> {
        let mut vars = VarMap::new();
        let prev = tape.scope();
        for (name, entry) in &self.entries {
            tape.set_scope(entry.owner);
            let trainable = entry.trainable && !force_frozen;
            let v = tape.param(name, entry.tensor.data(), entry.tensor.shape(), trainable)?;
            vars.insert(name.clone(), v);
        }
        tape.set_scope(prev);
        Ok(vars)
    }

    pub fn total_params(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    pub fn trainable_params(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn trainable_fraction(&self) -> f64 {
        let total = self.total_params();
        if total == 0 {
            return 0.0;
        }
        self.trainable_params() as f64 / total as f64
    }

    /// Per-owner (total, trainable) element counts.
    pub fn census(&self) -> BTreeMap<Owner, (usize, usize)> {
        let mut out = BTreeMap::new();
        for entry in self.entries.values() {
            let slot = out.entry(entry.owner).or_insert((0, 0));
            slot.0 += entry.tensor.numel();
            if entry.trainable {
                slot.1 += entry.tensor.numel();
            }
        }
        out
    }

    /// Convert every tensor elementwise; flags and owners carry over.
    pub fn cast<T: Elem>(&self) -> ParamStore<T> {
        let entries = self
            .entries
            .iter()
            .map(|(name, e)| {
                let data: Vec<T> = e.tensor.data().iter().map(|&v| T::from_f64(v.to_f64())).collect();
                let tensor = Tensor::new(e.tensor.shape().to_vec(), data).expect("shape preserved");
                (
                    name.clone(),
                    ParamEntry { tensor, trainable: e.trainable, owner: e.owner },
                )
            })
            .collect();
        ParamStore { entries }
    }
}
