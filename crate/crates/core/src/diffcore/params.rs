use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Named tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = t,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, t));
            }
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::InvalidState(format!("no parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1),
            None => Err(Error::InvalidState(format!("no parameter `{name}`"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Appends every entry of `other`, replacing same-named ones.
    pub fn extend(&mut self, other: &ParamSet) {
        for (n, t) in other.iter() {
            self.insert(n, t.clone());
        }
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in &self.entries {
            h.update((n.len() as u64).to_le_bytes());
            h.update(n.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Records every tensor on the tape, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Bound { vars, index: self.index.clone() }
    }
}

/// A [`ParamSet`] recorded on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    /// Pairs names with leaves already on a tape.
    pub fn from_vars<S: Into<String>>(names: impl IntoIterator<Item = S>, vars: &[Var]) -> Result<Self> {
        let index: HashMap<String, usize> = names.into_iter().enumerate().map(|(i, n)| (n.into(), i)).collect();
        if index.len() != vars.len() {
            return Err(Error::InvalidArgument(format!("{} names for {} vars", index.len(), vars.len())));
        }
        Ok(Bound { vars: vars.to_vec(), index })
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::InvalidState(format!("no bound parameter `{name}`")))
    }

    /// Gradient of every bound tensor, in the set's order.
    pub fn grads(&self, g: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| g.get(v)).collect()
    }
}
