use std::collections::HashMap;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution kernels and biases.
    Weight,
    /// Normalization gamma/beta.
    NormAffine,
    /// Switchable-normalization mixture logits.
    Switch,
    /// Running statistics; never trained.
    Buffer,
}

impl ParamKind {
    pub fn learnable(self) -> bool {
        !matches!(self, ParamKind::Buffer)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::NormAffine => "affine",
            ParamKind::Switch => "switch",
            ParamKind::Buffer => "buffer",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "weight" => ParamKind::Weight,
            "affine" => ParamKind::NormAffine,
            "switch" => ParamKind::Switch,
            "buffer" => ParamKind::Buffer,
            other => return Err(Error::Format(format!("unknown parameter kind `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

/// Insertion-ordered named tensors of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, kind, tensor });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].tensor)
            .ok_or_else(|| Error::invalid(format!("no parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].tensor),
            None => Err(Error::invalid(format!("no parameter `{name}`"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Replace the tensor under an existing name, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "set parameter",
                lhs: slot.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        *slot = tensor;
        Ok(())
    }
}

/// Lazily records store entries on a tape during one forward pass, so that
/// gradients can be mapped back to parameter names afterwards.
pub struct Binder<'a> {
    store: &'a ParamStore,
    bound: HashMap<usize, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Binder {
            store,
            bound: HashMap::new(),
        }
    }

    /// Tape handle for a learnable entry.
    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        let &i = self
            .store
            .index
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no parameter `{name}`")))?;
        if let Some(&v) = self.bound.get(&i) {
            return Ok(v);
        }
        let v = g.param(self.store.entries[i].tensor.clone());
        self.bound.insert(i, v);
        Ok(v)
    }

    pub fn tensor(&self, name: &str) -> Result<&'a Tensor> {
        self.store.get(name)
    }

    pub fn finish(self) -> Bindings {
        let mut pairs: Vec<(usize, Var)> = self.bound.into_iter().collect();
        pairs.sort();
        Bindings { pairs }
    }
}

/// Mapping from store entries to the tape handles of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    pairs: Vec<(usize, Var)>,
}

impl Bindings {
    /// Gradient per store entry, in store order; `None` where the entry
    /// was unused or received no gradient.
    pub fn collect(&self, store: &ParamStore, grads: &Gradients) -> Vec<Option<Tensor>> {
        let mut out = vec![None; store.len()];
        for &(i, v) in &self.pairs {
            out[i] = grads.get(v).cloned();
        }
        out
    }
}
