use super::tape::{ParamId, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named learnable tensors. A tensor's [`ParamId`] is `base + position`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    base: usize,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new(base: usize) -> Self {
        ParamStore { base, ..Default::default() }
    }

    pub fn base(&self) -> usize {
        self.base
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> ParamId {
        if let Some(i) = self.names.iter().position(|n| n == name) {
            self.tensors[i] = t;
            return ParamId(self.base + i);
        }
        self.names.push(name.to_string());
        self.tensors.push(t);
        ParamId(self.base + self.tensors.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(|i| ParamId(self.base + i))
    }

    pub fn owns(&self, id: ParamId) -> bool {
        id.0 >= self.base && id.0 < self.base + self.tensors.len()
    }

    pub fn name_of(&self, id: ParamId) -> &str {
        &self.names[id.0 - self.base]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Schema(format!("missing parameter tensor {name}")))
    }

    pub fn by_id(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0 - self.base]
    }

    pub fn by_id_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0 - self.base]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        let base = self.base;
        self.names.iter().zip(&self.tensors).enumerate().map(move |(i, (n, t))| (ParamId(base + i), n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    /// Records `name` as a parameter leaf.
    pub fn bind(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        let id = self.id(name).ok_or_else(|| Error::Schema(format!("missing parameter tensor {name}")))?;
        Ok(tape.param(id, self.by_id(id)))
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}
