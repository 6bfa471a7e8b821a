use std::collections::HashMap;

use super::{AutodiffError, Gradients, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A named tensor with its gradient buffer.
#[derive(Clone, Debug)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Vec<S>,
    /// Buffers such as batch-norm running statistics are stored alongside the
    /// weights but never receive gradients.
    pub trainable: bool,
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: Vec<Parameter<S>>,
    index: HashMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId, AutodiffError> {
        self.insert_with(name.into(), value, true)
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId, AutodiffError> {
        self.insert_with(name.into(), value, false)
    }

    fn insert_with(&mut self, name: String, value: Tensor<S>, trainable: bool) -> Result<ParamId, AutodiffError> {
        if self.index.contains_key(&name) {
            return Err(AutodiffError::DuplicateParam(name));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            grad: vec![S::zero(); value.numel()],
            name,
            value,
            trainable,
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId, AutodiffError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<S>, AutodiffError> {
        Ok(&self.params[self.id(name)?.0].value)
    }

    /// Replaces the value of an existing parameter; shapes must agree.
    pub fn set_value(&mut self, name: &str, value: Tensor<S>) -> Result<(), AutodiffError> {
        let id = self.id(name)?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(AutodiffError::Shape {
                op: "set_value",
                detail: format!("{name}: {:?} vs {:?}", p.value.shape(), value.shape()),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values in trainable parameters.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = S::zero());
        }
    }

    /// Overwrites every gradient buffer from a backward pass. Parameters the
    /// loss did not reach end up with a zero gradient.
    pub fn load_grads(&mut self, grads: &Gradients<S>) {
        for (i, p) in self.params.iter_mut().enumerate() {
            match grads.param(ParamId(i)) {
                Some(g) if p.trainable => p.grad.copy_from_slice(g),
                _ => p.grad.iter_mut().for_each(|g| *g = S::zero()),
            }
        }
    }

    /// Drops every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        let kept: Vec<_> = self
            .params
            .drain(..)
            .filter(|p| !p.name.starts_with(prefix))
            .collect();
        self.index.clear();
        for (i, p) in kept.iter().enumerate() {
            self.index.insert(p.name.clone(), ParamId(i));
        }
        self.params = kept;
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.insert_with(p.name.clone(), p.value.cast(), p.trainable)
                .expect("names are unique in the source store");
        }
        out
    }
}
