use std::collections::HashMap;

use super::{AutodiffError, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub trainable: bool,
}

/// Named parameters in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Matrix, trainable: bool) -> Result<ParamId, AutodiffError> {
        if self.by_name.contains_key(name) {
            return Err(AutodiffError::Parameter(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.params.len());
        let (r, c) = value.shape();
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: Matrix::zeros(r, c),
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Removes the most recently added parameters down to `len` entries.
    pub(crate) fn truncate(&mut self, len: usize) {
        for p in self.params.drain(len..) {
            self.by_name.remove(&p.name);
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.params.iter_mut().for_each(|p| p.trainable = trainable);
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Adds the gradients produced by a backward pass. Frozen parameters are skipped.
    pub fn accumulate(&mut self, grads: &ParamGrads) {
        for (id, g) in grads.iter() {
            let p = &mut self.params[id.0];
            if p.trainable {
                p.grad.add_assign(g);
            }
        }
    }

    /// Copies of every trainable value, in store order.
    pub fn snapshot_trainable(&self) -> Vec<(String, Matrix)> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    pub fn restore(&mut self, values: &[(String, Matrix)]) -> Result<(), AutodiffError> {
        for (name, value) in values {
            let id = self
                .id(name)
                .ok_or_else(|| AutodiffError::Parameter(format!("unknown parameter {name}")))?;
            let p = &mut self.params[id.0];
            if p.value.shape() != value.shape() {
                return Err(AutodiffError::Shape(format!(
                    "{name}: {:?} vs {:?}",
                    p.value.shape(),
                    value.shape()
                )));
            }
            p.value = value.clone();
        }
        Ok(())
    }
}

/// Gradients produced by one backward pass, indexed by parameter.
#[derive(Debug, Clone, Default)]
pub struct ParamGrads {
    grads: Vec<Option<Matrix>>,
}

impl ParamGrads {
    pub(crate) fn with_capacity(n: usize) -> Self {
        ParamGrads {
            grads: vec![None; n],
        }
    }

    pub(crate) fn add(&mut self, id: ParamId, g: &Matrix) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}
