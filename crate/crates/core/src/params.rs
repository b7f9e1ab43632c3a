//! Named parameter registries.

use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedParam<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Whether decoupled weight decay applies (false for biases and norms).
    pub decay: bool,
}

/// Ordered registry of a model's parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<NamedParam<T>>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { params: Vec::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(NamedParam { name, tensor, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedParam<T>> {
        self.params.iter()
    }

    pub fn param(&self, id: ParamId) -> &NamedParam<T> {
        &self.params[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn total_elements(&self) -> u64 {
        self.params.iter().map(|p| p.tensor.len() as u64).sum()
    }

    /// Records every parameter on `tape`; those for which `trainable(name)`
    /// holds become gradient-carrying leaves, the rest constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: impl Fn(&str) -> bool) -> BoundParams<'t, T> {
        let mut vars = Vec::with_capacity(self.params.len());
        let mut flags = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let t = trainable(&p.name);
            vars.push(tape.leaf(p.tensor.clone(), t));
            flags.push(t);
        }
        BoundParams {
            vars,
            trainable: flags,
        }
    }

    /// Stores gradients for every trainable bound parameter (zeros when the
    /// loss did not reach it) and clears them for the rest.
    pub fn absorb_grads(&mut self, bound: &BoundParams<'_, T>, grads: &Gradients<T>) -> Result<()> {
        if bound.vars.len() != self.params.len() {
            return Err(Error::contract("bound parameters belong to a different registry"));
        }
        for (i, p) in self.params.iter_mut().enumerate() {
            if bound.trainable[i] {
                p.tensor.set_grad(grads.wrt(bound.vars[i]).into_data())?;
            } else {
                p.tensor.clear_grad();
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.clear_grad();
        }
    }

    /// SHA-256 over a parameter's shape and little-endian element bits.
    pub fn checksum(&self, id: ParamId) -> String {
        let t = &self.params[id.0].tensor;
        let mut h = Sha256::new();
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for x in t.data() {
            h.update(x.as_f64().to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checksums of all parameters, in registry order.
    pub fn checksums(&self) -> Vec<(String, String)> {
        self.ids()
            .map(|id| (self.name(id).to_string(), self.checksum(id)))
            .collect()
    }
}

/// A registry's parameters recorded on one tape.
pub struct BoundParams<'t, T> {
    vars: Vec<Var<'t, T>>,
    trainable: Vec<bool>,
}

impl<'t, T: Scalar> BoundParams<'t, T> {
    pub fn get(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_and_absorb() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_vec(vec![1.0, 2.0]), true);
        let b = store.add("b", Tensor::from_vec(vec![0.5]), false);
        let frozen = store.add("frozen", Tensor::from_vec(vec![3.0]), true);
        let tape = Tape::new();
        let bound = store.bind(&tape, |n| n != "frozen");
        let loss = bound.get(w).square().sum().add(bound.get(frozen).sum());
        let grads = tape.backward(loss).unwrap();
        store.absorb_grads(&bound, &grads).unwrap();
        assert_eq!(store.get(w).grad().unwrap(), &[2.0, 4.0]);
        assert_eq!(store.get(b).grad().unwrap(), &[0.0]);
        assert!(store.get(frozen).grad().is_none());
    }

    #[test]
    fn checksum_tracks_contents() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::from_vec(vec![1.0, 2.0]), true);
        let before = store.checksum(id);
        store.get_mut(id).data_mut()[0] = 1.5;
        assert_ne!(before, store.checksum(id));
    }
}
