use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to one parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    tensor: Tensor<T>,
    trainable: bool,
}

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), by_name: BTreeMap::new() }
    }

    /// Registers a parameter. Panics on duplicate names (a model-construction bug).
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry { name, tensor, trainable: true });
        ParamId(id)
    }

    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) -> ParamId {
        let normal = Normal::new(0.0, std).expect("valid std");
        let t = Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(normal.sample(rng)));
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape.to_vec(), T::one()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Marks every parameter whose name starts with `prefix`; returns how many matched.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.trainable = trainable;
            n += 1;
        }
        n
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), tensor: e.tensor.cast(), trainable: e.trainable })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Copies every parameter named `<prefix>*` from `src` into `self`, checking shapes.
    pub fn load_prefix(&mut self, src: &ParamStore<T>, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for e in src.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            let id = self.id(&e.name).ok_or_else(|| {
                Error::CheckpointMismatch(format!("unexpected parameter {}", e.name))
            })?;
            let dst = self.get_mut(id);
            if dst.shape() != e.tensor.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "{}: expected shape {:?}, found {:?}",
                    e.name,
                    dst.shape(),
                    e.tensor.shape()
                )));
            }
            *dst = e.tensor.clone();
            n += 1;
        }
        let expected = self.entries.iter().filter(|e| e.name.starts_with(prefix)).count();
        if n != expected {
            return Err(Error::CheckpointMismatch(format!(
                "prefix {prefix}: checkpoint has {n} of {expected} parameters"
            )));
        }
        Ok(n)
    }

    /// SHA-256 over names, shapes and raw little-endian values of `<prefix>*` parameters.
    pub fn hash_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            h.update(e.name.as_bytes());
            for &s in e.tensor.shape() {
                h.update((s as u64).to_le_bytes());
            }
            buf.clear();
            for &x in e.tensor.data() {
                x.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn prefix_operations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = ParamStore::<f32>::new();
        a.add_normal("encoder.w", &[2, 3], 1.0, &mut rng);
        a.add_zeros("decoder.b", &[3]);
        assert_eq!(a.set_trainable_prefix("encoder.", false), 1);
        assert!(!a.is_trainable(a.id("encoder.w").unwrap()));

        let mut b = ParamStore::<f32>::new();
        b.add_zeros("encoder.w", &[2, 3]);
        b.add_zeros("decoder.b", &[3]);
        assert_ne!(a.hash_prefix("encoder."), b.hash_prefix("encoder."));
        b.load_prefix(&a, "encoder.").unwrap();
        assert_eq!(a.hash_prefix("encoder."), b.hash_prefix("encoder."));

        let mut c = ParamStore::<f32>::new();
        c.add_zeros("encoder.w", &[3, 2]);
        assert!(matches!(c.load_prefix(&a, "encoder."), Err(Error::CheckpointMismatch(_))));
    }
}
