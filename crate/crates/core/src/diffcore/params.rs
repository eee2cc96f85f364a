use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::graph::{Gradients, Graph};
use super::tensor::{Scalar, Tensor};
use crate::error::{input_err, state_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Option<Vec<F>>,
    pub trainable: bool,
}

/// Named parameter collection. Insertion order is the canonical order for
/// checkpoints, optimizer moments and hashing.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<F>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(input_err!("duplicate parameter name `{name}`"));
        }
        let id = self.params.len();
        self.index.insert(name.to_string(), id);
        self.params.push(Param { name: name.to_string(), value, grad: None, trainable: true });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<F>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Number of scalars in parameters whose names start with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Sets `trainable` on every parameter under `prefix`; returns how many matched.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
            n += 1;
        }
        n
    }

    /// Resets every trainable gradient to zeros.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            if p.trainable {
                match &mut p.grad {
                    Some(g) => g.iter_mut().for_each(|v| *v = F::zero()),
                    None => p.grad = Some(vec![F::zero(); p.value.numel()]),
                }
            } else {
                p.grad = None;
            }
        }
    }

    /// Adds the gradients of every parameter leaf recorded in `graph`.
    pub fn accumulate(&mut self, graph: &Graph<F>, grads: &Gradients<F>) -> Result<()> {
        for (id, var) in graph.param_leaves() {
            let Some(g) = grads.wrt(var) else { continue };
            let p = self
                .params
                .get_mut(id.0)
                .ok_or_else(|| state_err!("graph references unknown parameter #{}", id.0))?;
            if !p.trainable {
                continue;
            }
            let slot = p.grad.get_or_insert_with(|| vec![F::zero(); g.len()]);
            for (s, v) in slot.iter_mut().zip(g) {
                *s += *v;
            }
        }
        Ok(())
    }

    /// Copies values of every same-named, same-shaped parameter in `other`.
    /// Returns the number of parameters copied.
    pub fn load_from<G: Scalar>(&mut self, other: &ParamStore<G>) -> Result<usize> {
        let mut n = 0;
        for src in other.iter() {
            if let Some(id) = self.id(&src.name) {
                let dst = &mut self.params[id.0];
                if dst.value.shape() != src.value.shape() {
                    return Err(input_err!(
                        "parameter `{}` has shape {:?}, source has {:?}",
                        src.name,
                        dst.value.shape(),
                        src.value.shape()
                    ));
                }
                dst.value = src.value.cast();
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: None,
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Removes every parameter under `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|p| !p.name.starts_with(prefix));
        self.index = self.params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
    }

    /// SHA-256 over name, shape and little-endian f32 bytes of every
    /// parameter whose name starts with one of `prefixes`.
    pub fn hash_prefixes(&self, prefixes: &[&str]) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            if !prefixes.iter().any(|pre| p.name.starts_with(pre)) {
                continue;
            }
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update((v.as_f64() as f32).to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a.w", Tensor::zeros(&[2])).unwrap();
        assert!(s.add("a.w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn hash_tracks_values_under_prefix() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add("a.w", Tensor::zeros(&[2])).unwrap();
        let b = s.add("b.w", Tensor::zeros(&[2])).unwrap();
        let h0 = s.hash_prefixes(&["a."]);
        s.get_mut(b).value.data_mut()[0] = 1.0;
        assert_eq!(h0, s.hash_prefixes(&["a."]));
        s.get_mut(a).value.data_mut()[0] = 1.0;
        assert_ne!(h0, s.hash_prefixes(&["a."]));
    }

    #[test]
    fn zero_grads_skips_frozen() {
        let mut s = ParamStore::<f32>::new();
        s.add("a.w", Tensor::zeros(&[3])).unwrap();
        s.add("b.w", Tensor::zeros(&[3])).unwrap();
        assert_eq!(s.set_trainable("b.", false), 1);
        s.zero_grads();
        assert_eq!(s.by_name("a.w").unwrap().grad.as_deref(), Some(&[0.0; 3][..]));
        assert!(s.by_name("b.w").unwrap().grad.is_none());
    }
}
