//! Named trainable parameters and non-trainable buffers.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::tape::Gradients;
use crate::{Error, Result, Scalar, Tensor};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Index of a buffer (e.g. batch-norm running statistics) inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// Globally unique identity of a parameter, recorded on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub(crate) struct ParamKey {
    pub(crate) store: u64,
    pub(crate) index: usize,
}

#[derive(Clone, Debug)]
pub struct Parameter<T: Scalar = f32> {
    pub name: String,
    pub value: Tensor<T>,
    /// Accumulated gradient, cleared by the optimizer step.
    pub grad: Option<Tensor<T>>,
    /// When false the optimizer leaves `value` untouched.
    pub trainable: bool,
    /// Multiplies the optimizer's learning rate for this parameter.
    pub lr_scale: f64,
}

#[derive(Clone, Debug)]
pub struct Buffer<T: Scalar = f32> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Owns every parameter and buffer of one network.
#[derive(Debug)]
pub struct ParamStore<T: Scalar = f32> {
    uid: u64,
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
}

impl<T: Scalar> Clone for ParamStore<T> {
    /// The clone is an independent store with its own identity.
    fn clone(&self) -> Self {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            buffers: self.buffers.clone(),
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    fn check_name(&self, name: &str) -> Result<()> {
        if self.params.iter().any(|p| p.name == name) || self.buffers.iter().any(|b| b.name == name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        Ok(())
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        self.check_name(&name)?;
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            trainable: true,
            lr_scale: 1.0,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<BufferId> {
        let name = name.into();
        self.check_name(&name)?;
        self.buffers.push(Buffer { name, value });
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub(crate) fn key(&self, id: ParamId) -> ParamKey {
        ParamKey {
            store: self.uid,
            index: id.0,
        }
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer<T> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Buffer<T> {
        &mut self.buffers[id.0]
    }

    /// Mutable access to two distinct buffers at once.
    pub fn buffer_pair_mut(&mut self, a: BufferId, b: BufferId) -> (&mut Tensor<T>, &mut Tensor<T>) {
        assert_ne!(a.0, b.0, "buffer_pair_mut needs distinct buffers");
        if a.0 < b.0 {
            let (lo, hi) = self.buffers.split_at_mut(b.0);
            (&mut lo[a.0].value, &mut hi[0].value)
        } else {
            let (lo, hi) = self.buffers.split_at_mut(a.0);
            (&mut hi[0].value, &mut lo[b.0].value)
        }
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn find(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn find_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn find_buffer_mut(&mut self, name: &str) -> Option<&mut Buffer<T>> {
        self.buffers.iter_mut().find(|b| b.name == name)
    }

    /// Total number of trainable-or-not scalar parameters (buffers excluded).
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.params.iter_mut().for_each(|p| p.trainable = trainable);
    }

    pub fn all_frozen(&self) -> bool {
        self.params.iter().all(|p| !p.trainable)
    }

    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Adds this store's gradients from a backward pass into `Parameter::grad`.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (key, g) in grads.param_grads() {
            if key.store != self.uid {
                continue;
            }
            let p = &mut self.params[key.index];
            match &mut p.grad {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + *v;
                    }
                }
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }

    /// Same names, shapes and values converted to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                    trainable: p.trainable,
                    lr_scale: p.lr_scale,
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    value: b.value.cast(),
                })
                .collect(),
        }
    }

    /// True when names, values and buffers are bit-identical.
    pub fn bit_identical(&self, other: &Self) -> bool {
        let same_bits = |a: &Tensor<T>, b: &Tensor<T>| {
            a.shape() == b.shape()
                && a.data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| x.to_f64_lossy().to_bits() == y.to_f64_lossy().to_bits())
        };
        self.params.len() == other.params.len()
            && self.buffers.len() == other.buffers.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && same_bits(&a.value, &b.value))
            && self
                .buffers
                .iter()
                .zip(&other.buffers)
                .all(|(a, b)| a.name == b.name && same_bits(&a.value, &b.value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add_param("w", Tensor::zeros(&[2])).unwrap();
        assert!(s.add_param("w", Tensor::zeros(&[2])).is_err());
        assert!(s.add_buffer("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn gradients_route_to_owning_store_only() {
        let mut a = ParamStore::<f64>::new();
        let mut b = ParamStore::<f64>::new();
        let wa = a.add_param("w", Tensor::full(&[3], 2.0)).unwrap();
        let wb = b.add_param("w", Tensor::full(&[3], 5.0)).unwrap();
        let tape = Tape::new();
        let x = tape.param(&a, wa);
        let y = tape.param(&b, wb);
        let loss = x.mul(y).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        a.accumulate(&grads);
        b.accumulate(&grads);
        assert_eq!(a.get(wa).grad.as_ref().unwrap().data(), &[5.0; 3]);
        assert_eq!(b.get(wb).grad.as_ref().unwrap().data(), &[2.0; 3]);
    }
}
