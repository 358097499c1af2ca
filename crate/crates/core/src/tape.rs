//! Reverse-mode tape.
//!
//! Every operation on a [`Var`] appends one node holding its output value and
//! whatever the backward pass needs. Node order is a topological order, so
//! [`Tape::backward`] walks it once from the loss towards the leaves.

use std::cell::{Ref, RefCell};

use crate::ops::Op;
use crate::param::{ParamId, ParamKey, ParamStore};
use crate::{Error, Result, Scalar, Tensor};

pub(crate) struct Node<T: Scalar> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
    pub(crate) param: Option<ParamKey>,
}

/// Record of one forward computation.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Scalar = f32> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A constant: no gradient is tracked for it.
    pub fn input(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false, None)
    }

    /// A free leaf whose gradient is reported by [`Tape::backward`].
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true, None)
    }

    /// Records the current value of a parameter. Frozen parameters become
    /// constants, but gradients still flow through the ops that use them.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Leaf, p.trainable, Some(store.key(id)))
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool, param: Option<ParamKey>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            param,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node<T>>> {
        self.nodes.borrow()
    }

    /// Back-propagates from a single-element `loss`.
    ///
    /// Returns gradients of every leaf that requires them. Intermediate
    /// gradients are dropped as soon as they have been propagated.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::invalid("loss belongs to a different tape"));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut params = Vec::new();
        if root.requires_grad {
            grads[loss.id] = Some(Tensor::full(root.value.shape(), T::one()));
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                if let (Some(key), Some(_)) = (node.param, grads[id].as_ref()) {
                    params.push((key, id));
                }
                continue;
            }
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let needs = |i: usize| nodes[i].requires_grad;
            for (input, g) in node.op.backward(&nodes, &node.value, &grad, &needs) {
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + *v;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        params.reverse();
        Ok(Gradients { grads, params })
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a tensor of shape {:?}", v.shape());
        v.data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamKey, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; `None` when it does not influence the loss or is constant.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (ParamKey, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(key, id)| self.grads[id].as_ref().map(|g| (key, g)))
    }
}
