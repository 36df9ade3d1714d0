//! Reverse-mode differentiation over a linear tape.
//!
//! Operations executed through a [`Tape`] record their forward value and a
//! backward closure. [`Tape::backward`] replays the closures in reverse
//! order, accumulating gradients additively across fan-out. Tapes are
//! single-use: one forward pass, one backward pass.

mod gradcheck;
mod ops;

pub use gradcheck::{gradcheck, max_rel_error_vs_fd};

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub(crate) id: usize,
}

pub(crate) type BackFn<T> = Box<dyn FnOnce(&[T], &mut GradStore<T>)>;

pub(crate) struct Node<T: Scalar> {
    value: Tensor<T>,
    needs_grad: bool,
    backward: Option<BackFn<T>>,
}

/// Per-node gradient buffers, indexed like the tape's node list.
pub struct GradStore<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> GradStore<T> {
    /// Gradient buffer for `v`, zero-initialized on first touch.
    pub(crate) fn slot(&mut self, v: Var, numel: usize) -> &mut [T] {
        let s = &mut self.slots[v.id];
        if s.is_none() {
            *s = Some(vec![T::zero(); numel]);
        }
        s.as_mut().unwrap()
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    watched: HashMap<usize, Var>,
    grads: Option<GradStore<T>>,
    grad_enabled: bool,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// Tape that records backward closures for tracked leaves.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            watched: HashMap::new(),
            grads: None,
            grad_enabled: true,
            consumed: false,
        }
    }

    /// Tape that records values only; `backward` is not available.
    /// Used for evaluation with frozen weights.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor<T>,
        needs_grad: bool,
        backward: Option<BackFn<T>>,
    ) -> Var {
        let id = self.nodes.len();
        let needs = needs_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            needs_grad: needs,
            backward: if needs { backward } else { None },
        });
        Var { id }
    }

    /// Record a tensor without gradient tracking.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.clone(), false, None)
    }

    /// Record a gradient-tracked leaf regardless of the tensor's flag.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.clone(), true, None)
    }

    /// Record a tensor, tracking it when `requires_grad` is set.
    ///
    /// Repeated watches of the same buffer return the same `Var`, so a
    /// weight used twice accumulates one gradient.
    pub fn watch(&mut self, t: &Tensor<T>) -> Var {
        let key = t.buffer_id();
        if let Some(&v) = self.watched.get(&key) {
            return v;
        }
        let v = if t.requires_grad() {
            self.leaf(t)
        } else {
            self.constant(t)
        };
        self.watched.insert(key, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.id].value.shape()
    }

    /// Scalar payload of a one-element var.
    pub fn scalar_value(&self, v: Var) -> T {
        debug_assert_eq!(self.nodes[v.id].value.numel(), 1);
        self.nodes[v.id].value.data()[0]
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.nodes[v.id].needs_grad
    }

    /// Replay the tape in reverse, populating gradients for every tracked
    /// node that influences `loss`. Tracked leaves that do not reach the
    /// loss read back as zero gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::usage("backward called on an inference tape"));
        }
        if self.consumed {
            return Err(Error::usage("tape already consumed by a previous backward"));
        }
        let lnode = &self.nodes[loss.id];
        if lnode.value.numel() != 1 {
            return Err(Error::usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                lnode.value.shape()
            )));
        }
        self.consumed = true;
        let mut store = GradStore {
            slots: (0..self.nodes.len()).map(|_| None).collect(),
        };
        store.slots[loss.id] = Some(vec![T::one()]);
        for i in (0..self.nodes.len()).rev() {
            let Some(back) = self.nodes[i].backward.take() else {
                continue;
            };
            let Some(up) = store.slots[i].take() else {
                continue;
            };
            back(&up, &mut store);
            store.slots[i] = Some(up);
        }
        self.grads = Some(store);
        Ok(())
    }

    /// Gradient of the loss w.r.t. `v`, available after `backward`.
    ///
    /// Tracked nodes that received no contribution report zeros; untracked
    /// nodes report `None`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let store = self.grads.as_ref()?;
        let node = &self.nodes[v.id];
        if !node.needs_grad {
            return None;
        }
        let data = match &store.slots[v.id] {
            Some(g) => g.clone(),
            None => vec![T::zero(); node.value.numel()],
        };
        Some(Tensor::from_vec(node.value.shape().to_vec(), data).expect("grad shape"))
    }

    /// Gradient for a watched tensor, looked up by buffer identity.
    pub fn grad_of(&self, t: &Tensor<T>) -> Option<Tensor<T>> {
        let v = *self.watched.get(&t.buffer_id())?;
        self.grad(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_on_sum_gives_ones() {
        let x = Tensor::<f64>::from_vec(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let s = tape.sum_all(v);
        tape.backward(s).unwrap();
        let g = tape.grad(v).unwrap();
        assert_eq!(g.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_on_quadratic_gives_2x() {
        let x = Tensor::<f64>::from_vec(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum_all(sq);
        tape.backward(s).unwrap();
        let g = tape.grad(v).unwrap();
        assert_eq!(g.data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn tape_is_single_use() {
        let x = Tensor::<f64>::scalar(2.0);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let s = tape.sum_all(v);
        tape.backward(s).unwrap();
        let err = tape.backward(s).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::<f64>::zeros(vec![2, 2]);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        assert!(matches!(tape.backward(v), Err(Error::Usage(_))));
    }

    #[test]
    fn watch_deduplicates_by_buffer() {
        let x = Tensor::<f64>::from_vec(vec![2], vec![1.0, 2.0]).unwrap().with_grad();
        let mut tape = Tape::new();
        let a = tape.watch(&x);
        let b = tape.watch(&x);
        assert_eq!(a, b);
        // x + x: fan-out accumulates additively.
        let y = tape.add(a, b).unwrap();
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad_of(&x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn untouched_leaf_reads_zero_grad_after_backward() {
        let x = Tensor::<f64>::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let y = Tensor::<f64>::from_vec(vec![2], vec![3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let vx = tape.leaf(&x);
        let _vy = tape.leaf(&y);
        let s = tape.sum_all(vx);
        tape.backward(s).unwrap();
        let vy_grad = tape.grad(Var { id: 1 }).unwrap();
        assert_eq!(vy_grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::<f64>::rand_uniform(vec![4, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::rand_uniform(vec![3, 5], -1.0, 1.0, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let va = tape.leaf(&a);
            let vb = tape.leaf(&b);
            let c = tape.matmul(va, vb).unwrap();
            let sm = tape.softmax_rows(c).unwrap();
            let s = tape.sum_all(sm);
            tape.backward(s).unwrap();
            (
                tape.grad(va).unwrap().data().to_vec(),
                tape.grad(vb).unwrap().data().to_vec(),
            )
        };
        let (ga1, gb1) = run();
        let (ga2, gb2) = run();
        // Bit-identical, not merely close.
        assert!(ga1.iter().zip(&ga2).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(gb1.iter().zip(&gb2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
