//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Var`] is a reference-counted node holding a forward value and, when
//! gradient tracking is on, the operation and parent nodes that produced it.
//! The graph is therefore implicit in the `Rc` links; [`Var::backward`]
//! recovers a topological order from the root, visits each node once in
//! reverse order, and accumulates gradients additively across fan-out.
//!
//! Nodes are `!Send`: a graph lives on one thread. Values can be moved across
//! threads as plain [`Tensor`]s.

mod kernels;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use ops::{Op, RowIndex};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static FLIPPED_RULE: RefCell<Option<String>> = const { RefCell::new(None) };
}

/// Runs `f` with graph recording disabled. Intermediate values are released
/// as soon as they go out of scope.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Mutation hook for the gradient-check suite: negates the backward rule of
/// the named op (see [`Op::name`]) on the current thread. `None` restores
/// normal behaviour.
pub fn inject_sign_flip(op: Option<&str>) {
    FLIPPED_RULE.with(|f| *f.borrow_mut() = op.map(str::to_owned));
}

fn rule_flipped(name: &str) -> bool {
    FLIPPED_RULE.with(|f| f.borrow().as_deref() == Some(name))
}

struct Node<T: Scalar> {
    value: RefCell<Tensor<T>>,
    grad: RefCell<Option<Tensor<T>>>,
    requires_grad: bool,
    op: Op<T>,
    parents: Vec<Var<T>>,
}

pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Var({}, {:?}, grad={})",
            self.0.op.name(),
            self.0.value.borrow().shape(),
            self.0.requires_grad
        )
    }
}

impl<T: Scalar> Var<T> {
    fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            value: RefCell::new(value),
            grad: RefCell::new(None),
            requires_grad,
            op: Op::Leaf,
            parents: Vec::new(),
        }))
    }

    /// Trainable leaf.
    pub fn param(value: Tensor<T>) -> Self {
        Self::leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, false)
    }

    pub(crate) fn from_op(value: Tensor<T>, op: Op<T>, parents: Vec<Var<T>>) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        if !track {
            return Self::leaf(value, false);
        }
        Var(Rc::new(Node {
            value: RefCell::new(value),
            grad: RefCell::new(None),
            requires_grad: true,
            op,
            parents,
        }))
    }

    pub fn value(&self) -> Ref<'_, Tensor<T>> {
        self.0.value.borrow()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.value.borrow().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.0.op, Op::Leaf)
    }

    /// Replaces a leaf's value in place (optimizer updates, checkpoint loads).
    pub fn set_value(&self, value: Tensor<T>) {
        assert!(self.is_leaf(), "set_value on a non-leaf node");
        assert_eq!(
            value.shape(),
            self.0.value.borrow().shape(),
            "set_value shape change"
        );
        *self.0.value.borrow_mut() = value;
    }

    pub fn update_value(&self, f: impl FnOnce(&mut Tensor<T>)) {
        assert!(self.is_leaf(), "update_value on a non-leaf node");
        f(&mut self.0.value.borrow_mut());
    }

    /// Accumulated gradient of a trainable leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same value, no history: gradients never flow through the result.
    pub fn detach(&self) -> Var<T> {
        Var::constant(self.value().clone())
    }

    pub fn ptr_eq(&self, other: &Var<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Back-propagates from this node with seed gradient 1 (for scalars) or
    /// all-ones (otherwise). Gradients are added into trainable leaves.
    pub fn backward(&self) {
        let seed = Tensor::full(self.value().shape(), T::one());
        self.backward_with(seed.into_vec());
    }

    pub fn backward_with(&self, seed: Vec<T>) {
        if !self.0.requires_grad {
            return;
        }
        let order = self.topo_order();
        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        grads.insert(self.key(), seed);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.key()) else {
                continue;
            };
            if node.is_leaf() {
                let shape = node.value().shape().to_vec();
                let mut slot = node.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    None => *slot = Some(Tensor::new(&shape, g).expect("grad shape")),
                }
                continue;
            }
            let mut parent_grads = {
                let out = node.value();
                ops::backward(&node.0.op, &out, &g, &node.0.parents)
            };
            if rule_flipped(node.0.op.name()) {
                for pg in parent_grads.iter_mut().flatten() {
                    pg.iter_mut().for_each(|x| *x = -*x);
                }
            }
            for (p, pg) in node.0.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !p.0.requires_grad {
                    continue;
                }
                match grads.get_mut(&p.key()) {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(pg) {
                            *a += b;
                        }
                    }
                    None => {
                        grads.insert(p.key(), pg);
                    }
                }
            }
        }
    }

    /// Nodes reachable from `self` that require grad, parents before children.
    fn topo_order(&self) -> Vec<Var<T>> {
        let mut order = Vec::new();
        let mut seen = std::collections::HashSet::new();
        // explicit stack: (node, children_pushed)
        let mut stack = vec![(self.clone(), false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                order.push(v);
                continue;
            }
            if !seen.insert(v.key()) {
                continue;
            }
            stack.push((v.clone(), true));
            for p in &v.0.parents {
                if p.0.requires_grad && !seen.contains(&p.key()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

impl<T: Scalar> Drop for Node<T> {
    fn drop(&mut self) {
        // Unlink long parent chains iteratively to keep drop off the call stack.
        let mut pending: Vec<Var<T>> = std::mem::take(&mut self.parents);
        while let Some(v) = pending.pop() {
            if let Ok(mut node) = Rc::try_unwrap(v.0) {
                pending.append(&mut node.parents);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, d).unwrap()
    }

    #[test]
    fn fan_out_accumulates() {
        let x = Var::param(t(&[2], &[1.0, 2.0]));
        // y = sum(x * x + x)
        let y = x.mul(&x).unwrap().add(&x).unwrap().sum();
        y.backward();
        assert_eq!(x.grad().unwrap().data(), &[3.0, 5.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = Var::param(t(&[2], &[1.0, 2.0]));
        let y = x.detach().mul(&x).unwrap().sum();
        y.backward();
        // only the non-detached factor contributes
        assert_eq!(x.grad().unwrap().data(), &[1.0, 2.0]);

        let z = x.detach().sum();
        assert!(!z.requires_grad());
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = Var::param(t(&[2], &[1.0, 2.0]));
        let y = no_grad(|| x.mul(&x).unwrap());
        assert!(!y.requires_grad());
        assert!(grad_enabled());
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let x = Var::param(t(&[1], &[3.0]));
        x.scale(2.0).sum().backward();
        x.scale(2.0).sum().backward();
        assert_eq!(x.grad().unwrap().data(), &[4.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn deep_chain_drops_without_overflow() {
        let x = Var::param(t(&[1], &[1.0]));
        let mut y = x.clone();
        for _ in 0..200_000 {
            y = y.scale(1.0);
        }
        drop(y);
    }

    #[test]
    fn sign_flip_hook_negates_named_rule() {
        let x = Var::param(t(&[1], &[2.0]));
        inject_sign_flip(Some("scale"));
        x.scale(3.0).sum().backward();
        inject_sign_flip(None);
        assert_eq!(x.grad().unwrap().data(), &[-3.0]);
    }
}
