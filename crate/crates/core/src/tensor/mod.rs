//! Dense f64 tensors with taped reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable value node in a computation graph rebuilt on
//! every forward pass. Each operation records its parents and a backward
//! closure; [`Tensor::backward`] walks the graph in reverse topological order
//! and accumulates gradients into the leaves that requested them.
//!
//! Graphs are confined to one thread (`Rc` makes `Tensor` `!Send`); parallel
//! callers each build their own graph over their own parameter copies.

mod check;
mod ops;

pub use check::grad_check;

use alloc::boxed::Box;
use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::fmt;
use core::sync::atomic::{AtomicU64, Ordering};

/// Errors surfaced by tensor construction and shape-checked operations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TensorError {
    /// Shapes incompatible for the attempted operation; message names both.
    Shape(String),
    /// Non-finite values where finite ones are required.
    Numeric(String),
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::Shape(m) => write!(f, "shape error: {m}"),
            TensorError::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

pub type Result<T> = core::result::Result<T, TensorError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

type BackwardFn = Box<dyn Fn(&[f64])>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    /// Leaf that accumulates a gradient during backward.
    requires_grad: bool,
    /// True when this node or any ancestor requires a gradient.
    tracked: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Shared handle to a value node. Cloning is cheap and aliases the node.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor(id={}, shape={:?})", self.inner.id, self.inner.shape)
    }
}

impl Tensor {
    fn from_parts(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let tracked = requires_grad || parents.iter().any(|p| p.inner.tracked);
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                tracked,
                parents,
                backward,
            }),
        }
    }

    /// Constant leaf; never receives a gradient.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::Shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Tensor::from_parts(shape.to_vec(), data, false, vec![], None))
    }

    /// Trainable leaf; `backward` accumulates into its `grad`.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::Shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Tensor::from_parts(shape.to_vec(), data, true, vec![], None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![0.0; n], false, vec![], None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_parts(vec![1], vec![v], false, vec![], None)
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let tracked = parents.iter().any(|p| p.inner.tracked);
        // Untracked subgraphs drop their history so backward never visits them.
        if !tracked {
            return Tensor::from_parts(shape, data, false, vec![], None);
        }
        Tensor::from_parts(shape, data, false, parents, Some(backward))
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Copy of the node's values.
    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Run `f` over the node's values without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.data.borrow())
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.inner.data.borrow()[0]
    }

    /// Accumulated gradient, if backward has reached this leaf.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrite a leaf's values in place (optimizer updates, finite-difference
    /// probes). The graph above a leaf is rebuilt per step, so this never
    /// invalidates recorded history.
    pub fn set_data(&self, data: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        debug_assert_eq!(d.len(), data.len());
        d.copy_from_slice(data);
    }

    /// Detach from the graph: same values, fresh constant leaf.
    pub fn detach(&self) -> Tensor {
        Tensor::from_parts(
            self.inner.shape.clone(),
            self.inner.data.borrow().clone(),
            false,
            vec![],
            None,
        )
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse pass from a scalar node. Gradients accumulate into every
    /// reachable leaf with `requires_grad`.
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward needs a scalar loss");
        // Iterative post-order topo sort over tracked nodes.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: alloc::collections::BTreeSet<u64> = alloc::collections::BTreeSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        while let Some((node, child)) = stack.pop() {
            if child == 0 {
                if !visited.insert(node.inner.id) {
                    continue;
                }
            }
            let parents = &node.inner.parents;
            let mut next = child;
            while next < parents.len() && !parents[next].inner.tracked {
                next += 1;
            }
            if next < parents.len() {
                let p = parents[next].clone();
                stack.push((node, next + 1));
                if !visited.contains(&p.inner.id) {
                    stack.push((p, 0));
                }
            } else {
                order.push(node);
            }
        }

        self.accumulate_grad(&[1.0]);
        for node in order.iter().rev() {
            let grad_out = node.inner.grad.borrow().clone();
            let Some(grad_out) = grad_out else { continue };
            if let Some(back) = &node.inner.backward {
                back(&grad_out);
            }
            // Interior nodes don't keep their gradient.
            if !node.inner.requires_grad {
                *node.inner.grad.borrow_mut() = None;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_mismatch_rejected() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn backward_accumulates_into_params_only() {
        let a = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[2], vec![3.0, 4.0]).unwrap();
        let y = a.mul(&b).unwrap().sum_all();
        y.backward();
        assert_eq!(a.grad().unwrap(), vec![3.0, 4.0]);
        assert!(b.grad().is_none());
    }

    #[test]
    fn diamond_graph_sums_paths() {
        // y = x*x + x*x => dy/dx = 4x
        let x = Tensor::param(&[1], vec![3.0]).unwrap();
        let a = x.mul(&x).unwrap();
        let b = x.mul(&x).unwrap();
        let y = a.add(&b).unwrap().sum_all();
        y.backward();
        assert_eq!(x.grad().unwrap(), vec![12.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = Tensor::param(&[1], vec![2.0]).unwrap();
        let y = x.mul(&x).unwrap().detach();
        let z = y.mul(&y).unwrap().sum_all();
        z.backward();
        assert!(x.grad().is_none());
    }
}
