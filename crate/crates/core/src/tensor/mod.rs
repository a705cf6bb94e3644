//! Dense f64 tensors with reverse-mode gradients.
//!
//! Data is stored row-major. Leaf tensors are validated to be finite at
//! construction and every op validates its own output, so a NaN or infinity
//! is rejected at the boundary of the op that produced it. Reductions run in
//! a fixed left-to-right order, which makes reruns bitwise reproducible.

use std::cell::{Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

pub mod conv;
pub mod counter;
pub mod gradcheck;
pub mod io;
pub mod ops;

pub use counter::OpCounter;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: std::cell::Cell<bool> = const { std::cell::Cell::new(true) };
}

/// Evaluate `f` without recording backward closures.
///
/// Used for frozen modules and pure inference; graphs built inside are plain
/// value computations and keep no references to their inputs.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Closure that receives the output gradient and this node's parents and
/// accumulates into the parents' gradient buffers.
type BackwardFn = Box<dyn Fn(&[f64], &[Tensor])>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    /// Leaf that accumulates and keeps a gradient (a trainable parameter).
    requires_grad: bool,
    /// This node or one of its ancestors requires a gradient.
    needs_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Handle to a node in the computation graph. Cloning is cheap.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.node.id, self.node.shape, self.node.requires_grad
        )
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn all_finite(data: &[f64]) -> bool {
    data.iter().all(|v| v.is_finite())
}

impl Tensor {
    fn new_node(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        needs_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                needs_grad,
                parents,
                backward,
            }),
        }
    }

    /// Leaf tensor without gradient tracking. Rejects non-finite values.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} wants {} values, got {}", shape, numel(shape), data.len()),
            ));
        }
        if !all_finite(&data) {
            return Err(Error::NonFinite { op: "from_vec" });
        }
        Ok(Tensor::new_node(shape.to_vec(), data, false, false, Vec::new(), None))
    }

    /// Leaf tensor that accumulates a gradient (a trainable parameter).
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(shape, data)?;
        let data = t.node.data.borrow().clone();
        Ok(Tensor::new_node(t.node.shape.clone(), data, true, true, Vec::new(), None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new_node(shape.to_vec(), vec![0.0; numel(shape)], false, false, Vec::new(), None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::new_node(shape.to_vec(), vec![value; numel(shape)], false, false, Vec::new(), None)
    }

    pub fn scalar(value: f64) -> Result<Tensor> {
        Tensor::from_vec(&[], vec![value])
    }

    /// Internal constructor for ops: wires parents and the backward closure.
    /// The output buffer is validated, so non-finite values surface here with
    /// the name of the op that produced them.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: &[&Tensor],
        backward: impl Fn(&[f64], &[Tensor]) + 'static,
    ) -> Result<Tensor> {
        if !all_finite(&data) {
            return Err(Error::NonFinite { op });
        }
        let needs_grad = grad_enabled() && parents.iter().any(|p| p.node.needs_grad);
        if needs_grad {
            let parents: Vec<Tensor> = parents.iter().map(|p| (*p).clone()).collect();
            Ok(Tensor::new_node(shape, data, false, true, parents, Some(Box::new(backward))))
        } else {
            // No gradient path: keep no references so the graph truncates here.
            Ok(Tensor::new_node(shape, data, false, false, Vec::new(), None))
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn ndim(&self) -> usize {
        self.node.shape.len()
    }

    pub fn len(&self) -> usize {
        numel(&self.node.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub(crate) fn needs_grad(&self) -> bool {
        self.node.needs_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.node.data.borrow()
    }

    /// Mutable access to the raw buffer. Used by the optimizer; the caller is
    /// responsible for keeping values finite.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.node.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.borrow().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(Error::contract(
                "item",
                format!("expected one element, shape is {:?}", self.shape()),
            ));
        }
        Ok(self.node.data.borrow()[0])
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Fresh leaf with the same values and no gradient tracking.
    pub fn detach(&self) -> Tensor {
        Tensor::new_node(
            self.node.shape.clone(),
            self.node.data.borrow().clone(),
            false,
            false,
            Vec::new(),
            None,
        )
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        if !self.node.needs_grad {
            return;
        }
        debug_assert_eq!(g.len(), self.len());
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape() {
            [a, b] => Ok((*a, *b)),
            s => Err(Error::shape(op, format!("expected 2 dims, got {:?}", s))),
        }
    }

    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape() {
            [a, b, c] => Ok((*a, *b, *c)),
            s => Err(Error::shape(op, format!("expected 3 dims, got {:?}", s))),
        }
    }

    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape() {
            [a, b, c, d] => Ok((*a, *b, *c, *d)),
            s => Err(Error::shape(op, format!("expected 4 dims, got {:?}", s))),
        }
    }

    /// Reverse pass from a scalar output. Gradients accumulate into every
    /// reachable leaf with `requires_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("output must be scalar, shape is {:?}", self.shape()),
            ));
        }
        if !self.node.needs_grad {
            return Ok(());
        }

        // Iterative post-order DFS; parents come before consumers, so the
        // reversed order is a valid topological schedule from the output.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((t, next_parent)) = stack.pop() {
            if next_parent < t.node.parents.len() {
                let p = t.node.parents[next_parent].clone();
                stack.push((t, next_parent + 1));
                if p.node.needs_grad && visited.insert(p.id()) {
                    stack.push((p, 0));
                }
            } else {
                order.push(t);
            }
        }

        self.accumulate_grad(&[1.0]);
        for t in order.iter().rev() {
            let g: Vec<f64> = if t.node.requires_grad {
                match &*t.node.grad.borrow() {
                    Some(g) => g.clone(),
                    None => continue,
                }
            } else {
                match t.node.grad.borrow_mut().take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            if let Some(bw) = &t.node.backward {
                bw(&g, &t.node.parents);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_shape_and_nan() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::from_vec(&[2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::from_vec(&[2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = Tensor::scalar(3.5).unwrap();
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.item().unwrap(), 3.5);
    }

    #[test]
    fn grad_accumulates_through_shared_input() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = ops::add(&x, &x).unwrap();
        let s = ops::sum_all(&y).unwrap();
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn no_grad_builds_no_graph() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = no_grad(|| ops::add(&x, &x).unwrap());
        assert!(!y.needs_grad());
        let s = ops::sum_all(&y).unwrap();
        s.backward().unwrap();
        assert!(x.grad().is_none());
    }
}
