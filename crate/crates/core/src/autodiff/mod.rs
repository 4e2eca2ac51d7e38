//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every operation records its parents and a local gradient rule when at
//! least one parent requires a gradient. [`Tensor::backward`] walks the
//! recorded graph in reverse creation order, so every node is visited
//! exactly once. Intermediate gradients live in a scratch map during the
//! walk and are then added into each tensor's `grad` buffer; calling
//! `backward` a second time on the same graph adds the same amounts again,
//! doubling every buffer exactly.

mod adam;
mod check;
mod kernels;
mod ops;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub use adam::{AdamConfig, AdamState};
pub use check::{grad_check, GRAD_CHECK_MAX_COORDS};

/// Norm below which cosine similarity refuses to operate.
pub const EPS_NORM: f64 = 1e-8;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_FAULT: Cell<bool> = const { Cell::new(false) };
}

/// Turns on a deliberately wrong gradient rule for `matmul_t` on the
/// current thread. Used by gradient-check mutation tests.
pub fn set_gradient_fault(enabled: bool) {
    GRAD_FAULT.with(|f| f.set(enabled));
}

pub(crate) fn gradient_fault() -> bool {
    GRAD_FAULT.with(|f| f.get())
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Local gradient rule: `(grad_out, out_values, parents, needs_grad) -> grads per parent`.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[f64], &[Tensor], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    values: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    node: Option<Node>,
}

/// Shared handle to a dense row-major tensor.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("values", &*self.0.values.borrow())
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(values: Vec<f64>, shape: Vec<usize>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(numel(&shape), values.len());
        Tensor(Rc::new(Inner {
            id: next_id(),
            shape,
            values: RefCell::new(values),
            grad: RefCell::new(None),
            requires_grad,
            node,
        }))
    }

    fn checked(values: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        if numel(shape) != values.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape.to_vec(),
                right: vec![values.len()],
            });
        }
        Ok(Self::build(values, shape.to_vec(), requires_grad, None))
    }

    /// Constant tensor (never receives a gradient).
    pub fn new(values: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::checked(values, shape, false)
    }

    /// Trainable leaf tensor.
    pub fn param(values: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::checked(values, shape, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(vec![0.0; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(vec![value], Vec::new(), false, None)
    }

    pub fn vector(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::build(values, vec![n], false, None)
    }

    /// Output of an operation. A graph node is recorded only when some parent
    /// requires a gradient.
    pub(crate) fn from_op(values: Vec<f64>, shape: Vec<usize>, parents: Vec<Tensor>, backward: BackwardFn) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let node = requires_grad.then(|| Node { parents, backward });
        Self::build(values, shape, requires_grad, node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn len(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn values(&self) -> Ref<'_, Vec<f64>> {
        self.0.values.borrow()
    }

    /// Mutable access to the value buffer. Only meaningful on leaves: mutating an
    /// intermediate does not re-run the operations that consumed it.
    pub fn values_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.0.values.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.values().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        self.values()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    /// Gradient buffer, or zeros when none has been allocated yet.
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.grad().unwrap_or_else(|| vec![0.0; self.len()])
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Adds `delta` into the gradient buffer (allocating it if needed).
    pub fn accumulate_grad(&self, delta: &[f64]) {
        assert_eq!(delta.len(), self.len());
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Constant copy of the current values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::build(self.to_vec(), self.0.shape.clone(), false, None)
    }

    /// Independent leaf holding a copy of the current values.
    pub fn deep_copy(&self, requires_grad: bool) -> Tensor {
        Self::build(self.to_vec(), self.0.shape.clone(), requires_grad, None)
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                left: self.shape().to_vec(),
                right: vec![],
            });
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Parents are always created before children, so descending id order
        // is a valid reverse topological order.
        let mut reachable: BTreeMap<u64, Tensor> = BTreeMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if reachable.contains_key(&t.0.id) {
                continue;
            }
            if let Some(node) = &t.0.node {
                for p in &node.parents {
                    if p.requires_grad() && !reachable.contains_key(&p.0.id) {
                        stack.push(p.clone());
                    }
                }
            }
            reachable.insert(t.0.id, t);
        }

        let mut pending: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        pending.insert(self.0.id, vec![1.0]);
        for (id, tensor) in reachable.iter().rev() {
            let Some(grad) = pending.remove(id) else {
                continue;
            };
            if let Some(node) = &tensor.0.node {
                let needs: Vec<bool> = node.parents.iter().map(|p| p.requires_grad()).collect();
                let out = tensor.values();
                let parent_grads = (node.backward)(&grad, &out, &node.parents, &needs);
                drop(out);
                for ((parent, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                    let (Some(pg), true) = (pg, *need) else {
                        continue;
                    };
                    debug_assert_eq!(pg.len(), parent.len());
                    match pending.get_mut(&parent.0.id) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        None => {
                            pending.insert(parent.0.id, pg);
                        }
                    }
                }
            }
            tensor.accumulate_grad(&grad);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
