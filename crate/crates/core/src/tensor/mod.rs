//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! The tape is define-by-run: every operation on a tensor that (transitively)
//! requires gradients records its inputs and a backward rule on the output
//! node. Node ids increase monotonically, so reverse-topological order is
//! simply descending id order. Calling [`Tensor::backward`] on a scalar walks
//! that order once and accumulates `dloss/dleaf` into every reachable leaf
//! that requires gradients.
//!
//! Storage is `f32`; reductions and inner products accumulate in `f64` so
//! finite-difference gradient checks stay tight.

mod conv;
mod elementwise;
mod gradcheck;
mod linalg;
mod shape_ops;
#[cfg(test)]
mod tests;

pub use conv::Resample;
pub use gradcheck::{finite_difference_check, finite_difference_check_at};

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{MorphError, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

type BackwardFn = Box<dyn Fn(&[f32])>;

pub(crate) struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f32>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    backward_done: Cell<bool>,
}

/// A dense n-dimensional f32 array, cheaply clonable (shared handle).
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<TensorInner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.0.id,
            self.0.shape,
            self.0.requires_grad
        )
    }
}

impl Tensor {
    // ----- construction -----

    /// Leaf tensor from raw data. Errors when `data.len() != product(shape)`.
    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(MorphError::shape(format!(
                "from_vec: {} values do not fill shape {:?} ({} elements)",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// Rank-0 scalar tensor.
    pub fn scalar(v: f32) -> Self {
        Self::leaf(vec![v], Vec::new(), false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::leaf(vec![0.0; numel], shape.to_vec(), false)
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::leaf(vec![1.0; numel], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], v: f32) -> Self {
        let numel: usize = shape.iter().product();
        Self::leaf(vec![v; numel], shape.to_vec(), false)
    }

    pub(crate) fn leaf(data: Vec<f32>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor(Rc::new(TensorInner {
            id: fresh_id(),
            shape,
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
            backward_done: Cell::new(false),
        }))
    }

    /// Mark this tensor as a gradient-receiving leaf (trainable parameter or
    /// input under a gradient check). Returns a new handle on fresh storage.
    pub fn requires_grad(&self) -> Self {
        Self::leaf(self.0.data.borrow().clone(), self.0.shape.clone(), true)
    }

    /// Copy of this tensor's values as a plain leaf (drops the tape).
    pub fn detach(&self) -> Self {
        Self::leaf(self.0.data.borrow().clone(), self.0.shape.clone(), false)
    }

    /// Output node of an op. When no parent requires gradients the parents
    /// and backward rule are dropped so inference builds no tape.
    pub(crate) fn from_op(
        data: Vec<f32>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        let track = parents.iter().any(|p| p.0.requires_grad);
        Tensor(Rc::new(TensorInner {
            id: fresh_id(),
            shape,
            data: RefCell::new(data),
            requires_grad: track,
            grad: RefCell::new(None),
            parents: if track { parents } else { Vec::new() },
            backward: if track { Some(backward) } else { None },
            backward_done: Cell::new(false),
        }))
    }

    // ----- accessors -----

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Copy of the underlying values.
    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if !self.is_scalar() {
            return Err(MorphError::shape(format!(
                "item() on non-scalar tensor of shape {:?}",
                self.0.shape
            )));
        }
        Ok(self.0.data.borrow()[0])
    }

    pub fn tracks_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Gradient accumulated by the last backward pass, if any.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// In-place value update for leaf parameters (optimizer step).
    pub fn set_data(&self, new: &[f32]) -> Result<()> {
        let mut d = self.0.data.borrow_mut();
        if new.len() != d.len() {
            return Err(MorphError::shape(format!(
                "set_data: {} values for tensor with {}",
                new.len(),
                d.len()
            )));
        }
        d.copy_from_slice(new);
        Ok(())
    }

    pub(crate) fn with_data<R>(&self, f: impl FnOnce(&[f32]) -> R) -> R {
        f(&self.0.data.borrow())
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.borrow().iter().all(|v| v.is_finite())
    }

    // ----- autodiff -----

    /// Reverse pass from a scalar loss. Populates `grad` on every
    /// requires-grad leaf reachable from `self`. Calling it twice on the
    /// same node without rebuilding the graph is an error.
    pub fn backward(&self) -> Result<()> {
        if !self.is_scalar() {
            return Err(MorphError::shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.0.shape
            )));
        }
        if !self.0.requires_grad {
            return Err(MorphError::invalid(
                "backward on a tensor that tracks no gradients".to_string(),
            ));
        }
        if self.0.backward_done.get() {
            return Err(MorphError::invalid(
                "backward already ran for this loss; rebuild the graph first".to_string(),
            ));
        }
        self.0.backward_done.set(true);

        // Collect the subgraph; ids are creation-ordered, so descending id
        // order is a reverse topological order.
        let mut nodes: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.0.id) {
                continue;
            }
            for p in &t.0.parents {
                if p.0.requires_grad {
                    stack.push(p.clone());
                }
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.0.id.cmp(&a.0.id));

        accumulate(self, &[1.0]);
        for node in &nodes {
            if let Some(bw) = &node.0.backward {
                let g = node.0.grad.borrow().clone();
                if let Some(g) = g {
                    bw(&g);
                }
            }
        }
        Ok(())
    }
}

/// Add `delta` into the gradient buffer of `t` (allocating zeros on first use).
pub(crate) fn accumulate(t: &Tensor, delta: &[f32]) {
    if !t.0.requires_grad {
        return;
    }
    let mut slot = t.0.grad.borrow_mut();
    match slot.as_mut() {
        Some(g) => {
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi += di;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

pub(crate) fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(MorphError::shape(format!(
            "{op}: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}
