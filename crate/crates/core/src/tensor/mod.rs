//! Dense f64 tensors with tape-free reverse-mode autodiff.
//!
//! Every tensor produced by an operation on a gradient-requiring input keeps
//! links to its parents plus a closure computing the parents' adjoints. Node
//! ids grow monotonically in creation order, so sorting the reachable nodes by
//! descending id replays the recorded operations in reverse execution order.

mod conv;
mod dft;
mod gemm;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub use ops::{Activation, ReduceKind};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Disables graph recording on this thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

/// Maps the output adjoint to one optional adjoint per parent.
/// Arguments: output data, output adjoint, parents.
pub(crate) type GradFn = Box<dyn Fn(&[f64], &[f64], &[Tensor]) -> Vec<Option<Vec<f64>>>>;

struct BackwardNode {
    parents: Vec<Tensor>,
    grad_fn: GradFn,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    backward: Option<BackwardNode>,
    consumed: Cell<bool>,
}

/// Reference-counted handle; clones share storage and gradient.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.node.data.borrow();
        let head: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("data[..8]", &head)
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn from_parts(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        backward: Option<BackwardNode>,
    ) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                backward,
                consumed: Cell::new(false),
            }),
        }
    }

    fn check_shape(data: &[f64], shape: &[usize]) -> Result<()> {
        if shape.contains(&0) {
            return Err(Error::InvalidShape(format!("zero extent in {shape:?}")));
        }
        if numel_of(shape) != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} needs {} values, got {}",
                numel_of(shape),
                data.len()
            )));
        }
        Ok(())
    }

    /// Constant tensor; never accumulates gradient.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Self::check_shape(&data, shape)?;
        Ok(Self::from_parts(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor that accumulates gradient.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Self::check_shape(&data, shape)?;
        Ok(Self::from_parts(shape.to_vec(), data, true, None))
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::from_parts(Vec::new(), vec![value], false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Self::from_parts(shape.to_vec(), vec![value; numel_of(shape)], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Self::full(shape, 1.0)
    }

    pub fn ones_like(other: &Tensor) -> Tensor {
        Self::ones(other.shape())
    }

    /// Output of a recorded operation. Records the closure only when grad mode
    /// is on and some parent requires grad.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        grad_fn: impl Fn(&[f64], &[f64], &[Tensor]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Tensor {
        let track = grad_enabled() && parents.iter().any(Tensor::requires_grad);
        let backward = track.then(|| BackwardNode {
            parents,
            grad_fn: Box::new(grad_fn),
        });
        Self::from_parts(shape, data, track, backward)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn ndim(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.node.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.backward.is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let data = self.node.data.borrow();
        assert_eq!(data.len(), 1, "item() on a tensor of shape {:?}", self.shape());
        data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Mutates the stored values in place (optimizer updates, test probes).
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.node.data.borrow_mut());
    }

    pub fn set_data(&self, values: &[f64]) -> Result<()> {
        let mut data = self.node.data.borrow_mut();
        if data.len() != values.len() {
            return Err(Error::InvalidShape(format!(
                "set_data: expected {} values, got {}",
                data.len(),
                values.len()
            )));
        }
        data.copy_from_slice(values);
        Ok(())
    }

    /// Constant copy cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Self::from_parts(self.shape().to_vec(), self.to_vec(), false, None)
    }

    pub fn same_tensor(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.node, &other.node)
    }

    fn collect_graph(&self) -> Vec<Tensor> {
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        let mut nodes = Vec::new();
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.node.id) {
                continue;
            }
            if let Some(bw) = &t.node.backward {
                stack.extend(bw.parents.iter().cloned());
            }
            nodes.push(t);
        }
        nodes.sort_by_key(|n| std::cmp::Reverse(n.node.id));
        nodes
    }

    /// Accumulates d(self)/d(t) into every reachable gradient-requiring tensor.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Err(Error::NoGradientPath);
        }
        if self.node.consumed.get() {
            return Err(Error::BackwardTwice);
        }
        let order = self.collect_graph();
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.node.id, vec![1.0]);
        for t in &order {
            let Some(g) = pending.remove(&t.node.id) else {
                continue;
            };
            if let Some(bw) = &t.node.backward {
                let parent_grads = {
                    let data = t.node.data.borrow();
                    (bw.grad_fn)(&data, &g, &bw.parents)
                };
                debug_assert_eq!(parent_grads.len(), bw.parents.len());
                for (parent, pg) in bw.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !parent.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), parent.numel());
                    match pending.get_mut(&parent.node.id) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        None => {
                            pending.insert(parent.node.id, pg);
                        }
                    }
                }
            }
            let mut slot = t.node.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }
        self.node.consumed.set(true);
        Ok(())
    }

    /// Clears every gradient reachable from this tensor and re-arms `backward`.
    pub fn reset_graph(&self) {
        for t in self.collect_graph() {
            t.zero_grad();
        }
        self.node.consumed.set(false);
    }
}
