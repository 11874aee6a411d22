//! Dense tensors with reverse-mode gradients.
//!
//! A [`Tensor`] is an immutable, reference-counted buffer plus an optional
//! backward closure linking it to the tensors it was computed from. Graphs
//! are built eagerly as operations run and walked in reverse topological
//! order by [`Tensor::backward`]. Because nodes never change after creation
//! the graph is acyclic by construction.
//!
//! Every operation is generic over [`Element`]: training runs in `f32`, and
//! gradient checks run the same code in `f64`.

mod conv;
mod element;
mod ops;
mod resize;

pub use conv::Padding;
pub use element::Element;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("backward already ran on this graph; reset gradients first")]
    BackwardTwice,
    #[error("loss does not depend on any tensor that requires a gradient")]
    Untracked,
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(TensorError::Shape {
        op,
        detail: detail.into(),
    })
}

/// Maps the output gradient to one gradient per parent. The mask tells
/// which parents actually need one.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct GradFn<T: Element> {
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    grad_fn: Option<GradFn<T>>,
    consumed: AtomicBool,
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Row-major dense tensor.
#[derive(Clone)]
pub struct Tensor<T: Element = f32>(Arc<Node<T>>);

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish_non_exhaustive()
    }
}

impl<T: Element> Tensor<T> {
    fn build(
        shape: Vec<usize>,
        data: Arc<Vec<T>>,
        requires_grad: bool,
        grad_fn: Option<GradFn<T>>,
    ) -> Self {
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            grad_fn,
            consumed: AtomicBool::new(false),
        }))
    }

    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return shape_err("new", format!("zero-sized dimension in {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(
                "new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            );
        }
        Ok(Self::build(shape.to_vec(), Arc::new(data), false, None))
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::cast(v)).collect())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        Self::new(shape, vec![value; shape.iter().product()])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        Self::build(vec![1], Arc::new(vec![value]), false, None)
    }

    /// A leaf that shares `data` without copying.
    pub fn from_shared(shape: &[usize], data: Arc<Vec<T>>, requires_grad: bool) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || n == 0 {
            return shape_err(
                "from_shared",
                format!("shape {shape:?} vs {} values", data.len()),
            );
        }
        Ok(Self::build(shape.to_vec(), data, requires_grad, None))
    }

    /// Marks this tensor as a gradient-tracked leaf. The data is shared.
    pub fn requires_grad_(self) -> Self {
        Self::build(self.0.shape.clone(), self.0.data.clone(), true, None)
    }

    /// Same values, cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// Result of an operation. Records the backward closure only when some
    /// parent is tracked, so inference builds no graph at all.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let tracked = parents.iter().any(|p| p.requires_grad());
        let grad_fn = tracked.then(|| GradFn { parents, backward });
        Self::build(shape, Arc::new(data), tracked, grad_fn)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn shared_data(&self) -> Arc<Vec<T>> {
        self.0.data.clone()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }

    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return shape_err("item", format!("expected one element, shape {:?}", self.shape()));
        }
        Ok(self.0.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn take_grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().expect("grad lock poisoned").take()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Populates `grad` on every tracked leaf reachable from this scalar.
    ///
    /// Fails if the loss is not a scalar, if this graph was already
    /// back-propagated, or if any reachable leaf still holds a gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Err(TensorError::Untracked);
        }
        let order = self.topo_order();
        let leaves: Vec<&Tensor<T>> = order.iter().filter(|t| t.is_leaf()).collect();
        if self.0.consumed.load(Ordering::Acquire)
            || leaves.iter().any(|l| l.0.grad.lock().expect("grad lock").is_some())
        {
            return Err(TensorError::BackwardTwice);
        }
        self.0.consumed.store(true, Ordering::Release);

        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.grad_fn {
                None => {
                    *node.0.grad.lock().expect("grad lock") = Some(g);
                }
                Some(gf) => {
                    let needs: Vec<bool> = gf.parents.iter().map(|p| p.requires_grad()).collect();
                    let parent_grads = (gf.backward)(&g, &needs);
                    debug_assert_eq!(parent_grads.len(), gf.parents.len());
                    for (parent, pg) in gf.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel());
                        match grads.get_mut(&parent.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a = *a + *b),
                            None => {
                                grads.insert(parent.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Tracked nodes reachable from `self`, parents before children.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !seen.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(gf) = &node.0.grad_fn {
                for p in gf.parents.iter().filter(|p| p.requires_grad()) {
                    if !seen.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}
