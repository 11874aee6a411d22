//! Named parameter storage.
//!
//! Models hold [`ParamId`]s rather than tensors. A forward pass first binds
//! the store into fresh leaf tensors (sharing the underlying buffers), so
//! every sample in a batch gets its own gradient slots while the weights
//! are read from one place. Weight sharing is simply two model components
//! holding the same id.

use std::ops::Index;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamStore<T: Element> {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    data: Vec<Arc<Vec<T>>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            shapes: Vec::new(),
            data: Vec::new(),
        }
    }
}

/// Initializers used by the models.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, redrawn outside two std.
    TruncNormal(f64),
}

impl Init {
    fn fill(self, n: usize, rng: &mut Rng) -> Vec<f64> {
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal(std) => (0..n)
                .map(|_| loop {
                    let z: f64 = rng.sample(StandardNormal);
                    if z.abs() <= 2.0 {
                        break z * std;
                    }
                })
                .collect(),
        }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<T>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "parameter shape/data mismatch");
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        self.data.push(Arc::new(data));
        ParamId(self.names.len() - 1)
    }

    pub fn init(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut Rng) -> ParamId {
        let n = shape.iter().product();
        let data = init.fill(n, rng).into_iter().map(T::cast).collect();
        self.add(name, shape, data)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.data.iter().map(|d| d.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn values(&self, id: ParamId) -> &[T] {
        &self.data[id.0]
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut Vec<T> {
        Arc::make_mut(&mut self.data[id.0])
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.data.iter().map(|d| d.len()).collect()
    }

    /// Mutable views of every buffer, in id order.
    pub fn all_values_mut(&mut self) -> Vec<&mut [T]> {
        self.data.iter_mut().map(|d| Arc::make_mut(d).as_mut_slice()).collect()
    }

    /// One leaf tensor per parameter, sharing the stored buffers.
    pub fn bind(&self, track: bool) -> Bound<T> {
        Bound(
            self.data
                .iter()
                .zip(&self.shapes)
                .map(|(d, s)| Tensor::from_shared(s, d.clone(), track).expect("store shapes are valid"))
                .collect(),
        )
    }

    pub fn convert<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            data: self
                .data
                .iter()
                .map(|d| Arc::new(d.iter().map(|v| U::cast(v.to_f64().unwrap_or(f64::NAN))).collect()))
                .collect(),
        }
    }
}

/// Parameters bound as tensors for one forward pass.
pub struct Bound<T: Element>(Vec<Tensor<T>>);

impl<T: Element> Bound<T> {
    /// Wraps tensors that stand in for a store's parameters, in id order.
    pub fn from_tensors(tensors: Vec<Tensor<T>>) -> Self {
        Bound(tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.0
    }

    /// Takes each leaf's gradient, zero-filled where the loss did not reach.
    pub fn take_grads(&self) -> Vec<Vec<T>> {
        self.0
            .iter()
            .map(|t| t.take_grad().unwrap_or_else(|| vec![T::zero(); t.numel()]))
            .collect()
    }
}

impl<T: Element> Index<ParamId> for Bound<T> {
    type Output = Tensor<T>;

    fn index(&self, id: ParamId) -> &Tensor<T> {
        &self.0[id.0]
    }
}
