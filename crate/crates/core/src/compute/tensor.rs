use std::sync::Arc;

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major `f32` array with an optional gradient buffer.
///
/// Values live behind an `Arc` so a graph can borrow parameters without
/// copying them; mutation goes through [`Tensor::values_mut`], which
/// clones only if the buffer is still shared.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Arc<Vec<f32>>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) && !values.is_empty() {
            return Err(Error::DataLength {
                shape,
                got: values.len(),
            });
        }
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::DataLength {
                shape,
                got: values.len(),
            });
        }
        Ok(Tensor {
            shape,
            values: Arc::new(values),
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: Arc::new(vec![0.0; n]),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: Arc::new(vec![value; n]),
            grad: None,
            requires_grad: false,
        }
    }

    /// Uniform values in `[-bound, bound]`.
    pub fn uniform<R: Rng>(shape: &[usize], bound: f32, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor {
            shape: shape.to_vec(),
            values: Arc::new(values),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            values: Arc::new(vec![value]),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub(crate) fn shared_values(&self) -> Arc<Vec<f32>> {
        Arc::clone(&self.values)
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        Arc::make_mut(&mut self.values).as_mut_slice()
    }

    pub fn into_values(self) -> Vec<f32> {
        Arc::try_unwrap(self.values).unwrap_or_else(|arc| (*arc).clone())
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f32]) -> Result<()> {
        if delta.len() != self.values.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                left: self.shape.clone(),
                right: vec![delta.len()],
            });
        }
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => self.grad = Some(delta.to_vec()),
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite()) && self.grad.as_ref().is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    entries: IndexMap<String, Tensor>,
    seed: u64,
}

impl ParameterSet {
    pub fn new(seed: u64) -> Self {
        ParameterSet {
            entries: IndexMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Inserts a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, tensor.with_requires_grad(true));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars across all entries.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.entries.values_mut().for_each(Tensor::zero_grad);
    }

    /// Gives every entry without a gradient an all-zero one, for
    /// parameters the loss does not reach.
    pub fn ensure_grads(&mut self) {
        for t in self.entries.values_mut() {
            if t.grad.is_none() {
                t.grad = Some(vec![0.0; t.numel()]);
            }
        }
    }
}
