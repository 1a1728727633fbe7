//! Dense tensors and named parameter collections.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar type the whole stack is generic over. Implemented for `f32`
/// (default precision) and `f64` (gradient checks).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Shorthand for converting a literal into `T`.
#[inline]
pub fn real<T: Real>(x: f64) -> T {
    T::from_f64_lossy(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) || expected != values.len() {
            return Err(Error::shape("tensor", &shape, &[values.len()]));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![T::zero(); n],
        }
    }

    pub fn scalar(x: T) -> Self {
        Self {
            shape: vec![1],
            values: vec![x],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }
}

/// Named collection of tensors with a stable order. Used both for the model
/// weights and for gradients with respect to them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParameterSet<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, index: usize) -> &Tensor<T> {
        &self.tensors[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.tensors[index]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Total number of scalar parameters (length of the flat view).
    pub fn flat_len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flat_values(&self) -> impl Iterator<Item = &T> {
        self.tensors.iter().flat_map(|t| t.values.iter())
    }

    pub fn flat_values_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.tensors.iter_mut().flat_map(|t| t.values.iter_mut())
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.flat_values().copied().collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape.clone())).collect(),
        }
    }

    pub fn is_aligned_with(&self, other: &Self) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape == b.shape)
    }

    pub fn check_aligned(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Misaligned(format!("{} tensors vs {}", self.len(), other.len())));
        }
        for ((na, a), (nb, b)) in self.iter().zip(other.iter()) {
            if na != nb || a.shape != b.shape {
                return Err(Error::Misaligned(format!("{na}{:?} vs {nb}{:?}", a.shape, b.shape)));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.flat_values().all(|v| v.is_finite())
    }

    pub fn sq_norm(&self) -> T {
        self.flat_values().map(|&v| v * v).sum()
    }

    pub fn l2_norm(&self) -> T {
        self.sq_norm().sqrt()
    }

    /// `self += alpha * other`, elementwise over the flat view.
    pub fn axpy(&mut self, alpha: T, other: &Self) {
        debug_assert!(self.is_aligned_with(other));
        for (a, &b) in self.flat_values_mut().zip(other.flat_values()) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for v in self.flat_values_mut() {
            *v *= alpha;
        }
    }

    /// `self - other` as a new set.
    pub fn difference(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(-T::one(), other);
        out
    }

    /// Euclidean distance between the flat views of two aligned sets.
    pub fn distance(&self, other: &Self) -> T {
        self.flat_values()
            .zip(other.flat_values())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            .sqrt()
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}
