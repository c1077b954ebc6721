//! Dense tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain row-major value carrier; all arithmetic that needs
//! gradients goes through a [`Graph`], a linear tape of recorded operations
//! replayed in reverse by [`Graph::backward`]. Element type is generic:
//! `f64` is the reference precision, `f32` the fast mode.

mod graph;
mod gradcheck;
mod kernels;

pub use gradcheck::{grad_check, GradCheckReport, ParamGradReport};
pub use graph::{Graph, Var};
pub use kernels::{gelu_f64, norm_cdf, norm_pdf};

use std::sync::Arc;

use crate::error::{Error, Result};

/// Scalar element of a tensor. Implemented for `f32` and `f64`.
pub trait Element:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
{
    const DTYPE: Dtype;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;

    fn exp(self) -> Self {
        Self::from_f64(self.to_f64().exp())
    }
    fn ln(self) -> Self {
        Self::from_f64(self.to_f64().ln())
    }
    fn sqrt(self) -> Self {
        Self::from_f64(self.to_f64().sqrt())
    }
    /// IEEE total order; used wherever sorting must be deterministic.
    fn total_cmp(&self, other: &Self) -> std::cmp::Ordering;
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn total_cmp(&self, other: &Self) -> std::cmp::Ordering {
        f64::total_cmp(self, other)
    }
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn total_cmp(&self, other: &Self) -> std::cmp::Ordering {
        f32::total_cmp(self, other)
    }
}

/// Element type tag, carried by checkpoints and configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

/// Dense row-major tensor. Data is shared (`Arc`) so cloning a tensor or
/// binding it into a graph never copies the payload; mutation goes through
/// [`Tensor::data_mut`], which unshares first.
#[derive(Debug, Clone)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
    requires_grad: bool,
    grad: Option<Vec<E>>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                expected: shape,
                got: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![E::ZERO; numel]),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: E) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![value; numel]),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor::full(vec![1], value)
    }

    pub fn from_f64s(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Mutable access to the payload; unshares if another handle aliases it.
    pub fn data_mut(&mut self) -> &mut [E] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn data_arc(&self) -> Arc<Vec<E>> {
        Arc::clone(&self.data)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Additive gradient accumulation (allocates on first use).
    pub fn accumulate_grad(&mut self, delta: &[E]) {
        debug_assert_eq!(delta.len(), self.data.len());
        match &mut self.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi = *gi + *di;
                }
            }
            None => self.grad = Some(delta.to_vec()),
        }
    }

    pub fn item(&self) -> E {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    /// Max absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<E>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Indices and values of the `k` largest entries of `values`, descending.
/// Ties are broken toward the lower index, which keeps routing deterministic.
pub fn top_k<E: Element>(values: &[E], k: usize) -> Result<(Vec<usize>, Vec<E>)> {
    if k == 0 || k > values.len() {
        return Err(Error::InvalidArgument(format!(
            "top_k: k={} out of range for {} values",
            k,
            values.len()
        )));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    // Sort by value descending, index ascending on ties.
    order.sort_by(|&a, &b| {
        values[b]
            .total_cmp(&values[a])
            .then_with(|| a.cmp(&b))
    });
    order.truncate(k);
    let picked = order.iter().map(|&i| values[i]).collect();
    Ok((order, picked))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_data_must_agree() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn top_k_sorted_input() {
        let (idx, vals) = top_k(&[0.5, 0.3, 0.15, 0.05], 2).unwrap();
        assert_eq!(idx, vec![0, 1]);
        assert_eq!(vals, vec![0.5, 0.3]);
    }

    #[test]
    fn top_k_tie_takes_lowest_index() {
        let (idx, _) = top_k(&[0.2, 0.2, 0.2], 1).unwrap();
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn top_k_unsorted_matches_sort_oracle() {
        let vals = [0.1, 0.7, 0.2];
        let (idx, _) = top_k(&vals, 2).unwrap();
        // brute-force oracle: full sort by (value desc, index asc)
        let mut all: Vec<usize> = (0..vals.len()).collect();
        all.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
        assert_eq!(idx, all[..2]);
        assert_eq!(idx, vec![1, 2]);
    }

    #[test]
    fn top_k_rejects_oversized_k() {
        assert!(top_k(&[1.0, 2.0], 3).is_err());
        assert!(top_k::<f64>(&[1.0, 2.0], 0).is_err());
    }

    #[test]
    fn grad_accumulation_is_additive() {
        let mut t = Tensor::<f64>::zeros(vec![3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }
}
