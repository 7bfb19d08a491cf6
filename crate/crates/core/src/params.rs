//! Uniform access to the parameter tensors of cells and models, used by the
//! optimizer, the gradient checker and checkpoint serialization.

use crate::linalg::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

impl<'a> ParamTensor<'a> {
    pub fn matrix(name: impl Into<String>, m: &'a Matrix) -> Self {
        ParamTensor {
            name: name.into(),
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice(),
        }
    }

    pub fn vector(name: impl Into<String>, v: &'a Vector) -> Self {
        ParamTensor {
            name: name.into(),
            shape: vec![v.dim()],
            data: v.as_slice(),
        }
    }

    fn prefixed(mut self, prefix: &str) -> Self {
        self.name = format!("{prefix}.{}", self.name);
        self
    }
}

/// A set of parameter tensors visited in a fixed order. `tensors` and
/// `tensors_mut` must enumerate the same tensors in the same order.
pub trait Parameters: Clone {
    fn tensors(&self) -> Vec<ParamTensor<'_>>;

    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Same shapes, all entries zero.
    fn zeroed(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// `self += other`, tensor by tensor.
    fn accumulate(&mut self, other: &Self) {
        let src = other.tensors();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (d, s) in dst.iter_mut().zip(src.data) {
                *d += s;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }
}

pub(crate) fn with_prefix<'a>(prefix: &str, tensors: Vec<ParamTensor<'a>>) -> Vec<ParamTensor<'a>> {
    tensors.into_iter().map(|t| t.prefixed(prefix)).collect()
}
