//! Per-variable standardisation fitted on the training segment.

use crate::error::{check_dim, Error, Result};
use crate::linalg::Vector;

/// Variables whose training-segment spread is below this keep unit scale.
const MIN_SCALE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn from_parts(mean: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        check_dim("standardizer", mean.len(), scale.len())?;
        if !mean.iter().chain(&scale).all(|v| v.is_finite()) || scale.iter().any(|&s| s <= 0.0) {
            return Err(Error::NonFinite("standardizer"));
        }
        Ok(Standardizer { mean, scale })
    }

    /// Mean and population standard deviation per variable.
    pub fn fit(states: &[Vector]) -> Result<Self> {
        let first = states.first().ok_or(Error::EmptySequence("standardizer fit"))?;
        let dim = first.dim();
        let count = states.len() as f64;
        let mut mean = vec![0.0; dim];
        for s in states {
            check_dim("standardizer fit", dim, s.dim())?;
            for (m, v) in mean.iter_mut().zip(s.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; dim];
        for s in states {
            for ((acc, v), m) in var.iter_mut().zip(s.iter()).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let sd = (v / count).sqrt();
                if sd < MIN_SCALE {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Standardizer { mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn transform(&self, v: &Vector) -> Vector {
        Vector::from(
            v.iter()
                .zip(&self.mean)
                .zip(&self.scale)
                .map(|((x, m), s)| (x - m) / s)
                .collect::<Vec<_>>(),
        )
    }

    pub fn inverse(&self, v: &Vector) -> Vector {
        Vector::from(
            v.iter()
                .zip(&self.mean)
                .zip(&self.scale)
                .map(|((x, m), s)| x * s + m)
                .collect::<Vec<_>>(),
        )
    }
}
