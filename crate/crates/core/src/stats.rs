//! Per-dimension standardization statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard deviations below this are floored so normalization stays invertible.
pub const MIN_STD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::Shape(format!("mean has {} entries, std has {}", mean.len(), std.len())));
        }
        if mean.iter().any(|m| !m.is_finite()) || std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config("normalization statistics must be finite with positive std".into()));
        }
        Ok(NormStats { mean, std })
    }

    /// Mean and sample standard deviation (divisor `n-1`) of each column.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::Config("cannot compute statistics of an empty set".into()))?;
        let dim = first.as_ref().len();
        if rows.iter().any(|r| r.as_ref().len() != dim) {
            return Err(Error::Shape("rows have inconsistent widths".into()));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            mean.iter_mut().zip(r.as_ref()).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            var.iter_mut().zip(r.as_ref()).zip(&mean).for_each(|((v, x), m)| *v += (x - m).powi(2));
        }
        let denom = (n - 1.0).max(1.0);
        let std = var.into_iter().map(|v| (v / denom).sqrt().max(MIN_STD)).collect();
        NormStats::new(mean, std)
    }

    pub fn identity(dim: usize) -> Self {
        NormStats { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (x - m) / s).collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| m + s * x).collect()
    }

    /// Chain rule through `raw = mean + std ⊙ z`: maps a raw-space gradient to normalized space.
    pub fn gradient_to_normalized(&self, raw_grad: &[f64]) -> Vec<f64> {
        raw_grad.iter().zip(&self.std).map(|(g, s)| g * s).collect()
    }
}
