//! Objectives over raw design coordinates.

use crate::error::{Error, Result};
use crate::geometry::{DesignVector, DESIGN_DIM, MAX_COEFFICIENT};
use crate::physics::{physical_loss, PhysicalTarget, PhysicsEvaluator};

/// A differentiable scalar objective on a raw design vector.
pub trait DesignLoss: Sync {
    fn dim(&self) -> usize;

    fn loss_and_gradient(&self, raw: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn loss(&self, raw: &[f64]) -> Result<f64> {
        Ok(self.loss_and_gradient(raw)?.0)
    }

    /// Whether a terminal design counts as a usable sample.
    fn admissible(&self, raw: &[f64]) -> bool {
        raw.iter().all(|v| v.is_finite())
    }
}

/// `(Ĉ_L(x) − y)²` under any lift evaluator.
pub struct PhysicalLoss<'a> {
    pub evaluator: &'a dyn PhysicsEvaluator,
    pub target: PhysicalTarget,
}

impl<'a> PhysicalLoss<'a> {
    pub fn new(evaluator: &'a dyn PhysicsEvaluator, target: PhysicalTarget) -> Self {
        PhysicalLoss { evaluator, target }
    }
}

impl DesignLoss for PhysicalLoss<'_> {
    fn dim(&self) -> usize {
        DESIGN_DIM
    }

    fn loss_and_gradient(&self, raw: &[f64]) -> Result<(f64, Vec<f64>)> {
        let design = DesignVector::from_slice(raw)?;
        let (loss, grad) = physical_loss(self.evaluator, &design, self.target)?;
        Ok((loss, grad.to_vec()))
    }

    fn admissible(&self, raw: &[f64]) -> bool {
        raw.iter().all(|v| v.is_finite() && v.abs() <= MAX_COEFFICIENT)
    }
}

/// `‖x − c‖²`, mostly for checking solvers against closed forms.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticLoss {
    pub center: Vec<f64>,
}

impl QuadraticLoss {
    pub fn new(center: Vec<f64>) -> Self {
        QuadraticLoss { center }
    }
}

impl DesignLoss for QuadraticLoss {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn loss_and_gradient(&self, raw: &[f64]) -> Result<(f64, Vec<f64>)> {
        if raw.len() != self.center.len() {
            return Err(Error::Dimension { expected: self.center.len(), found: raw.len() });
        }
        let diff: Vec<f64> = raw.iter().zip(&self.center).map(|(x, c)| x - c).collect();
        Ok((diff.iter().map(|d| d * d).sum(), diff.iter().map(|d| 2.0 * d).collect()))
    }
}
