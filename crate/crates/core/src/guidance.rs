//! Energy-based guided sampling.
//!
//! Euler integration of `u(x, t) − λ∇E(x)` with the energy term switched on
//! once `t_i ≥ t_c`. The energy is the physical loss evaluated on the
//! de-normalized state; its gradient is pulled back to normalized
//! coordinates through the affine map before it is added to the drift.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowmatch::{check_steps, Trajectory, VelocityModel};
use crate::linalg::{all_finite, norm};
use crate::loss::DesignLoss;
use crate::rng::batch_noise;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub lambda: f64,
    pub cutoff: f64,
    pub steps: usize,
}

impl GuidanceConfig {
    pub fn new(lambda: f64, cutoff: f64, steps: usize) -> Result<Self> {
        let c = GuidanceConfig { lambda, cutoff, steps };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("λ must be finite and non-negative, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.cutoff) {
            return Err(Error::Config(format!("cutoff time must lie in [0, 1], got {}", self.cutoff)));
        }
        check_steps(self.steps)
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    /// Whether the energy term applies at step `i` (time `i/T`).
    pub fn is_active(&self, i: usize) -> bool {
        i as f64 / self.steps as f64 >= self.cutoff
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    /// Number of Euler steps that receive a physics gradient.
    pub k: usize,
    pub dk: f64,
}

/// Physics-iteration budget of a guided run to `t = 1`.
pub fn physics_budget(config: &GuidanceConfig) -> BudgetReport {
    BudgetReport { k: (0..config.steps).filter(|&i| config.is_active(i)).count(), dk: config.dt() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub loss: f64,
    /// Norm of the loss gradient in normalized coordinates.
    pub grad_norm: f64,
    pub velocity_norm: f64,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidedTrajectory {
    pub trajectory: Trajectory,
    /// One record per Euler step, taken at the state the step starts from.
    pub records: Vec<StepRecord>,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailRecord {
    pub step: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GuidedOutcome {
    Success(GuidedTrajectory),
    Fail(FailRecord),
}

impl GuidedOutcome {
    pub fn success(&self) -> Option<&GuidedTrajectory> {
        match self {
            GuidedOutcome::Success(g) => Some(g),
            GuidedOutcome::Fail(_) => None,
        }
    }

    pub fn is_fail(&self) -> bool {
        matches!(self, GuidedOutcome::Fail(_))
    }
}

fn loss_in_normalized(model: &VelocityModel, loss: &dyn DesignLoss, z: &[f64]) -> Result<(f64, Vec<f64>)> {
    let raw = model.stats.denormalize(z);
    let (l, g) = loss.loss_and_gradient(&raw)?;
    Ok((l, model.stats.gradient_to_normalized(&g)))
}

/// Guided Euler solve from normalized `x0`. Non-finite states and inadmissible
/// terminal designs become [`GuidedOutcome::Fail`] rather than errors.
pub fn sample_energy_guided(
    model: &VelocityModel,
    loss: &dyn DesignLoss,
    config: &GuidanceConfig,
    x0: &[f64],
) -> Result<GuidedOutcome> {
    config.validate()?;
    if x0.len() != model.dim() {
        return Err(Error::Dimension { expected: model.dim(), found: x0.len() });
    }
    if loss.dim() != model.dim() {
        return Err(Error::Dimension { expected: model.dim(), found: loss.dim() });
    }
    let dt = config.dt();
    let mut x = x0.to_vec();
    let mut states = Vec::with_capacity(config.steps + 1);
    let mut records = Vec::with_capacity(config.steps);
    states.push(x.clone());
    for i in 0..config.steps {
        let t = i as f64 * dt;
        let active = config.is_active(i);
        let (l, g) = loss_in_normalized(model, loss, &x)?;
        let u = model.velocity(&x, t, None)?;
        records.push(StepRecord { step: i, t, loss: l, grad_norm: norm(&g), velocity_norm: norm(&u), active });
        if active && config.lambda != 0.0 {
            for ((xi, ui), gi) in x.iter_mut().zip(&u).zip(&g) {
                *xi += dt * (ui - config.lambda * gi);
            }
        } else {
            x.iter_mut().zip(&u).for_each(|(xi, ui)| *xi += dt * ui);
        }
        if !all_finite(&x) {
            return Ok(GuidedOutcome::Fail(FailRecord { step: i, reason: format!("non-finite state after step {i}") }));
        }
        states.push(x.clone());
    }
    let terminal = model.stats.denormalize(&x);
    if !loss.admissible(&terminal) {
        return Ok(GuidedOutcome::Fail(FailRecord {
            step: config.steps,
            reason: "terminal design violates the coefficient bound".into(),
        }));
    }
    let final_loss = loss.loss(&terminal)?;
    Ok(GuidedOutcome::Success(GuidedTrajectory {
        trajectory: Trajectory { steps: config.steps, states, terminal },
        records,
        final_loss,
    }))
}

/// `n` guided runs; run `i` starts from [`batch_noise`]`(d, seed, i)`.
pub fn energy_batch(
    model: &VelocityModel,
    loss: &dyn DesignLoss,
    config: &GuidanceConfig,
    n: usize,
    seed: u64,
    parallel: bool,
) -> Result<Vec<GuidedOutcome>> {
    let run = |i: usize| sample_energy_guided(model, loss, config, &batch_noise(model.dim(), seed, i));
    if parallel {
        (0..n).into_par_iter().map(run).collect()
    } else {
        (0..n).map(run).collect()
    }
}

/// Physical loss along an unguided trajectory, `T + 1` values.
pub fn pseudo_loss_curve(model: &VelocityModel, loss: &dyn DesignLoss, steps: usize, x0: &[f64]) -> Result<Vec<f64>> {
    let tr = crate::flowmatch::sample_unconditional(model, steps, x0, None)?;
    tr.states.iter().map(|z| loss.loss(&model.stats.denormalize(z))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowmatch::sample_unconditional;
    use crate::loss::QuadraticLoss;
    use crate::nn::{Activation, NetworkParams};
    use crate::rng::gaussian_noise;
    use crate::stats::NormStats;

    fn random_field(d: usize, seed: u64) -> VelocityModel {
        let net = NetworkParams::init(&[d + 1, 12, d], Activation::Tanh, seed).unwrap();
        let stats = NormStats::new(vec![0.1; d], vec![0.5; d]).unwrap();
        VelocityModel::new(net, stats, None).unwrap()
    }

    #[test]
    fn budget_examples() {
        let k = |tc, t| physics_budget(&GuidanceConfig::new(10.0, tc, t).unwrap()).k;
        assert_eq!(k(0.0, 1000), 1000);
        assert_eq!(k(0.6, 1000), 400);
        assert_eq!(k(0.8, 200), 40);
        assert_eq!(k(1.0, 200), 0);
        for tc in [0.0, 0.2, 0.6, 0.8] {
            for t in [200, 1000, 2000] {
                assert_eq!(k(tc, t), ((1.0 - tc) * t as f64).round() as usize);
            }
        }
        assert_eq!(physics_budget(&GuidanceConfig::new(1.0, 0.0, 4).unwrap()).dk, 0.25);
    }

    #[test]
    fn config_validation() {
        assert!(GuidanceConfig::new(-1.0, 0.5, 10).is_err());
        assert!(GuidanceConfig::new(1.0, 1.5, 10).is_err());
        assert!(GuidanceConfig::new(1.0, 0.5, 0).is_err());
        assert!(GuidanceConfig::new(f64::INFINITY, 0.5, 10).is_err());
    }

    #[test]
    fn zero_lambda_and_unit_cutoff_match_unconditional() {
        let m = random_field(3, 4);
        let loss = QuadraticLoss::new(vec![0.3, -0.2, 0.5]);
        let x0 = gaussian_noise(3, 8);
        let plain = sample_unconditional(&m, 40, &x0, None).unwrap();
        for cfg in [GuidanceConfig::new(0.0, 0.0, 40).unwrap(), GuidanceConfig::new(50.0, 1.0, 40).unwrap()] {
            let g = sample_energy_guided(&m, &loss, &cfg, &x0).unwrap();
            assert_eq!(g.success().unwrap().trajectory, plain);
        }
    }

    #[test]
    fn activation_flags_follow_cutoff() {
        let m = random_field(2, 1);
        let loss = QuadraticLoss::new(vec![0.0, 0.0]);
        let cfg = GuidanceConfig::new(1.0, 0.35, 20).unwrap();
        let g = sample_energy_guided(&m, &loss, &cfg, &[0.1, 0.2]).unwrap();
        let g = g.success().unwrap();
        assert_eq!(g.records.len(), 20);
        for r in &g.records {
            assert_eq!(r.active, r.t >= 0.35);
            assert!(r.loss.is_finite());
        }
        assert_eq!(g.records.iter().filter(|r| r.active).count(), physics_budget(&cfg).k);
    }

    #[test]
    fn zero_field_quadratic_closed_form() {
        let d = 4;
        let m = VelocityModel::zero(NormStats::identity(d), &[3]).unwrap();
        let a = vec![0.5, -1.0, 2.0, 0.25];
        let loss = QuadraticLoss::new(a.clone());
        let x0 = gaussian_noise(d, 3);
        for (lambda, tc, steps) in [(5.0, 0.0, 100), (20.0, 0.6, 1000), (0.5, 0.25, 8)] {
            let cfg = GuidanceConfig::new(lambda, tc, steps).unwrap();
            let k = physics_budget(&cfg).k as i32;
            let g = sample_energy_guided(&m, &loss, &cfg, &x0).unwrap();
            let end = &g.success().unwrap().trajectory.terminal;
            let factor = (1.0 - 2.0 * lambda * cfg.dt()).powi(k);
            for j in 0..d {
                let expected = a[j] + factor * (x0[j] - a[j]);
                assert!((end[j] - expected).abs() < 1e-10, "{lambda}/{tc}/{steps}: {} vs {expected}", end[j]);
            }
        }
    }

    #[test]
    fn gradient_is_pulled_back_through_normalization() {
        // Zero drift, one active step: z₁ = z₀ − Δtλ·std ⊙ ∇E(raw).
        let stats = NormStats::new(vec![1.0, 2.0], vec![0.5, 4.0]).unwrap();
        let m = VelocityModel::zero(stats.clone(), &[2]).unwrap();
        let loss = QuadraticLoss::new(vec![0.0, 0.0]);
        let z0 = [0.2, -0.1];
        let raw = stats.denormalize(&z0);
        let g = sample_energy_guided(&m, &loss, &GuidanceConfig::new(0.1, 0.0, 1).unwrap(), &z0).unwrap();
        let z1 = &g.success().unwrap().trajectory.states[1];
        for j in 0..2 {
            assert!((z1[j] - (z0[j] - 0.1 * stats.std[j] * 2.0 * raw[j])).abs() < 1e-15);
        }
    }

    #[test]
    fn divergence_is_a_fail_record() {
        let m = VelocityModel::zero(NormStats::identity(2), &[2]).unwrap();
        let loss = QuadraticLoss::new(vec![0.0, 0.0]);
        // Factor 1 − 2λΔt = −399 per step overflows long before the end.
        let g = sample_energy_guided(&m, &loss, &GuidanceConfig::new(1e5, 0.0, 500).unwrap(), &[1.0, 1.0]).unwrap();
        match g {
            GuidedOutcome::Fail(f) => assert!(f.step < 500),
            other => panic!("expected a fail record, got {other:?}"),
        }
    }

    #[test]
    fn lambda_continuity() {
        let m = random_field(3, 9);
        let loss = QuadraticLoss::new(vec![1.0, 1.0, 1.0]);
        let x0 = gaussian_noise(3, 2);
        let base = sample_unconditional(&m, 50, &x0, None).unwrap().terminal;
        let dist = |lambda: f64| {
            let g = sample_energy_guided(&m, &loss, &GuidanceConfig::new(lambda, 0.0, 50).unwrap(), &x0).unwrap();
            let end = g.success().unwrap().trajectory.terminal.clone();
            end.iter().zip(&base).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        let (small, mid) = (dist(1e-6), dist(1e-3));
        assert!(small < mid && mid < dist(1.0), "{small} {mid}");
        assert!(small < 1e-5);
    }

    #[test]
    fn pseudo_loss_curve_contract() {
        let m = VelocityModel::zero(NormStats::identity(2), &[2]).unwrap();
        let loss = QuadraticLoss::new(vec![1.0, 0.0]);
        let c = pseudo_loss_curve(&m, &loss, 25, &[0.0, 1.0]).unwrap();
        assert_eq!(c.len(), 26);
        assert!(c.iter().all(|&l| l == 2.0));
    }

    #[test]
    fn batch_is_schedule_independent() {
        let m = random_field(3, 5);
        let loss = QuadraticLoss::new(vec![0.0; 3]);
        let cfg = GuidanceConfig::new(2.0, 0.2, 30).unwrap();
        let serial = energy_batch(&m, &loss, &cfg, 16, 77, false).unwrap();
        let parallel = energy_batch(&m, &loss, &cfg, 16, 77, true).unwrap();
        assert_eq!(serial, parallel);
        assert_eq!(serial[3], sample_energy_guided(&m, &loss, &cfg, &batch_noise(3, 77, 3)).unwrap());
    }
}
