//! Dflow-SUR: optimize the initial noise through the unrolled Euler solve.
//!
//! Each iteration solves the flow ODE from `x₀`, evaluates the physical loss
//! on the terminal design, back-propagates `∇_{x₁}L` through every Euler step
//! (`v_i = v_{i+1} + Δt·J_iᵀ v_{i+1}`) and takes a plain gradient step on `x₀`.

use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flowmatch::{check_steps, VelocityModel};
use crate::guidance::FailRecord;
use crate::linalg::all_finite;
use crate::loss::DesignLoss;
use crate::nn::ForwardCache;
use crate::rng::batch_noise;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DflowConfig {
    /// Maximum optimization iterations `K`.
    pub iterations: usize,
    pub tau: f64,
    /// Euler steps per solve `T`.
    pub steps: usize,
    pub tol: f64,
}

impl Default for DflowConfig {
    fn default() -> Self {
        DflowConfig { iterations: 200, tau: 0.1, steps: 50, tol: 1e-8 }
    }
}

impl DflowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("Dflow needs at least one iteration".into()));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("step size τ must be finite and non-negative, got {}", self.tau)));
        }
        if self.tol.is_nan() || self.tol < 0.0 {
            return Err(Error::Config(format!("tolerance must be non-negative, got {}", self.tol)));
        }
        check_steps(self.steps)
    }
}

/// Forward caches of one Euler solve, enough to run the reverse sweep.
#[derive(Debug, Clone)]
pub struct SolveTape {
    pub steps: usize,
    pub caches: Vec<ForwardCache>,
    /// Terminal state in normalized coordinates.
    pub terminal: Vec<f64>,
}

/// Euler solve that keeps every step's forward cache.
pub fn taped_solve(model: &VelocityModel, steps: usize, x0: &[f64]) -> Result<SolveTape> {
    check_steps(steps)?;
    if x0.len() != model.dim() {
        return Err(Error::Dimension { expected: model.dim(), found: x0.len() });
    }
    let dt = 1.0 / steps as f64;
    let mut x = x0.to_vec();
    let mut caches = Vec::with_capacity(steps);
    for i in 0..steps {
        let (u, cache) = model.velocity_with_cache(&x, i as f64 * dt, None)?;
        x.iter_mut().zip(&u).for_each(|(xi, ui)| *xi += dt * ui);
        if !all_finite(&x) {
            return Err(Error::Numeric(format!("non-finite state after Euler step {i}")));
        }
        caches.push(cache);
    }
    Ok(SolveTape { steps, caches, terminal: x })
}

/// Reverse sweep over a recorded solve: returns `(∂x_T/∂x₀)ᵀ v`.
pub fn reverse_sweep(model: &VelocityModel, tape: &SolveTape, terminal_cotangent: &[f64]) -> Result<Vec<f64>> {
    if tape.caches.len() != tape.steps {
        return Err(Error::Contract(format!("tape holds {} of {} forward states", tape.caches.len(), tape.steps)));
    }
    if terminal_cotangent.len() != model.dim() {
        return Err(Error::Dimension { expected: model.dim(), found: terminal_cotangent.len() });
    }
    let dt = 1.0 / tape.steps as f64;
    let mut v = terminal_cotangent.to_vec();
    for cache in tape.caches.iter().rev() {
        let jv = model.vjp_state(cache, &v)?;
        v.iter_mut().zip(&jv).for_each(|(vi, ji)| *vi += dt * ji);
    }
    Ok(v)
}

/// `(∂x_T/∂x₀)ᵀ v` for the `steps`-step Euler solve from `x0`, recomputing the forward pass.
pub fn unrolled_vjp(model: &VelocityModel, steps: usize, x0: &[f64], terminal_cotangent: &[f64]) -> Result<Vec<f64>> {
    reverse_sweep(model, &taped_solve(model, steps, x0)?, terminal_cotangent)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DflowResult {
    /// Best-loss initial noise.
    pub x0: Vec<f64>,
    /// Raw terminal design of the solve from `x0`.
    pub terminal: Vec<f64>,
    pub loss_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub best_loss: f64,
    pub wall_time: f64,
}

impl DflowResult {
    /// Equality ignoring the wall-clock field.
    pub fn same_run(&self, other: &DflowResult) -> bool {
        DflowResult { wall_time: 0.0, ..self.clone() } == DflowResult { wall_time: 0.0, ..other.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DflowOutcome {
    Success(DflowResult),
    Fail(FailRecord),
}

impl DflowOutcome {
    pub fn success(&self) -> Option<&DflowResult> {
        match self {
            DflowOutcome::Success(r) => Some(r),
            DflowOutcome::Fail(_) => None,
        }
    }

    pub fn is_fail(&self) -> bool {
        matches!(self, DflowOutcome::Fail(_))
    }

    pub fn same_run(&self, other: &DflowOutcome) -> bool {
        match (self, other) {
            (DflowOutcome::Success(a), DflowOutcome::Success(b)) => a.same_run(b),
            (a, b) => a == b,
        }
    }
}

/// Gradient descent on the initial noise.
pub fn dflow_sur(
    model: &VelocityModel,
    loss: &dyn DesignLoss,
    x0_init: &[f64],
    config: &DflowConfig,
) -> Result<DflowOutcome> {
    config.validate()?;
    if loss.dim() != model.dim() {
        return Err(Error::Dimension { expected: model.dim(), found: loss.dim() });
    }
    if !all_finite(x0_init) {
        return Err(Error::Numeric("initial noise is not finite".into()));
    }
    let start = Instant::now();
    let mut x0 = x0_init.to_vec();
    let mut history = Vec::with_capacity(config.iterations);
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    let mut converged = false;
    for k in 1..=config.iterations {
        let tape = match taped_solve(model, config.steps, &x0) {
            Ok(t) => t,
            Err(Error::Numeric(msg)) => return Ok(DflowOutcome::Fail(FailRecord { step: k, reason: msg })),
            Err(e) => return Err(e),
        };
        let terminal = model.stats.denormalize(&tape.terminal);
        let (l, g_raw) = loss.loss_and_gradient(&terminal)?;
        if !l.is_finite() {
            return Ok(DflowOutcome::Fail(FailRecord { step: k, reason: format!("non-finite loss at iteration {k}") }));
        }
        history.push(l);
        if best.as_ref().is_none_or(|(b, _, _)| l < *b) {
            best = Some((l, x0.clone(), terminal));
        }
        if l <= config.tol {
            converged = true;
            break;
        }
        if k == config.iterations {
            break;
        }
        let v = reverse_sweep(model, &tape, &model.stats.gradient_to_normalized(&g_raw))?;
        let step = |tau: f64| -> Vec<f64> { x0.iter().zip(&v).map(|(x, g)| x - tau * g).collect() };
        let mut next = step(config.tau);
        if !all_finite(&next) {
            next = step(0.5 * config.tau);
            if !all_finite(&next) {
                return Ok(DflowOutcome::Fail(FailRecord {
                    step: k,
                    reason: format!("non-finite noise update at iteration {k} after halving τ"),
                }));
            }
        }
        x0 = next;
    }
    let (best_loss, x0, terminal) = best.expect("at least one iteration ran");
    Ok(DflowOutcome::Success(DflowResult {
        x0,
        terminal,
        iterations: history.len(),
        loss_history: history,
        converged,
        best_loss,
        wall_time: start.elapsed().as_secs_f64(),
    }))
}

/// `n` independent runs; run `i` starts from [`batch_noise`]`(d, seed, i)`.
pub fn dflow_batch(
    model: &VelocityModel,
    loss: &dyn DesignLoss,
    n: usize,
    config: &DflowConfig,
    seed: u64,
    parallel: bool,
) -> Result<Vec<DflowOutcome>> {
    if n == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let run = |i: usize| dflow_sur(model, loss, &batch_noise(model.dim(), seed, i), config);
    if parallel {
        (0..n).into_par_iter().map(run).collect()
    } else {
        (0..n).map(run).collect()
    }
}
