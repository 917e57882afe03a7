//! Aerodynamic evaluators.
//!
//! [`ThinAirfoilOracle`] is the ground truth: inviscid thin-airfoil theory,
//! `C_L = 2π(α − α_L0)` with the zero-lift angle from the Glauert camber
//! integral. It is affine in the CST coefficients, so its gradient is a
//! constant vector. [`SurrogateModel`] is a small dropout network fit to
//! oracle labels and provides the MC-dropout uncertainty estimate.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{basis_slope, camber_slope, DesignDataset, DesignVector, COEFFS_PER_SURFACE, DESIGN_DIM};
use crate::nn::{Activation, AdamConfig, AdamState, DropoutMask, NetworkParams};
use crate::rng::{seeded, split_seed};
use crate::stats::NormStats;

pub const DEFAULT_QUADRATURE_NODES: usize = 256;
pub const MAX_ALPHA: f64 = 0.35;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    /// Angle of attack in radians.
    pub alpha: f64,
}

impl OperatingPoint {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha.abs() < MAX_ALPHA) {
            return Err(Error::Domain(format!("angle of attack {alpha} rad outside the thin-airfoil regime")));
        }
        Ok(OperatingPoint { alpha })
    }

    pub fn from_degrees(deg: f64) -> Result<Self> {
        Self::new(deg.to_radians())
    }
}

impl Default for OperatingPoint {
    /// α = 2°.
    fn default() -> Self {
        OperatingPoint { alpha: 2f64.to_radians() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalTarget {
    pub lift: f64,
}

impl PhysicalTarget {
    pub fn new(lift: f64) -> Result<Self> {
        if !lift.is_finite() {
            return Err(Error::Config(format!("target lift coefficient must be finite, got {lift}")));
        }
        Ok(PhysicalTarget { lift })
    }
}

/// Differentiable lift predictor over raw design coordinates.
pub trait PhysicsEvaluator: Sync {
    fn lift(&self, design: &DesignVector) -> Result<f64>;

    fn lift_with_gradient(&self, design: &DesignVector) -> Result<(f64, [f64; DESIGN_DIM])>;
}

impl<E: PhysicsEvaluator + ?Sized> PhysicsEvaluator for &E {
    fn lift(&self, design: &DesignVector) -> Result<f64> {
        (**self).lift(design)
    }

    fn lift_with_gradient(&self, design: &DesignVector) -> Result<(f64, [f64; DESIGN_DIM])> {
        (**self).lift_with_gradient(design)
    }
}

#[derive(Debug, Clone)]
pub struct ThinAirfoilOracle {
    op: OperatingPoint,
    thetas: Vec<f64>,
    gradient: [f64; DESIGN_DIM],
}

impl ThinAirfoilOracle {
    pub fn new(op: OperatingPoint) -> Self {
        Self::with_nodes(op, DEFAULT_QUADRATURE_NODES)
    }

    /// Midpoint rule with `nodes` points in θ; the endpoints are never sampled.
    pub fn with_nodes(op: OperatingPoint, nodes: usize) -> Self {
        let nodes = nodes.max(1);
        let h = PI / nodes as f64;
        let thetas: Vec<f64> = (0..nodes).map(|k| (k as f64 + 0.5) * h).collect();
        // ∂C_L/∂a_i = 2 Σ_k h (cos θ_k − 1) · ½ φ_i'(x_k), identical for both surfaces.
        let mut half = [0.0; COEFFS_PER_SURFACE];
        for (i, g) in half.iter_mut().enumerate() {
            *g = thetas.iter().map(|&t| h * (t.cos() - 1.0) * basis_slope(i, 0.5 * (1.0 - t.cos()))).sum::<f64>();
        }
        let mut gradient = [0.0; DESIGN_DIM];
        gradient[..COEFFS_PER_SURFACE].copy_from_slice(&half);
        gradient[COEFFS_PER_SURFACE..].copy_from_slice(&half);
        ThinAirfoilOracle { op, thetas, gradient }
    }

    pub fn operating_point(&self) -> OperatingPoint {
        self.op
    }

    pub fn nodes(&self) -> usize {
        self.thetas.len()
    }

    /// `∂C_L/∂design`, independent of the design.
    pub fn gradient(&self) -> [f64; DESIGN_DIM] {
        self.gradient
    }

    /// Zero-lift angle `α_L0 = −(1/π) ∫₀^π (dz_c/dx)(cos θ − 1) dθ` for an arbitrary slope provider.
    pub fn zero_lift_angle_from(&self, mut slope: impl FnMut(f64) -> f64) -> Result<f64> {
        let h = PI / self.thetas.len() as f64;
        let mut integral = 0.0;
        for &theta in &self.thetas {
            let s = slope(theta);
            if !s.is_finite() {
                return Err(Error::Numeric(format!("non-finite camber slope at θ={theta}")));
            }
            integral += s * (theta.cos() - 1.0) * h;
        }
        Ok(-integral / PI)
    }

    pub fn zero_lift_angle(&self, design: &DesignVector) -> Result<f64> {
        let slopes = camber_slope(design, &self.thetas)?;
        let mut it = slopes.into_iter();
        self.zero_lift_angle_from(|_| it.next().expect("one slope per node"))
    }

    pub fn lift_from_slope(&self, slope: impl FnMut(f64) -> f64) -> Result<f64> {
        Ok(2.0 * PI * (self.op.alpha - self.zero_lift_angle_from(slope)?))
    }
}

impl PhysicsEvaluator for ThinAirfoilOracle {
    fn lift(&self, design: &DesignVector) -> Result<f64> {
        if !design.is_finite() {
            return Err(Error::Numeric("non-finite design".into()));
        }
        Ok(2.0 * PI * (self.op.alpha - self.zero_lift_angle(design)?))
    }

    fn lift_with_gradient(&self, design: &DesignVector) -> Result<(f64, [f64; DESIGN_DIM])> {
        Ok((self.lift(design)?, self.gradient))
    }
}

/// `(Ĉ_L − y)²` and its gradient `2(Ĉ_L − y)·∂Ĉ_L/∂design`.
pub fn physical_loss(
    evaluator: &dyn PhysicsEvaluator,
    design: &DesignVector,
    target: PhysicalTarget,
) -> Result<(f64, [f64; DESIGN_DIM])> {
    let (lift, grad) = evaluator.lift_with_gradient(design)?;
    let residual = lift - target.lift;
    Ok((residual * residual, grad.map(|g| 2.0 * residual * g)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateConfig {
    pub hidden: Vec<usize>,
    pub dropout_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub validation_fraction: f64,
    /// Early stop once validation MSE falls below this.
    pub target_mse: f64,
    /// Multiplier on the initial weights; small values start the tanh units near their linear regime.
    pub init_gain: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            hidden: vec![64, 64],
            dropout_rate: 0.01,
            max_epochs: 1500,
            batch_size: 32,
            learning_rate: 1e-3,
            validation_fraction: 0.2,
            target_mse: 1e-5,
            init_gain: 1.0,
        }
    }
}

/// Above this validation MSE after the epoch budget, training is reported as failed.
pub const SURROGATE_FAILURE_MSE: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    pub network: NetworkParams,
    pub stats: NormStats,
    pub dropout_rate: f64,
    /// Network output is `(C_L − label_mean) / label_scale`.
    pub label_mean: f64,
    pub label_scale: f64,
    pub validation_mse: f64,
}

impl SurrogateModel {
    pub fn new(network: NetworkParams, stats: NormStats, dropout_rate: f64) -> Result<Self> {
        if network.input_dim() != DESIGN_DIM || network.output_dim() != 1 || stats.dim() != DESIGN_DIM {
            return Err(Error::Shape(format!(
                "surrogate must map {DESIGN_DIM} inputs to 1 output, got {:?}",
                network.layer_sizes()
            )));
        }
        Ok(SurrogateModel { network, stats, dropout_rate, label_mean: 0.0, label_scale: 1.0, validation_mse: f64::NAN })
    }

    fn unscale(&self, y: f64) -> f64 {
        self.label_mean + self.label_scale * y
    }

    pub fn predict(&self, design: &DesignVector, mask: Option<&DropoutMask>) -> Result<f64> {
        if !design.is_finite() {
            return Err(Error::Numeric("non-finite design".into()));
        }
        let z = self.stats.normalize(&design.to_array());
        Ok(self.unscale(self.network.predict(&z, mask)?[0]))
    }

    /// Prediction and its gradient in raw design coordinates (VJP through the network, then `1/std`).
    pub fn predict_with_gradient(&self, design: &DesignVector) -> Result<(f64, [f64; DESIGN_DIM])> {
        if !design.is_finite() {
            return Err(Error::Numeric("non-finite design".into()));
        }
        let z = self.stats.normalize(&design.to_array());
        let (y, cache) = self.network.forward(&z, None)?;
        let dz = self.network.vjp_input(&cache, &[1.0])?;
        let mut grad = [0.0; DESIGN_DIM];
        for (i, g) in grad.iter_mut().enumerate() {
            *g = self.label_scale * dz[i] / self.stats.std[i];
        }
        Ok((self.unscale(y[0]), grad))
    }

    /// MC-dropout spread over `n_passes` stochastic passes; pass `i` draws its mask from `split_seed(seed, i)`.
    pub fn uq(&self, design: &DesignVector, n_passes: usize, rate: f64, seed: u64) -> Result<UqReport> {
        if n_passes < 2 {
            return Err(Error::Config(format!("UQ needs at least 2 passes, got {n_passes}")));
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        let z = self.stats.normalize(&design.to_array());
        let widths = self.network.hidden_widths();
        let preds = (0..n_passes)
            .map(|i| {
                let mask = DropoutMask::sample(rate, widths, &mut seeded(split_seed(seed, i as u64)))?;
                Ok(self.unscale(self.network.predict(&z, Some(&mask))?[0]))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(UqReport::from_samples(&preds))
    }
}

impl PhysicsEvaluator for SurrogateModel {
    fn lift(&self, design: &DesignVector) -> Result<f64> {
        self.predict(design, None)
    }

    fn lift_with_gradient(&self, design: &DesignVector) -> Result<(f64, [f64; DESIGN_DIM])> {
        self.predict_with_gradient(design)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UqReport {
    pub mu: f64,
    pub sigma: f64,
    pub n_passes: usize,
}

impl UqReport {
    /// Mean and sample standard deviation (divisor `N-1`).
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        // Offset from the first sample so identical passes give σ = 0 exactly.
        let base = samples[0];
        let mu = base + samples.iter().map(|f| f - base).sum::<f64>() / n;
        let var = samples.iter().map(|f| (f - mu).powi(2)).sum::<f64>() / (n - 1.0);
        UqReport { mu, sigma: var.sqrt(), n_passes: samples.len() }
    }
}

/// Ground truth or learned surrogate, chosen at run time.
#[derive(Debug, Clone)]
pub enum Evaluator {
    Oracle(ThinAirfoilOracle),
    Surrogate(SurrogateModel),
}

impl PhysicsEvaluator for Evaluator {
    fn lift(&self, design: &DesignVector) -> Result<f64> {
        match self {
            Evaluator::Oracle(o) => o.lift(design),
            Evaluator::Surrogate(s) => s.lift(design),
        }
    }

    fn lift_with_gradient(&self, design: &DesignVector) -> Result<(f64, [f64; DESIGN_DIM])> {
        match self {
            Evaluator::Oracle(o) => o.lift_with_gradient(design),
            Evaluator::Surrogate(s) => s.lift_with_gradient(design),
        }
    }
}

/// Fits a `16-64-64-1` tanh network to oracle lift labels on standardized inputs,
/// with dropout active during training.
pub fn train_surrogate(
    dataset: &DesignDataset,
    oracle: &ThinAirfoilOracle,
    config: &SurrogateConfig,
    seed: u64,
) -> Result<SurrogateModel> {
    if dataset.len() < 64 {
        return Err(Error::Config(format!("surrogate training needs at least 64 designs, got {}", dataset.len())));
    }
    if config.batch_size == 0 || config.max_epochs == 0 {
        return Err(Error::Config("batch size and epoch budget must be positive".into()));
    }
    let labels = dataset.designs().iter().map(|d| oracle.lift(d)).collect::<Result<Vec<f64>>>()?;
    let inputs = dataset.normalized_rows();
    let label_mean = labels.iter().sum::<f64>() / labels.len() as f64;
    let label_scale = (labels.iter().map(|l| (l - label_mean).powi(2)).sum::<f64>() / labels.len() as f64)
        .sqrt()
        .max(crate::stats::MIN_STD);
    let targets: Vec<f64> = labels.iter().map(|l| (l - label_mean) / label_scale).collect();

    let mut rng = seeded(split_seed(seed, 0));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    shuffle(&mut order, &mut rng);
    let n_val = ((dataset.len() as f64 * config.validation_fraction).round() as usize).clamp(1, dataset.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();

    let mut sizes = vec![DESIGN_DIM];
    sizes.extend(&config.hidden);
    sizes.push(1);
    let mut network = NetworkParams::init(&sizes, Activation::Tanh, split_seed(seed, 1))?;
    for w in network.weights_mut() {
        w.iter_mut().for_each(|v| *v *= config.init_gain);
    }
    let mut opt = AdamState::for_network(AdamConfig::with_learning_rate(config.learning_rate), &network);
    let mut dropout_rng = seeded(split_seed(seed, 2));

    let val_mse = |net: &NetworkParams| -> Result<f64> {
        let mut sum = 0.0;
        for &i in val_idx {
            let r = label_scale * (net.predict(&inputs[i], None)?[0] - targets[i]);
            sum += r * r;
        }
        Ok(sum / val_idx.len() as f64)
    };

    let mut best = (f64::INFINITY, network.clone());
    for epoch in 0..config.max_epochs {
        // Cosine decay to 1% of the base rate damps the dropout-induced jitter late in training.
        let progress = epoch as f64 / config.max_epochs as f64;
        opt.set_learning_rate(config.learning_rate * (0.01 + 0.99 * 0.5 * (1.0 + (PI * progress).cos())));
        shuffle(&mut train_idx, &mut rng);
        for chunk in train_idx.chunks(config.batch_size) {
            let rows = chunk.len();
            let batch: Vec<f64> = chunk.iter().flat_map(|&i| inputs[i].iter().copied()).collect();
            let cache = network.forward_batch(&batch, rows, Some((config.dropout_rate, &mut dropout_rng)))?;
            let cot: Vec<f64> =
                cache.output().iter().zip(chunk).map(|(p, &i)| 2.0 * (p - targets[i]) / rows as f64).collect();
            let grads = network.backward_params_batch(&cache, &cot)?;
            if !grads.is_finite() {
                return Err(Error::Training(format!("non-finite surrogate gradient in epoch {epoch}")));
            }
            opt.step(&mut network, &grads)?;
        }
        let mse = val_mse(&network)?;
        if mse < best.0 {
            best = (mse, network.clone());
        }
        if mse < config.target_mse {
            log::debug!("surrogate reached validation MSE {mse:.3e} after {} epochs", epoch + 1);
            break;
        }
    }
    let (mse, network) = best;
    if mse.is_nan() || mse > SURROGATE_FAILURE_MSE {
        return Err(Error::Training(format!(
            "surrogate validation MSE {mse:.3e} after {} epochs exceeds {SURROGATE_FAILURE_MSE}",
            config.max_epochs
        )));
    }
    Ok(SurrogateModel {
        network,
        stats: dataset.stats().clone(),
        dropout_rate: config.dropout_rate,
        label_mean,
        label_scale,
        validation_mse: mse,
    })
}

/// Fisher-Yates over a seeded stream.
pub(crate) fn shuffle<T>(items: &mut [T], rng: &mut crate::rng::Rng) {
    use rand::Rng as _;
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
