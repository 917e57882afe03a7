//! Flow-matching training and the plain Euler sampler.
//!
//! The velocity field is a dense network on `(x_t, t)` (plus a normalized
//! target label for the conditional variant) acting in standardized design
//! coordinates. Training regresses onto the straight-path velocity `x₁ − x₀`.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::linalg::all_finite;
use crate::nn::{Activation, AdamConfig, AdamState, ForwardCache, NetworkParams};
use crate::physics::shuffle;
use crate::rng::{seeded, split_seed, standard_normal_vec};
use crate::stats::NormStats;

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityModel {
    pub network: NetworkParams,
    pub stats: NormStats,
    /// Present for conditional models: standardization of the label column.
    pub label_stats: Option<NormStats>,
}

impl VelocityModel {
    pub fn new(network: NetworkParams, stats: NormStats, label_stats: Option<NormStats>) -> Result<Self> {
        let d = stats.dim();
        let extra = if label_stats.is_some() { 2 } else { 1 };
        if network.input_dim() != d + extra || network.output_dim() != d {
            return Err(Error::Shape(format!(
                "velocity network {:?} does not fit a {}-dimensional {} model",
                network.layer_sizes(),
                d,
                if label_stats.is_some() { "conditional" } else { "unconditional" }
            )));
        }
        if let Some(ls) = &label_stats {
            if ls.dim() != 1 {
                return Err(Error::Shape(format!("label statistics must be 1-dimensional, got {}", ls.dim())));
            }
        }
        Ok(VelocityModel { network, stats, label_stats })
    }

    /// A model whose drift is identically zero.
    pub fn zero(stats: NormStats, hidden: &[usize]) -> Result<Self> {
        let d = stats.dim();
        let mut sizes = vec![d + 1];
        sizes.extend(hidden);
        sizes.push(d);
        VelocityModel::new(NetworkParams::zeros(&sizes, Activation::Tanh)?, stats, None)
    }

    pub fn dim(&self) -> usize {
        self.stats.dim()
    }

    pub fn is_conditional(&self) -> bool {
        self.label_stats.is_some()
    }

    fn input(&self, x: &[f64], t: f64, condition: Option<f64>) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), found: x.len() });
        }
        let mut input = Vec::with_capacity(self.network.input_dim());
        input.extend_from_slice(x);
        input.push(t);
        match (&self.label_stats, condition) {
            (Some(ls), Some(y)) => input.push((y - ls.mean[0]) / ls.std[0]),
            (None, None) => {}
            (Some(_), None) => return Err(Error::Config("conditional model needs a target label".into())),
            (None, Some(_)) => return Err(Error::Config("unconditional model cannot take a target label".into())),
        }
        Ok(input)
    }

    /// `u(x, t)` in normalized coordinates.
    pub fn velocity(&self, x: &[f64], t: f64, condition: Option<f64>) -> Result<Vec<f64>> {
        self.network.predict(&self.input(x, t, condition)?, None)
    }

    pub fn velocity_with_cache(&self, x: &[f64], t: f64, condition: Option<f64>) -> Result<(Vec<f64>, ForwardCache)> {
        self.network.forward(&self.input(x, t, condition)?, None)
    }

    /// `(∂u/∂x)ᵀ v`; cotangents for the time and label inputs are dropped.
    pub fn vjp_state(&self, cache: &ForwardCache, cotangent: &[f64]) -> Result<Vec<f64>> {
        let mut full = self.network.vjp_input(cache, cotangent)?;
        full.truncate(self.dim());
        Ok(full)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrainConfig {
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Anneal the learning rate to 1% of its base value along a cosine over the epochs.
    pub cosine_decay: bool,
    pub seed: u64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        FlowTrainConfig {
            hidden: vec![128, 128],
            batch_size: 64,
            epochs: 5000,
            learning_rate: 1e-3,
            cosine_decay: true,
            seed: 0,
        }
    }
}

impl FlowTrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.epochs == 0
            || self.learning_rate.is_nan()
            || self.learning_rate <= 0.0
            || self.hidden.is_empty()
        {
            return Err(Error::Config(format!(
                "flow training needs positive batch size, epochs, learning rate and at least one hidden layer: {self:?}"
            )));
        }
        Ok(())
    }
}

/// `(1 − t)·x₀ + t·x₁`.
pub fn interpolate(x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("interpolation time {t} outside [0, 1]")));
    }
    if x0.len() != x1.len() {
        return Err(Error::Dimension { expected: x0.len(), found: x1.len() });
    }
    Ok(x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect())
}

/// Trains an unconditional field on raw rows. Returns the model and the per-iteration batch loss.
pub fn train_flow<R: AsRef<[f64]>>(rows: &[R], config: &FlowTrainConfig) -> Result<(VelocityModel, Vec<f64>)> {
    train(rows, None, config)
}

/// As [`train_flow`], with each design's label appended to the network input.
pub fn train_conditional_flow<R: AsRef<[f64]>>(
    rows: &[R],
    labels: &[f64],
    config: &FlowTrainConfig,
) -> Result<(VelocityModel, Vec<f64>)> {
    if labels.len() != rows.len() {
        return Err(Error::Config(format!("{} labels for {} designs", labels.len(), rows.len())));
    }
    train(rows, Some(labels), config)
}

fn train<R: AsRef<[f64]>>(
    rows: &[R],
    labels: Option<&[f64]>,
    config: &FlowTrainConfig,
) -> Result<(VelocityModel, Vec<f64>)> {
    config.validate()?;
    let stats = NormStats::from_rows(rows)?;
    let d = stats.dim();
    let data: Vec<Vec<f64>> = rows.iter().map(|r| stats.normalize(r.as_ref())).collect();
    let label_stats = match labels {
        Some(l) => {
            if l.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("labels must be finite".into()));
            }
            Some(NormStats::from_rows(&l.iter().map(|&v| [v]).collect::<Vec<_>>())?)
        }
        None => None,
    };
    let conditioned: Option<Vec<f64>> =
        labels.zip(label_stats.as_ref()).map(|(l, ls)| l.iter().map(|v| (v - ls.mean[0]) / ls.std[0]).collect());

    let width = d + 1 + usize::from(conditioned.is_some());
    let mut sizes = vec![width];
    sizes.extend(&config.hidden);
    sizes.push(d);
    let mut network = NetworkParams::init(&sizes, Activation::Tanh, split_seed(config.seed, 0))?;
    let mut opt = AdamState::for_network(AdamConfig::with_learning_rate(config.learning_rate), &network);
    let mut rng = seeded(split_seed(config.seed, 1));

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::new();
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for epoch in 0..config.epochs {
        if config.cosine_decay {
            let progress = epoch as f64 / config.epochs as f64;
            opt.set_learning_rate(
                config.learning_rate * (0.01 + 0.99 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())),
            );
        }
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(config.batch_size) {
            let n = chunk.len();
            inputs.clear();
            targets.clear();
            for &i in chunk {
                let x1 = &data[i];
                let x0 = standard_normal_vec(&mut rng, d);
                let t: f64 = rng.random();
                inputs.extend(x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b));
                inputs.push(t);
                if let Some(c) = &conditioned {
                    inputs.push(c[i]);
                }
                targets.extend(x0.iter().zip(x1).map(|(a, b)| b - a));
            }
            let cache = network.forward_batch(&inputs, n, None)?;
            let mut loss = 0.0;
            let cot: Vec<f64> = cache
                .output()
                .iter()
                .zip(&targets)
                .map(|(p, y)| {
                    loss += (p - y) * (p - y);
                    2.0 * (p - y) / n as f64
                })
                .collect();
            loss /= n as f64;
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite flow-matching loss at iteration {}", losses.len())));
            }
            losses.push(loss);
            let grads = network.backward_params_batch(&cache, &cot)?;
            opt.step(&mut network, &grads)?;
        }
    }
    Ok((VelocityModel::new(network, stats, label_stats)?, losses))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: usize,
    /// `T + 1` normalized states on the grid `t_i = i/T`.
    pub states: Vec<Vec<f64>>,
    /// Terminal state in raw design coordinates.
    pub terminal: Vec<f64>,
}

impl Trajectory {
    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 / self.steps as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.time(i)).collect()
    }
}

pub(crate) fn check_steps(steps: usize) -> Result<()> {
    if steps == 0 {
        return Err(Error::Config("inference needs at least one Euler step".into()));
    }
    Ok(())
}

/// Forward Euler from `x0` (normalized) with `steps` uniform steps.
pub fn sample_unconditional(
    model: &VelocityModel,
    steps: usize,
    x0: &[f64],
    condition: Option<f64>,
) -> Result<Trajectory> {
    check_steps(steps)?;
    if x0.len() != model.dim() {
        return Err(Error::Dimension { expected: model.dim(), found: x0.len() });
    }
    let dt = 1.0 / steps as f64;
    let mut states = Vec::with_capacity(steps + 1);
    let mut x = x0.to_vec();
    states.push(x.clone());
    for i in 0..steps {
        let u = model.velocity(&x, i as f64 * dt, condition)?;
        x.iter_mut().zip(&u).for_each(|(xi, ui)| *xi += dt * ui);
        if !all_finite(&x) {
            return Err(Error::Numeric(format!("non-finite state after Euler step {i}")));
        }
        states.push(x.clone());
    }
    let terminal = model.stats.denormalize(&x);
    Ok(Trajectory { steps, states, terminal })
}
