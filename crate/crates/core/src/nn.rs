//! Dense feed-forward networks with exact reverse-mode derivatives.
//!
//! Only two backward passes are needed by the rest of the crate: the gradient
//! of `⟨output, cotangent⟩` with respect to every weight and bias (training),
//! and the same product with respect to the input (the per-step Jacobian
//! transpose used when differentiating through the sampler). Both read the
//! [`ForwardCache`] recorded by [`NetworkParams::forward`].
//!
//! Hidden layers use the configured [`Activation`]; the last layer is always
//! affine. Weights are stored row-major with shape `(out, in)`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemm_ab, gemm_abt, gemm_atb};
use crate::rng::{seeded, standard_normal_vec, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> (f64, f64) {
        match self {
            Activation::Tanh => {
                let a = z.tanh();
                (a, 1.0 - a * a)
            }
            Activation::Identity => (z, 1.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    layer_sizes: Vec<usize>,
    activation: Activation,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// Per-call record of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
    /// `activation'(z) · mask multiplier` for every hidden layer.
    gates: Vec<Vec<f64>>,
    output: Vec<f64>,
    mask: Option<DropoutMask>,
}

impl ForwardCache {
    pub fn depth(&self) -> usize {
        self.pre.len()
    }

    pub fn input(&self) -> &[f64] {
        &self.inputs[0]
    }

    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.pre
    }

    pub fn mask(&self) -> Option<&DropoutMask> {
        self.mask.as_ref()
    }
}

/// Gradient of a scalar with respect to every parameter, shaped like [`NetworkParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Gradients {
            weights: params.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            v.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights).chain(self.biases.iter_mut().zip(&other.biases)) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.biases).all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Parameters in optimizer order: every weight matrix, then every bias.
    pub fn flatten(&self) -> Vec<f64> {
        self.weights.iter().chain(&self.biases).flatten().copied().collect()
    }
}

/// Forward record for a row-major batch, used by the trainers.
#[derive(Debug, Clone)]
pub struct BatchCache {
    rows: usize,
    inputs: Vec<Vec<f64>>,
    gates: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl BatchCache {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::Config(format!("layer_sizes needs an input and an output width, got {layer_sizes:?}")));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::Config(format!("zero-width layer in {layer_sizes:?}")));
    }
    Ok(())
}

impl NetworkParams {
    /// Scaled-normal initialization: `W ~ N(0, 1/fan_in)`, zero biases.
    pub fn init(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut rng = seeded(seed);
        let weights = layer_sizes
            .windows(2)
            .map(|w| {
                let scale = 1.0 / (w[0] as f64).sqrt();
                standard_normal_vec(&mut rng, w[0] * w[1]).into_iter().map(|z| z * scale).collect()
            })
            .collect();
        let biases = layer_sizes[1..].iter().map(|&n| vec![0.0; n]).collect();
        Ok(NetworkParams { layer_sizes: layer_sizes.to_vec(), activation, weights, biases })
    }

    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        Ok(NetworkParams {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            weights: layer_sizes.windows(2).map(|w| vec![0.0; w[0] * w[1]]).collect(),
            biases: layer_sizes[1..].iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    /// Assemble a network from explicit arrays, checking every shape.
    pub fn from_parts(
        layer_sizes: Vec<usize>,
        activation: Activation,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        validate_sizes(&layer_sizes)?;
        let layers = layer_sizes.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::Shape(format!(
                "{layers} layers declared but {} weight and {} bias arrays supplied",
                weights.len(),
                biases.len()
            )));
        }
        for (l, win) in layer_sizes.windows(2).enumerate() {
            if weights[l].len() != win[0] * win[1] || biases[l].len() != win[1] {
                return Err(Error::Shape(format!(
                    "layer {l}: expected {}x{} weights and {} biases, got {} and {}",
                    win[1],
                    win[0],
                    win[1],
                    weights[l].len(),
                    biases[l].len()
                )));
            }
        }
        if weights.iter().chain(&biases).any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(NetworkParams { layer_sizes, activation, weights, biases })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.layer_sizes[1..self.layer_sizes.len() - 1]
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Vec::len).sum()
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    fn check_mask(&self, mask: &DropoutMask) -> Result<()> {
        let widths: Vec<usize> = mask.keep.iter().map(Vec::len).collect();
        if widths != self.hidden_widths() {
            return Err(Error::Shape(format!(
                "dropout mask widths {widths:?} do not match hidden widths {:?}",
                self.hidden_widths()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64], mask: Option<&DropoutMask>) -> Result<(Vec<f64>, ForwardCache)> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape(format!("input length {} but network expects {}", input.len(), self.input_dim())));
        }
        if input.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite network input".into()));
        }
        if let Some(m) = mask {
            self.check_mask(m)?;
        }
        let last = self.num_layers() - 1;
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre = Vec::with_capacity(self.num_layers());
        let mut gates = Vec::with_capacity(last);
        let mut a = input.to_vec();
        for l in 0..self.num_layers() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let w = &self.weights[l];
            let z: Vec<f64> = (0..n_out)
                .map(|j| {
                    let row = &w[j * n_in..(j + 1) * n_in];
                    self.biases[l][j] + row.iter().zip(&a).map(|(p, q)| p * q).sum::<f64>()
                })
                .collect();
            let next = if l < last {
                let mut out = Vec::with_capacity(n_out);
                let mut gate = Vec::with_capacity(n_out);
                for (j, &zj) in z.iter().enumerate() {
                    let (v, dv) = self.activation.apply(zj);
                    let m = mask.map_or(1.0, |m| m.multiplier(l, j));
                    out.push(v * m);
                    gate.push(dv * m);
                }
                gates.push(gate);
                out
            } else {
                z.clone()
            };
            inputs.push(std::mem::replace(&mut a, next));
            pre.push(z);
        }
        let cache = ForwardCache { inputs, pre, gates, output: a.clone(), mask: mask.cloned() };
        Ok((a, cache))
    }

    pub fn predict(&self, input: &[f64], mask: Option<&DropoutMask>) -> Result<Vec<f64>> {
        self.forward(input, mask).map(|(y, _)| y)
    }

    fn check_cache(&self, cache: &ForwardCache, cotangent: &[f64]) -> Result<()> {
        let ok = cache.inputs.len() == self.num_layers()
            && cache.gates.len() + 1 == self.num_layers()
            && cache.inputs.iter().zip(&self.layer_sizes).all(|(v, &n)| v.len() == n)
            && cache.gates.iter().zip(self.hidden_widths()).all(|(v, &n)| v.len() == n);
        if !ok {
            return Err(Error::Shape("forward cache does not belong to this network".into()));
        }
        if cotangent.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "cotangent length {} but network output is {}",
                cotangent.len(),
                self.output_dim()
            )));
        }
        Ok(())
    }

    /// `δ_{l-1} = (W_lᵀ δ_l) ⊙ gate_{l-1}`
    fn pull_back(&self, l: usize, delta: &[f64], gate: Option<&[f64]>) -> Vec<f64> {
        let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
        let w = &self.weights[l];
        let mut out = vec![0.0; n_in];
        for j in 0..n_out {
            let d = delta[j];
            if d == 0.0 {
                continue;
            }
            let row = &w[j * n_in..(j + 1) * n_in];
            out.iter_mut().zip(row).for_each(|(o, wij)| *o += wij * d);
        }
        if let Some(g) = gate {
            out.iter_mut().zip(g).for_each(|(o, gi)| *o *= gi);
        }
        out
    }

    /// Gradient of `⟨output, cotangent⟩` with respect to all weights and biases.
    pub fn backward_params(&self, cache: &ForwardCache, cotangent: &[f64]) -> Result<Gradients> {
        self.check_cache(cache, cotangent)?;
        let mut grads = Gradients::zeros_like(self);
        let mut delta = cotangent.to_vec();
        for l in (0..self.num_layers()).rev() {
            let input = &cache.inputs[l];
            let n_in = input.len();
            for (j, &d) in delta.iter().enumerate() {
                grads.biases[l][j] = d;
                grads.weights[l][j * n_in..(j + 1) * n_in].iter_mut().zip(input).for_each(|(g, x)| *g = d * x);
            }
            if l > 0 {
                delta = self.pull_back(l, &delta, Some(&cache.gates[l - 1]));
            }
        }
        Ok(grads)
    }

    /// `(∂output/∂input)ᵀ · cotangent`.
    pub fn vjp_input(&self, cache: &ForwardCache, cotangent: &[f64]) -> Result<Vec<f64>> {
        self.check_cache(cache, cotangent)?;
        let mut delta = cotangent.to_vec();
        for l in (0..self.num_layers()).rev() {
            let gate = if l > 0 { Some(cache.gates[l - 1].as_slice()) } else { None };
            delta = self.pull_back(l, &delta, gate);
        }
        Ok(delta)
    }

    /// Forward pass over `rows` inputs stored row-major. With `dropout`, a
    /// fresh inverted-scaling mask is drawn per row from the given stream.
    pub fn forward_batch(
        &self,
        inputs: &[f64],
        rows: usize,
        mut dropout: Option<(f64, &mut Rng)>,
    ) -> Result<BatchCache> {
        if inputs.len() != rows * self.input_dim() {
            return Err(Error::Shape(format!(
                "batch of {} values is not {rows} rows of width {}",
                inputs.len(),
                self.input_dim()
            )));
        }
        if let Some((rate, _)) = dropout.as_ref() {
            check_rate(*rate)?;
        }
        let last = self.num_layers() - 1;
        let mut cached_inputs = Vec::with_capacity(self.num_layers());
        let mut gates = Vec::with_capacity(last);
        let mut a = inputs.to_vec();
        for l in 0..self.num_layers() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let mut z = Vec::with_capacity(rows * n_out);
            for _ in 0..rows {
                z.extend_from_slice(&self.biases[l]);
            }
            gemm_abt(rows, n_in, n_out, &a, &self.weights[l], 1.0, &mut z);
            if l < last {
                let mut gate = vec![0.0; z.len()];
                for (zi, gi) in z.iter_mut().zip(gate.iter_mut()) {
                    let (v, dv) = self.activation.apply(*zi);
                    *zi = v;
                    *gi = dv;
                }
                if let Some((rate, rng)) = dropout.as_mut() {
                    let scale = 1.0 / (1.0 - *rate);
                    for (zi, gi) in z.iter_mut().zip(gate.iter_mut()) {
                        let m = if rng.random::<f64>() < *rate { 0.0 } else { scale };
                        *zi *= m;
                        *gi *= m;
                    }
                }
                gates.push(gate);
            }
            cached_inputs.push(std::mem::replace(&mut a, z));
        }
        Ok(BatchCache { rows, inputs: cached_inputs, gates, output: a })
    }

    /// Sum over rows of the per-row parameter gradients of `⟨output_r, cotangent_r⟩`.
    pub fn backward_params_batch(&self, cache: &BatchCache, cotangents: &[f64]) -> Result<Gradients> {
        let rows = cache.rows;
        if cotangents.len() != rows * self.output_dim() || cache.inputs.len() != self.num_layers() {
            return Err(Error::Shape("batch cotangent does not match cache".into()));
        }
        let mut grads = Gradients::zeros_like(self);
        let mut delta = cotangents.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            gemm_atb(n_out, rows, n_in, &delta, &cache.inputs[l], &mut grads.weights[l]);
            for r in 0..rows {
                grads.biases[l].iter_mut().zip(&delta[r * n_out..(r + 1) * n_out]).for_each(|(b, d)| *b += d);
            }
            if l > 0 {
                let mut prev = vec![0.0; rows * n_in];
                gemm_ab(rows, n_out, n_in, &delta, &self.weights[l], &mut prev);
                prev.iter_mut().zip(&cache.gates[l - 1]).for_each(|(p, g)| *p *= g);
                delta = prev;
            }
        }
        Ok(grads)
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Hidden-unit keep pattern with inverted scaling: kept units are multiplied
/// by `1/(1-rate)`, dropped units by zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    rate: f64,
    keep: Vec<Vec<bool>>,
}

impl DropoutMask {
    pub fn sample(rate: f64, widths: &[usize], rng: &mut Rng) -> Result<Self> {
        check_rate(rate)?;
        let keep =
            widths.iter().map(|&w| (0..w).map(|_| rate == 0.0 || rng.random::<f64>() >= rate).collect()).collect();
        Ok(DropoutMask { rate, keep })
    }

    pub fn all_keep(widths: &[usize]) -> Self {
        DropoutMask { rate: 0.0, keep: widths.iter().map(|&w| vec![true; w]).collect() }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn scale(&self) -> f64 {
        1.0 / (1.0 - self.rate)
    }

    pub fn keep(&self) -> &[Vec<bool>] {
        &self.keep
    }

    #[inline]
    pub fn multiplier(&self, layer: usize, unit: usize) -> f64 {
        if self.keep[layer][unit] {
            self.scale()
        } else {
            0.0
        }
    }

    pub fn dropped(&self) -> usize {
        self.keep.iter().flatten().filter(|k| !**k).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig { learning_rate, ..Self::default() }
    }
}

/// Adaptive-moment optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        AdamState { config, first: vec![0.0; num_params], second: vec![0.0; num_params], step: 0 }
    }

    pub fn for_network(config: AdamConfig, params: &NetworkParams) -> Self {
        Self::new(config, params.num_params())
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    pub fn step_flat(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {} params and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient at optimizer step {}", self.step + 1)));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.first[i] = c.beta1 * self.first[i] + (1.0 - c.beta1) * g;
            self.second[i] = c.beta2 * self.second[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.first[i] / bc1;
            let v_hat = self.second[i] / bc2;
            params[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
        }
        Ok(())
    }

    /// One update of every network parameter, weights first then biases.
    pub fn step(&mut self, params: &mut NetworkParams, grads: &Gradients) -> Result<()> {
        if grads.weights.len() != params.weights.len()
            || grads.weights.iter().zip(&params.weights).any(|(g, w)| g.len() != w.len())
            || grads.biases.iter().zip(&params.biases).any(|(g, b)| g.len() != b.len())
        {
            return Err(Error::Shape("gradient layout does not match network".into()));
        }
        let mut flat: Vec<f64> = params.weights.iter().chain(&params.biases).flatten().copied().collect();
        self.step_flat(&mut flat, &grads.flatten())?;
        let mut it = flat.into_iter();
        for v in params.weights.iter_mut().chain(params.biases.iter_mut()) {
            v.iter_mut().for_each(|x| *x = it.next().expect("length checked"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dot, max_abs_diff};
    use crate::rng::split_seed;

    fn random_vec(seed: u64, n: usize) -> Vec<f64> {
        standard_normal_vec(&mut seeded(seed), n)
    }

    #[test]
    fn init_rejects_bad_sizes() {
        assert!(matches!(NetworkParams::init(&[], Activation::Tanh, 0), Err(Error::Config(_))));
        assert!(matches!(NetworkParams::init(&[3], Activation::Tanh, 0), Err(Error::Config(_))));
        assert!(matches!(NetworkParams::init(&[3, 0, 2], Activation::Tanh, 0), Err(Error::Config(_))));
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = NetworkParams::init(&[2, 4, 2], Activation::Tanh, 11).unwrap();
        let b = NetworkParams::init(&[2, 4, 2], Activation::Tanh, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.biases().iter().flatten().all(|&x| x == 0.0));
        let c = NetworkParams::init(&[2, 4, 2], Activation::Tanh, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_variance_tracks_fan_in() {
        let net = NetworkParams::init(&[16, 64, 64, 16], Activation::Tanh, 7).unwrap();
        for (l, w) in net.weights().iter().enumerate() {
            let fan_in = net.layer_sizes()[l] as f64;
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
            let target = 1.0 / fan_in;
            assert!(var < 3.0 * target && var > target / 3.0, "layer {l}: var {var} vs {target}");
        }
    }

    #[test]
    fn zero_network_gives_zero_output() {
        let net = NetworkParams::zeros(&[3, 5, 2], Activation::Tanh).unwrap();
        let y = net.predict(&[0.3, -1.0, 2.0], None).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn single_affine_layer() {
        let w = vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0];
        let b = vec![0.25, -0.5];
        let net = NetworkParams::from_parts(vec![3, 2], Activation::Tanh, vec![w], vec![b]).unwrap();
        let y = net.predict(&[1.0, -2.0, 0.5], None).unwrap();
        assert_eq!(y, vec![1.0 - 4.0 - 0.5 + 0.25, 0.5 + 1.5 - 0.5]);
    }

    /// Independent straightforward reimplementation used as a forward oracle.
    fn reference_forward(net: &NetworkParams, x: &[f64]) -> Vec<f64> {
        let sizes = net.layer_sizes();
        let mut a = x.to_vec();
        for l in 0..net.num_layers() {
            let z: Vec<f64> = (0..sizes[l + 1])
                .map(|j| {
                    let row = &net.weights()[l][j * sizes[l]..(j + 1) * sizes[l]];
                    net.biases()[l][j] + row.iter().zip(&a).map(|(w, x)| w * x).sum::<f64>()
                })
                .collect();
            a = if l + 1 < net.num_layers() { z.iter().map(|v| v.tanh()).collect() } else { z };
        }
        a
    }

    #[test]
    fn forward_matches_reference_implementation() {
        let net = NetworkParams::init(&[3, 5, 2], Activation::Tanh, 5).unwrap();
        let x = [0.4, -1.2, 0.9];
        let y = net.predict(&x, None).unwrap();
        assert!(max_abs_diff(&y, &reference_forward(&net, &x)) < 1e-14);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let net = NetworkParams::init(&[3, 5, 2], Activation::Tanh, 5).unwrap();
        assert!(matches!(net.forward(&[1.0, 2.0], None), Err(Error::Shape(_))));
        assert!(matches!(net.forward(&[1.0, f64::NAN, 0.0], None), Err(Error::Numeric(_))));
        let bad_mask = DropoutMask::all_keep(&[4]);
        assert!(matches!(net.forward(&[1.0, 2.0, 3.0], Some(&bad_mask)), Err(Error::Shape(_))));
    }

    #[test]
    fn cache_replay_reproduces_output() {
        let net = NetworkParams::init(&[4, 6, 6, 3], Activation::Tanh, 2).unwrap();
        let mask = DropoutMask::sample(0.3, net.hidden_widths(), &mut seeded(1)).unwrap();
        let (y, cache) = net.forward(&[0.1, 0.2, -0.3, 0.4], Some(&mask)).unwrap();
        assert_eq!(cache.depth(), net.num_layers());
        let (y2, _) = net.forward(cache.input(), cache.mask()).unwrap();
        assert_eq!(y, y2);
        assert_eq!(cache.output(), y.as_slice());
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let net = NetworkParams::init(&[4, 8, 1], Activation::Tanh, 3).unwrap();
        let (_, cache) = net.forward(&[0.1, 0.2, 0.3, 0.4], None).unwrap();
        let g = net.backward_params(&cache, &[0.0]).unwrap();
        assert!(g.flatten().iter().all(|&x| x == 0.0));
        assert!(net.vjp_input(&cache, &[0.0]).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn one_layer_closed_forms() {
        let w = vec![0.5, -1.5, 2.0];
        let net =
            NetworkParams::from_parts(vec![3, 1], Activation::Identity, vec![w.clone()], vec![vec![0.1]]).unwrap();
        let x = [1.0, 2.0, -3.0];
        let (_, cache) = net.forward(&x, None).unwrap();
        let g = net.backward_params(&cache, &[2.0]).unwrap();
        assert_eq!(g.weights[0], vec![2.0, 4.0, -6.0]);
        assert_eq!(g.biases[0], vec![2.0]);
        assert_eq!(net.vjp_input(&cache, &[2.0]).unwrap(), vec![1.0, -3.0, 4.0]);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let a = NetworkParams::init(&[4, 8, 1], Activation::Tanh, 3).unwrap();
        let b = NetworkParams::init(&[5, 8, 1], Activation::Tanh, 3).unwrap();
        let (_, cache) = a.forward(&[0.0; 4], None).unwrap();
        assert!(matches!(b.backward_params(&cache, &[1.0]), Err(Error::Shape(_))));
        assert!(matches!(b.vjp_input(&cache, &[1.0]), Err(Error::Shape(_))));
        assert!(matches!(a.vjp_input(&cache, &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
    }

    /// Central-difference check of both backward passes.
    fn check_gradients(sizes: &[usize], seed: u64) {
        let net = NetworkParams::init(sizes, Activation::Tanh, seed).unwrap();
        let x = random_vec(split_seed(seed, 1), sizes[0]);
        let cot = random_vec(split_seed(seed, 2), *sizes.last().unwrap());
        let (_, cache) = net.forward(&x, None).unwrap();
        let grads = net.backward_params(&cache, &cot).unwrap();
        let vjp = net.vjp_input(&cache, &cot).unwrap();
        let h = 1e-4;
        let objective = |n: &NetworkParams, input: &[f64]| dot(&n.predict(input, None).unwrap(), &cot);

        for l in 0..net.num_layers() {
            for (k, &analytic) in grads.weights[l].iter().enumerate() {
                let mut p = net.clone();
                p.weights_mut()[l][k] += h;
                let up = objective(&p, &x);
                p.weights_mut()[l][k] -= 2.0 * h;
                let fd = (up - objective(&p, &x)) / (2.0 * h);
                if analytic.abs().max(fd.abs()) > 1e-6 {
                    assert!(rel_err(analytic, fd) < 1e-4, "W[{l}][{k}] {analytic} vs {fd}");
                }
            }
            for (k, &analytic) in grads.biases[l].iter().enumerate() {
                let mut p = net.clone();
                p.biases_mut()[l][k] += h;
                let up = objective(&p, &x);
                p.biases_mut()[l][k] -= 2.0 * h;
                let fd = (up - objective(&p, &x)) / (2.0 * h);
                if analytic.abs().max(fd.abs()) > 1e-6 {
                    assert!(rel_err(analytic, fd) < 1e-4, "b[{l}][{k}] {analytic} vs {fd}");
                }
            }
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (objective(&net, &xp) - objective(&net, &xm)) / (2.0 * h);
            if vjp[i].abs().max(fd.abs()) > 1e-6 {
                assert!(rel_err(vjp[i], fd) < 1e-4, "x[{i}] {} vs {fd}", vjp[i]);
            }
        }
    }

    #[test]
    fn param_gradients_match_finite_differences() {
        check_gradients(&[4, 8, 1], 17);
    }

    #[test]
    fn input_vjp_matches_finite_differences() {
        check_gradients(&[6, 10, 6], 23);
    }

    #[test]
    fn vjp_is_linear_in_cotangent() {
        let net = NetworkParams::init(&[5, 7, 7, 4], Activation::Tanh, 9).unwrap();
        let (_, cache) = net.forward(&random_vec(1, 5), None).unwrap();
        let (v1, v2) = (random_vec(2, 4), random_vec(3, 4));
        let (c1, c2) = (0.7, -1.9);
        let mix: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| c1 * a + c2 * b).collect();
        let lhs = net.vjp_input(&cache, &mix).unwrap();
        let r1 = net.vjp_input(&cache, &v1).unwrap();
        let r2 = net.vjp_input(&cache, &v2).unwrap();
        let rhs: Vec<f64> = r1.iter().zip(&r2).map(|(a, b)| c1 * a + c2 * b).collect();
        assert!(max_abs_diff(&lhs, &rhs) < 1e-13);
    }

    #[test]
    fn batch_paths_match_single_sample_paths() {
        let net = NetworkParams::init(&[5, 9, 7, 3], Activation::Tanh, 4).unwrap();
        let rows = 6;
        let xs = random_vec(10, rows * 5);
        let cots = random_vec(11, rows * 3);
        let cache = net.forward_batch(&xs, rows, None).unwrap();
        let mut summed = Gradients::zeros_like(&net);
        for r in 0..rows {
            let (y, c) = net.forward(&xs[r * 5..(r + 1) * 5], None).unwrap();
            assert!(max_abs_diff(&y, &cache.output()[r * 3..(r + 1) * 3]) < 1e-13);
            summed.add_assign(&net.backward_params(&c, &cots[r * 3..(r + 1) * 3]).unwrap());
        }
        let batch = net.backward_params_batch(&cache, &cots).unwrap();
        assert!(max_abs_diff(&summed.flatten(), &batch.flatten()) < 1e-12);
    }

    #[test]
    fn dropout_mask_rules() {
        let mut rng = seeded(3);
        let m = DropoutMask::sample(0.0, &[64, 64], &mut rng).unwrap();
        assert_eq!(m.dropped(), 0);
        assert_eq!(m.scale(), 1.0);
        assert!(matches!(DropoutMask::sample(1.0, &[4], &mut rng), Err(Error::Config(_))));
        assert!(matches!(DropoutMask::sample(-0.1, &[4], &mut rng), Err(Error::Config(_))));
        let a = DropoutMask::sample(0.2, &[32], &mut seeded(5)).unwrap();
        let b = DropoutMask::sample(0.2, &[32], &mut seeded(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_drop_frequency() {
        let mut rng = seeded(77);
        let draws = 10_000;
        let dropped: usize = (0..draws).map(|_| DropoutMask::sample(0.01, &[64], &mut rng).unwrap().dropped()).sum();
        let freq = dropped as f64 / (draws * 64) as f64;
        assert!((freq - 0.01).abs() < 0.003, "drop frequency {freq}");
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        // A hidden layer of width 1 with identity activation feeding a linear readout:
        // E[output] over masks equals the mask-free output.
        let net = NetworkParams::from_parts(
            vec![2, 8, 1],
            Activation::Identity,
            vec![(0..16).map(|i| (i as f64 * 0.37).sin()).collect(), (0..8).map(|i| 0.3 + 0.1 * i as f64).collect()],
            vec![vec![0.05; 8], vec![0.2]],
        )
        .unwrap();
        let x = [0.8, -0.4];
        let exact = net.predict(&x, None).unwrap()[0];
        let mut rng = seeded(8);
        let n = 40_000;
        let mean: f64 = (0..n)
            .map(|_| {
                let m = DropoutMask::sample(0.2, net.hidden_widths(), &mut rng).unwrap();
                net.predict(&x, Some(&m)).unwrap()[0]
            })
            .sum::<f64>()
            / n as f64;
        assert!((mean - exact).abs() < 0.01, "{mean} vs {exact}");
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut net = NetworkParams::init(&[3, 4, 2], Activation::Tanh, 1).unwrap();
        let before = net.clone();
        let mut opt = AdamState::for_network(AdamConfig::default(), &net);
        opt.step(&mut net, &Gradients::zeros_like(&before)).unwrap();
        assert_eq!(net, before);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn adam_descends_one_dimensional_parabola() {
        let mut w = [1.0];
        let mut opt = AdamState::new(AdamConfig::with_learning_rate(0.1), 1);
        let g = [2.0 * w[0]];
        opt.step_flat(&mut w, &g).unwrap();
        assert!(w[0] < 1.0);
    }

    #[test]
    fn adam_solves_random_quadratic() {
        let curv: Vec<f64> = random_vec(4, 5).iter().map(|v| 0.5 + v.abs()).collect();
        let center = random_vec(5, 5);
        let loss = |w: &[f64]| -> f64 { w.iter().zip(&curv).zip(&center).map(|((x, c), a)| c * (x - a).powi(2)).sum() };
        let mut w = vec![0.0; 5];
        let mut opt = AdamState::new(AdamConfig::with_learning_rate(0.1), 5);
        for _ in 0..200 {
            let g: Vec<f64> = w.iter().zip(&curv).zip(&center).map(|((x, c), a)| 2.0 * c * (x - a)).collect();
            opt.step_flat(&mut w, &g).unwrap();
        }
        assert!(loss(&w) < 1e-6, "loss {}", loss(&w));
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut w = [1.0, 2.0];
        let mut opt = AdamState::new(AdamConfig::default(), 2);
        assert!(matches!(opt.step_flat(&mut w, &[f64::NAN, 0.0]), Err(Error::Numeric(_))));
        assert_eq!(w, [1.0, 2.0]);
        assert_eq!(opt.steps(), 0);
    }
}
