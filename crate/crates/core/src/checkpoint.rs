//! Versioned JSON checkpoints for networks, velocity models and surrogates.
//!
//! Floats are written in shortest round-trip form, so a save/load cycle
//! reproduces every parameter bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowmatch::VelocityModel;
use crate::nn::{Activation, NetworkParams};
use crate::physics::SurrogateModel;
use crate::stats::NormStats;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetworkDoc {
    layer_sizes: Vec<usize>,
    activation: Activation,
    /// Row-major, one array per layer.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl NetworkDoc {
    fn from_params(p: &NetworkParams) -> Self {
        NetworkDoc {
            layer_sizes: p.layer_sizes().to_vec(),
            activation: p.activation(),
            weights: p.weights().to_vec(),
            biases: p.biases().to_vec(),
        }
    }

    fn into_params(self) -> Result<NetworkParams> {
        NetworkParams::from_parts(self.layer_sizes, self.activation, self.weights, self.biases)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Payload {
    Network {
        network: NetworkDoc,
    },
    Velocity {
        network: NetworkDoc,
        stats: NormStats,
        conditional: bool,
        label_stats: Option<NormStats>,
    },
    Surrogate {
        network: NetworkDoc,
        stats: NormStats,
        dropout_rate: f64,
        label_mean: f64,
        label_scale: f64,
        validation_mse: Option<f64>,
    },
}

impl Payload {
    fn kind(&self) -> &'static str {
        match self {
            Payload::Network { .. } => "network",
            Payload::Velocity { .. } => "velocity",
            Payload::Surrogate { .. } => "surrogate",
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Document {
    schema_version: u32,
    #[serde(flatten)]
    payload: Payload,
}

fn write(path: &Path, payload: Payload) -> Result<()> {
    let doc = Document { schema_version: SCHEMA_VERSION, payload };
    let mut text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Numeric(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path, expected_kind: &str) -> Result<Payload> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
    let found = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::parse(path, "missing schema_version"))?;
    if found != SCHEMA_VERSION as u64 {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: u32::try_from(found).unwrap_or(u32::MAX),
            supported: SCHEMA_VERSION,
        });
    }
    let doc: Document = serde_json::from_value(value).map_err(|e| Error::parse(path, e))?;
    if doc.payload.kind() != expected_kind {
        return Err(Error::parse(path, format!("expected a {expected_kind} checkpoint, found {}", doc.payload.kind())));
    }
    Ok(doc.payload)
}

pub fn save_network(params: &NetworkParams, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), Payload::Network { network: NetworkDoc::from_params(params) })
}

pub fn load_network(path: impl AsRef<Path>) -> Result<NetworkParams> {
    match read(path.as_ref(), "network")? {
        Payload::Network { network } => network.into_params(),
        _ => unreachable!("kind checked in read"),
    }
}

pub fn save_velocity(model: &VelocityModel, path: impl AsRef<Path>) -> Result<()> {
    write(
        path.as_ref(),
        Payload::Velocity {
            network: NetworkDoc::from_params(&model.network),
            stats: model.stats.clone(),
            conditional: model.is_conditional(),
            label_stats: model.label_stats.clone(),
        },
    )
}

/// Load a velocity model. With `expected_dim`, a model of another dimension is
/// rejected with [`Error::Dimension`].
pub fn load_velocity(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<VelocityModel> {
    let path = path.as_ref();
    let Payload::Velocity { network, stats, conditional, label_stats } = read(path, "velocity")? else {
        unreachable!("kind checked in read")
    };
    if let Some(expected) = expected_dim {
        if stats.dim() != expected {
            return Err(Error::Dimension { expected, found: stats.dim() });
        }
    }
    if conditional != label_stats.is_some() {
        return Err(Error::parse(path, "conditional flag disagrees with label statistics"));
    }
    VelocityModel::new(network.into_params()?, stats, label_stats)
}

pub fn save_surrogate(model: &SurrogateModel, path: impl AsRef<Path>) -> Result<()> {
    write(
        path.as_ref(),
        Payload::Surrogate {
            network: NetworkDoc::from_params(&model.network),
            stats: model.stats.clone(),
            dropout_rate: model.dropout_rate,
            label_mean: model.label_mean,
            label_scale: model.label_scale,
            validation_mse: model.validation_mse.is_finite().then_some(model.validation_mse),
        },
    )
}

pub fn load_surrogate(path: impl AsRef<Path>) -> Result<SurrogateModel> {
    let path = path.as_ref();
    let Payload::Surrogate { network, stats, dropout_rate, label_mean, label_scale, validation_mse } =
        read(path, "surrogate")?
    else {
        unreachable!("kind checked in read")
    };
    let network = network.into_params()?;
    if network.input_dim() != stats.dim() {
        return Err(Error::Dimension { expected: network.input_dim(), found: stats.dim() });
    }
    let mut model = SurrogateModel::new(network, stats, dropout_rate)?;
    model.label_mean = label_mean;
    model.label_scale = label_scale;
    model.validation_mse = validation_mse.unwrap_or(f64::NAN);
    Ok(model)
}
