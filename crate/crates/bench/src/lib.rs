//! Shared fixtures for the benchmarks.

use flowsur::geometry::synthesize_dataset;
use flowsur::{Activation, NetworkParams, VelocityModel, DESIGN_DIM};

/// Untrained 17-128-128-16 velocity field with dataset statistics, the
/// production shape for timing purposes.
pub fn velocity_model(seed: u64) -> VelocityModel {
    let ds = synthesize_dataset(64, seed).expect("synthetic dataset");
    let net =
        NetworkParams::init(&[DESIGN_DIM + 1, 128, 128, DESIGN_DIM], Activation::Tanh, seed).expect("valid sizes");
    VelocityModel::new(net, ds.stats().clone(), None).expect("shapes match")
}
