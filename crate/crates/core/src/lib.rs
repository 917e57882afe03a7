//! Physics-guided flow matching for 2-D airfoil inverse design.
//!
//! The crate contrasts two ways of steering a pretrained flow-matching sampler
//! toward a lift-coefficient target:
//!
//! * [`guidance`]: energy-based guidance, which adds `-λ∇E(x)` to the sampler
//!   drift once the inference clock passes a cutoff time.
//! * [`dflow`]: Dflow-SUR, which evaluates the physical loss on the terminal
//!   sample only and back-propagates it through the unrolled Euler solver to
//!   the initial noise.
//!
//! Supporting pieces are a small dense network with exact reverse-mode
//! derivatives ([`nn`]), CST airfoil geometry ([`geometry`]), a thin-airfoil
//! lift oracle plus an MC-dropout surrogate ([`physics`]), the flow-matching
//! trainer and sampler ([`flowmatch`]), analysis instruments
//! ([`diagnostics`]) and the experiment harness ([`harness`]).

pub mod checkpoint;
pub mod dflow;
pub mod diagnostics;
pub mod error;
pub mod flowmatch;
pub mod geometry;
pub mod guidance;
pub mod harness;
pub mod linalg;
pub mod loss;
pub mod nn;
pub mod physics;
pub mod rng;
pub mod stats;

pub use crate::checkpoint::{load_surrogate, load_velocity, save_surrogate, save_velocity};
pub use crate::dflow::{dflow_batch, dflow_sur, unrolled_vjp, DflowConfig, DflowOutcome, DflowResult};
pub use crate::error::{Error, Result};
pub use crate::flowmatch::{
    interpolate, sample_unconditional, train_conditional_flow, train_flow, FlowTrainConfig, Trajectory, VelocityModel,
};
pub use crate::geometry::{DesignDataset, DesignVector, DESIGN_DIM};
pub use crate::guidance::{
    energy_batch, physics_budget, pseudo_loss_curve, sample_energy_guided, BudgetReport, FailRecord, GuidanceConfig,
    GuidedOutcome, GuidedTrajectory,
};
pub use crate::harness::{emit_report, run_experiment, ExperimentConfig, ExperimentReport, Strategy};
pub use crate::loss::{DesignLoss, PhysicalLoss, QuadraticLoss};
pub use crate::nn::{Activation, AdamConfig, AdamState, DropoutMask, ForwardCache, Gradients, NetworkParams};
pub use crate::physics::{
    Evaluator, OperatingPoint, PhysicalTarget, PhysicsEvaluator, SurrogateModel, ThinAirfoilOracle, UqReport,
};
pub use crate::stats::NormStats;
