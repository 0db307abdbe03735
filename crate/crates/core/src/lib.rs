//! Online forward-backward (FB) zero-shot reinforcement learning with
//! maximum-entropy behavior exploration.
//!
//! The crate is organized bottom-up:
//!
//! - [`nn`]: dense networks with hand-coded gradients, Adam, soft updates and
//!   a finite-difference gradient checker.
//! - [`env`]: a deterministic 2-D point-mass, its behavior projection, task
//!   and regularization rewards.
//! - [`replay`]: the transition buffer and the projected goal buffer.
//! - [`fb`]: forward/backward/actor networks, the contrastive TD loss and task
//!   inference.
//! - [`critic`]: the behavior-regularizer critic.
//! - [`flow`]: a RealNVP-style density model over projected behaviors.
//! - [`explore`]: inverse-density goal sampling and the behavior entropy
//!   metric.
//! - [`trainer`]: the online loop tying everything together.
//! - [`oracle`]: exact finite-MDP successor-measure machinery.
//! - [`eval`]: zero-shot evaluation, reward-sample inference and plot exports.

pub mod checkpoint;
pub mod config;
pub mod critic;
pub mod env;
mod error;
pub mod eval;
pub mod explore;
pub mod fb;
pub mod flow;
pub mod nn;
pub mod oracle;
pub mod real;
pub mod replay;
pub mod trainer;

pub use config::RunConfig;
pub use critic::RegCritic;
pub use env::{Action, EnvParams, EnvState, PointMass, TaskSpec};
pub use error::{Error, Result};
pub use eval::{EvalReport, TaskResult};
pub use explore::{EntropyEstimate, ExplorationConfig, Mode};
pub use fb::{FbLossTerms, FbModel, LatentZ, ZSource};
pub use flow::FlowModel;
pub use nn::{Activation, AdamState, DenseNet, GradReport};
pub use real::Real;
pub use replay::{GoalBuffer, ReplayBuffer, Transition};
pub use trainer::{TrainArtifacts, Trainer};
