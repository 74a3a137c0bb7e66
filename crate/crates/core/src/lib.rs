//! Perception-aware policy optimization on a toy multimodal policy.
//!
//! The crate is organized bottom-up: [`domain`] types, seeded [`rng`]
//! streams, the [`objectives`] loss kernels, patch [`masking`], the
//! differentiable [`policy`], the synthetic [`environment`], and the
//! [`trainer`] loop with its [`monitor`] diagnostics.

pub mod checkpoint;
pub mod config;
pub mod domain;
pub mod environment;
pub mod error;
pub mod eval;
pub mod masking;
pub mod monitor;
pub mod objectives;
pub mod policy;
pub mod rng;
pub mod trainer;

pub use config::TrainConfig;
pub use domain::{Dependency, GridImage, Prompt, RolloutGroup, TaskKind, TokenSeq};
pub use environment::TaskSpec;
pub use error::{Error, Result};
pub use monitor::StepMetrics;
pub use objectives::{Algorithm, ObjectiveConfig};
pub use policy::{ArchConfig, PolicyParams};
pub use rng::RngStream;
