//! Rigid pre-alignment, instance-mode variational registration and an
//! amortized spherical U-Net.

pub mod adam;
pub mod amortized;
pub mod config;
pub mod error;
pub mod instance;
pub mod lambda;
pub mod objective;
pub mod rigid;
pub mod transform;
pub mod unet;

pub use amortized::{predict_amortized, train_amortized, TrainingReport};
pub use config::{Mode, RegistrationConfig, DEFAULT_LAMBDA, PAPER_LAMBDA, PAPER_LEARNING_RATE};
pub use error::{RegError, Result};
pub use instance::{project_labels_rigid, register_instance, Diagnostics, RegistrationResult};
pub use lambda::{lambda_search, LambdaSearchReport};
pub use objective::{LossTerms, Objective};
pub use rigid::{rigid_align, RigidRotation};
pub use unet::{build_unet, SphericalUNet, DEFAULT_WIDTHS};

/// Crate version recorded in provenance sidecars.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
