//! Spherical diffeomorphic registration primitives on an equirectangular grid.
//!
//! Fields live on a [`SphereGrid`] of cell-centred latitudes and periodic
//! longitudes. Velocities and displacements are stored in `(θ, φ)` radians.

pub mod error;
pub mod field;
pub mod gnomonic;
pub mod gradcheck;
pub mod grid;
pub mod integrate;
pub mod likelihood;
pub mod metrics;
pub mod prior;
pub mod resample;
pub mod sampler;
pub mod synth;

pub use error::{CoreError, Result};
pub use field::{area_weighted_mean, DeformationField, FeatureMap, LabelMap, VelocityField};
pub use gnomonic::{spherical_conv, ConvWeights, GnomonicKernelOffsets};
pub use gradcheck::{grad_check, DiffOp, Differentiable};
pub use grid::{polar_to_cartesian, wrap_longitude, SphereGrid};
pub use integrate::{scaling_and_squaring, scaling_and_squaring_trace, SquaringTrace, DEFAULT_STEPS};
pub use likelihood::{data_term, data_term_grad, Atlas, LikelihoodWeighting};
pub use metrics::{dice, group_stats, jacobian_map, mmd, JacobianStats, MetricReport};
pub use prior::{build_weighted_laplacian, prior_kl_term, EdgeWeighting, WeightedGraphLaplacian};
pub use resample::{pool2, upsample2};
pub use sampler::{sample_periodic, sample_periodic_vjp, warp_labels, Interp};

/// Crate version recorded in provenance sidecars.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
