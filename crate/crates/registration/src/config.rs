//! Registration settings.

use serde::{Deserialize, Serialize};

use crate::error::{RegError, Result};
use spherewarp_core::{EdgeWeighting, LikelihoodWeighting};

/// Regularisation weight reported for the full-scale cortical setting.
pub const PAPER_LAMBDA: f64 = 3e7;
/// Learning rate reported for the amortized network.
pub const PAPER_LEARNING_RATE: f64 = 1e-5;
/// Default λ for the unit-variance synthetic benchmark, chosen by [`crate::lambda::lambda_search`].
pub const DEFAULT_LAMBDA: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Instance,
    Amortized,
    /// Planar data term (`S = I`) with an unweighted grid Laplacian.
    Voxelmorph2dAblation,
}

impl Mode {
    pub fn likelihood_weighting(self) -> LikelihoodWeighting {
        match self {
            Mode::Voxelmorph2dAblation => LikelihoodWeighting::Uniform,
            _ => LikelihoodWeighting::SinLatitude,
        }
    }

    pub fn edge_weighting(self) -> EdgeWeighting {
        match self {
            Mode::Voxelmorph2dAblation => EdgeWeighting::Uniform,
            _ => EdgeWeighting::Spherical,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationConfig {
    pub lambda: f64,
    /// Scaling-and-squaring steps.
    pub steps: usize,
    /// Iteration cap per resolution level (instance) or epoch count (amortized).
    pub iters: usize,
    pub lr: f64,
    pub mode: Mode,
    /// Draw one reparameterised velocity per iteration instead of using `μ`.
    pub sample_stochastic: bool,
    pub seed: u64,
    pub multires_levels: usize,
    /// Optimise `μ` on the half-resolution grid and upsample before integrating.
    pub half_resolution: bool,
    /// Run the rotation search before the deformable stage.
    pub rigid: bool,
    /// Coarse angular step of the rotation search, radians.
    pub rigid_step: f64,
    /// Initial (and, in deterministic mode, fixed) per-vertex `log σ²`.
    pub init_log_var: f64,
    /// Relative loss change over [`RegistrationConfig::window`] iterations that stops the optimiser.
    pub tol: f64,
    pub window: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            steps: spherewarp_core::DEFAULT_STEPS,
            iters: 500,
            lr: 1e-2,
            mode: Mode::Instance,
            sample_stochastic: false,
            seed: 0,
            multires_levels: 2,
            half_resolution: false,
            rigid: false,
            rigid_step: std::f64::consts::PI / 36.0,
            init_log_var: -10.0,
            tol: 1e-6,
            window: 20,
        }
    }
}

impl RegistrationConfig {
    /// Defaults for `mode`; the amortized path starts from the published learning rate.
    pub fn for_mode(mode: Mode) -> Self {
        let mut cfg = Self { mode, ..Self::default() };
        if mode == Mode::Amortized {
            cfg.lr = PAPER_LEARNING_RATE;
            cfg.iters = 200;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("lambda", self.lambda), ("lr", self.lr), ("rigid_step", self.rigid_step), ("tol", self.tol)];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(RegError::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        for (name, v) in [("steps", self.steps), ("iters", self.iters), ("multires_levels", self.multires_levels), ("window", self.window)] {
            if v == 0 {
                return Err(RegError::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.init_log_var.is_finite() {
            return Err(RegError::Config("init_log_var must be finite".into()));
        }
        Ok(())
    }
}
