//! Unsupervised training of the U-Net on a corpus of moving maps.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use spherewarp_core::field::ensure_same_grid;
use spherewarp_core::{jacobian_map, scaling_and_squaring, Atlas, FeatureMap};

use crate::adam::Adam;
use crate::config::RegistrationConfig;
use crate::error::{RegError, Result};
use crate::instance::{Diagnostics, RegistrationResult};
use crate::objective::{Noise, Objective};
use crate::unet::{build_unet, SphericalUNet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// Mean loss over the corpus, one entry per epoch.
    pub epoch_losses: Vec<f64>,
    pub wall_time_s: f64,
}

/// Network input: moving channels followed by atlas-mean channels.
pub fn network_input(moving: &FeatureMap, atlas: &Atlas) -> Result<FeatureMap> {
    Ok(FeatureMap::stack(&[moving, atlas.mean()])?)
}

/// Builds a network from `cfg.seed` and trains it for `cfg.iters` epochs.
pub fn train_amortized(
    pairs: &[FeatureMap],
    atlas: &Atlas,
    cfg: &RegistrationConfig,
    widths: &[usize],
) -> Result<(SphericalUNet, TrainingReport)> {
    let grid = atlas.mean().grid_arc().clone();
    let mut model = build_unet(grid, 2 * atlas.mean().channels(), widths, cfg.seed)?;
    let report = train_model(&mut model, pairs, atlas, cfg)?;
    Ok((model, report))
}

/// Continues training `model`; pairs are visited in a seeded shuffled order
/// each epoch with one Adam step per pair.
pub fn train_model(
    model: &mut SphericalUNet,
    pairs: &[FeatureMap],
    atlas: &Atlas,
    cfg: &RegistrationConfig,
) -> Result<TrainingReport> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(RegError::Config("training corpus is empty".into()));
    }
    for p in pairs {
        ensure_same_grid(p.grid(), atlas.mean().grid(), "training pair")?;
    }
    let start = Instant::now();
    let obj = Objective::new(atlas.clone(), cfg.lambda, cfg.steps, cfg.mode, false)?;
    let n = atlas.mean().grid().len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut params = model.params();
    let mut adam = Adam::new(params.len());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.iters);
    for _ in 0..cfg.iters {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for &k in &order {
            let input = network_input(&pairs[k], atlas)?;
            let (out, tape) = model.forward_tape(&input)?;
            let noise = cfg.sample_stochastic.then(|| Noise::draw(n, &mut rng));
            let variance = noise.as_ref().map(|e| (out.log_var.data(), e));
            let eval = match obj.evaluate(&pairs[k], &out.mu, variance) {
                Ok(e) => e,
                Err(_) => return Err(RegError::Divergence { trace: epoch_losses }),
            };
            sum += eval.terms.total();
            let mut g_mu = eval.grad_mu.theta.clone();
            g_mu.extend_from_slice(&eval.grad_mu.phi);
            let g_lv = eval.grad_log_var.unwrap_or_else(|| vec![0.0; n]);
            let (grads, _) = model.backward(&tape, &g_mu, &g_lv)?;
            adam.step(&mut params, &grads, cfg.lr);
            if model.set_params(&params).is_err() {
                return Err(RegError::Divergence { trace: epoch_losses });
            }
        }
        epoch_losses.push(sum / pairs.len() as f64);
    }
    Ok(TrainingReport { epoch_losses, wall_time_s: start.elapsed().as_secs_f64() })
}

/// One forward pass; `Φ = exp(μ)`.
pub fn predict_amortized(
    model: &SphericalUNet,
    moving: &FeatureMap,
    atlas: &Atlas,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    let start = Instant::now();
    ensure_same_grid(moving.grid(), model.grid(), "predict_amortized")?;
    let out = model.forward(&network_input(moving, atlas)?)?;
    let obj = Objective::new(atlas.clone(), cfg.lambda, cfg.steps, cfg.mode, false)?;
    let phi = scaling_and_squaring(&out.mu, cfg.steps)?;
    let (warped, clamped) =
        spherewarp_core::sampler::sample_periodic_with_stats(moving, &phi, spherewarp_core::Interp::Bilinear)?;
    let data = spherewarp_core::likelihood::data_term_weighted(&warped, obj.atlas(), obj.weighting())?.0;
    let (smoothness, _) =
        spherewarp_core::prior::quadratic_penalty(&out.mu.as_displacement(), obj.laplacian(), obj.lambda());
    let terms = crate::objective::LossTerms { data, smoothness, variance: 0.0 };
    let sigma = FeatureMap::new(out.log_var.grid_arc().clone(), 1, out.log_var.data().iter().map(|s| s.exp()).collect())?;
    let (_, jac) = jacobian_map(&phi);
    Ok(RegistrationResult {
        mu: out.mu,
        sigma_diag: sigma,
        phi,
        loss_trace: vec![terms.total()],
        terms,
        diagnostics: Diagnostics {
            rotation: None,
            fraction_nonpositive: jac.fraction_nonpositive,
            clamped,
            wall_time_s: start.elapsed().as_secs_f64(),
            iterations: 1,
            levels: 1,
            rejected_steps: 0,
        },
    })
}
