//! Per-pair optimisation of the variational loss.

use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use spherewarp_core::field::ensure_same_grid;
use spherewarp_core::resample::pool2_onto;
use spherewarp_core::sampler::rotation_displacement;
use spherewarp_core::{
    jacobian_map, sample_periodic, scaling_and_squaring, upsample2, warp_labels, Atlas, DeformationField, FeatureMap,
    Interp, LabelMap, SphereGrid, VelocityField,
};

use crate::adam::Adam;
use crate::config::RegistrationConfig;
use crate::error::{RegError, Result};
use crate::objective::{LossTerms, Noise, Objective};
use crate::rigid::{rigid_align, RigidRotation};
use crate::transform::{compose, rotate_targets};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Rotation applied before the deformable stage, if any.
    pub rotation: Option<RigidRotation>,
    pub fraction_nonpositive: f64,
    /// Latitude-clamped reads in the final evaluation.
    pub clamped: usize,
    pub wall_time_s: f64,
    /// Iterations at the finest level.
    pub iterations: usize,
    pub levels: usize,
    pub rejected_steps: usize,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Velocity mean on the image grid.
    pub mu: VelocityField,
    /// Per-vertex posterior variance on the image grid.
    pub sigma_diag: FeatureMap,
    /// `exp(μ)`, the deformable part of the transform.
    pub phi: DeformationField,
    /// Loss per iteration at the finest level.
    pub loss_trace: Vec<f64>,
    pub terms: LossTerms,
    pub diagnostics: Diagnostics,
}

impl RegistrationResult {
    /// Full atlas-to-subject map `p ↦ R (p + d(p))`.
    pub fn transform(&self) -> DeformationField {
        match &self.diagnostics.rotation {
            Some(r) => rotate_targets(&self.phi, &r.matrix()),
            None => self.phi.clone(),
        }
    }

    /// Subject-to-atlas map, `exp(−μ)` after the inverse rotation.
    pub fn inverse_transform(&self, steps: usize) -> Result<DeformationField> {
        let inv = scaling_and_squaring(&self.mu.scaled(-1.0), steps)?;
        match &self.diagnostics.rotation {
            Some(r) => Ok(compose(&rotation_displacement(self.phi.grid_arc(), &r.inverse_matrix()), &inv)?),
            None => Ok(inv),
        }
    }

    /// Moving map resampled into atlas space.
    pub fn warp_moving(&self, moving: &FeatureMap) -> Result<FeatureMap> {
        Ok(sample_periodic(moving, &self.transform(), Interp::Bilinear)?)
    }

    /// Atlas parcellation carried into subject space.
    pub fn project_labels(&self, atlas_labels: &LabelMap, steps: usize) -> Result<LabelMap> {
        Ok(warp_labels(atlas_labels, &self.inverse_transform(steps)?)?)
    }

    pub fn mean_displacement(&self) -> f64 {
        self.phi.mean_geodesic_magnitude()
    }
}

/// Atlas labels carried into subject space by a rotation alone.
pub fn project_labels_rigid(atlas_labels: &LabelMap, rotation: &RigidRotation) -> Result<LabelMap> {
    let d = rotation_displacement(atlas_labels.grid_arc(), &rotation.inverse_matrix());
    Ok(warp_labels(atlas_labels, &d)?)
}

fn pool_atlas(atlas: &Atlas, coarse: &Arc<SphereGrid>) -> Result<Atlas> {
    let mean = pool2_onto(atlas.mean(), coarse)?;
    let var = pool2_onto(atlas.variance(), coarse)?;
    let mut out = Atlas::new(mean, var, Some(atlas.variance_floor()))?;
    if let Some(mask) = atlas.mask() {
        let n = atlas.mean().grid().cols();
        let mut m = Vec::with_capacity(coarse.len());
        for i in 0..coarse.rows() {
            for j in 0..coarse.cols() {
                let cells = [(2 * i, 2 * j), (2 * i, 2 * j + 1), (2 * i + 1, 2 * j), (2 * i + 1, 2 * j + 1)];
                m.push(cells.iter().all(|(a, b)| mask[a * n + b]));
            }
        }
        out = out.with_mask(m)?;
    }
    Ok(out)
}

fn can_coarsen(g: &SphereGrid, half_resolution: bool) -> bool {
    let need = if half_resolution { 4 } else { 2 };
    g.rows() % need == 0 && g.cols() % need == 0 && g.rows() / 2 >= 2 && g.cols() / 2 >= 4
}

/// Finest-first list of `(moving, atlas)` pairs.
fn pyramid(moving: &FeatureMap, atlas: &Atlas, levels: usize, half_resolution: bool) -> Result<Vec<(FeatureMap, Atlas)>> {
    let mut out = vec![(moving.clone(), atlas.clone())];
    while out.len() < levels {
        let (m, a) = out.last().expect("pyramid is never empty");
        if !can_coarsen(m.grid(), half_resolution) {
            break;
        }
        let coarse = Arc::new(m.grid().coarsen()?);
        let next = (pool2_onto(m, &coarse)?, pool_atlas(a, &coarse)?);
        out.push(next);
    }
    Ok(out)
}

fn flatten(v: &VelocityField) -> Vec<f64> {
    let mut out = v.theta.clone();
    out.extend_from_slice(&v.phi);
    out
}

fn unflatten(grid: &Arc<SphereGrid>, x: &[f64]) -> Result<VelocityField> {
    let n = grid.len();
    Ok(VelocityField::new(grid.clone(), x[..n].to_vec(), x[n..2 * n].to_vec())?)
}

struct LevelOutcome {
    mu: VelocityField,
    log_var: Vec<f64>,
    trace: Vec<f64>,
    terms: LossTerms,
    clamped: usize,
    rejected: usize,
}

fn converged(trace: &[f64], cfg: &RegistrationConfig) -> bool {
    if trace.len() <= cfg.window {
        return false;
    }
    let cur = trace[trace.len() - 1];
    let old = trace[trace.len() - 1 - cfg.window];
    (old - cur).abs() <= cfg.tol * cur.abs().max(f64::MIN_POSITIVE)
}

/// Monotone Adam on `μ`: a step that raises the loss is discarded and the
/// learning rate halved.
fn optimise_deterministic(
    obj: &Objective,
    moving: &FeatureMap,
    mu0: VelocityField,
    cfg: &RegistrationConfig,
) -> Result<LevelOutcome> {
    let grid = obj.param_grid().clone();
    let mut params = flatten(&mu0);
    let mut eval = obj.evaluate(moving, &mu0, None).map_err(|_| RegError::Divergence { trace: vec![] })?;
    let mut adam = Adam::new(params.len());
    let mut lr = cfg.lr;
    let mut trace = Vec::with_capacity(cfg.iters);
    let mut rejected = 0;
    for _ in 0..cfg.iters {
        trace.push(eval.terms.total());
        if converged(&trace, cfg) || lr < cfg.lr * 1e-12 {
            break;
        }
        let grad = flatten(&eval.grad_mu);
        let proposal = adam.propose(&params, &grad, lr);
        let candidate = unflatten(&grid, &proposal.params).and_then(|mu| Ok(obj.evaluate(moving, &mu, None)?));
        match candidate {
            Ok(next) if next.terms.total() <= eval.terms.total() => {
                params = adam.commit(proposal);
                eval = next;
                lr = (lr * 1.1).min(cfg.lr);
            }
            _ => {
                lr *= 0.5;
                rejected += 1;
            }
        }
    }
    let n = grid.len();
    Ok(LevelOutcome {
        mu: unflatten(&grid, &params)?,
        log_var: vec![cfg.init_log_var; n],
        trace,
        terms: eval.terms,
        clamped: eval.clamped,
        rejected,
    })
}

/// Adam on `(μ, log σ²)` with one reparameterised draw per iteration.
fn optimise_stochastic(
    obj: &Objective,
    moving: &FeatureMap,
    mu0: VelocityField,
    log_var0: Vec<f64>,
    cfg: &RegistrationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LevelOutcome> {
    let grid = obj.param_grid().clone();
    let n = grid.len();
    let mut params = flatten(&mu0);
    params.extend_from_slice(&log_var0);
    let mut adam = Adam::new(params.len());
    let mut trace = Vec::with_capacity(cfg.iters);
    let mut last = None;
    for _ in 0..cfg.iters {
        let mu = unflatten(&grid, &params)?;
        let noise = Noise::draw(n, rng);
        let eval = match obj.evaluate(moving, &mu, Some((&params[2 * n..], &noise))) {
            Ok(e) => e,
            Err(_) => return Err(RegError::Divergence { trace }),
        };
        trace.push(eval.terms.total());
        let mut grad = flatten(&eval.grad_mu);
        grad.extend_from_slice(eval.grad_log_var.as_ref().expect("variance gradient requested"));
        adam.step(&mut params, &grad, cfg.lr);
        if params.iter().any(|p| !p.is_finite()) {
            return Err(RegError::Divergence { trace });
        }
        last = Some((eval.terms, eval.clamped));
        if converged(&trace, cfg) {
            break;
        }
    }
    let (terms, clamped) = last.unwrap_or_default();
    Ok(LevelOutcome {
        mu: unflatten(&grid, &params)?,
        log_var: params[2 * n..].to_vec(),
        trace,
        terms,
        clamped,
        rejected: 0,
    })
}

/// Registers `moving` to `atlas`: optional rotation search, then a
/// coarse-to-fine optimisation of the velocity posterior.
pub fn register_instance(moving: &FeatureMap, atlas: &Atlas, cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    cfg.validate()?;
    ensure_same_grid(moving.grid(), atlas.mean().grid(), "register_instance")?;
    if moving.channels() != atlas.mean().channels() {
        return Err(RegError::Config(format!(
            "moving map has {} channels, atlas has {}",
            moving.channels(),
            atlas.mean().channels()
        )));
    }
    let start = Instant::now();
    let (rotation, aligned) = if cfg.rigid {
        let (r, m) = rigid_align(moving, atlas, cfg.rigid_step)?;
        (Some(r), m)
    } else {
        (None, moving.clone())
    };

    let levels = pyramid(&aligned, atlas, cfg.multires_levels, cfg.half_resolution)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut carry: Option<(VelocityField, Vec<f64>)> = None;
    let mut outcome = None;
    let mut finest_obj = None;
    for (depth, (m, a)) in levels.iter().enumerate().rev() {
        let lambda = cfg.lambda / 4f64.powi(depth as i32);
        let obj = Objective::new(a.clone(), lambda, cfg.steps, cfg.mode, cfg.half_resolution)?;
        let pg = obj.param_grid().clone();
        let (mu0, lv0) = match carry.take() {
            Some((mu, lv)) => {
                let up = upsample2(&mu.to_feature_map())?;
                let lv_up = upsample2(&FeatureMap::new(mu.grid_arc().clone(), 1, lv)?)?;
                let mu = VelocityField::new(pg.clone(), up.channel(0).to_vec(), up.channel(1).to_vec())?;
                (mu, lv_up.into_data())
            }
            None => (VelocityField::zeros(pg.clone()), vec![cfg.init_log_var; pg.len()]),
        };
        let out = if cfg.sample_stochastic {
            optimise_stochastic(&obj, m, mu0, lv0, cfg, &mut rng)?
        } else {
            optimise_deterministic(&obj, m, mu0, cfg)?
        };
        carry = Some((out.mu.clone(), out.log_var.clone()));
        outcome = Some(out);
        finest_obj = Some(obj);
    }
    let out = outcome.expect("at least one level");
    let obj = finest_obj.expect("at least one level");
    let mu = obj.to_image_grid(&out.mu)?;
    let sigma_diag = obj.variance_to_image_grid(&out.log_var)?;
    let phi = scaling_and_squaring(&mu, cfg.steps)?;
    let (_, jac) = jacobian_map(&phi);
    Ok(RegistrationResult {
        mu,
        sigma_diag,
        phi,
        diagnostics: Diagnostics {
            rotation,
            fraction_nonpositive: jac.fraction_nonpositive,
            clamped: out.clamped,
            wall_time_s: start.elapsed().as_secs_f64(),
            iterations: out.trace.len(),
            levels: levels.len(),
            rejected_steps: out.rejected,
        },
        loss_trace: out.trace,
        terms: out.terms,
    })
}
