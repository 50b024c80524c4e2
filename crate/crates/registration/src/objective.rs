//! Registration loss for one moving map against an atlas.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use spherewarp_core::prior::{isotropic_variance_penalty, quadratic_penalty};
use spherewarp_core::resample::Upsampler;
use spherewarp_core::sampler::{sample_periodic_vjp, sample_periodic_with_stats};
use spherewarp_core::{
    scaling_and_squaring_trace, Atlas, CoreError, DeformationField, FeatureMap, Interp,
    LikelihoodWeighting, SphereGrid, VelocityField, WeightedGraphLaplacian,
};

use crate::config::Mode;
use crate::error::Result;

/// Loss components at one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub data: f64,
    /// `½ λ Σ_c μ'_cᵀ L μ'_c`.
    pub smoothness: f64,
    /// Variance part of the KL bracket; zero when `σ` is not optimised.
    pub variance: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.data + self.smoothness + self.variance
    }
}

/// Value and gradients of the loss.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub terms: LossTerms,
    /// Gradient w.r.t. `μ` on the parameter grid.
    pub grad_mu: VelocityField,
    /// Gradient w.r.t. per-vertex `log σ²`, when the variance is optimised.
    pub grad_log_var: Option<Vec<f64>>,
    /// Velocity that was integrated (on the image grid).
    pub velocity: VelocityField,
    pub clamped: usize,
}

/// Standard-normal draws for one reparameterised sample, two per vertex.
#[derive(Debug, Clone)]
pub struct Noise {
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
}

impl Noise {
    pub fn draw(n: usize, rng: &mut impl Rng) -> Self {
        let theta = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let phi = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Self { theta, phi }
    }
}

/// Atlas, prior and integration settings shared by every evaluation.
#[derive(Debug, Clone)]
pub struct Objective {
    atlas: Atlas,
    laplacian: Arc<WeightedGraphLaplacian>,
    upsampler: Option<Upsampler>,
    lambda: f64,
    steps: usize,
    weighting: LikelihoodWeighting,
}

impl Objective {
    /// Loss on the atlas grid. With `half_resolution` the velocity mean lives
    /// on the half-resolution grid and is upsampled before integration.
    pub fn new(atlas: Atlas, lambda: f64, steps: usize, mode: Mode, half_resolution: bool) -> Result<Self> {
        let image = atlas.mean().grid_arc().clone();
        let (param_grid, upsampler, lambda) = if half_resolution {
            let coarse = Arc::new(image.coarsen()?);
            (coarse.clone(), Some(Upsampler::new(coarse)?), lambda / 4.0)
        } else {
            (image, None, lambda)
        };
        let laplacian = Arc::new(WeightedGraphLaplacian::new(param_grid, mode.edge_weighting()));
        Ok(Self { atlas, laplacian, upsampler, lambda, steps, weighting: mode.likelihood_weighting() })
    }

    pub fn atlas(&self) -> &Atlas {
        &self.atlas
    }

    pub fn image_grid(&self) -> &Arc<SphereGrid> {
        self.atlas.mean().grid_arc()
    }

    pub fn param_grid(&self) -> &Arc<SphereGrid> {
        match &self.upsampler {
            Some(u) => u.coarse(),
            None => self.image_grid(),
        }
    }

    pub fn laplacian(&self) -> &WeightedGraphLaplacian {
        &self.laplacian
    }

    /// Prior weight as applied on the parameter grid.
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn weighting(&self) -> LikelihoodWeighting {
        self.weighting
    }

    /// Brings a parameter-grid velocity onto the image grid.
    pub fn to_image_grid(&self, mu: &VelocityField) -> Result<VelocityField> {
        match &self.upsampler {
            Some(u) => Ok(VelocityField::from_feature_map(&u.forward(&mu.to_feature_map())?)?),
            None => Ok(mu.clone()),
        }
    }

    /// Per-vertex variance on the image grid.
    pub fn variance_to_image_grid(&self, log_var: &[f64]) -> Result<FeatureMap> {
        let var = FeatureMap::new(self.param_grid().clone(), 1, log_var.iter().map(|s| s.exp()).collect())?;
        match &self.upsampler {
            Some(u) => Ok(u.forward(&var)?),
            None => Ok(var),
        }
    }

    /// Resamples `moving` through `exp(v)`.
    pub fn warp(&self, moving: &FeatureMap, v: &VelocityField) -> Result<(FeatureMap, DeformationField)> {
        let phi = spherewarp_core::scaling_and_squaring(v, self.steps)?;
        let (w, _) = sample_periodic_with_stats(moving, &phi, Interp::Bilinear)?;
        Ok((w, phi))
    }

    /// Data term of `moving` warped by `exp(v)`, `v` on the image grid.
    pub fn data_value(&self, moving: &FeatureMap, v: &VelocityField) -> Result<f64> {
        let (w, _) = self.warp(moving, v)?;
        Ok(spherewarp_core::likelihood::data_term_weighted(&w, &self.atlas, self.weighting)?.0)
    }

    /// Loss and gradients. `variance` carries `log σ²` and the noise of a
    /// reparameterised draw `v = μ + σ ε` (θ component divided by `sin φ`).
    pub fn evaluate(
        &self,
        moving: &FeatureMap,
        mu: &VelocityField,
        variance: Option<(&[f64], &Noise)>,
    ) -> Result<Evaluation> {
        let pg = self.param_grid().clone();
        if !mu.grid().same_shape(&pg) {
            return Err(CoreError::GridMismatch("velocity mean is not on the parameter grid".into()).into());
        }
        let v_param = match variance {
            Some((lv, eps)) => draw(mu, lv, eps),
            None => mu.clone(),
        };
        let v = self.to_image_grid(&v_param)?;
        let trace = scaling_and_squaring_trace(&v, self.steps)?;
        let (warped, clamped) = sample_periodic_with_stats(moving, trace.result(), Interp::Bilinear)?;
        let (data, gw) = spherewarp_core::likelihood::data_term_weighted(&warped, &self.atlas, self.weighting)?;
        let gs = sample_periodic_vjp(moving, trace.result(), &gw)?;
        let gv_image = trace.vjp(&gs.coords);
        let gv = match &self.upsampler {
            Some(u) => VelocityField::from_feature_map(&u.vjp(&gv_image.to_feature_map())?)?,
            None => gv_image,
        };

        let (smoothness, gq) = quadratic_penalty(&mu.as_displacement(), &self.laplacian, self.lambda);
        let mut grad_mu = gv.clone();
        grad_mu.theta.iter_mut().zip(&gq.theta).for_each(|(a, b)| *a += b);
        grad_mu.phi.iter_mut().zip(&gq.phi).for_each(|(a, b)| *a += b);

        let (var_value, grad_log_var) = match variance {
            Some((lv, eps)) => {
                let (value, mut g) = isotropic_variance_penalty(lv, &self.laplacian, self.lambda);
                for i in 0..pg.rows() {
                    let inv_sin = 1.0 / pg.sin_lat()[i];
                    for j in 0..pg.cols() {
                        let k = pg.index(i, j);
                        let half_sigma = 0.5 * (0.5 * lv[k]).exp();
                        g[k] += half_sigma * (gv.theta[k] * eps.theta[k] * inv_sin + gv.phi[k] * eps.phi[k]);
                    }
                }
                (value, Some(g))
            }
            None => (0.0, None),
        };
        let terms = LossTerms { data, smoothness, variance: var_value };
        if !terms.total().is_finite() {
            return Err(CoreError::NonFinite("registration loss".into()).into());
        }
        Ok(Evaluation { terms, grad_mu, grad_log_var, velocity: v, clamped })
    }
}

/// `μ + σ ε`, with the longitude component divided by `sin φ`.
pub fn draw(mu: &VelocityField, log_var: &[f64], eps: &Noise) -> VelocityField {
    let g = mu.grid();
    let mut v = mu.clone();
    for i in 0..g.rows() {
        let inv_sin = 1.0 / g.sin_lat()[i];
        for j in 0..g.cols() {
            let k = g.index(i, j);
            let sigma = (0.5 * log_var[k]).exp();
            v.theta[k] += sigma * eps.theta[k] * inv_sin;
            v.phi[k] += sigma * eps.phi[k];
        }
    }
    v
}
