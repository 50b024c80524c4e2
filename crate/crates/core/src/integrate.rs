//! Group exponential of a stationary velocity field by scaling and squaring.
//!
//! Displacements are composed in `(θ, φ)` coordinates: `d ← d + d∘(id + d)`.
//! The θ channel is resampled as a displacement (a small residual), never as an
//! absolute longitude, so the 2π seam never shows up in the interpolation.

use crate::error::{CoreError, Result};
use crate::field::{DeformationField, VelocityField};
use crate::sampler::Warp;

/// Number of squaring steps used throughout.
pub const DEFAULT_STEPS: usize = 7;

/// Intermediate displacements of one scaling-and-squaring evaluation, kept
/// for the backward pass.
#[derive(Debug, Clone)]
pub struct SquaringTrace {
    /// `d_0 = v / 2^steps` through `d_steps = exp(v)`.
    levels: Vec<DeformationField>,
    warps: Vec<Warp>,
}

/// `exp(v)` as a displacement field.
pub fn scaling_and_squaring(v: &VelocityField, steps: usize) -> Result<DeformationField> {
    Ok(scaling_and_squaring_trace(v, steps)?.into_result())
}

/// Forward pass that records what [`SquaringTrace::vjp`] needs.
pub fn scaling_and_squaring_trace(v: &VelocityField, steps: usize) -> Result<SquaringTrace> {
    if steps == 0 {
        return Err(CoreError::InvalidArgument("scaling and squaring needs at least one step".into()));
    }
    let scale = 0.5f64.powi(steps as i32);
    let mut d = v.as_displacement().scaled(scale);
    let n = d.theta.len();
    let mut levels = Vec::with_capacity(steps + 1);
    let mut warps = Vec::with_capacity(steps);
    for step in 0..steps {
        let warp = Warp::new(&d);
        let mut next = d.clone();
        let mut tmp = vec![0.0; n];
        warp.apply(&d.theta, &mut tmp);
        next.theta.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
        warp.apply(&d.phi, &mut tmp);
        next.phi.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
        if !next.is_finite() {
            return Err(CoreError::NonFinite(format!("scaling and squaring diverged at step {}", step + 1)));
        }
        levels.push(d);
        warps.push(warp);
        d = next;
    }
    levels.push(d);
    Ok(SquaringTrace { levels, warps })
}

impl SquaringTrace {
    pub fn result(&self) -> &DeformationField {
        self.levels.last().expect("trace has at least one level")
    }

    pub fn into_result(mut self) -> DeformationField {
        self.levels.pop().expect("trace has at least one level")
    }

    pub fn steps(&self) -> usize {
        self.warps.len()
    }

    /// Latitude-clamped reads summed over all compositions.
    pub fn clamped(&self) -> usize {
        self.warps.iter().map(Warp::clamped).sum()
    }

    /// Pulls a gradient w.r.t. the final displacement back to the velocity.
    pub fn vjp(&self, upstream: &DeformationField) -> VelocityField {
        let grid = upstream.grid();
        let n = grid.len();
        let inv_dt = 1.0 / grid.dtheta();
        let inv_dp = 1.0 / grid.dphi();
        let mut gt = upstream.theta.clone();
        let mut gp = upstream.phi.clone();
        for k in (0..self.warps.len()).rev() {
            let d = &self.levels[k];
            let warp = &self.warps[k];
            // identity path
            let mut nt = gt.clone();
            let mut np = gp.clone();
            // resampled values
            warp.adjoint(&gt, &mut nt);
            warp.adjoint(&gp, &mut np);
            // read positions
            let mut gx = vec![0.0; n];
            let mut gy = vec![0.0; n];
            warp.coord_adjoint(&d.theta, &gt, &mut gx, &mut gy);
            warp.coord_adjoint(&d.phi, &gp, &mut gx, &mut gy);
            for i in 0..n {
                nt[i] += gx[i] * inv_dt;
                np[i] += gy[i] * inv_dp;
            }
            gt = nt;
            gp = np;
        }
        let scale = 0.5f64.powi(self.warps.len() as i32);
        gt.iter_mut().chain(gp.iter_mut()).for_each(|g| *g *= scale);
        let mut out = VelocityField::zeros(upstream.grid_arc().clone());
        out.theta = gt;
        out.phi = gp;
        out
    }
}
