//! Two-angle rotation search.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use spherewarp_core::grid::{mat_mul, rot_y, rot_z, wrap_signed};
use spherewarp_core::sampler::rotation_displacement;
use spherewarp_core::{sample_periodic, Atlas, FeatureMap, Interp, LikelihoodWeighting, SphereGrid};

use crate::error::{RegError, Result};

/// Rotation `R = R_y(β) R_z(α)`; the rotated map reads the moving map at `R p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct RigidRotation {
    /// About z, reported in `(−π, π]`.
    pub alpha: f64,
    /// About y, in `[−π/2, π/2]`.
    pub beta: f64,
}

impl RigidRotation {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        mat_mul(&rot_y(self.beta), &rot_z(self.alpha))
    }

    /// Rotation angle of `R`.
    pub fn magnitude(&self) -> f64 {
        let m = self.matrix();
        ((m[0][0] + m[1][1] + m[2][2] - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// `moving(R p)` on the moving map's grid.
    pub fn apply(&self, moving: &FeatureMap) -> Result<FeatureMap> {
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Ok(moving.clone());
        }
        let d = rotation_displacement(moving.grid_arc(), &self.matrix());
        Ok(sample_periodic(moving, &d, Interp::Bilinear)?)
    }

    pub fn inverse_matrix(&self) -> [[f64; 3]; 3] {
        let m = self.matrix();
        let mut t = [[0.0; 3]; 3];
        for (r, row) in m.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                t[c][r] = *v;
            }
        }
        t
    }
}

fn score_shifted(m: &FeatureMap, atlas: &Atlas, shift: usize) -> f64 {
    let g = m.grid();
    let n = g.cols();
    let mut total = 0.0;
    for c in 0..m.channels() {
        let src = m.channel(c);
        let mean = atlas.mean().channel(c);
        let var = atlas.variance().channel(c);
        for i in 0..g.rows() {
            let s = g.sin_lat()[i];
            let row = i * n;
            let mut acc = 0.0;
            for j in 0..n {
                let k = row + j;
                if let Some(mask) = atlas.mask() {
                    if !mask[k] {
                        continue;
                    }
                }
                let r = mean[k] - src[row + (j + shift) % n];
                acc += r * r / var[k];
            }
            total += s * acc;
        }
    }
    0.5 * total
}

fn score(moving: &FeatureMap, atlas: &Atlas, rot: &RigidRotation) -> Result<f64> {
    let rotated = rot.apply(moving)?;
    Ok(spherewarp_core::likelihood::data_term_weighted(&rotated, atlas, LikelihoodWeighting::SinLatitude)?.0)
}

struct Best {
    rot: RigidRotation,
    score: f64,
    magnitude: f64,
}

impl Best {
    fn offer(&mut self, rot: RigidRotation, score: f64) {
        let tie = (score - self.score).abs() <= 1e-12 * self.score.abs().max(1.0);
        if tie {
            let mag = rot.magnitude();
            if mag < self.magnitude {
                *self = Best { rot, score, magnitude: mag };
            }
        } else if score < self.score {
            *self = Best { rot, score, magnitude: rot.magnitude() };
        }
    }
}

fn steps_in(range: f64, step: f64) -> Result<usize> {
    let k = range / step;
    if !(step > 0.0) || (k - k.round()).abs() > 1e-9 * k.max(1.0) {
        return Err(RegError::Config(format!("coarse step {step} does not divide {range}")));
    }
    Ok(k.round() as usize)
}

/// Exhaustive search over `α ∈ [0, 2π)` and `β ∈ [−π/2, π/2]` at
/// `coarse_step` (α snapped to whole columns), then one refinement pass at
/// `coarse_step / 8` within one coarse step of the best pair.
pub fn rigid_align(moving: &FeatureMap, atlas: &Atlas, coarse_step: f64) -> Result<(RigidRotation, FeatureMap)> {
    spherewarp_core::field::ensure_same_grid(moving.grid(), atlas.mean().grid(), "rigid_align")?;
    let na = steps_in(TAU, coarse_step)?;
    let nb = steps_in(PI, coarse_step)?;
    let grid: &Arc<SphereGrid> = moving.grid_arc();
    let n = grid.cols();
    let mut columns: Vec<usize> = (0..na).map(|k| ((k as f64 * n as f64 / na as f64).round() as usize) % n).collect();
    columns.dedup();

    let mut best = Best { rot: RigidRotation::identity(), score: f64::INFINITY, magnitude: f64::INFINITY };
    for b in 0..=nb {
        let beta = (b as f64 - nb as f64 / 2.0) * coarse_step;
        let base = RigidRotation { alpha: 0.0, beta }.apply(moving)?;
        for &col in &columns {
            let alpha = wrap_signed(col as f64 * grid.dtheta());
            best.offer(RigidRotation { alpha, beta }, score_shifted(&base, atlas, col));
        }
    }

    let fine = coarse_step / 8.0;
    let centre = best.rot;
    for da in -8i32..=8 {
        for db in -8i32..=8 {
            if da == 0 && db == 0 {
                continue;
            }
            let beta = centre.beta + db as f64 * fine;
            if beta < -FRAC_PI_2 - 1e-12 || beta > FRAC_PI_2 + 1e-12 {
                continue;
            }
            let rot = RigidRotation { alpha: wrap_signed(centre.alpha + da as f64 * fine), beta };
            best.offer(rot, score(moving, atlas, &rot)?);
        }
    }
    let rotated = best.rot.apply(moving)?;
    Ok((best.rot, rotated))
}
