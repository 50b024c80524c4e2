//! Distortion-corrected Gaussian data term.
//!
//! Each cell's squared residual is scaled by its inverse atlas variance and by
//! `sin φ` of its row, so densely sampled polar rows do not dominate.

use crate::error::{CoreError, Result};
use crate::field::{ensure_same_grid, FeatureMap};

/// Relative variance floor applied when none is given: `1e-4 · max σ²`.
pub const DEFAULT_VARIANCE_FLOOR_RATIO: f64 = 1e-4;

/// Per-row weighting of the data term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LikelihoodWeighting {
    /// `S_ii = sin φ_i`.
    #[default]
    SinLatitude,
    /// `S = I`, the planar-image variant.
    Uniform,
}

/// Atlas mean and per-cell variance, optionally with a validity mask.
#[derive(Debug, Clone)]
pub struct Atlas {
    mean: FeatureMap,
    variance: FeatureMap,
    variance_floor: f64,
    mask: Option<Vec<bool>>,
}

impl Atlas {
    /// Builds an atlas, flooring the variance at `floor` (or at
    /// `1e-4 · max σ²` when `floor` is `None`).
    pub fn new(mean: FeatureMap, mut variance: FeatureMap, floor: Option<f64>) -> Result<Self> {
        ensure_same_grid(mean.grid(), variance.grid(), "atlas mean/variance")?;
        if mean.channels() != variance.channels() {
            return Err(CoreError::Shape(format!(
                "atlas mean has {} channels, variance has {}",
                mean.channels(),
                variance.channels()
            )));
        }
        let max = variance.data().iter().cloned().fold(0.0, f64::max);
        let floor = match floor {
            Some(f) => f,
            None => DEFAULT_VARIANCE_FLOOR_RATIO * max,
        };
        if !(floor > 0.0) {
            return Err(CoreError::InvalidArgument(format!("variance floor must be positive, got {floor}")));
        }
        variance.data_mut().iter_mut().for_each(|v| *v = v.max(floor));
        Ok(Self { mean, variance, variance_floor: floor, mask: None })
    }

    /// Unit-variance atlas around `mean`.
    pub fn unit(mean: FeatureMap) -> Self {
        let variance = FeatureMap::constant(mean.grid_arc().clone(), mean.channels(), 1.0);
        Self { mean, variance, variance_floor: 1.0, mask: None }
    }

    /// Excludes cells where `mask` is false from the data term.
    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.mean.grid().len() {
            return Err(CoreError::Shape(format!(
                "mask needs {} cells, got {}",
                self.mean.grid().len(),
                mask.len()
            )));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn mean(&self) -> &FeatureMap {
        &self.mean
    }

    pub fn variance(&self) -> &FeatureMap {
        &self.variance
    }

    pub fn variance_floor(&self) -> f64 {
        self.variance_floor
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    fn check(&self, warped: &FeatureMap) -> Result<()> {
        ensure_same_grid(self.mean.grid(), warped.grid(), "data term")?;
        if warped.channels() != self.mean.channels() {
            return Err(CoreError::Shape(format!(
                "warped map has {} channels, atlas has {}",
                warped.channels(),
                self.mean.channels()
            )));
        }
        Ok(())
    }
}

/// `½ Σ S_ii (I_a − I_w)² / σ²` summed over channels, with `S_ii = sin φ_i`.
pub fn data_term(warped: &FeatureMap, atlas: &Atlas) -> Result<f64> {
    Ok(data_term_weighted(warped, atlas, LikelihoodWeighting::SinLatitude)?.0)
}

/// Gradient of [`data_term`] w.r.t. the warped values.
pub fn data_term_grad(warped: &FeatureMap, atlas: &Atlas) -> Result<FeatureMap> {
    Ok(data_term_weighted(warped, atlas, LikelihoodWeighting::SinLatitude)?.1)
}

/// Value and gradient of the data term under the chosen row weighting.
pub fn data_term_weighted(
    warped: &FeatureMap,
    atlas: &Atlas,
    weighting: LikelihoodWeighting,
) -> Result<(f64, FeatureMap)> {
    atlas.check(warped)?;
    let g = warped.grid();
    let mut grad = FeatureMap::zeros(warped.grid_arc().clone(), warped.channels());
    let mut total = 0.0;
    for c in 0..warped.channels() {
        let w = warped.channel(c);
        let a = atlas.mean.channel(c);
        let v = atlas.variance.channel(c);
        let gc = grad.channel_mut(c);
        for i in 0..g.rows() {
            let s = match weighting {
                LikelihoodWeighting::SinLatitude => g.sin_lat()[i],
                LikelihoodWeighting::Uniform => 1.0,
            };
            for j in 0..g.cols() {
                let k = g.index(i, j);
                if let Some(mask) = &atlas.mask {
                    if !mask[k] {
                        continue;
                    }
                }
                let r = a[k] - w[k];
                total += s * r * r / v[k];
                gc[k] = -s * r / v[k];
            }
        }
    }
    Ok((0.5 * total, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, DiffOp};
    use crate::grid::SphereGrid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;
    use std::sync::Arc;

    /// Residual `I_a − I_w = 2` at one cell of `row`, σ² = 4 everywhere.
    fn single_cell_case(row: usize, rows: usize) -> (Arc<SphereGrid>, FeatureMap, Atlas) {
        let g = Arc::new(SphereGrid::new(rows, 8).unwrap());
        let mut mean = FeatureMap::zeros(g.clone(), 1);
        mean.data_mut()[g.index(row, 3)] = 2.0;
        let var = FeatureMap::constant(g.clone(), 1, 4.0);
        let atlas = Atlas::new(mean, var, Some(1e-6)).unwrap();
        (g.clone(), FeatureMap::zeros(g, 1), atlas)
    }

    #[test]
    fn exact_match_is_zero() {
        let g = Arc::new(SphereGrid::new(8, 16).unwrap());
        let m = crate::synth::smooth_test_map(&g, 3, 1);
        let atlas = Atlas::unit(m.clone());
        assert_eq!(data_term(&m, &atlas).unwrap(), 0.0);
        assert!(data_term_grad(&m, &atlas).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn equatorial_and_thirty_degree_cells() {
        // 3 rows: centers at π/6, π/2, 5π/6
        let (g, warped, atlas) = single_cell_case(1, 3);
        assert!((g.latitudes()[1] - PI / 2.0).abs() < 1e-15);
        assert!((data_term(&warped, &atlas).unwrap() - 0.5).abs() < 1e-12);
        let grad = data_term_grad(&warped, &atlas).unwrap();
        // −sin φ · r / σ² = −1 · 2 / 4
        assert!((grad.data()[g.index(1, 3)] + 0.5).abs() < 1e-12);
        assert_eq!(grad.data().iter().filter(|v| **v != 0.0).count(), 1);

        let (g, warped, atlas) = single_cell_case(0, 3);
        assert!((g.latitudes()[0] - PI / 6.0).abs() < 1e-15);
        assert!((data_term(&warped, &atlas).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn proportional_to_sin_latitude() {
        for row in 0..6 {
            let (g, warped, atlas) = single_cell_case(row, 6);
            let v = data_term(&warped, &atlas).unwrap();
            assert!((v - 0.5 * g.sin_lat()[row]).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_weighting_differs_by_sin_factor() {
        let g = Arc::new(SphereGrid::new(8, 16).unwrap());
        let a = crate::synth::smooth_test_map(&g, 3, 2);
        let w = crate::synth::smooth_test_map(&g, 3, 3);
        let atlas = Atlas::unit(a.clone());
        let (ws, _) = data_term_weighted(&w, &atlas, LikelihoodWeighting::SinLatitude).unwrap();
        let (wu, _) = data_term_weighted(&w, &atlas, LikelihoodWeighting::Uniform).unwrap();
        let mut diff = 0.0;
        for i in 0..8 {
            for j in 0..16 {
                let k = g.index(i, j);
                diff += 0.5 * (1.0 - g.sin_lat()[i]) * (a.data()[k] - w.data()[k]).powi(2);
            }
        }
        assert!((wu - ws - diff).abs() < 1e-10);
    }

    #[test]
    fn mask_and_floor() {
        let g = Arc::new(SphereGrid::new(4, 8).unwrap());
        let mean = FeatureMap::zeros(g.clone(), 1);
        let mut var = FeatureMap::constant(g.clone(), 1, 2.0);
        var.data_mut()[0] = 0.0;
        let atlas = Atlas::new(mean, var, None).unwrap();
        assert!((atlas.variance().data()[0] - 2e-4).abs() < 1e-18);
        let mut mask = vec![true; g.len()];
        mask[5] = false;
        let atlas = atlas.with_mask(mask).unwrap();
        let mut w = FeatureMap::zeros(g.clone(), 1);
        w.data_mut()[5] = 10.0;
        assert_eq!(data_term(&w, &atlas).unwrap(), 0.0);
        assert_eq!(data_term_grad(&w, &atlas).unwrap().data()[5], 0.0);
    }

    #[test]
    fn grid_mismatch() {
        let a = Atlas::unit(FeatureMap::zeros(Arc::new(SphereGrid::new(4, 8).unwrap()), 1));
        let w = FeatureMap::zeros(Arc::new(SphereGrid::new(8, 16).unwrap()), 1);
        assert!(data_term(&w, &a).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let g = Arc::new(SphereGrid::new(8, 16).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mean = FeatureMap::new(g.clone(), 2, (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let var = FeatureMap::new(g.clone(), 2, (0..256).map(|_| rng.gen_range(0.5..2.0)).collect()).unwrap();
        let atlas = Atlas::new(mean, var, None).unwrap();
        let x: Vec<f64> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let op = DiffOp::new(
            |x: &[f64]| vec![data_term(&FeatureMap::new(g.clone(), 2, x.to_vec()).unwrap(), &atlas).unwrap()],
            |x: &[f64], u: &[f64]| {
                data_term_grad(&FeatureMap::new(g.clone(), 2, x.to_vec()).unwrap(), &atlas)
                    .unwrap()
                    .data()
                    .iter()
                    .map(|v| v * u[0])
                    .collect()
            },
        );
        assert!(grad_check(&op, &x, 1e-5) < 1e-6);
    }
}
