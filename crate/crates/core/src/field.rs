//! Scalar and vector fields sampled on a [`SphereGrid`].

use std::sync::Arc;

use crate::error::{CoreError, Result};
use crate::grid::{chord_to_arc, polar_to_cartesian, SphereGrid};

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(k) => Err(CoreError::NonFinite(format!("{what}[{k}] = {}", data[k]))),
        None => Ok(()),
    }
}

pub fn ensure_same_grid(a: &SphereGrid, b: &SphereGrid, what: &str) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(CoreError::GridMismatch(format!(
            "{what}: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )))
    }
}

/// One or more scalar channels over a grid, stored channel-major then
/// latitude-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    grid: Arc<SphereGrid>,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(grid: Arc<SphereGrid>, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(CoreError::Shape("feature map needs at least one channel".into()));
        }
        if data.len() != channels * grid.len() {
            return Err(CoreError::Shape(format!(
                "expected {} values for {} channel(s) on {}x{}, got {}",
                channels * grid.len(),
                channels,
                grid.rows(),
                grid.cols(),
                data.len()
            )));
        }
        check_finite(&data, "feature")?;
        Ok(Self { grid, channels, data })
    }

    pub fn zeros(grid: Arc<SphereGrid>, channels: usize) -> Self {
        Self::constant(grid, channels, 0.0)
    }

    pub fn constant(grid: Arc<SphereGrid>, channels: usize, value: f64) -> Self {
        let n = grid.len() * channels;
        Self { grid, channels, data: vec![value; n] }
    }

    /// Builds a single-channel map by evaluating `f(i, j)` at every cell.
    pub fn from_fn(grid: Arc<SphereGrid>, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for i in 0..grid.rows() {
            for j in 0..grid.cols() {
                data.push(f(i, j));
            }
        }
        Self { grid, channels: 1, data }
    }

    /// Stacks single- or multi-channel maps along the channel axis.
    pub fn stack(maps: &[&FeatureMap]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| CoreError::Shape("cannot stack zero maps".into()))?;
        let mut data = Vec::new();
        let mut channels = 0;
        for m in maps {
            ensure_same_grid(&first.grid, &m.grid, "stack")?;
            data.extend_from_slice(&m.data);
            channels += m.channels;
        }
        Ok(Self { grid: first.grid.clone(), channels, data })
    }

    pub fn grid(&self) -> &SphereGrid {
        &self.grid
    }

    pub fn grid_arc(&self) -> &Arc<SphereGrid> {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.grid.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.grid.len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// A single channel as its own map.
    pub fn extract_channel(&self, c: usize) -> FeatureMap {
        FeatureMap { grid: self.grid.clone(), channels: 1, data: self.channel(c).to_vec() }
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[c * self.grid.len() + self.grid.index(i, j)]
    }

    /// Area-weighted mean of each channel.
    pub fn weighted_mean(&self, c: usize) -> f64 {
        let g = &self.grid;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..g.rows() {
            let w = g.area_weights()[i];
            let row = &self.channel(c)[i * g.cols()..(i + 1) * g.cols()];
            num += w * row.iter().sum::<f64>();
            den += w * g.cols() as f64;
        }
        num / den
    }

    /// Circular shift by `k` columns: `out(i, j) = self(i, j - k)`.
    pub fn roll_columns(&self, k: isize) -> FeatureMap {
        let g = &self.grid;
        let mut out = self.clone();
        for c in 0..self.channels {
            let src = self.channel(c);
            let dst = out.channel_mut(c);
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    dst[g.index(i, j)] = src[g.index(i, g.wrap_col(j as isize - k))];
                }
            }
        }
        out
    }
}

/// Stationary velocity field in `(θ, φ)` radians per unit time.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    grid: Arc<SphereGrid>,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
}

/// Displacement field in `(θ, φ)` radians; the warp maps cell `(θ_j, φ_i)`
/// to `(θ_j + d_θ, φ_i + d_φ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    grid: Arc<SphereGrid>,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
}

macro_rules! polar_field {
    ($ty:ident, $label:literal) => {
        impl $ty {
            pub fn new(grid: Arc<SphereGrid>, theta: Vec<f64>, phi: Vec<f64>) -> Result<Self> {
                if theta.len() != grid.len() || phi.len() != grid.len() {
                    return Err(CoreError::Shape(format!(
                        "{} components must have {} values, got {} and {}",
                        $label,
                        grid.len(),
                        theta.len(),
                        phi.len()
                    )));
                }
                check_finite(&theta, concat!($label, ".theta"))?;
                check_finite(&phi, concat!($label, ".phi"))?;
                Ok(Self { grid, theta, phi })
            }

            pub fn zeros(grid: Arc<SphereGrid>) -> Self {
                let n = grid.len();
                Self { grid, theta: vec![0.0; n], phi: vec![0.0; n] }
            }

            /// Same value at every cell.
            pub fn uniform(grid: Arc<SphereGrid>, theta: f64, phi: f64) -> Self {
                let n = grid.len();
                Self { grid, theta: vec![theta; n], phi: vec![phi; n] }
            }

            pub fn grid(&self) -> &SphereGrid {
                &self.grid
            }

            pub fn grid_arc(&self) -> &Arc<SphereGrid> {
                &self.grid
            }

            /// Physical (tangent-plane) magnitude `sqrt((sin φ u_θ)² + u_φ²)` per cell.
            pub fn physical_magnitudes(&self) -> Vec<f64> {
                let g = &self.grid;
                let mut out = Vec::with_capacity(g.len());
                for i in 0..g.rows() {
                    let s = g.sin_lat()[i];
                    for j in 0..g.cols() {
                        let k = g.index(i, j);
                        out.push(((s * self.theta[k]).powi(2) + self.phi[k].powi(2)).sqrt());
                    }
                }
                out
            }

            /// Largest physical magnitude.
            pub fn max_magnitude(&self) -> f64 {
                self.physical_magnitudes().into_iter().fold(0.0, f64::max)
            }

            pub fn is_finite(&self) -> bool {
                self.theta.iter().chain(self.phi.iter()).all(|v| v.is_finite())
            }

            /// Both components as a two-channel feature map (θ first).
            pub fn to_feature_map(&self) -> FeatureMap {
                let mut data = self.theta.clone();
                data.extend_from_slice(&self.phi);
                FeatureMap { grid: self.grid.clone(), channels: 2, data }
            }

            /// Inverse of [`Self::to_feature_map`].
            pub fn from_feature_map(map: &FeatureMap) -> Result<Self> {
                if map.channels() != 2 {
                    return Err(CoreError::Shape(format!(
                        "{} needs 2 channels, got {}",
                        $label,
                        map.channels()
                    )));
                }
                Self::new(map.grid_arc().clone(), map.channel(0).to_vec(), map.channel(1).to_vec())
            }

            /// Circular shift by `k` columns.
            pub fn roll_columns(&self, k: isize) -> Self {
                let m = self.to_feature_map().roll_columns(k);
                Self::from_feature_map(&m).expect("rolled field keeps its shape")
            }

            pub fn scaled(&self, s: f64) -> Self {
                Self {
                    grid: self.grid.clone(),
                    theta: self.theta.iter().map(|v| v * s).collect(),
                    phi: self.phi.iter().map(|v| v * s).collect(),
                }
            }
        }
    };
}

polar_field!(VelocityField, "velocity");
polar_field!(DeformationField, "deformation");

impl VelocityField {
    /// Reinterprets the velocity as a one-step displacement.
    pub fn as_displacement(&self) -> DeformationField {
        DeformationField { grid: self.grid.clone(), theta: self.theta.clone(), phi: self.phi.clone() }
    }
}

impl DeformationField {
    /// Target coordinates `(θ + d_θ, φ + d_φ)` of cell `(i, j)`, unwrapped.
    #[inline]
    pub fn target(&self, i: usize, j: usize) -> (f64, f64) {
        let k = self.grid.index(i, j);
        let (t, p) = self.grid.coords(i, j);
        (t + self.theta[k], p + self.phi[k])
    }

    /// Great-circle distance travelled by every cell.
    pub fn geodesic_magnitudes(&self) -> Vec<f64> {
        let g = &self.grid;
        let mut out = Vec::with_capacity(g.len());
        for i in 0..g.rows() {
            for j in 0..g.cols() {
                let (t, p) = self.target(i, j);
                out.push(chord_to_arc(&g.point(i, j), &polar_to_cartesian(t, p)));
            }
        }
        out
    }

    /// Area-weighted mean great-circle displacement.
    pub fn mean_geodesic_magnitude(&self) -> f64 {
        area_weighted_mean(&self.grid, &self.geodesic_magnitudes())
    }

    /// Treats the displacement as a velocity (used for inverse-consistency checks).
    pub fn as_velocity(&self) -> VelocityField {
        VelocityField { grid: self.grid.clone(), theta: self.theta.clone(), phi: self.phi.clone() }
    }
}

/// Integer parcel labels; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    grid: Arc<SphereGrid>,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(grid: Arc<SphereGrid>, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(CoreError::Shape(format!(
                "label map needs {} values, got {}",
                grid.len(),
                labels.len()
            )));
        }
        Ok(Self { grid, labels })
    }

    pub fn grid(&self) -> &SphereGrid {
        &self.grid
    }

    pub fn grid_arc(&self) -> &Arc<SphereGrid> {
        &self.grid
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.labels[self.grid.index(i, j)]
    }

    /// Sorted distinct non-background labels.
    pub fn regions(&self) -> Vec<u32> {
        let mut r: Vec<u32> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        r.sort_unstable();
        r.dedup();
        r
    }

    pub fn roll_columns(&self, k: isize) -> LabelMap {
        let g = &self.grid;
        let mut labels = self.labels.clone();
        for i in 0..g.rows() {
            for j in 0..g.cols() {
                labels[g.index(i, j)] = self.labels[g.index(i, g.wrap_col(j as isize - k))];
            }
        }
        LabelMap { grid: self.grid.clone(), labels }
    }
}

/// Area-weighted mean of a per-cell quantity.
pub fn area_weighted_mean(grid: &SphereGrid, values: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..grid.rows() {
        let w = grid.area_weights()[i];
        for j in 0..grid.cols() {
            num += w * values[grid.index(i, j)];
            den += w;
        }
    }
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Arc<SphereGrid> {
        Arc::new(SphereGrid::new(4, 8).unwrap())
    }

    #[test]
    fn shape_and_finiteness_checked() {
        assert!(FeatureMap::new(grid(), 2, vec![0.0; 32]).is_err());
        assert!(FeatureMap::new(grid(), 1, vec![f64::NAN; 32]).is_err());
        assert!(VelocityField::new(grid(), vec![0.0; 32], vec![0.0; 31]).is_err());
        assert!(LabelMap::new(grid(), vec![0; 3]).is_err());
    }

    #[test]
    fn roll_is_circular() {
        let g = grid();
        let m = FeatureMap::from_fn(g.clone(), |i, j| (i * 10 + j) as f64);
        let r = m.roll_columns(1);
        assert_eq!(r.get(0, 0, 1), m.get(0, 0, 0));
        assert_eq!(r.get(0, 2, 0), m.get(0, 2, 7));
        assert_eq!(m.roll_columns(8), m);
    }

    #[test]
    fn uniform_longitude_shift_magnitude() {
        let g = grid();
        let d = DeformationField::uniform(g.clone(), 0.1, 0.0);
        let mags = d.geodesic_magnitudes();
        for i in 0..g.rows() {
            let s = g.sin_lat()[i];
            let expect = 2.0 * (s * 0.05f64.sin()).asin();
            assert!((mags[g.index(i, 3)] - expect).abs() < 1e-12);
        }
    }
}
