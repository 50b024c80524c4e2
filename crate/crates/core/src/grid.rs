//! Equirectangular parameterization of the unit sphere.
//!
//! Rows index colatitude `φ ∈ (0, π)` sampled at cell centers, columns index
//! longitude `θ ∈ [0, 2π)` starting at zero. Storage everywhere in the crate
//! is latitude-major: cell `(i, j)` lives at `i * cols + j`.

use std::f64::consts::{PI, TAU};

use crate::error::{CoreError, Result};

/// An `M × N` latitude/longitude grid over the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereGrid {
    rows: usize,
    cols: usize,
    latitudes: Vec<f64>,
    longitudes: Vec<f64>,
    sin_lat: Vec<f64>,
    area_weights: Vec<f64>,
}

impl SphereGrid {
    /// Builds a grid with `rows` latitude samples at cell centers and `cols`
    /// uniformly spaced longitudes.
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows < 2 {
            return Err(CoreError::InvalidGrid(format!("need at least 2 rows, got {rows}")));
        }
        if cols < 4 || cols % 2 != 0 {
            return Err(CoreError::InvalidGrid(format!(
                "need an even column count >= 4, got {cols}"
            )));
        }
        Ok(Self::build(rows, cols))
    }

    fn build(rows: usize, cols: usize) -> Self {
        let dphi = PI / rows as f64;
        let dtheta = TAU / cols as f64;
        let latitudes: Vec<f64> = (0..rows).map(|i| (i as f64 + 0.5) * dphi).collect();
        let longitudes: Vec<f64> = (0..cols).map(|j| j as f64 * dtheta).collect();
        let sin_lat: Vec<f64> = latitudes.iter().map(|p| p.sin()).collect();
        // cell solid angle is sin φ · Δθ · Δφ; the per-row factor is sin φ
        let area_weights = sin_lat.clone();
        Self { rows, cols, latitudes, longitudes, sin_lat, area_weights }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Number of cells, `M · N`.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn latitudes(&self) -> &[f64] {
        &self.latitudes
    }

    pub fn longitudes(&self) -> &[f64] {
        &self.longitudes
    }

    pub fn sin_lat(&self) -> &[f64] {
        &self.sin_lat
    }

    pub fn area_weights(&self) -> &[f64] {
        &self.area_weights
    }

    /// Longitude spacing `2π / N`.
    pub fn dtheta(&self) -> f64 {
        TAU / self.cols as f64
    }

    /// Colatitude spacing `π / M`.
    pub fn dphi(&self) -> f64 {
        PI / self.rows as f64
    }

    /// Solid angle of one cell in row `i`.
    pub fn cell_area(&self, i: usize) -> f64 {
        self.area_weights[i] * self.dtheta() * self.dphi()
    }

    /// Sum of all cell solid angles; close to `4π`.
    pub fn total_area(&self) -> f64 {
        (0..self.rows).map(|i| self.cell_area(i) * self.cols as f64).sum()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.cols + j
    }

    /// Column index with longitude wraparound.
    #[inline]
    pub fn wrap_col(&self, j: isize) -> usize {
        j.rem_euclid(self.cols as isize) as usize
    }

    /// `(θ, φ)` of cell `(i, j)`.
    #[inline]
    pub fn coords(&self, i: usize, j: usize) -> (f64, f64) {
        (self.longitudes[j], self.latitudes[i])
    }

    /// Unit vector at the center of cell `(i, j)`.
    pub fn point(&self, i: usize, j: usize) -> [f64; 3] {
        let (t, p) = self.coords(i, j);
        polar_to_cartesian(t, p)
    }

    /// Fractional row coordinate of colatitude `φ` (row `i` sits at `i`).
    #[inline]
    pub fn row_coord(&self, phi: f64) -> f64 {
        phi / self.dphi() - 0.5
    }

    /// Fractional column coordinate of longitude `θ` (not wrapped).
    #[inline]
    pub fn col_coord(&self, theta: f64) -> f64 {
        theta / self.dtheta()
    }

    /// Whether two grids have identical shape (and therefore identical samples).
    pub fn same_shape(&self, other: &SphereGrid) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// Grid at half resolution in both axes. Pyramids may go below the
    /// minimum accepted by [`SphereGrid::new`], down to a single row of two
    /// columns.
    pub fn coarsen(&self) -> Result<SphereGrid> {
        if self.rows % 2 != 0 || self.cols % 2 != 0 || self.cols < 4 {
            return Err(CoreError::InvalidGrid(format!(
                "{}x{} grid cannot be halved",
                self.rows, self.cols
            )));
        }
        Ok(SphereGrid::build(self.rows / 2, self.cols / 2))
    }

    /// Grid at double resolution in both axes.
    pub fn refine(&self) -> Result<SphereGrid> {
        SphereGrid::new(self.rows * 2, self.cols * 2)
    }
}

/// Converts longitude/colatitude to a point on the unit sphere.
#[inline]
pub fn polar_to_cartesian(theta: f64, phi: f64) -> [f64; 3] {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    [sp * ct, sp * st, cp]
}

/// Inverse of [`polar_to_cartesian`]; returns `(θ ∈ [0, 2π), φ ∈ [0, π])`.
pub fn cartesian_to_polar(p: [f64; 3]) -> (f64, f64) {
    let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    let phi = (p[2] / r).clamp(-1.0, 1.0).acos();
    let theta = wrap_angle(p[1].atan2(p[0]));
    (theta, phi)
}

/// Wraps a finite longitude into `[0, 2π)`.
pub fn wrap_longitude(theta: f64) -> Result<f64> {
    if !theta.is_finite() {
        return Err(CoreError::NonFinite(format!("longitude {theta}")));
    }
    Ok(wrap_angle(theta))
}

/// Unchecked longitude wrap used on hot paths.
#[inline]
pub(crate) fn wrap_angle(theta: f64) -> f64 {
    let w = theta.rem_euclid(TAU);
    // rem_euclid can round up to exactly 2π for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Signed longitude difference folded into `(-π, π]`.
#[inline]
pub fn wrap_signed(delta: f64) -> f64 {
    let w = wrap_angle(delta);
    if w > PI {
        w - TAU
    } else {
        w
    }
}

/// Great-circle distance between two `(θ, φ)` points on the unit sphere.
pub fn great_circle(a: (f64, f64), b: (f64, f64)) -> f64 {
    let pa = polar_to_cartesian(a.0, a.1);
    let pb = polar_to_cartesian(b.0, b.1);
    chord_to_arc(&pa, &pb)
}

/// Arc length between two unit vectors, computed from the chord for accuracy
/// at small separations.
#[inline]
pub fn chord_to_arc(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let chord = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    2.0 * (0.5 * chord).min(1.0).asin()
}

/// Rotation matrix about the z axis.
pub fn rot_z(angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Rotation matrix about the y axis.
pub fn rot_y(angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

pub fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    out
}

pub fn mat_vec(a: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn transpose(a: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut t = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            t[r][c] = a[c][r];
        }
    }
    t
}
