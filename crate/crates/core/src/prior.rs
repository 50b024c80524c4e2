//! Latitude-weighted graph Laplacian prior on geodesic (Cartesian) velocities.
//!
//! Horizontal edges join `(i, j)` and `(i, j+1 mod N)` with weight `1/sin φ_i`;
//! vertical edges join `(i, j)` and `(i+1, j)` with weight 1. The prior
//! precision is `λ L_S` with `L_S = D_S - A_S`, applied independently to each
//! Cartesian component of `v' = T(p + v) - T(p)`.

use std::sync::Arc;

use crate::error::{CoreError, Result};
use crate::field::{ensure_same_grid, DeformationField};
use crate::grid::SphereGrid;

/// Edge weighting scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EdgeWeighting {
    /// `1/sin φ` on same-latitude edges, 1 on meridian edges.
    #[default]
    Spherical,
    /// Every edge weighs 1 (planar grid Laplacian).
    Uniform,
}

/// Sparse weighted Laplacian of the periodic grid graph.
#[derive(Debug, Clone)]
pub struct WeightedGraphLaplacian {
    grid: Arc<SphereGrid>,
    /// `(a, b, w)` with `a < b` never required; every undirected edge once.
    edges: Vec<(usize, usize, f64)>,
    degree: Vec<f64>,
}

impl WeightedGraphLaplacian {
    pub fn new(grid: Arc<SphereGrid>, weighting: EdgeWeighting) -> Self {
        let (m, n) = (grid.rows(), grid.cols());
        let mut edges = Vec::with_capacity(2 * m * n);
        for i in 0..m {
            let wh = match weighting {
                EdgeWeighting::Spherical => 1.0 / grid.sin_lat()[i],
                EdgeWeighting::Uniform => 1.0,
            };
            for j in 0..n {
                edges.push((grid.index(i, j), grid.index(i, (j + 1) % n), wh));
                if i + 1 < m {
                    edges.push((grid.index(i, j), grid.index(i + 1, j), 1.0));
                }
            }
        }
        let mut degree = vec![0.0; grid.len()];
        for &(a, b, w) in &edges {
            degree[a] += w;
            degree[b] += w;
        }
        Self { grid, edges, degree }
    }

    pub fn grid(&self) -> &SphereGrid {
        &self.grid
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    /// Diagonal of `D_S`.
    pub fn degree(&self) -> &[f64] {
        &self.degree
    }

    /// `L_S x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for &(a, b, w) in &self.edges {
            let d = w * (x[a] - x[b]);
            out[a] += d;
            out[b] -= d;
        }
        out
    }

    /// `xᵀ L_S x`, evaluated edge by edge.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        self.edges.iter().map(|&(a, b, w)| w * (x[a] - x[b]).powi(2)).sum()
    }

    /// Dense `L_S`; only sensible on small grids.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.grid.len();
        let mut l = vec![vec![0.0; n]; n];
        for &(a, b, w) in &self.edges {
            l[a][b] -= w;
            l[b][a] -= w;
        }
        for (k, d) in self.degree.iter().enumerate() {
            l[k][k] += d;
        }
        l
    }
}

/// Builds the spherical-weighted Laplacian.
pub fn build_weighted_laplacian(grid: Arc<SphereGrid>) -> WeightedGraphLaplacian {
    WeightedGraphLaplacian::new(grid, EdgeWeighting::Spherical)
}

/// Chord displacement `T(p + d) - T(p)` per vertex, one vector per component.
#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicVelocityField {
    pub vx: Vec<f64>,
    pub vy: Vec<f64>,
    pub vz: Vec<f64>,
}

impl GeodesicVelocityField {
    pub fn components(&self) -> [&[f64]; 3] {
        [&self.vx, &self.vy, &self.vz]
    }
}

/// Converts a polar displacement to the Cartesian chord displacement.
pub fn geodesic_velocity(d: &DeformationField) -> GeodesicVelocityField {
    let g = d.grid();
    let n = g.len();
    let (mut vx, mut vy, mut vz) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..g.rows() {
        let phi = g.latitudes()[i];
        let (sp, cp) = phi.sin_cos();
        for j in 0..g.cols() {
            let k = g.index(i, j);
            let (st, ct) = g.longitudes()[j].sin_cos();
            let (st2, ct2) = (g.longitudes()[j] + d.theta[k]).sin_cos();
            let (sp2, cp2) = (phi + d.phi[k]).sin_cos();
            vx[k] = sp2 * ct2 - sp * ct;
            vy[k] = sp2 * st2 - sp * st;
            vz[k] = cp2 - cp;
        }
    }
    GeodesicVelocityField { vx, vy, vz }
}

/// Pulls a gradient w.r.t. `v'` back to the polar displacement.
pub fn geodesic_velocity_vjp(d: &DeformationField, upstream: &GeodesicVelocityField) -> DeformationField {
    let g = d.grid();
    let n = g.len();
    let (mut gt, mut gp) = (vec![0.0; n], vec![0.0; n]);
    for i in 0..g.rows() {
        let phi = g.latitudes()[i];
        for j in 0..g.cols() {
            let k = g.index(i, j);
            let (st, ct) = (g.longitudes()[j] + d.theta[k]).sin_cos();
            let (sp, cp) = (phi + d.phi[k]).sin_cos();
            let (ux, uy, uz) = (upstream.vx[k], upstream.vy[k], upstream.vz[k]);
            // ∂T/∂θ = (-sinφ sinθ, sinφ cosθ, 0), ∂T/∂φ = (cosφ cosθ, cosφ sinθ, -sinφ)
            gt[k] = sp * (-st * ux + ct * uy);
            gp[k] = cp * (ct * ux + st * uy) - sp * uz;
        }
    }
    let mut out = DeformationField::zeros(d.grid_arc().clone());
    out.theta = gt;
    out.phi = gp;
    out
}

/// `½ λ Σ_c v'_cᵀ L v'_c` and its gradient w.r.t. the polar field.
pub fn quadratic_penalty(mu: &DeformationField, laplacian: &WeightedGraphLaplacian, lambda: f64) -> (f64, DeformationField) {
    let v = geodesic_velocity(mu);
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(3);
    for comp in v.components() {
        value += laplacian.quadratic_form(comp);
        grads.push(laplacian.apply(comp).into_iter().map(|x| lambda * x).collect::<Vec<_>>());
    }
    let up = GeodesicVelocityField { vz: grads.pop().unwrap(), vy: grads.pop().unwrap(), vx: grads.pop().unwrap() };
    (0.5 * lambda * value, geodesic_velocity_vjp(mu, &up))
}

/// Closed-form KL bracket, additive constants dropped:
/// `½ [ λ tr(D_S Σ) − Σ log σ² + λ Σ_c μ'_cᵀ L_S μ'_c ]`.
///
/// `sigma_diag` holds three variance blocks (x, y, z), each of length `M·N`.
pub fn prior_kl_term(
    mu: &DeformationField,
    sigma_diag: &[f64],
    laplacian: &WeightedGraphLaplacian,
    lambda: f64,
) -> Result<f64> {
    ensure_same_grid(mu.grid(), laplacian.grid(), "prior_kl_term")?;
    let n = mu.grid().len();
    if sigma_diag.len() != 3 * n {
        return Err(CoreError::Shape(format!("expected {} variances, got {}", 3 * n, sigma_diag.len())));
    }
    if !(lambda > 0.0) {
        return Err(CoreError::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    if let Some(bad) = sigma_diag.iter().find(|s| !(**s > 0.0)) {
        return Err(CoreError::InvalidArgument(format!("variance must be positive, got {bad}")));
    }
    prior_kl_cartesian(&geodesic_velocity(mu), sigma_diag, laplacian, lambda)
}

/// [`prior_kl_term`] evaluated directly on the Cartesian mean `μ'`.
pub fn prior_kl_cartesian(
    mu_cart: &GeodesicVelocityField,
    sigma_diag: &[f64],
    laplacian: &WeightedGraphLaplacian,
    lambda: f64,
) -> Result<f64> {
    let n = laplacian.grid().len();
    if sigma_diag.len() != 3 * n || mu_cart.vx.len() != n {
        return Err(CoreError::Shape(format!("expected {} variances, got {}", 3 * n, sigma_diag.len())));
    }
    let deg = laplacian.degree();
    let mut trace = 0.0;
    let mut logdet = 0.0;
    for (k, s) in sigma_diag.iter().enumerate() {
        trace += deg[k % n] * s;
        logdet += s.ln();
    }
    let quad: f64 = mu_cart.components().iter().map(|c| laplacian.quadratic_form(c)).sum();
    Ok(0.5 * (lambda * trace - logdet + lambda * quad))
}

/// Isotropic variance part of the bracket for per-vertex `log σ²`, where each
/// vertex carries the same variance on all three Cartesian components.
/// Returns the value and the gradient w.r.t. `log σ²`.
pub fn isotropic_variance_penalty(log_var: &[f64], laplacian: &WeightedGraphLaplacian, lambda: f64) -> (f64, Vec<f64>) {
    let deg = laplacian.degree();
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(log_var.len());
    for (k, &s) in log_var.iter().enumerate() {
        let var = s.exp();
        value += 1.5 * (lambda * deg[k] * var - s);
        grad.push(1.5 * (lambda * deg[k] * var - 1.0));
    }
    (value, grad)
}
