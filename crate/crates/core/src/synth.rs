//! Synthetic subjects with known warps, and brute-force reference oracles.
//!
//! Every synthetic quantity is an analytic function on the unit sphere
//! (sums of zonal Legendre terms `P_l(u · x)`), rendered onto a grid through a
//! [`Frame`]. Rendering the same world through a rotated frame re-projects it
//! with a different north pole.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{CoreError, Result};
use crate::field::{area_weighted_mean, DeformationField, FeatureMap, LabelMap, VelocityField};
use crate::grid::{chord_to_arc, mat_mul, mat_vec, polar_to_cartesian, rot_y, rot_z, transpose, SphereGrid};
use crate::prior::{geodesic_velocity, WeightedGraphLaplacian};
use crate::sampler::{sample_periodic, warp_labels, Interp, Warp};

/// Default harmonic degree cap for templates and velocities.
pub const DEFAULT_MAX_DEGREE: usize = 8;
/// Steps of the reference Euler integrator.
pub const EULER_STEPS: usize = 1024;
/// Lower bound on `sin φ` when converting tangent vectors to `u_θ`.
pub const POLE_CAP: f64 = 0.05;
/// Spectral decay of synthetic velocity components.
pub const VELOCITY_DECAY: f64 = 1.0;
const DIRECTIONS_PER_DEGREE: usize = 3;

fn random_unit(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-8 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Legendre polynomial `P_l(x)` by the three-term recurrence.
pub fn legendre(l: usize, x: f64) -> f64 {
    let (mut p0, mut p1) = (1.0, x);
    if l == 0 {
        return p0;
    }
    for n in 1..l {
        let p2 = ((2 * n + 1) as f64 * x * p1 - n as f64 * p0) / (n + 1) as f64;
        p0 = p1;
        p1 = p2;
    }
    p1
}

/// Orientation of a grid relative to the synthetic world: `world = R · local`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    rotation: [[f64; 3]; 3],
}

impl Frame {
    pub fn identity() -> Self {
        Self { rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] }
    }

    /// Frame whose grid north pole sits at world direction `(θ, φ)`.
    pub fn pole_at(theta: f64, phi: f64) -> Self {
        Self { rotation: mat_mul(&rot_z(theta), &rot_y(phi)) }
    }

    pub fn rotation(&self) -> &[[f64; 3]; 3] {
        &self.rotation
    }

    pub fn to_world(&self, p: &[f64; 3]) -> [f64; 3] {
        mat_vec(&self.rotation, p)
    }

    pub fn to_local(&self, p: &[f64; 3]) -> [f64; 3] {
        mat_vec(&transpose(&self.rotation), p)
    }
}

/// The nine north-pole placements `θ ∈ {0, π/2, π}`, `φ ∈ {π/6, π/3, π/2}`.
pub fn pole_placements() -> Vec<Frame> {
    use std::f64::consts::PI;
    let mut out = Vec::with_capacity(9);
    for t in [0.0, PI / 2.0, PI] {
        for p in [PI / 6.0, PI / 3.0, PI / 2.0] {
            out.push(Frame::pole_at(t, p));
        }
    }
    out
}

/// Band-limited scalar field `Σ a_k P_{l_k}(u_k · x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZonalField {
    terms: Vec<(usize, [f64; 3], f64)>,
}

impl ZonalField {
    /// Random field with degrees `1..=max_degree`, equal expected power per degree.
    pub fn random(max_degree: usize, rng: &mut impl Rng) -> Self {
        Self::random_with_decay(max_degree, 0.0, rng)
    }

    /// Random field whose expected power at degree `l` falls off as `l^(−2·decay)`.
    pub fn random_with_decay(max_degree: usize, decay: f64, rng: &mut impl Rng) -> Self {
        let mut terms = Vec::with_capacity(max_degree * DIRECTIONS_PER_DEGREE);
        for l in 1..=max_degree {
            let norm = ((2 * l + 1) as f64 / DIRECTIONS_PER_DEGREE as f64).sqrt() * (l as f64).powf(-decay);
            for _ in 0..DIRECTIONS_PER_DEGREE {
                let axis = random_unit(rng);
                let a: f64 = StandardNormal.sample(rng);
                terms.push((l, axis, a * norm));
            }
        }
        Self { terms }
    }

    pub fn eval(&self, x: &[f64; 3]) -> f64 {
        self.terms.iter().map(|(l, u, a)| a * legendre(*l, dot(u, x))).sum()
    }

    /// Values at every cell of `grid` seen through `frame`.
    pub fn render(&self, grid: &SphereGrid, frame: &Frame) -> Vec<f64> {
        let mut out = Vec::with_capacity(grid.len());
        for i in 0..grid.rows() {
            for j in 0..grid.cols() {
                out.push(self.eval(&frame.to_world(&grid.point(i, j))));
            }
        }
        out
    }
}

/// Rescales `values` to zero mean and unit variance under area weights.
pub fn normalize_area(grid: &SphereGrid, values: &mut [f64]) {
    let mean = area_weighted_mean(grid, values);
    values.iter_mut().for_each(|v| *v -= mean);
    let sq: Vec<f64> = values.iter().map(|v| v * v).collect();
    let sd = area_weighted_mean(grid, &sq).sqrt();
    if sd > 0.0 {
        values.iter_mut().for_each(|v| *v /= sd);
    }
}

/// Smooth weight concentrating energy where `|φ − π/2| > π/3`.
fn polar_envelope(x: &[f64; 3]) -> f64 {
    let t = (x[2].abs() - (std::f64::consts::PI / 3.0).sin()) / 0.04;
    1.0 / (1.0 + (-t).exp())
}

/// Analytic template: pseudo-convexity pattern and Voronoi parcels.
#[derive(Debug, Clone)]
pub struct TemplateModel {
    field: ZonalField,
    centroids: Vec<[f64; 3]>,
    polar_emphasis: bool,
}

impl TemplateModel {
    pub fn random(n_regions: usize, max_degree: usize, polar_emphasis: bool, seed: u64) -> Result<Self> {
        if n_regions < 2 {
            return Err(CoreError::InvalidArgument(format!("need at least 2 regions, got {n_regions}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let field = ZonalField::random(max_degree, &mut rng);
        // well-separated centroids keep every parcel non-empty on coarse grids
        let min_sep = 0.5 * (4.0 / n_regions as f64).sqrt();
        let mut centroids: Vec<[f64; 3]> = Vec::with_capacity(n_regions);
        let mut attempts = 0;
        while centroids.len() < n_regions {
            let c = random_unit(&mut rng);
            attempts += 1;
            if attempts > 100_000 || centroids.iter().all(|d| chord_to_arc(d, &c) > min_sep) {
                centroids.push(c);
            }
        }
        Ok(Self { field, centroids, polar_emphasis })
    }

    pub fn n_regions(&self) -> usize {
        self.centroids.len()
    }

    /// Unnormalized feature value at a world point.
    pub fn value(&self, x: &[f64; 3]) -> f64 {
        let f = self.field.eval(x);
        if self.polar_emphasis {
            f * polar_envelope(x)
        } else {
            f
        }
    }

    /// Parcel label (1-based) at a world point.
    pub fn label(&self, x: &[f64; 3]) -> u32 {
        let mut best = 0;
        let mut best_dot = f64::NEG_INFINITY;
        for (k, c) in self.centroids.iter().enumerate() {
            let d = dot(c, x);
            if d > best_dot {
                best_dot = d;
                best = k;
            }
        }
        best as u32 + 1
    }

    /// Normalized features and labels on `grid` through `frame`.
    pub fn render(&self, grid: &Arc<SphereGrid>, frame: &Frame) -> Result<(FeatureMap, LabelMap)> {
        let mut values = Vec::with_capacity(grid.len());
        let mut labels = Vec::with_capacity(grid.len());
        for i in 0..grid.rows() {
            for j in 0..grid.cols() {
                let x = frame.to_world(&grid.point(i, j));
                values.push(self.value(&x));
                labels.push(self.label(&x));
            }
        }
        normalize_area(grid, &mut values);
        let labels = LabelMap::new(grid.clone(), labels)?;
        let present = labels.regions().len();
        if present != self.n_regions() {
            return Err(CoreError::InvalidArgument(format!(
                "only {present} of {} parcels are visible on a {}x{} grid",
                self.n_regions(),
                grid.rows(),
                grid.cols()
            )));
        }
        Ok((FeatureMap::new(grid.clone(), 1, values)?, labels))
    }
}

/// Smooth template features and parcel labels.
pub fn make_template(grid: &Arc<SphereGrid>, n_regions: usize, seed: u64) -> Result<(FeatureMap, LabelMap)> {
    TemplateModel::random(n_regions, DEFAULT_MAX_DEGREE, false, seed)?.render(grid, &Frame::identity())
}

/// Random smooth single- or multi-channel map, for operator tests.
pub fn smooth_test_map(grid: &Arc<SphereGrid>, max_degree: usize, seed: u64) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = ZonalField::random(max_degree, &mut rng).render(grid, &Frame::identity());
    FeatureMap::new(grid.clone(), 1, values).expect("rendered field matches the grid")
}

/// Analytic tangent vector field `V(x) = s(x) (W(x) − (W(x)·x) x)` with `W`
/// three band-limited scalar fields and `s(x) = sqrt(1 − x_z²)` the sine of
/// the world colatitude, so the flow slows to rest at the world poles.
#[derive(Debug, Clone)]
pub struct VelocityModel {
    components: [ZonalField; 3],
    scale: f64,
}

impl VelocityModel {
    pub fn random(max_degree: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let components = [
            ZonalField::random_with_decay(max_degree, VELOCITY_DECAY, &mut rng),
            ZonalField::random_with_decay(max_degree, VELOCITY_DECAY, &mut rng),
            ZonalField::random_with_decay(max_degree, VELOCITY_DECAY, &mut rng),
        ];
        Self { components, scale: 1.0 }
    }

    /// Rescales so the largest physical speed rendered on `grid` equals `amplitude`.
    pub fn with_amplitude(mut self, grid: &Arc<SphereGrid>, amplitude: f64) -> Result<Self> {
        if !(amplitude >= 0.0) || !amplitude.is_finite() {
            return Err(CoreError::InvalidArgument(format!("amplitude must be non-negative, got {amplitude}")));
        }
        self.scale = 1.0;
        let peak = self.render(grid, &Frame::identity())?.max_magnitude();
        self.scale = if peak > 0.0 { amplitude / peak } else { 0.0 };
        Ok(self)
    }

    /// World-frame tangent vector at a world point.
    pub fn tangent(&self, x: &[f64; 3]) -> [f64; 3] {
        let w = [self.components[0].eval(x), self.components[1].eval(x), self.components[2].eval(x)];
        let r = dot(&w, x);
        let s = self.scale * (1.0 - x[2] * x[2]).max(0.0).sqrt();
        [s * (w[0] - r * x[0]), s * (w[1] - r * x[1]), s * (w[2] - r * x[2])]
    }

    /// Polar velocity on `grid` through `frame`.
    pub fn render(&self, grid: &Arc<SphereGrid>, frame: &Frame) -> Result<VelocityField> {
        let mut ut = Vec::with_capacity(grid.len());
        let mut up = Vec::with_capacity(grid.len());
        for i in 0..grid.rows() {
            let phi = grid.latitudes()[i];
            let (sp, cp) = phi.sin_cos();
            for j in 0..grid.cols() {
                let (st, ct) = grid.longitudes()[j].sin_cos();
                let p = grid.point(i, j);
                let v = frame.to_local(&self.tangent(&frame.to_world(&p)));
                let e_theta = [-st, ct, 0.0];
                let e_phi = [cp * ct, cp * st, -sp];
                ut.push(dot(&e_theta, &v) / sp.max(POLE_CAP));
                up.push(dot(&e_phi, &v));
            }
        }
        VelocityField::new(grid.clone(), ut, up)
    }
}

/// Band-limited random velocity with peak physical speed `amplitude`.
pub fn gen_smooth_velocity(grid: &Arc<SphereGrid>, amplitude: f64, smoothness: usize, seed: u64) -> Result<VelocityField> {
    VelocityModel::random(smoothness, seed).with_amplitude(grid, amplitude)?.render(grid, &Frame::identity())
}

/// Forward-Euler flow of the stationary field over unit time. Velocity is
/// read by periodic bilinear interpolation at the current position.
pub fn euler_integrate(v: &VelocityField, nsteps: usize) -> Result<DeformationField> {
    if nsteps == 0 {
        return Err(CoreError::InvalidArgument("Euler integration needs at least one step".into()));
    }
    let g = v.grid();
    let h = 1.0 / nsteps as f64;
    let mut d = DeformationField::zeros(v.grid_arc().clone());
    let mut vt = vec![0.0; g.len()];
    let mut vp = vec![0.0; g.len()];
    for _ in 0..nsteps {
        let warp = Warp::new(&d);
        warp.apply(&v.theta, &mut vt);
        warp.apply(&v.phi, &mut vp);
        for k in 0..g.len() {
            d.theta[k] += h * vt[k];
            d.phi[k] += h * vp[k];
        }
    }
    if !d.is_finite() {
        return Err(CoreError::NonFinite("Euler integration diverged".into()));
    }
    Ok(d)
}

fn target_points(d: &DeformationField) -> Vec<[f64; 3]> {
    let g = d.grid();
    let mut out = Vec::with_capacity(g.len());
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let (t, p) = d.target(i, j);
            out.push(polar_to_cartesian(t, p));
        }
    }
    out
}

fn target_distances(a: &DeformationField, b: &DeformationField) -> Result<Vec<f64>> {
    if !a.grid().same_shape(b.grid()) {
        return Err(CoreError::GridMismatch("endpoint comparison".into()));
    }
    Ok(target_points(a).iter().zip(target_points(b).iter()).map(|(p, q)| chord_to_arc(p, q)).collect())
}

/// Area-weighted mean great-circle distance between the target points of two warps.
pub fn endpoint_error(recovered: &DeformationField, truth: &DeformationField) -> Result<f64> {
    Ok(area_weighted_mean(recovered.grid(), &target_distances(recovered, truth)?))
}

/// Largest great-circle distance between the target points of two warps.
///
/// # Panics
/// If the fields live on different grids.
pub fn max_endpoint_distance(a: &DeformationField, b: &DeformationField) -> f64 {
    target_distances(a, b).expect("fields share a grid").into_iter().fold(0.0, f64::max)
}

/// Monte-Carlo estimate of `E_q[log q(v') − log p(v')]` and its standard error.
///
/// `q` is the diagonal Gaussian `N(μ', Σ)` over the three Cartesian
/// components and `p ∝ exp(−½ λ Σ_c v'_cᵀ L v'_c)`. The `log 2π` terms and the
/// normalizer of `p` are dropped, as in the closed form, and the `−½ dim`
/// expectation of `−½ εᵀε` is folded into the sample so both sides agree.
pub fn mc_kl(
    mu: &DeformationField,
    sigma_diag: &[f64],
    laplacian: &WeightedGraphLaplacian,
    lambda: f64,
    nsamples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let n = mu.grid().len();
    if sigma_diag.len() != 3 * n {
        return Err(CoreError::Shape(format!("expected {} variances, got {}", 3 * n, sigma_diag.len())));
    }
    if nsamples < 2 {
        return Err(CoreError::InvalidArgument("Monte-Carlo KL needs at least two samples".into()));
    }
    let mean = geodesic_velocity(mu);
    let comps = mean.components();
    let sd: Vec<f64> = sigma_diag.iter().map(|s| s.sqrt()).collect();
    let half_logdet: f64 = 0.5 * sigma_diag.iter().map(|s| s.ln()).sum::<f64>();
    let dim = 3 * n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = vec![0.0; n];
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..nsamples {
        let mut eps2 = 0.0;
        let mut quad = 0.0;
        for c in 0..3 {
            for k in 0..n {
                let e: f64 = StandardNormal.sample(&mut rng);
                eps2 += e * e;
                v[k] = comps[c][k] + sd[c * n + k] * e;
            }
            quad += laplacian.quadratic_form(&v);
        }
        let f = -half_logdet - 0.5 * (eps2 - dim as f64) + 0.5 * lambda * quad;
        s1 += f;
        s2 += f * f;
    }
    let m = s1 / nsamples as f64;
    let var = (s2 / nsamples as f64 - m * m).max(0.0) * nsamples as f64 / (nsamples - 1) as f64;
    Ok((m, (var / nsamples as f64).sqrt()))
}

/// Parameters of a synthetic cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortSpec {
    pub rows: usize,
    pub cols: usize,
    pub subjects: usize,
    /// Peak physical speed of each subject's velocity, radians.
    pub amplitude: f64,
    pub velocity_degree: usize,
    pub template_degree: usize,
    pub regions: usize,
    /// Standard deviation of the white per-cell subject noise.
    pub noise: f64,
    pub polar_emphasis: bool,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            rows: 64,
            cols: 128,
            subjects: 20,
            amplitude: 0.15,
            velocity_degree: DEFAULT_MAX_DEGREE,
            template_degree: DEFAULT_MAX_DEGREE,
            regions: 12,
            noise: 0.02,
            polar_emphasis: false,
            seed: 0,
        }
    }
}

/// One synthetic subject and its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticSubject {
    pub features: FeatureMap,
    pub labels: LabelMap,
    /// Template→subject warp: `features(p) = (template + noise)(p + true_phi(p))`.
    pub true_phi: DeformationField,
    /// Warp that maps the subject back onto the template, `exp(−v)`.
    pub true_inverse: DeformationField,
    pub velocity: VelocityField,
    pub seed: u64,
}

/// Template, atlas statistics and subjects rendered through one frame.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub template: FeatureMap,
    pub template_labels: LabelMap,
    /// Per-cell variance of the subject noise, floored.
    pub atlas_variance: FeatureMap,
    pub subjects: Vec<SyntheticSubject>,
}

fn subject_seed(base: u64, k: usize) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k as u64 + 1)
}

/// Renders the cohort described by `spec` through `frame`. The analytic world
/// depends only on `spec.seed`, so different frames see the same sphere.
pub fn make_cohort(spec: &CohortSpec, frame: &Frame) -> Result<Cohort> {
    if spec.subjects == 0 {
        return Err(CoreError::InvalidArgument("cohort needs at least one subject".into()));
    }
    let grid = Arc::new(SphereGrid::new(spec.rows, spec.cols)?);
    let model = TemplateModel::random(spec.regions, spec.template_degree, spec.polar_emphasis, spec.seed)?;
    let (template, template_labels) = model.render(&grid, frame)?;
    let reference = Arc::new(SphereGrid::new(spec.rows, spec.cols)?);
    let mut subjects = Vec::with_capacity(spec.subjects);
    let mut noises = Vec::with_capacity(spec.subjects);
    for k in 0..spec.subjects {
        let seed = subject_seed(spec.seed, k);
        let velocity = VelocityModel::random(spec.velocity_degree, seed)
            .with_amplitude(&reference, spec.amplitude)?
            .render(&grid, frame)?;
        let true_phi = euler_integrate(&velocity, EULER_STEPS)?;
        let true_inverse = euler_integrate(&velocity.scaled(-1.0), EULER_STEPS)?;
        let mut source = template.clone();
        if spec.noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_65);
            let normal = Normal::new(0.0, spec.noise).map_err(|e| CoreError::InvalidArgument(e.to_string()))?;
            let noise: Vec<f64> = (0..grid.len()).map(|_| normal.sample(&mut rng)).collect();
            source.data_mut().iter_mut().zip(&noise).for_each(|(s, n)| *s += n);
            noises.push(noise);
        }
        let features = sample_periodic(&source, &true_phi, Interp::Bilinear)?;
        let labels = warp_labels(&template_labels, &true_phi)?;
        subjects.push(SyntheticSubject { features, labels, true_phi, true_inverse, velocity, seed });
    }
    let atlas_variance = noise_variance(&grid, &noises, spec.noise)?;
    Ok(Cohort { template, template_labels, atlas_variance, subjects })
}

fn noise_variance(grid: &Arc<SphereGrid>, noises: &[Vec<f64>], noise: f64) -> Result<FeatureMap> {
    if noises.len() < 2 {
        return Ok(FeatureMap::constant(grid.clone(), 1, if noise > 0.0 { noise * noise } else { 1.0 }));
    }
    let floor = 0.25 * noise * noise;
    let count = noises.len() as f64;
    let mut var = vec![0.0; grid.len()];
    for (k, v) in var.iter_mut().enumerate() {
        let mean = noises.iter().map(|n| n[k]).sum::<f64>() / count;
        *v = (noises.iter().map(|n| (n[k] - mean).powi(2)).sum::<f64>() / count).max(floor);
    }
    FeatureMap::new(grid.clone(), 1, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrate::{scaling_and_squaring, DEFAULT_STEPS};
    use crate::prior::{build_weighted_laplacian, prior_kl_term};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use std::f64::consts::PI;

    fn grid(m: usize, n: usize) -> Arc<SphereGrid> {
        Arc::new(SphereGrid::new(m, n).unwrap())
    }

    #[test]
    fn legendre_closed_forms() {
        for x in [-1.0, -0.3, 0.0, 0.42, 1.0] {
            assert_eq!(legendre(0, x), 1.0);
            assert_eq!(legendre(1, x), x);
            assert!((legendre(2, x) - 0.5 * (3.0 * x * x - 1.0)).abs() < 1e-14);
            assert!((legendre(3, x) - 0.5 * (5.0 * x * x * x - 3.0 * x)).abs() < 1e-14);
        }
        assert!((legendre(8, 1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn template_is_deterministic_and_normalized() {
        let g = grid(64, 128);
        let (f1, l1) = make_template(&g, 10, 7).unwrap();
        let (f2, l2) = make_template(&g, 10, 7).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(l1, l2);
        assert!(area_weighted_mean(&g, f1.data()).abs() < 1e-6);
        let sq: Vec<f64> = f1.data().iter().map(|v| v * v).collect();
        assert!((area_weighted_mean(&g, &sq) - 1.0).abs() < 1e-3);
        assert_eq!(l1.regions(), (1..=10).collect::<Vec<u32>>());
    }

    #[test]
    fn template_rejects_single_region() {
        assert!(make_template(&grid(8, 16), 1, 0).is_err());
    }

    #[test]
    fn zero_amplitude_gives_zero_velocity() {
        let v = gen_smooth_velocity(&grid(8, 16), 0.0, 4, 3).unwrap();
        assert!(v.theta.iter().chain(&v.phi).all(|x| *x == 0.0));
        assert!(gen_smooth_velocity(&grid(8, 16), -1.0, 4, 3).is_err());
    }

    #[test]
    fn velocity_amplitude_and_determinism() {
        let g = grid(32, 64);
        let a = gen_smooth_velocity(&g, 0.15, 6, 11).unwrap();
        let b = gen_smooth_velocity(&g, 0.15, 6, 11).unwrap();
        assert_eq!(a, b);
        assert!((a.max_magnitude() - 0.15).abs() < 1e-12);
    }

    #[test]
    fn squared_exponential_stays_within_bound() {
        let g = grid(64, 128);
        for (amp, seed) in [(0.1, 1), (0.2, 2)] {
            let v = gen_smooth_velocity(&g, amp, DEFAULT_MAX_DEGREE, seed).unwrap();
            let d = scaling_and_squaring(&v, DEFAULT_STEPS).unwrap();
            let peak = d.geodesic_magnitudes().into_iter().fold(0.0, f64::max);
            assert!(peak <= 1.5 * amp, "peak displacement {peak} for amplitude {amp}");
        }
    }

    #[test]
    fn euler_null_and_translation() {
        let g = grid(8, 16);
        let d = euler_integrate(&VelocityField::zeros(g.clone()), 16).unwrap();
        assert!(d.theta.iter().chain(&d.phi).all(|x| *x == 0.0));
        for n in [1, 7, 64] {
            let d = euler_integrate(&VelocityField::uniform(g.clone(), 0.25, 0.0), n).unwrap();
            assert!(d.theta.iter().all(|x| (x - 0.25).abs() < 1e-14));
            assert!(d.phi.iter().all(|x| *x == 0.0));
        }
        assert!(euler_integrate(&VelocityField::zeros(g), 0).is_err());
    }

    #[test]
    fn endpoint_error_of_truth_is_zero() {
        let g = grid(16, 32);
        let v = gen_smooth_velocity(&g, 0.1, 4, 5).unwrap();
        let d = euler_integrate(&v, 64).unwrap();
        assert_eq!(endpoint_error(&d, &d).unwrap(), 0.0);
        let shifted = DeformationField::uniform(g.clone(), 0.0, 0.0);
        assert!(endpoint_error(&shifted, &d).unwrap() > 0.0);
        let uniform = DeformationField::uniform(g.clone(), 0.01, 0.0);
        let expected: Vec<f64> = (0..g.len()).map(|k| {
            let s = g.sin_lat()[k / g.cols()];
            2.0 * (s * (0.005f64).sin()).asin()
        }).collect();
        let err = endpoint_error(&uniform, &DeformationField::zeros(g.clone())).unwrap();
        assert!((err - area_weighted_mean(&g, &expected)).abs() < 1e-12);
    }

    #[test]
    fn pole_frames_put_north_where_asked() {
        let frames = pole_placements();
        assert_eq!(frames.len(), 9);
        let f = Frame::pole_at(PI / 2.0, PI / 3.0);
        let n = f.to_world(&[0.0, 0.0, 1.0]);
        let want = polar_to_cartesian(PI / 2.0, PI / 3.0);
        for c in 0..3 {
            assert!((n[c] - want[c]).abs() < 1e-12);
        }
        let p = [0.3, -0.4, 0.866];
        let back = f.to_local(&f.to_world(&p));
        for c in 0..3 {
            assert!((back[c] - p[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn rendered_velocity_is_tangent_and_frame_consistent() {
        let g = grid(16, 32);
        let model = VelocityModel::random(3, 9);
        let frame = Frame::pole_at(0.4, 1.1);
        let v = model.render(&g, &frame).unwrap();
        for i in 0..g.rows() {
            let s = g.sin_lat()[i];
            if s < POLE_CAP {
                continue;
            }
            for j in 0..g.cols() {
                let k = g.index(i, j);
                let (st, ct) = g.longitudes()[j].sin_cos();
                let (sp, cp) = g.latitudes()[i].sin_cos();
                let local = [
                    -st * s * v.theta[k] + cp * ct * v.phi[k],
                    ct * s * v.theta[k] + cp * st * v.phi[k],
                    -sp * v.phi[k],
                ];
                let world = model.tangent(&frame.to_world(&g.point(i, j)));
                let back = frame.to_world(&local);
                for c in 0..3 {
                    assert!((back[c] - world[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cohort_subjects_match_their_definition() {
        let spec = CohortSpec { rows: 16, cols: 32, subjects: 3, regions: 6, ..CohortSpec::default() };
        let cohort = make_cohort(&spec, &Frame::identity()).unwrap();
        assert_eq!(cohort.subjects.len(), 3);
        for s in &cohort.subjects {
            let labels = warp_labels(&cohort.template_labels, &s.true_phi).unwrap();
            assert_eq!(labels, s.labels);
            assert!(s.true_phi.max_magnitude() > 0.0);
        }
        assert!(cohort.atlas_variance.data().iter().all(|v| *v >= 0.25 * spec.noise * spec.noise));
        let clean = CohortSpec { noise: 0.0, ..spec };
        let cohort = make_cohort(&clean, &Frame::identity()).unwrap();
        for s in &cohort.subjects {
            let f = sample_periodic(&cohort.template, &s.true_phi, Interp::Bilinear).unwrap();
            assert_eq!(f, s.features);
        }
    }

    #[test]
    fn mc_kl_matches_closed_form_at_zero_mean() {
        let g = grid(4, 8);
        let l = build_weighted_laplacian(g.clone());
        let mu = DeformationField::zeros(g.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sigma: Vec<f64> = (0..96).map(|_| rng.gen_range(0.01..0.05)).collect();
        let exact = prior_kl_term(&mu, &sigma, &l, 2.0).unwrap();
        let (est, se) = mc_kl(&mu, &sigma, &l, 2.0, 10_000, 3).unwrap();
        assert!((est - exact).abs() < 3.0 * se, "estimate {est} ± {se}, closed form {exact}");
    }

    #[test]
    fn mc_kl_standard_error_shrinks_with_samples() {
        let g = grid(4, 8);
        let l = build_weighted_laplacian(g.clone());
        let mu = DeformationField::uniform(g.clone(), 0.05, 0.02);
        let sigma = vec![0.02; 96];
        let (_, se_small) = mc_kl(&mu, &sigma, &l, 1.0, 10_000, 4).unwrap();
        let (_, se_large) = mc_kl(&mu, &sigma, &l, 1.0, 1_000_000, 5).unwrap();
        let ratio = se_small / se_large;
        assert!(ratio > 10.0 / 1.5 && ratio < 10.0 * 1.5, "standard-error ratio {ratio}");
    }

    #[test]
    fn mc_kl_lambda_scaling() {
        let g = grid(4, 8);
        let l = build_weighted_laplacian(g.clone());
        let v = gen_smooth_velocity(&g, 0.1, 2, 8).unwrap();
        let mu = v.as_displacement();
        let sigma = vec![0.01; 96];
        // λ-free part: −½ Σ log σ²
        let base = -0.5 * sigma.iter().map(|s: &f64| s.ln()).sum::<f64>();
        let (e1, s1) = mc_kl(&mu, &sigma, &l, 1.0, 100_000, 6).unwrap();
        let (e2, s2) = mc_kl(&mu, &sigma, &l, 2.0, 100_000, 6).unwrap();
        let lhs = e2 - base;
        let rhs = 2.0 * (e1 - base);
        assert!((lhs - rhs).abs() < 3.0 * (s2 * s2 + 4.0 * s1 * s1).sqrt());
    }

    #[test]
    fn mc_kl_rejects_bad_shapes() {
        let g = grid(4, 8);
        let l = build_weighted_laplacian(g.clone());
        let mu = DeformationField::zeros(g);
        assert!(mc_kl(&mu, &[1.0; 10], &l, 1.0, 100, 0).is_err());
        assert!(mc_kl(&mu, &[1.0; 96], &l, 1.0, 1, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn normalization_holds_for_any_seed(seed in 0u64..1000) {
            let g = grid(16, 32);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = ZonalField::random(5, &mut rng).render(&g, &Frame::identity());
            normalize_area(&g, &mut v);
            prop_assert!(area_weighted_mean(&g, &v).abs() < 1e-10);
            let sq: Vec<f64> = v.iter().map(|x| x * x).collect();
            prop_assert!((area_weighted_mean(&g, &sq) - 1.0).abs() < 1e-10);
        }

        #[test]
        fn zonal_fields_are_rotation_covariant(seed in 0u64..1000, t in 0.0..6.28f64, p in 0.0..3.14f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = ZonalField::random(4, &mut rng);
            let frame = Frame::pole_at(t, p);
            let x = random_unit(&mut rng);
            let rotated = ZonalField {
                terms: f.terms.iter().map(|(l, u, a)| (*l, frame.to_local(u), *a)).collect(),
            };
            prop_assert!((f.eval(&frame.to_world(&x)) - rotated.eval(&x)).abs() < 1e-9);
        }
    }
}
