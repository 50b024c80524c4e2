//! Longitude-periodic resampling (spatial transformer) and its adjoint.
//!
//! A cell `(i, j)` displaced by `(d_θ, d_φ)` reads the source at fractional
//! pixel position `x = j + d_θ/Δθ` (wrapped modulo `N`) and
//! `y = i + d_φ/Δφ` (clamped to `[0, M-1]`).

use crate::error::{CoreError, Result};
use crate::field::{ensure_same_grid, DeformationField, FeatureMap, LabelMap};
use std::sync::Arc;

use crate::grid::{cartesian_to_polar, mat_vec, polar_to_cartesian, wrap_signed, SphereGrid};

/// Interpolation scheme for [`sample_periodic`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interp {
    #[default]
    Bilinear,
    Nearest,
}

/// Bilinear read position: two rows, two columns and the fractional offsets.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
    pub fx: f64,
    pub fy: f64,
    pub clamped: bool,
}

impl Tap {
    /// Read position for column `j` displaced by `dx` pixels and absolute
    /// fractional row `y`. The integer and fractional parts of `dx` are split
    /// before adding `j`, so column shifts commute exactly with sampling.
    #[inline]
    pub fn at(grid: &SphereGrid, j: usize, dx: f64, y: f64) -> Tap {
        let n = grid.cols();
        let m = grid.rows();
        let whole = dx.floor();
        let mut fx = dx - whole;
        let mut shift = whole.rem_euclid(n as f64) as i64;
        if fx >= 1.0 {
            fx = 0.0;
            shift += 1;
        }
        let c0 = (j as i64 + shift).rem_euclid(n as i64) as usize;
        let c1 = if c0 + 1 == n { 0 } else { c0 + 1 };
        let ymax = (m - 1) as f64;
        let clamped = !(0.0..=ymax).contains(&y);
        if m == 1 {
            return Tap { r0: 0, r1: 0, c0, c1, fx, fy: 0.0, clamped };
        }
        let yc = y.clamp(0.0, ymax);
        let r0 = (yc.floor() as usize).min(m - 2);
        let fy = yc - r0 as f64;
        Tap { r0, r1: r0 + 1, c0, c1, fx, fy, clamped }
    }

    #[inline]
    pub fn eval(&self, src: &[f64], n: usize) -> f64 {
        let a00 = src[self.r0 * n + self.c0];
        let a01 = src[self.r0 * n + self.c1];
        let a10 = src[self.r1 * n + self.c0];
        let a11 = src[self.r1 * n + self.c1];
        (1.0 - self.fy) * ((1.0 - self.fx) * a00 + self.fx * a01)
            + self.fy * ((1.0 - self.fx) * a10 + self.fx * a11)
    }

    /// Scatters `g` into `dst` with the bilinear weights.
    #[inline]
    pub fn scatter(&self, g: f64, dst: &mut [f64], n: usize) {
        let wy0 = 1.0 - self.fy;
        let wx0 = 1.0 - self.fx;
        dst[self.r0 * n + self.c0] += g * wy0 * wx0;
        dst[self.r0 * n + self.c1] += g * wy0 * self.fx;
        dst[self.r1 * n + self.c0] += g * self.fy * wx0;
        dst[self.r1 * n + self.c1] += g * self.fy * self.fx;
    }

    /// Partial derivatives of the interpolated value w.r.t. `x` and `y` (pixels).
    #[inline]
    pub fn slopes(&self, src: &[f64], n: usize) -> (f64, f64) {
        let a00 = src[self.r0 * n + self.c0];
        let a01 = src[self.r0 * n + self.c1];
        let a10 = src[self.r1 * n + self.c0];
        let a11 = src[self.r1 * n + self.c1];
        let dx = (1.0 - self.fy) * (a01 - a00) + self.fy * (a11 - a10);
        let dy = if self.clamped {
            0.0
        } else {
            (1.0 - self.fx) * (a10 - a00) + self.fx * (a11 - a01)
        };
        (dx, dy)
    }

    /// Nearest grid cell index.
    #[inline]
    pub fn nearest(&self, n: usize) -> usize {
        let r = if self.fy < 0.5 { self.r0 } else { self.r1 };
        let c = if self.fx < 0.5 { self.c0 } else { self.c1 };
        r * n + c
    }
}

/// Precomputed read positions for one displacement field.
#[derive(Debug, Clone)]
pub(crate) struct Warp {
    pub taps: Vec<Tap>,
    pub cols: usize,
}

impl Warp {
    pub fn new(field: &DeformationField) -> Warp {
        let g = field.grid();
        let dt = g.dtheta();
        let dp = g.dphi();
        let mut taps = Vec::with_capacity(g.len());
        for i in 0..g.rows() {
            for j in 0..g.cols() {
                let k = g.index(i, j);
                let y = i as f64 + field.phi[k] / dp;
                taps.push(Tap::at(g, j, field.theta[k] / dt, y));
            }
        }
        Warp { taps, cols: g.cols() }
    }

    /// Warp from explicit fractional pixel coordinates.
    pub fn from_pixels(grid: &SphereGrid, xs: &[f64], ys: &[f64]) -> Warp {
        let taps = xs.iter().zip(ys).map(|(&x, &y)| Tap::at(grid, 0, x, y)).collect();
        Warp { taps, cols: grid.cols() }
    }

    pub fn clamped(&self) -> usize {
        self.taps.iter().filter(|t| t.clamped).count()
    }

    pub fn apply(&self, src: &[f64], dst: &mut [f64]) {
        for (d, t) in dst.iter_mut().zip(&self.taps) {
            *d = t.eval(src, self.cols);
        }
    }

    pub fn apply_nearest(&self, src: &[f64], dst: &mut [f64]) {
        for (d, t) in dst.iter_mut().zip(&self.taps) {
            *d = src[t.nearest(self.cols)];
        }
    }

    /// Accumulates the adjoint of [`Warp::apply`] applied to `g` into `dst`.
    pub fn adjoint(&self, g: &[f64], dst: &mut [f64]) {
        for (gv, t) in g.iter().zip(&self.taps) {
            if *gv != 0.0 {
                t.scatter(*gv, dst, self.cols);
            }
        }
    }

    /// Accumulates `g · ∂(warped)/∂x` and `g · ∂(warped)/∂y` in pixel units.
    pub fn coord_adjoint(&self, src: &[f64], g: &[f64], gx: &mut [f64], gy: &mut [f64]) {
        for k in 0..self.taps.len() {
            if g[k] == 0.0 {
                continue;
            }
            let (sx, sy) = self.taps[k].slopes(src, self.cols);
            gx[k] += g[k] * sx;
            gy[k] += g[k] * sy;
        }
    }
}

/// Resamples `map` through the displacement `coords`.
pub fn sample_periodic(map: &FeatureMap, coords: &DeformationField, interp: Interp) -> Result<FeatureMap> {
    Ok(sample_periodic_with_stats(map, coords, interp)?.0)
}

/// Like [`sample_periodic`], also returning how many reads hit the latitude clamp.
pub fn sample_periodic_with_stats(
    map: &FeatureMap,
    coords: &DeformationField,
    interp: Interp,
) -> Result<(FeatureMap, usize)> {
    ensure_same_grid(map.grid(), coords.grid(), "sample_periodic")?;
    let warp = Warp::new(coords);
    let mut out = map.clone();
    for c in 0..map.channels() {
        match interp {
            Interp::Bilinear => warp.apply(map.channel(c), out.channel_mut(c)),
            Interp::Nearest => warp.apply_nearest(map.channel(c), out.channel_mut(c)),
        }
    }
    Ok((out, warp.clamped()))
}

/// Gradients returned by [`sample_periodic_vjp`].
#[derive(Debug, Clone)]
pub struct SamplerGrad {
    pub map: FeatureMap,
    /// Gradient w.r.t. the displacement, in the radians of the field.
    pub coords: DeformationField,
}

/// Vector-Jacobian product of bilinear [`sample_periodic`].
pub fn sample_periodic_vjp(
    map: &FeatureMap,
    coords: &DeformationField,
    upstream: &FeatureMap,
) -> Result<SamplerGrad> {
    ensure_same_grid(map.grid(), coords.grid(), "sample_periodic_vjp")?;
    ensure_same_grid(map.grid(), upstream.grid(), "sample_periodic_vjp upstream")?;
    if upstream.channels() != map.channels() {
        return Err(CoreError::Shape(format!(
            "upstream has {} channels, map has {}",
            upstream.channels(),
            map.channels()
        )));
    }
    let g = map.grid();
    let warp = Warp::new(coords);
    let mut gmap = FeatureMap::zeros(map.grid_arc().clone(), map.channels());
    let mut gx = vec![0.0; g.len()];
    let mut gy = vec![0.0; g.len()];
    for c in 0..map.channels() {
        warp.adjoint(upstream.channel(c), gmap.channel_mut(c));
        warp.coord_adjoint(map.channel(c), upstream.channel(c), &mut gx, &mut gy);
    }
    let sx = 1.0 / g.dtheta();
    let sy = 1.0 / g.dphi();
    gx.iter_mut().for_each(|v| *v *= sx);
    gy.iter_mut().for_each(|v| *v *= sy);
    let gcoords = DeformationField::new(map.grid_arc().clone(), gx, gy)?;
    Ok(SamplerGrad { map: gmap, coords: gcoords })
}

/// Displacement that reads every cell `p` at the rotated point `R p`.
pub fn rotation_displacement(grid: &Arc<SphereGrid>, rotation: &[[f64; 3]; 3]) -> DeformationField {
    let mut dt = Vec::with_capacity(grid.len());
    let mut dp = Vec::with_capacity(grid.len());
    for i in 0..grid.rows() {
        for j in 0..grid.cols() {
            let (t, p) = grid.coords(i, j);
            let (t2, p2) = cartesian_to_polar(mat_vec(rotation, &polar_to_cartesian(t, p)));
            dt.push(wrap_signed(t2 - t));
            dp.push(p2 - p);
        }
    }
    DeformationField::new(grid.clone(), dt, dp).expect("rotation targets are finite")
}

/// Nearest-neighbour resampling of labels through `phi`.
pub fn warp_labels(labels: &LabelMap, phi: &DeformationField) -> Result<LabelMap> {
    ensure_same_grid(labels.grid(), phi.grid(), "warp_labels")?;
    let warp = Warp::new(phi);
    let src = labels.labels();
    let out = warp.taps.iter().map(|t| src[t.nearest(warp.cols)]).collect();
    LabelMap::new(labels.grid_arc().clone(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, DiffOp};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn grid(m: usize, n: usize) -> Arc<SphereGrid> {
        Arc::new(SphereGrid::new(m, n).unwrap())
    }

    fn random_map(g: &Arc<SphereGrid>, c: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..g.len() * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMap::new(g.clone(), c, data).unwrap()
    }

    #[test]
    fn zero_displacement_is_bit_exact() {
        let g = grid(8, 16);
        let m = random_map(&g, 2, 1);
        let out = sample_periodic(&m, &DeformationField::zeros(g.clone()), Interp::Bilinear).unwrap();
        assert_eq!(out, m);
        let out = sample_periodic(&m, &DeformationField::zeros(g), Interp::Nearest).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn one_column_shift_wraps() {
        let g = grid(8, 16);
        let m = random_map(&g, 1, 2);
        let d = DeformationField::uniform(g.clone(), g.dtheta(), 0.0);
        let out = sample_periodic(&m, &d, Interp::Bilinear).unwrap();
        // out(i, j) = m(i, j + 1)  ⇔  out = roll(m, -1)
        let oracle = m.roll_columns(-1);
        for (a, b) in out.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((out.get(0, 3, 15) - m.get(0, 3, 0)).abs() < 1e-12);
    }

    #[test]
    fn huge_longitude_offsets_wrap_without_overflow() {
        let g = grid(8, 16);
        let m = random_map(&g, 1, 4);
        let full_turns = DeformationField::uniform(g.clone(), 3.0 * std::f64::consts::TAU, 0.0);
        let out = sample_periodic(&m, &full_turns, Interp::Bilinear).unwrap();
        for (a, b) in out.data().iter().zip(m.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        for dx in [1e200, -1e200, 9.3e18, f64::MAX] {
            let t = Tap::at(&g, 15, dx, 3.2);
            assert!(t.c0 < 16 && t.c1 < 16);
        }
    }

    #[test]
    fn half_column_splits_a_delta() {
        let g = grid(8, 16);
        let mut m = FeatureMap::zeros(g.clone(), 1);
        m.data_mut()[g.index(3, 5)] = 1.0;
        let d = DeformationField::uniform(g.clone(), std::f64::consts::PI / 16.0, 0.0);
        let out = sample_periodic(&m, &d, Interp::Bilinear).unwrap();
        for i in 0..8 {
            for j in 0..16 {
                let v = out.get(0, i, j);
                if i == 3 && (j == 4 || j == 5) {
                    assert!((v - 0.5).abs() < 1e-12);
                } else {
                    assert!(v.abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn latitude_is_clamped_and_counted() {
        let g = grid(8, 16);
        let m = random_map(&g, 1, 3);
        let d = DeformationField::uniform(g.clone(), 0.0, -1.0);
        let (out, clamped) = sample_periodic_with_stats(&m, &d, Interp::Bilinear).unwrap();
        assert!(clamped > 0);
        for j in 0..16 {
            assert!((out.get(0, 0, j) - m.get(0, 0, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_mismatch_rejected() {
        let m = FeatureMap::zeros(grid(8, 16), 1);
        let d = DeformationField::zeros(grid(4, 8));
        assert!(sample_periodic(&m, &d, Interp::Bilinear).is_err());
    }

    #[test]
    fn vjp_trivial_cases() {
        let g = grid(8, 16);
        let m = random_map(&g, 1, 4);
        let d = DeformationField::zeros(g.clone());
        let up = random_map(&g, 1, 5);
        let gr = sample_periodic_vjp(&m, &d, &up).unwrap();
        assert_eq!(gr.map, up);
        let zero = FeatureMap::zeros(g.clone(), 1);
        let gr = sample_periodic_vjp(&m, &d, &zero).unwrap();
        assert!(gr.map.data().iter().all(|v| *v == 0.0));
        assert!(gr.coords.theta.iter().chain(&gr.coords.phi).all(|v| *v == 0.0));
    }

    /// Displacements whose fractional pixel parts stay inside (0.2, 0.8).
    fn interior_displacement(g: &Arc<SphereGrid>, seed: u64) -> DeformationField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = g.len();
        let mut t = Vec::with_capacity(n);
        let mut p = Vec::with_capacity(n);
        for k in 0..n {
            let i = k / g.cols();
            let sx: f64 = rng.gen_range(-2.0..2.0);
            let fx = rng.gen_range(0.2..0.8);
            t.push((sx.floor() + fx) * g.dtheta());
            let fy: f64 = rng.gen_range(0.2..0.8);
            let base = if i + 1 < g.rows() { 0.0 } else { -1.0 };
            p.push((base + fy) * g.dphi());
        }
        DeformationField::new(g.clone(), t, p).unwrap()
    }

    #[test]
    fn vjp_map_path_is_exact_adjoint() {
        let g = grid(8, 16);
        let d = interior_displacement(&g, 7);
        let m0 = random_map(&g, 2, 8);
        let op = DiffOp::new(|x: &[f64]| {
            let m = FeatureMap::new(g.clone(), 2, x.to_vec()).unwrap();
            sample_periodic(&m, &d, Interp::Bilinear).unwrap().into_data()
        }, |x: &[f64], up: &[f64]| {
            let m = FeatureMap::new(g.clone(), 2, x.to_vec()).unwrap();
            let u = FeatureMap::new(g.clone(), 2, up.to_vec()).unwrap();
            sample_periodic_vjp(&m, &d, &u).unwrap().map.into_data()
        });
        let err = grad_check(&op, m0.data(), 1e-3);
        assert!(err < 1e-9, "linear path error {err}");
    }

    #[test]
    fn vjp_coord_path_matches_finite_differences() {
        let g = grid(8, 16);
        let m = crate::synth::smooth_test_map(&g, 3, 21);
        let d0 = interior_displacement(&g, 9);
        let mut x0 = d0.theta.clone();
        x0.extend_from_slice(&d0.phi);
        let n = g.len();
        let op = DiffOp::new(|x: &[f64]| {
            let d = DeformationField::new(g.clone(), x[..n].to_vec(), x[n..].to_vec()).unwrap();
            sample_periodic(&m, &d, Interp::Bilinear).unwrap().into_data()
        }, |x: &[f64], up: &[f64]| {
            let d = DeformationField::new(g.clone(), x[..n].to_vec(), x[n..].to_vec()).unwrap();
            let u = FeatureMap::new(g.clone(), 1, up.to_vec()).unwrap();
            let gr = sample_periodic_vjp(&m, &d, &u).unwrap();
            let mut out = gr.coords.theta;
            out.extend(gr.coords.phi);
            out
        });
        let err = grad_check(&op, &x0, 1e-4);
        assert!(err < 1e-4, "coordinate path error {err}");
    }

    #[test]
    fn one_column_label_shift() {
        let g = grid(8, 16);
        let labels: Vec<u32> = (0..g.len()).map(|k| (k % 5) as u32).collect();
        let l = LabelMap::new(g.clone(), labels).unwrap();
        assert_eq!(warp_labels(&l, &DeformationField::zeros(g.clone())).unwrap(), l);
        let d = DeformationField::uniform(g.clone(), g.dtheta(), 0.0);
        assert_eq!(warp_labels(&l, &d).unwrap(), l.roll_columns(-1));
    }

    #[test]
    fn z_rotation_by_whole_columns_is_a_column_shift() {
        let g = grid(8, 16);
        let d = rotation_displacement(&g, &crate::grid::rot_z(3.0 * g.dtheta()));
        for (t, p) in d.theta.iter().zip(&d.phi) {
            assert!((t - 3.0 * g.dtheta()).abs() < 1e-12);
            assert!(p.abs() < 1e-12);
        }
        let m = random_map(&g, 1, 8);
        let out = sample_periodic(&m, &d, Interp::Bilinear).unwrap();
        let oracle = m.roll_columns(-3);
        assert!(out.data().iter().zip(oracle.data()).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn rotation_targets_land_on_rotated_points() {
        let g = grid(8, 16);
        let r = crate::grid::mat_mul(&crate::grid::rot_z(0.7), &crate::grid::rot_y(0.3));
        let d = rotation_displacement(&g, &r);
        for i in 0..g.rows() {
            for j in 0..g.cols() {
                let (t, p) = d.target(i, j);
                let got = polar_to_cartesian(t, p);
                let want = mat_vec(&r, &g.point(i, j));
                for c in 0..3 {
                    assert!((got[c] - want[c]).abs() < 1e-12);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn linear_in_map_values(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let g = grid(8, 16);
            let ma = random_map(&g, 1, seed);
            let mb = random_map(&g, 1, seed + 1);
            let d = interior_displacement(&g, seed + 2);
            let combo: Vec<f64> = ma.data().iter().zip(mb.data()).map(|(x, y)| a * x + b * y).collect();
            let mc = FeatureMap::new(g.clone(), 1, combo).unwrap();
            let lhs = sample_periodic(&mc, &d, Interp::Bilinear).unwrap();
            let sa = sample_periodic(&ma, &d, Interp::Bilinear).unwrap();
            let sb = sample_periodic(&mb, &d, Interp::Bilinear).unwrap();
            for k in 0..g.len() {
                let rhs = a * sa.data()[k] + b * sb.data()[k];
                prop_assert!((lhs.data()[k] - rhs).abs() < 1e-10);
            }
        }

        #[test]
        fn longitude_equivariance(seed in 0u64..1000, k in -20isize..20) {
            let g = grid(8, 16);
            let m = random_map(&g, 1, seed);
            let d = interior_displacement(&g, seed + 3);
            let lhs = sample_periodic(&m.roll_columns(k), &d.roll_columns(k), Interp::Bilinear).unwrap();
            let rhs = sample_periodic(&m, &d, Interp::Bilinear).unwrap().roll_columns(k);
            prop_assert_eq!(lhs, rhs);
        }

        #[test]
        fn nearest_labels_subset(seed in 0u64..1000) {
            let g = grid(8, 16);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<u32> = (0..g.len()).map(|_| rng.gen_range(1..4) * 3).collect();
            let l = LabelMap::new(g.clone(), labels).unwrap();
            let d = interior_displacement(&g, seed);
            let w = warp_labels(&l, &d).unwrap();
            let src = l.regions();
            prop_assert!(w.regions().iter().all(|r| src.contains(r)));
        }
    }
}
