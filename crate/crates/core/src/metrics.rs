//! Parcel overlap, boundary distance, areal distortion and group statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::field::{ensure_same_grid, DeformationField, FeatureMap, LabelMap};
use crate::grid::{chord_to_arc, SphereGrid};

/// Sphere radius used for millimetre conversion unless configured otherwise.
pub const DEFAULT_RADIUS_MM: f64 = 100.0;

fn region_area(labels: &LabelMap, region: u32) -> f64 {
    let g = labels.grid();
    let mut area = 0.0;
    for i in 0..g.rows() {
        let w = g.area_weights()[i];
        for j in 0..g.cols() {
            if labels.get(i, j) == region {
                area += w;
            }
        }
    }
    area
}

/// Area-weighted Dice overlap of one region. `None` when the region is absent
/// from both maps.
pub fn dice(a: &LabelMap, b: &LabelMap, region: u32) -> Result<Option<f64>> {
    ensure_same_grid(a.grid(), b.grid(), "dice")?;
    let g = a.grid();
    let mut inter = 0.0;
    for i in 0..g.rows() {
        let w = g.area_weights()[i];
        for j in 0..g.cols() {
            if a.get(i, j) == region && b.get(i, j) == region {
                inter += w;
            }
        }
    }
    let total = region_area(a, region) + region_area(b, region);
    Ok(if total > 0.0 { Some(2.0 * inter / total) } else { None })
}

fn union_regions(a: &LabelMap, b: &LabelMap) -> Vec<u32> {
    let mut r = a.regions();
    r.extend(b.regions());
    r.sort_unstable();
    r.dedup();
    r
}

/// Per-region Dice over every non-background label, and their mean.
pub fn dice_all(a: &LabelMap, b: &LabelMap) -> Result<(BTreeMap<u32, f64>, f64)> {
    let mut per = BTreeMap::new();
    for r in union_regions(a, b) {
        if let Some(d) = dice(a, b, r)? {
            per.insert(r, d);
        }
    }
    if per.is_empty() {
        return Err(CoreError::Undefined("no labelled regions in either map".into()));
    }
    let mean = per.values().sum::<f64>() / per.len() as f64;
    Ok((per, mean))
}

/// Cells of `region` that are 4-adjacent to a different label (periodic in
/// longitude, not across the poles).
pub fn boundary(labels: &LabelMap, region: u32) -> Vec<(usize, usize)> {
    let g = labels.grid();
    let mut out = Vec::new();
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            if labels.get(i, j) != region {
                continue;
            }
            let west = labels.get(i, g.wrap_col(j as isize - 1));
            let east = labels.get(i, g.wrap_col(j as isize + 1));
            let north = if i > 0 { labels.get(i - 1, j) } else { region };
            let south = if i + 1 < g.rows() { labels.get(i + 1, j) } else { region };
            if west != region || east != region || north != region || south != region {
                out.push((i, j));
            }
        }
    }
    out
}

/// Mean over `a`'s boundary of the great-circle distance to the nearest
/// boundary cell of `b`, in both directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdDirections {
    pub a_to_b: f64,
    pub b_to_a: f64,
}

impl MmdDirections {
    pub fn symmetric(&self) -> f64 {
        0.5 * (self.a_to_b + self.b_to_a)
    }
}

fn directed(grid: &SphereGrid, from: &[(usize, usize)], to: &[(usize, usize)]) -> f64 {
    let targets: Vec<[f64; 3]> = to.iter().map(|&(i, j)| grid.point(i, j)).collect();
    let mut total = 0.0;
    for &(i, j) in from {
        let p = grid.point(i, j);
        total += targets.iter().map(|q| chord_to_arc(&p, q)).fold(f64::INFINITY, f64::min);
    }
    total / from.len() as f64
}

/// Both directed mean minimum boundary distances for one region, in radians.
pub fn mmd_directed(a: &LabelMap, b: &LabelMap, region: u32) -> Result<MmdDirections> {
    ensure_same_grid(a.grid(), b.grid(), "mmd")?;
    let ba = boundary(a, region);
    let bb = boundary(b, region);
    if ba.is_empty() || bb.is_empty() {
        return Err(CoreError::Undefined(format!("region {region} has an empty boundary")));
    }
    let g = a.grid();
    Ok(MmdDirections { a_to_b: directed(g, &ba, &bb), b_to_a: directed(g, &bb, &ba) })
}

/// Symmetrized mean minimum boundary distance, in radians.
pub fn mmd(a: &LabelMap, b: &LabelMap, region: u32) -> Result<f64> {
    Ok(mmd_directed(a, b, region)?.symmetric())
}

/// Summary of a Jacobian determinant map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JacobianStats {
    pub min: f64,
    pub max: f64,
    /// Area-weighted mean.
    pub mean: f64,
    /// Share of cells with determinant ≤ 0.
    pub fraction_nonpositive: f64,
}

/// Areal distortion of `Φ` on the sphere, per cell, with summary statistics.
///
/// The coordinate Jacobian of `(θ + d_θ, φ + d_φ)` is taken by central
/// differences (one-sided on the first and last rows) and multiplied by
/// `sin φ_target / sin φ`.
pub fn jacobian_map(phi: &DeformationField) -> (FeatureMap, JacobianStats) {
    let g = phi.grid();
    let (m, n) = (g.rows(), g.cols());
    let (dt, dp) = (g.dtheta(), g.dphi());
    let mut det = vec![0.0; g.len()];
    for i in 0..m {
        let (up, down, span) = if i == 0 {
            (0, 1, dp)
        } else if i + 1 == m {
            (m - 2, m - 1, dp)
        } else {
            (i - 1, i + 1, 2.0 * dp)
        };
        let s = g.sin_lat()[i];
        for j in 0..n {
            let (w, e) = (g.wrap_col(j as isize - 1), g.wrap_col(j as isize + 1));
            let k = g.index(i, j);
            let t_t = 1.0 + (phi.theta[g.index(i, e)] - phi.theta[g.index(i, w)]) / (2.0 * dt);
            let p_t = (phi.phi[g.index(i, e)] - phi.phi[g.index(i, w)]) / (2.0 * dt);
            let t_p = (phi.theta[g.index(down, j)] - phi.theta[g.index(up, j)]) / span;
            let p_p = 1.0 + (phi.phi[g.index(down, j)] - phi.phi[g.index(up, j)]) / span;
            let target = g.latitudes()[i] + phi.phi[k];
            det[k] = (t_t * p_p - t_p * p_t) * target.sin() / s;
        }
    }
    let stats = jacobian_stats(g, &det);
    let map = FeatureMap::new(phi.grid_arc().clone(), 1, det).expect("determinants are finite for finite fields");
    (map, stats)
}

fn jacobian_stats(g: &SphereGrid, det: &[f64]) -> JacobianStats {
    let min = det.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = det.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let nonpos = det.iter().filter(|v| **v <= 0.0).count();
    JacobianStats {
        min,
        max,
        mean: crate::field::area_weighted_mean(g, det),
        fraction_nonpositive: nonpos as f64 / det.len() as f64,
    }
}

/// Elementwise mean and population standard deviation of a group of maps.
pub fn group_stats(maps: &[FeatureMap]) -> Result<(FeatureMap, FeatureMap)> {
    if maps.len() < 2 {
        return Err(CoreError::InvalidArgument(format!("group statistics need at least 2 maps, got {}", maps.len())));
    }
    let first = &maps[0];
    for m in &maps[1..] {
        ensure_same_grid(first.grid(), m.grid(), "group_stats")?;
        if m.channels() != first.channels() {
            return Err(CoreError::Shape("group maps differ in channel count".into()));
        }
    }
    let count = maps.len() as f64;
    let len = first.data().len();
    let mut mean = vec![0.0; len];
    for m in maps {
        mean.iter_mut().zip(m.data()).for_each(|(a, b)| *a += b);
    }
    mean.iter_mut().for_each(|v| *v /= count);
    let mut var = vec![0.0; len];
    for m in maps {
        var.iter_mut().zip(m.data().iter().zip(&mean)).for_each(|(v, (x, mu))| *v += (x - mu).powi(2));
    }
    let std = var.into_iter().map(|v| (v / count).sqrt()).collect();
    Ok((
        FeatureMap::new(first.grid_arc().clone(), first.channels(), mean)?,
        FeatureMap::new(first.grid_arc().clone(), first.channels(), std)?,
    ))
}

/// Evaluation summary for one registered subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice: BTreeMap<u32, f64>,
    pub overall_dice: f64,
    /// Symmetric MMD per region, radians.
    pub mmd: BTreeMap<u32, f64>,
    pub mmd_directed: BTreeMap<u32, MmdDirections>,
    pub overall_mmd: f64,
    pub radius_mm: Option<f64>,
    pub overall_mmd_mm: Option<f64>,
    pub mmd_mm: Option<BTreeMap<u32, f64>>,
    pub jacobian: Option<JacobianStats>,
}

/// Dice and MMD over all regions, plus Jacobian statistics when `phi` is given.
pub fn evaluate(
    a: &LabelMap,
    b: &LabelMap,
    phi: Option<&DeformationField>,
    radius_mm: Option<f64>,
) -> Result<MetricReport> {
    let (dice, overall_dice) = dice_all(a, b)?;
    let mut mmd_sym = BTreeMap::new();
    let mut mmd_dir = BTreeMap::new();
    for r in union_regions(a, b) {
        match mmd_directed(a, b, r) {
            Ok(d) => {
                mmd_sym.insert(r, d.symmetric());
                mmd_dir.insert(r, d);
            }
            Err(CoreError::Undefined(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let overall_mmd = if mmd_sym.is_empty() { 0.0 } else { mmd_sym.values().sum::<f64>() / mmd_sym.len() as f64 };
    if let Some(r) = radius_mm {
        if !(r > 0.0) {
            return Err(CoreError::InvalidArgument(format!("radius must be positive, got {r}")));
        }
    }
    Ok(MetricReport {
        dice,
        overall_dice,
        mmd_mm: radius_mm.map(|r| mmd_sym.iter().map(|(k, v)| (*k, v * r)).collect()),
        overall_mmd_mm: radius_mm.map(|r| overall_mmd * r),
        mmd: mmd_sym,
        mmd_directed: mmd_dir,
        overall_mmd,
        radius_mm,
        jacobian: phi.map(|p| jacobian_map(p).1),
    })
}
