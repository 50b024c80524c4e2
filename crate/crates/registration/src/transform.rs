//! Composition of displacement fields and rotations.

use spherewarp_core::grid::{cartesian_to_polar, mat_vec, wrap_signed};
use spherewarp_core::{polar_to_cartesian, sample_periodic, DeformationField, Interp, Result};

/// Displacement of `p ↦ outer(inner(p))`, reading `outer` bilinearly at the
/// targets of `inner`.
pub fn compose(inner: &DeformationField, outer: &DeformationField) -> Result<DeformationField> {
    let sampled = sample_periodic(&outer.to_feature_map(), inner, Interp::Bilinear)?;
    let mut out = inner.clone();
    out.theta.iter_mut().zip(sampled.channel(0)).for_each(|(a, b)| *a += b);
    out.phi.iter_mut().zip(sampled.channel(1)).for_each(|(a, b)| *a += b);
    Ok(out)
}

/// Displacement of `p ↦ R · (p + d(p))`, evaluated exactly per cell.
pub fn rotate_targets(d: &DeformationField, rotation: &[[f64; 3]; 3]) -> DeformationField {
    let g = d.grid();
    let mut out = d.clone();
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let k = g.index(i, j);
            let (t, p) = d.target(i, j);
            let (t0, p0) = g.coords(i, j);
            let (t2, p2) = cartesian_to_polar(mat_vec(rotation, &polar_to_cartesian(t, p)));
            out.theta[k] = wrap_signed(t2 - t0);
            out.phi[k] = p2 - p0;
        }
    }
    out
}
