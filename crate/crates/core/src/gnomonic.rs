//! Latitude-adaptive 3×3 convolution through inverse gnomonic projection.
//!
//! A regular 3×3 stencil with spacing of one equatorial pixel (`2π/N` of arc)
//! is laid on the tangent plane at each cell and projected back onto the
//! sphere. Because the projection only depends on the row, the sampling
//! positions are tabulated once per row and translated along longitude.

use std::f64::consts::FRAC_PI_2;

use crate::error::{CoreError, Result};
use crate::field::FeatureMap;
use crate::grid::SphereGrid;
use crate::sampler::Tap;

/// Taps per kernel.
pub const KERNEL_TAPS: usize = 9;

/// Inverse gnomonic projection of a tangent-plane point `(east, north)`
/// around the tangent point at colatitude `phi_c`, longitude 0.
/// Returns `(θ offset, φ)`.
pub fn inverse_gnomonic(east: f64, north: f64, phi_c: f64) -> (f64, f64) {
    let rho = (east * east + north * north).sqrt();
    if rho == 0.0 {
        return (0.0, phi_c);
    }
    let lat_c = FRAC_PI_2 - phi_c;
    let c = rho.atan();
    let (sc, cc) = c.sin_cos();
    let (sl, cl) = lat_c.sin_cos();
    let lat = (cc * sl + north * sc * cl / rho).clamp(-1.0, 1.0).asin();
    let lon = (east * sc).atan2(rho * cl * cc - north * sl * sc);
    (lon, FRAC_PI_2 - lat)
}

/// Per-row sampling positions of the 3×3 tangent-plane stencil.
#[derive(Debug, Clone)]
pub struct GnomonicKernelOffsets {
    rows: usize,
    cols: usize,
    /// `(θ offset, target φ)` per row and tap, tap index `3·(dy+1) + (dx+1)`
    /// with `dy` pointing toward increasing φ.
    angles: Vec<[(f64, f64); KERNEL_TAPS]>,
    /// The same positions as read taps for column 0.
    taps: Vec<[Tap; KERNEL_TAPS]>,
}

impl GnomonicKernelOffsets {
    pub fn new(grid: &SphereGrid) -> Self {
        let spacing = grid.dtheta();
        let mut angles = Vec::with_capacity(grid.rows());
        let mut taps = Vec::with_capacity(grid.rows());
        for &phi in grid.latitudes() {
            let mut a = [(0.0, 0.0); KERNEL_TAPS];
            let mut t = [Tap::at(grid, 0, 0.0, 0.0); KERNEL_TAPS];
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let k = ((dy + 1) * 3 + (dx + 1)) as usize;
                    let (lon, lat) = inverse_gnomonic(dx as f64 * spacing, -(dy as f64) * spacing, phi);
                    a[k] = (lon, lat);
                    t[k] = Tap::at(grid, 0, lon / grid.dtheta(), grid.row_coord(lat));
                }
            }
            // the center is the cell itself, exactly
            let row = angles.len() as f64;
            a[4] = (0.0, phi);
            t[4] = Tap::at(grid, 0, 0.0, row);
            angles.push(a);
            taps.push(t);
        }
        Self { rows: grid.rows(), cols: grid.cols(), angles, taps }
    }

    /// `(θ offset, target φ)` of tap `k` in row `i`.
    pub fn offset(&self, i: usize, k: usize) -> (f64, f64) {
        self.angles[i][k]
    }

    fn matches(&self, grid: &SphereGrid) -> bool {
        self.rows == grid.rows() && self.cols == grid.cols()
    }

    #[inline]
    fn tap(&self, i: usize, j: usize, k: usize) -> Tap {
        let mut t = self.taps[i][k];
        t.c0 = (t.c0 + j) % self.cols;
        t.c1 = (t.c1 + j) % self.cols;
        t
    }
}

/// Kernel tensor `C_out × C_in × 9` plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub c_out: usize,
    pub c_in: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvWeights {
    pub fn new(c_out: usize, c_in: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != c_out * c_in * KERNEL_TAPS || bias.len() != c_out {
            return Err(CoreError::Shape(format!(
                "kernel {c_out}x{c_in}x9 needs {} weights and {c_out} biases, got {} and {}",
                c_out * c_in * KERNEL_TAPS,
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self { c_out, c_in, weights, bias })
    }

    pub fn zeros(c_out: usize, c_in: usize) -> Self {
        Self { c_out, c_in, weights: vec![0.0; c_out * c_in * KERNEL_TAPS], bias: vec![0.0; c_out] }
    }

    fn fan_in(&self) -> usize {
        self.c_in * KERNEL_TAPS
    }
}

/// Gathered 3×3 neighbourhoods, one row of `C_in · 9` values per cell.
#[derive(Debug, Clone)]
pub struct Patches {
    pub c_in: usize,
    pub cells: usize,
    pub values: Vec<f64>,
}

/// Samples the projected stencil of every cell.
pub fn gather_patches(input: &FeatureMap, offsets: &GnomonicKernelOffsets) -> Result<Patches> {
    let g = input.grid();
    if !offsets.matches(g) {
        return Err(CoreError::GridMismatch("gnomonic offsets built for another grid".into()));
    }
    let c_in = input.channels();
    let width = c_in * KERNEL_TAPS;
    let n = g.cols();
    let mut values = vec![0.0; g.len() * width];
    for i in 0..g.rows() {
        for j in 0..n {
            let cell = g.index(i, j);
            let row = &mut values[cell * width..(cell + 1) * width];
            for k in 0..KERNEL_TAPS {
                let t = offsets.tap(i, j, k);
                for c in 0..c_in {
                    row[c * KERNEL_TAPS + k] = t.eval(input.channel(c), n);
                }
            }
        }
    }
    Ok(Patches { c_in, cells: g.len(), values })
}

/// Adjoint of [`gather_patches`]: scatters patch gradients onto the input.
pub fn scatter_patches(grad: &[f64], c_in: usize, grid: &std::sync::Arc<SphereGrid>, offsets: &GnomonicKernelOffsets) -> FeatureMap {
    let width = c_in * KERNEL_TAPS;
    let n = grid.cols();
    let mut out = FeatureMap::zeros(grid.clone(), c_in);
    for i in 0..grid.rows() {
        for j in 0..n {
            let cell = grid.index(i, j);
            let row = &grad[cell * width..(cell + 1) * width];
            for k in 0..KERNEL_TAPS {
                let t = offsets.tap(i, j, k);
                for c in 0..c_in {
                    let gv = row[c * KERNEL_TAPS + k];
                    if gv != 0.0 {
                        t.scatter(gv, out.channel_mut(c), n);
                    }
                }
            }
        }
    }
    out
}

/// Contracts gathered patches with a kernel: channel-major output.
pub fn conv_patches(patches: &Patches, w: &ConvWeights) -> Vec<f64> {
    let width = w.fan_in();
    let cells = patches.cells;
    let mut out = vec![0.0; w.c_out * cells];
    for cell in 0..cells {
        let p = &patches.values[cell * width..(cell + 1) * width];
        for co in 0..w.c_out {
            let k = &w.weights[co * width..(co + 1) * width];
            let mut acc = w.bias[co];
            for (a, b) in k.iter().zip(p) {
                acc += a * b;
            }
            out[co * cells + cell] = acc;
        }
    }
    out
}

/// Gradients of [`conv_patches`]: `(patch gradient, weight gradient, bias gradient)`.
pub fn conv_patches_vjp(patches: &Patches, w: &ConvWeights, upstream: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let width = w.fan_in();
    let cells = patches.cells;
    let mut gpatch = vec![0.0; cells * width];
    let mut gw = vec![0.0; w.weights.len()];
    let mut gb = vec![0.0; w.c_out];
    for co in 0..w.c_out {
        let up = &upstream[co * cells..(co + 1) * cells];
        gb[co] = up.iter().sum();
        let gk = &mut gw[co * width..(co + 1) * width];
        for (cell, &u) in up.iter().enumerate() {
            if u == 0.0 {
                continue;
            }
            let p = &patches.values[cell * width..(cell + 1) * width];
            for (a, b) in gk.iter_mut().zip(p) {
                *a += u * b;
            }
        }
    }
    for cell in 0..cells {
        let gp = &mut gpatch[cell * width..(cell + 1) * width];
        for co in 0..w.c_out {
            let u = upstream[co * cells + cell];
            if u == 0.0 {
                continue;
            }
            let k = &w.weights[co * width..(co + 1) * width];
            for (a, b) in gp.iter_mut().zip(k) {
                *a += u * b;
            }
        }
    }
    (gpatch, gw, gb)
}

/// Gnomonic 3×3 convolution with bias.
pub fn spherical_conv(input: &FeatureMap, w: &ConvWeights, offsets: &GnomonicKernelOffsets) -> Result<FeatureMap> {
    if input.channels() != w.c_in {
        return Err(CoreError::Shape(format!(
            "kernel expects {} input channels, map has {}",
            w.c_in,
            input.channels()
        )));
    }
    let patches = gather_patches(input, offsets)?;
    FeatureMap::new(input.grid_arc().clone(), w.c_out, conv_patches(&patches, w))
}

/// Gradients of [`spherical_conv`].
#[derive(Debug, Clone)]
pub struct ConvGrad {
    pub input: FeatureMap,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn spherical_conv_vjp(
    input: &FeatureMap,
    w: &ConvWeights,
    offsets: &GnomonicKernelOffsets,
    upstream: &FeatureMap,
) -> Result<ConvGrad> {
    if input.channels() != w.c_in || upstream.channels() != w.c_out {
        return Err(CoreError::Shape("channel counts do not match the kernel".into()));
    }
    let patches = gather_patches(input, offsets)?;
    let (gp, gw, gb) = conv_patches_vjp(&patches, w, upstream.data());
    let gi = scatter_patches(&gp, w.c_in, input.grid_arc(), offsets);
    Ok(ConvGrad { input: gi, weights: gw, bias: gb })
}
