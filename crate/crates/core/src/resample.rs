//! 2× pooling and upsampling between nested grids.
//!
//! Pooling averages row pairs `(2I, 2I+1)` and column pairs `(2J, 2J+1)`, so
//! coarse cell `J` stands for fine column position `2J + ½`. Upsampling uses
//! the matching inverse placement (fine column `j` reads coarse `(j - ½)/2`)
//! with bilinear interpolation, longitude wraparound and latitude clamping.

use std::sync::Arc;

use crate::error::{CoreError, Result};
use crate::field::FeatureMap;
use crate::grid::SphereGrid;
use crate::sampler::Warp;

/// 2×2 mean pooling on raw channel-major data.
pub fn pool2_raw(data: &[f64], channels: usize, rows: usize, cols: usize) -> Result<Vec<f64>> {
    if rows % 2 != 0 || cols % 2 != 0 {
        return Err(CoreError::Shape(format!("cannot pool a {rows}x{cols} map by 2")));
    }
    if data.len() != channels * rows * cols {
        return Err(CoreError::Shape(format!(
            "expected {} values, got {}",
            channels * rows * cols,
            data.len()
        )));
    }
    let (cr, cc) = (rows / 2, cols / 2);
    let mut out = vec![0.0; channels * cr * cc];
    for c in 0..channels {
        let src = &data[c * rows * cols..(c + 1) * rows * cols];
        let dst = &mut out[c * cr * cc..(c + 1) * cr * cc];
        for i in 0..cr {
            for j in 0..cc {
                let a = src[(2 * i) * cols + 2 * j] + src[(2 * i) * cols + 2 * j + 1];
                let b = src[(2 * i + 1) * cols + 2 * j] + src[(2 * i + 1) * cols + 2 * j + 1];
                dst[i * cc + j] = 0.25 * (a + b);
            }
        }
    }
    Ok(out)
}

/// 2×2 mean pooling onto the half-resolution grid.
pub fn pool2(input: &FeatureMap) -> Result<FeatureMap> {
    let coarse = Arc::new(input.grid().coarsen()?);
    pool2_onto(input, &coarse)
}

/// [`pool2`] onto a caller-provided coarse grid (shared across calls).
pub fn pool2_onto(input: &FeatureMap, coarse: &Arc<SphereGrid>) -> Result<FeatureMap> {
    let g = input.grid();
    if coarse.rows() * 2 != g.rows() || coarse.cols() * 2 != g.cols() {
        return Err(CoreError::GridMismatch("pool2 target is not the half-resolution grid".into()));
    }
    let data = pool2_raw(input.data(), input.channels(), g.rows(), g.cols())?;
    FeatureMap::new(coarse.clone(), input.channels(), data)
}

/// Adjoint of [`pool2`]: every fine cell receives a quarter of its parent's gradient.
pub fn pool2_vjp(upstream: &FeatureMap, fine: &Arc<SphereGrid>) -> Result<FeatureMap> {
    let cg = upstream.grid();
    if cg.rows() * 2 != fine.rows() || cg.cols() * 2 != fine.cols() {
        return Err(CoreError::GridMismatch("pool2_vjp target is not the double-resolution grid".into()));
    }
    let mut out = FeatureMap::zeros(fine.clone(), upstream.channels());
    let cols = fine.cols();
    for c in 0..upstream.channels() {
        let g = upstream.channel(c);
        let dst = out.channel_mut(c);
        for i in 0..cg.rows() {
            for j in 0..cg.cols() {
                let v = 0.25 * g[cg.index(i, j)];
                dst[(2 * i) * cols + 2 * j] = v;
                dst[(2 * i) * cols + 2 * j + 1] = v;
                dst[(2 * i + 1) * cols + 2 * j] = v;
                dst[(2 * i + 1) * cols + 2 * j + 1] = v;
            }
        }
    }
    Ok(out)
}

/// Bilinear 2× upsampler between a fixed pair of grids.
#[derive(Debug, Clone)]
pub struct Upsampler {
    coarse: Arc<SphereGrid>,
    fine: Arc<SphereGrid>,
    warp: Warp,
}

impl Upsampler {
    pub fn new(coarse: Arc<SphereGrid>) -> Result<Self> {
        let fine = Arc::new(coarse.refine()?);
        let mut xs = Vec::with_capacity(fine.len());
        let mut ys = Vec::with_capacity(fine.len());
        for i in 0..fine.rows() {
            for j in 0..fine.cols() {
                xs.push((j as f64 - 0.5) * 0.5);
                ys.push(i as f64 * 0.5 - 0.25);
            }
        }
        let warp = Warp::from_pixels(&coarse, &xs, &ys);
        Ok(Self { coarse, fine, warp })
    }

    pub fn coarse(&self) -> &Arc<SphereGrid> {
        &self.coarse
    }

    pub fn fine(&self) -> &Arc<SphereGrid> {
        &self.fine
    }

    pub fn forward(&self, input: &FeatureMap) -> Result<FeatureMap> {
        if !input.grid().same_shape(&self.coarse) {
            return Err(CoreError::GridMismatch("upsampler input grid".into()));
        }
        let mut out = FeatureMap::zeros(self.fine.clone(), input.channels());
        for c in 0..input.channels() {
            self.warp.apply(input.channel(c), out.channel_mut(c));
        }
        Ok(out)
    }

    pub fn vjp(&self, upstream: &FeatureMap) -> Result<FeatureMap> {
        if !upstream.grid().same_shape(&self.fine) {
            return Err(CoreError::GridMismatch("upsampler upstream grid".into()));
        }
        let mut out = FeatureMap::zeros(self.coarse.clone(), upstream.channels());
        for c in 0..upstream.channels() {
            self.warp.adjoint(upstream.channel(c), out.channel_mut(c));
        }
        Ok(out)
    }
}

/// Bilinear upsampling onto the double-resolution grid.
pub fn upsample2(input: &FeatureMap) -> Result<FeatureMap> {
    Upsampler::new(input.grid_arc().clone())?.forward(input)
}
