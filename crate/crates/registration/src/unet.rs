//! Spherical U-Net: gnomonic convolutions over a five-level grid pyramid.
//!
//! Encoder blocks convolve at levels 0..3 and pool to the next level; the
//! decoder upsamples, concatenates the skip of the same level and convolves.
//! Two heads read the level-0 features: `μ` (θ, φ) and per-vertex `log σ²`.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use spherewarp_core::gnomonic::{conv_patches, conv_patches_vjp, gather_patches, scatter_patches, Patches, KERNEL_TAPS};
use spherewarp_core::resample::{pool2_onto, pool2_vjp, Upsampler};
use spherewarp_core::{ConvWeights, CoreError, FeatureMap, GnomonicKernelOffsets, SphereGrid, VelocityField};

use crate::error::{RegError, Result};

pub const DEFAULT_WIDTHS: [usize; 4] = [16, 32, 32, 32];
pub const LEAK: f64 = 0.2;
/// Initial bias of the `log σ²` head.
pub const LOG_VAR_INIT: f64 = -10.0;
pub const DEPTH: usize = 4;

#[derive(Debug, Clone)]
pub struct SphericalUNet {
    in_channels: usize,
    widths: [usize; DEPTH],
    levels: Vec<Arc<SphereGrid>>,
    offsets: Vec<GnomonicKernelOffsets>,
    upsamplers: Vec<Upsampler>,
    enc: Vec<ConvWeights>,
    dec: Vec<ConvWeights>,
    head_mu: ConvWeights,
    head_log_var: ConvWeights,
}

/// Network outputs on the input grid.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetOutput {
    pub mu: VelocityField,
    pub log_var: FeatureMap,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    enc_patches: Vec<Patches>,
    enc_pre: Vec<Vec<f64>>,
    dec_patches: Vec<Patches>,
    dec_pre: Vec<Vec<f64>>,
    head_patches: Patches,
}

fn leaky(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| if v > 0.0 { v } else { LEAK * v }).collect()
}

fn leaky_back(g: &mut [f64], z: &[f64]) {
    for (a, &v) in g.iter_mut().zip(z) {
        if v <= 0.0 {
            *a *= LEAK;
        }
    }
}

fn he_init(c_out: usize, c_in: usize, rng: &mut ChaCha8Rng) -> ConvWeights {
    let fan_in = (c_in * KERNEL_TAPS) as f64;
    let std = (2.0 / ((1.0 + LEAK * LEAK) * fan_in)).sqrt();
    let normal = Normal::new(0.0, std).expect("standard deviation is positive");
    let weights = (0..c_out * c_in * KERNEL_TAPS).map(|_| normal.sample(rng)).collect();
    ConvWeights::new(c_out, c_in, weights, vec![0.0; c_out]).expect("shape is consistent by construction")
}

fn pyramid(grid: &Arc<SphereGrid>) -> Result<Vec<Arc<SphereGrid>>> {
    if grid.rows() % 16 != 0 || grid.cols() % 16 != 0 || grid.cols() < 32 {
        return Err(RegError::Config(format!(
            "U-Net needs grid dims divisible by 16 (and at least 32 columns), got {}x{}",
            grid.rows(),
            grid.cols()
        )));
    }
    let mut levels = vec![grid.clone()];
    for _ in 0..DEPTH {
        let next = Arc::new(levels.last().expect("non-empty").coarsen()?);
        levels.push(next);
    }
    Ok(levels)
}

/// Randomly initialised network for `grid`; the `μ` head starts at zero and
/// the `log σ²` head at [`LOG_VAR_INIT`].
pub fn build_unet(grid: Arc<SphereGrid>, in_channels: usize, widths: &[usize], seed: u64) -> Result<SphericalUNet> {
    if widths.len() != DEPTH || widths.iter().any(|w| *w == 0) || in_channels == 0 {
        return Err(RegError::Config(format!("need {DEPTH} positive widths and at least one input channel")));
    }
    let w = [widths[0], widths[1], widths[2], widths[3]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enc = Vec::with_capacity(DEPTH);
    let mut c_in = in_channels;
    for &c in &w {
        enc.push(he_init(c, c_in, &mut rng));
        c_in = c;
    }
    let mut dec = Vec::with_capacity(DEPTH);
    for l in 0..DEPTH {
        let below = if l + 1 < DEPTH { w[l + 1] } else { w[DEPTH - 1] };
        dec.push(he_init(w[l], below + w[l], &mut rng));
    }
    let head_mu = ConvWeights::zeros(2, w[0]);
    let mut head_log_var = ConvWeights::zeros(1, w[0]);
    head_log_var.bias[0] = LOG_VAR_INIT;
    SphericalUNet::assemble(grid, in_channels, w, enc, dec, head_mu, head_log_var)
}

impl SphericalUNet {
    fn assemble(
        grid: Arc<SphereGrid>,
        in_channels: usize,
        widths: [usize; DEPTH],
        enc: Vec<ConvWeights>,
        dec: Vec<ConvWeights>,
        head_mu: ConvWeights,
        head_log_var: ConvWeights,
    ) -> Result<Self> {
        let levels = pyramid(&grid)?;
        let offsets = levels[..DEPTH].iter().map(|g| GnomonicKernelOffsets::new(g)).collect();
        let upsamplers = levels[1..].iter().map(|g| Upsampler::new(g.clone())).collect::<std::result::Result<_, _>>()?;
        Ok(Self { in_channels, widths, levels, offsets, upsamplers, enc, dec, head_mu, head_log_var })
    }

    /// Same weights on another grid.
    pub fn with_grid(&self, grid: Arc<SphereGrid>) -> Result<Self> {
        Self::assemble(
            grid,
            self.in_channels,
            self.widths,
            self.enc.clone(),
            self.dec.clone(),
            self.head_mu.clone(),
            self.head_log_var.clone(),
        )
    }

    /// Rebuilds a network from [`SphericalUNet::params`].
    pub fn from_params(grid: Arc<SphereGrid>, in_channels: usize, widths: &[usize], params: &[f64]) -> Result<Self> {
        let mut net = build_unet(grid, in_channels, widths, 0)?;
        net.set_params(params)?;
        Ok(net)
    }

    pub fn grid(&self) -> &Arc<SphereGrid> {
        &self.levels[0]
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn widths(&self) -> [usize; DEPTH] {
        self.widths
    }

    fn convs(&self) -> impl Iterator<Item = &ConvWeights> {
        self.enc.iter().chain(&self.dec).chain([&self.head_mu, &self.head_log_var])
    }

    fn convs_mut(&mut self) -> impl Iterator<Item = &mut ConvWeights> {
        self.enc.iter_mut().chain(self.dec.iter_mut()).chain([&mut self.head_mu, &mut self.head_log_var])
    }

    pub fn param_count(&self) -> usize {
        self.convs().map(|c| c.weights.len() + c.bias.len()).sum()
    }

    /// Encoder, decoder, `μ` head, `log σ²` head; weights then bias per layer.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for c in self.convs() {
            out.extend_from_slice(&c.weights);
            out.extend_from_slice(&c.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(RegError::Config(format!(
                "network has {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(CoreError::NonFinite("network parameters".into()).into());
        }
        let mut at = 0;
        for c in self.convs_mut() {
            let nw = c.weights.len();
            c.weights.copy_from_slice(&params[at..at + nw]);
            at += nw;
            let nb = c.bias.len();
            c.bias.copy_from_slice(&params[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    fn check_input(&self, input: &FeatureMap) -> Result<()> {
        if !input.grid().same_shape(self.grid()) {
            return Err(CoreError::GridMismatch(format!(
                "network built for {}x{}, input is {}x{}",
                self.grid().rows(),
                self.grid().cols(),
                input.grid().rows(),
                input.grid().cols()
            ))
            .into());
        }
        if input.channels() != self.in_channels {
            return Err(CoreError::Shape(format!(
                "network expects {} input channels, got {}",
                self.in_channels,
                input.channels()
            ))
            .into());
        }
        Ok(())
    }

    pub fn forward(&self, input: &FeatureMap) -> Result<UNetOutput> {
        Ok(self.forward_tape(input)?.0)
    }

    /// Forward pass that also returns what [`SphericalUNet::backward`] needs.
    pub fn forward_tape(&self, input: &FeatureMap) -> Result<(UNetOutput, Tape)> {
        self.check_input(input)?;
        let mut h = FeatureMap::new(self.levels[0].clone(), input.channels(), input.data().to_vec())?;
        let mut enc_patches = Vec::with_capacity(DEPTH);
        let mut enc_pre = Vec::with_capacity(DEPTH);
        let mut skips = Vec::with_capacity(DEPTH);
        for l in 0..DEPTH {
            let p = gather_patches(&h, &self.offsets[l])?;
            let z = conv_patches(&p, &self.enc[l]);
            let a = FeatureMap::new(self.levels[l].clone(), self.enc[l].c_out, leaky(&z))?;
            h = pool2_onto(&a, &self.levels[l + 1])?;
            enc_patches.push(p);
            enc_pre.push(z);
            skips.push(a);
        }
        let mut dec_patches = vec![None; DEPTH];
        let mut dec_pre = vec![Vec::new(); DEPTH];
        for l in (0..DEPTH).rev() {
            let up = self.upsamplers[l].forward(&h)?;
            let up = FeatureMap::new(self.levels[l].clone(), up.channels(), up.into_data())?;
            let cat = FeatureMap::stack(&[&up, &skips[l]])?;
            let p = gather_patches(&cat, &self.offsets[l])?;
            let z = conv_patches(&p, &self.dec[l]);
            h = FeatureMap::new(self.levels[l].clone(), self.dec[l].c_out, leaky(&z))?;
            dec_patches[l] = Some(p);
            dec_pre[l] = z;
        }
        let head_patches = gather_patches(&h, &self.offsets[0])?;
        let mu = FeatureMap::new(self.levels[0].clone(), 2, conv_patches(&head_patches, &self.head_mu))?;
        let log_var = FeatureMap::new(self.levels[0].clone(), 1, conv_patches(&head_patches, &self.head_log_var))?;
        let out = UNetOutput { mu: VelocityField::from_feature_map(&mu)?, log_var };
        let tape = Tape {
            enc_patches,
            enc_pre,
            dec_patches: dec_patches.into_iter().map(|p| p.expect("every level visited")).collect(),
            dec_pre,
            head_patches,
        };
        Ok((out, tape))
    }

    /// Gradients w.r.t. the parameters (in [`SphericalUNet::params`] order)
    /// and the input, given gradients w.r.t. `μ` (θ then φ) and `log σ²`.
    pub fn backward(&self, tape: &Tape, grad_mu: &[f64], grad_log_var: &[f64]) -> Result<(Vec<f64>, FeatureMap)> {
        let n0 = self.levels[0].len();
        if grad_mu.len() != 2 * n0 || grad_log_var.len() != n0 {
            return Err(CoreError::Shape("output gradients do not match the grid".into()).into());
        }
        let (gp_mu, gw_mu, gb_mu) = conv_patches_vjp(&tape.head_patches, &self.head_mu, grad_mu);
        let (gp_lv, gw_lv, gb_lv) = conv_patches_vjp(&tape.head_patches, &self.head_log_var, grad_log_var);
        let gp: Vec<f64> = gp_mu.iter().zip(&gp_lv).map(|(a, b)| a + b).collect();
        let mut gh = scatter_patches(&gp, self.widths[0], &self.levels[0], &self.offsets[0]);

        let mut dec_grads = vec![(Vec::new(), Vec::new()); DEPTH];
        let mut skip_grads = vec![None; DEPTH];
        for l in 0..DEPTH {
            let mut gz = gh.into_data();
            leaky_back(&mut gz, &tape.dec_pre[l]);
            let (gp, gw, gb) = conv_patches_vjp(&tape.dec_patches[l], &self.dec[l], &gz);
            let gin = scatter_patches(&gp, self.dec[l].c_in, &self.levels[l], &self.offsets[l]);
            let n = self.levels[l].len();
            let c_up = self.dec[l].c_in - self.widths[l];
            let (gu, gs) = gin.data().split_at(c_up * n);
            skip_grads[l] = Some(gs.to_vec());
            let gu = FeatureMap::new(self.upsamplers[l].fine().clone(), c_up, gu.to_vec())?;
            let coarse = self.upsamplers[l].vjp(&gu)?;
            gh = FeatureMap::new(self.levels[l + 1].clone(), c_up, coarse.into_data())?;
            dec_grads[l] = (gw, gb);
        }

        let mut enc_grads = vec![(Vec::new(), Vec::new()); DEPTH];
        for l in (0..DEPTH).rev() {
            let pooled = pool2_vjp(&gh, &self.levels[l])?;
            let mut gz = pooled.into_data();
            let skip = skip_grads[l].take().expect("filled by the decoder loop");
            gz.iter_mut().zip(&skip).for_each(|(a, b)| *a += b);
            leaky_back(&mut gz, &tape.enc_pre[l]);
            let (gp, gw, gb) = conv_patches_vjp(&tape.enc_patches[l], &self.enc[l], &gz);
            gh = scatter_patches(&gp, self.enc[l].c_in, &self.levels[l], &self.offsets[l]);
            enc_grads[l] = (gw, gb);
        }

        let mut grads = Vec::with_capacity(self.param_count());
        for (gw, gb) in enc_grads.iter().chain(&dec_grads).chain([&(gw_mu, gb_mu), &(gw_lv, gb_lv)]) {
            grads.extend_from_slice(gw);
            grads.extend_from_slice(gb);
        }
        Ok((grads, gh))
    }
}
