//! Finite-difference checks of every hand-written adjoint.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use spherewarp_core::gnomonic::spherical_conv_vjp;
use spherewarp_core::gradcheck::{grad_check, DiffOp};
use spherewarp_core::likelihood::data_term_weighted;
use spherewarp_core::prior::{geodesic_velocity, geodesic_velocity_vjp, quadratic_penalty, GeodesicVelocityField};
use spherewarp_core::resample::{pool2_vjp, Upsampler};
use spherewarp_core::synth::smooth_test_map;
use spherewarp_core::{
    pool2, sample_periodic, sample_periodic_vjp, scaling_and_squaring, scaling_and_squaring_trace, spherical_conv,
    Atlas, ConvWeights, DeformationField, EdgeWeighting, FeatureMap, GnomonicKernelOffsets, Interp,
    LikelihoodWeighting, SphereGrid, VelocityField, WeightedGraphLaplacian, DEFAULT_STEPS,
};
use spherewarp_registration::objective::Noise;
use spherewarp_registration::{build_unet, Mode, Objective};

use crate::error::{CliError, Result};

pub const LINEAR_TOL: f64 = 1e-9;
pub const COORDINATE_TOL: f64 = 1e-4;
pub const SMOOTH_TOL: f64 = 1e-6;
pub const END_TO_END_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
    pub wall_time_s: f64,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }
}

fn grid(m: usize, n: usize) -> Arc<SphereGrid> {
    Arc::new(SphereGrid::new(m, n).expect("suite grids are valid"))
}

fn random(n: usize, seed: u64, scale: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| scale * rng.gen_range(-1.0..1.0)).collect()
}

fn flat(theta: &[f64], phi: &[f64]) -> Vec<f64> {
    let mut v = theta.to_vec();
    v.extend_from_slice(phi);
    v
}

/// Displacement whose targets stay strictly inside grid cells.
fn interior_displacement(g: &Arc<SphereGrid>, seed: u64) -> DeformationField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut t, mut p) = (Vec::with_capacity(g.len()), Vec::with_capacity(g.len()));
    for k in 0..g.len() {
        let i = k / g.cols();
        let sx: f64 = rng.gen_range(-2.0..2.0);
        t.push((sx.floor() + rng.gen_range(0.2..0.8)) * g.dtheta());
        let base = if i + 1 < g.rows() { 0.0 } else { -1.0 };
        p.push((base + rng.gen_range(0.2..0.8)) * g.dphi());
    }
    DeformationField::new(g.clone(), t, p).expect("finite displacement")
}

fn check(name: &str, tolerance: f64, error: f64) -> CheckResult {
    CheckResult { name: name.to_string(), error, tolerance }
}

fn pool_check() -> CheckResult {
    let (fine, channels) = (grid(8, 16), 2);
    let coarse = fine.coarsen().expect("even grid");
    let op = DiffOp::new(
        |x: &[f64]| pool2(&FeatureMap::new(fine.clone(), channels, x.to_vec()).unwrap()).unwrap().into_data(),
        |_: &[f64], u: &[f64]| {
            let up = FeatureMap::new(Arc::new(coarse.clone()), channels, u.to_vec()).unwrap();
            pool2_vjp(&up, &fine).unwrap().into_data()
        },
    );
    check("pool2", LINEAR_TOL, grad_check(&op, &random(channels * fine.len(), 1, 1.0), 1e-3))
}

fn upsample_check() -> CheckResult {
    let coarse = grid(4, 8);
    let up = Upsampler::new(coarse.clone()).unwrap();
    let fine = up.fine().clone();
    let op = DiffOp::new(
        |x: &[f64]| up.forward(&FeatureMap::new(coarse.clone(), 2, x.to_vec()).unwrap()).unwrap().into_data(),
        |_: &[f64], u: &[f64]| up.vjp(&FeatureMap::new(fine.clone(), 2, u.to_vec()).unwrap()).unwrap().into_data(),
    );
    check("upsample2", LINEAR_TOL, grad_check(&op, &random(2 * coarse.len(), 2, 1.0), 1e-3))
}

fn conv_checks() -> Vec<CheckResult> {
    let g = grid(8, 16);
    let offsets = GnomonicKernelOffsets::new(&g);
    let (c_in, c_out) = (2, 3);
    let w = ConvWeights::new(c_out, c_in, random(c_out * c_in * 9, 3, 0.5), random(c_out, 4, 0.5)).unwrap();
    let x0 = random(c_in * g.len(), 5, 1.0);
    let input_op = DiffOp::new(
        |x: &[f64]| {
            spherical_conv(&FeatureMap::new(g.clone(), c_in, x.to_vec()).unwrap(), &w, &offsets).unwrap().into_data()
        },
        |x: &[f64], u: &[f64]| {
            let input = FeatureMap::new(g.clone(), c_in, x.to_vec()).unwrap();
            let up = FeatureMap::new(g.clone(), c_out, u.to_vec()).unwrap();
            spherical_conv_vjp(&input, &w, &offsets, &up).unwrap().input.into_data()
        },
    );
    let input = FeatureMap::new(g.clone(), c_in, x0.clone()).unwrap();
    let nw = w.weights.len();
    let mut p0 = w.weights.clone();
    p0.extend_from_slice(&w.bias);
    let weight_op = DiffOp::new(
        |p: &[f64]| {
            let wp = ConvWeights::new(c_out, c_in, p[..nw].to_vec(), p[nw..].to_vec()).unwrap();
            spherical_conv(&input, &wp, &offsets).unwrap().into_data()
        },
        |p: &[f64], u: &[f64]| {
            let wp = ConvWeights::new(c_out, c_in, p[..nw].to_vec(), p[nw..].to_vec()).unwrap();
            let up = FeatureMap::new(g.clone(), c_out, u.to_vec()).unwrap();
            let gr = spherical_conv_vjp(&input, &wp, &offsets, &up).unwrap();
            flat(&gr.weights, &gr.bias)
        },
    );
    vec![
        check("gnomonic conv (input)", LINEAR_TOL, grad_check(&input_op, &x0, 1e-3)),
        check("gnomonic conv (weights)", LINEAR_TOL, grad_check(&weight_op, &p0, 1e-3)),
    ]
}

fn sampler_checks() -> Vec<CheckResult> {
    let g = grid(8, 16);
    let n = g.len();
    let d = interior_displacement(&g, 7);
    let map_op = DiffOp::new(
        |x: &[f64]| {
            sample_periodic(&FeatureMap::new(g.clone(), 2, x.to_vec()).unwrap(), &d, Interp::Bilinear).unwrap().into_data()
        },
        |x: &[f64], u: &[f64]| {
            let m = FeatureMap::new(g.clone(), 2, x.to_vec()).unwrap();
            let up = FeatureMap::new(g.clone(), 2, u.to_vec()).unwrap();
            sample_periodic_vjp(&m, &d, &up).unwrap().map.into_data()
        },
    );
    let m = smooth_test_map(&g, 3, 21);
    let split = |x: &[f64]| DeformationField::new(g.clone(), x[..n].to_vec(), x[n..].to_vec()).unwrap();
    let coord_op = DiffOp::new(
        |x: &[f64]| sample_periodic(&m, &split(x), Interp::Bilinear).unwrap().into_data(),
        |x: &[f64], u: &[f64]| {
            let up = FeatureMap::new(g.clone(), 1, u.to_vec()).unwrap();
            let gr = sample_periodic_vjp(&m, &split(x), &up).unwrap();
            flat(&gr.coords.theta, &gr.coords.phi)
        },
    );
    let d0 = interior_displacement(&g, 9);
    vec![
        check("sampler (map)", LINEAR_TOL, grad_check(&map_op, &random(2 * n, 8, 1.0), 1e-3)),
        check("sampler (coordinates)", COORDINATE_TOL, grad_check(&coord_op, &flat(&d0.theta, &d0.phi), 1e-4)),
    ]
}

fn squaring_check() -> CheckResult {
    let g = grid(8, 16);
    let n = g.len();
    let v = spherewarp_core::synth::gen_smooth_velocity(&g, 0.08, 3, 2).unwrap();
    let split = |x: &[f64]| VelocityField::new(g.clone(), x[..n].to_vec(), x[n..].to_vec()).unwrap();
    let op = DiffOp::new(
        |x: &[f64]| {
            let d = scaling_and_squaring(&split(x), DEFAULT_STEPS).unwrap();
            flat(&d.theta, &d.phi)
        },
        |x: &[f64], u: &[f64]| {
            let tr = scaling_and_squaring_trace(&split(x), DEFAULT_STEPS).unwrap();
            let gv = tr.vjp(&DeformationField::new(g.clone(), u[..n].to_vec(), u[n..].to_vec()).unwrap());
            flat(&gv.theta, &gv.phi)
        },
    );
    check("scaling and squaring", COORDINATE_TOL, grad_check(&op, &flat(&v.theta, &v.phi), 1e-6))
}

fn prior_checks() -> Vec<CheckResult> {
    let g = grid(8, 16);
    let n = g.len();
    let split = |x: &[f64]| DeformationField::new(g.clone(), x[..n].to_vec(), x[n..].to_vec()).unwrap();
    let x0 = flat(&random(n, 10, 0.2), &random(n, 11, 0.2));
    let chord_op = DiffOp::new(
        |x: &[f64]| {
            let v = geodesic_velocity(&split(x));
            let mut out = v.vx;
            out.extend(v.vy);
            out.extend(v.vz);
            out
        },
        |x: &[f64], u: &[f64]| {
            let up = GeodesicVelocityField { vx: u[..n].to_vec(), vy: u[n..2 * n].to_vec(), vz: u[2 * n..].to_vec() };
            let gd = geodesic_velocity_vjp(&split(x), &up);
            flat(&gd.theta, &gd.phi)
        },
    );
    let lap = WeightedGraphLaplacian::new(g.clone(), EdgeWeighting::Spherical);
    let penalty_op = DiffOp::new(
        |x: &[f64]| vec![quadratic_penalty(&split(x), &lap, 2.5).0],
        |x: &[f64], u: &[f64]| {
            let gd = quadratic_penalty(&split(x), &lap, 2.5).1;
            flat(&gd.theta, &gd.phi).iter().map(|v| v * u[0]).collect()
        },
    );
    vec![
        check("chord displacement", SMOOTH_TOL, grad_check(&chord_op, &x0, 1e-5)),
        check("Laplacian penalty", SMOOTH_TOL, grad_check(&penalty_op, &x0, 1e-5)),
    ]
}

fn data_term_check() -> CheckResult {
    let g = grid(8, 16);
    let var = FeatureMap::new(g.clone(), 1, random(g.len(), 12, 0.5).iter().map(|v| 1.0 + v).collect()).unwrap();
    let atlas = Atlas::new(smooth_test_map(&g, 3, 13), var, None).unwrap();
    let op = DiffOp::new(
        |x: &[f64]| {
            let w = FeatureMap::new(g.clone(), 1, x.to_vec()).unwrap();
            vec![data_term_weighted(&w, &atlas, LikelihoodWeighting::SinLatitude).unwrap().0]
        },
        |x: &[f64], u: &[f64]| {
            let w = FeatureMap::new(g.clone(), 1, x.to_vec()).unwrap();
            let gr = data_term_weighted(&w, &atlas, LikelihoodWeighting::SinLatitude).unwrap().1;
            gr.data().iter().map(|v| v * u[0]).collect()
        },
    );
    check("data term", SMOOTH_TOL, grad_check(&op, &random(g.len(), 14, 1.0), 1e-4))
}

fn loss_check(name: &str, mode: Mode, half: bool, stochastic: bool) -> CheckResult {
    let g = grid(8, 16);
    let var = FeatureMap::new(g.clone(), 1, random(g.len(), 15, 0.5).iter().map(|v| 1.25 + v).collect()).unwrap();
    let atlas = Atlas::new(smooth_test_map(&g, 3, 1), var, None).unwrap();
    let moving = smooth_test_map(&g, 3, 2);
    let obj = Objective::new(atlas, 3.0, DEFAULT_STEPS, mode, half).unwrap();
    let pg = obj.param_grid().clone();
    let n = pg.len();
    let mut x = flat(&random(n, 16, 0.05), &random(n, 17, 0.05));
    let noise = Noise::draw(n, &mut ChaCha8Rng::seed_from_u64(4));
    if stochastic {
        x.extend((0..n).map(|k| -6.0 + 0.1 * (k % 5) as f64));
    }
    let eval = |x: &[f64]| {
        let mu = VelocityField::new(pg.clone(), x[..n].to_vec(), x[n..2 * n].to_vec()).unwrap();
        let lv = if stochastic { Some(x[2 * n..].to_vec()) } else { None };
        obj.evaluate(&moving, &mu, lv.as_deref().map(|l| (l, &noise))).unwrap()
    };
    let op = DiffOp::new(
        |x: &[f64]| vec![eval(x).terms.total()],
        |x: &[f64], u: &[f64]| {
            let e = eval(x);
            let mut g = flat(&e.grad_mu.theta, &e.grad_mu.phi);
            if let Some(gl) = e.grad_log_var {
                g.extend_from_slice(&gl);
            }
            g.iter().map(|v| v * u[0]).collect()
        },
    );
    check(name, END_TO_END_TOL, grad_check(&op, &x, 1e-6))
}

fn unet_checks() -> Vec<CheckResult> {
    let g = grid(16, 32);
    let n = g.len();
    let widths = [3, 4, 4, 5];
    let mut net = build_unet(g.clone(), 2, &widths, 11).unwrap();
    let mut p = net.params();
    let total = p.len();
    let n_heads = 3 * (widths[0] * 9) + 3;
    for (k, v) in random(n_heads, 12, 0.3).into_iter().enumerate() {
        p[total - n_heads + k] += v;
    }
    net.set_params(&p).unwrap();
    let x = random(2 * n, 13, 1.0);
    let outputs = |m: &spherewarp_registration::SphericalUNet, input: &[f64]| {
        let out = m.forward(&FeatureMap::new(g.clone(), 2, input.to_vec()).unwrap()).unwrap();
        let mut v = out.mu.to_feature_map().into_data();
        v.extend_from_slice(out.log_var.data());
        v
    };
    let param_op = DiffOp::new(
        |params: &[f64]| {
            let mut m = net.clone();
            m.set_params(params).unwrap();
            outputs(&m, &x)
        },
        |params: &[f64], u: &[f64]| {
            let mut m = net.clone();
            m.set_params(params).unwrap();
            let (_, tape) = m.forward_tape(&FeatureMap::new(g.clone(), 2, x.clone()).unwrap()).unwrap();
            m.backward(&tape, &u[..2 * n], &u[2 * n..]).unwrap().0
        },
    );
    let input_op = DiffOp::new(
        |input: &[f64]| outputs(&net, input),
        |input: &[f64], u: &[f64]| {
            let (_, tape) = net.forward_tape(&FeatureMap::new(g.clone(), 2, input.to_vec()).unwrap()).unwrap();
            net.backward(&tape, &u[..2 * n], &u[2 * n..]).unwrap().1.into_data()
        },
    );
    vec![
        check("spherical U-Net (parameters)", END_TO_END_TOL, grad_check(&param_op, &p, 1e-6)),
        check("spherical U-Net (input)", END_TO_END_TOL, grad_check(&input_op, &x, 1e-6)),
    ]
}

/// Runs every check. Panics inside a check are reported as internal errors.
pub fn run_suite() -> Result<SuiteReport> {
    let start = Instant::now();
    let checks = std::panic::catch_unwind(|| {
        let mut checks = vec![pool_check(), upsample_check()];
        checks.extend(conv_checks());
        checks.extend(sampler_checks());
        checks.push(squaring_check());
        checks.extend(prior_checks());
        checks.push(data_term_check());
        checks.push(loss_check("loss 8x16 (instance)", Mode::Instance, false, false));
        checks.push(loss_check("loss 8x16 (ablation)", Mode::Voxelmorph2dAblation, false, false));
        checks.push(loss_check("loss 8x16 (stochastic)", Mode::Instance, false, true));
        checks.push(loss_check("loss 8x16 (half resolution)", Mode::Instance, true, false));
        checks.extend(unet_checks());
        checks
    })
    .map_err(|_| CliError::new(crate::error::Category::Internal, "gradient check suite panicked"))?;
    Ok(SuiteReport { checks, wall_time_s: start.elapsed().as_secs_f64() })
}
