//! Finite-difference verification of hand-written adjoints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// An operator with a forward map and a vector-Jacobian product.
pub trait Differentiable {
    fn forward(&self, x: &[f64]) -> Vec<f64>;
    /// `Jᵀ(x) · upstream`.
    fn vjp(&self, x: &[f64], upstream: &[f64]) -> Vec<f64>;
}

/// Closure-backed [`Differentiable`].
pub struct DiffOp<F, G> {
    forward: F,
    vjp: G,
}

impl<F, G> DiffOp<F, G>
where
    F: Fn(&[f64]) -> Vec<f64>,
    G: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    pub fn new(forward: F, vjp: G) -> Self {
        Self { forward, vjp }
    }
}

impl<F, G> Differentiable for DiffOp<F, G>
where
    F: Fn(&[f64]) -> Vec<f64>,
    G: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        (self.forward)(x)
    }

    fn vjp(&self, x: &[f64], upstream: &[f64]) -> Vec<f64> {
        (self.vjp)(x, upstream)
    }
}

/// Number of random directions probed by [`grad_check`].
pub const GRAD_CHECK_DIRECTIONS: usize = 32;

/// Max relative error between central differences and the adjoint over
/// [`GRAD_CHECK_DIRECTIONS`] random input directions.
pub fn grad_check(op: &impl Differentiable, x: &[f64], step: f64) -> f64 {
    grad_check_with(op, x, step, GRAD_CHECK_DIRECTIONS, 0x5eed)
}

/// [`grad_check`] with an explicit direction count and seed.
///
/// Each probe draws a Gaussian input direction `u` and output cotangent `w`
/// and compares `w · (f(x + hu) - f(x - hu)) / 2h` against `vjp(x, w) · u`.
pub fn grad_check_with(op: &impl Differentiable, x: &[f64], step: f64, directions: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y0 = op.forward(x);
    let mut worst: f64 = 0.0;
    for _ in 0..directions {
        let u: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let w: Vec<f64> = (0..y0.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let xp: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + step * b).collect();
        let xm: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a - step * b).collect();
        let yp = op.forward(&xp);
        let ym = op.forward(&xm);
        let fd: f64 = w.iter().zip(yp.iter().zip(&ym)).map(|(wi, (p, m))| wi * (p - m)).sum::<f64>() / (2.0 * step);
        let g = op.vjp(x, &w);
        let ad: f64 = g.iter().zip(&u).map(|(a, b)| a * b).sum();
        let scale = fd.abs().max(ad.abs()).max(1e-12);
        worst = worst.max((fd - ad).abs() / scale);
    }
    worst
}
