//! Energy-shell volumes and the Weyl term.

use std::f64::consts::PI;
use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{TestFunction, TraceError};
use crate::dynamics::{Branch, Mode, ParticleParams};
use crate::fields::{FieldConfig, Vec3};

/// Sampling box and Monte Carlo settings for shell volumes.
#[derive(Debug, Clone)]
pub struct WeylOptions {
    pub mode: Mode,
    pub branches: Vec<Branch>,
    /// Half-width of the position cube.
    pub x_half: f64,
    /// Half-width of the kinetic-momentum cube.
    pub p_half: f64,
    pub samples: usize,
    pub seed: u64,
    /// Half-width of the energy band used for `d Vol{H < E} / dE`.
    pub band: f64,
    /// Samples in the band closer than this fraction of the half-width to a
    /// box face signal that the shell is not contained in the box.
    pub margin: f64,
}

impl Default for WeylOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Planar,
            branches: vec![Branch::Plus, Branch::Minus],
            x_half: 3.0,
            p_half: 3.0,
            samples: 4_000_000,
            seed: 1,
            band: 0.01,
            margin: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct VolumeEstimate {
    pub branch: Branch,
    pub volume: f64,
    pub std_error: f64,
    pub samples: usize,
    pub in_band: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct WeylResult {
    pub value: f64,
    pub std_error: f64,
    pub volumes: Vec<VolumeEstimate>,
}

const CHUNK: usize = 1 << 16;

/// `|Omega_E|` for one branch: Monte Carlo estimate of
/// `(Vol{H < E + b} - Vol{H < E - b}) / 2b` over the sampling box.
///
/// Kinetic momenta are sampled directly; `p -> pi` has unit Jacobian at
/// fixed `x`, so the estimate is gauge independent.
pub fn shell_volume_mc(
    energy: f64,
    branch: Branch,
    config: &FieldConfig,
    params: &ParticleParams,
    opts: &WeylOptions,
) -> Result<VolumeEstimate, TraceError> {
    params.validate()?;
    if !(opts.x_half > 0.0 && opts.p_half > 0.0 && opts.band > 0.0 && opts.samples > 0) {
        return Err(TraceError::InvalidInput(format!("{opts:?}")));
    }
    let f = opts.mode.dof();
    let (lo, hi) = (energy - opts.band, energy + opts.band);
    let c = params.c;
    let mc2 = params.rest_energy();
    let sign = branch.sign();
    let edge_x = (1.0 - opts.margin) * opts.x_half;
    let edge_p = (1.0 - opts.margin) * opts.p_half;
    let n_chunks = opts.samples.div_ceil(CHUNK);
    let chunk_stats: Vec<(usize, bool)> = (0..n_chunks)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(k as u64 + 1);
            let n = CHUNK.min(opts.samples - k * CHUNK);
            let mut count = 0;
            let mut touches = false;
            for _ in 0..n {
                let mut x = Vec3::zeros();
                let mut pi = Vec3::zeros();
                for i in 0..f {
                    x[i] = rng.gen_range(-opts.x_half..opts.x_half);
                }
                for i in 0..f {
                    pi[i] = rng.gen_range(-opts.p_half..opts.p_half);
                }
                let eps = (c * c * pi.norm_squared() + mc2 * mc2).sqrt();
                let h = params.e * config.eval_unchecked(&x).phi + sign * eps;
                if h > lo && h < hi {
                    count += 1;
                    let near_x = (0..f).any(|i| x[i].abs() > edge_x);
                    let near_p = (0..f).any(|i| pi[i].abs() > edge_p);
                    touches |= near_x || near_p;
                }
            }
            (count, touches)
        })
        .collect();
    if chunk_stats.iter().any(|s| s.1) {
        return Err(TraceError::Domain(format!(
            "{} energy shell at E = {energy} reaches the sampling box (x_half = {}, p_half = {})",
            branch.label(),
            opts.x_half,
            opts.p_half
        )));
    }
    let in_band: usize = chunk_stats.iter().map(|s| s.0).sum();
    let box_vol = (2.0 * opts.x_half).powi(f as i32) * (2.0 * opts.p_half).powi(f as i32);
    let n = opts.samples as f64;
    let frac = in_band as f64 / n;
    let scale = box_vol / (2.0 * opts.band);
    Ok(VolumeEstimate {
        branch,
        volume: scale * frac,
        std_error: scale * (frac * (1.0 - frac) / n).sqrt(),
        samples: opts.samples,
        in_band,
    })
}

/// Momentum-shell measure `int delta(H - E) d^f pi` at position `x`.
fn momentum_shell(eps: f64, params: &ParticleParams, f: usize) -> f64 {
    let c = params.c;
    let mc2 = params.rest_energy();
    if eps <= mc2 {
        return 0.0;
    }
    let pi = (eps * eps - mc2 * mc2).sqrt() / c;
    // |S^{f-1}| pi^{f-1} / (d eps / d pi)
    match f {
        2 => 2.0 * PI * eps / (c * c),
        _ => 4.0 * PI * pi * eps / (c * c),
    }
}

/// Deterministic planar `|Omega_E|`: the momentum integral is done in
/// closed form and the position integral by nested Gauss-Legendre
/// quadrature over the classically allowed intervals of each line.
pub fn shell_volume_grid(
    energy: f64,
    branch: Branch,
    config: &FieldConfig,
    params: &ParticleParams,
    x_half: f64,
    panels: usize,
) -> Result<f64, TraceError> {
    params.validate()?;
    if panels == 0 || !(x_half > 0.0) {
        return Err(TraceError::InvalidInput(format!("panels = {panels}, x_half = {x_half}")));
    }
    let mc2 = params.rest_energy();
    let sign = branch.sign();
    let eps_at = |x: f64, y: f64| sign * (energy - params.e * config.eval_unchecked(&Vec3::new(x, y, 0.0)).phi);
    let excess = |x: f64, y: f64| eps_at(x, y) - mc2;
    let rule = GaussLegendre::new(NonZeroUsize::new(16).unwrap());
    let n_scan = 4 * panels;
    let line = |x: f64| -> Result<f64, TraceError> {
        let ys: Vec<f64> = (0..=n_scan).map(|k| -x_half + 2.0 * x_half * k as f64 / n_scan as f64).collect();
        let vals: Vec<f64> = ys.iter().map(|&y| excess(x, y)).collect();
        if vals[0] > 0.0 || vals[n_scan] > 0.0 {
            return Err(TraceError::Domain(format!("{} energy shell at E = {energy} reaches |y| = {x_half}", branch.label())));
        }
        let root = |mut a: f64, mut b: f64| {
            let fa = excess(x, a);
            for _ in 0..80 {
                let m = 0.5 * (a + b);
                if (excess(x, m) > 0.0) == (fa > 0.0) {
                    a = m;
                } else {
                    b = m;
                }
            }
            0.5 * (a + b)
        };
        let mut total = 0.0;
        let mut start = None;
        for k in 0..n_scan {
            let (inside_a, inside_b) = (vals[k] > 0.0, vals[k + 1] > 0.0);
            if !inside_a && inside_b {
                start = Some(root(ys[k], ys[k + 1]));
            }
            if inside_a && !inside_b {
                let a = start.take().expect("interval opened before closing");
                let b = root(ys[k], ys[k + 1]);
                let sub = 8;
                let h = (b - a) / sub as f64;
                for j in 0..sub {
                    let lo = a + j as f64 * h;
                    total += rule.integrate(lo, lo + h, |y| momentum_shell(eps_at(x, y), params, 2));
                }
            }
        }
        Ok(total)
    };
    let n_edge = 4 * panels;
    for x in [-x_half, x_half] {
        if (0..=n_edge).any(|k| excess(x, -x_half + 2.0 * x_half * k as f64 / n_edge as f64) > 0.0) {
            return Err(TraceError::Domain(format!("{} energy shell at E = {energy} reaches |x| = {x_half}", branch.label())));
        }
    }
    let h = 2.0 * x_half / panels as f64;
    let mut sum = 0.0;
    for k in 0..panels {
        let a = -x_half + k as f64 * h;
        let mut err = None;
        sum += rule.integrate(a, a + h, |x| {
            line(x).unwrap_or_else(|e| {
                err = Some(e);
                0.0
            })
        });
        if let Some(e) = err {
            return Err(e);
        }
    }
    Ok(sum)
}

/// `rho_hat(0)/2pi * 2 / (2 pi hbar)^(f-1)`: the Weyl term per unit shell
/// volume, including the two spin states of each branch.
pub fn weyl_prefactor(tf: &TestFunction, hbar: f64, f: usize) -> f64 {
    tf.rho_hat(0.0) / (2.0 * PI) * 2.0 / (2.0 * PI * hbar).powi(f as i32 - 1)
}

pub fn weyl_term(
    energy: f64,
    config: &FieldConfig,
    params: &ParticleParams,
    tf: &TestFunction,
    opts: &WeylOptions,
) -> Result<WeylResult, TraceError> {
    let mut volumes = Vec::new();
    for &b in &opts.branches {
        volumes.push(shell_volume_mc(energy, b, config, params, opts)?);
    }
    let pre = weyl_prefactor(tf, params.hbar, opts.mode.dof());
    let vol: f64 = volumes.iter().map(|v| v.volume).sum();
    let var: f64 = volumes.iter().map(|v| v.std_error * v.std_error).sum();
    Ok(WeylResult { value: pre * vol, std_error: pre * var.sqrt(), volumes })
}
