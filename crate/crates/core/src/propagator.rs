//! Leading-order semiclassical kernel built from classical boundary-value
//! orbits, their principal functions, Van Vleck amplitudes, Morse indices and
//! spin holonomies.

use nalgebra::{Complex, DMatrix, DVector, Matrix4};
use num_complex::Complex64;
use rayon::prelude::*;
use std::f64::consts::PI;
use thiserror::Error;

use crate::dynamics::{Branch, DynamicsError, Flow, FlowOptions, JacobianBlocks, Mode, ParticleParams, PhaseState, Trajectory};
use crate::fields::{FieldConfig, Vec3};
use crate::spin::{eigenframe, transport_spin, SpinError, SpinOptions, Spinor4x2, Su2};

#[derive(Debug, Error)]
pub enum PropagatorError {
    #[error("conjugate point at t = {t} (singular-value ratio {ratio:e}); perturb the time")]
    Caustic { t: f64, ratio: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Spin(#[from] SpinError),
}

/// Seed grid and Newton settings for the two-point boundary problem.
#[derive(Debug, Clone, Copy)]
pub struct ShootingSearch {
    pub mode: Mode,
    /// Half-width of the kinetic-momentum seed box around `(e/c) A(y)`.
    pub p_extent: f64,
    pub n_per_axis: usize,
    /// Required endpoint position residual.
    pub tol: f64,
    pub max_newton: usize,
    pub flow_tol: f64,
    /// Momenta closer than this (relative to `max(1, |p|)`) are merged.
    pub dedup_tol: f64,
}

impl Default for ShootingSearch {
    fn default() -> Self {
        Self {
            mode: Mode::Spatial,
            p_extent: 2.0,
            n_per_axis: 5,
            tol: 1e-9,
            max_newton: 60,
            flow_tol: 1e-12,
            dedup_tol: 1e-6,
        }
    }
}

/// A classical orbit from `y` to `x` in time `t`.
#[derive(Debug, Clone)]
pub struct ConnectingOrbit {
    pub branch: Branch,
    pub traj: Trajectory,
    pub p0: Vec3,
    /// Hamilton's principal function.
    pub r: f64,
    /// Van Vleck amplitude `sqrt|det(dx_t/dp_0)^-1|`.
    pub d_vv: f64,
    pub nu: u32,
    pub holonomy: Su2,
    pub frame0: Spinor4x2,
    pub frame_t: Spinor4x2,
    pub residual: f64,
}

impl ConnectingOrbit {
    pub fn t(&self) -> f64 {
        self.traj.t_final()
    }
}

fn dx_dp0(j: &DMatrix<f64>) -> DMatrix<f64> {
    JacobianBlocks::split(j).dx_dp0
}

pub(crate) fn shoot(flow: &Flow, y: &Vec3, p: &Vec3, t: f64, tol: f64) -> Result<(Vec3, DMatrix<f64>), DynamicsError> {
    let tr = flow.integrate(&PhaseState { x: *y, p: *p }, t, &FlowOptions::tol(tol).with_jacobian().endpoint_only())?;
    Ok((tr.final_state().x, dx_dp0(&tr.final_jacobian().expect("jacobian requested"))))
}

fn newton(flow: &Flow, x: &Vec3, y: &Vec3, t: f64, seed: Vec3, s: &ShootingSearch) -> Option<(Vec3, f64)> {
    let f = flow.dof();
    let mut p = seed;
    let (mut xt, mut jac) = shoot(flow, y, &p, t, s.flow_tol).ok()?;
    let mut res = (xt - x).norm();
    for _ in 0..s.max_newton {
        if res <= s.tol {
            return Some((p, res));
        }
        let rhs = DVector::from_iterator(f, (0..f).map(|i| x[i] - xt[i]));
        let delta = jac.clone().lu().solve(&rhs)?;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..12 {
            let mut trial = p;
            for i in 0..f {
                trial[i] += lambda * delta[i];
            }
            if let Ok((xn, jn)) = shoot(flow, y, &trial, t, s.flow_tol) {
                let rn = (xn - x).norm();
                if rn.is_finite() && rn < res {
                    p = trial;
                    xt = xn;
                    jac = jn;
                    res = rn;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (res <= s.tol).then_some((p, res))
}

fn seeds(flow: &Flow, x: &Vec3, y: &Vec3, t: f64, s: &ShootingSearch) -> Vec<Vec3> {
    let f = flow.dof();
    let prm = &flow.params;
    let a_y = flow.field.eval_unchecked(y).a * (prm.e / prm.c);
    let mut out = Vec::new();
    // straight-line guess
    let v = (x - y) / t;
    let beta2 = v.norm_squared() / (prm.c * prm.c);
    if beta2 < 1.0 {
        out.push(a_y + flow.branch.sign() * prm.m * v / (1.0 - beta2).sqrt());
    }
    let n = s.n_per_axis.max(1);
    let coord = |k: usize| if n == 1 { 0.0 } else { -s.p_extent + 2.0 * s.p_extent * k as f64 / (n - 1) as f64 };
    let total = n.pow(f as u32);
    for idx in 0..total {
        let mut p = a_y;
        let mut rem = idx;
        for i in 0..f {
            p[i] += coord(rem % n);
            rem /= n;
        }
        out.push(p);
    }
    out
}

/// Solves the two-point boundary problem `x(0) = y, x(t) = x` by damped
/// Newton shooting from a momentum grid. Returns every distinct root,
/// sorted by initial momentum.
pub fn find_connecting_orbits(
    x: &Vec3,
    y: &Vec3,
    t: f64,
    branch: Branch,
    config: &FieldConfig,
    params: &ParticleParams,
    search: &ShootingSearch,
) -> Result<Vec<ConnectingOrbit>, PropagatorError> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(PropagatorError::InvalidInput(format!("time must be positive, got {t}")));
    }
    if search.n_per_axis == 0 {
        return Err(PropagatorError::InvalidInput("empty seed grid".into()));
    }
    params.validate()?;
    config.validate().map_err(DynamicsError::from)?;
    let flow = Flow::new(config.clone(), *params, branch, search.mode);
    if search.mode == Mode::Planar && (x[2] != 0.0 || y[2] != 0.0) {
        return Err(PropagatorError::InvalidInput("planar endpoints need z = 0".into()));
    }
    let roots: Vec<(Vec3, f64)> = seeds(&flow, x, y, t, search)
        .into_par_iter()
        .filter_map(|seed| newton(&flow, x, y, t, seed, search))
        .collect();
    let mut roots = roots;
    roots.sort_by(|a, b| {
        a.0.iter().zip(b.0.iter()).map(|(u, v)| u.total_cmp(v)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut unique: Vec<(Vec3, f64)> = Vec::new();
    for r in roots {
        let dup = unique.iter().any(|u| (u.0 - r.0).norm() <= search.dedup_tol * u.0.norm().max(1.0));
        if !dup {
            unique.push(r);
        }
    }
    unique
        .into_iter()
        .map(|(p0, residual)| build_orbit(&flow, y, p0, t, residual, search.flow_tol))
        .collect()
}

/// Newton shooting from a single momentum seed; `None` if it does not converge.
#[allow(clippy::too_many_arguments)]
pub fn connect_from_seed(
    x: &Vec3,
    y: &Vec3,
    t: f64,
    branch: Branch,
    config: &FieldConfig,
    params: &ParticleParams,
    seed: Vec3,
    search: &ShootingSearch,
) -> Result<Option<ConnectingOrbit>, PropagatorError> {
    let flow = Flow::new(config.clone(), *params, branch, search.mode);
    match newton(&flow, x, y, t, seed, search) {
        Some((p0, res)) => build_orbit(&flow, y, p0, t, res, search.flow_tol).map(Some),
        None => Ok(None),
    }
}

pub(crate) fn build_orbit(flow: &Flow, y: &Vec3, p0: Vec3, t: f64, residual: f64, tol: f64) -> Result<ConnectingOrbit, PropagatorError> {
    let z0 = PhaseState { x: *y, p: p0 };
    let traj = flow.integrate(&z0, t, &FlowOptions::tol(tol).with_jacobian())?;
    let (d_vv, nu) = van_vleck_and_morse_traj(&traj)?;
    let holonomy = transport_spin(&traj, &SpinOptions::default())?.final_frame().d;
    let zt = traj.final_state();
    let frame0 = eigenframe(&flow.kinetic(&z0), &flow.params).for_branch(flow.branch).to_owned();
    let frame_t = eigenframe(&flow.kinetic(&zt), &flow.params).for_branch(flow.branch).to_owned();
    Ok(ConnectingOrbit {
        branch: flow.branch,
        r: traj.principal_at(t),
        traj,
        p0,
        d_vv,
        nu,
        holonomy,
        frame0,
        frame_t,
        residual,
    })
}

/// `R = int_0^t (p . xdot - H) dt` along the orbit.
pub fn principal_function(orbit: &ConnectingOrbit) -> f64 {
    orbit.traj.principal_at(orbit.t())
}

/// Van Vleck amplitude and Morse index of a connecting orbit.
pub fn van_vleck_and_morse(orbit: &ConnectingOrbit) -> Result<(f64, u32), PropagatorError> {
    van_vleck_and_morse_traj(&orbit.traj)
}

/// Singular-value ratio below which `dx_t/dp_0` is treated as singular.
pub const CAUSTIC_RATIO: f64 = 1e-9;

fn van_vleck_and_morse_traj(traj: &Trajectory) -> Result<(f64, u32), PropagatorError> {
    let t = traj.t_final();
    let j = traj.final_jacobian().ok_or_else(|| PropagatorError::InvalidInput("trajectory lacks the flow Jacobian".into()))?;
    let x = dx_dp0(&j);
    let sv = x.clone().svd(false, false).singular_values;
    let ratio = sv.min() / sv.max();
    if !(ratio > CAUSTIC_RATIO) {
        return Err(PropagatorError::Caustic { t, ratio });
    }
    let d = 1.0 / x.determinant().abs().sqrt();
    Ok((d, morse_index(traj)?))
}

/// Eigenphases of `W = (X + iP)(X - iP)^-1`, `X = dx/dp0`, `P = dp/dp0`.
/// `W` has an eigenvalue `-1` exactly where `X` is singular.
pub fn lagrangian_eigenphases(j: &DMatrix<f64>) -> Vec<f64> {
    let b = JacobianBlocks::split(j);
    let f = b.dx_dp0.nrows();
    let u = DMatrix::<Complex64>::from_fn(f, f, |r, c| Complex::new(b.dx_dp0[(r, c)], b.dp_dp0[(r, c)]));
    let ubar = u.map(|z| z.conj());
    let w = u * ubar.try_inverse().expect("X - iP is invertible for a Lagrangian frame");
    let ev = w.schur().eigenvalues().expect("complex Schur form is triangular");
    ev.iter().map(|z| z.arg()).collect()
}

fn circ(a: f64, b: f64) -> f64 {
    let d = (b - a).rem_euclid(2.0 * PI);
    if d > PI {
        d - 2.0 * PI
    } else {
        d
    }
}

/// Continues unwrapped eigenphase tracks to the new principal values,
/// choosing the assignment with the smallest total move. Returns the
/// largest single move.
fn advance_tracks(tracks: &mut [f64], new: &[f64]) -> f64 {
    let f = tracks.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    permutations(f, &mut |perm| {
        let cost: f64 = (0..f).map(|k| circ(tracks[k], new[perm[k]]).abs()).sum();
        if best.as_ref().is_none_or(|b| cost < b.0) {
            best = Some((cost, perm.to_vec()));
        }
    });
    let perm = best.expect("at least one permutation").1;
    let mut max_move: f64 = 0.0;
    for k in 0..f {
        let step = circ(tracks[k], new[perm[k]]);
        max_move = max_move.max(step.abs());
        tracks[k] += step;
    }
    max_move
}

fn permutations(n: usize, visit: &mut dyn FnMut(&[usize])) {
    fn rec(k: usize, p: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
        if k == p.len() {
            visit(p);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            rec(k + 1, p, visit);
            p.swap(k, i);
        }
    }
    rec(0, &mut (0..n).collect(), visit);
}

const MAX_PHASE_STEP: f64 = PI / 6.0;

/// Number of conjugate points in `(0, t)`, with multiplicity, from the
/// winding of the Lagrangian eigenphases through `pi`.
pub fn morse_index(traj: &Trajectory) -> Result<u32, PropagatorError> {
    if !traj.has_dense() || traj.jacobians.is_none() {
        return Err(PropagatorError::InvalidInput("Morse index needs a dense linearised trajectory".into()));
    }
    let t_end = traj.t_final();
    let mut grid: Vec<f64> = traj.samples.iter().map(|s| s.0).filter(|&s| s > 0.0).collect();
    if grid.last() != Some(&t_end) {
        grid.push(t_end);
    }
    let mut tau = (t_end * 1e-7).min(grid[0] * 1e-3);
    let mut tracks = lagrangian_eigenphases(&traj.jacobian_at(tau).unwrap());
    let start = tracks.clone();
    let mut next = 0;
    while tau < t_end {
        while grid[next] <= tau {
            next += 1;
        }
        let mut target = grid[next].min(tau * 8.0);
        loop {
            let phases = lagrangian_eigenphases(&traj.jacobian_at(target).unwrap());
            let mut trial = tracks.clone();
            let moved = advance_tracks(&mut trial, &phases);
            if moved <= MAX_PHASE_STEP || target - tau < 1e-12 * t_end {
                tracks = trial;
                tau = target;
                break;
            }
            target = 0.5 * (tau + target);
        }
    }
    let mut nu = 0;
    for (a, b) in start.iter().zip(&tracks) {
        let (lo, hi) = if a < b { (*a, *b) } else { (*b, *a) };
        // odd multiples of pi strictly inside (lo, hi)
        let first = ((lo / PI - 1.0) / 2.0).floor() as i64 + 1;
        let last = ((hi / PI - 1.0) / 2.0).ceil() as i64 - 1;
        nu += (last - first + 1).max(0) as u32;
    }
    Ok(nu)
}

/// One orbit's share of the kernel.
#[derive(Debug, Clone)]
pub struct KernelContribution {
    pub branch: Branch,
    pub r: f64,
    pub d_vv: f64,
    pub nu: u32,
    pub theta: f64,
    pub eta: f64,
    pub matrix: Matrix4<Complex64>,
}

#[derive(Debug, Clone)]
pub struct KernelValue {
    pub matrix: Matrix4<Complex64>,
    pub contributions: Vec<KernelContribution>,
}

/// `(2 pi i hbar)^(-f/2)`.
pub fn kernel_prefactor(hbar: f64, f: usize) -> Complex64 {
    let fh = f as f64 / 2.0;
    Complex64::from_polar((2.0 * PI * hbar).powf(-fh), -PI * fh / 2.0)
}

/// Orbit term `V_t d V_0^+ D exp(i R / hbar - i pi nu / 2)` without the prefactor.
pub fn orbit_term(orbit: &ConnectingOrbit, hbar: f64) -> Matrix4<Complex64> {
    let phase = Complex64::from_polar(orbit.d_vv, orbit.r / hbar - PI * orbit.nu as f64 / 2.0);
    orbit.frame_t * orbit.holonomy * orbit.frame0.adjoint() * phase
}

/// Leading-order kernel `K(x, y, t)`, summed over both branches.
pub fn semiclassical_kernel(
    x: &Vec3,
    y: &Vec3,
    t: f64,
    config: &FieldConfig,
    params: &ParticleParams,
    search: &ShootingSearch,
) -> Result<KernelValue, PropagatorError> {
    let pref = kernel_prefactor(params.hbar, search.mode.dof());
    let mut matrix = Matrix4::zeros();
    let mut contributions = Vec::new();
    for branch in [Branch::Plus, Branch::Minus] {
        for orbit in find_connecting_orbits(x, y, t, branch, config, params, search)? {
            let term = orbit_term(&orbit, params.hbar) * pref;
            let (theta, eta) = crate::spin::holonomy_angles(&orbit.holonomy);
            matrix += term;
            contributions.push(KernelContribution {
                branch,
                r: orbit.r,
                d_vv: orbit.d_vv,
                nu: orbit.nu,
                theta,
                eta,
                matrix: term,
            });
        }
    }
    Ok(KernelValue { matrix, contributions })
}
