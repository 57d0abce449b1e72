//! Periodic orbits at fixed energy and the invariants entering the trace
//! formula: action, periods, reduced monodromy, Maslov index and spin
//! holonomy.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::f64::consts::PI;
use thiserror::Error;

use crate::dynamics::{Branch, DynamicsError, Flow, FlowOptions, JacobianBlocks, Mode, ParticleParams, PhaseState, Trajectory};
use crate::fields::{FieldConfig, Vec3};
use crate::propagator::{lagrangian_eigenphases, morse_index, PropagatorError};
use crate::spin::{holonomy_angles, spin_trace_factor, transport_spin, SpinError, SpinOptions, Su2};

#[derive(Debug, Error)]
pub enum OrbitError {
    #[error("orbit does not close: residual {0:e}")]
    NotClosed(f64),
    #[error("energy {energy} is not classically allowed on the {branch} branch")]
    ForbiddenEnergy { energy: f64, branch: &'static str },
    #[error("no start point along the orbit avoids a conjugate endpoint")]
    NoRegularStart,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Propagator(#[from] PropagatorError),
    #[error(transparent)]
    Spin(#[from] SpinError),
}

/// Multi-start settings for [`find_periodic_orbits`].
#[derive(Debug, Clone)]
pub struct OrbitSearch {
    pub mode: Mode,
    /// Random start points on the energy shell.
    pub n_random: usize,
    /// Brake-orbit seeds on the zero-velocity curve (planar, B = 0 only).
    pub n_brake: usize,
    /// Integration horizon for recurrence scanning.
    pub horizon: f64,
    /// Half-width of the configuration box used for random seeds.
    pub region: f64,
    /// Near-returns closer than this (phase-space norm) seed Newton.
    pub recurrence_tol: f64,
    pub newton_tol: f64,
    pub flow_tol: f64,
    /// Repetitions are enumerated up to this total period.
    pub t_max: f64,
    pub isolation_tol: f64,
    pub rng_seed: u64,
}

impl Default for OrbitSearch {
    fn default() -> Self {
        Self {
            mode: Mode::Planar,
            n_random: 40,
            n_brake: 24,
            horizon: 10.0,
            region: 3.0,
            recurrence_tol: 0.3,
            newton_tol: 1e-10,
            flow_tol: 1e-12,
            t_max: 10.0,
            isolation_tol: 1e-6,
            rng_seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PeriodicOrbit {
    pub branch: Branch,
    pub energy: f64,
    pub period: f64,
    pub primitive_period: f64,
    pub repetition: u32,
    /// Start point of the primitive orbit.
    pub start: PhaseState,
    pub action: f64,
    /// Reduced (transverse) monodromy, `(2f - 2) x (2f - 2)`.
    pub monodromy: DMatrix<f64>,
    pub det_m_minus_i: f64,
    pub mu: i32,
    /// Conjugate points along the closed orbit (diagnostic).
    pub nu: u32,
    pub holonomy: Su2,
    pub theta: f64,
    pub eta: f64,
    pub spin_factor: f64,
    pub stable: bool,
    pub isolated: bool,
}

impl PeriodicOrbit {
    /// `1 / sqrt|det(M - 1)|`.
    pub fn stability_weight(&self) -> f64 {
        1.0 / self.det_m_minus_i.abs().sqrt()
    }
}

fn to_vec(z: &PhaseState, f: usize) -> DVector<f64> {
    DVector::from_iterator(2 * f, (0..f).map(|i| z.x[i]).chain((0..f).map(|i| z.p[i])))
}

fn from_vec(v: &DVector<f64>, f: usize) -> PhaseState {
    let mut z = PhaseState { x: Vec3::zeros(), p: Vec3::zeros() };
    for i in 0..f {
        z.x[i] = v[i];
        z.p[i] = v[f + i];
    }
    z
}

/// Phase-space flow vector `(xdot, pdot)`.
pub fn flow_vector(flow: &Flow, z: &PhaseState) -> DVector<f64> {
    let f = flow.dof();
    let (xd, pd) = flow.velocity(z);
    DVector::from_iterator(2 * f, (0..f).map(|i| xd[i]).chain((0..f).map(|i| pd[i])))
}

/// `grad H = (dH/dx, dH/dp) = (-pdot, xdot)`.
pub fn energy_gradient(flow: &Flow, z: &PhaseState) -> DVector<f64> {
    let f = flow.dof();
    let (xd, pd) = flow.velocity(z);
    DVector::from_iterator(2 * f, (0..f).map(|i| -pd[i]).chain((0..f).map(|i| xd[i])))
}

fn propagate(flow: &Flow, z: &PhaseState, t: f64, tol: f64, jac: bool) -> Result<Trajectory, DynamicsError> {
    let mut o = FlowOptions::tol(tol).endpoint_only();
    o.with_jacobian = jac;
    flow.integrate(z, t, &o)
}

/// Newton refinement of a periodic orbit on the energy shell `H = energy`,
/// with the section through the seed orthogonal to the seed's flow vector.
/// Returns the refined start point and period.
pub fn refine_periodic_orbit(
    flow: &Flow,
    seed: &PhaseState,
    t_guess: f64,
    energy: f64,
    tol: f64,
    flow_tol: f64,
) -> Option<(PhaseState, f64)> {
    let f = flow.dof();
    let n = 2 * f;
    let z_ref = to_vec(seed, f);
    let normal = flow_vector(flow, seed);
    let mut u = z_ref.clone();
    let mut period = t_guess;
    let residual = |u: &DVector<f64>, period: f64| -> Option<(DVector<f64>, DMatrix<f64>, f64)> {
        let z = from_vec(u, f);
        let tr = propagate(flow, &z, period, flow_tol, true).ok()?;
        let zt = to_vec(&tr.final_state(), f);
        let mut r = DVector::zeros(n + 2);
        r.rows_mut(0, n).copy_from(&(&zt - u));
        r[n] = flow.hamiltonian(&z) - energy;
        r[n + 1] = normal.dot(&(u - &z_ref));
        let closure = (&zt - u).norm();
        let jt = tr.final_jacobian()?;
        let mut jm = DMatrix::zeros(n + 2, n + 1);
        jm.view_mut((0, 0), (n, n)).copy_from(&(jt - DMatrix::identity(n, n)));
        jm.view_mut((0, n), (n, 1)).copy_from(&flow_vector(flow, &tr.final_state()));
        jm.view_mut((n, 0), (1, n)).copy_from(&energy_gradient(flow, &z).transpose());
        jm.view_mut((n + 1, 0), (1, n)).copy_from(&normal.transpose());
        r.iter().all(|v| v.is_finite()).then_some((r, jm, closure))
    };
    let (mut r, mut jm, mut closure) = residual(&u, period)?;
    for _ in 0..40 {
        if closure <= tol && r[n].abs() <= tol * energy.abs().max(1.0) {
            return Some((from_vec(&u, f), period));
        }
        let svd = jm.clone().svd(true, true);
        let cut = svd.singular_values.max() * 1e-12;
        let step = svd.solve(&(-&r), cut).ok()?;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..10 {
            let un = &u + lambda * step.rows(0, n);
            let tn = period + lambda * step[n];
            if tn > 0.0 {
                if let Some((rn, jn, cn)) = residual(&un, tn) {
                    if rn.norm() < r.norm() {
                        u = un;
                        period = tn;
                        r = rn;
                        jm = jn;
                        closure = cn;
                        accepted = true;
                        break;
                    }
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (closure <= tol && r[n].abs() <= tol * energy.abs().max(1.0)).then_some((from_vec(&u, f), period))
}

/// Symplectic basis `(e_1..e_k, f_1..f_k)` of the transverse space
/// `{a : a . v = 0, a . grad H = 0}`.
fn transverse_basis(v: &DVector<f64>, g: &DVector<f64>) -> Vec<DVector<f64>> {
    let n = v.len();
    let f = n / 2;
    let mut ortho: Vec<DVector<f64>> = vec![v.normalize()];
    let g_perp = g - ortho[0].dot(g) * &ortho[0];
    ortho.push(g_perp.normalize());
    let mut cands = Vec::new();
    for i in 0..n {
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        for o in &ortho {
            e -= o.dot(&e) * o;
        }
        cands.push(e);
    }
    // orthonormal basis of the transverse space
    let mut trans: Vec<DVector<f64>> = Vec::new();
    cands.sort_by(|a, b| b.norm().total_cmp(&a.norm()));
    for mut c in cands {
        for o in ortho.iter().chain(trans.iter()) {
            c -= o.dot(&c) * o;
        }
        if c.norm() > 1e-8 && trans.len() < n - 2 {
            trans.push(c.normalize());
        }
    }
    let omega = |a: &DVector<f64>, b: &DVector<f64>| (0..f).map(|i| a[i] * b[f + i] - a[f + i] * b[i]).sum::<f64>();
    // symplectic Gram-Schmidt
    let mut es = Vec::new();
    let mut fs = Vec::new();
    let mut pool = trans;
    while !pool.is_empty() {
        let e = pool.remove(0);
        let (k, _) = pool
            .iter()
            .enumerate()
            .map(|(k, b)| (k, omega(&e, b).abs()))
            .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        let mut fv = pool.remove(k);
        let w = omega(&e, &fv);
        fv /= w;
        for b in pool.iter_mut() {
            let a1 = omega(b, &fv);
            let a2 = omega(&e, b);
            *b -= a1 * &e;
            *b -= a2 * &fv;
        }
        es.push(e);
        fs.push(fv);
    }
    es.into_iter().chain(fs).collect()
}

/// Reduced monodromy of the closed orbit through `z0`, given the full flow
/// Jacobian `j` over one period.
pub fn reduced_monodromy(flow: &Flow, z0: &PhaseState, j: &DMatrix<f64>) -> DMatrix<f64> {
    let f = flow.dof();
    let v = flow_vector(flow, z0);
    let g = energy_gradient(flow, z0);
    let basis = transverse_basis(&v, &g);
    let k = f - 1;
    let omega = |a: &DVector<f64>, b: &DVector<f64>| (0..f).map(|i| a[i] * b[f + i] - a[f + i] * b[i]).sum::<f64>();
    let vn = v.normalize();
    let gn = (&g - vn.dot(&g) * &vn).normalize();
    let mut m = DMatrix::zeros(2 * k, 2 * k);
    for (col, b) in basis.iter().enumerate() {
        let mut a = j * b;
        a -= vn.dot(&a) * &vn;
        a -= gn.dot(&a) * &gn;
        for i in 0..k {
            // a = sum c_i e_i + d_i f_i: c_i = omega(a, f_i), d_i = omega(e_i, a)
            m[(i, col)] = omega(&a, &basis[k + i]);
            m[(k + i, col)] = omega(&basis[i], &a);
        }
    }
    m
}

/// `max |M^T Omega M - Omega|`.
pub fn monodromy_symplectic_defect(m: &DMatrix<f64>) -> f64 {
    crate::dynamics::symplectic_defect(m)
}

/// Basic invariants of a closed orbit.
#[derive(Debug, Clone)]
pub struct OrbitInvariants {
    pub action: f64,
    pub period: f64,
    pub primitive_period: f64,
    pub monodromy: DMatrix<f64>,
    pub det_m_minus_i: f64,
    pub mu: i32,
    pub nu: u32,
}

fn closure_residual(flow: &Flow, z0: &PhaseState, t: f64, tol: f64) -> Result<f64, DynamicsError> {
    let tr = propagate(flow, z0, t, tol, false)?;
    Ok(tr.final_state().distance(z0))
}

/// Smallest `T/k` (k <= 12) at which the orbit already closes.
pub fn primitive_period(flow: &Flow, z0: &PhaseState, period: f64, tol: f64) -> Result<f64, DynamicsError> {
    let tr = flow.integrate(z0, period, &FlowOptions::tol(tol))?;
    for k in (2..=12).rev() {
        let zk = tr.state_at(period / k as f64);
        if zk.distance(z0) < 1e-6 {
            return Ok(period / k as f64);
        }
    }
    Ok(period)
}

/// Conjugate-point count plus the stationary-phase correction over the
/// transverse position and time, `mu = nu + (f - sgn Hess) / 2`.
fn maslov_at(flow: &Flow, traj: &Trajectory) -> Result<(i32, u32), OrbitError> {
    let f = flow.dof();
    let nu = morse_index(traj)?;
    let z0 = traj.initial_state();
    let j = traj.final_jacobian().expect("linearised trajectory");
    let b = JacobianBlocks::split(&j);
    let binv = b.dx_dp0.clone().try_inverse().ok_or(OrbitError::NoRegularStart)?;
    let (xd, pd) = flow.velocity(&z0);
    let xdot = DVector::from_iterator(f, (0..f).map(|i| xd[i]));
    let grad_x = DVector::from_iterator(f, (0..f).map(|i| -pd[i]));
    let r = &b.dp_dp0 * &binv - binv.transpose() - &binv + &binv * &b.dx_dx0;
    let g = grad_x + (&binv - &binv * &b.dx_dx0).transpose() * &xdot;
    let htt = xdot.dot(&(&binv * &xdot));
    let mut full = DMatrix::zeros(f + 1, f + 1);
    full.view_mut((0, 0), (f, f)).copy_from(&r);
    for i in 0..f {
        full[(i, f)] = -g[i];
        full[(f, i)] = -g[i];
    }
    full[(f, f)] = htt;
    let full = 0.5 * (&full + full.transpose());
    // basis: directions orthogonal to xdot in x, plus t
    let xn = xdot.normalize();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for i in 0..f {
        let mut e = DVector::zeros(f);
        e[i] = 1.0;
        e -= xn.dot(&e) * &xn;
        for o in &basis {
            let o3 = o.rows(0, f).into_owned();
            e -= o3.dot(&e) * o3;
        }
        if e.norm() > 1e-6 && basis.len() < f - 1 {
            let e = e.normalize();
            basis.push(DVector::from_iterator(f + 1, e.iter().copied().chain(std::iter::once(0.0))));
        }
    }
    let mut et = DVector::zeros(f + 1);
    et[f] = 1.0;
    basis.push(et);
    let nb = DMatrix::from_columns(&basis);
    let h = nb.transpose() * full * &nb;
    let scale = h.amax();
    let ev = h.symmetric_eigenvalues();
    let pos = ev.iter().filter(|&&e| e > 1e-10 * scale).count() as i32;
    let neg = ev.iter().filter(|&&e| e < -1e-10 * scale).count() as i32;
    let sgn = pos - neg;
    let twice = nu as i32 * 2 + f as i32 - sgn;
    Ok((twice / 2, nu))
}

/// Action, periods, reduced monodromy and Maslov index of the closed orbit
/// through `z0` with period `period`.
pub fn orbit_invariants(flow: &Flow, z0: &PhaseState, period: f64, tol: f64) -> Result<OrbitInvariants, OrbitError> {
    let res = closure_residual(flow, z0, period, tol)?;
    if res > 1e-8 {
        return Err(OrbitError::NotClosed(res));
    }
    let primitive = primitive_period(flow, z0, period, tol)?;
    let tr = flow.integrate(z0, period, &FlowOptions::tol(tol).with_jacobian())?;
    let action = tr.p_dx_at(period);
    let j = tr.final_jacobian().unwrap();
    let m = reduced_monodromy(flow, z0, &j);
    let det = (&m - DMatrix::identity(m.nrows(), m.ncols())).determinant();
    let (mu, nu) = maslov_for_period(flow, &tr, period, tol)?;
    Ok(OrbitInvariants { action, period, primitive_period: primitive, monodromy: m, det_m_minus_i: det, mu, nu })
}

/// Picks the start point along the orbit with the best-conditioned
/// `dx_T/dp_0` and evaluates the Maslov index there.
fn maslov_for_period(flow: &Flow, base: &Trajectory, period: f64, tol: f64) -> Result<(i32, u32), OrbitError> {
    let mut best: Option<(f64, PhaseState)> = None;
    for k in 0..9 {
        let s = period * (k as f64 + 0.137) / 9.0;
        let z = base.state_at(s);
        let tr = propagate(flow, &z, period, tol, true)?;
        // distance of the Lagrangian eigenphases from pi: scale-free conjugacy measure
        let margin = lagrangian_eigenphases(&tr.final_jacobian().unwrap())
            .iter()
            .map(|th| (th.abs() - PI).abs())
            .fold(f64::INFINITY, f64::min);
        if best.as_ref().is_none_or(|b| margin > b.0) {
            best = Some((margin, z));
        }
    }
    let (margin, z) = best.unwrap();
    if margin < 1e-6 {
        return Err(OrbitError::NoRegularStart);
    }
    let tr = flow.integrate(&z, period, &FlowOptions::tol(tol).with_jacobian())?;
    maslov_at(flow, &tr)
}

/// Spin holonomy over one traversal.
#[derive(Debug, Clone, Copy)]
pub struct SpinHolonomy {
    pub d: Su2,
    pub theta: f64,
    pub eta: f64,
    pub factor: f64,
}

/// Transports `d` over `[0, period]` from the identity.
pub fn orbit_spin_holonomy(flow: &Flow, z0: &PhaseState, period: f64, tol: f64) -> Result<SpinHolonomy, OrbitError> {
    let tr = flow.integrate(z0, period, &FlowOptions::tol(tol))?;
    let h = transport_spin(&tr, &SpinOptions::default())?;
    let fr = h.final_frame();
    let theta = fr.theta;
    let eta = h.track.points.last().unwrap().eta();
    Ok(SpinHolonomy { d: fr.d, theta, eta, factor: spin_trace_factor(&fr.d) })
}

/// `2 cos(theta/2) cos(eta)`.
pub fn factor_from_angles(theta: f64, eta: f64) -> f64 {
    2.0 * (theta / 2.0).cos() * eta.cos()
}

fn mat_pow(m: &DMatrix<f64>, r: u32) -> DMatrix<f64> {
    let mut out = DMatrix::identity(m.nrows(), m.ncols());
    for _ in 0..r {
        out = &out * m;
    }
    out
}

fn su2_pow(d: &Su2, r: u32) -> Su2 {
    let mut out = Su2::identity();
    for _ in 0..r {
        out *= d;
    }
    out
}

/// Assembles the primitive orbit and its repetitions up to `t_max`.
pub fn build_orbit_family(
    flow: &Flow,
    z0: &PhaseState,
    primitive: f64,
    energy: f64,
    t_max: f64,
    isolation_tol: f64,
    tol: f64,
) -> Result<Vec<PeriodicOrbit>, OrbitError> {
    let inv = orbit_invariants(flow, z0, primitive, tol)?;
    let spin = orbit_spin_holonomy(flow, z0, primitive, tol)?;
    let n_rep = ((t_max / primitive).floor() as u32).max(1);
    let mut out = Vec::new();
    for r in 1..=n_rep {
        let (m, mu, nu, action) = if r == 1 {
            (inv.monodromy.clone(), inv.mu, inv.nu, inv.action)
        } else {
            let period = primitive * r as f64;
            let tr = flow.integrate(z0, period, &FlowOptions::tol(tol).with_jacobian())?;
            let (mu, nu) = maslov_for_period(flow, &tr, period, tol)?;
            (mat_pow(&inv.monodromy, r), mu, nu, inv.action * r as f64)
        };
        let k = m.nrows();
        let det = (&m - DMatrix::identity(k, k)).determinant();
        let stable = m.complex_eigenvalues().iter().all(|z| (z.norm() - 1.0).abs() < 1e-6);
        let d = su2_pow(&spin.d, r);
        let (theta, _) = holonomy_angles(&d);
        let eta = if r == 1 { spin.eta } else { d[(0, 0)].arg() };
        out.push(PeriodicOrbit {
            branch: flow.branch,
            energy,
            period: primitive * r as f64,
            primitive_period: primitive,
            repetition: r,
            start: *z0,
            action,
            monodromy: m,
            det_m_minus_i: det,
            mu,
            nu,
            holonomy: d,
            theta,
            eta,
            spin_factor: spin_trace_factor(&d),
            stable,
            isolated: det.abs() > isolation_tol,
        });
    }
    Ok(out)
}

/// Kinetic momentum magnitude on the shell `H = E` at position `x`.
fn shell_momentum(flow: &Flow, x: &Vec3, energy: f64) -> Option<f64> {
    let prm = &flow.params;
    let em = flow.field.eval_unchecked(x);
    let eps = flow.branch.sign() * (energy - prm.e * em.phi);
    let mc2 = prm.rest_energy();
    (eps >= mc2).then(|| (eps * eps - mc2 * mc2).sqrt() / prm.c)
}

fn canonical(flow: &Flow, x: &Vec3, pi: Vec3) -> Vec3 {
    let prm = &flow.params;
    pi + flow.field.eval_unchecked(x).a * (prm.e / prm.c)
}

/// Near-returns `(z(t_k), t_k)` of a trajectory to its start point.
fn recurrences(flow: &Flow, z0: &PhaseState, horizon: f64, tol: f64, flow_tol: f64) -> Vec<f64> {
    let Ok(tr) = flow.integrate(z0, horizon, &FlowOptions::tol(flow_tol.max(1e-9))) else {
        return Vec::new();
    };
    let n = 4000;
    let dist: Vec<f64> = (0..=n).map(|k| tr.state_at(horizon * k as f64 / n as f64).distance(z0)).collect();
    let mut out = Vec::new();
    for k in 1..n {
        if dist[k] < tol && dist[k] <= dist[k - 1] && dist[k] <= dist[k + 1] && k > n / 200 {
            out.push(horizon * k as f64 / n as f64);
        }
    }
    out
}

/// Times where the kinetic momentum of a trajectory has a local minimum
/// below `tol` (returns to the zero-velocity curve).
fn brake_returns(flow: &Flow, z0: &PhaseState, horizon: f64, tol: f64) -> Vec<f64> {
    let Ok(tr) = flow.integrate(z0, horizon, &FlowOptions::tol(1e-10)) else {
        return Vec::new();
    };
    let n = 4000;
    let pis: Vec<f64> = (0..=n).map(|k| flow.kinetic(&tr.state_at(horizon * k as f64 / n as f64)).pi.norm()).collect();
    let mut out = Vec::new();
    for k in 1..n {
        if pis[k] < tol && pis[k] <= pis[k - 1] && pis[k] <= pis[k + 1] && k > n / 200 {
            out.push(2.0 * horizon * k as f64 / n as f64);
        }
    }
    out
}

fn same_orbit(flow: &Flow, a: &(PhaseState, f64), b: &(PhaseState, f64), tol: f64) -> bool {
    if (a.1 - b.1).abs() > 1e-6 * a.1 {
        return false;
    }
    let Ok(tr) = flow.integrate(&a.0, a.1, &FlowOptions::tol(tol)) else {
        return false;
    };
    let n = 2000;
    let dist = |t: f64| tr.state_at(t).distance(&b.0);
    let (mut kbest, mut dbest) = (0, f64::INFINITY);
    for k in 0..=n {
        let d = dist(a.1 * k as f64 / n as f64);
        if d < dbest {
            dbest = d;
            kbest = k;
        }
    }
    if dbest > 1e-2 {
        return false;
    }
    // golden-section refinement around the best sample
    let h = a.1 / n as f64;
    let (mut lo, mut hi) = (((kbest as f64) - 1.0) * h, ((kbest as f64) + 1.0) * h);
    lo = lo.max(0.0);
    hi = hi.min(a.1);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..60 {
        let m1 = hi - g * (hi - lo);
        let m2 = lo + g * (hi - lo);
        if dist(m1) < dist(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    dist(0.5 * (lo + hi)) < 1e-6
}

/// Result of a periodic-orbit search.
#[derive(Debug, Clone, Default)]
pub struct OrbitSet {
    /// Orbits and repetitions, sorted by period.
    pub orbits: Vec<PeriodicOrbit>,
    /// Converged candidates whose invariants could not be evaluated
    /// (primitive period, reason).
    pub rejected: Vec<(f64, String)>,
}

/// Periodic orbits of energy `energy` found from brake-orbit and random
/// shell seeds, refined by Newton, deduplicated geometrically and expanded
/// into repetitions up to `search.t_max`. Sorted by period.
pub fn find_periodic_orbits(
    energy: f64,
    branch: Branch,
    config: &FieldConfig,
    params: &ParticleParams,
    search: &OrbitSearch,
) -> Result<OrbitSet, OrbitError> {
    params.validate()?;
    config.validate().map_err(DynamicsError::from)?;
    let flow = Flow::new(config.clone(), *params, branch, search.mode);
    let f = flow.dof();
    let mut rng = ChaCha8Rng::seed_from_u64(search.rng_seed);
    let mut candidates: Vec<(PhaseState, f64)> = Vec::new();
    if search.n_brake > 0 && search.mode == Mode::Planar && config.is_magnetic_free() {
        for k in 0..search.n_brake {
            let ang = 2.0 * PI * k as f64 / search.n_brake as f64;
            let dir = Vec3::new(ang.cos(), ang.sin(), 0.0);
            if let Some(x) = zero_velocity_point(&flow, &dir, energy, search.region) {
                let z0 = PhaseState { x, p: canonical(&flow, &x, Vec3::zeros()) };
                for t in brake_returns(&flow, &z0, 0.5 * search.horizon, 0.05 * shell_scale(&flow, energy)) {
                    candidates.push((z0, t));
                }
            }
        }
    }
    let mut tries = 0;
    let mut random_seeds = Vec::new();
    while random_seeds.len() < search.n_random && tries < 100 * search.n_random.max(1) {
        tries += 1;
        let mut x = Vec3::zeros();
        for i in 0..f {
            x[i] = rng.gen_range(-search.region..search.region);
        }
        let Some(pmag) = shell_momentum(&flow, &x, energy) else { continue };
        let mut dir = Vec3::zeros();
        for i in 0..f {
            dir[i] = rng.gen_range(-1.0..1.0);
        }
        if dir.norm() < 1e-3 {
            continue;
        }
        let pi = dir.normalize() * pmag;
        random_seeds.push(PhaseState { x, p: canonical(&flow, &x, pi) });
    }
    for z0 in random_seeds {
        for t in recurrences(&flow, &z0, search.horizon, search.recurrence_tol, search.flow_tol) {
            candidates.push((z0, t));
        }
    }
    let refined: Vec<(PhaseState, f64)> = candidates
        .par_iter()
        .filter_map(|(z, t)| {
            refine_periodic_orbit(&flow, z, *t, energy, search.newton_tol, search.flow_tol).filter(|r| r.1 > 0.1 * t)
        })
        .filter_map(|(z, t)| primitive_period(&flow, &z, t, search.flow_tol).ok().map(|tp| (z, tp)))
        .filter(|(_, t)| *t <= search.t_max)
        .collect();
    let mut refined = refined;
    refined.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut unique: Vec<(PhaseState, f64)> = Vec::new();
    for c in refined {
        if !unique.iter().any(|u| same_orbit(&flow, u, &c, search.flow_tol)) {
            unique.push(c);
        }
    }
    let families: Vec<Result<Vec<PeriodicOrbit>, OrbitError>> = unique
        .par_iter()
        .map(|(z, t)| build_orbit_family(&flow, z, *t, energy, search.t_max, search.isolation_tol, search.flow_tol))
        .collect();
    let mut orbits = Vec::new();
    let mut rejected = Vec::new();
    for (fam, u) in families.into_iter().zip(&unique) {
        match fam {
            Ok(f) => orbits.extend(f),
            Err(e) => rejected.push((u.1, e.to_string())),
        }
    }
    orbits.sort_by(|a, b| a.period.total_cmp(&b.period));
    Ok(OrbitSet { orbits, rejected })
}

fn shell_scale(flow: &Flow, energy: f64) -> f64 {
    let mc2 = flow.params.rest_energy();
    ((energy.abs() - mc2).abs().max(1e-3) * energy.abs()).sqrt() / flow.params.c
}

/// Point on the ray `t dir` where the kinetic momentum on the shell vanishes.
fn zero_velocity_point(flow: &Flow, dir: &Vec3, energy: f64, r_max: f64) -> Option<Vec3> {
    let allowed = |r: f64| shell_momentum(flow, &(dir * r), energy).is_some();
    if !allowed(0.0) || allowed(r_max) {
        return None;
    }
    let (mut lo, mut hi) = (0.0, r_max);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if allowed(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(dir * lo)
}

/// Continues a periodic orbit to a nearby energy by Newton from the old
/// orbit, with the start point shifted along the energy gradient.
pub fn continue_in_energy(
    orbit: &PeriodicOrbit,
    config: &FieldConfig,
    params: &ParticleParams,
    mode: Mode,
    energy: f64,
    tol: f64,
) -> Option<(PhaseState, f64)> {
    let flow = Flow::new(config.clone(), *params, orbit.branch, mode);
    let f = flow.dof();
    let g = energy_gradient(&flow, &orbit.start);
    let de = energy - flow.hamiltonian(&orbit.start);
    let shifted = to_vec(&orbit.start, f) + g.clone() * (de / g.norm_squared());
    refine_periodic_orbit(&flow, &from_vec(&shifted, f), orbit.primitive_period, energy, tol, 1e-12)
}

/// `(E, S(E), T(E))` along a continued family of the primitive orbit.
pub fn action_energy_scan(
    orbit: &PeriodicOrbit,
    config: &FieldConfig,
    params: &ParticleParams,
    mode: Mode,
    energies: &[f64],
) -> Result<Vec<(f64, f64, f64)>, OrbitError> {
    let flow = Flow::new(config.clone(), *params, orbit.branch, mode);
    energies
        .iter()
        .map(|&e| {
            let (z, t) = continue_in_energy(orbit, config, params, mode, e, 1e-11).ok_or(OrbitError::NotClosed(f64::NAN))?;
            let tr = flow.integrate(&z, t, &FlowOptions::tol(1e-12).endpoint_only())?;
            Ok((e, tr.p_dx_at(t), t))
        })
        .collect()
}

/// Checks that the energy is reachable at the origin for the branch.
pub fn check_energy(energy: f64, branch: Branch, config: &FieldConfig, params: &ParticleParams) -> Result<(), OrbitError> {
    let flow = Flow::new(config.clone(), *params, branch, Mode::Planar);
    if shell_momentum(&flow, &Vec3::zeros(), energy).is_none() {
        return Err(OrbitError::ForbiddenEnergy { energy, branch: branch.label() });
    }
    Ok(())
}
