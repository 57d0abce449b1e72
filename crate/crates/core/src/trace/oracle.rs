//! Direct time-domain trace oracle.
//!
//! Evaluates `(1/2pi) int rho_hat(t) e^{iEt/hbar} int tr K_sc(x, x, t) d^f x dt`
//! by quadrature, with the kernel restricted to the closed orbits continued
//! from given periodic orbits. At each time `t` the tube is laid around the
//! periodic orbit of period `t` in cylinder coordinates
//! `x = x_gamma(tau) + u n(tau)`, so that the two sheets of a self-retracing
//! orbit carry the two closed-orbit branches that merge at its turning
//! points. The negative-time half is the complex conjugate.
//!
//! The classical data (amplitude and action) do not depend on `hbar`. They
//! are sampled on Chebyshev nodes in `(t, u)`, and the oscillatory integral
//! is done on a fine trapezoid grid through the interpolant, so one sampling
//! serves every `hbar`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use super::{SpectralWindow, TestFunction, TraceError};
use crate::dynamics::{Branch, Flow, FlowOptions, Mode, ParticleParams, PhaseState, Trajectory};
use crate::fields::{FieldConfig, Vec3};
use crate::orbits::{refine_periodic_orbit, PeriodicOrbit};
use crate::propagator::{build_orbit, find_connecting_orbits, kernel_prefactor, orbit_term, shoot, PropagatorError, ShootingSearch};

/// Localisation region around one periodic orbit.
#[derive(Debug, Clone)]
pub struct TubeRegion {
    pub orbit: PeriodicOrbit,
    /// Transverse half-width of the tube.
    pub half_width: f64,
    /// Half-width of the time window around the orbit period.
    pub time_half_width: f64,
}

#[derive(Debug, Clone)]
pub struct OracleOptions {
    pub mode: Mode,
    /// Nodes along the orbit (periodic trapezoid rule), even.
    pub n_tau: usize,
    /// Chebyshev nodes across the tube, odd.
    pub n_u: usize,
    /// Chebyshev nodes across the time window, odd.
    pub n_t: usize,
    /// Fraction of each half-width used for the smooth ramps.
    pub taper: f64,
    /// Times `|t| < t_min` are excluded (handled by the Weyl term).
    pub t_min: f64,
    pub window: Option<SpectralWindow>,
    /// Largest phase increment per fine-grid step, in radians.
    pub phase_step: f64,
    pub flow_tol: f64,
    pub newton_tol: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Planar,
            n_tau: 32,
            n_u: 21,
            n_t: 21,
            taper: 0.5,
            t_min: 0.0,
            window: None,
            phase_step: 0.4,
            flow_tol: 1e-11,
            newton_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CausticCell {
    pub x: Vec3,
    pub t: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleResult {
    /// Oscillatory trace, both time signs.
    pub value: f64,
    /// Positive-time part per tube.
    pub per_tube: Vec<Complex64>,
    /// Change of `value` when the fine grid is halved in each direction.
    pub error_estimate: f64,
    /// Closed orbits computed.
    pub nodes: usize,
    /// Points of the fine grid.
    pub fine_nodes: usize,
}

fn ramp(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u * (10.0 + u * (-15.0 + 6.0 * u))
}

/// C-infinity step from 0 at `u <= 0` to 1 at `u >= 1`.
fn smooth_step(u: f64) -> f64 {
    let f = |x: f64| if x > 0.0 { (-1.0 / x).exp() } else { 0.0 };
    let (a, b) = (f(u), f(1.0 - u));
    a / (a + b)
}

/// 1 on `|s| <= 1 - taper`, smooth decay to 0 at `|s| = 1`.
fn plateau(s: f64, taper: f64) -> f64 {
    let a = s.abs();
    if a >= 1.0 {
        0.0
    } else if a <= 1.0 - taper {
        1.0
    } else {
        ramp((1.0 - a) / taper)
    }
}

/// Chebyshev points of the second kind on `[-1, 1]`, ascending.
fn cheb_nodes(n: usize) -> Vec<f64> {
    (0..n).map(|j| -(PI * j as f64 / (n - 1) as f64).cos()).collect()
}

/// Barycentric interpolation matrix from the Chebyshev nodes to `targets`.
fn cheb_matrix(n: usize, targets: &[f64]) -> DMatrix<f64> {
    let nodes = cheb_nodes(n);
    let w: Vec<f64> = (0..n)
        .map(|j| {
            let s = if j % 2 == 0 { 1.0 } else { -1.0 };
            if j == 0 || j == n - 1 {
                0.5 * s
            } else {
                s
            }
        })
        .collect();
    let mut b = DMatrix::zeros(targets.len(), n);
    for (i, &x) in targets.iter().enumerate() {
        if let Some(j) = nodes.iter().position(|&xj| (x - xj).abs() < 1e-14) {
            b[(i, j)] = 1.0;
            continue;
        }
        let terms: Vec<f64> = (0..n).map(|j| w[j] / (x - nodes[j])).collect();
        let sum: f64 = terms.iter().sum();
        for j in 0..n {
            b[(i, j)] = terms[j] / sum;
        }
    }
    b
}

struct Geometry {
    x: Vec3,
    p: Vec3,
    n: Vec3,
    /// `d(x + u n)/d tau = v + u n'`
    v: Vec3,
    dn: Vec3,
}

fn cross2(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

/// Samples of the orbit with a continuous in-plane unit normal.
fn orbit_geometry(flow: &Flow, traj: &Trajectory, period: f64, n_tau: usize) -> Vec<Geometry> {
    let mut out: Vec<Geometry> = Vec::with_capacity(n_tau);
    for k in 0..n_tau {
        let tau = period * (k as f64 + 0.5) / n_tau as f64;
        let z = traj.state_at(tau);
        let (v, a) = flow.velocity(&z);
        // near a turning point v vanishes and the acceleration sets the line
        let dir = if v.norm() > 1e-8 * a.norm() { v } else { a };
        let mut n = Vec3::new(-dir[1], dir[0], 0.0).normalize();
        if let Some(prev) = out.last() {
            if n.dot(&prev.n) < 0.0 {
                n = -n;
            }
        }
        out.push(Geometry { x: z.x, p: z.p, n, v, dn: Vec3::zeros() });
    }
    let h = period / n_tau as f64;
    for k in 0..n_tau {
        let a = out[(k + n_tau - 1) % n_tau].n;
        let b = out[(k + 1) % n_tau].n;
        out[k].dn = (b - a) / (2.0 * h);
    }
    out
}

/// Undamped Newton for `x_t(x, p) = x` that gives up instead of wandering
/// to another branch: the total correction may not exceed `max_jump`.
fn local_newton(flow: &Flow, x: &Vec3, t: f64, guess: Vec3, max_jump: f64, opts: &OracleOptions) -> Option<(Vec3, f64)> {
    let f = flow.dof();
    let mut p = guess;
    let mut last = f64::INFINITY;
    for _ in 0..12 {
        let (xt, jac) = shoot(flow, x, &p, t, opts.flow_tol).ok()?;
        let r = xt - x;
        let res = r.norm();
        if res <= opts.newton_tol {
            return Some((p, res));
        }
        if !(res < last) && last < 1e-6 {
            return None;
        }
        last = res;
        let rhs = DVector::from_iterator(f, (0..f).map(|i| -r[i]));
        let delta = jac.lu().solve(&rhs)?;
        for i in 0..f {
            p[i] += delta[i];
        }
        if (p - guess).norm() > max_jump {
            return None;
        }
    }
    None
}

/// Largest continuation step in position.
const MAX_STEP: f64 = 0.02;

/// `dp/ds` along the closed-orbit branch through `(x, p)` when `x` moves
/// by `dx` per unit `s`.
fn tangent(flow: &Flow, x: &Vec3, p: &Vec3, dx: &Vec3, t: f64, opts: &OracleOptions) -> Option<Vec3> {
    let f = flow.dof();
    let eps = 1e-6 / dx.norm().max(1e-300);
    let (x0, jac) = shoot(flow, x, p, t, opts.flow_tol).ok()?;
    let (x1, _) = shoot(flow, &(x + dx * eps), p, t, opts.flow_tol).ok()?;
    let dr = ((x1 - x0) / eps) - dx;
    let rhs = DVector::from_iterator(f, (0..f).map(|i| -dr[i]));
    let d = jac.lu().solve(&rhs)?;
    let mut out = Vec3::zeros();
    for i in 0..f {
        out[i] = d[i];
    }
    Some(out)
}

/// Follows a closed orbit from `(xa, pa)` to `xb` at fixed `t` by tangent
/// prediction and Newton correction in steps of at most `MAX_STEP`.
fn continue_closed(flow: &Flow, xa: Vec3, pa: Vec3, xb: Vec3, t: f64, opts: &OracleOptions) -> Option<(Vec3, f64)> {
    let len = (xb - xa).norm();
    if len == 0.0 {
        return Some((pa, 0.0));
    }
    let dx = xb - xa;
    let h_max = (MAX_STEP / len).min(1.0);
    let (mut s, mut h) = (0.0f64, h_max);
    let (mut p, mut res) = (pa, 0.0);
    let mut slope = tangent(flow, &xa, &pa, &dx, t, opts)?;
    while s < 1.0 {
        let s1 = (s + h).min(1.0);
        let x = xa + dx * s1;
        let step = slope * (s1 - s);
        let jump = 0.2 * (step.norm() + len * (s1 - s)) + 1e-9;
        match local_newton(flow, &x, t, p + step, jump, opts) {
            Some((pn, r)) => {
                p = pn;
                res = r;
                s = s1;
                h = (2.0 * h).min(h_max);
                if s < 1.0 {
                    slope = tangent(flow, &x, &p, &dx, t, opts)?;
                }
            }
            None => {
                h *= 0.5;
                if h < h_max / 64.0 {
                    return None;
                }
            }
        }
    }
    Some((p, res))
}

/// Periodic orbit of the family with primitive period `t_prim`, by a secant
/// search in energy from `(z, t_a, e_a)` with initial slope `dT/dE`.
fn orbit_with_period(
    flow: &Flow,
    z: &PhaseState,
    t_a: f64,
    e_a: f64,
    slope: f64,
    t_prim: f64,
    opts: &OracleOptions,
) -> Option<(PhaseState, f64, f64)> {
    let (mut z, mut ta, mut ea, mut s) = (*z, t_a, e_a, slope);
    for _ in 0..30 {
        if (ta - t_prim).abs() <= 1e-11 * t_prim {
            return Some((z, ea, s));
        }
        let en = ea + (t_prim - ta) / s;
        let (zn, tn) = refine_periodic_orbit(flow, &z, t_prim, en, opts.newton_tol, opts.flow_tol)?;
        if en != ea {
            s = (tn - ta) / (en - ea);
        }
        (z, ta, ea) = (zn, tn, en);
    }
    None
}

/// Base curve at one time node: the periodic orbit whose period equals `t`.
struct Slice {
    t: f64,
    h_tau: f64,
    /// Tube width relative to the one at the orbit period, following the
    /// spatial extent of the orbit.
    scale: f64,
    geom: Vec<Geometry>,
}

fn extent(geom: &[Geometry]) -> f64 {
    geom.iter().flat_map(|a| geom.iter().map(move |b| (a.x - b.x).norm())).fold(0.0, f64::max)
}

fn slices(flow: &Flow, tube: &TubeRegion, t_nodes: &[f64], opts: &OracleOptions) -> Result<Vec<Slice>, TraceError> {
    let o = &tube.orbit;
    let r = o.repetition.max(1) as f64;
    let de = 1e-4 * o.energy.abs().max(1.0);
    let lost = || TraceError::InvalidInput(format!("periodic orbit T = {} does not continue in energy", o.period));
    let (_, tp) = refine_periodic_orbit(flow, &o.start, o.primitive_period, o.energy + de, opts.newton_tol, opts.flow_tol).ok_or_else(lost)?;
    let slope0 = (tp - o.primitive_period) / de;
    let mid = t_nodes.len() / 2;
    let mut out: Vec<Option<Slice>> = t_nodes.iter().map(|_| None).collect();
    for range in [(mid..t_nodes.len()).collect::<Vec<_>>(), (0..mid).rev().collect()] {
        let (mut z, mut ta, mut ea, mut s) = (o.start, o.primitive_period, o.energy, slope0);
        for k in range {
            let t = t_nodes[k];
            let (zn, en, sn) = orbit_with_period(flow, &z, ta, ea, s, t / r, opts).ok_or_else(|| {
                TraceError::InvalidInput(format!("no periodic orbit of period {t} in the family of T = {}", o.period))
            })?;
            (z, ta, ea, s) = (zn, t / r, en, sn);
            let traj = flow.integrate(&z, ta, &FlowOptions::tol(opts.flow_tol))?;
            out[k] = Some(Slice { t, h_tau: ta / opts.n_tau as f64, scale: 1.0, geom: orbit_geometry(flow, &traj, ta, opts.n_tau) });
        }
    }
    let mut out: Vec<Slice> = out.into_iter().map(|s| s.expect("every time node visited")).collect();
    let base = extent(&out[mid].geom);
    for s in &mut out {
        s.scale = extent(&s.geom) / base;
    }
    Ok(out)
}

/// Classical data on one `(t, u)` Chebyshev row: amplitude without the
/// kernel prefactor, and Hamilton's principal function.
struct Row {
    amp: Vec<Complex64>,
    action: Vec<f64>,
}

fn sample_row(g: &Geometry, slice: &Slice, u_nodes: &[f64], flow: &Flow, opts: &OracleOptions) -> Result<Row, TraceError> {
    let t = slice.t;
    let nu = u_nodes.len();
    let x_at = |k: usize| g.x + g.n * (u_nodes[k] * slice.scale);
    let lost = |k: usize| {
        let x = x_at(k);
        TraceError::FamilyLost { x: [x[0], x[1], x[2]], t }
    };
    let mut amp = vec![Complex64::new(0.0, 0.0); nu];
    let mut action = vec![0.0; nu];
    let mut caustics = Vec::new();
    let mut node = |k: usize, p: Vec3, res: f64| -> Result<(), TraceError> {
        let x = x_at(k);
        match build_orbit(flow, &x, p, t, res, opts.flow_tol) {
            Ok(o) => {
                let jac = cross2(&(g.v + g.dn * (u_nodes[k] * slice.scale)), &g.n).abs() * slice.scale;
                let chi = opts.window.map_or(1.0, |w| w.chi(o.traj.energy()));
                let spin = (o.frame_t * o.holonomy * o.frame0.adjoint()).trace();
                amp[k] = spin * Complex64::from_polar(o.d_vv * jac * chi * slice.h_tau / (2.0 * PI), -PI * o.nu as f64 / 2.0);
                action[k] = o.r;
                Ok(())
            }
            Err(PropagatorError::Caustic { .. }) => {
                caustics.push(CausticCell { x, t });
                Ok(())
            }
            Err(e) => Err(e.into()),
        }
    };
    let mid = nu / 2;
    let (p0, r0) = local_newton(flow, &g.x, t, g.p, 1e-3 * (1.0 + g.p.norm()), opts).ok_or_else(|| lost(mid))?;
    node(mid, p0, r0)?;
    for dir in [1i64, -1] {
        let mut p = p0;
        let mut k = mid as i64;
        while (0..nu as i64).contains(&(k + dir)) {
            let kn = (k + dir) as usize;
            let (pn, r) = continue_closed(flow, x_at(k as usize), p, x_at(kn), t, opts).ok_or_else(|| lost(kn))?;
            node(kn, pn, r)?;
            p = pn;
            k += dir;
        }
    }
    if !caustics.is_empty() {
        return Err(TraceError::Caustic(caustics));
    }
    Ok(Row { amp, action })
}

struct TubeData {
    period: f64,
    half_width: f64,
    time_half_width: f64,
    /// Per `tau` line: `n_t x n_u` amplitude and action.
    lines: Vec<(DMatrix<Complex64>, DMatrix<f64>)>,
}

/// Classical closed-orbit data over a set of tubes, reusable for any `hbar`.
pub struct TubeSamples {
    energy: f64,
    dof: usize,
    taper: f64,
    phase_step: f64,
    n_u: usize,
    n_t: usize,
    tubes: Vec<TubeData>,
}

/// Samples the closed orbits of every tube on the Chebyshev grid.
pub fn sample_tubes(
    energy: f64,
    config: &FieldConfig,
    params: &ParticleParams,
    tubes: &[TubeRegion],
    opts: &OracleOptions,
) -> Result<TubeSamples, TraceError> {
    params.validate()?;
    if opts.n_u % 2 == 0 || opts.n_t % 2 == 0 || opts.n_u < 5 || opts.n_t < 5 || opts.n_tau < 4 || opts.n_tau % 2 == 1 {
        return Err(TraceError::InvalidInput("oracle grid needs odd n_u, n_t >= 5 and even n_tau >= 4".into()));
    }
    if !(opts.taper > 0.0 && opts.taper <= 1.0) || !(opts.phase_step > 0.0) {
        return Err(TraceError::InvalidInput("taper must lie in (0, 1] and phase_step be positive".into()));
    }
    let mut data = Vec::with_capacity(tubes.len());
    for tube in tubes {
        let o = &tube.orbit;
        if !(tube.half_width > 0.0 && tube.time_half_width > 0.0) {
            return Err(TraceError::InvalidInput("tube half-widths must be positive".into()));
        }
        if o.period - tube.time_half_width <= opts.t_min {
            return Err(TraceError::InvalidInput(format!(
                "time window around T = {} reaches the excluded neighbourhood |t| < {}",
                o.period, opts.t_min
            )));
        }
        let flow = Flow::new(config.clone(), *params, o.branch, opts.mode);
        let t_nodes: Vec<f64> = cheb_nodes(opts.n_t).iter().map(|s| o.period + tube.time_half_width * s).collect();
        let u_nodes: Vec<f64> = cheb_nodes(opts.n_u).iter().map(|s| tube.half_width * s).collect();
        let slices = slices(&flow, tube, &t_nodes, opts)?;
        let jobs: Vec<(usize, usize)> = (0..opts.n_tau).flat_map(|k| (0..opts.n_t).map(move |it| (k, it))).collect();
        let rows: Vec<Row> = jobs
            .par_iter()
            .map(|&(k, it)| sample_row(&slices[it].geom[k], &slices[it], &u_nodes, &flow, opts))
            .collect::<Result<_, _>>()?;
        let lines = rows
            .chunks(opts.n_t)
            .map(|line| {
                let amp = DMatrix::from_fn(opts.n_t, opts.n_u, |i, j| line[i].amp[j]);
                let action = DMatrix::from_fn(opts.n_t, opts.n_u, |i, j| line[i].action[j]);
                (amp, action)
            })
            .collect();
        data.push(TubeData { period: o.period, half_width: tube.half_width, time_half_width: tube.time_half_width, lines });
    }
    Ok(TubeSamples {
        energy,
        dof: opts.mode.dof(),
        taper: opts.taper,
        phase_step: opts.phase_step,
        n_u: opts.n_u,
        n_t: opts.n_t,
        tubes: data,
    })
}

/// Odd number of points on `[-1, 1]` keeping the phase increment per step
/// below `step` for a phase gradient `grad` over a half-width `half`.
fn fine_count(grad: f64, half: f64, hbar: f64, step: f64) -> usize {
    let n = (2.0 * half * grad / (hbar * step)).ceil() as usize;
    (n.max(32) / 2) * 2 + 1
}

impl TubeSamples {
    /// Closed orbits computed.
    pub fn nodes(&self) -> usize {
        self.tubes.iter().map(|t| t.lines.len()).sum::<usize>() * self.n_u * self.n_t
    }

    /// Oscillatory trace at `hbar` with test function `tf`.
    pub fn evaluate(&self, hbar: f64, tf: &TestFunction) -> Result<OracleResult, TraceError> {
        self.evaluate_with(hbar, &|t| tf.rho_hat(t))
    }

    /// Oscillatory trace at `hbar` for an arbitrary `rho_hat`.
    pub fn evaluate_with(&self, hbar: f64, rho_hat: &(dyn Fn(f64) -> f64 + Sync)) -> Result<OracleResult, TraceError> {
        if !(hbar > 0.0 && hbar.is_finite()) {
            return Err(TraceError::InvalidInput(format!("hbar must be positive, got {hbar}")));
        }
        let pref = kernel_prefactor(hbar, self.dof);
        let mut per_tube = Vec::with_capacity(self.tubes.len());
        let mut error = 0.0;
        let mut fine_nodes = 0;
        let (tu, tt) = (cheb_nodes(self.n_u), cheb_nodes(self.n_t));
        for tube in &self.tubes {
            // phase gradients from neighbouring Chebyshev samples
            let t_at = |i: usize| tube.period + tube.time_half_width * tt[i];
            let (mut gu, mut gt) = (0.0f64, 0.0f64);
            for (_, action) in &tube.lines {
                for i in 0..self.n_t {
                    for j in 0..self.n_u {
                        let phi = action[(i, j)] + self.energy * t_at(i);
                        if j + 1 < self.n_u {
                            gu = gu.max((action[(i, j + 1)] - action[(i, j)]).abs() / (tube.half_width * (tu[j + 1] - tu[j])));
                        }
                        if i + 1 < self.n_t {
                            let d = action[(i + 1, j)] + self.energy * t_at(i + 1) - phi;
                            gt = gt.max(d.abs() / (tube.time_half_width * (tt[i + 1] - tt[i])));
                        }
                    }
                }
            }
            let nu_f = fine_count(1.5 * gu, tube.half_width, hbar, self.phase_step);
            let nt_f = fine_count(1.5 * gt, tube.time_half_width, hbar, self.phase_step);
            if nu_f.saturating_mul(nt_f) > 50_000_000 {
                return Err(TraceError::InvalidInput(format!(
                    "fine grid of {nu_f} x {nt_f} points needed at hbar = {hbar}; narrow the tube or raise hbar"
                )));
            }
            let su: Vec<f64> = (0..nu_f).map(|i| -1.0 + 2.0 * i as f64 / (nu_f - 1) as f64).collect();
            let st: Vec<f64> = (0..nt_f).map(|i| -1.0 + 2.0 * i as f64 / (nt_f - 1) as f64).collect();
            let bu = cheb_matrix(self.n_u, &su).transpose();
            let bt = cheb_matrix(self.n_t, &st);
            let bu_c = bu.map(|v| Complex64::new(v, 0.0));
            let bt_c = bt.map(|v| Complex64::new(v, 0.0));
            let wu: Vec<f64> = su.iter().map(|&s| plateau(s, self.taper)).collect();
            let wt: Vec<Complex64> = st
                .iter()
                .map(|&s| {
                    let t = tube.period + tube.time_half_width * s;
                    Complex64::from_polar(rho_hat(t) * plateau(s, self.taper), self.energy * t / hbar)
                })
                .collect();
            let lines: Vec<(Complex64, Complex64)> = tube
                .lines
                .par_iter()
                .map(|(amp, action)| {
                    let a = &bt_c * amp * &bu_c;
                    let r = &bt * action * &bu;
                    let (mut fine, mut coarse) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
                    for i in 0..nt_f {
                        for j in 0..nu_f {
                            let v = a[(i, j)] * wt[i] * wu[j] * Complex64::from_polar(1.0, r[(i, j)] / hbar);
                            fine += v;
                            if i % 2 == 0 && j % 2 == 0 {
                                coarse += v;
                            }
                        }
                    }
                    (fine, coarse)
                })
                .collect();
            let w = pref * (2.0 * tube.half_width / (nu_f - 1) as f64) * (2.0 * tube.time_half_width / (nt_f - 1) as f64);
            let fine: Complex64 = lines.iter().map(|l| l.0).sum::<Complex64>() * w;
            let coarse: Complex64 = lines.iter().map(|l| l.1).sum::<Complex64>() * w * 4.0;
            let tau_half: Complex64 = lines.iter().step_by(2).map(|l| l.0).sum::<Complex64>() * w * 2.0;
            error += 2.0 * ((coarse - fine).re.abs() + (tau_half - fine).re.abs());
            per_tube.push(fine);
            fine_nodes += nu_f * nt_f * tube.lines.len();
        }
        let sum: Complex64 = per_tube.iter().sum();
        Ok(OracleResult { value: 2.0 * sum.re, per_tube, error_estimate: error, nodes: self.nodes(), fine_nodes })
    }
}

/// Axis-aligned box `centre +- half` in the plane of motion (planar mode) or
/// in space, with closed orbits found by shooting at every node.
#[derive(Debug, Clone)]
pub struct BoxRegion {
    pub centre: Vec3,
    pub half: Vec3,
    /// Midpoint nodes per axis.
    pub n_x: usize,
    /// Time interval; both ends are ramped smoothly to zero.
    pub t_range: (f64, f64),
    /// Trapezoid nodes in time.
    pub n_t: usize,
    pub search: ShootingSearch,
}

/// Spatial region of the oracle.
#[derive(Debug, Clone)]
pub enum OracleRegion {
    /// Tubes around periodic orbits, with closed orbits continued from them.
    Tubes(Vec<TubeRegion>),
    /// Every closed orbit found by shooting inside a box.
    Box(BoxRegion),
}

fn box_oracle(
    energy: f64,
    config: &FieldConfig,
    params: &ParticleParams,
    region: &BoxRegion,
    rho_hat: &(dyn Fn(f64) -> f64 + Sync),
    opts: &OracleOptions,
) -> Result<OracleResult, TraceError> {
    let (t_lo, t_hi) = region.t_range;
    if !(t_lo >= opts.t_min && t_hi > t_lo) || region.n_x == 0 || region.n_t < 3 {
        return Err(TraceError::InvalidInput(format!(
            "box oracle needs t_min <= t_lo < t_hi, n_x >= 1 and n_t >= 3 (t = {t_lo}..{t_hi}, t_min = {})",
            opts.t_min
        )));
    }
    let f = opts.mode.dof();
    let hbar = params.hbar;
    let pref = kernel_prefactor(hbar, f);
    let axes = if f == 2 { 2 } else { 3 };
    let n = region.n_x;
    let points: Vec<Vec3> = (0..n.pow(axes as u32))
        .map(|mut idx| {
            let mut x = region.centre;
            for a in 0..axes {
                let k = idx % n;
                idx /= n;
                x[a] += region.half[a] * (-1.0 + (2.0 * k as f64 + 1.0) / n as f64);
            }
            x
        })
        .collect();
    let cell: f64 = (0..axes).map(|a| 2.0 * region.half[a] / n as f64).product();
    let h_t = (t_hi - t_lo) / (region.n_t - 1) as f64;
    let ramp_len = 0.5 * opts.taper * (t_hi - t_lo);
    let jobs: Vec<(usize, usize)> = (0..region.n_t).flat_map(|it| (0..points.len()).map(move |ix| (it, ix))).collect();
    let mut search = region.search;
    search.mode = opts.mode;
    let values: Vec<Complex64> = jobs
        .par_iter()
        .map(|&(it, ix)| {
            let t = t_lo + h_t * it as f64;
            let w = rho_hat(t) * smooth_step((t - t_lo) / ramp_len) * smooth_step((t_hi - t) / ramp_len);
            if w == 0.0 {
                return Ok(Complex64::new(0.0, 0.0));
            }
            let mut tr = Complex64::new(0.0, 0.0);
            for branch in [Branch::Plus, Branch::Minus] {
                for o in find_connecting_orbits(&points[ix], &points[ix], t, branch, config, params, &search)? {
                    tr += orbit_term(&o, hbar).trace();
                }
            }
            Ok(tr * pref * Complex64::from_polar(w * cell * h_t / (2.0 * PI), energy * t / hbar))
        })
        .collect::<Result<_, TraceError>>()?;
    let fine: Complex64 = values.iter().sum();
    let coarse: Complex64 = jobs.iter().zip(&values).filter(|((it, _), _)| it % 2 == 0).map(|(_, v)| v).sum::<Complex64>() * 2.0;
    Ok(OracleResult {
        value: 2.0 * fine.re,
        per_tube: Vec::new(),
        error_estimate: 2.0 * (coarse - fine).re.abs(),
        nodes: jobs.len(),
        fine_nodes: jobs.len(),
    })
}

/// Direct oscillatory trace at `energy` (both time signs, `|t| >= t_min`).
pub fn direct_trace_oracle(
    energy: f64,
    config: &FieldConfig,
    params: &ParticleParams,
    region: &OracleRegion,
    tf: &TestFunction,
    opts: &OracleOptions,
) -> Result<OracleResult, TraceError> {
    match region {
        OracleRegion::Tubes(tubes) => sample_tubes(energy, config, params, tubes, opts)?.evaluate(params.hbar, tf),
        OracleRegion::Box(b) => {
            params.validate()?;
            box_oracle(energy, config, params, b, &|t| tf.rho_hat(t), opts)
        }
    }
}
