//! SU(2) spin transport along classical orbits.
//!
//! The transport matrix `d` solves `d' = -i M2 d` with the hermitian spin
//! coupling `M2 = sigma . w / 2`. The classical spin `s = hopf(d)` then
//! precesses as `s' = w x s`, and the remaining U(1) phase of `d` splits
//! into a dynamical part and a monopole (geometric) part.

use nalgebra::{Matrix2, Matrix4, SMatrix, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use thiserror::Error;

use crate::dynamics::{Branch, DynamicsError, KineticFrame, ParticleParams, Trajectory};
use crate::fields::{EmSample, Vec3};
use crate::ode::{integrate, OdeOptions, OdeSystem};

pub type Su2 = Matrix2<Complex64>;
pub type Spinor4x2 = SMatrix<Complex64, 4, 2>;

const I: Complex64 = Complex64::new(0.0, 1.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpinError {
    #[error("matrix is not in SU(2) (defect {0:e})")]
    NotSu2(f64),
    #[error("gauge pole: |{component}| = {modulus:e} at t = {t}")]
    GaugePole { t: f64, component: &'static str, modulus: f64 },
    #[error("phase increment {increment} exceeds pi/2 at t = {t}; frames too sparse")]
    UnderResolved { t: f64, increment: f64 },
    #[error("trajectory has no dense output")]
    NoDenseOutput,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

pub fn pauli() -> [Matrix2<Complex64>; 3] {
    let o = Complex64::new(0.0, 0.0);
    let l = Complex64::new(1.0, 0.0);
    [
        Matrix2::new(o, l, l, o),
        Matrix2::new(o, -I, I, o),
        Matrix2::new(l, o, o, -l),
    ]
}

/// `sigma . v` for a real 3-vector.
pub fn sigma_dot(v: &Vec3) -> Su2 {
    let s = pauli();
    s[0] * Complex64::from(v[0]) + s[1] * Complex64::from(v[1]) + s[2] * Complex64::from(v[2])
}

/// `exp(-i sigma . a)`; an exact SU(2) element for real `a`.
pub fn su2_exp(a: &Vec3) -> Su2 {
    let th = a.norm();
    let (c, s) = (th.cos(), th.sin());
    if th < 1e-300 {
        return Su2::identity();
    }
    let n = a / th;
    Su2::identity() * Complex64::from(c) - sigma_dot(&n) * (I * s)
}

/// Re-projects onto SU(2) via the `(u, v)` parametrisation of the first column.
pub fn project_su2(d: &Su2) -> Su2 {
    let (u, v) = (d[(0, 0)], d[(1, 0)]);
    let n = (u.norm_sqr() + v.norm_sqr()).sqrt();
    let (u, v) = (u / n, v / n);
    Matrix2::new(u, -v.conj(), v, u.conj())
}

/// `max(|d^+ d - 1|, |det d - 1|)`.
pub fn su2_defect(d: &Su2) -> f64 {
    let uu = d.adjoint() * d - Su2::identity();
    let a = uu.iter().map(|z| z.norm()).fold(0.0, f64::max);
    a.max((d.determinant() - Complex64::from(1.0)).norm())
}

/// Rotation vector `w` of the classical spin, `s' = w x s`, so that
/// `M2 = sigma . w / 2`.
pub fn rotation_vector(kin: &KineticFrame, em: &EmSample, params: &ParticleParams, branch: Branch) -> Vec3 {
    let ParticleParams { e, c, .. } = *params;
    let eps = kin.eps;
    let mc2 = params.rest_energy();
    let magnetic = -branch.sign() * (e * c / eps) * em.b;
    let orbit = (e * c * c / (eps * (eps + mc2))) * kin.pi.cross(&em.e);
    magnetic + orbit
}

/// Spin coupling matrix `M2` of the transport equation `d' + i M2 d = 0`.
pub fn coupling_m2(kin: &KineticFrame, em: &EmSample, params: &ParticleParams, branch: Branch) -> Su2 {
    sigma_dot(&rotation_vector(kin, em, params, branch)) * Complex64::from(0.5)
}

/// Hopf map `SU(2) -> S^2`: `s = (u*, v*) sigma (u, v)^T` for the first
/// column `(u, v)` of `d`, i.e. `(2 Re(u* v), 2 Im(u* v), |u|^2 - |v|^2)`.
pub fn hopf(d: &Su2) -> Result<Vec3, SpinError> {
    let defect = su2_defect(d);
    if defect > 1e-8 {
        return Err(SpinError::NotSu2(defect));
    }
    Ok(hopf_unchecked(d))
}

fn hopf_unchecked(d: &Su2) -> Vec3 {
    let (u, v) = (d[(0, 0)], d[(1, 0)]);
    let uv = u.conj() * v;
    Vec3::new(2.0 * uv.re, 2.0 * uv.im, u.norm_sqr() - v.norm_sqr())
}

/// SU(2) element whose Hopf image is `s` (rotation of the north pole about
/// an axis in the equatorial plane).
pub fn su2_from_spin(s: &Vec3) -> Su2 {
    let s = s.normalize();
    let theta = s[2].clamp(-1.0, 1.0).acos();
    let phi = s[1].atan2(s[0]);
    let u = Complex64::from((theta / 2.0).cos());
    let v = Complex64::from_polar((theta / 2.0).sin(), phi);
    Matrix2::new(u, -v.conj(), v, u.conj())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gauge {
    North,
    South,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpinFrame {
    pub t: f64,
    pub d: Su2,
    pub s: Vec3,
    /// Tracked phase: `eta` in the north gauge, `lambda` in the south gauge.
    pub eta: f64,
    pub gauge: Gauge,
    pub theta: f64,
    pub phi_angle: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SpinOptions {
    pub d0: Su2,
    /// Upper bound on the spin rotation angle per transport step.
    pub max_rotation: f64,
}

impl Default for SpinOptions {
    fn default() -> Self {
        Self { d0: Su2::identity(), max_rotation: 0.02 }
    }
}

/// Output of [`transport_spin`]: frames at every transport step and the
/// step generators `a_n` with `d_{n+1} = exp(-i sigma . a_n) d_n`.
#[derive(Debug, Clone)]
pub struct SpinHistory {
    pub frames: Vec<SpinFrame>,
    pub generators: Vec<Vec3>,
    pub track: PhaseTrack,
}

impl SpinHistory {
    pub fn final_frame(&self) -> &SpinFrame {
        self.frames.last().expect("history is never empty")
    }

    pub fn times(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.t).collect()
    }

    pub fn max_unitarity_defect(&self) -> f64 {
        self.frames.iter().map(|f| su2_defect(&f.d)).fold(0.0, f64::max)
    }
}

/// Rotation vector along a trajectory at time `t`.
pub fn rotation_vector_at(traj: &Trajectory, t: f64) -> Vec3 {
    let z = traj.state_at(t);
    let em = traj.flow.field.eval_unchecked(&z.x);
    let kin = crate::dynamics::kinetic_from_em(&z.p, &em.a, &traj.flow.params);
    rotation_vector(&kin, &em, &traj.flow.params, traj.branch())
}

const GAUSS_OFFSET: f64 = 0.288_675_134_594_812_9; // sqrt(3)/6

/// Transports `d` along the trajectory with fourth-order Magnus steps.
/// Every step multiplies by an exact SU(2) exponential.
pub fn transport_spin(traj: &Trajectory, opts: &SpinOptions) -> Result<SpinHistory, SpinError> {
    if !traj.has_dense() {
        return Err(SpinError::NoDenseOutput);
    }
    let mut d = project_su2(&opts.d0);
    let mut times = Vec::new();
    let mut ds = Vec::new();
    let mut generators = Vec::new();
    times.push(traj.samples[0].0);
    ds.push(d);
    for win in traj.samples.windows(2) {
        let (ta, tb) = (win[0].0, win[1].0);
        let h_seg = tb - ta;
        if h_seg == 0.0 {
            continue;
        }
        let w_scale = [ta, 0.5 * (ta + tb), tb]
            .iter()
            .map(|&t| rotation_vector_at(traj, t).norm())
            .fold(0.0, f64::max);
        let n = ((w_scale * h_seg.abs() / opts.max_rotation).ceil() as usize).max(1);
        let h = h_seg / n as f64;
        for k in 0..n {
            let t0 = ta + k as f64 * h;
            let w1 = rotation_vector_at(traj, t0 + (0.5 - GAUSS_OFFSET) * h);
            let w2 = rotation_vector_at(traj, t0 + (0.5 + GAUSS_OFFSET) * h);
            let a = 0.5 * (0.5 * h * (w1 + w2) + (3f64.sqrt() * h * h / 12.0) * w2.cross(&w1));
            d = project_su2(&(su2_exp(&a) * d));
            generators.push(a);
            times.push(if k + 1 == n { tb } else { t0 + h });
            ds.push(d);
        }
    }
    let pairs: Vec<(f64, Su2)> = times.iter().copied().zip(ds.iter().copied()).collect();
    let track = extract_eta(&pairs)?;
    let frames = track
        .points
        .iter()
        .zip(&ds)
        .map(|(p, d)| SpinFrame {
            t: p.t,
            d: *d,
            s: p.s,
            eta: p.value,
            gauge: p.gauge,
            theta: p.theta,
            phi_angle: p.phi,
        })
        .collect();
    Ok(SpinHistory { frames, generators, track })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhasePoint {
    pub t: f64,
    pub s: Vec3,
    pub theta: f64,
    /// Continuously unwrapped azimuth of `s`.
    pub phi: f64,
    pub gauge: Gauge,
    /// `eta` (north) or `lambda` (south), unwrapped.
    pub value: f64,
}

impl PhasePoint {
    /// The phase of `u`, `eta = lambda - phi` in the south gauge.
    pub fn eta(&self) -> f64 {
        match self.gauge {
            Gauge::North => self.value,
            Gauge::South => self.value - self.phi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaugeSwitch {
    pub index: usize,
    pub t: f64,
    pub to: Gauge,
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTrack {
    pub points: Vec<PhasePoint>,
    pub switches: Vec<GaugeSwitch>,
}

/// Hysteresis band for gauge switching: north -> south below `-BAND`,
/// south -> north above `+BAND` (in `cos theta`).
pub const GAUGE_BAND: f64 = 0.1;
const POLE_EPS: f64 = 1e-6;

fn nearest_branch(prev: f64, raw: f64) -> f64 {
    raw + TAU * ((prev - raw) / TAU).round()
}

/// Extracts the continuous phase track from a densely sampled SU(2) history.
pub fn extract_eta(frames: &[(f64, Su2)]) -> Result<PhaseTrack, SpinError> {
    let mut points: Vec<PhasePoint> = Vec::with_capacity(frames.len());
    let mut switches = Vec::new();
    for (idx, &(t, d)) in frames.iter().enumerate() {
        let s = hopf(&d)?;
        let cos_t = s[2].clamp(-1.0, 1.0);
        let theta = cos_t.acos();
        let raw_phi = s[1].atan2(s[0]);
        let (u, v) = (d[(0, 0)], d[(1, 0)]);
        let Some(prev) = points.last().copied() else {
            let gauge = if cos_t >= 0.0 { Gauge::North } else { Gauge::South };
            let phi = if theta.sin() > 1e-12 { raw_phi } else { 0.0 };
            let value = match gauge {
                Gauge::North => u.arg(),
                Gauge::South => v.arg(),
            };
            points.push(PhasePoint { t, s, theta, phi, gauge, value });
            continue;
        };
        let phi = if theta.sin() > 1e-12 { nearest_branch(prev.phi, raw_phi) } else { prev.phi };
        let (gauge, value) = match prev.gauge {
            Gauge::North => {
                if u.norm() < POLE_EPS {
                    return Err(SpinError::GaugePole { t, component: "u", modulus: u.norm() });
                }
                let eta = nearest_branch(prev.value, u.arg());
                check_increment(t, eta - prev.value)?;
                if cos_t < -GAUGE_BAND {
                    switches.push(GaugeSwitch { index: idx, t, to: Gauge::South, phi });
                    (Gauge::South, eta + phi)
                } else {
                    (Gauge::North, eta)
                }
            }
            Gauge::South => {
                if v.norm() < POLE_EPS {
                    return Err(SpinError::GaugePole { t, component: "v", modulus: v.norm() });
                }
                let lambda = nearest_branch(prev.value, v.arg());
                check_increment(t, lambda - prev.value)?;
                if cos_t > GAUGE_BAND {
                    switches.push(GaugeSwitch { index: idx, t, to: Gauge::North, phi });
                    (Gauge::North, lambda - phi)
                } else {
                    (Gauge::South, lambda)
                }
            }
        };
        points.push(PhasePoint { t, s, theta, phi, gauge, value });
    }
    Ok(PhaseTrack { points, switches })
}

fn check_increment(t: f64, inc: f64) -> Result<(), SpinError> {
    if inc.abs() > PI / 2.0 {
        Err(SpinError::UnderResolved { t, increment: inc })
    } else {
        Ok(())
    }
}

/// Dynamical/geometric split of the tracked phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseDecomposition {
    pub eta_dyn: f64,
    /// Accumulated monopole-connection phase in the gauge active at the end
    /// (including the `+-phi` offsets at gauge switches).
    pub eta_geo: f64,
    /// Tracked phase change (final minus initial value, switch offsets included).
    pub eta_extracted: f64,
    /// `eta_dyn + eta_geo - eta_extracted`, reduced to `(-pi, pi]`.
    pub residual: f64,
}

/// Signed solid angle of the geodesic triangle `(a, b, c)`.
pub fn triangle_solid_angle(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    let num = a.dot(&b.cross(c));
    let den = 1.0 + a.dot(b) + b.dot(c) + c.dot(a);
    2.0 * num.atan2(den)
}

fn rotate(v: &Vec3, axis: &Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    v * c + axis.cross(v) * s + axis * (axis.dot(v) * (1.0 - c))
}

pub fn wrap_pi(x: f64) -> f64 {
    let y = x.rem_euclid(TAU);
    if y > PI {
        y - TAU
    } else {
        y
    }
}

/// Splits the transported phase into `eta_dyn = -1/2 int s . w dt` and the
/// monopole connection `-1/2 (1 - cos theta) dphi` (north) or
/// `1/2 (1 + cos theta) dphi` (south).
pub fn phase_decomposition(traj: &Trajectory, history: &SpinHistory) -> Result<PhaseDecomposition, SpinError> {
    let pts = &history.track.points;
    let north = Vec3::new(0.0, 0.0, 1.0);
    let mut dyn_phase = 0.0;
    let mut geo = 0.0;
    let mut switch_iter = history.track.switches.iter().peekable();
    for (n, a) in history.generators.iter().enumerate() {
        let (p0, p1) = (&pts[n], &pts[n + 1]);
        let (t0, t1) = (p0.t, p1.t);
        let h = t1 - t0;
        let angle = 2.0 * a.norm();
        let axis = if angle > 0.0 { a / a.norm() } else { north };
        // dynamical part: two-point Gauss rule along the rotation arc
        let mut acc = 0.0;
        for off in [0.5 - GAUSS_OFFSET, 0.5 + GAUSS_OFFSET] {
            let s = rotate(&p0.s, &axis, angle * off);
            acc += s.dot(&rotation_vector_at(traj, t0 + off * h));
        }
        dyn_phase += -0.5 * 0.5 * h * acc;
        // geometric part: pole triangle plus the segment between arc and chord
        let pole = match p0.gauge {
            Gauge::North => north,
            Gauge::South => -north,
        };
        let cos_alpha = axis.dot(&p0.s).clamp(-1.0, 1.0);
        let lune = angle * (1.0 - cos_alpha) - triangle_solid_angle(&axis, &p0.s, &p1.s);
        let lune = if angle > 0.0 { lune } else { 0.0 };
        geo -= 0.5 * (triangle_solid_angle(&pole, &p0.s, &p1.s) + lune);
        while let Some(sw) = switch_iter.peek() {
            if sw.index != n + 1 {
                break;
            }
            geo += match sw.to {
                Gauge::South => sw.phi,
                Gauge::North => -sw.phi,
            };
            switch_iter.next();
        }
    }
    let extracted = pts.last().unwrap().value - pts[0].value;
    Ok(PhaseDecomposition {
        eta_dyn: dyn_phase,
        eta_geo: geo,
        eta_extracted: extracted,
        residual: wrap_pi(dyn_phase + geo - extracted),
    })
}

struct PrecessionSystem<'a> {
    traj: &'a Trajectory,
}

impl OdeSystem for PrecessionSystem<'_> {
    fn dim(&self) -> usize {
        3
    }
    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        let w = rotation_vector_at(self.traj, t);
        let s = Vec3::new(y[0], y[1], y[2]);
        let r = w.cross(&s);
        dy.copy_from_slice(r.as_slice());
    }
}

/// Classical spin precession `s' = w x s` integrated directly (adaptive
/// Runge–Kutta, renormalised to the unit sphere at every output time).
pub fn precess_spin(traj: &Trajectory, s0: &Vec3, times: &[f64]) -> Result<Vec<Vec3>, SpinError> {
    if !traj.has_dense() {
        return Err(SpinError::NoDenseOutput);
    }
    if (s0.norm() - 1.0).abs() > 1e-10 {
        return Err(SpinError::NotSu2((s0.norm() - 1.0).abs()));
    }
    let sys = PrecessionSystem { traj };
    let mut opts = OdeOptions::with_tol(1e-13);
    opts.dense = false;
    let mut s = *s0;
    let mut t = traj.samples[0].0;
    let mut out = Vec::with_capacity(times.len());
    for &tn in times {
        if tn != t {
            let sol = integrate(&sys, t, s.as_slice(), tn, &opts).map_err(DynamicsError::from)?;
            let y = sol.final_state();
            s = Vec3::new(y[0], y[1], y[2]).normalize();
            t = tn;
        }
        out.push(s);
    }
    Ok(out)
}

/// Positive- (`v`) and negative-energy (`w`) eigenvector frames of the
/// Dirac symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenFrame {
    pub v: Spinor4x2,
    pub w: Spinor4x2,
}

impl EigenFrame {
    pub fn for_branch(&self, branch: Branch) -> &Spinor4x2 {
        match branch {
            Branch::Plus => &self.v,
            Branch::Minus => &self.w,
        }
    }
}

pub fn eigenframe(kin: &KineticFrame, params: &ParticleParams) -> EigenFrame {
    let eps = kin.eps;
    let mc2 = params.rest_energy();
    let norm = Complex64::from(1.0 / (2.0 * eps * (eps + mc2)).sqrt());
    let upper = Su2::identity() * Complex64::from(eps + mc2);
    let sp = sigma_dot(&(params.c * kin.pi));
    let mut v = Spinor4x2::zeros();
    let mut w = Spinor4x2::zeros();
    for r in 0..2 {
        for col in 0..2 {
            v[(r, col)] = upper[(r, col)] * norm;
            v[(r + 2, col)] = sp[(r, col)] * norm;
            w[(r, col)] = -sp[(r, col)] * norm;
            w[(r + 2, col)] = upper[(r, col)] * norm;
        }
    }
    EigenFrame { v, w }
}

/// Matrix-valued symbol `c alpha . pi + beta m c^2` (without `e phi`).
pub fn symbol_matrix(kin: &KineticFrame, params: &ParticleParams) -> Matrix4<Complex64> {
    let sp = sigma_dot(&(params.c * kin.pi));
    let mc2 = Complex64::from(params.rest_energy());
    let mut h = Matrix4::zeros();
    for r in 0..2 {
        h[(r, r)] = mc2;
        h[(r + 2, r + 2)] = -mc2;
        for c in 0..2 {
            h[(r, c + 2)] = sp[(r, c)];
            h[(r + 2, c)] = sp[(r, c)];
        }
    }
    h
}

/// `Re tr d = 2 cos(theta/2) cos(eta)`.
pub fn spin_trace_factor(d: &Su2) -> f64 {
    d.trace().re
}

/// `(theta, eta)` of an SU(2) element: polar angle of `hopf(d)` and phase of `u`.
pub fn holonomy_angles(d: &Su2) -> (f64, f64) {
    let s = hopf_unchecked(d);
    (s[2].clamp(-1.0, 1.0).acos(), d[(0, 0)].arg())
}

pub fn vec3(x: f64, y: f64, z: f64) -> Vector3<f64> {
    Vector3::new(x, y, z)
}
