//! Relativistic point-particle dynamics generated by `H± = e phi ± eps`.

use nalgebra::{DMatrix, Matrix3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::{FieldConfig, FieldError, Vec3};
use crate::ode::{integrate, DenseOutput, OdeError, OdeOptions, OdeSystem};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("integration failed: {0}")]
    Integration(#[from] OdeError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("invalid particle parameters: {0}")]
    InvalidParams(String),
    #[error("non-finite phase-space state")]
    NonFiniteState,
}

/// Mass, charge, light speed and the semiclassical parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleParams {
    pub m: f64,
    pub e: f64,
    pub c: f64,
    pub hbar: f64,
}

impl ParticleParams {
    pub fn new(m: f64, e: f64, c: f64, hbar: f64) -> Result<Self, DynamicsError> {
        let p = Self { m, e, c, hbar };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        for (name, v) in [("m", self.m), ("c", self.c), ("hbar", self.hbar)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DynamicsError::InvalidParams(format!("{name} must be positive")));
            }
        }
        if !self.e.is_finite() {
            return Err(DynamicsError::InvalidParams("e must be finite".into()));
        }
        Ok(())
    }

    /// Rest energy `m c^2`.
    pub fn rest_energy(&self) -> f64 {
        self.m * self.c * self.c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Plus,
    Minus,
}

impl Branch {
    pub fn sign(self) -> f64 {
        match self {
            Branch::Plus => 1.0,
            Branch::Minus => -1.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Branch::Plus => "+",
            Branch::Minus => "-",
        }
    }
}

/// Planar mode restricts motion to the `z = 0` plane (two degrees of freedom).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Planar,
    Spatial,
}

impl Mode {
    /// Number of configuration-space degrees of freedom.
    pub fn dof(self) -> usize {
        match self {
            Mode::Planar => 2,
            Mode::Spatial => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub x: Vec3,
    pub p: Vec3,
}

impl PhaseState {
    pub fn new(x: [f64; 3], p: [f64; 3]) -> Self {
        Self { x: Vec3::from(x), p: Vec3::from(p) }
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(self.p.iter()).all(|v| v.is_finite())
    }

    pub fn distance(&self, other: &PhaseState) -> f64 {
        ((self.x - other.x).norm_squared() + (self.p - other.p).norm_squared()).sqrt()
    }
}

/// Kinetic momentum `pi = p - (e/c) A` and kinetic energy `eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KineticFrame {
    pub pi: Vec3,
    pub eps: f64,
}

pub fn kinetic_frame(state: &PhaseState, config: &FieldConfig, params: &ParticleParams) -> KineticFrame {
    let em = config.eval_unchecked(&state.x);
    kinetic_from_em(&state.p, &em.a, params)
}

pub(crate) fn kinetic_from_em(p: &Vec3, a: &Vec3, params: &ParticleParams) -> KineticFrame {
    let c = params.c;
    let pi = p - (params.e / c) * a;
    let mc2 = params.rest_energy();
    let eps = (c * c * pi.norm_squared() + mc2 * mc2).sqrt();
    KineticFrame { pi, eps }
}

/// `H±(x, p) = e phi(x) ± eps`.
pub fn hamiltonian(state: &PhaseState, branch: Branch, config: &FieldConfig, params: &ParticleParams) -> f64 {
    let em = config.eval_unchecked(&state.x);
    let kin = kinetic_from_em(&state.p, &em.a, params);
    params.e * em.phi + branch.sign() * kin.eps
}

/// A field scenario, particle, branch and mode: everything that defines the
/// classical Hamiltonian flow.
#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    pub field: FieldConfig,
    pub params: ParticleParams,
    pub branch: Branch,
    pub mode: Mode,
}

/// Second derivatives of `H` at a phase-space point (3x3 blocks).
#[derive(Debug, Clone, Copy)]
pub struct HamiltonianHessian {
    /// `d^2 H / dp_j dx_k`
    pub px: Matrix3<f64>,
    pub pp: Matrix3<f64>,
    pub xx: Matrix3<f64>,
}

impl Flow {
    pub fn new(field: FieldConfig, params: ParticleParams, branch: Branch, mode: Mode) -> Self {
        Self { field, params, branch, mode }
    }

    pub fn dof(&self) -> usize {
        self.mode.dof()
    }

    pub fn hamiltonian(&self, z: &PhaseState) -> f64 {
        hamiltonian(z, self.branch, &self.field, &self.params)
    }

    pub fn kinetic(&self, z: &PhaseState) -> KineticFrame {
        kinetic_frame(z, &self.field, &self.params)
    }

    /// Hamilton's equations `(dx/dt, dp/dt)`.
    pub fn velocity(&self, z: &PhaseState) -> (Vec3, Vec3) {
        let em = self.field.eval_unchecked(&z.x);
        let (xd, pd, _, _, _) = self.eval_core(z, &em);
        (xd, pd)
    }

    fn eval_core(
        &self,
        z: &PhaseState,
        em: &crate::fields::EmSample,
    ) -> (Vec3, Vec3, f64, f64, KineticFrame) {
        let ParticleParams { e, c, .. } = self.params;
        let s = self.branch.sign();
        let kin = kinetic_from_em(&z.p, &em.a, &self.params);
        let v = (s * c * c / kin.eps) * kin.pi;
        let pdot = -e * em.grad_phi + (e / c) * em.grad_a.transpose() * v;
        let h = e * em.phi + s * kin.eps;
        (v, pdot, z.p.dot(&v), h, kin)
    }

    pub fn hessian(&self, z: &PhaseState) -> HamiltonianHessian {
        let em = self.field.eval_unchecked(&z.x);
        self.hessian_with(z, &em)
    }

    fn hessian_with(&self, z: &PhaseState, em: &crate::fields::EmSample) -> HamiltonianHessian {
        let ParticleParams { e, c, .. } = self.params;
        let s = self.branch.sign();
        let kin = kinetic_from_em(&z.p, &em.a, &self.params);
        let eps = kin.eps;
        let q = (s * c * c) * (Matrix3::identity() / eps - (c * c / (eps * eps * eps)) * kin.pi * kin.pi.transpose());
        let v = (s * c * c / eps) * kin.pi;
        let g = em.grad_a;
        let ec = e / c;
        let px = -ec * q * g;
        let mut xx = e * em.hess_phi + ec * ec * g.transpose() * q * g;
        for j in 0..3 {
            xx -= ec * v[j] * em.hess_a[j];
        }
        HamiltonianHessian { px, pp: q, xx }
    }

    /// Generator `L` of the variational equations `dJ/dt = L J`, restricted to
    /// the active degrees of freedom (size `2f x 2f`).
    pub fn variational_matrix(&self, z: &PhaseState) -> DMatrix<f64> {
        let f = self.dof();
        let h = self.hessian(z);
        let mut l = DMatrix::zeros(2 * f, 2 * f);
        fill_variational(&h, f, l.as_mut_slice(), true);
        l
    }

    pub fn state_from_slice(&self, y: &[f64]) -> PhaseState {
        let f = self.dof();
        let mut x = Vec3::zeros();
        let mut p = Vec3::zeros();
        for i in 0..f {
            x[i] = y[i];
            p[i] = y[f + i];
        }
        PhaseState { x, p }
    }

    /// Integrates the flow from `state0` for a (signed) time `t_final`.
    pub fn integrate(
        &self,
        state0: &PhaseState,
        t_final: f64,
        opts: &FlowOptions,
    ) -> Result<Trajectory, DynamicsError> {
        if !state0.is_finite() || !t_final.is_finite() {
            return Err(DynamicsError::NonFiniteState);
        }
        let f = self.dof();
        let layout = Layout { f, jacobian: opts.with_jacobian };
        let mut y0 = vec![0.0; layout.dim()];
        for i in 0..f {
            y0[i] = state0.x[i];
            y0[f + i] = state0.p[i];
        }
        if opts.with_jacobian {
            for i in 0..2 * f {
                y0[layout.jac_offset() + i * 2 * f + i] = 1.0;
            }
        }
        let sys = FlowSystem { flow: self, layout };
        let mut ode = OdeOptions::with_tol(opts.tol);
        ode.dense = opts.dense;
        ode.h_max = opts.h_max;
        let sol = integrate(&sys, 0.0, &y0, t_final, &ode)?;
        let samples: Vec<(f64, PhaseState)> = if opts.keep_samples {
            sol.ts.iter().zip(&sol.ys).map(|(&t, y)| (t, self.state_from_slice(y))).collect()
        } else {
            vec![(0.0, *state0), (t_final, self.state_from_slice(sol.final_state()))]
        };
        let jacobians = if opts.with_jacobian {
            if opts.keep_samples {
                Some(sol.ts.iter().zip(&sol.ys).map(|(&t, y)| (t, layout.jacobian(y))).collect())
            } else {
                Some(vec![
                    (0.0, DMatrix::identity(2 * f, 2 * f)),
                    (t_final, layout.jacobian(sol.final_state())),
                ])
            }
        } else {
            None
        };
        Ok(Trajectory {
            flow: self.clone(),
            samples,
            jacobians,
            tol: opts.tol,
            layout,
            final_raw: sol.final_state().to_vec(),
            n_rhs: sol.n_rhs,
            dense: sol.dense,
        })
    }
}

fn fill_variational(h: &HamiltonianHessian, f: usize, out: &mut [f64], col_major: bool) {
    let n = 2 * f;
    let mut set = |r: usize, c: usize, v: f64| {
        if col_major {
            out[c * n + r] = v;
        } else {
            out[r * n + c] = v;
        }
    };
    for r in 0..f {
        for c in 0..f {
            set(r, c, h.px[(r, c)]);
            set(r, f + c, h.pp[(r, c)]);
            set(f + r, c, -h.xx[(r, c)]);
            set(f + r, f + c, -h.px[(c, r)]);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FlowOptions {
    pub tol: f64,
    pub with_jacobian: bool,
    pub dense: bool,
    pub keep_samples: bool,
    pub h_max: Option<f64>,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self { tol: 1e-10, with_jacobian: false, dense: true, keep_samples: true, h_max: None }
    }
}

impl FlowOptions {
    pub fn tol(tol: f64) -> Self {
        Self { tol, ..Default::default() }
    }

    pub fn with_jacobian(mut self) -> Self {
        self.with_jacobian = true;
        self
    }

    /// Endpoint-only integration (no dense output, no stored samples).
    pub fn endpoint_only(mut self) -> Self {
        self.dense = false;
        self.keep_samples = false;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layout {
    f: usize,
    jacobian: bool,
}

impl Layout {
    fn dim(&self) -> usize {
        2 * self.f + 2 + if self.jacobian { 4 * self.f * self.f } else { 0 }
    }
    fn jac_offset(&self) -> usize {
        2 * self.f + 2
    }
    fn jacobian(&self, y: &[f64]) -> DMatrix<f64> {
        let n = 2 * self.f;
        DMatrix::from_row_slice(n, n, &y[self.jac_offset()..self.jac_offset() + n * n])
    }
}

struct FlowSystem<'a> {
    flow: &'a Flow,
    layout: Layout,
}

impl OdeSystem for FlowSystem<'_> {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        let f = self.layout.f;
        let z = self.flow.state_from_slice(y);
        let em = self.flow.field.eval_unchecked(&z.x);
        let (xd, pd, pdx, h, _) = self.flow.eval_core(&z, &em);
        for i in 0..f {
            dy[i] = xd[i];
            dy[f + i] = pd[i];
        }
        dy[2 * f] = pdx;
        dy[2 * f + 1] = h;
        if self.layout.jacobian {
            let n = 2 * f;
            let hess = self.flow.hessian_with(&z, &em);
            let mut l = [0.0; 36];
            fill_variational(&hess, f, &mut l, false);
            let off = self.layout.jac_offset();
            let jac = &y[off..off + n * n];
            let out = &mut dy[off..off + n * n];
            for r in 0..n {
                for c in 0..n {
                    let mut acc = 0.0;
                    for k in 0..n {
                        acc += l[r * n + k] * jac[k * n + c];
                    }
                    out[r * n + c] = acc;
                }
            }
        }
    }
}

/// Time-sampled phase-space path with dense interpolation and, optionally,
/// the flow Jacobian `J(t) = d(x, p)_t / d(x, p)_0`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub flow: Flow,
    pub samples: Vec<(f64, PhaseState)>,
    pub jacobians: Option<Vec<(f64, DMatrix<f64>)>>,
    pub tol: f64,
    layout: Layout,
    dense: DenseOutput,
    final_raw: Vec<f64>,
    pub n_rhs: usize,
}

impl Trajectory {
    pub fn branch(&self) -> Branch {
        self.flow.branch
    }

    pub fn params(&self) -> &ParticleParams {
        &self.flow.params
    }

    pub fn t_final(&self) -> f64 {
        self.samples.last().map(|s| s.0).unwrap_or(0.0)
    }

    pub fn initial_state(&self) -> PhaseState {
        self.samples[0].1
    }

    pub fn final_state(&self) -> PhaseState {
        self.flow.state_from_slice(&self.final_raw)
    }

    pub fn has_dense(&self) -> bool {
        !self.dense.is_empty()
    }

    fn raw_at(&self, t: f64) -> Vec<f64> {
        if t == self.t_final() || self.dense.is_empty() {
            return self.final_raw.clone();
        }
        self.dense.eval(t)
    }

    /// Interpolated phase-space state at time `t`.
    pub fn state_at(&self, t: f64) -> PhaseState {
        self.flow.state_from_slice(&self.raw_at(t))
    }

    pub fn jacobian_at(&self, t: f64) -> Option<DMatrix<f64>> {
        if !self.layout.jacobian {
            return None;
        }
        Some(self.layout.jacobian(&self.raw_at(t)))
    }

    pub fn final_jacobian(&self) -> Option<DMatrix<f64>> {
        self.layout.jacobian.then(|| self.layout.jacobian(&self.final_raw))
    }

    /// `int p . dx` accumulated up to time `t`.
    pub fn p_dx_at(&self, t: f64) -> f64 {
        self.raw_at(t)[2 * self.layout.f]
    }

    /// Hamilton's principal function `int (p . xdot - H) dt` up to time `t`.
    pub fn principal_at(&self, t: f64) -> f64 {
        let y = self.raw_at(t);
        y[2 * self.layout.f] - y[2 * self.layout.f + 1]
    }

    pub fn energy(&self) -> f64 {
        self.flow.hamiltonian(&self.initial_state())
    }

    /// Largest relative deviation of `H` from its initial value over the samples.
    pub fn relative_energy_drift(&self) -> f64 {
        let h0 = self.energy();
        self.samples
            .iter()
            .map(|(_, z)| (self.flow.hamiltonian(z) - h0).abs())
            .fold(0.0, f64::max)
            / h0.abs()
    }
}

/// Integrates `state0` under `H±` in full three-dimensional space.
pub fn integrate_flow(
    state0: &PhaseState,
    branch: Branch,
    config: &FieldConfig,
    params: &ParticleParams,
    t_final: f64,
    tol: f64,
) -> Result<Trajectory, DynamicsError> {
    let flow = Flow::new(config.clone(), *params, branch, Mode::Spatial);
    flow.integrate(state0, t_final, &FlowOptions::tol(tol))
}

/// Re-integrates the trajectory jointly with its variational equations.
pub fn linearized_flow(traj: &Trajectory) -> Result<Trajectory, DynamicsError> {
    let opts = FlowOptions { tol: traj.tol, ..Default::default() }.with_jacobian();
    traj.flow.integrate(&traj.initial_state(), traj.t_final(), &opts)
}

/// The four `f x f` blocks of a flow Jacobian.
#[derive(Debug, Clone)]
pub struct JacobianBlocks {
    pub dx_dx0: DMatrix<f64>,
    pub dx_dp0: DMatrix<f64>,
    pub dp_dx0: DMatrix<f64>,
    pub dp_dp0: DMatrix<f64>,
}

impl JacobianBlocks {
    pub fn split(j: &DMatrix<f64>) -> Self {
        let f = j.nrows() / 2;
        Self {
            dx_dx0: j.view((0, 0), (f, f)).into_owned(),
            dx_dp0: j.view((0, f), (f, f)).into_owned(),
            dp_dx0: j.view((f, 0), (f, f)).into_owned(),
            dp_dp0: j.view((f, f), (f, f)).into_owned(),
        }
    }
}

/// Standard symplectic form `[[0, I], [-I, 0]]` of size `2f`.
pub fn symplectic_form(f: usize) -> DMatrix<f64> {
    let mut o = DMatrix::zeros(2 * f, 2 * f);
    for i in 0..f {
        o[(i, f + i)] = 1.0;
        o[(f + i, i)] = -1.0;
    }
    o
}

/// `max |J^T Omega J - Omega|`.
pub fn symplectic_defect(j: &DMatrix<f64>) -> f64 {
    let o = symplectic_form(j.nrows() / 2);
    (j.transpose() * &o * j - o).amax()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_params() -> ParticleParams {
        ParticleParams::new(1.0, 1.0, 1.0, 0.1).unwrap()
    }

    #[test]
    fn kinetic_frame_examples() {
        let pr = unit_params();
        let k = kinetic_frame(&PhaseState::new([0.0; 3], [0.0; 3]), &FieldConfig::Zero, &pr);
        assert_eq!(k.pi, Vec3::zeros());
        assert_eq!(k.eps, 1.0);
        let k = kinetic_frame(&PhaseState::new([0.0; 3], [3.0, 0.0, 0.0]), &FieldConfig::Zero, &pr);
        assert!((k.eps - 10f64.sqrt()).abs() < 1e-15);
        // symmetric gauge A = (-y, x, 0) for B = 2 z-hat
        let b = FieldConfig::UniformMagnetic { b: [0.0, 0.0, 2.0] };
        let k = kinetic_frame(&PhaseState::new([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]), &b, &pr);
        assert!(k.pi.norm() < 1e-15);
        assert_eq!(k.eps, 1.0);
    }

    #[test]
    fn hamiltonian_examples() {
        let pr = unit_params();
        let rest = PhaseState::new([0.0; 3], [0.0; 3]);
        assert_eq!(hamiltonian(&rest, Branch::Plus, &FieldConfig::Zero, &pr), 1.0);
        assert_eq!(hamiltonian(&rest, Branch::Minus, &FieldConfig::Zero, &pr), -1.0);
        let h = FieldConfig::HarmonicScalar { k: [1.0, 1.0, 1.0] };
        let z = PhaseState::new([1.0, 0.0, 0.0], [0.0; 3]);
        assert!((hamiltonian(&z, Branch::Plus, &h, &pr) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(ParticleParams::new(1.0, 1.0, 1.0, -1.0).is_err());
        assert!(ParticleParams::new(0.0, 1.0, 1.0, 1.0).is_err());
        assert!(ParticleParams::new(1.0, 1.0, f64::INFINITY, 1.0).is_err());
    }

    #[test]
    fn free_drift() {
        let pr = unit_params();
        let z0 = PhaseState::new([0.1, 0.2, 0.3], [1.0, 0.0, 0.0]);
        let tr = integrate_flow(&z0, Branch::Plus, &FieldConfig::Zero, &pr, 2.0, 1e-10).unwrap();
        let zf = tr.final_state();
        assert!((zf.x[0] - (0.1 + 2.0 / 2f64.sqrt())).abs() < 1e-10);
        assert!((zf.x[1] - 0.2).abs() < 1e-14);
        let mid = tr.state_at(1.0);
        assert!((mid.x[0] - (0.1 + 1.0 / 2f64.sqrt())).abs() < 1e-10);
    }

    #[test]
    fn minus_branch_moves_against_momentum() {
        let pr = unit_params();
        let z0 = PhaseState::new([0.0; 3], [1.0, 0.0, 0.0]);
        let tr = integrate_flow(&z0, Branch::Minus, &FieldConfig::Zero, &pr, 2.0, 1e-10).unwrap();
        assert!((tr.final_state().x[0] + 2.0 / 2f64.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn jacobian_starts_at_identity() {
        let pr = unit_params();
        let flow = Flow::new(FieldConfig::QuarticCoupled { g: 1.0 }, pr, Branch::Plus, Mode::Planar);
        let tr = flow
            .integrate(&PhaseState::new([0.3, 0.4, 0.0], [0.2, 0.1, 0.0]), 1.0, &FlowOptions::default().with_jacobian())
            .unwrap();
        let j0 = tr.jacobian_at(0.0).unwrap();
        assert!((j0 - DMatrix::identity(4, 4)).amax() < 1e-15);
    }

    #[test]
    fn free_jacobian_closed_form() {
        let pr = ParticleParams::new(1.3, 1.0, 2.0, 0.1).unwrap();
        let p0 = Vec3::new(0.7, -0.4, 1.1);
        let z0 = PhaseState { x: Vec3::zeros(), p: p0 };
        let flow = Flow::new(FieldConfig::Zero, pr, Branch::Plus, Mode::Spatial);
        let t = 1.7;
        let tr = flow.integrate(&z0, t, &FlowOptions::default().with_jacobian()).unwrap();
        let b = JacobianBlocks::split(&tr.final_jacobian().unwrap());
        let c = pr.c;
        let eps = (c * c * p0.norm_squared() + pr.rest_energy().powi(2)).sqrt();
        let expect = t * c * c * (eps * eps * Matrix3::identity() - c * c * p0 * p0.transpose()) / eps.powi(3);
        for r in 0..3 {
            for k in 0..3 {
                assert!((b.dx_dp0[(r, k)] - expect[(r, k)]).abs() < 1e-9);
                let id = if r == k { 1.0 } else { 0.0 };
                assert!((b.dx_dx0[(r, k)] - id).abs() < 1e-12);
                assert!((b.dp_dp0[(r, k)] - id).abs() < 1e-12);
                assert!(b.dp_dx0[(r, k)].abs() < 1e-12);
            }
        }
    }
}
