//! Spin-weighted trace formula: spectral window, test functions, the Weyl
//! term, the periodic-orbit sum, the windowed spectral sum and a direct
//! time-domain oracle built from the semiclassical kernel.

use std::f64::consts::PI;
use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;
use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::dynamics::{Branch, DynamicsError};
use crate::orbits::{OrbitError, PeriodicOrbit};
use crate::propagator::PropagatorError;

mod oracle;
mod weyl;

pub use oracle::{direct_trace_oracle, sample_tubes, BoxRegion, CausticCell, OracleOptions, OracleRegion, OracleResult, TubeRegion, TubeSamples};
pub use weyl::{shell_volume_grid, shell_volume_mc, weyl_prefactor, weyl_term, VolumeEstimate, WeylOptions, WeylResult};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("orbit {id} (T = {period}) is not isolated: |det(M - 1)| = {det:e}")]
    NonIsolated { id: usize, period: f64, det: f64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("kernel caustic in {} quadrature cell(s), first at x = {:?}, t = {}", .0.len(), .0[0].x, .0[0].t)]
    Caustic(Vec<CausticCell>),
    #[error("closed-orbit family lost at x = ({}, {}), t = {t}; the tube reaches a fold", .x[0], .x[1])]
    FamilyLost { x: [f64; 3], t: f64 },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Propagator(#[from] PropagatorError),
    #[error(transparent)]
    Orbit(#[from] OrbitError),
}

fn quintic_step(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u * (10.0 + u * (-15.0 + 6.0 * u))
}

/// Smooth energy window: 1 on `[E_a + w, E_b - w]`, 0 outside `(E_a, E_b)`,
/// quintic smoothstep (C2) in between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralWindow {
    pub e_a: f64,
    pub e_b: f64,
    pub width: f64,
}

pub fn build_window(e_a: f64, e_b: f64, width: f64) -> Result<SpectralWindow, TraceError> {
    if !(width > 0.0 && e_b - e_a > 2.0 * width) {
        return Err(TraceError::InvalidInput(format!("window ({e_a}, {e_b}) with transition width {width}")));
    }
    Ok(SpectralWindow { e_a, e_b, width })
}

impl SpectralWindow {
    pub fn chi(&self, e: f64) -> f64 {
        if e <= self.e_a || e >= self.e_b {
            0.0
        } else if e < self.e_a + self.width {
            quintic_step((e - self.e_a) / self.width)
        } else if e > self.e_b - self.width {
            quintic_step((self.e_b - e) / self.width)
        } else {
            1.0
        }
    }

    pub fn in_plateau(&self, e: f64) -> bool {
        e >= self.e_a + self.width && e <= self.e_b - self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestShape {
    /// `cos^2(pi t / 2 T_max)`
    CosineWindow,
    /// `exp(-1 / (1 - (t / T_max)^2))`
    SmoothBump,
}

/// Even test function given through its compactly supported transform
/// `rho_hat`; `rho(w) = (1/2pi) int rho_hat(t) e^{-i w t} dt`.
#[derive(Debug, Clone)]
pub struct TestFunction {
    pub t_max: f64,
    pub shape: TestShape,
    /// Minimum number of Gauss-Legendre panels on `[0, T_max]`.
    pub panels: usize,
    rule: GaussLegendre,
}

const GL_NODES: usize = 20;

pub fn build_test_function(t_max: f64, shape: TestShape) -> Result<TestFunction, TraceError> {
    if !(t_max > 0.0 && t_max.is_finite()) {
        return Err(TraceError::InvalidInput(format!("T_max = {t_max}")));
    }
    Ok(TestFunction {
        t_max,
        shape,
        panels: 8,
        rule: GaussLegendre::new(NonZeroUsize::new(GL_NODES).unwrap()),
    })
}

impl TestFunction {
    pub fn with_panels(mut self, panels: usize) -> Self {
        self.panels = panels.max(1);
        self
    }

    pub fn rho_hat(&self, t: f64) -> f64 {
        let u = t.abs() / self.t_max;
        if u >= 1.0 {
            return 0.0;
        }
        match self.shape {
            TestShape::CosineWindow => (0.5 * PI * u).cos().powi(2),
            TestShape::SmoothBump => (-1.0 / (1.0 - u * u)).exp(),
        }
    }

    /// `d rho_hat / dt`.
    pub fn rho_hat_derivative(&self, t: f64) -> f64 {
        let u = t / self.t_max;
        if u.abs() >= 1.0 {
            return 0.0;
        }
        match self.shape {
            TestShape::CosineWindow => -0.5 * PI / self.t_max * (PI * u).sin(),
            TestShape::SmoothBump => {
                let q = 1.0 - u * u;
                -2.0 * u / (q * q) * (-1.0 / q).exp() / self.t_max
            }
        }
    }

    /// `rho(w)` by composite Gauss-Legendre quadrature, with panels added in
    /// proportion to the number of oscillations on the support.
    pub fn rho(&self, omega: f64) -> f64 {
        let osc = (omega.abs() * self.t_max / PI).ceil() as usize;
        let n = self.panels + 2 * osc;
        let h = self.t_max / n as f64;
        let mut sum = 0.0;
        for k in 0..n {
            let a = k as f64 * h;
            sum += self.rule.integrate(a, a + h, |t| self.rho_hat(t) * (omega * t).cos());
        }
        sum / PI
    }
}

/// Windowed spectral sum `sum_n chi(E_n) rho((E_n - E) / hbar)`.
pub fn quantum_side(levels: &[f64], window: &SpectralWindow, tf: &TestFunction, energy: f64, hbar: f64) -> f64 {
    levels
        .iter()
        .map(|&en| {
            let c = window.chi(en);
            if c == 0.0 {
                0.0
            } else {
                c * tf.rho((en - energy) / hbar)
            }
        })
        .sum()
}

/// One periodic orbit's term in the trace formula.
#[derive(Debug, Clone, Serialize)]
pub struct OrbitContribution {
    pub id: usize,
    pub branch: Branch,
    pub period: f64,
    pub primitive_period: f64,
    pub repetition: u32,
    pub action: f64,
    pub mu: i32,
    /// `2 T# cos(theta/2) cos(eta) / sqrt|det(M - 1)|`
    pub amplitude: f64,
    /// Positive-time term `rho_hat(T)/2pi A exp(i S/hbar - i pi mu/2)`. The
    /// time-reversed traversal at `-T` contributes its complex conjugate.
    pub value: Complex64,
}

/// How the spin holonomy enters the orbit weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpinWeight {
    Transported,
    /// `d = 1` on every orbit (`theta = eta = 0`).
    Identity,
}

/// Largest `|det(M - 1)|` treated as a non-isolated orbit.
pub const ISOLATION_TOL: f64 = 1e-6;

/// Periodic-orbit terms at energy `energy`. Orbits with `T > T_max`
/// contribute exactly zero.
pub fn orbit_sum(
    energy: f64,
    orbits: &[PeriodicOrbit],
    tf: &TestFunction,
    hbar: f64,
    spin: SpinWeight,
) -> Result<Vec<OrbitContribution>, TraceError> {
    let mut out = Vec::with_capacity(orbits.len());
    for (id, o) in orbits.iter().enumerate() {
        if !(o.det_m_minus_i.abs() > ISOLATION_TOL) {
            return Err(TraceError::NonIsolated { id, period: o.period, det: o.det_m_minus_i });
        }
        if (o.energy - energy).abs() > 1e-8 * energy.abs().max(1.0) {
            return Err(TraceError::InvalidInput(format!("orbit {id} has energy {} instead of {energy}", o.energy)));
        }
        let factor = match spin {
            SpinWeight::Transported => 2.0 * (0.5 * o.theta).cos() * o.eta.cos(),
            SpinWeight::Identity => 2.0,
        };
        let amplitude = factor * o.primitive_period * o.stability_weight();
        let w = tf.rho_hat(o.period) / (2.0 * PI);
        let value = if w == 0.0 {
            Complex64::new(0.0, 0.0)
        } else {
            Complex64::from_polar(w * amplitude, o.action / hbar - 0.5 * PI * o.mu as f64)
        };
        out.push(OrbitContribution {
            id,
            branch: o.branch,
            period: o.period,
            primitive_period: o.primitive_period,
            repetition: o.repetition,
            action: o.action,
            mu: o.mu,
            amplitude,
            value,
        });
    }
    Ok(out)
}

/// Assembled right-hand side of the trace formula at one energy.
#[derive(Debug, Clone, Serialize)]
pub struct TraceResult {
    pub energy: f64,
    pub weyl: f64,
    /// `(label, value)` for every orbit and its time-reversed partner.
    pub orbit_contributions: Vec<(String, Complex64)>,
    pub total: f64,
    pub imag_total: f64,
    pub oracle: Option<f64>,
}

impl TraceResult {
    pub fn assemble(energy: f64, weyl: f64, terms: &[OrbitContribution]) -> Self {
        let mut orbit_contributions = Vec::with_capacity(2 * terms.len());
        for c in terms {
            orbit_contributions.push((format!("{}+", c.id), c.value));
            orbit_contributions.push((format!("{}-", c.id), c.value.conj()));
        }
        let sum: Complex64 = orbit_contributions.iter().map(|(_, v)| *v).sum();
        Self {
            energy,
            weyl,
            orbit_contributions,
            total: weyl + sum.re,
            imag_total: sum.im,
            oracle: None,
        }
    }

    /// Oscillatory part `total - weyl`.
    pub fn oscillatory(&self) -> f64 {
        self.total - self.weyl
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::PhaseState;
    use crate::spin::Su2;
    use nalgebra::DMatrix;

    fn cos2_closed_form(t: f64, w: f64) -> f64 {
        // (1/2pi) int_{-T}^{T} (1 + cos(pi t/T))/2 e^{-iwt} dt
        let sinc = |a: f64| if a.abs() < 1e-12 { t } else { (a * t).sin() / a };
        let k = PI / t;
        (sinc(w) + 0.5 * sinc(w - k) + 0.5 * sinc(w + k)) / (2.0 * PI)
    }

    fn orbit(period: f64, action: f64, det: f64, mu: i32, theta: f64, eta: f64) -> PeriodicOrbit {
        PeriodicOrbit {
            branch: Branch::Plus,
            energy: 1.5,
            period,
            primitive_period: period,
            repetition: 1,
            start: PhaseState::new([0.0; 3], [0.0; 3]),
            action,
            monodromy: DMatrix::identity(2, 2),
            det_m_minus_i: det,
            mu,
            nu: 0,
            holonomy: Su2::identity(),
            theta,
            eta,
            spin_factor: 2.0 * (0.5 * theta).cos() * eta.cos(),
            stable: false,
            isolated: det.abs() > ISOLATION_TOL,
        }
    }

    #[test]
    fn window_values() {
        let w = build_window(1.0, 2.0, 0.2).unwrap();
        assert_eq!(w.chi(1.5), 1.0);
        assert_eq!(w.chi(0.9), 0.0);
        assert_eq!(w.chi(2.0), 0.0);
        assert!((w.chi(1.1) - 0.5).abs() < 1e-15);
        assert!((w.chi(1.9) - 0.5).abs() < 1e-15);
        assert!(build_window(1.0, 1.3, 0.2).is_err());
    }

    #[test]
    fn cosine_test_function() {
        let tf = build_test_function(3.0, TestShape::CosineWindow).unwrap();
        assert!((tf.rho(0.0) - 3.0 / (2.0 * PI)).abs() < 1e-12);
        for &w in &[0.3, 1.0, 1.047, 4.5, 17.0, 80.0] {
            assert!((tf.rho(w) - cos2_closed_form(3.0, w)).abs() < 1e-10, "w = {w}");
            assert_eq!(tf.rho(w), tf.rho(-w));
        }
        assert_eq!(tf.rho_hat(3.0 + 1e-12), 0.0);
        assert_eq!(tf.rho_hat(-3.0 - 1e-12), 0.0);
    }

    #[test]
    fn bump_decays_fast() {
        let tf = build_test_function(2.0, TestShape::SmoothBump).unwrap();
        let coarse = tf.rho(7.0);
        let fine = tf.clone().with_panels(64).rho(7.0);
        assert!((coarse - fine).abs() < 1e-12);
        let r: Vec<f64> = [10.0, 20.0, 40.0, 80.0].iter().map(|&w| tf.rho(w).abs()).collect();
        assert!(r.windows(2).all(|p| p[0] > p[1]), "{r:?}");
        // faster than any power: w^4 rho(w) keeps shrinking
        assert!(r[3] * 80f64.powi(4) < 0.1 * r[1] * 20f64.powi(4));
        assert_eq!(tf.rho_hat(2.0 + f64::EPSILON * 4.0), 0.0);
    }

    #[test]
    fn bump_derivative_matches_difference() {
        let tf = build_test_function(2.0, TestShape::SmoothBump).unwrap();
        let h = 1e-6;
        for &t in &[-1.5, -0.2, 0.7, 1.9] {
            let fd = (tf.rho_hat(t + h) - tf.rho_hat(t - h)) / (2.0 * h);
            assert!((fd - tf.rho_hat_derivative(t)).abs() < 1e-7);
        }
    }

    #[test]
    fn quantum_side_examples() {
        let w = build_window(0.0, 10.0, 1.0).unwrap();
        let tf = build_test_function(2.0, TestShape::SmoothBump).unwrap();
        let hbar = 0.1;
        assert_eq!(quantum_side(&[], &w, &tf, 5.0, hbar), 0.0);
        assert_eq!(quantum_side(&[5.3], &w, &tf, 5.0, hbar), tf.rho((5.3 - 5.0) / hbar));
        let two = quantum_side(&[4.8, 5.2], &w, &tf, 5.0, hbar);
        assert!((two - 2.0 * tf.rho(0.2 / hbar)).abs() < 1e-15);
        // deforming chi outside the plateau does not matter
        let w2 = build_window(-1.0, 12.0, 0.5).unwrap();
        let levels = [3.0, 4.1, 5.5, 6.0];
        assert_eq!(quantum_side(&levels, &w, &tf, 5.0, hbar), quantum_side(&levels, &w2, &tf, 5.0, hbar));
    }

    #[test]
    fn orbit_sum_support_and_phase() {
        let tf = build_test_function(8.0, TestShape::SmoothBump).unwrap();
        let orbits = [orbit(7.0, 4.0, -150.0, 2, 0.3, 0.1), orbit(9.0, 5.0, 40.0, 5, 0.0, 0.0)];
        let c = orbit_sum(1.5, &orbits, &tf, 0.05, SpinWeight::Transported).unwrap();
        assert_eq!(c[1].value, Complex64::new(0.0, 0.0));
        let c2 = orbit_sum(1.5, &orbits, &tf, 0.1, SpinWeight::Transported).unwrap();
        assert!((c2[0].value.norm() - c[0].value.norm()).abs() < 1e-15);
        let phase = |h: f64| 4.0 / h - PI;
        let arg = |z: Complex64, h: f64| (z.arg() - phase(h) + PI).rem_euclid(2.0 * PI) - PI;
        assert!(arg(c[0].value, 0.05).abs() < 1e-12 && arg(c2[0].value, 0.1).abs() < 1e-12);
        let expect = 2.0 * (0.15f64).cos() * 0.1f64.cos() * 7.0 / 150f64.sqrt();
        assert!((c[0].amplitude - expect).abs() < 1e-14);
        let r = TraceResult::assemble(1.5, 3.0, &c);
        assert_eq!(r.orbit_contributions.len(), 4);
        assert!(r.imag_total.abs() <= 1e-8 * r.total.abs());
        assert!((r.total - 3.0 - 2.0 * c[0].value.re).abs() < 1e-14);
    }

    #[test]
    fn spinless_reduction_doubles_gutzwiller() {
        let tf = build_test_function(10.0, TestShape::SmoothBump).unwrap();
        let orbits = [orbit(7.0, 4.0, -150.0, 2, 0.9, 0.4)];
        let c = orbit_sum(1.5, &orbits, &tf, 0.05, SpinWeight::Identity).unwrap();
        assert!((c[0].amplitude - 2.0 * 7.0 / 150f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn non_isolated_orbit_rejected() {
        let tf = build_test_function(10.0, TestShape::SmoothBump).unwrap();
        let orbits = [orbit(7.0, 4.0, -150.0, 2, 0.0, 0.0), orbit(12.0, 4.0, 1e-9, 2, 0.0, 0.0)];
        match orbit_sum(1.5, &orbits, &tf, 0.05, SpinWeight::Transported) {
            Err(TraceError::NonIsolated { id, .. }) => assert_eq!(id, 1),
            other => panic!("{other:?}"),
        }
    }
}
