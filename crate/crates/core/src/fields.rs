//! Closed catalog of static electromagnetic field configurations.
//!
//! Every entry provides its potentials in Coulomb gauge together with the
//! closed-form first and second spatial derivatives needed by the
//! variational equations of the classical flow.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("non-finite position {0:?}")]
    NonFinitePosition([f64; 3]),
    #[error("invalid field parameter: {0}")]
    InvalidParameter(String),
}

/// Static field scenario. Vector potentials of uniform magnetic fields use
/// the symmetric gauge `A = B × x / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldConfig {
    Zero,
    UniformMagnetic { b: [f64; 3] },
    UniformElectric { e: [f64; 3] },
    HarmonicScalar { k: [f64; 3] },
    /// `phi = g x^2 y^2`
    QuarticCoupled { g: f64 },
}

/// Potentials, fields and their derivatives at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct EmSample {
    pub phi: f64,
    pub a: Vec3,
    pub e: Vec3,
    pub b: Vec3,
    /// `grad_a[(j, k)] = dA_j/dx_k`
    pub grad_a: Matrix3<f64>,
    pub grad_phi: Vec3,
    pub hess_phi: Matrix3<f64>,
    /// `hess_a[j][(k, l)] = d^2 A_j / dx_k dx_l`
    pub hess_a: [Matrix3<f64>; 3],
}

impl EmSample {
    fn zero() -> Self {
        Self {
            phi: 0.0,
            a: Vec3::zeros(),
            e: Vec3::zeros(),
            b: Vec3::zeros(),
            grad_a: Matrix3::zeros(),
            grad_phi: Vec3::zeros(),
            hess_phi: Matrix3::zeros(),
            hess_a: [Matrix3::zeros(); 3],
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<(), FieldError> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        let ok = match self {
            FieldConfig::Zero => true,
            FieldConfig::UniformMagnetic { b } => finite(b),
            FieldConfig::UniformElectric { e } => finite(e),
            FieldConfig::HarmonicScalar { k } => finite(k),
            FieldConfig::QuarticCoupled { g } => g.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(FieldError::InvalidParameter(format!("{self:?}")))
        }
    }

    /// True when the scenario keeps motion in the `z = 0` plane invariant:
    /// B perpendicular to the plane and E inside it.
    pub fn is_planar_compatible(&self) -> bool {
        match self {
            FieldConfig::Zero | FieldConfig::HarmonicScalar { .. } => true,
            FieldConfig::QuarticCoupled { .. } => true,
            FieldConfig::UniformMagnetic { b } => b[0] == 0.0 && b[1] == 0.0,
            FieldConfig::UniformElectric { e } => e[2] == 0.0,
        }
    }

    /// True when B vanishes identically (scalar-potential scenarios).
    pub fn is_magnetic_free(&self) -> bool {
        match self {
            FieldConfig::UniformMagnetic { b } => b.iter().all(|&c| c == 0.0),
            _ => true,
        }
    }

    pub fn is_electric_free(&self) -> bool {
        match self {
            FieldConfig::UniformElectric { e } => e.iter().all(|&c| c == 0.0),
            FieldConfig::HarmonicScalar { k } => k.iter().all(|&c| c == 0.0),
            FieldConfig::QuarticCoupled { g } => *g == 0.0,
            _ => true,
        }
    }

    pub fn eval(&self, x: &Vec3) -> Result<EmSample, FieldError> {
        if !x.iter().all(|c| c.is_finite()) {
            return Err(FieldError::NonFinitePosition([x[0], x[1], x[2]]));
        }
        Ok(self.eval_unchecked(x))
    }

    /// Evaluation without the finiteness check, for inner loops that
    /// already guarantee finite input.
    pub fn eval_unchecked(&self, x: &Vec3) -> EmSample {
        let mut s = EmSample::zero();
        match *self {
            FieldConfig::Zero => {}
            FieldConfig::UniformMagnetic { b } => {
                let b = Vec3::from(b);
                s.b = b;
                s.a = 0.5 * b.cross(x);
                // A = B x r / 2  =>  dA_j/dx_k = eps_{j m k} B_m / 2
                s.grad_a = 0.5 * b.cross_matrix();
            }
            FieldConfig::UniformElectric { e } => {
                let e = Vec3::from(e);
                s.e = e;
                s.phi = -e.dot(x);
                s.grad_phi = -e;
            }
            FieldConfig::HarmonicScalar { k } => {
                let k = Vec3::from(k);
                s.phi = 0.5 * (k[0] * x[0] * x[0] + k[1] * x[1] * x[1] + k[2] * x[2] * x[2]);
                s.grad_phi = k.component_mul(x);
                s.e = -s.grad_phi;
                s.hess_phi = Matrix3::from_diagonal(&k);
            }
            FieldConfig::QuarticCoupled { g } => {
                let (xx, yy) = (x[0], x[1]);
                s.phi = g * xx * xx * yy * yy;
                s.grad_phi = Vec3::new(2.0 * g * xx * yy * yy, 2.0 * g * xx * xx * yy, 0.0);
                s.e = -s.grad_phi;
                s.hess_phi = Matrix3::new(
                    2.0 * g * yy * yy,
                    4.0 * g * xx * yy,
                    0.0,
                    4.0 * g * xx * yy,
                    2.0 * g * xx * xx,
                    0.0,
                    0.0,
                    0.0,
                    0.0,
                );
            }
        }
        s
    }
}

/// Largest finite-difference residuals of the potential/field relations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub points: usize,
    pub max_div_a: f64,
    pub max_e_residual: f64,
    pub max_b_residual: f64,
}

impl ResidualReport {
    pub fn max(&self) -> f64 {
        self.max_div_a.max(self.max_e_residual).max(self.max_b_residual)
    }
}

/// Checks `div A = 0`, `E = -grad phi` and `B = curl A` by central differences.
pub fn verify_field_consistency(config: &FieldConfig, points: &[Vec3], h: f64) -> ResidualReport {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut rep = ResidualReport { points: points.len(), ..Default::default() };
    for x in points {
        let s = config.eval_unchecked(x);
        // dA[k] = dA/dx_k (vector), dphi[k]
        let mut da = [Vec3::zeros(); 3];
        let mut dphi = Vec3::zeros();
        for k in 0..3 {
            let mut xp = *x;
            let mut xm = *x;
            xp[k] += h;
            xm[k] -= h;
            let sp = config.eval_unchecked(&xp);
            let sm = config.eval_unchecked(&xm);
            da[k] = (sp.a - sm.a) / (2.0 * h);
            dphi[k] = (sp.phi - sm.phi) / (2.0 * h);
        }
        let div = da[0][0] + da[1][1] + da[2][2];
        let curl = Vec3::new(da[1][2] - da[2][1], da[2][0] - da[0][2], da[0][1] - da[1][0]);
        rep.max_div_a = rep.max_div_a.max(div.abs());
        rep.max_e_residual = rep.max_e_residual.max((s.e + dphi).amax());
        rep.max_b_residual = rep.max_b_residual.max((s.b - curl).amax());
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, radius: f64, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::with_capacity(n);
        while pts.len() < n {
            let v = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if v.norm() <= 1.0 {
                pts.push(v * radius);
            }
        }
        pts
    }

    #[test]
    fn symmetric_gauge_of_uniform_field() {
        let b0 = 1.7;
        let f = FieldConfig::UniformMagnetic { b: [0.0, 0.0, b0] };
        let x = Vec3::new(0.3, -1.2, 0.5);
        let s = f.eval(&x).unwrap();
        assert!((s.a - Vec3::new(-b0 * x[1] / 2.0, b0 * x[0] / 2.0, 0.0)).norm() < 1e-15);
        assert_eq!(s.e, Vec3::zeros());
        assert_eq!(s.phi, 0.0);
        // B components are antisymmetric combinations of grad A
        let g = s.grad_a;
        let curl = Vec3::new(g[(2, 1)] - g[(1, 2)], g[(0, 2)] - g[(2, 0)], g[(1, 0)] - g[(0, 1)]);
        assert!((curl - s.b).norm() < 1e-15);
    }

    #[test]
    fn zero_config_is_zero() {
        let s = FieldConfig::Zero.eval(&Vec3::new(4.0, -2.0, 1.0)).unwrap();
        assert_eq!(s, EmSample::zero());
    }

    #[test]
    fn harmonic_potential_and_field() {
        let f = FieldConfig::HarmonicScalar { k: [1.0, 2.0, 3.0] };
        let x = Vec3::new(0.5, -1.0, 2.0);
        let s = f.eval(&x).unwrap();
        assert!((s.phi - 0.5 * (0.25 + 2.0 + 12.0)).abs() < 1e-15);
        assert!((s.e - Vec3::new(-0.5, 2.0, -6.0)).norm() < 1e-15);
    }

    #[test]
    fn non_finite_position_rejected() {
        let err = FieldConfig::Zero.eval(&Vec3::new(f64::NAN, 0.0, 0.0)).unwrap_err();
        assert!(matches!(err, FieldError::NonFinitePosition(_)));
    }

    #[test]
    fn uniform_magnetic_residuals() {
        let f = FieldConfig::UniformMagnetic { b: [0.3, -0.2, 1.1] };
        let rep = verify_field_consistency(&f, &cloud(100, 3.0, 1), 1e-4);
        assert!(rep.max() < 1e-8, "{rep:?}");
    }

    #[test]
    fn zero_residuals_exact() {
        let rep = verify_field_consistency(&FieldConfig::Zero, &cloud(20, 1.0, 2), 1e-4);
        assert_eq!(rep.max(), 0.0);
    }

    #[test]
    fn quartic_residuals() {
        let f = FieldConfig::QuarticCoupled { g: 1.0 };
        let rep = verify_field_consistency(&f, &cloud(100, 1.0, 3), 1e-4);
        assert!(rep.max() < 1e-6, "{rep:?}");
    }

    #[test]
    fn whole_catalog_residuals() {
        let catalog = [
            FieldConfig::Zero,
            FieldConfig::UniformMagnetic { b: [0.0, 0.0, 2.0] },
            FieldConfig::UniformElectric { e: [0.4, -0.1, 0.2] },
            FieldConfig::HarmonicScalar { k: [1.0, 1.5, 0.5] },
            FieldConfig::QuarticCoupled { g: 0.7 },
        ];
        let pts = cloud(50, 1.5, 4);
        for f in &catalog {
            let rep = verify_field_consistency(f, &pts, 1e-4);
            assert!(rep.max() < 1e-6, "{f:?}: {rep:?}");
        }
    }

    #[test]
    fn analytic_second_derivatives_match_differences() {
        let f = FieldConfig::QuarticCoupled { g: 1.3 };
        let x = Vec3::new(0.4, -0.7, 0.1);
        let s = f.eval(&x).unwrap();
        let h = 1e-5;
        for k in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let d = (f.eval(&xp).unwrap().grad_phi - f.eval(&xm).unwrap().grad_phi) / (2.0 * h);
            for j in 0..3 {
                assert!((d[j] - s.hess_phi[(j, k)]).abs() < 1e-8);
            }
        }
    }
}
