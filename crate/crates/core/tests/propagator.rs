use diracsc::dynamics::{Branch, JacobianBlocks, ParticleParams};
use diracsc::fields::{FieldConfig, Vec3};
use diracsc::propagator::{
    connect_from_seed, find_connecting_orbits, principal_function, semiclassical_kernel, ConnectingOrbit,
    ShootingSearch,
};
use diracsc::spin::pauli;
use nalgebra::Matrix4;
use num_complex::Complex64;
use proptest::prelude::*;

fn params() -> ParticleParams {
    ParticleParams::new(1.0, 1.0, 2.0, 0.1).unwrap()
}

fn fields() -> Vec<FieldConfig> {
    vec![
        FieldConfig::HarmonicScalar { k: [1.0, 0.8, 1.2] },
        FieldConfig::UniformMagnetic { b: [0.3, -0.2, 0.9] },
        FieldConfig::QuarticCoupled { g: 0.7 },
    ]
}

fn solve(x: &Vec3, y: &Vec3, t: f64, cfg: &FieldConfig, seed: Vec3) -> ConnectingOrbit {
    connect_from_seed(x, y, t, Branch::Plus, cfg, &params(), seed, &ShootingSearch::default())
        .unwrap()
        .expect("continuation from a nearby root converges")
}

fn base_orbit(x: &Vec3, y: &Vec3, t: f64, cfg: &FieldConfig) -> ConnectingOrbit {
    let s = ShootingSearch { n_per_axis: 1, ..Default::default() };
    let mut orbits = find_connecting_orbits(x, y, t, Branch::Plus, cfg, &params(), &s).unwrap();
    assert!(!orbits.is_empty());
    orbits.remove(0)
}

fn vec3() -> impl Strategy<Value = Vec3> {
    prop::array::uniform3(-0.4f64..0.4).prop_map(Vec3::from)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, ..ProptestConfig::default() })]

    #[test]
    fn principal_function_gradients(x in vec3(), y in vec3(), which in 0usize..3) {
        let cfg = &fields()[which];
        let t = 0.8;
        let o = base_orbit(&x, &y, t, cfg);
        let h = 1e-5;
        // dR/dt = -H
        let rp = solve(&x, &y, t + h, cfg, o.p0).r;
        let rm = solve(&x, &y, t - h, cfg, o.p0).r;
        let energy = o.traj.energy();
        prop_assert!(((rp - rm) / (2.0 * h) + energy).abs() <= 1e-6 * energy.abs());
        let pt = o.traj.final_state().p;
        for i in 0..3 {
            let mut e = Vec3::zeros();
            e[i] = h;
            let dx = (solve(&(x + e), &y, t, cfg, o.p0).r - solve(&(x - e), &y, t, cfg, o.p0).r) / (2.0 * h);
            prop_assert!((dx - pt[i]).abs() <= 1e-6 * pt.norm().max(1.0));
            let dy = (solve(&x, &(y + e), t, cfg, o.p0).r - solve(&x, &(y - e), t, cfg, o.p0).r) / (2.0 * h);
            prop_assert!((dy + o.p0[i]).abs() <= 1e-6 * o.p0.norm().max(1.0));
        }
    }

    #[test]
    fn van_vleck_determinant_identity(x in vec3(), y in vec3(), which in 0usize..3) {
        let o = base_orbit(&x, &y, 0.9, &fields()[which]);
        let j = o.traj.final_jacobian().unwrap();
        let det = JacobianBlocks::split(&j).dx_dp0.determinant();
        prop_assert!((o.d_vv * o.d_vv * det.abs() - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn principal_function_is_additive(x in vec3(), y in vec3(), which in 0usize..3) {
        let cfg = &fields()[which];
        let (t1, t2) = (0.4, 0.5);
        let o = base_orbit(&x, &y, t1 + t2, cfg);
        let z = o.traj.state_at(t1);
        let first = solve(&z.x, &y, t1, cfg, o.p0);
        let second = solve(&x, &z.x, t2, cfg, z.p);
        prop_assert!((first.r + second.r - principal_function(&o)).abs() <= 1e-8);
    }
}

#[test]
fn time_reversal_of_electrostatic_kernel() {
    // K(y, x, t) = Sigma K(x, y, t)^T Sigma with Sigma = diag(sigma_y, sigma_y)
    let sy = pauli()[1];
    let mut sigma = Matrix4::<Complex64>::zeros();
    sigma.fixed_view_mut::<2, 2>(0, 0).copy_from(&sy);
    sigma.fixed_view_mut::<2, 2>(2, 2).copy_from(&sy);
    let cfg = FieldConfig::HarmonicScalar { k: [1.0, 0.8, 1.2] };
    let s = ShootingSearch { n_per_axis: 3, ..Default::default() };
    let x = Vec3::new(0.3, -0.1, 0.2);
    let y = Vec3::new(-0.2, 0.25, 0.05);
    let t = 1.1;
    let kxy = semiclassical_kernel(&x, &y, t, &cfg, &params(), &s).unwrap();
    let kyx = semiclassical_kernel(&y, &x, t, &cfg, &params(), &s).unwrap();
    assert_eq!(kxy.contributions.len(), kyx.contributions.len());
    assert!(!kxy.contributions.is_empty());
    let diff = kyx.matrix - sigma * kxy.matrix.transpose() * sigma;
    let scale = kxy.matrix.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let err = diff.iter().map(|z| z.norm()).fold(0.0, f64::max);
    assert!(err <= 1e-8 * scale, "{err:e} vs {scale:e}");
}

#[test]
fn morse_index_nondecreasing_along_family() {
    let pr = ParticleParams::new(1.0, 1.0, 10.0, 0.1).unwrap();
    let cfg = FieldConfig::HarmonicScalar { k: [1.0, 1.3, 1.7] };
    let x = Vec3::new(0.2, 0.1, -0.1);
    let y = Vec3::new(-0.1, 0.05, 0.1);
    let s = ShootingSearch::default();
    let mut seed = Vec3::zeros();
    let mut last = 0;
    let mut t = 0.3;
    while t < 5.0 {
        if let Some(o) = connect_from_seed(&x, &y, t, Branch::Plus, &cfg, &pr, seed, &s).ok().flatten() {
            assert!(o.nu >= last, "t = {t}: {} < {last}", o.nu);
            last = o.nu;
            seed = o.p0;
        }
        t += 0.17;
    }
    assert!(last >= 3);
}
