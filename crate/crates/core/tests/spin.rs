use std::f64::consts::PI;

use diracsc::dynamics::{kinetic_frame, Branch, Flow, FlowOptions, Mode, ParticleParams, PhaseState};
use diracsc::fields::{FieldConfig, Vec3};
use diracsc::spin::{coupling_m2, spin_trace_factor, su2_exp, transport_spin, Gauge, SpinOptions, Su2};
use proptest::prelude::*;

fn params() -> ParticleParams {
    ParticleParams::new(1.0, 0.9, 1.3, 0.1).unwrap()
}

fn max_abs(m: &Su2) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn field(which: usize, v: [f64; 3]) -> FieldConfig {
    match which {
        0 => FieldConfig::UniformMagnetic { b: v },
        1 => FieldConfig::UniformElectric { e: v },
        2 => FieldConfig::HarmonicScalar { k: v.map(|k| 1.0 + k.abs()) },
        _ => FieldConfig::QuarticCoupled { g: 1.0 + v[0].abs() },
    }
}

fn vec3(s: f64) -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-s..s)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn coupling_is_hermitian(which in 0usize..4, v in vec3(1.5), x in vec3(1.0), p in vec3(2.0), minus in any::<bool>()) {
        let cfg = field(which, v);
        let pr = params();
        let z = PhaseState::new(x, p);
        let em = cfg.eval(&z.x).unwrap();
        let kin = kinetic_frame(&z, &cfg, &pr);
        let branch = if minus { Branch::Minus } else { Branch::Plus };
        let m2 = coupling_m2(&kin, &em, &pr, branch);
        prop_assert!(max_abs(&(m2 - m2.adjoint())) <= 1e-14);
    }

    #[test]
    fn holonomy_is_independent_of_the_initial_frame(which in 0usize..4, v in vec3(1.0), a in vec3(3.0)) {
        let cfg = field(which, v);
        let mode = if which == 3 { Mode::Planar } else { Mode::Spatial };
        let flow = Flow::new(cfg, params(), Branch::Plus, mode);
        let tr = flow.integrate(&PhaseState::new([0.3, -0.2, 0.0], [0.4, 0.1, 0.0]), 4.0, &FlowOptions::tol(1e-12)).unwrap();
        let d0 = su2_exp(&Vec3::from(a));
        let from_id = transport_spin(&tr, &SpinOptions::default()).unwrap();
        let from_d0 = transport_spin(&tr, &SpinOptions { d0, ..Default::default() }).unwrap();
        let u = from_d0.final_frame().d * d0.adjoint();
        prop_assert!(max_abs(&(u - from_id.final_frame().d)) <= 1e-10);
        prop_assert!((spin_trace_factor(&u) - spin_trace_factor(&from_id.final_frame().d)).abs() <= 1e-10);
    }
}

#[test]
fn trace_factor_agrees_in_both_gauges() {
    // tilted field: the spin cone reaches the southern hemisphere
    let pr = params();
    let th0 = PI / 2.0 + 0.3;
    let b = [th0.sin(), 0.0, th0.cos()];
    let flow = Flow::new(FieldConfig::UniformMagnetic { b }, pr, Branch::Plus, Mode::Spatial);
    let tr = flow.integrate(&PhaseState::new([0.0; 3], [0.0; 3]), 25.0, &FlowOptions::default()).unwrap();
    let h = transport_spin(&tr, &SpinOptions::default()).unwrap();
    let (mut north, mut south) = (0, 0);
    for (f, p) in h.frames.iter().zip(&h.track.points) {
        match p.gauge {
            Gauge::North => north += 1,
            Gauge::South => south += 1,
        }
        let expected = 2.0 * (p.theta / 2.0).cos() * p.eta().cos();
        assert!((spin_trace_factor(&f.d) - expected).abs() < 1e-8, "t = {}: {:?}", f.t, p.gauge);
    }
    assert!(north > 0 && south > 0);
}
