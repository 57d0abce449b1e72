use diracsc::dynamics::{Branch, ParticleParams};
use diracsc::fields::{FieldConfig, Vec3};
use diracsc::orbits::{find_periodic_orbits, OrbitSearch};
use diracsc::propagator::ShootingSearch;
use diracsc::trace::{
    build_test_function, direct_trace_oracle, sample_tubes, BoxRegion, OracleOptions, OracleRegion, TestShape,
    TubeRegion,
};

fn zero_field_box(hbar: f64) -> f64 {
    let params = ParticleParams::new(1.0, 1.0, 1.0, hbar).unwrap();
    let region = OracleRegion::Box(BoxRegion {
        centre: Vec3::zeros(),
        half: Vec3::new(0.5, 0.5, 0.0),
        n_x: 2,
        t_range: (0.5, 4.5),
        n_t: (4.0 * 4.0 / hbar / 0.25) as usize | 1,
        search: ShootingSearch { n_per_axis: 1, ..Default::default() },
    });
    let tf = build_test_function(4.0, TestShape::SmoothBump).unwrap();
    let opts = OracleOptions { t_min: 0.5, taper: 1.0, ..Default::default() };
    let r = direct_trace_oracle(3.0, &FieldConfig::Zero, &params, &region, &tf, &opts).unwrap();
    assert!(r.error_estimate < 1e-3 * r.value.abs().max(1e-9), "{r:?}");
    r.value
}

#[test]
fn zero_field_oscillatory_part_vanishes_semiclassically() {
    let v: Vec<f64> = [0.1, 0.05, 0.025].iter().map(|&h| zero_field_box(h).abs()).collect();
    assert!(v[1] < v[0] && v[2] < v[1], "{v:?}");
}

#[test]
fn tube_oracle_is_linear_in_the_test_function() {
    let params = ParticleParams::new(1.0, 1.0, 2.0, 0.05).unwrap();
    let cfg = FieldConfig::QuarticCoupled { g: 1.0 };
    let energy = params.rest_energy() + 0.2;
    let search = OrbitSearch { t_max: 9.0, horizon: 10.0, n_random: 20, n_brake: 48, region: 4.0, ..Default::default() };
    let orbit = find_periodic_orbits(energy, Branch::Plus, &cfg, &params, &search).unwrap().orbits.remove(0);
    let tube = TubeRegion { orbit, half_width: 0.2, time_half_width: 0.5 };
    let opts = OracleOptions { n_tau: 8, n_u: 5, n_t: 5, t_min: 1.0, ..Default::default() };
    let samples = sample_tubes(energy, &cfg, &params, &[tube], &opts).unwrap();
    let f1 = |t: f64| (-0.1 * t * t).exp();
    let f2 = |t: f64| 0.3 * (0.7 * t).cos();
    let a = samples.evaluate_with(0.05, &f1).unwrap();
    let b = samples.evaluate_with(0.05, &f2).unwrap();
    let ab = samples.evaluate_with(0.05, &|t| f1(t) + f2(t)).unwrap();
    let scale = a.value.abs() + b.value.abs();
    assert!((ab.value - a.value - b.value).abs() <= 1e-12 * scale, "{} vs {}", ab.value, a.value + b.value);
    assert_eq!(ab.fine_nodes, a.fine_nodes);
}

#[test]
fn invalid_oracle_settings_rejected() {
    let params = ParticleParams::new(1.0, 1.0, 1.0, 0.1).unwrap();
    let tf = build_test_function(4.0, TestShape::SmoothBump).unwrap();
    let region = OracleRegion::Box(BoxRegion {
        centre: Vec3::zeros(),
        half: Vec3::new(0.5, 0.5, 0.0),
        n_x: 2,
        t_range: (0.2, 3.0),
        n_t: 11,
        search: ShootingSearch::default(),
    });
    let opts = OracleOptions { t_min: 0.5, ..Default::default() };
    assert!(direct_trace_oracle(1.5, &FieldConfig::Zero, &params, &region, &tf, &opts).is_err());
}
