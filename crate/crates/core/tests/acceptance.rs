//! End-to-end acceptance suite. Runs as a plain binary so that every
//! criterion prints one line in `cargo test` output.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --release --test acceptance -- 2 6`.

use std::f64::consts::{PI, TAU};
use std::time::Instant;

use diracsc::dynamics::{Branch, FlowOptions, Flow, JacobianBlocks, Mode, ParticleParams, PhaseState};
use diracsc::fields::{FieldConfig, Vec3};
use diracsc::orbits::{
    action_energy_scan, find_periodic_orbits, monodromy_symplectic_defect, orbit_invariants, OrbitSearch, PeriodicOrbit,
};
use diracsc::propagator::{connect_from_seed, find_connecting_orbits, ShootingSearch};
use diracsc::spin::{
    hopf, phase_decomposition, precess_spin, rotation_vector_at, spin_trace_factor, su2_exp, su2_from_spin,
    transport_spin, wrap_pi, SpinOptions, Su2,
};
use diracsc::trace::{
    build_test_function, orbit_sum, sample_tubes, shell_volume_grid, shell_volume_mc, weyl_term, OracleOptions,
    SpinWeight, TestShape, TubeRegion, WeylOptions,
};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

fn max_abs(m: &Su2) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn r3(rng: &mut ChaCha8Rng, s: f64) -> [f64; 3] {
    [rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s)]
}

/// Random catalog scenario, particle state and branch.
fn random_scenario(rng: &mut ChaCha8Rng) -> (FieldConfig, PhaseState, Branch, Mode) {
    let (cfg, mode) = match rng.gen_range(0..4) {
        0 => {
            let mut b = r3(rng, 1.0);
            b[2] += 1.0;
            (FieldConfig::UniformMagnetic { b }, Mode::Spatial)
        }
        1 => (FieldConfig::UniformElectric { e: r3(rng, 0.6) }, Mode::Spatial),
        2 => {
            let k = r3(rng, 0.6);
            (FieldConfig::HarmonicScalar { k: [1.0 + k[0], 1.0 + k[1], 1.0 + k[2]] }, Mode::Spatial)
        }
        _ => (FieldConfig::QuarticCoupled { g: 0.5 + rng.gen_range(0.0..1.0) }, Mode::Planar),
    };
    let mut x = r3(rng, 0.6);
    let mut p = r3(rng, 0.8);
    if mode == Mode::Planar {
        x[2] = 0.0;
        p[2] = 0.0;
    }
    let branch = if rng.gen_bool(0.5) { Branch::Plus } else { Branch::Minus };
    (cfg, PhaseState::new(x, p), branch, mode)
}

fn criterion_1() -> Outcome {
    let params = ParticleParams::new(1.0, 1.0, 1.5, 0.1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut unit, mut norm, mut hopf_err, mut phase) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut done = 0;
    while done < 20 {
        let (cfg, z0, branch, mode) = random_scenario(&mut rng);
        let flow = Flow::new(cfg, params, branch, mode);
        // characteristic period of the spin precession at the start point
        let probe = flow.integrate(&z0, 1e-3, &FlowOptions::tol(1e-12))?;
        let w0 = rotation_vector_at(&probe, 0.0).norm();
        if w0 < 0.1 {
            continue;
        }
        let t_final = 10.0 * TAU / w0;
        let tr = flow.integrate(&z0, t_final, &FlowOptions::tol(1e-12))?;
        let s0 = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
        let d0 = su2_from_spin(&s0);
        let h = transport_spin(&tr, &SpinOptions { d0, ..Default::default() })?;
        unit = unit.max(h.max_unitarity_defect());
        for fr in &h.frames {
            norm = norm.max((hopf(&fr.d)?.norm() - 1.0).abs());
        }
        let s = precess_spin(&tr, &s0, &h.times())?;
        for (fr, sv) in h.frames.iter().zip(&s) {
            hopf_err = hopf_err.max((fr.s - sv).amax());
        }
        phase = phase.max(phase_decomposition(&tr, &h)?.residual.abs());
        done += 1;
    }
    let pass = unit <= 1e-10 && norm <= 1e-10 && hopf_err <= 1e-8 && phase <= 1e-6;
    Ok((pass, format!("unitarity {unit:.1e}, |s| drift {norm:.1e}, Hopf {hopf_err:.1e}, phase residual {phase:.1e}")))
}

fn criterion_2() -> Outcome {
    let params = ParticleParams::new(1.0, 1.0, 1.0, 0.1)?;
    let (b0, p) = (1.3, 0.6);
    let cfg = FieldConfig::UniformMagnetic { b: [0.0, 0.0, b0] };
    let flow = Flow::new(cfg.clone(), params, Branch::Plus, Mode::Planar);
    let eps = (p * p + 1.0f64).sqrt();
    let omega = params.e * params.c * b0 / eps;
    let r = p * params.c / (params.e * b0);
    let x = Vec3::new(r, 0.0, 0.0);
    let z0 = PhaseState { x, p: Vec3::new(0.0, p, 0.0) + (params.e / params.c) * cfg.eval(&x)?.a };
    let period = TAU / omega;
    let tr = flow.integrate(&z0, period, &FlowOptions::tol(1e-12))?;
    // swept angle after one predicted period
    let q = tr.final_state().x;
    let freq_err = (q[1].atan2(q[0]) / TAU).abs();
    let h = transport_spin(&tr, &SpinOptions::default())?;
    let d = h.final_frame().d;
    let w = rotation_vector_at(&tr, 0.0);
    let exact = su2_exp(&(w * (0.5 * period)));
    let d_err = max_abs(&(d + Su2::identity())).max(max_abs(&(d - exact)));
    let eta_err = (h.final_frame().eta - PI).abs();
    let factor_err = (spin_trace_factor(&d) + 2.0).abs();
    let pass = freq_err <= 1e-8 && d_err <= 1e-9 && eta_err <= 1e-9 && factor_err <= 1e-9;
    Ok((
        pass,
        format!("frequency {freq_err:.1e} rel, |d(T) + 1| {d_err:.1e}, eta - pi {eta_err:.1e}, trace factor {factor_err:.1e}"),
    ))
}

fn criterion_3() -> Outcome {
    let params = ParticleParams::new(1.0, 1.0, 1.0, 0.1)?;
    let mut worst = 0.0f64;
    let mut switched = false;
    for th0 in [PI / 6.0, PI / 3.0, PI / 2.0 - 0.2, PI / 2.0 + 0.2] {
        let b = Vec3::new(th0.sin(), 0.0, th0.cos());
        let flow = Flow::new(FieldConfig::UniformMagnetic { b: b.into() }, params, Branch::Plus, Mode::Spatial);
        let period = TAU * params.rest_energy() / (params.e * params.c);
        let tr = flow.integrate(&PhaseState::new([0.0; 3], [0.0; 3]), period, &FlowOptions::default())?;
        let h = transport_spin(&tr, &SpinOptions::default())?;
        let dec = phase_decomposition(&tr, &h)?;
        let half = 0.5 * (1.0 - th0.cos()) * TAU;
        worst = worst.max(wrap_pi(dec.eta_geo - half).abs().min(wrap_pi(dec.eta_geo + half).abs()));
        if th0 > PI / 2.0 {
            switched = !h.track.switches.is_empty();
        }
    }
    Ok((worst <= 1e-6 && switched, format!("max |eta_geo - half solid angle| {worst:.1e}, gauge switch seen: {switched}")))
}

fn criterion_4() -> Outcome {
    let params = ParticleParams::new(1.0, 1.0, 2.0, 0.1)?;
    let search = ShootingSearch { n_per_axis: 1, ..Default::default() };
    let cases = [
        (FieldConfig::HarmonicScalar { k: [1.0, 0.8, 1.2] }, [0.2, -0.1, 0.3], [-0.3, 0.2, 0.1]),
        (FieldConfig::UniformMagnetic { b: [0.3, -0.2, 0.9] }, [0.1, 0.3, -0.2], [0.0, -0.2, 0.25]),
        (FieldConfig::QuarticCoupled { g: 0.7 }, [0.35, 0.1, 0.0], [-0.2, 0.3, 0.1]),
    ];
    let (mut hj, mut vv) = (0.0f64, 0.0f64);
    let t = 0.8;
    let h = 1e-5;
    for (cfg, x, y) in cases {
        let (x, y) = (Vec3::from(x), Vec3::from(y));
        let o = find_connecting_orbits(&x, &y, t, Branch::Plus, &cfg, &params, &search)?.remove(0);
        let solve = |x: &Vec3, y: &Vec3, t: f64| -> Result<f64, Box<dyn std::error::Error>> {
            let c = connect_from_seed(x, y, t, Branch::Plus, &cfg, &params, o.p0, &search)?.ok_or("continuation failed")?;
            Ok(c.r)
        };
        let energy = o.traj.energy();
        let dt = (solve(&x, &y, t + h)? - solve(&x, &y, t - h)?) / (2.0 * h);
        hj = hj.max((dt + energy).abs() / energy.abs());
        let pt = o.traj.final_state().p;
        for i in 0..3 {
            let mut e = Vec3::zeros();
            e[i] = h;
            let dx = (solve(&(x + e), &y, t)? - solve(&(x - e), &y, t)?) / (2.0 * h);
            let dy = (solve(&x, &(y + e), t)? - solve(&x, &(y - e), t)?) / (2.0 * h);
            hj = hj.max((dx - pt[i]).abs() / pt.norm().max(1.0));
            hj = hj.max((dy + o.p0[i]).abs() / o.p0.norm().max(1.0));
        }
        let det = JacobianBlocks::split(&o.traj.final_jacobian().ok_or("no jacobian")?).dx_dp0.determinant();
        vv = vv.max((o.d_vv * o.d_vv * det.abs() - 1.0).abs());
    }
    // free particle
    let mut free = 0.0f64;
    let (m, c) = (params.m, params.c);
    for (x, t) in [([0.3, -0.2, 0.5], 0.7), ([1.0, 0.4, -0.6], 1.5), ([0.05, 0.0, 0.1], 0.2)] {
        let x = Vec3::from(x);
        let o = find_connecting_orbits(&x, &Vec3::zeros(), t, Branch::Plus, &FieldConfig::Zero, &params, &search)?.remove(0);
        let exact = -m * c * (c * c * t * t - x.norm_squared()).sqrt();
        free = free.max((o.r - exact).abs());
    }
    let pass = hj <= 1e-6 && vv <= 1e-10 && free <= 1e-9;
    Ok((pass, format!("HJ gradients {hj:.1e}, Van Vleck {vv:.1e}, free action {free:.1e}")))
}

fn quartic_orbits(energy: f64, params: &ParticleParams, t_max: f64) -> Result<Vec<PeriodicOrbit>, Box<dyn std::error::Error>> {
    let search = OrbitSearch { t_max, horizon: 10.0, n_random: 80, n_brake: 96, region: 4.0, ..Default::default() };
    let set = find_periodic_orbits(energy, Branch::Plus, &FieldConfig::QuarticCoupled { g: 1.0 }, params, &search)?;
    Ok(set.orbits)
}

/// Primitive orbits of the shortest family: periods within 4% of the minimum.
fn shortest_family(orbits: Vec<PeriodicOrbit>) -> Vec<PeriodicOrbit> {
    let t_min = orbits.iter().filter(|o| o.repetition == 1).map(|o| o.period).fold(f64::INFINITY, f64::min);
    orbits.into_iter().filter(|o| o.repetition == 1 && o.period < 1.04 * t_min).collect()
}

fn criterion_5() -> Outcome {
    let params = ParticleParams::new(1.0, 1.0, 1.0, 0.05)?;
    let cfg = FieldConfig::QuarticCoupled { g: 1.0 };
    let e0 = 1.5;
    let orbit = shortest_family(quartic_orbits(e0, &params, 10.0)?).into_iter().next().ok_or("no orbit found")?;
    let h = 1e-3;
    let es: Vec<f64> = (-2..=2).map(|k| e0 + h * k as f64).collect();
    let scan = action_energy_scan(&orbit, &cfg, &params, Mode::Planar, &es)?;
    let s: Vec<f64> = scan.iter().map(|x| x.1).collect();
    let ds = (s[0] - 8.0 * s[1] + 8.0 * s[3] - s[4]) / (12.0 * h);
    let ds_err = (ds - orbit.period).abs() / orbit.period;
    let flow = Flow::new(cfg, params, Branch::Plus, Mode::Planar);
    let tr = flow.integrate(&orbit.start, orbit.period, &FlowOptions::tol(1e-12))?;
    let w0 = orbit.stability_weight();
    let mut sym = monodromy_symplectic_defect(&orbit.monodromy);
    let mut weight = 0.0f64;
    for frac in [0.13, 0.37, 0.61, 0.89] {
        let inv = orbit_invariants(&flow, &tr.state_at(frac * orbit.period), orbit.period, 1e-12)?;
        sym = sym.max(monodromy_symplectic_defect(&inv.monodromy));
        weight = weight.max((1.0 / inv.det_m_minus_i.abs().sqrt() - w0).abs() / w0);
    }
    let pass = ds_err <= 1e-5 && sym <= 1e-7 && weight <= 1e-7;
    Ok((pass, format!("dS/dE vs T {ds_err:.1e} rel, symplectic defect {sym:.1e}, weight relocation {weight:.1e} rel")))
}

fn criterion_6() -> Outcome {
    // the shortest orbits have S ~ 1.8 .. 2.4, so S/hbar >= 175 at hbar = 0.01
    let hbar = 0.01;
    let params = ParticleParams::new(1.0, 1.0, 2.0, hbar)?;
    let cfg = FieldConfig::QuarticCoupled { g: 1.0 };
    let tf = build_test_function(11.5, TestShape::SmoothBump)?;
    let opts = OracleOptions { n_tau: 16, n_u: 11, n_t: 11, t_min: 1.0, ..Default::default() };
    let mut worst = [0.0f64; 2];
    let mut monotone = true;
    let mut s_min = f64::INFINITY;
    let mut lines = Vec::new();
    for e_kin in [0.16, 0.18, 0.2, 0.22, 0.24] {
        let energy = params.rest_energy() + e_kin;
        let orbits = shortest_family(quartic_orbits(energy, &params, 11.0)?);
        let tubes: Vec<TubeRegion> =
            orbits.iter().map(|o| TubeRegion { orbit: o.clone(), half_width: 0.5, time_half_width: 1.6 }).collect();
        let samples = sample_tubes(energy, &cfg, &params, &tubes, &opts)?;
        let mut errs = [0.0; 2];
        for (k, h) in [hbar, 0.5 * hbar].into_iter().enumerate() {
            let oracle = samples.evaluate(h, &tf)?;
            let terms = orbit_sum(energy, &orbits, &tf, h, SpinWeight::Transported)?;
            let expect: Complex64 = terms.iter().map(|c| c.value).sum();
            let got: Complex64 = oracle.per_tube.iter().sum();
            errs[k] = (got - expect).norm() / expect.norm();
            s_min = s_min.min(orbits.iter().map(|o| o.action / h).fold(f64::INFINITY, f64::min));
            if k == 0 {
                lines.push(format!(
                    "E_kin {e_kin}: {} orbits, oracle {:.4e} vs orbit sum {:.4e}",
                    orbits.len(),
                    oracle.value,
                    2.0 * expect.re
                ));
            }
        }
        monotone &= errs[1] < errs[0];
        worst[0] = worst[0].max(errs[0]);
        worst[1] = worst[1].max(errs[1]);
        lines.last_mut().unwrap().push_str(&format!(", rel err {:.2e} -> {:.2e}", errs[0], errs[1]));
    }
    for l in &lines {
        println!("    {l}");
    }
    let pass = worst[0] <= 0.1 && worst[1] <= 0.1 && monotone && s_min >= 50.0;
    Ok((
        pass,
        format!(
            "max rel err {:.2e} (hbar) / {:.2e} (hbar/2), monotone {monotone}, min S/hbar {s_min:.0}",
            worst[0], worst[1]
        ),
    ))
}

fn criterion_7() -> Outcome {
    let params = ParticleParams::new(1.0, 1.0, 1.0, 0.05)?;
    let cfg = FieldConfig::HarmonicScalar { k: [2.0, 1.3, 0.0] };
    let energy = 1.6;
    let opts = WeylOptions { branches: vec![Branch::Plus], x_half: 2.0, p_half: 1.5, samples: 4_000_000, seed: 7, ..Default::default() };
    let mc = shell_volume_mc(energy, Branch::Plus, &cfg, &params, &opts)?;
    let grid = shell_volume_grid(energy, Branch::Plus, &cfg, &params, 2.0, 200)?;
    let sigmas = (mc.volume - grid).abs() / mc.std_error;
    // the hbar^-2 law is the spatial one: (2 pi hbar)^-(f - 1) with f = 3
    let tf = build_test_function(2.0, TestShape::SmoothBump)?;
    let spatial = FieldConfig::HarmonicScalar { k: [2.0, 1.3, 1.7] };
    let opts3 = WeylOptions { mode: Mode::Spatial, samples: 1_000_000, ..opts.clone() };
    let w1 = weyl_term(energy, &spatial, &params, &tf, &opts3)?;
    let half = ParticleParams { hbar: 0.5 * params.hbar, ..params };
    let w2 = weyl_term(energy, &spatial, &half, &tf, &opts3)?;
    let scaling = (w2.value / w1.value - 4.0).abs();
    let pass = sigmas <= 3.0 && scaling <= 1e-12;
    Ok((pass, format!("MC {:.6} +- {:.1e} vs grid {grid:.6} ({sigmas:.2} SE), hbar^-2 scaling defect {scaling:.1e}", mc.volume, mc.std_error)))
}

fn criterion_8() -> Outcome {
    let params = ParticleParams::new(1.0, 1.0, 1.0, 0.05)?;
    let energy = 1.5;
    let orbits = quartic_orbits(energy, &params, 12.0)?;
    let tf = build_test_function(12.5, TestShape::SmoothBump)?;
    let spinless = orbit_sum(energy, &orbits, &tf, params.hbar, SpinWeight::Identity)?;
    let mut worst = 0.0f64;
    for (o, c) in orbits.iter().zip(&spinless) {
        // standard Gutzwiller weight T# / sqrt|det(M - 1)| of a spinless particle
        let gutzwiller = o.primitive_period / o.det_m_minus_i.abs().sqrt();
        let expect = Complex64::from_polar(
            tf.rho_hat(o.period) / TAU * 2.0 * gutzwiller,
            o.action / params.hbar - 0.5 * PI * o.mu as f64,
        );
        worst = worst.max((c.value - expect).norm() / expect.norm().max(1e-300));
    }
    let pass = !orbits.is_empty() && worst <= 1e-12;
    Ok((pass, format!("{} orbits, max rel deviation from 2 x Gutzwiller {worst:.1e}", orbits.len())))
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("spin-sector identities", criterion_1),
        ("uniform-field closed forms", criterion_2),
        ("geometric phase = half solid angle", criterion_3),
        ("Hamilton-Jacobi and Van Vleck", criterion_4),
        ("periodic-orbit thermodynamics", criterion_5),
        ("trace oracle vs orbit sum", criterion_6),
        ("Weyl volume and scaling", criterion_7),
        ("spinless reduction", criterion_8),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match run() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!(
            "criterion {} [{}] {name}: {detail} ({:.1} s)",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
