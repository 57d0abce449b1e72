use std::io;
use std::ops::Index;
use std::path::PathBuf;

use diracsc::dynamics::{Branch, DynamicsError, Flow, FlowOptions, Mode, PhaseState, Trajectory};
use diracsc::fields::{verify_field_consistency, FieldError, Vec3};
use diracsc::orbits::{check_energy, find_periodic_orbits, OrbitError, OrbitSearch, PeriodicOrbit};
use diracsc::propagator::{semiclassical_kernel, PropagatorError, ShootingSearch};
use diracsc::spin::{
    holonomy_angles, phase_decomposition, precess_spin, spin_trace_factor, su2_from_spin, transport_spin, SpinError,
    SpinOptions, Su2,
};
use diracsc::trace::{
    build_test_function, build_window, direct_trace_oracle, orbit_sum, quantum_side, weyl_term, BoxRegion,
    OracleOptions, OracleRegion, SpinWeight, TestFunction, TraceError, TraceResult, TubeRegion, WeylOptions,
};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::{ConfigError, OracleRegionConfig, OrbitsConfig, RunConfig};
use crate::output::{Cell, OutDir};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    FieldsCheck,
    Propagate,
    Spin,
    Kernel,
    Orbits,
    Trace,
    Oracle,
}

/// Failure of a run, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(#[from] ConfigError),
    #[error("integration failure: {0}")]
    Integration(String),
    #[error("caustic: {0}")]
    Caustic(String),
    #[error("orbit search failure: {0}")]
    OrbitSearch(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Integration(_) => 3,
            CliError::Caustic(_) => 4,
            CliError::OrbitSearch(_) => 5,
            CliError::Io(_) => 1,
        }
    }
}

fn config_err(path: &str, message: impl Into<String>) -> CliError {
    CliError::Config(ConfigError { path: path.into(), message: message.into() })
}

impl From<FieldError> for CliError {
    fn from(e: FieldError) -> Self {
        config_err("field", e.to_string())
    }
}

impl From<DynamicsError> for CliError {
    fn from(e: DynamicsError) -> Self {
        match e {
            DynamicsError::InvalidParams(m) => config_err("particle", m),
            e => CliError::Integration(e.to_string()),
        }
    }
}

impl From<SpinError> for CliError {
    fn from(e: SpinError) -> Self {
        match e {
            SpinError::Dynamics(d) => d.into(),
            e => CliError::Integration(e.to_string()),
        }
    }
}

impl From<PropagatorError> for CliError {
    fn from(e: PropagatorError) -> Self {
        match e {
            PropagatorError::Caustic { .. } => CliError::Caustic(e.to_string()),
            PropagatorError::InvalidInput(m) => config_err("", m),
            PropagatorError::Dynamics(d) => d.into(),
            PropagatorError::Spin(s) => s.into(),
        }
    }
}

impl From<OrbitError> for CliError {
    fn from(e: OrbitError) -> Self {
        match e {
            OrbitError::Dynamics(d) => d.into(),
            OrbitError::Propagator(p) => p.into(),
            e => CliError::OrbitSearch(e.to_string()),
        }
    }
}

impl From<TraceError> for CliError {
    fn from(e: TraceError) -> Self {
        match e {
            TraceError::InvalidInput(m) | TraceError::Domain(m) => config_err("", m),
            TraceError::NonIsolated { .. } => CliError::OrbitSearch(e.to_string()),
            TraceError::Caustic(ref cells) => {
                let list: Vec<String> = cells.iter().map(|c| format!("x = {:?}, t = {}", c.x, c.t)).collect();
                CliError::Caustic(format!("{e}\n  cells: {}", list.join("\n         ")))
            }
            TraceError::FamilyLost { .. } => CliError::Caustic(e.to_string()),
            TraceError::Dynamics(d) => d.into(),
            TraceError::Propagator(p) => p.into(),
            TraceError::Orbit(o) => o.into(),
        }
    }
}

/// Files written and notices raised by one run.
#[derive(Debug, Default)]
pub struct RunReport {
    pub files: Vec<PathBuf>,
    pub notices: Vec<String>,
}

fn section<'a, T>(block: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
    block.as_ref().ok_or_else(|| config_err(name, "section required by this subcommand is missing"))
}

pub fn execute(cfg: &RunConfig, command: Command, out: &mut OutDir) -> Result<RunReport, CliError> {
    let mut notices = Vec::new();
    match command {
        Command::FieldsCheck => fields_check(cfg, out)?,
        Command::Propagate => propagate(cfg, out)?,
        Command::Spin => spin(cfg, out)?,
        Command::Kernel => kernel(cfg, out)?,
        Command::Orbits => orbits(cfg, out, &mut notices)?,
        Command::Trace => trace(cfg, out, &mut notices)?,
        Command::Oracle => oracle(cfg, out, &mut notices)?,
    }
    Ok(RunReport { files: out.written.clone(), notices })
}

fn fields_check(cfg: &RunConfig, out: &mut OutDir) -> Result<(), CliError> {
    let c = cfg.fields_check.clone().unwrap_or_default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let points: Vec<Vec3> = (0..c.points)
        .map(|_| {
            let mut x = Vec3::from([0.0; 3].map(|_: f64| rng.gen_range(-c.half_width..c.half_width)));
            if cfg.mode == Mode::Planar {
                x[2] = 0.0;
            }
            x
        })
        .collect();
    let report = verify_field_consistency(&cfg.field, &points, c.step);
    out.json(
        "fields_check.json",
        &json!({
            "field": cfg.field,
            "mode": cfg.mode,
            "points": c.points,
            "step": c.step,
            "max_div_a": report.max_div_a,
            "max_e_residual": report.max_e_residual,
            "max_b_residual": report.max_b_residual,
            "max_residual": report.max(),
        }),
    )?;
    Ok(())
}

fn trajectory(cfg: &RunConfig) -> Result<Trajectory, CliError> {
    let c = section(&cfg.propagate, "propagate")?;
    let flow = Flow::new(cfg.field.clone(), cfg.particle, c.branch, cfg.mode);
    Ok(flow.integrate(&PhaseState::new(c.x, c.p), c.t_final, &FlowOptions::tol(c.tol))?)
}

fn propagate(cfg: &RunConfig, out: &mut OutDir) -> Result<(), CliError> {
    let c = section(&cfg.propagate, "propagate")?;
    let tr = trajectory(cfg)?;
    let rows: Vec<Vec<Cell>> = (0..c.rows)
        .map(|k| {
            let (t, z) = if k + 1 == c.rows {
                (c.t_final, tr.final_state())
            } else {
                let t = c.t_final * k as f64 / (c.rows - 1) as f64;
                (t, tr.state_at(t))
            };
            let kin = tr.flow.kinetic(&z);
            let mut row = vec![Cell::F(t)];
            row.extend(z.x.iter().chain(z.p.iter()).chain(kin.pi.iter()).map(|&v| Cell::F(v)));
            row.push(Cell::F(tr.flow.hamiltonian(&z)));
            row
        })
        .collect();
    out.csv(
        "trajectory.csv",
        &["t", "x", "y", "z", "p_x", "p_y", "p_z", "pi_x", "pi_y", "pi_z", "energy"],
        &rows,
    )?;
    out.json(
        "propagate.json",
        &json!({
            "branch": c.branch,
            "t_final": c.t_final,
            "tol": c.tol,
            "initial": tr.initial_state(),
            "final": tr.final_state(),
            "energy": tr.energy(),
            "relative_energy_drift": tr.relative_energy_drift(),
            "rhs_evaluations": tr.n_rhs,
        }),
    )?;
    Ok(())
}

#[derive(Serialize)]
struct Matrix2Json {
    re: [[f64; 2]; 2],
    im: [[f64; 2]; 2],
}

fn su2_json(d: &Su2) -> Matrix2Json {
    Matrix2Json {
        re: [[d[(0, 0)].re, d[(0, 1)].re], [d[(1, 0)].re, d[(1, 1)].re]],
        im: [[d[(0, 0)].im, d[(0, 1)].im], [d[(1, 0)].im, d[(1, 1)].im]],
    }
}

fn spin(cfg: &RunConfig, out: &mut OutDir) -> Result<(), CliError> {
    let c = section(&cfg.spin, "spin")?;
    let tr = trajectory(cfg)?;
    let s0 = Vec3::from(c.s0);
    let h = transport_spin(&tr, &SpinOptions { d0: su2_from_spin(&s0), max_rotation: c.max_rotation })?;
    let direct = precess_spin(&tr, &s0, &h.times())?;
    let hopf_err = h.frames.iter().zip(&direct).map(|(f, s)| (f.s - s).amax()).fold(0.0, f64::max);
    let rows: Vec<Vec<Cell>> = h
        .frames
        .iter()
        .map(|f| {
            let gauge = match f.gauge {
                diracsc::spin::Gauge::North => "north",
                diracsc::spin::Gauge::South => "south",
            };
            vec![
                Cell::F(f.t),
                Cell::F(f.s[0]),
                Cell::F(f.s[1]),
                Cell::F(f.s[2]),
                Cell::F(f.theta),
                Cell::F(f.phi_angle),
                Cell::F(f.eta),
                gauge.into(),
            ]
        })
        .collect();
    out.csv("spin.csv", &["t", "s_x", "s_y", "s_z", "theta", "phi", "phase", "gauge"], &rows)?;
    let last = h.final_frame();
    let (theta, eta) = holonomy_angles(&last.d);
    out.json(
        "spin.json",
        &json!({
            "s0": c.s0,
            "final_s": [last.s[0], last.s[1], last.s[2]],
            "final_d": su2_json(&last.d),
            "theta": theta,
            "eta": eta,
            "trace_factor": spin_trace_factor(&last.d),
            "decomposition": phase_decomposition(&tr, &h)?,
            "gauge_switches": h.track.switches.len(),
            "max_unitarity_defect": h.max_unitarity_defect(),
            "hopf_consistency": hopf_err,
        }),
    )?;
    Ok(())
}

fn kernel(cfg: &RunConfig, out: &mut OutDir) -> Result<(), CliError> {
    let c = section(&cfg.kernel, "kernel")?;
    let search = ShootingSearch {
        mode: cfg.mode,
        p_extent: c.p_extent,
        n_per_axis: c.seeds_per_axis,
        tol: c.tol,
        ..Default::default()
    };
    let k = semiclassical_kernel(&Vec3::from(c.x), &Vec3::from(c.y), c.t, &cfg.field, &cfg.particle, &search)?;
    let contributions: Vec<serde_json::Value> = k
        .contributions
        .iter()
        .map(|o| {
            json!({
                "branch": o.branch,
                "principal_function": o.r,
                "van_vleck": o.d_vv,
                "morse_index": o.nu,
                "theta": o.theta,
                "eta": o.eta,
                "matrix": split(&o.matrix),
            })
        })
        .collect();
    out.json(
        "kernel.json",
        &json!({ "x": c.x, "y": c.y, "t": c.t, "matrix": split(&k.matrix), "contributions": contributions }),
    )?;
    Ok(())
}

fn split<M: Index<(usize, usize), Output = Complex64>>(m: &M) -> serde_json::Value {
    let re: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| m[(i, j)].re).collect()).collect();
    let im: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| m[(i, j)].im).collect()).collect();
    json!({ "re": re, "im": im })
}

fn orbit_search(cfg: &RunConfig, oc: &OrbitsConfig, t_max: f64) -> OrbitSearch {
    OrbitSearch {
        mode: cfg.mode,
        n_random: oc.random_seeds,
        n_brake: oc.brake_seeds,
        horizon: oc.horizon,
        region: oc.region,
        newton_tol: oc.tol,
        t_max,
        rng_seed: cfg.seed,
        ..Default::default()
    }
}

/// Isolated orbits; the rest are reported as notices.
fn isolated(orbits: Vec<PeriodicOrbit>, energy: f64, notices: &mut Vec<String>) -> Vec<PeriodicOrbit> {
    let (keep, drop): (Vec<_>, Vec<_>) = orbits.into_iter().partition(|o| o.isolated);
    for o in &drop {
        notices.push(format!(
            "E = {energy}: excluded non-isolated orbit (T = {}, |det(M - 1)| = {:e})",
            o.period, o.det_m_minus_i
        ));
    }
    keep
}

fn orbit_json(id: usize, o: &PeriodicOrbit) -> serde_json::Value {
    json!({
        "id": id,
        "branch": o.branch,
        "energy": o.energy,
        "period": o.period,
        "primitive_period": o.primitive_period,
        "repetition": o.repetition,
        "start": o.start,
        "action": o.action,
        "det_m_minus_i": o.det_m_minus_i,
        "stability_weight": o.stability_weight(),
        "mu": o.mu,
        "conjugate_points": o.nu,
        "theta": o.theta,
        "eta": o.eta,
        "spin_factor": o.spin_factor,
        "stable": o.stable,
        "isolated": o.isolated,
    })
}

fn orbits(cfg: &RunConfig, out: &mut OutDir, notices: &mut Vec<String>) -> Result<(), CliError> {
    let oc = section(&cfg.orbits, "orbits")?;
    if oc.energies.is_empty() {
        return Err(config_err("orbits.energies", "must not be empty"));
    }
    let search = orbit_search(cfg, oc, oc.t_max);
    let mut blocks = Vec::new();
    let mut rows = Vec::new();
    for &energy in &oc.energies {
        for &branch in &oc.branches {
            check_energy(energy, branch, &cfg.field, &cfg.particle)?;
            let set = find_periodic_orbits(energy, branch, &cfg.field, &cfg.particle, &search)?;
            if set.orbits.is_empty() {
                notices.push(format!("E = {energy}, branch {}: no periodic orbits found", branch.label()));
            }
            for (id, o) in set.orbits.iter().enumerate() {
                rows.push(vec![
                    Cell::F(energy),
                    branch.label().into(),
                    id.into(),
                    Cell::F(o.period),
                    Cell::F(o.primitive_period),
                    o.repetition.into(),
                    Cell::F(o.action),
                    o.mu.into(),
                    Cell::F(o.det_m_minus_i),
                    Cell::F(o.theta),
                    Cell::F(o.eta),
                    Cell::F(o.spin_factor),
                    (if o.isolated { "true" } else { "false" }).into(),
                ]);
            }
            let rejected: Vec<serde_json::Value> =
                set.rejected.iter().map(|(t, why)| json!({ "period": t, "reason": why })).collect();
            blocks.push(json!({
                "energy": energy,
                "branch": branch,
                "orbits": set.orbits.iter().enumerate().map(|(i, o)| orbit_json(i, o)).collect::<Vec<_>>(),
                "rejected": rejected,
            }));
        }
    }
    out.json("orbits.json", &blocks)?;
    out.csv(
        "orbits.csv",
        &["energy", "branch", "id", "period", "primitive_period", "repetition", "action", "mu", "det_m_minus_i", "theta", "eta", "spin_factor", "isolated"],
        &rows,
    )?;
    Ok(())
}

fn test_function(t_max: f64, shape: diracsc::trace::TestShape) -> Result<TestFunction, CliError> {
    Ok(build_test_function(t_max, shape)?)
}

fn trace(cfg: &RunConfig, out: &mut OutDir, notices: &mut Vec<String>) -> Result<(), CliError> {
    let tc = section(&cfg.trace, "trace")?;
    let oc = cfg.orbits.clone().unwrap_or_default();
    let tf = test_function(tc.t_max, tc.shape)?;
    let window = tc.window.as_ref().map(|w| build_window(w.e_a, w.e_b, w.width)).transpose()?;
    let search = orbit_search(cfg, &oc, tc.t_max);
    let weyl_opts = WeylOptions {
        mode: cfg.mode,
        branches: tc.weyl.branches.clone(),
        x_half: tc.weyl.x_half,
        p_half: tc.weyl.p_half,
        samples: tc.weyl.samples,
        seed: cfg.seed,
        band: tc.weyl.band,
        ..Default::default()
    };
    let mut results = Vec::new();
    let mut rows = Vec::new();
    for &energy in &tc.energies {
        let weyl = weyl_term(energy, &cfg.field, &cfg.particle, &tf, &weyl_opts)?;
        let mut found = Vec::new();
        for &branch in &oc.branches {
            if let Err(e) = check_energy(energy, branch, &cfg.field, &cfg.particle) {
                notices.push(format!("E = {energy}: {e}; branch skipped"));
                continue;
            }
            found.extend(find_periodic_orbits(energy, branch, &cfg.field, &cfg.particle, &search)?.orbits);
        }
        let found = isolated(found, energy, notices);
        let terms = orbit_sum(energy, &found, &tf, cfg.particle.hbar, SpinWeight::Transported)?;
        if terms.iter().all(|c| c.value.norm() == 0.0) {
            notices.push(format!("E = {energy}: no orbits in support (T_max = {}); only the Weyl term remains", tc.t_max));
        }
        let result = TraceResult::assemble(energy, weyl.value, &terms);
        let quantum = match (&window, tc.levels.is_empty()) {
            (Some(w), false) => Some(quantum_side(&tc.levels, w, &tf, energy, cfg.particle.hbar)),
            _ => None,
        };
        rows.push(vec![
            Cell::F(energy),
            Cell::F(result.weyl),
            Cell::F(weyl.std_error),
            Cell::F(result.oscillatory()),
            Cell::F(result.total),
            Cell::F(result.imag_total),
            terms.len().into(),
            quantum.map_or(Cell::S(String::new()), Cell::F),
        ]);
        let orbit_terms: Vec<serde_json::Value> = terms
            .iter()
            .map(|c| {
                json!({
                    "id": c.id,
                    "branch": c.branch,
                    "period": c.period,
                    "repetition": c.repetition,
                    "action": c.action,
                    "mu": c.mu,
                    "amplitude": c.amplitude,
                    "value": [c.value.re, c.value.im],
                })
            })
            .collect();
        results.push(json!({
            "energy": energy,
            "weyl": result.weyl,
            "weyl_std_error": weyl.std_error,
            "orbit_contributions": result.orbit_contributions.iter().map(|(l, v)| json!([l, v.re, v.im])).collect::<Vec<_>>(),
            "orbits": orbit_terms,
            "total": result.total,
            "imag_total": result.imag_total,
            "quantum_side": quantum,
        }));
    }
    out.json("trace.json", &json!({ "hbar": cfg.particle.hbar, "t_max": tc.t_max, "results": results }))?;
    out.csv(
        "trace.csv",
        &["energy", "weyl", "weyl_std_error", "oscillatory", "total", "imag_total", "orbits", "quantum_side"],
        &rows,
    )?;
    Ok(())
}

fn oracle(cfg: &RunConfig, out: &mut OutDir, notices: &mut Vec<String>) -> Result<(), CliError> {
    let c = section(&cfg.oracle, "oracle")?;
    let tf = test_function(c.t_max, c.shape)?;
    let window = cfg
        .trace
        .as_ref()
        .and_then(|t| t.window.as_ref())
        .map(|w| build_window(w.e_a, w.e_b, w.width))
        .transpose()?;
    let opts = OracleOptions {
        mode: cfg.mode,
        n_tau: c.n_tau,
        n_u: c.n_u,
        n_t: c.n_t,
        taper: c.taper,
        t_min: c.t_min,
        window,
        phase_step: c.phase_step,
        ..Default::default()
    };
    let (region, orbits) = match &c.region {
        OracleRegionConfig::Tubes { half_width, time_half_width, max_period } => {
            let oc = cfg.orbits.clone().unwrap_or_default();
            let set = find_periodic_orbits(c.energy, Branch::Plus, &cfg.field, &cfg.particle, &orbit_search(cfg, &oc, *max_period))?;
            let orbits: Vec<PeriodicOrbit> = isolated(set.orbits, c.energy, notices)
                .into_iter()
                .filter(|o| o.repetition == 1 && o.period <= *max_period)
                .collect();
            if orbits.is_empty() {
                return Err(CliError::OrbitSearch(format!("no primitive orbit with T <= {max_period} at E = {}", c.energy)));
            }
            let tubes = orbits
                .iter()
                .map(|o| TubeRegion { orbit: o.clone(), half_width: *half_width, time_half_width: *time_half_width })
                .collect();
            (OracleRegion::Tubes(tubes), orbits)
        }
        OracleRegionConfig::Box { centre, half, points_per_axis, t_range, time_nodes } => (
            OracleRegion::Box(BoxRegion {
                centre: Vec3::from(*centre),
                half: Vec3::from(*half),
                n_x: *points_per_axis,
                t_range: (t_range[0], t_range[1]),
                n_t: *time_nodes,
                search: ShootingSearch { mode: cfg.mode, ..Default::default() },
            }),
            Vec::new(),
        ),
    };
    let r = direct_trace_oracle(c.energy, &cfg.field, &cfg.particle, &region, &tf, &opts)?;
    let terms = orbit_sum(c.energy, &orbits, &tf, cfg.particle.hbar, SpinWeight::Transported)?;
    let orbit_value: f64 = terms.iter().map(|t| 2.0 * t.value.re).sum();
    out.json(
        "oracle.json",
        &json!({
            "energy": c.energy,
            "hbar": cfg.particle.hbar,
            "value": r.value,
            "error_estimate": r.error_estimate,
            "per_tube": r.per_tube.iter().map(|v| [v.re, v.im]).collect::<Vec<_>>(),
            "nodes": r.nodes,
            "fine_nodes": r.fine_nodes,
            "tube_orbits": terms.iter().map(|t| json!({ "period": t.period, "action": t.action, "value": [t.value.re, t.value.im] })).collect::<Vec<_>>(),
            "orbit_sum": if orbits.is_empty() { None } else { Some(orbit_value) },
        }),
    )?;
    Ok(())
}
