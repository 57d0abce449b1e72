use std::fmt;

use diracsc::dynamics::{Branch, Mode, ParticleParams};
use diracsc::fields::FieldConfig;
use diracsc::trace::TestShape;
use serde::Deserialize;

/// Parse or validation failure, located by its key path.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() || self.path == "." {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

fn err(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { path: path.to_string(), message: message.into() }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub particle: ParticleParams,
    #[serde(deserialize_with = "strict_field")]
    pub field: FieldConfig,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Output directory; `--out` takes precedence.
    pub out: Option<String>,
    pub fields_check: Option<FieldsCheckConfig>,
    pub propagate: Option<PropagateConfig>,
    pub spin: Option<SpinConfig>,
    pub kernel: Option<KernelConfig>,
    pub orbits: Option<OrbitsConfig>,
    pub trace: Option<TraceConfig>,
    pub oracle: Option<OracleConfig>,
}

/// Field scenario; also rejects extra keys next to `kind = "zero"`, which
/// the tagged enum alone would ignore.
fn strict_field<'de, D: serde::Deserializer<'de>>(de: D) -> Result<FieldConfig, D::Error> {
    use serde::de::Error;
    let table = toml::Table::deserialize(de)?;
    if table.get("kind").and_then(|k| k.as_str()) == Some("zero") {
        if let Some(extra) = table.keys().find(|k| *k != "kind") {
            return Err(D::Error::custom(format!("unknown field `{extra}` for kind `zero`")));
        }
    }
    FieldConfig::deserialize(table).map_err(D::Error::custom)
}

fn default_mode() -> Mode {
    Mode::Spatial
}

fn default_seed() -> u64 {
    1
}

fn default_tol() -> f64 {
    1e-10
}

fn default_branch() -> Branch {
    Branch::Plus
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldsCheckConfig {
    #[serde(default = "default_check_points")]
    pub points: usize,
    /// Half-width of the box the check points are drawn from.
    #[serde(default = "default_one")]
    pub half_width: f64,
    #[serde(default = "default_fd_step")]
    pub step: f64,
}

fn default_check_points() -> usize {
    64
}

fn default_one() -> f64 {
    1.0
}

fn default_fd_step() -> f64 {
    1e-4
}

impl Default for FieldsCheckConfig {
    fn default() -> Self {
        Self { points: default_check_points(), half_width: 1.0, step: default_fd_step() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagateConfig {
    pub x: [f64; 3],
    pub p: [f64; 3],
    pub t_final: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_branch")]
    pub branch: Branch,
    /// Uniformly spaced output rows, including both end points.
    #[serde(default = "default_rows")]
    pub rows: usize,
}

fn default_rows() -> usize {
    101
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpinConfig {
    pub s0: [f64; 3],
    #[serde(default = "default_max_rotation")]
    pub max_rotation: f64,
}

fn default_max_rotation() -> f64 {
    0.02
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub x: [f64; 3],
    pub y: [f64; 3],
    pub t: f64,
    #[serde(default = "default_seed_grid")]
    pub seeds_per_axis: usize,
    #[serde(default = "default_p_extent")]
    pub p_extent: f64,
    #[serde(default = "default_shoot_tol")]
    pub tol: f64,
}

fn default_seed_grid() -> usize {
    5
}

fn default_p_extent() -> f64 {
    2.0
}

fn default_shoot_tol() -> f64 {
    1e-9
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitsConfig {
    #[serde(default)]
    pub energies: Vec<f64>,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    #[serde(default = "default_branches")]
    pub branches: Vec<Branch>,
    #[serde(default = "default_random_seeds")]
    pub random_seeds: usize,
    #[serde(default = "default_brake_seeds")]
    pub brake_seeds: usize,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_region")]
    pub region: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_t_max() -> f64 {
    10.0
}

fn default_branches() -> Vec<Branch> {
    vec![Branch::Plus]
}

fn default_random_seeds() -> usize {
    40
}

fn default_brake_seeds() -> usize {
    24
}

fn default_horizon() -> f64 {
    10.0
}

fn default_region() -> f64 {
    3.0
}

impl Default for OrbitsConfig {
    fn default() -> Self {
        Self {
            energies: Vec::new(),
            t_max: default_t_max(),
            branches: default_branches(),
            random_seeds: default_random_seeds(),
            brake_seeds: default_brake_seeds(),
            horizon: default_horizon(),
            region: default_region(),
            tol: default_tol(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub e_a: f64,
    pub e_b: f64,
    pub width: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeylConfig {
    #[serde(default = "default_mc_samples")]
    pub samples: usize,
    #[serde(default = "default_box")]
    pub x_half: f64,
    #[serde(default = "default_box")]
    pub p_half: f64,
    #[serde(default = "default_band")]
    pub band: f64,
    #[serde(default = "default_weyl_branches")]
    pub branches: Vec<Branch>,
}

fn default_mc_samples() -> usize {
    1_000_000
}

fn default_box() -> f64 {
    3.0
}

fn default_band() -> f64 {
    0.01
}

fn default_weyl_branches() -> Vec<Branch> {
    vec![Branch::Plus, Branch::Minus]
}

impl Default for WeylConfig {
    fn default() -> Self {
        Self {
            samples: default_mc_samples(),
            x_half: default_box(),
            p_half: default_box(),
            band: default_band(),
            branches: default_weyl_branches(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceConfig {
    pub energies: Vec<f64>,
    /// Support half-width of the test function.
    pub t_max: f64,
    #[serde(default = "default_shape")]
    pub shape: TestShape,
    pub window: Option<WindowConfig>,
    /// Externally supplied levels for the windowed spectral sum.
    #[serde(default)]
    pub levels: Vec<f64>,
    #[serde(default)]
    pub weyl: WeylConfig,
}

fn default_shape() -> TestShape {
    TestShape::SmoothBump
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleRegionConfig {
    /// Tubes around every primitive orbit with period up to `max_period`.
    Tubes { half_width: f64, time_half_width: f64, max_period: f64 },
    Box { centre: [f64; 3], half: [f64; 3], points_per_axis: usize, t_range: [f64; 2], time_nodes: usize },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub energy: f64,
    pub t_max: f64,
    #[serde(default = "default_shape")]
    pub shape: TestShape,
    #[serde(default)]
    pub t_min: f64,
    pub region: OracleRegionConfig,
    #[serde(default = "default_n_tau")]
    pub n_tau: usize,
    #[serde(default = "default_cheb")]
    pub n_u: usize,
    #[serde(default = "default_cheb")]
    pub n_t: usize,
    #[serde(default = "default_taper")]
    pub taper: f64,
    #[serde(default = "default_phase_step")]
    pub phase_step: f64,
}

fn default_n_tau() -> usize {
    32
}

fn default_cheb() -> usize {
    21
}

fn default_taper() -> f64 {
    0.5
}

fn default_phase_step() -> f64 {
    0.4
}

fn positive(path: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(err(path, format!("must be positive and finite, got {v}")))
    }
}

fn finite(path: &str, v: &[f64]) -> Result<(), ConfigError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(err(path, "must be finite"))
    }
}

fn at_least(path: &str, v: usize, min: usize) -> Result<(), ConfigError> {
    if v >= min {
        Ok(())
    } else {
        Err(err(path, format!("must be at least {min}, got {v}")))
    }
}

/// Parses and validates a TOML run configuration. Unknown keys are errors.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let de = toml::Deserializer::new(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        err(&path, inner.message().trim().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.particle;
        positive("particle.m", p.m)?;
        positive("particle.c", p.c)?;
        positive("particle.hbar", p.hbar)?;
        finite("particle.e", &[p.e])?;
        self.field.validate().map_err(|e| err("field", e.to_string()))?;
        if self.mode == Mode::Planar && !self.field.is_planar_compatible() {
            return Err(err("mode", "planar mode needs B along z and E in the xy plane for this field"));
        }
        if let Some(c) = &self.fields_check {
            at_least("fields_check.points", c.points, 1)?;
            positive("fields_check.half_width", c.half_width)?;
            positive("fields_check.step", c.step)?;
        }
        if let Some(c) = &self.propagate {
            finite("propagate.x", &c.x)?;
            finite("propagate.p", &c.p)?;
            positive("propagate.t_final", c.t_final)?;
            positive("propagate.tol", c.tol)?;
            at_least("propagate.rows", c.rows, 2)?;
            if self.mode == Mode::Planar && (c.x[2] != 0.0 || c.p[2] != 0.0) {
                return Err(err("propagate", "planar mode needs x[2] = p[2] = 0"));
            }
        }
        if let Some(c) = &self.spin {
            finite("spin.s0", &c.s0)?;
            let n = c.s0.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-10 {
                return Err(err("spin.s0", format!("must be a unit vector, |s0| = {n}")));
            }
            positive("spin.max_rotation", c.max_rotation)?;
            if self.propagate.is_none() {
                return Err(err("propagate", "the spin subcommand transports along the [propagate] trajectory"));
            }
        }
        if let Some(c) = &self.kernel {
            finite("kernel.x", &c.x)?;
            finite("kernel.y", &c.y)?;
            positive("kernel.t", c.t)?;
            at_least("kernel.seeds_per_axis", c.seeds_per_axis, 1)?;
            positive("kernel.p_extent", c.p_extent)?;
            positive("kernel.tol", c.tol)?;
        }
        if let Some(c) = &self.orbits {
            finite("orbits.energies", &c.energies)?;
            positive("orbits.t_max", c.t_max)?;
            positive("orbits.horizon", c.horizon)?;
            positive("orbits.region", c.region)?;
            positive("orbits.tol", c.tol)?;
            if c.branches.is_empty() {
                return Err(err("orbits.branches", "must name at least one branch"));
            }
        }
        if let Some(c) = &self.trace {
            if c.energies.is_empty() {
                return Err(err("trace.energies", "must not be empty"));
            }
            finite("trace.energies", &c.energies)?;
            positive("trace.t_max", c.t_max)?;
            if let Some(w) = &c.window {
                finite("trace.window", &[w.e_a, w.e_b])?;
                positive("trace.window.width", w.width)?;
                if !(w.e_b - w.e_a > 2.0 * w.width) {
                    return Err(err("trace.window", "needs e_b - e_a > 2 width"));
                }
            }
            at_least("trace.weyl.samples", c.weyl.samples, 1)?;
            positive("trace.weyl.x_half", c.weyl.x_half)?;
            positive("trace.weyl.p_half", c.weyl.p_half)?;
            positive("trace.weyl.band", c.weyl.band)?;
        }
        if let Some(c) = &self.oracle {
            finite("oracle.energy", &[c.energy])?;
            positive("oracle.t_max", c.t_max)?;
            if !(c.t_min >= 0.0) {
                return Err(err("oracle.t_min", "must be non-negative"));
            }
            if !(c.taper > 0.0 && c.taper <= 1.0) {
                return Err(err("oracle.taper", "must lie in (0, 1]"));
            }
            positive("oracle.phase_step", c.phase_step)?;
            match &c.region {
                OracleRegionConfig::Tubes { half_width, time_half_width, max_period } => {
                    if self.mode != Mode::Planar {
                        return Err(err("oracle.region", "tubes need planar mode"));
                    }
                    positive("oracle.region.half_width", *half_width)?;
                    positive("oracle.region.time_half_width", *time_half_width)?;
                    positive("oracle.region.max_period", *max_period)?;
                }
                OracleRegionConfig::Box { centre, half, points_per_axis, t_range, time_nodes } => {
                    finite("oracle.region.centre", centre)?;
                    finite("oracle.region.half", half)?;
                    at_least("oracle.region.points_per_axis", *points_per_axis, 1)?;
                    at_least("oracle.region.time_nodes", *time_nodes, 3)?;
                    if !(t_range[1] > t_range[0] && t_range[0] >= c.t_min) {
                        return Err(err("oracle.region.t_range", "needs t_min <= t_range[0] < t_range[1]"));
                    }
                }
            }
        }
        Ok(())
    }
}
