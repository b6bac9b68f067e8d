//! Scenario configuration: JSON schema, bundled presets, validation, and
//! materialization into the runtime types of the other modules.
//!
//! Config files are strict JSON: unknown keys are rejected, and every
//! dimensioned key carries its unit as a suffix (`l_m`, `duration_s`,
//! `omega_max_deg_s`). Angles in configs are degrees, matching hardware
//! data sheets; they are converted to radians exactly once, at
//! materialization. A scenario's canonical form (sorted keys, defaults
//! materialized, shortest round-trip floats) feeds a SHA-256 config hash
//! that is stable under key reordering of the input file.

use crate::actuation::GaConfig;
use crate::control::ControllerConfig;
use crate::mesh::{build_mesh, InitialSurface, MeshError, MeshState, MeshTopology};
use crate::shape::{builtin, ShapeError, ShapeField, Transform};
use crate::sim::{Integrator, NoiseModel, SimConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    /// JSON syntax or schema violation, with a path into the config.
    #[error("config error at `{path}`: {message}")]
    Schema { path: String, message: String },
    /// A structurally valid config with inconsistent values.
    #[error("invalid config at `{path}`: {message}")]
    Invalid { path: String, message: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(
        "unknown preset `{0}`; bundled presets: 3x3_ideal, 3x3_actuation_noise, \
         8x8_ideal, 8x8_state_noise, 20x20_short, 4x8_ironcub_piecewise"
    )]
    UnknownPreset(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Top-level scenario config.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub mesh: MeshSpec,
    /// How the actuation pattern is obtained.
    pub ga: GaSource,
    #[serde(default)]
    pub controller: ControllerSpec,
    /// Target shape the controller tracks.
    pub shape: ShapeSpec,
    #[serde(default)]
    pub sim: SimSpec,
    #[serde(default)]
    pub outputs: OutputSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MeshSpec {
    /// Rows of nodes.
    pub n: usize,
    /// Columns of nodes.
    pub m: usize,
    /// Joint offset magnitude (half the node center spacing), meters.
    pub l_m: f64,
    /// Node square side, meters (geometry metadata).
    #[serde(rename = "L_m")]
    pub square_side_m: f64,
    /// Nodes pinned in addition to the father node `(1,1)`, as 1-based
    /// `[row, column]` grid coordinates. The father is always pinned.
    #[serde(default)]
    pub fixed_nodes: Vec<[usize; 2]>,
    pub init_surface: InitSurfaceSpec,
}

/// Initial configuration: exactly flat, or draped over a surface.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSurfaceSpec {
    Flat,
    Surface(ShapeSpec),
}

/// A shape field: exactly one of `named`, `expression`, or `piecewise`,
/// plus an affine transform.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    /// Name of a bundled field (see the shape module's builtins).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub named: Option<String>,
    /// A raw expression in `x`, `y`, `t`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expression: Option<String>,
    /// Time-scheduled branches; each applies while `t <= until_s`, the
    /// last must have no bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub piecewise: Option<Vec<PiecewiseBranchSpec>>,
    #[serde(default)]
    pub transform: TransformSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PiecewiseBranchSpec {
    pub expression: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub until_s: Option<f64>,
}

/// Affine reparameterization: the raw expression sees
/// `((x - x0_m)/sx_m, (y - y0_m)/sy_m)` and its value is scaled by
/// `amplitude_m` then shifted by `offset_m`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TransformSpec {
    pub amplitude_m: f64,
    pub offset_m: f64,
    pub x0_m: f64,
    pub y0_m: f64,
    pub sx_m: f64,
    pub sy_m: f64,
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self {
            amplitude_m: 1.0,
            offset_m: 0.0,
            x0_m: 0.0,
            y0_m: 0.0,
            sx_m: 1.0,
            sy_m: 1.0,
        }
    }
}

impl TransformSpec {
    fn to_transform(self) -> Transform {
        Transform {
            amplitude: self.amplitude_m,
            offset: self.offset_m,
            x0: self.x0_m,
            y0: self.y0_m,
            sx: self.sx_m,
            sy: self.sy_m,
        }
    }
}

/// Where the actuation pattern comes from: a file, a bundled pattern, or
/// a genetic search. Exactly one must be set.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct GaSource {
    /// Path to a pattern JSON written by a previous placement run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern_file: Option<PathBuf>,
    /// Name of a pattern shipped inside the binary (for meshes whose
    /// search is too slow to run on every simulation).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bundled_pattern: Option<String>,
    /// Run the genetic search with this configuration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search: Option<GaSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GaSpec {
    pub population_size: usize,
    pub crossover_prob: f64,
    pub mutation_prob: f64,
    pub stall_generations: usize,
    pub fitness_threshold: f64,
    pub max_generations: usize,
    pub rng_seed: u64,
    /// Probe rotation for the sensitivity refinement, degrees.
    pub probe_angle_deg: f64,
    /// How many top-fitness candidates get the (expensive) sensitivity
    /// evaluation; `null` evaluates the whole final population.
    pub sensitivity_top_k: Option<usize>,
}

impl Default for GaSpec {
    fn default() -> Self {
        let ga = GaConfig::default();
        Self {
            population_size: ga.population_size,
            crossover_prob: ga.crossover_prob,
            mutation_prob: ga.mutation_prob,
            stall_generations: ga.stall_generations,
            fitness_threshold: ga.fitness_threshold,
            max_generations: ga.max_generations,
            rng_seed: ga.rng_seed,
            probe_angle_deg: 5.0,
            sensitivity_top_k: Some(10),
        }
    }
}

impl GaSpec {
    pub fn to_ga_config(&self) -> GaConfig {
        GaConfig {
            population_size: self.population_size,
            crossover_prob: self.crossover_prob,
            mutation_prob: self.mutation_prob,
            stall_generations: self.stall_generations,
            fitness_threshold: self.fitness_threshold,
            max_generations: self.max_generations,
            rng_seed: self.rng_seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerSpec {
    /// Orientation feedback gain, 1/s.
    pub k_per_s: f64,
    /// Feedforward spin about the current normal, rad/s.
    pub lambda_rad_s: f64,
    /// Time-scaling profile value and rate (dimensionless, 1/s).
    pub sigma: f64,
    pub sigma_dot_per_s: f64,
    /// Per-node tracking weights, row-major; `null` means all ones.
    pub node_weights: Option<Vec<f64>>,
    /// Motor speed limit, degrees per second.
    pub omega_max_deg_s: f64,
    /// Joint range-of-motion half-angle, degrees.
    pub alpha_deg: f64,
    /// Damping of the actuation-matrix inverse.
    pub damping: f64,
    /// Tikhonov floor on the QP Hessian.
    pub w_norm: f64,
    /// Slew regularization toward the previous command.
    pub w_slew: f64,
    pub qp_max_iter: usize,
    pub qp_eps_abs: f64,
    pub qp_eps_rel: f64,
}

impl Default for ControllerSpec {
    fn default() -> Self {
        let c = ControllerConfig::default();
        Self {
            k_per_s: c.k,
            lambda_rad_s: c.lambda,
            sigma: c.sigma,
            sigma_dot_per_s: c.sigma_dot,
            node_weights: None,
            omega_max_deg_s: c.omega_max.to_degrees(),
            alpha_deg: c.alpha.to_degrees(),
            damping: c.damping,
            w_norm: c.w_norm,
            w_slew: c.w_slew,
            qp_max_iter: c.qp.max_iter,
            qp_eps_abs: c.qp.eps_abs,
            qp_eps_rel: c.qp.eps_rel,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SimSpec {
    pub duration_s: f64,
    pub control_dt_s: f64,
    pub integrator: IntegratorSpec,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub baumgarte_gain_per_s: f64,
    pub projection_tol_m: f64,
    pub noise: NoiseSpecDto,
    pub rng_seed: u64,
}

impl Default for SimSpec {
    fn default() -> Self {
        let s = SimConfig::default();
        Self {
            duration_s: s.duration,
            control_dt_s: s.control_dt,
            integrator: IntegratorSpec::Rk45,
            abs_tol: s.abs_tol,
            rel_tol: s.rel_tol,
            baumgarte_gain_per_s: s.baumgarte_gain,
            projection_tol_m: s.projection_tol,
            noise: NoiseSpecDto::None,
            rng_seed: s.rng_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum IntegratorSpec {
    Rk45,
    Rk4,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpecDto {
    None,
    Actuation { max_fraction: f64 },
    State { amplitude_deg: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    pub directory: PathBuf,
    pub formats: Vec<OutputFormat>,
    /// Target number of rows in downsampled plot data.
    pub plot_points: usize,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("out"),
            formats: vec![
                OutputFormat::TrajectoryCsv,
                OutputFormat::MetricsCsv,
                OutputFormat::ReportJson,
                OutputFormat::PlotDataCsv,
            ],
            plot_points: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    TrajectoryCsv,
    MetricsCsv,
    ReportJson,
    PlotDataCsv,
}

/// Everything a pipeline needs, in runtime units (radians, seconds).
pub struct Materialized {
    pub topology: MeshTopology,
    pub initial: MeshState,
    pub target: ShapeField,
    pub controller: ControllerConfig,
    pub sim: SimConfig,
    pub pattern: PatternPlan,
    pub outputs: OutputSpec,
}

/// How to obtain the actuation pattern at run time.
#[derive(Debug, Clone)]
pub enum PatternPlan {
    File(PathBuf),
    Bundled(String),
    Search {
        config: GaConfig,
        probe_angle: f64,
        top_k: Option<usize>,
    },
}

impl Scenario {
    /// Parses strict JSON, reporting the path into the config on error.
    pub fn from_json_str(src: &str) -> Result<Self, ScenarioError> {
        let de = &mut serde_json::Deserializer::from_str(src);
        let scenario: Scenario =
            serde_path_to_error::deserialize(de).map_err(|e| ScenarioError::Schema {
                path: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
        scenario.validate()?;
        Ok(scenario)
    }

    /// Loads `--config`: a bundled preset name, or a path to a JSON file.
    pub fn load(config: &str) -> Result<Self, ScenarioError> {
        if let Some(src) = preset(config) {
            return Self::from_json_str(src);
        }
        let path = Path::new(config);
        if !path.exists() {
            // Not a file either: report as an unknown preset when it does
            // not look like a path.
            if !config.contains('/') && !config.ends_with(".json") {
                return Err(ScenarioError::UnknownPreset(config.to_string()));
            }
        }
        let src = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&src)
    }

    /// Semantic checks beyond the serde schema.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |path: &str, message: String| {
            Err(ScenarioError::Invalid {
                path: path.into(),
                message,
            })
        };
        if self.mesh.n == 0 || self.mesh.m == 0 {
            return invalid("mesh", "n and m must be at least 1".into());
        }
        if !(self.mesh.l_m.is_finite() && self.mesh.l_m > 0.0) {
            return invalid("mesh.l_m", format!("must be > 0, got {}", self.mesh.l_m));
        }
        if !(self.mesh.square_side_m.is_finite() && self.mesh.square_side_m > 0.0) {
            return invalid(
                "mesh.L_m",
                format!("must be > 0, got {}", self.mesh.square_side_m),
            );
        }
        for (idx, &[i, j]) in self.mesh.fixed_nodes.iter().enumerate() {
            if i < 1 || i > self.mesh.n || j < 1 || j > self.mesh.m {
                return invalid(
                    &format!("mesh.fixed_nodes[{idx}]"),
                    format!(
                        "[{i}, {j}] outside the 1-based {}x{} grid",
                        self.mesh.n, self.mesh.m
                    ),
                );
            }
        }
        let sources = [
            ("pattern_file", self.ga.pattern_file.is_some()),
            ("bundled_pattern", self.ga.bundled_pattern.is_some()),
            ("search", self.ga.search.is_some()),
        ];
        if sources.iter().filter(|(_, set)| *set).count() != 1 {
            return invalid(
                "ga",
                format!(
                    "exactly one of pattern_file, bundled_pattern, search must be set; got {}",
                    sources
                        .iter()
                        .filter(|(_, set)| *set)
                        .map(|(name, _)| *name)
                        .collect::<Vec<_>>()
                        .join(", ")
                ),
            );
        }
        if let Some(name) = &self.ga.bundled_pattern {
            if bundled_pattern(name).is_none() {
                return invalid(
                    "ga.bundled_pattern",
                    format!("unknown bundled pattern `{name}`"),
                );
            }
        }
        self.shape.validate("shape")?;
        if let InitSurfaceSpec::Surface(spec) = &self.mesh.init_surface {
            spec.validate("mesh.init_surface.surface")?;
        }
        if let Some(weights) = &self.controller.node_weights {
            if weights.len() != self.mesh.n * self.mesh.m {
                return invalid(
                    "controller.node_weights",
                    format!(
                        "{} weights for {} nodes",
                        weights.len(),
                        self.mesh.n * self.mesh.m
                    ),
                );
            }
        }
        Ok(())
    }

    /// Canonical JSON: typed round-trip materializes defaults, and
    /// serde_json (without order preservation) sorts object keys, so two
    /// configs differing only in key order canonicalize identically.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("scenario serializes");
        serde_json::to_string_pretty(&value).expect("canonical value serializes")
    }

    /// SHA-256 of the canonical form, hex-encoded.
    pub fn config_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_json().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Converts the config into runtime types: builds the mesh (draping
    /// it over the initial surface), parses the target field, and
    /// converts degrees to radians.
    pub fn materialize(&self) -> Result<Materialized, ScenarioError> {
        self.validate()?;
        let target = self.shape.build()?;
        let extra_fixed: Vec<usize> = {
            let mut idx: Vec<usize> = self
                .mesh
                .fixed_nodes
                .iter()
                .map(|&[i, j]| (i - 1) * self.mesh.m + (j - 1))
                .filter(|&k| k != 0)
                .collect();
            idx.sort_unstable();
            idx.dedup();
            idx
        };
        let init_field;
        let init = match &self.mesh.init_surface {
            InitSurfaceSpec::Flat => InitialSurface::Flat,
            InitSurfaceSpec::Surface(spec) => {
                init_field = spec.build()?;
                InitialSurface::Surface(&init_field)
            }
        };
        let (mut topology, initial) =
            build_mesh(self.mesh.n, self.mesh.m, self.mesh.l_m, &init, &extra_fixed)?;
        topology.square_side = self.mesh.square_side_m;

        let c = &self.controller;
        let controller = ControllerConfig {
            k: c.k_per_s,
            lambda: c.lambda_rad_s,
            sigma: c.sigma,
            sigma_dot: c.sigma_dot_per_s,
            node_weights: c.node_weights.clone(),
            omega_max: c.omega_max_deg_s.to_radians(),
            alpha: c.alpha_deg.to_radians(),
            control_dt: self.sim.control_dt_s,
            damping: c.damping,
            w_norm: c.w_norm,
            w_slew: c.w_slew,
            qp: crate::control::QpTolerances {
                max_iter: c.qp_max_iter,
                eps_abs: c.qp_eps_abs,
                eps_rel: c.qp_eps_rel,
            },
        };

        let s = &self.sim;
        let sim = SimConfig {
            duration: s.duration_s,
            control_dt: s.control_dt_s,
            integrator: match s.integrator {
                IntegratorSpec::Rk45 => Integrator::Rk45Adaptive,
                IntegratorSpec::Rk4 => Integrator::Rk4Fixed,
            },
            abs_tol: s.abs_tol,
            rel_tol: s.rel_tol,
            baumgarte_gain: s.baumgarte_gain_per_s,
            projection_tol: s.projection_tol_m,
            noise: match s.noise {
                NoiseSpecDto::None => NoiseModel::None,
                NoiseSpecDto::Actuation { max_fraction } => NoiseModel::Actuation { max_fraction },
                NoiseSpecDto::State { amplitude_deg } => NoiseModel::State {
                    amplitude: amplitude_deg.to_radians(),
                },
            },
            rng_seed: s.rng_seed,
        };

        let pattern = if let Some(path) = &self.ga.pattern_file {
            PatternPlan::File(path.clone())
        } else if let Some(name) = &self.ga.bundled_pattern {
            PatternPlan::Bundled(name.clone())
        } else {
            let spec = self.ga.search.as_ref().expect("validated");
            PatternPlan::Search {
                config: spec.to_ga_config(),
                probe_angle: spec.probe_angle_deg.to_radians(),
                top_k: spec.sensitivity_top_k,
            }
        };

        Ok(Materialized {
            topology,
            initial,
            target,
            controller,
            sim,
            pattern,
            outputs: self.outputs.clone(),
        })
    }

    /// Applies command-line overrides: seeds flow to both the search and
    /// the simulation so one flag pins the whole run.
    pub fn apply_overrides(&mut self, overrides: &Overrides) {
        if let Some(seed) = overrides.seed {
            self.sim.rng_seed = seed;
            if let Some(search) = &mut self.ga.search {
                search.rng_seed = seed;
            }
        }
        if let Some(duration) = overrides.duration_s {
            self.sim.duration_s = duration;
        }
        if let Some(out) = &overrides.out_dir {
            self.outputs.directory = out.clone();
        }
        if let Some(pattern) = &overrides.pattern_file {
            self.ga = GaSource {
                pattern_file: Some(pattern.clone()),
                bundled_pattern: None,
                search: None,
            };
        }
    }
}

/// Command-line overrides applied on top of a loaded scenario.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub duration_s: Option<f64>,
    pub out_dir: Option<PathBuf>,
    pub pattern_file: Option<PathBuf>,
}

impl ShapeSpec {
    fn validate(&self, path: &str) -> Result<(), ScenarioError> {
        let set = self.named.is_some() as u8
            + self.expression.is_some() as u8
            + self.piecewise.is_some() as u8;
        if set != 1 {
            return Err(ScenarioError::Invalid {
                path: path.into(),
                message: "exactly one of named, expression, piecewise must be set".into(),
            });
        }
        if let Some(name) = &self.named {
            if builtin(name).is_none() {
                return Err(ScenarioError::Invalid {
                    path: format!("{path}.named"),
                    message: format!("unknown bundled shape `{name}`"),
                });
            }
        }
        if let Some(branches) = &self.piecewise {
            if branches.is_empty() {
                return Err(ScenarioError::Invalid {
                    path: format!("{path}.piecewise"),
                    message: "needs at least one branch".into(),
                });
            }
            if branches.last().unwrap().until_s.is_some() {
                return Err(ScenarioError::Invalid {
                    path: format!("{path}.piecewise"),
                    message: "the last branch must have no until_s bound".into(),
                });
            }
        }
        let t = &self.transform;
        if t.sx_m == 0.0 || t.sy_m == 0.0 {
            return Err(ScenarioError::Invalid {
                path: format!("{path}.transform"),
                message: "sx_m and sy_m must be nonzero".into(),
            });
        }
        Ok(())
    }

    /// Parses into a shape field (validation assumed done).
    pub fn build(&self) -> Result<ShapeField, ScenarioError> {
        let transform = self.transform.to_transform();
        if let Some(name) = &self.named {
            let field = builtin(name).ok_or_else(|| ScenarioError::Invalid {
                path: "named".into(),
                message: format!("unknown bundled shape `{name}`"),
            })?;
            return Ok(field.with_transform(transform));
        }
        if let Some(src) = &self.expression {
            return ShapeField::from_source(src, transform).map_err(ScenarioError::Shape);
        }
        let branches = self.piecewise.as_ref().expect("validated");
        let parsed: Result<Vec<_>, ShapeError> = branches
            .iter()
            .map(|b| {
                crate::shape::parse_expr(&b.expression)
                    .map(|e| (e, b.until_s))
                    .map_err(ShapeError::from)
            })
            .collect();
        ShapeField::piecewise(parsed?, transform).map_err(ScenarioError::Shape)
    }
}

/// Names of the bundled scenario presets.
pub const PRESET_NAMES: [&str; 6] = [
    "3x3_ideal",
    "3x3_actuation_noise",
    "8x8_ideal",
    "8x8_state_noise",
    "20x20_short",
    "4x8_ironcub_piecewise",
];

/// JSON source of a bundled preset.
pub fn preset(name: &str) -> Option<&'static str> {
    match name {
        "3x3_ideal" => Some(include_str!("../presets/3x3_ideal.json")),
        "3x3_actuation_noise" => Some(include_str!("../presets/3x3_actuation_noise.json")),
        "8x8_ideal" => Some(include_str!("../presets/8x8_ideal.json")),
        "8x8_state_noise" => Some(include_str!("../presets/8x8_state_noise.json")),
        "20x20_short" => Some(include_str!("../presets/20x20_short.json")),
        "4x8_ironcub_piecewise" => Some(include_str!("../presets/4x8_ironcub_piecewise.json")),
        _ => None,
    }
}

/// JSON source of a pattern shipped inside the binary.
pub fn bundled_pattern(name: &str) -> Option<&'static str> {
    match name {
        "20x20" => Some(include_str!("../presets/pattern_20x20.json")),
        _ => None,
    }
}
