//! Run reports and artifact emission: resolving actuation patterns,
//! executing a scenario end to end, and writing the CSV/JSON outputs.
//!
//! Internal quantities are radians and meters; the run report and the
//! downsampled plot data use degrees and millimeters (they mirror
//! hardware-facing summaries), and every file starts with a `#` comment
//! documenting its units. Floats are written with Rust's shortest
//! round-trip formatting, so outputs are byte-reproducible per seed. The
//! one documented exception is the `wall_time_s` field of the run
//! report, which measures the run rather than describing it.

use crate::actuation::{evolve, select_pattern, ActuationError, ActuationPattern, PatternFile};
use crate::mesh::{analyze_constraints, ConstraintSystem, MeshState, MeshTopology};
use crate::scenario::{
    bundled_pattern, Materialized, OutputFormat, PatternPlan, Scenario, ScenarioError,
};
use crate::sim::{run_simulation, MetricsFrame, RunResult, SimError, SimInputs, TrajectoryFrame};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("pattern file {path} does not fit this scenario: {message}")]
    PatternMismatch { path: String, message: String },
    #[error("pattern JSON error in {path}: {source}")]
    PatternJson {
        path: String,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Actuation(#[from] ActuationError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Summary of one executed scenario, written as `report.json`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunReport {
    pub dof: usize,
    pub joint_count: usize,
    pub pattern: PatternSummary,
    /// Mean orientation error over nodes at the final frame, degrees.
    pub final_e_o_mean_deg: f64,
    /// Mean position error over nodes at the final frame, millimeters.
    pub final_e_p_mean_mm: f64,
    /// Wall-clock duration of the run, seconds. Not covered by the
    /// byte-reproducibility guarantee.
    pub wall_time_s: f64,
    /// Simulation RNG seed.
    pub seed: u64,
    /// SHA-256 of the canonical (key-sorted, defaults-materialized)
    /// config JSON.
    pub config_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PatternSummary {
    pub rows: Vec<usize>,
    pub fitness: f64,
    pub sensitivity: Option<f64>,
    /// Seed of the search that produced the pattern.
    pub search_seed: u64,
    pub single_axis_per_joint: bool,
}

/// Everything produced by [`execute`].
#[derive(Debug)]
pub struct RunArtifacts {
    pub report: RunReport,
    pub result: RunResult,
    pub pattern: ActuationPattern,
    pub search_seed: u64,
    /// The mesh the run was performed on, for artifact writers.
    pub topology: MeshTopology,
}

/// Obtains the actuation pattern a scenario asks for: loads and
/// validates a file or bundled pattern, or runs the genetic search plus
/// sensitivity refinement. Returns the pattern and the search seed that
/// produced it. A zero-dof mesh yields the empty pattern ("no motors
/// needed").
pub fn resolve_pattern(
    plan: &PatternPlan,
    topology: &MeshTopology,
    state: &MeshState,
    system: &ConstraintSystem,
) -> Result<(ActuationPattern, u64), ReportError> {
    if system.dof == 0 {
        let empty = PatternFile {
            mesh: crate::actuation::PatternMesh {
                n: topology.n,
                m: topology.m,
            },
            dof: 0,
            rows: Vec::new(),
            joint_axis_labels: Vec::new(),
            fitness: 1.0,
            sensitivity: Some(0.0),
            seed: 0,
        };
        return Ok((empty.into_pattern(), 0));
    }
    match plan {
        PatternPlan::File(path) => {
            let src = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
                path: path.clone(),
                source,
            })?;
            let file: PatternFile =
                serde_json::from_str(&src).map_err(|source| ReportError::PatternJson {
                    path: path.display().to_string(),
                    source,
                })?;
            validate_pattern_file(&file, &path.display().to_string(), topology, system)?;
            let seed = file.seed;
            Ok((file.into_pattern(), seed))
        }
        PatternPlan::Bundled(name) => {
            let src = bundled_pattern(name).expect("validated at load");
            let path = format!("bundled:{name}");
            let file: PatternFile = serde_json::from_str(src)
                .map_err(|source| ReportError::PatternJson { path: path.clone(), source })?;
            validate_pattern_file(&file, &path, topology, system)?;
            let seed = file.seed;
            Ok((file.into_pattern(), seed))
        }
        PatternPlan::Search {
            config,
            probe_angle,
            top_k,
        } => {
            let population = evolve(&system.null_relative, config)?;
            let best =
                select_pattern(topology, state, system, &population, *probe_angle, *top_k)?;
            Ok((best, config.rng_seed))
        }
    }
}

fn validate_pattern_file(
    file: &PatternFile,
    path: &str,
    topology: &MeshTopology,
    system: &ConstraintSystem,
) -> Result<(), ReportError> {
    let mismatch = |message: String| {
        Err(ReportError::PatternMismatch {
            path: path.to_string(),
            message,
        })
    };
    if file.mesh.n != topology.n || file.mesh.m != topology.m {
        return mismatch(format!(
            "pattern is for a {}x{} mesh, scenario builds {}x{}",
            file.mesh.n, file.mesh.m, topology.n, topology.m
        ));
    }
    if file.dof != system.dof || file.rows.len() != system.dof {
        return mismatch(format!(
            "pattern has {} rows for dof {}, configuration has dof {}",
            file.rows.len(),
            file.dof,
            system.dof
        ));
    }
    let limit = topology.relative_dim();
    let mut seen = std::collections::BTreeSet::new();
    for &r in &file.rows {
        if !(6..limit).contains(&r) {
            return mismatch(format!("row {r} outside the joint rows 6..{limit}"));
        }
        if !seen.insert(r) {
            return mismatch(format!("row {r} listed twice"));
        }
    }
    Ok(())
}

/// Runs a scenario end to end: build, place (or load the pattern),
/// simulate. Writing artifacts is separate, see [`write_artifacts`].
pub fn execute(scenario: &Scenario) -> Result<RunArtifacts, ReportError> {
    let started = Instant::now();
    let Materialized {
        topology,
        initial,
        target,
        controller,
        sim,
        pattern: plan,
        outputs: _,
    } = scenario.materialize()?;
    let system = analyze_constraints(&topology, &initial, None);
    let (pattern, search_seed) = resolve_pattern(&plan, &topology, &initial, &system)?;
    let inputs = SimInputs {
        topology: &topology,
        initial: &initial,
        pattern_rows: &pattern.rows,
        shape: &target,
        controller,
        sim: sim.clone(),
    };
    let result = run_simulation(&inputs)?;
    let last = result.frames.last().expect("runs record at least one frame");
    let report = RunReport {
        dof: system.dof,
        joint_count: topology.joint_count(),
        pattern: PatternSummary {
            rows: pattern.rows.clone(),
            fitness: pattern.fitness,
            sensitivity: pattern.sensitivity,
            search_seed,
            single_axis_per_joint: pattern.single_axis_per_joint(),
        },
        final_e_o_mean_deg: last.errors.e_o_mean.to_degrees(),
        final_e_p_mean_mm: last.errors.e_p_mean * 1000.0,
        wall_time_s: started.elapsed().as_secs_f64(),
        seed: sim.rng_seed,
        config_hash: scenario.config_hash(),
    };
    Ok(RunArtifacts {
        report,
        result,
        pattern,
        search_seed,
        topology,
    })
}

/// Writes the scenario's outputs into its output directory: always the
/// resolved config and the pattern actually used, plus whichever formats
/// the config selects. Returns the paths written.
pub fn write_artifacts(
    scenario: &Scenario,
    topology: &MeshTopology,
    artifacts: &RunArtifacts,
) -> Result<Vec<PathBuf>, ReportError> {
    let out = &scenario.outputs.directory;
    std::fs::create_dir_all(out).map_err(|source| ReportError::Io {
        path: out.clone(),
        source,
    })?;
    let mut written = Vec::new();
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source: std::io::Error| ReportError::Io { path, source }
    };

    let resolved = out.join("resolved_config.json");
    std::fs::write(&resolved, scenario.canonical_json() + "\n").map_err(io_err(&resolved))?;
    written.push(resolved);

    let pattern_path = out.join("pattern.json");
    let file = PatternFile::new(topology, &artifacts.pattern, artifacts.search_seed);
    let pattern_json =
        serde_json::to_string_pretty(&file).expect("pattern serializes") + "\n";
    std::fs::write(&pattern_path, pattern_json).map_err(io_err(&pattern_path))?;
    written.push(pattern_path);

    for format in &scenario.outputs.formats {
        let path = match format {
            OutputFormat::TrajectoryCsv => {
                let path = out.join("trajectory.csv");
                write_trajectory_csv(&path, topology, &artifacts.result.trajectory)
                    .map_err(io_err(&path))?;
                path
            }
            OutputFormat::MetricsCsv => {
                let path = out.join("metrics.csv");
                write_metrics_csv(&path, &artifacts.result.frames).map_err(io_err(&path))?;
                path
            }
            OutputFormat::ReportJson => {
                let path = out.join("report.json");
                let json = serde_json::to_string_pretty(&artifacts.report)
                    .expect("report serializes")
                    + "\n";
                std::fs::write(&path, json).map_err(io_err(&path))?;
                path
            }
            OutputFormat::PlotDataCsv => {
                let path = out.join("plot_data.csv");
                write_plot_data_csv(&path, &artifacts.result.frames, scenario.outputs.plot_points)
                    .map_err(io_err(&path))?;
                path
            }
        };
        written.push(path);
    }
    Ok(written)
}

/// Full state history: time, then position and orientation quaternion
/// per node.
pub fn write_trajectory_csv(
    path: &Path,
    topology: &MeshTopology,
    frames: &[TrajectoryFrame],
) -> std::io::Result<()> {
    let mut out = String::new();
    out.push_str(
        "# trajectory: t in seconds, positions in meters, orientations as unit quaternions\n",
    );
    out.push_str("t_s");
    for idx in 0..topology.node_count() {
        let (i, j) = topology.coords(idx);
        for field in ["px_m", "py_m", "pz_m", "qw", "qx", "qy", "qz"] {
            out.push_str(&format!(",node_{i}_{j}_{field}"));
        }
    }
    out.push('\n');
    for frame in frames {
        out.push_str(&format!("{}", frame.t));
        for pose in &frame.poses {
            let q = pose.orientation.as_quat();
            out.push_str(&format!(
                ",{},{},{},{},{},{},{}",
                pose.position.x, pose.position.y, pose.position.z, q.w, q.x, q.y, q.z
            ));
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Error summaries and commanded rates per control tick.
pub fn write_metrics_csv(path: &Path, frames: &[MetricsFrame]) -> std::io::Result<()> {
    let dof = frames.first().map_or(0, |f| f.pi.len());
    let mut out = String::new();
    out.push_str(
        "# metrics: t in seconds, orientation errors in radians, position errors in meters, \
         commanded rates in radians per second\n",
    );
    out.push_str("t_s,e_o_mean_rad,e_o_p10_rad,e_o_p90_rad,e_p_mean_m,e_p_p10_m,e_p_p90_m");
    for k in 1..=dof {
        out.push_str(&format!(",pi_{k}_rad_s"));
    }
    out.push('\n');
    for frame in frames {
        let e = &frame.errors;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}",
            frame.t, e.e_o_mean, e.e_o_p10, e.e_o_p90, e.e_p_mean, e.e_p_p10, e.e_p_p90
        ));
        for k in 0..frame.pi.len() {
            out.push_str(&format!(",{}", frame.pi[k]));
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Downsampled error bands in display units (degrees / millimeters),
/// roughly `points` rows plus the final frame.
pub fn write_plot_data_csv(
    path: &Path,
    frames: &[MetricsFrame],
    points: usize,
) -> std::io::Result<()> {
    let mut out = String::new();
    out.push_str(
        "# plot data, downsampled: t in seconds, orientation errors in degrees, \
         position errors in millimeters\n",
    );
    out.push_str("t_s,e_o_mean_deg,e_o_p10_deg,e_o_p90_deg,e_p_mean_mm,e_p_p10_mm,e_p_p90_mm\n");
    if frames.is_empty() {
        return write_atomic(path, out.as_bytes());
    }
    let stride = frames.len().div_ceil(points.max(1)).max(1);
    let mut indices: Vec<usize> = (0..frames.len()).step_by(stride).collect();
    if *indices.last().unwrap() != frames.len() - 1 {
        indices.push(frames.len() - 1);
    }
    for idx in indices {
        let frame = &frames[idx];
        let e = &frame.errors;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            frame.t,
            e.e_o_mean.to_degrees(),
            e.e_o_p10.to_degrees(),
            e.e_o_p90.to_degrees(),
            e.e_p_mean * 1000.0,
            e.e_p_p10 * 1000.0,
            e.e_p_p90 * 1000.0
        ));
    }
    write_atomic(path, out.as_bytes())
}

/// Writes via a temp file in the same directory then renames, so
/// interrupted runs never leave half-written artifacts.
fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_mesh, InitialSurface};
    use crate::scenario::Overrides;

    fn tiny_scenario(out: &Path) -> Scenario {
        let src = r#"{
            "mesh": {
                "n": 2, "m": 2, "l_m": 0.025, "L_m": 0.04,
                "init_surface": {"surface": {"named": "paraboloid",
                    "transform": {"amplitude_m": 2.0, "offset_m": -0.005,
                                  "x0_m": 0.025, "y0_m": 0.025, "sx_m": 1.0, "sy_m": 1.0}}}
            },
            "ga": {"search": {"sensitivity_top_k": 3}},
            "shape": {"named": "paraboloid",
                "transform": {"amplitude_m": 1.0, "offset_m": -0.0025,
                              "x0_m": 0.025, "y0_m": 0.025, "sx_m": 1.0, "sy_m": 1.0}},
            "sim": {"duration_s": 0.1, "control_dt_s": 0.01}
        }"#;
        let mut s = Scenario::from_json_str(src).unwrap();
        s.apply_overrides(&Overrides {
            out_dir: Some(out.to_path_buf()),
            ..Overrides::default()
        });
        s
    }

    #[test]
    fn execute_writes_reproducible_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let scenario = tiny_scenario(&dir.path().join("run"));
        let mat = scenario.materialize().unwrap();
        let artifacts = execute(&scenario).unwrap();
        let written = write_artifacts(&scenario, &mat.topology, &artifacts).unwrap();
        assert!(written.iter().all(|p| p.exists()));

        let metrics_a = std::fs::read(dir.path().join("run/metrics.csv")).unwrap();
        let report_a: RunReport = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("run/report.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(report_a.dof, artifacts.report.dof);
        assert_eq!(report_a.config_hash, scenario.config_hash());

        // Rerun: everything but wall time must be identical.
        let artifacts2 = execute(&scenario).unwrap();
        write_artifacts(&scenario, &mat.topology, &artifacts2).unwrap();
        let metrics_b = std::fs::read(dir.path().join("run/metrics.csv")).unwrap();
        assert_eq!(metrics_a, metrics_b, "metrics CSV must be bit-identical");
        let mut ra = artifacts.report.clone();
        let mut rb = artifacts2.report.clone();
        ra.wall_time_s = 0.0;
        rb.wall_time_s = 0.0;
        assert_eq!(ra, rb);
    }

    #[test]
    fn pattern_files_round_trip_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let scenario = tiny_scenario(&dir.path().join("run"));
        let mat = scenario.materialize().unwrap();
        let system = analyze_constraints(&mat.topology, &mat.initial, None);
        let (pattern, seed) =
            resolve_pattern(&mat.pattern, &mat.topology, &mat.initial, &system).unwrap();
        let file = PatternFile::new(&mat.topology, &pattern, seed);
        let path = dir.path().join("pattern.json");
        std::fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();

        let loaded =
            resolve_pattern(&PatternPlan::File(path.clone()), &mat.topology, &mat.initial, &system)
                .unwrap();
        assert_eq!(loaded.0.rows, pattern.rows);

        // A pattern for the wrong mesh is rejected with a clear message.
        let (other_topo, other_state) =
            build_mesh(1, 3, 0.025, &InitialSurface::Flat, &[]).unwrap();
        let other_system = analyze_constraints(&other_topo, &other_state, None);
        let err = resolve_pattern(
            &PatternPlan::File(path),
            &other_topo,
            &other_state,
            &other_system,
        )
        .unwrap_err();
        match err {
            ReportError::PatternMismatch { message, .. } => {
                assert!(message.contains("2x2"), "message: {message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_dof_mesh_needs_no_motors() {
        let (topo, state) = build_mesh(1, 1, 0.025, &InitialSurface::Flat, &[]).unwrap();
        let system = analyze_constraints(&topo, &state, None);
        assert_eq!(system.dof, 0);
        let plan = PatternPlan::Search {
            config: crate::actuation::GaConfig::default(),
            probe_angle: 0.1,
            top_k: None,
        };
        let (pattern, _) = resolve_pattern(&plan, &topo, &state, &system).unwrap();
        assert!(pattern.rows.is_empty());
    }

    #[test]
    fn csv_headers_document_units() {
        let dir = tempfile::tempdir().unwrap();
        let scenario = tiny_scenario(&dir.path().join("run"));
        let mat = scenario.materialize().unwrap();
        let artifacts = execute(&scenario).unwrap();
        write_artifacts(&scenario, &mat.topology, &artifacts).unwrap();

        let metrics = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
        assert!(metrics.starts_with("# metrics:"));
        assert!(metrics.contains("radians"));
        let header = metrics.lines().nth(1).unwrap();
        assert!(header.starts_with("t_s,e_o_mean_rad"));
        // 10 ticks + final frame.
        assert_eq!(metrics.lines().count(), 2 + 11);

        let traj = std::fs::read_to_string(dir.path().join("run/trajectory.csv")).unwrap();
        let header = traj.lines().nth(1).unwrap();
        assert_eq!(header.split(',').count(), 1 + 4 * 7);
        assert!(header.contains("node_1_1_px_m"));
        assert!(header.contains("node_2_2_qz"));

        let plot = std::fs::read_to_string(dir.path().join("run/plot_data.csv")).unwrap();
        assert!(plot.contains("degrees"));
        assert!(plot.lines().count() <= 2 + 11);
    }

    #[test]
    fn plot_downsampling_keeps_ends() {
        let dir = tempfile::tempdir().unwrap();
        let scenario = tiny_scenario(&dir.path().join("run"));
        let artifacts = execute(&scenario).unwrap();
        let path = dir.path().join("plot.csv");
        write_plot_data_csv(&path, &artifacts.result.frames, 3).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let rows: Vec<&str> = text.lines().skip(2).collect();
        assert!(rows.len() <= 5, "rows {}", rows.len());
        assert!(rows.first().unwrap().starts_with("0,"));
        let last = rows.last().unwrap();
        let t_last: f64 = last.split(',').next().unwrap().parse().unwrap();
        assert!((t_last - 0.1).abs() < 1e-12);
    }
}
