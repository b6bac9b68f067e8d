//! Command-line front end for the morphing-mesh toolkit.
//!
//! Four subcommands cover the pipeline: `analyze` reports a scenario's
//! structure and mobility, `place` searches for an actuation pattern,
//! `simulate` runs the control loop and writes artifacts, and `verify`
//! runs the invariant suites and emits a machine-readable summary.
//!
//! Exit codes: 0 on success, 1 on a domain failure (no full-rank pattern,
//! simulation failure, failed invariants), 2 on a configuration error
//! (unreadable or invalid config, bad flags).

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use morphmesh::actuation::ActuationError;
use morphmesh::mesh::{
    analyze_constraints, apply_velocity, build_mesh, constraint_residual, relative_from_actuated,
    InitialSurface, MeshState, MeshTopology,
};
use morphmesh::report::{self, ReportError, RunArtifacts};
use morphmesh::scenario::{Overrides, PatternPlan, Scenario, ScenarioError};
use morphmesh::sim::{run_simulation, RunResult, SimInputs};

#[derive(Parser)]
#[command(
    name = "morphmesh",
    version,
    about = "Morphing-mesh toolkit: mobility analysis, actuator placement, \
             shape-tracking simulation, and invariant verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the configured mesh's structure and mobility.
    Analyze(CommonArgs),
    /// Search for an actuation pattern and write it as JSON.
    Place(CommonArgs),
    /// Run the shape-tracking simulation and write its artifacts.
    Simulate(CommonArgs),
    /// Run the invariant suites; exit 0 only if every one passes.
    Verify(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Bundled preset name or path to a scenario JSON file.
    #[arg(long)]
    config: String,
    /// Override the RNG seed (placement search and simulation noise).
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use this pattern file instead of the configured pattern source.
    #[arg(long)]
    pattern: Option<PathBuf>,
    /// Override the simulated duration, seconds.
    #[arg(long)]
    duration_s: Option<f64>,
    /// Suppress progress output; results and errors only.
    #[arg(long)]
    quiet: bool,
}

impl CommonArgs {
    fn load_scenario(&self) -> Result<Scenario, ScenarioError> {
        let mut scenario = Scenario::load(&self.config)?;
        scenario.apply_overrides(&Overrides {
            seed: self.seed,
            duration_s: self.duration_s,
            out_dir: self.out.clone(),
            pattern_file: self.pattern.clone(),
        });
        scenario.validate()?;
        Ok(scenario)
    }
}

fn main() -> ExitCode {
    if let Err(message) = configure_threads() {
        eprintln!("error: {message}");
        return ExitCode::from(2);
    }
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Analyze(args) => cmd_analyze(args),
        Command::Place(args) => cmd_place(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Verify(args) => cmd_verify(args),
    };
    match outcome {
        Ok(code) => code,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.exit)
        }
    }
}

/// Sizes the global worker pool from `MORPHMESH_THREADS` (used by the
/// internally parallel dense kernels). Unset or empty keeps the default.
fn configure_threads() -> Result<(), String> {
    match std::env::var("MORPHMESH_THREADS") {
        Ok(raw) if !raw.trim().is_empty() => {
            let n: usize = raw
                .trim()
                .parse()
                .map_err(|_| format!("MORPHMESH_THREADS must be a positive integer, got {raw:?}"))?;
            if n == 0 {
                return Err("MORPHMESH_THREADS must be a positive integer, got 0".into());
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| format!("could not size the worker pool: {e}"))
        }
        _ => Ok(()),
    }
}

struct Failure {
    exit: u8,
    message: String,
}

impl From<ScenarioError> for Failure {
    fn from(err: ScenarioError) -> Self {
        Failure {
            exit: 2,
            message: err.to_string(),
        }
    }
}

impl From<ReportError> for Failure {
    fn from(err: ReportError) -> Self {
        let exit = match &err {
            // Bad configuration or malformed/mismatched input files.
            ReportError::Scenario(_)
            | ReportError::PatternJson { .. }
            | ReportError::PatternMismatch { .. } => 2,
            // Domain failures: search exhausted, simulation failed, IO.
            _ => 1,
        };
        Failure {
            exit,
            message: err.to_string(),
        }
    }
}

fn cmd_analyze(args: &CommonArgs) -> Result<ExitCode, Failure> {
    let scenario = args.load_scenario()?;
    let materialized = scenario.materialize().map_err(ReportError::from)?;
    let topology = &materialized.topology;
    let system = analyze_constraints(topology, &materialized.initial, None);
    println!("mesh              {}x{}", topology.n, topology.m);
    println!("nodes             {}", topology.node_count());
    println!("joints            {}", topology.joint_count());
    println!("state dimension   {}", topology.state_dim());
    println!("velocity dim      {}", topology.velocity_dim());
    println!("constraint rows   {}", topology.constraint_dim());
    println!("rank              {}", system.rank);
    println!("dof               {}", system.dof);
    if !args.quiet {
        println!("null residual     {:.3e}", system.null_residual);
        println!("config hash       {}", scenario.config_hash());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_place(args: &CommonArgs) -> Result<ExitCode, Failure> {
    let scenario = args.load_scenario()?;
    let materialized = scenario.materialize().map_err(ReportError::from)?;
    let topology = &materialized.topology;
    let system = analyze_constraints(topology, &materialized.initial, None);
    if !args.quiet {
        println!(
            "searching: {} dof over {} candidate rows",
            system.dof,
            topology.relative_dim().saturating_sub(6)
        );
    }
    let (pattern, search_seed) = report::resolve_pattern(
        &materialized.pattern,
        topology,
        &materialized.initial,
        &system,
    )?;

    let out_dir = &scenario.outputs.directory;
    std::fs::create_dir_all(out_dir).map_err(|source| {
        Failure::from(ReportError::Io {
            path: out_dir.clone(),
            source,
        })
    })?;
    let path = out_dir.join("pattern.json");
    let file = morphmesh::actuation::PatternFile::new(topology, &pattern, search_seed);
    let json = serde_json::to_string_pretty(&file).expect("pattern serializes") + "\n";
    std::fs::write(&path, json).map_err(|source| {
        Failure::from(ReportError::Io {
            path: path.clone(),
            source,
        })
    })?;

    if system.dof == 0 {
        println!("no motors needed: the configured mesh has zero degrees of freedom");
        println!("wrote {}", path.display());
        return Ok(ExitCode::SUCCESS);
    }
    println!("pattern rows      {:?}", pattern.rows);
    println!("fitness           {:.6e}", pattern.fitness);
    match pattern.sensitivity {
        Some(g) => println!("sensitivity       {g:.6e}"),
        None => println!("sensitivity       not evaluated"),
    }
    println!("motors per joint  {}", motors_histogram(&pattern.motors_per_joint));
    println!(
        "single-axis       {}",
        if pattern.single_axis_per_joint() { "yes" } else { "no" }
    );
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

/// Formats the motors-per-joint map as a histogram over motor counts,
/// e.g. `1 motor x 12 joints` or `1 motor x 10, 2 motors x 1`.
fn motors_histogram(motors_per_joint: &BTreeMap<usize, usize>) -> String {
    let mut by_count: BTreeMap<usize, usize> = BTreeMap::new();
    for &count in motors_per_joint.values() {
        *by_count.entry(count).or_insert(0) += 1;
    }
    if by_count.is_empty() {
        return "none".into();
    }
    by_count
        .iter()
        .map(|(motors, joints)| {
            format!(
                "{motors} motor{} x {joints} joint{}",
                if *motors == 1 { "" } else { "s" },
                if *joints == 1 { "" } else { "s" }
            )
        })
        .collect::<Vec<_>>()
        .join(", ")
}

fn cmd_simulate(args: &CommonArgs) -> Result<ExitCode, Failure> {
    let scenario = args.load_scenario()?;
    if !args.quiet {
        println!(
            "simulating {:.2} s at dt {} s",
            scenario.sim.duration_s, scenario.sim.control_dt_s
        );
    }
    let artifacts = report::execute(&scenario)?;
    let written = report::write_artifacts(&scenario, &artifacts.topology, &artifacts)?;
    let report = &artifacts.report;
    println!(
        "final mean errors: orientation {:.3} deg, position {:.3} mm",
        report.final_e_o_mean_deg, report.final_e_p_mean_mm
    );
    if !args.quiet {
        println!(
            "dof {}  fallback ticks {}  max drift {:.3e}  wall {:.1} s",
            report.dof,
            artifacts.result.fallback_ticks,
            artifacts.result.max_drift,
            report.wall_time_s
        );
        for path in &written {
            println!("wrote {}", path.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct InvariantResult {
    name: &'static str,
    pass: bool,
    detail: String,
}

#[derive(Serialize)]
struct VerifySummary {
    config_hash: String,
    pass: bool,
    invariants: Vec<InvariantResult>,
}

fn cmd_verify(args: &CommonArgs) -> Result<ExitCode, Failure> {
    let scenario = args.load_scenario()?;
    let mut invariants = Vec::new();
    let mut record = |name: &'static str, outcome: Result<String, String>, quiet: bool| {
        let (pass, detail) = match outcome {
            Ok(detail) => (true, detail),
            Err(detail) => (false, detail),
        };
        if !quiet {
            eprintln!("{} {name}: {detail}", if pass { "ok  " } else { "FAIL" });
        }
        invariants.push(InvariantResult { name, pass, detail });
    };

    let materialized = scenario.materialize().map_err(ReportError::from)?;
    let topology = &materialized.topology;
    let initial = &materialized.initial;
    let system = analyze_constraints(topology, initial, None);

    record("initial_closure", check_initial_closure(topology, initial), args.quiet);
    record("nullspace_annihilation", check_annihilation(&system), args.quiet);
    record(
        "jacobian_directional_fd",
        check_jacobian_fd(topology, initial, &system),
        args.quiet,
    );

    // Pattern resolution doubles as the fixture check: a corrupted or
    // mismatched pattern file fails here by name.
    let pattern = report::resolve_pattern(&materialized.pattern, topology, initial, &system);
    match &pattern {
        Ok((pattern, _)) => {
            record(
                "pattern_resolves",
                Ok(format!("{} actuated rows", pattern.rows.len())),
                args.quiet,
            );
            record(
                "actuation_roundtrip",
                check_roundtrip(&system, &pattern.rows),
                args.quiet,
            );
        }
        Err(err) => record("pattern_resolves", Err(err.to_string()), args.quiet),
    }

    if let Ok((pattern, _)) = &pattern {
        let burst = run_burst(&materialized, &pattern.rows);
        match burst {
            Ok((first, duration)) => {
                record(
                    "simulation_invariants",
                    check_sim_invariants(&materialized, &first, duration),
                    args.quiet,
                );
                let again = run_burst(&materialized, &pattern.rows);
                record(
                    "determinism",
                    again
                        .map_err(|e| e.to_string())
                        .and_then(|(second, _)| check_bit_identical(&first, &second)),
                    args.quiet,
                );
            }
            Err(err) => record("simulation_invariants", Err(err.to_string()), args.quiet),
        }
    }

    record("randomized_chain", check_randomized_chain(), args.quiet);

    let pass = invariants.iter().all(|i| i.pass);
    let summary = VerifySummary {
        config_hash: scenario.config_hash(),
        pass,
        invariants,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    );
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn check_initial_closure(topology: &MeshTopology, state: &MeshState) -> Result<String, String> {
    let g = constraint_residual(topology, state).abs().max();
    if g <= 1e-6 {
        Ok(format!("|g| = {g:.3e} <= 1e-6 m"))
    } else {
        Err(format!("initial configuration violates constraints: |g| = {g:.3e} m"))
    }
}

fn check_annihilation(system: &morphmesh::mesh::ConstraintSystem) -> Result<String, String> {
    if system.null_residual < 1e-8 {
        Ok(format!(
            "|Jc Z_v| = {:.3e} < 1e-8, dof {}",
            system.null_residual, system.dof
        ))
    } else {
        Err(format!(
            "null basis leaks out of the kernel: |Jc Z_v| = {:.3e}",
            system.null_residual
        ))
    }
}

fn check_jacobian_fd(
    topology: &MeshTopology,
    state: &MeshState,
    system: &morphmesh::mesh::ConstraintSystem,
) -> Result<String, String> {
    if system.dof == 0 {
        return Ok("zero dof, nothing to differentiate".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let eps = 1e-7;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let zeta = DVector::from_fn(system.dof, |_, _| rng.random_range(-1.0..1.0));
        let nu = &system.null_velocity * &zeta;
        let scale = nu.amax().max(1e-12);
        let nu = nu / scale;
        let plus = constraint_residual(topology, &apply_velocity(state, &nu, eps));
        let minus = constraint_residual(topology, &apply_velocity(state, &nu, -eps));
        let fd = (plus - minus) / (2.0 * eps);
        let analytic = system.jacobian.mul_vec(&nu);
        let denom = analytic.amax().max(1.0);
        worst = worst.max((fd - analytic).amax() / denom);
    }
    if worst < 1e-5 {
        Ok(format!("20 feasible directions, worst relative error {worst:.3e}"))
    } else {
        Err(format!(
            "finite differences disagree with the Jacobian: relative error {worst:.3e}"
        ))
    }
}

fn check_roundtrip(
    system: &morphmesh::mesh::ConstraintSystem,
    rows: &[usize],
) -> Result<String, String> {
    if system.dof == 0 {
        return Ok("zero dof, empty pattern".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let pi = DVector::from_fn(system.dof, |_, _| rng.random_range(-1.0..1.0));
        let (relative, _) = relative_from_actuated(system, rows, &pi, 1e12)
            .map_err(|e| format!("actuation expansion failed: {e}"))?;
        for (i, &r) in rows.iter().enumerate() {
            worst = worst.max((relative[r] - pi[i]).abs());
        }
    }
    if worst < 1e-8 {
        Ok(format!("20 random commands, worst round-trip error {worst:.3e}"))
    } else {
        Err(format!(
            "commanded rates do not round-trip through the expansion: {worst:.3e}"
        ))
    }
}

/// Runs a short burst of the configured scenario (at most 0.2 simulated
/// seconds) for the runtime invariants.
fn run_burst(
    materialized: &morphmesh::scenario::Materialized,
    rows: &[usize],
) -> Result<(RunResult, f64), morphmesh::sim::SimError> {
    let mut sim = materialized.sim.clone();
    sim.duration = sim.duration.min(0.2);
    let duration = sim.duration;
    let inputs = SimInputs {
        topology: &materialized.topology,
        initial: &materialized.initial,
        pattern_rows: rows,
        shape: &materialized.target,
        controller: materialized.controller.clone(),
        sim,
    };
    run_simulation(&inputs).map(|r| (r, duration))
}

fn check_sim_invariants(
    materialized: &morphmesh::scenario::Materialized,
    result: &RunResult,
    duration: f64,
) -> Result<String, String> {
    let mut problems = Vec::new();
    if result.max_quat_defect > 1e-9 {
        problems.push(format!(
            "quaternion norms drift {:.3e} > 1e-9",
            result.max_quat_defect
        ));
    }
    if result.max_drift > 1e-4 {
        problems.push(format!("constraint drift {:.3e} > 1e-4 m", result.max_drift));
    }
    let omega_cap = materialized.controller.omega_max + 1e-9;
    let mut pi_max = 0.0f64;
    for frame in &result.frames {
        pi_max = pi_max.max(frame.pi.amax());
    }
    if pi_max > omega_cap {
        problems.push(format!("|pi| = {pi_max:.6} exceeds the motor cap"));
    }
    let align_floor = materialized.controller.alpha.cos() - 1e-3;
    if result.min_pair_alignment < align_floor {
        problems.push(format!(
            "pair alignment {:.6} dips below the range-of-motion cone",
            result.min_pair_alignment
        ));
    }
    for &fixed in &materialized.topology.fixed {
        let before = &materialized.initial.poses[fixed];
        let after = &result.final_state.poses[fixed];
        let moved = (before.position - after.position).amax().max(
            (before.orientation.coords - after.orientation.coords).amax(),
        );
        if moved > 1e-12 {
            problems.push(format!("fixed node {fixed} moved by {moved:.3e}"));
        }
    }
    if problems.is_empty() {
        Ok(format!(
            "{duration:.2} s burst: drift {:.2e}, quat defect {:.2e}, |pi| {:.4} <= cap",
            result.max_drift, result.max_quat_defect, pi_max
        ))
    } else {
        Err(problems.join("; "))
    }
}

fn check_bit_identical(first: &RunResult, second: &RunResult) -> Result<String, String> {
    if first.frames.len() != second.frames.len()
        || first.trajectory.len() != second.trajectory.len()
    {
        return Err("reruns produced different frame counts".into());
    }
    for (a, b) in first.frames.iter().zip(&second.frames) {
        if a.t.to_bits() != b.t.to_bits()
            || a.pi.len() != b.pi.len()
            || a.pi.iter().zip(b.pi.iter()).any(|(x, y)| x.to_bits() != y.to_bits())
            || a.errors.e_o_mean.to_bits() != b.errors.e_o_mean.to_bits()
            || a.errors.e_p_mean.to_bits() != b.errors.e_p_mean.to_bits()
        {
            return Err(format!("frames diverge at t = {}", a.t));
        }
    }
    for (a, b) in first.trajectory.iter().zip(&second.trajectory) {
        for (pa, pb) in a.poses.iter().zip(&b.poses) {
            let same_pos = pa
                .position
                .iter()
                .zip(pb.position.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            let same_rot = pa
                .orientation
                .coords
                .iter()
                .zip(pb.orientation.coords.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            if !same_pos || !same_rot {
                return Err(format!("trajectories diverge at t = {}", a.t));
            }
        }
    }
    Ok(format!(
        "rerun reproduced {} frames bit-for-bit",
        first.frames.len()
    ))
}

/// Runs the structural invariants on a 1x3 chain across 100 random
/// feasible perturbations: closure, kernel annihilation, and the
/// command round-trip on a random full-rank pattern.
fn check_randomized_chain() -> Result<String, String> {
    let surface = morphmesh::shape::builtin("paraboloid").expect("builtin exists");
    let (topology, base) = build_mesh(1, 3, 0.025, &InitialSurface::Surface(&surface), &[])
        .map_err(|e| format!("chain build failed: {e}"))?;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let system = analyze_constraints(&topology, &base, None);
        if system.dof == 0 {
            return Err("chain lost all mobility".into());
        }
        // Random feasible wiggle, then re-analyze at the moved state.
        let zeta = DVector::from_fn(system.dof, |_, _| rng.random_range(-0.05..0.05));
        let nu = &system.null_velocity * &zeta;
        let moved = apply_velocity(&base, &nu, 1.0);
        let projected = morphmesh::mesh::project_to_constraints(&topology, &moved, 1e-10, 50);
        if projected.residual_inf > 1e-8 {
            return Err(format!(
                "seed {seed}: perturbed chain would not close, |g| = {:.3e}",
                projected.residual_inf
            ));
        }
        let system = analyze_constraints(&topology, &projected.state, None);
        if system.null_residual > 1e-8 {
            return Err(format!(
                "seed {seed}: kernel residual {:.3e}",
                system.null_residual
            ));
        }
        // A random admissible pattern: distinct joint rows past the base.
        let mut rows: Vec<usize> = (6..topology.relative_dim()).collect();
        rows.shuffle(&mut rng);
        rows.truncate(system.dof);
        rows.sort_unstable();
        let z_act = system.actuation_matrix(&rows);
        if z_act.lu().determinant().abs() > 1e-12 {
            let pi = DVector::from_fn(system.dof, |_, _| rng.random_range(-1.0..1.0));
            let (relative, _) = relative_from_actuated(&system, &rows, &pi, 1e12)
                .map_err(|e| format!("seed {seed}: expansion failed: {e}"))?;
            let worst = rows
                .iter()
                .enumerate()
                .map(|(i, &r)| (relative[r] - pi[i]).abs())
                .fold(0.0f64, f64::max);
            if worst > 1e-8 {
                return Err(format!("seed {seed}: round-trip error {worst:.3e}"));
            }
        }
    }
    Ok("100 seeded perturbations: closure, kernel, and round-trip all hold".into())
}
