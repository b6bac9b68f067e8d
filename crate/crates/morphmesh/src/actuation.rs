//! Actuator placement: a genetic algorithm over the rows of the
//! relative-coordinate null basis, plus the sensitivity post-filter that
//! picks the final pattern.
//!
//! A mesh with `dof` degrees of freedom needs `dof` motorized joint axes.
//! Each axis is a row of `Z_nu` (the relative-coordinate null basis), and a
//! candidate placement is a set `h` of `dof` distinct row indices. The
//! placement is admissible when the square submatrix `Z_act = Z_nu[h, :]`
//! is invertible, and better when it is far from singular, concentrates at
//! most one motor per joint, and is insensitive to configuration changes.
//!
//! Because every null basis this crate produces has orthonormal columns,
//! `|det(Z_act)|` does not depend on which orthonormal basis the analysis
//! returned: two bases differ by a right factor with determinant of
//! magnitude one. That makes determinant magnitudes comparable across
//! configurations, which the sensitivity probe relies on.

use crate::mesh::{
    analyze_constraints, apply_velocity, project_to_constraints, relative_from_actuated,
    ConstraintSystem, MeshError, MeshState, MeshTopology,
};
use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Relative pivot threshold for the LU rank test in [`det_magnitude`]:
/// a selection is singular when its smallest pivot magnitude falls below
/// `dof * epsilon` times its largest. Determinants of large selections
/// are legitimately tiny (the product of up to `dof` factors well below
/// one), so singularity must be judged per pivot, never against the
/// determinant itself.
pub const PIVOT_RTOL: f64 = f64::EPSILON;
/// Default probe rotation for sensitivity evaluation: 5 degrees.
pub const DEFAULT_PROBE_ANGLE: f64 = 5.0 * std::f64::consts::PI / 180.0;
/// Condition-number guard when expanding probe rates into full motion.
const PROBE_COND_LIMIT: f64 = 1e12;
/// Probed configurations must project back onto the manifold at least this
/// tightly, or the probe (and the sensitivity) is rejected.
const PROBE_FIT_TOL: f64 = 1e-8;
const PROBE_FIT_FAIL: f64 = 1e-6;
const PROBE_FIT_MAX_ITER: usize = 200;

#[derive(Debug, Error)]
pub enum ActuationError {
    /// The configured generation budget ran out without a single candidate
    /// whose actuation matrix was invertible.
    #[error("no full-rank actuation pattern found within {generations} generations")]
    NoFullRankPattern { generations: usize },
    #[error("invalid GA configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Knobs of the placement search.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaConfig {
    pub population_size: usize,
    pub crossover_prob: f64,
    /// Probability that an offspring has one index redrawn.
    pub mutation_prob: f64,
    /// Stop once the best fitness has not improved for this many
    /// generations *and* it clears `fitness_threshold`.
    pub stall_generations: usize,
    pub fitness_threshold: f64,
    pub max_generations: usize,
    pub rng_seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population_size: 100,
            crossover_prob: 0.6,
            mutation_prob: 0.01,
            stall_generations: 1_000,
            fitness_threshold: 1e-6,
            max_generations: 10_000,
            rng_seed: 0,
        }
    }
}

/// A placement: which rows of `Z_nu` get motors.
#[derive(Debug, Clone, PartialEq)]
pub struct ActuationPattern {
    /// Ascending, distinct row indices into `Z_nu`; never the father's six
    /// velocity rows.
    pub rows: Vec<usize>,
    /// `|det(Z_act)| * f_R` at evaluation time (diversity penalty excluded,
    /// it is a population-relative quantity).
    pub fitness: f64,
    /// Sensitivity of `|det(Z_act)|` to actuator motion; filled by
    /// [`select_pattern`], `None` straight out of [`evolve`].
    pub sensitivity: Option<f64>,
    /// Actuated-axis count per touched joint, keyed by joint index.
    pub motors_per_joint: BTreeMap<usize, usize>,
}

impl ActuationPattern {
    fn from_rows(mut rows: Vec<usize>, fitness: f64) -> Self {
        rows.sort_unstable();
        let motors_per_joint = motors_histogram(&rows);
        Self {
            rows,
            fitness,
            sensitivity: None,
            motors_per_joint,
        }
    }

    /// True when no spherical joint carries more than one motor.
    pub fn single_axis_per_joint(&self) -> bool {
        self.motors_per_joint.values().all(|&c| c <= 1)
    }
}

/// Joint index of a `Z_nu` row past the father block.
fn joint_of_row(row: usize) -> usize {
    debug_assert!(row >= 6);
    (row - 6) / 3
}

fn motors_histogram(rows: &[usize]) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for &r in rows {
        *hist.entry(joint_of_row(r)).or_insert(0) += 1;
    }
    hist
}

/// `|det(Z_nu[h, :])|`, or 0 when `h` has repeats or the submatrix is
/// rank deficient under the relative LU pivot test ([`PIVOT_RTOL`]).
pub fn det_magnitude(h: &[usize], z_nu: &DMatrix<f64>) -> f64 {
    let dof = z_nu.ncols();
    assert_eq!(h.len(), dof, "candidate must select dof rows");
    let mut seen = h.to_vec();
    seen.sort_unstable();
    if seen.windows(2).any(|w| w[0] == w[1]) {
        return 0.0;
    }
    let mut z_act = DMatrix::zeros(dof, dof);
    for (k, &r) in h.iter().enumerate() {
        z_act.row_mut(k).copy_from(&z_nu.row(r));
    }
    // |det| as the product of LU pivot magnitudes (the permutation only
    // flips the sign, L has a unit diagonal). Judging rank on the pivot
    // spread keeps tiny-but-honest determinants alive at high dof.
    let lu = z_act.lu();
    let u = lu.u();
    let mut det = 1.0_f64;
    let mut min_pivot = f64::INFINITY;
    let mut max_pivot = 0.0_f64;
    for k in 0..dof {
        let pivot = u[(k, k)].abs();
        det *= pivot;
        min_pivot = min_pivot.min(pivot);
        max_pivot = max_pivot.max(pivot);
    }
    if !det.is_finite() || max_pivot == 0.0 || min_pivot <= dof as f64 * PIVOT_RTOL * max_pivot {
        0.0
    } else {
        det
    }
}

/// Single-motor reward `f_R = 0.25^(|h| - n_touched)`, in (0, 1]: maximal
/// exactly when every touched joint carries one motor, quartering for every
/// additional motor stacked on an already-motorized joint. The steep decay
/// is deliberate: determinant magnitudes of joint-sharing patterns can run
/// tens of percent higher than spread-out ones, and a gentler ratio reward
/// loses to that margin.
pub fn single_axis_reward(h: &[usize]) -> f64 {
    let hist = motors_histogram(h);
    let extra = h.len() - hist.len();
    0.25f64.powi(extra as i32)
}

/// Candidate quality `|det(Z_act)| * f_R`. The population-diversity penalty
/// `f_P = 1/(1 + duplicates)` is applied inside [`evolve`], where the rest
/// of the generation is known; on its own a candidate gets the neutral
/// `f_P = 1`.
pub fn fitness(h: &[usize], z_nu: &DMatrix<f64>) -> f64 {
    det_magnitude(h, z_nu) * single_axis_reward(h)
}

/// Draws `dof` distinct rows from `valid` (rows 6..) uniformly.
fn random_candidate(rng: &mut impl Rng, row_lo: usize, row_hi: usize, dof: usize) -> Vec<usize> {
    let mut picked = Vec::with_capacity(dof);
    while picked.len() < dof {
        let r = rng.random_range(row_lo..row_hi);
        if !picked.contains(&r) {
            picked.push(r);
        }
    }
    picked
}

/// Redraws duplicate entries until all are distinct.
fn repair(rng: &mut impl Rng, cand: &mut [usize], row_lo: usize, row_hi: usize) {
    for i in 0..cand.len() {
        while cand[..i].contains(&cand[i]) {
            cand[i] = rng.random_range(row_lo..row_hi);
        }
    }
}

/// Fitness-proportionate pick; uniform when the generation is all-zero.
fn roulette(rng: &mut impl Rng, fitnesses: &[f64], total: f64) -> usize {
    if total <= 0.0 {
        return rng.random_range(0..fitnesses.len());
    }
    let mut ball = rng.random_range(0.0..total);
    for (i, f) in fitnesses.iter().enumerate() {
        ball -= f;
        if ball <= 0.0 {
            return i;
        }
    }
    fitnesses.len() - 1
}

/// Runs the genetic search over actuation patterns and returns the final
/// population, best first. Deterministic for a given `rng_seed`.
///
/// Each generation scores candidates as
/// `|det(Z_act)| * f_R * 1/(1 + duplicates)`, keeps the best candidate as
/// an elite, and refills the rest by fitness-proportionate selection,
/// single-point crossover, one-index mutation, and duplicate repair. The
/// search stops when the best (diversity-free) fitness has cleared
/// `fitness_threshold` and not improved for `stall_generations`, or at
/// `max_generations`; it fails only if no invertible pattern was ever seen.
pub fn evolve(
    z_nu: &DMatrix<f64>,
    config: &GaConfig,
) -> Result<Vec<ActuationPattern>, ActuationError> {
    let dof = z_nu.ncols();
    let rows_total = z_nu.nrows();
    if config.population_size < 2 {
        return Err(ActuationError::InvalidConfig(
            "population_size must be at least 2".into(),
        ));
    }
    for (name, p) in [
        ("crossover_prob", config.crossover_prob),
        ("mutation_prob", config.mutation_prob),
    ] {
        if !(0.0..=1.0).contains(&p) {
            return Err(ActuationError::InvalidConfig(format!(
                "{name} = {p} is not a probability"
            )));
        }
    }
    if dof == 0 {
        return Err(ActuationError::InvalidConfig(
            "mesh has no degrees of freedom to actuate".into(),
        ));
    }
    // Father rows [0, 6) are never actuated.
    let (row_lo, row_hi) = (6usize, rows_total);
    if row_hi.saturating_sub(row_lo) < dof {
        return Err(ActuationError::InvalidConfig(format!(
            "{dof} motors cannot be placed on {} joint-axis rows",
            row_hi.saturating_sub(row_lo)
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let pop_size = config.population_size;
    let mut population: Vec<Vec<usize>> = (0..pop_size)
        .map(|_| random_candidate(&mut rng, row_lo, row_hi, dof))
        .collect();

    let mut best: Option<(f64, Vec<usize>)> = None; // diversity-free fitness
    let mut since_improve = 0usize;
    let mut scored: Vec<f64> = vec![0.0; pop_size];

    let mut generations_run = 0usize;
    for _gen in 0..config.max_generations {
        generations_run += 1;
        // Score with the diversity penalty: duplicates share a key of
        // sorted rows.
        let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        let keys: Vec<Vec<usize>> = population
            .iter()
            .map(|c| {
                let mut k = c.clone();
                k.sort_unstable();
                *counts.entry(k.clone()).or_insert(0) += 1;
                k
            })
            .collect();
        let mut gen_best: Option<(f64, usize)> = None;
        for (i, cand) in population.iter().enumerate() {
            let base = fitness(cand, z_nu);
            let dups = counts[&keys[i]] - 1;
            scored[i] = base / (1.0 + dups as f64);
            let better = match gen_best {
                None => true,
                Some((fb, _)) => base > fb,
            };
            if better {
                gen_best = Some((base, i));
            }
        }
        let (gen_best_fit, gen_best_idx) = gen_best.expect("population is non-empty");

        let improved = match &best {
            None => gen_best_fit > 0.0,
            Some((fb, _)) => gen_best_fit > *fb,
        };
        if improved {
            best = Some((gen_best_fit, population[gen_best_idx].clone()));
            since_improve = 0;
        } else {
            since_improve += 1;
        }
        if let Some((fb, _)) = &best {
            if *fb > config.fitness_threshold && since_improve >= config.stall_generations {
                break;
            }
        }

        // Next generation: elite plus offspring.
        let total: f64 = scored.iter().sum();
        let mut next: Vec<Vec<usize>> = Vec::with_capacity(pop_size);
        next.push(population[gen_best_idx].clone());
        while next.len() < pop_size {
            let pa = &population[roulette(&mut rng, &scored, total)];
            let pb = &population[roulette(&mut rng, &scored, total)];
            let (mut ca, mut cb) = (pa.clone(), pb.clone());
            if dof >= 2 && rng.random_bool(config.crossover_prob) {
                let cut = rng.random_range(1..dof);
                for k in cut..dof {
                    std::mem::swap(&mut ca[k], &mut cb[k]);
                }
            }
            for child in [&mut ca, &mut cb] {
                if rng.random_bool(config.mutation_prob) {
                    let slot = rng.random_range(0..dof);
                    child[slot] = rng.random_range(row_lo..row_hi);
                }
                repair(&mut rng, child, row_lo, row_hi);
            }
            next.push(ca);
            if next.len() < pop_size {
                next.push(cb);
            }
        }
        population = next;
    }

    if best.is_none() {
        return Err(ActuationError::NoFullRankPattern {
            generations: generations_run,
        });
    }

    // Final report: rescore the last population (with diversity penalty
    // folded out: patterns carry the candidate-intrinsic fitness).
    let mut out: Vec<ActuationPattern> = population
        .iter()
        .map(|c| ActuationPattern::from_rows(c.clone(), fitness(c, z_nu)))
        .collect();
    out.sort_by(|a, b| {
        b.fitness
            .partial_cmp(&a.fitness)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.rows.cmp(&b.rows))
    });
    Ok(out)
}

/// Sensitivity of the placement to actuator motion:
/// `g_SA = sum_i ((d_plus_i - d_minus_i) / (2 * probe_angle))^2`, where
/// `d_±i` is `|det(Z_act)|` re-evaluated at the configuration reached by
/// driving actuated axis `i` alone through `±probe_angle` and projecting
/// back onto the constraint manifold.
///
/// Low sensitivity means the pattern keeps its authority as the mesh moves;
/// `g_SA = 0` is the ideal. Errors propagate when a probed configuration
/// cannot be expanded (ill-conditioned `Z_act`) or re-fitted to the
/// manifold.
pub fn sensitivity(
    topology: &MeshTopology,
    base_state: &MeshState,
    system: &ConstraintSystem,
    rows: &[usize],
    probe_angle: f64,
) -> Result<f64, ActuationError> {
    assert!(probe_angle > 0.0, "probe angle must be positive");
    let dof = system.dof;
    assert_eq!(rows.len(), dof);
    let mut total = 0.0;
    for i in 0..dof {
        let mut dets = [0.0f64; 2];
        for (slot, sign) in [(0usize, 1.0f64), (1, -1.0)] {
            let mut pi = nalgebra::DVector::zeros(dof);
            pi[i] = sign * probe_angle;
            let (_, nu) = relative_from_actuated(system, rows, &pi, PROBE_COND_LIMIT)?;
            let moved = apply_velocity(base_state, &nu, 1.0);
            let proj =
                project_to_constraints(topology, &moved, PROBE_FIT_TOL, PROBE_FIT_MAX_ITER);
            if proj.residual_inf > PROBE_FIT_FAIL {
                return Err(ActuationError::Mesh(MeshError::InitFitFailure {
                    residual: proj.residual_inf,
                    tol: PROBE_FIT_FAIL,
                    iters: proj.iterations,
                }));
            }
            let probed = analyze_constraints(topology, &proj.state, None);
            dets[slot] = det_magnitude(rows, &probed.null_relative);
        }
        let slope = (dets[0] - dets[1]) / (2.0 * probe_angle);
        total += slope * slope;
    }
    Ok(total)
}

/// Picks the pattern a mesh should actually use: among the
/// nonzero-fitness candidates (deduplicated by row set), the one with the
/// lowest sensitivity; ties break toward higher fitness, then
/// lexicographically smaller rows, so the choice is independent of
/// population order.
///
/// `top_k` caps how many candidates get the (expensive) sensitivity
/// evaluation, keeping large meshes affordable; `None` evaluates all.
pub fn select_pattern(
    topology: &MeshTopology,
    base_state: &MeshState,
    system: &ConstraintSystem,
    population: &[ActuationPattern],
    probe_angle: f64,
    top_k: Option<usize>,
) -> Result<ActuationPattern, ActuationError> {
    let mut viable: Vec<&ActuationPattern> =
        population.iter().filter(|p| p.fitness > 0.0).collect();
    if viable.is_empty() {
        return Err(ActuationError::NoFullRankPattern { generations: 0 });
    }
    // Deduplicate by row set, keep deterministic order: fitness desc, rows.
    viable.sort_by(|a, b| {
        b.fitness
            .partial_cmp(&a.fitness)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.rows.cmp(&b.rows))
    });
    viable.dedup_by(|a, b| a.rows == b.rows);
    if let Some(k) = top_k {
        viable.truncate(k.max(1));
    }

    let mut ranked: Vec<(f64, &ActuationPattern)> = Vec::with_capacity(viable.len());
    for p in viable {
        let g = sensitivity(topology, base_state, system, &p.rows, probe_angle)?;
        ranked.push((g, p));
    }
    let (g, chosen) = ranked
        .into_iter()
        .min_by(|(ga, pa), (gb, pb)| {
            ga.partial_cmp(gb)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| {
                    pb.fitness
                        .partial_cmp(&pa.fitness)
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .then_with(|| pa.rows.cmp(&pb.rows))
        })
        .expect("viable set is non-empty");
    let mut out = chosen.clone();
    out.sensitivity = Some(g);
    Ok(out)
}

/// On-disk pattern record (JSON): enough to re-run a mesh without the GA.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternFile {
    pub mesh: PatternMesh,
    pub dof: usize,
    pub rows: Vec<usize>,
    /// Human-readable names of the actuated axes, e.g. `"J(1,1)-(1,2):x"`.
    pub joint_axis_labels: Vec<String>,
    pub fitness: f64,
    pub sensitivity: Option<f64>,
    /// RNG seed of the search that produced this pattern.
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternMesh {
    pub n: usize,
    pub m: usize,
}

impl PatternFile {
    pub fn new(topology: &MeshTopology, pattern: &ActuationPattern, seed: u64) -> Self {
        Self {
            mesh: PatternMesh {
                n: topology.n,
                m: topology.m,
            },
            dof: pattern.rows.len(),
            rows: pattern.rows.clone(),
            joint_axis_labels: pattern
                .rows
                .iter()
                .map(|&r| topology.row_label(r))
                .collect(),
            fitness: pattern.fitness,
            sensitivity: pattern.sensitivity,
            seed,
        }
    }

    pub fn into_pattern(self) -> ActuationPattern {
        let mut p = ActuationPattern::from_rows(self.rows, self.fitness);
        p.sensitivity = self.sensitivity;
        p
    }
}
