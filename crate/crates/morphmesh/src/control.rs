//! Velocity-level shape controller.
//!
//! Each control tick turns the gap between node orientations and the target
//! surface's normals into per-node reference angular velocities
//!
//! ```text
//! w*_ij = n x n_dot + (k + sigma_dot/sigma) (z x n) + lambda z
//! ```
//!
//! (`z` the node's current normal, `n` the desired one), then selects one
//! feasible mesh motion by a quadratic program over the free coordinates
//! `w` of the constraint null space, reading the motor commands off the
//! actuated rows afterwards:
//!
//! ```text
//! minimize_w  1/2 sum_ij L_ij ||A_ij w - w*_ij||^2 + 1/2 damping ||w||^2
//!             + 1/2 w_norm ||Z_act w||^2 + 1/2 w_slew ||Z_act w - pi_prev||^2
//! subject to  |Z_act w| <= omega_max       (motor-speed rows)
//!             cos(alpha) <= pair-axis alignment after one step <= 1
//!
//! pi = clamp(Z_act w*)
//! ```
//!
//! with `A_ij` the angular rows of the feasible-velocity basis. Optimizing
//! in `w` instead of `pi` means no matrix is ever inverted: the plant's
//! exact expansion of `pi` back into full motion reproduces `w*` to
//! rounding, so what the controller predicts is what the mesh does even
//! when the actuation matrix passes near a singularity. In such a
//! configuration the weakly actuated direction simply carries a vanishing
//! command, and the `damping` term keeps the internal motion bounded.
//!
//! The range-of-motion rows linearize the alignment of neighboring nodes'
//! paired axes (`x` across row joints, `y` across column joints) one
//! forward-Euler step ahead, so the commanded motion cannot push a joint
//! past its cone within the tick; their lower bounds are clamped to keep
//! `w = 0` admissible, so a joint found outside its cone (integration
//! drift) is held rather than demanding an impossible recovery.

use crate::mesh::{analyze_constraints, ConstraintSystem, MeshState, MeshTopology};
use crate::qp::{solve_qp, QpError, QpProblem, QpSettings};
use crate::se3::skew;
use crate::shape::{EvalError, ShapeField};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("desired normal is antipodal to the node normal (dot = {dot})")]
    AntipodalNormal { dot: f64 },
    #[error("matrix is singular and damping is zero")]
    SingularMatrix,
    #[error("invalid controller configuration: {0}")]
    InvalidConfig(String),
    #[error("pattern has {rows} rows but the mesh has {dof} degrees of freedom")]
    PatternMismatch { rows: usize, dof: usize },
    #[error(transparent)]
    Shape(#[from] EvalError),
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// Inner QP solver tolerances (exposed in scenario configs).
#[derive(Debug, Clone, Copy)]
pub struct QpTolerances {
    pub max_iter: usize,
    pub eps_abs: f64,
    pub eps_rel: f64,
}

impl Default for QpTolerances {
    fn default() -> Self {
        Self {
            max_iter: 20_000,
            eps_abs: 1e-8,
            eps_rel: 1e-9,
        }
    }
}

/// Controller parameters. Angular quantities are radians; see
/// [`ControllerConfig::default`] for the stock values.
#[derive(Debug, Clone)]
pub struct ControllerConfig {
    /// Orientation feedback gain (1/s), strictly positive.
    pub k: f64,
    /// Feedforward spin about the current normal (1/s).
    pub lambda: f64,
    /// Time-scaling profile value (> 0) and its rate; the pair enters the
    /// feedback gain as `k + sigma_dot / sigma`.
    pub sigma: f64,
    pub sigma_dot: f64,
    /// Per-node tracking weights, row-major over the grid; `None` means 1
    /// for every node.
    pub node_weights: Option<Vec<f64>>,
    /// Motor speed limit (rad/s), enforced exactly.
    pub omega_max: f64,
    /// Joint range-of-motion half-angle (rad), `0 < alpha < pi`.
    pub alpha: f64,
    /// Control period (s) used for the range-of-motion linearization and
    /// the normal-rate backward difference.
    pub control_dt: f64,
    /// Regularization on the internal motion (the free-coordinate
    /// solution); this is the brake that keeps a near-singular actuation
    /// pattern from commanding violent passive-joint rates.
    pub damping: f64,
    /// Tikhonov floor on the Hessian.
    pub w_norm: f64,
    /// Slew regularization toward the previous command.
    pub w_slew: f64,
    pub qp: QpTolerances,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            k: 2.0,
            lambda: 0.0,
            sigma: 1.0,
            sigma_dot: 0.0,
            node_weights: None,
            omega_max: 5.0_f64.to_radians(),
            alpha: 50.0_f64.to_radians(),
            control_dt: 0.01,
            damping: 1e-6,
            w_norm: 1e-4,
            w_slew: 1e-2,
            qp: QpTolerances::default(),
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self, node_count: usize) -> Result<(), ControllerError> {
        let bad = |msg: String| Err(ControllerError::InvalidConfig(msg));
        if !(self.k > 0.0) {
            return bad(format!("gain k must be > 0, got {}", self.k));
        }
        if !(self.sigma > 0.0) {
            return bad(format!("sigma must be > 0, got {}", self.sigma));
        }
        if !(self.omega_max > 0.0) {
            return bad(format!("omega_max must be > 0, got {}", self.omega_max));
        }
        if !(self.alpha > 0.0 && self.alpha < std::f64::consts::PI) {
            return bad(format!("alpha must lie in (0, pi), got {}", self.alpha));
        }
        if !(self.control_dt > 0.0) {
            return bad(format!("control_dt must be > 0, got {}", self.control_dt));
        }
        if self.damping < 0.0 {
            return bad(format!("damping must be >= 0, got {}", self.damping));
        }
        if self.w_norm < 0.0 || self.w_slew < 0.0 {
            return bad("regularization weights must be >= 0".into());
        }
        if let Some(w) = &self.node_weights {
            if w.len() != node_count {
                return bad(format!(
                    "{} node weights supplied for {} nodes",
                    w.len(),
                    node_count
                ));
            }
            if w.iter().any(|&x| !(x >= 0.0)) {
                return bad("node weights must be >= 0".into());
            }
        }
        Ok(())
    }

    fn weight(&self, node: usize) -> f64 {
        self.node_weights.as_ref().map_or(1.0, |w| w[node])
    }

    fn qp_settings(&self) -> QpSettings {
        QpSettings {
            max_iter: self.qp.max_iter,
            eps_abs: self.qp.eps_abs,
            eps_rel: self.qp.eps_rel,
            ..QpSettings::default()
        }
    }
}

/// Margin below exact antipodality at which the reference field is
/// considered undefined.
pub const ANTIPODAL_MARGIN: f64 = 1e-9;
/// Rotation applied to escape an antipodal configuration (radians).
const ANTIPODAL_NUDGE: f64 = 1e-3;

/// Reference angular velocity driving a body whose normal is `z_hat`
/// toward the target normal `n_hat` moving at `n_dot`:
///
/// `w* = n_hat x n_dot + (k + sigma_dot/sigma) (z_hat x n_hat) + lambda z_hat`
///
/// Inputs must be unit vectors within 1e-6. The antipodal point
/// `z_hat = -n_hat` is outside the domain of attraction and is reported as
/// an error; callers escape it with [`nudge_antipodal`].
pub fn reference_omega(
    z_hat: &Vector3<f64>,
    n_hat: &Vector3<f64>,
    n_dot: &Vector3<f64>,
    cfg: &ControllerConfig,
) -> Result<Vector3<f64>, ControllerError> {
    debug_assert!((z_hat.norm() - 1.0).abs() < 1e-6, "z must be unit");
    debug_assert!((n_hat.norm() - 1.0).abs() < 1e-6, "n must be unit");
    let dot = z_hat.dot(n_hat);
    if dot < -1.0 + ANTIPODAL_MARGIN {
        return Err(ControllerError::AntipodalNormal { dot });
    }
    let gain = cfg.k + cfg.sigma_dot / cfg.sigma;
    Ok(n_hat.cross(n_dot) + gain * z_hat.cross(n_hat) + cfg.lambda * z_hat)
}

/// Rotates `z_hat` a small fixed angle about an axis orthogonal to `n_hat`,
/// moving it off the antipodal point while preserving unit length.
pub fn nudge_antipodal(z_hat: &Vector3<f64>, n_hat: &Vector3<f64>) -> Vector3<f64> {
    let mut axis = n_hat.cross(&Vector3::x());
    if axis.norm() < 1e-6 {
        axis = n_hat.cross(&Vector3::y());
    }
    let axis = axis.normalize();
    let rot = crate::se3::UnitQuaternion::from_axis_angle(&axis, ANTIPODAL_NUDGE).to_rotation();
    (rot * z_hat).normalize()
}

/// Damped right inverse `(Z' Z + damping I)^-1 Z'`.
///
/// With `damping = 0` this is the exact inverse of a square invertible
/// matrix (and an error on a singular one); with `damping > 0` it is always
/// defined and deviates from the exact inverse by `O(damping)` when the
/// input is well conditioned.
pub fn damped_inverse(z: &DMatrix<f64>, damping: f64) -> Result<DMatrix<f64>, ControllerError> {
    debug_assert!(damping >= 0.0);
    if damping == 0.0 {
        if z.nrows() != z.ncols() {
            return Err(ControllerError::SingularMatrix);
        }
        return z
            .clone()
            .lu()
            .try_inverse()
            .ok_or(ControllerError::SingularMatrix);
    }
    let n = z.ncols();
    let mut gram = z.transpose() * z;
    for i in 0..n {
        gram[(i, i)] += damping;
    }
    let chol = gram.cholesky().ok_or(ControllerError::SingularMatrix)?;
    Ok(chol.solve(&z.transpose()))
}

/// Builds the tick QP over the free coordinates `w` of the constraint
/// null space (see the module docs). The first `dof` general rows are the
/// motor-speed limits `|Z_act w| <= omega_max`; the remaining rows are
/// one range-of-motion row per joint. Motor commands are read out of the
/// solution as `pi = Z_act w`.
///
/// `references` holds one `w*` per node in flat node order (entries for
/// fixed nodes are accepted and have no influence: their feasible angular
/// velocity is identically zero).
pub fn assemble_qp(
    topology: &MeshTopology,
    state: &MeshState,
    system: &ConstraintSystem,
    pattern_rows: &[usize],
    references: &[Vector3<f64>],
    pi_prev: &DVector<f64>,
    cfg: &ControllerConfig,
) -> Result<QpProblem, ControllerError> {
    let dof = system.dof;
    if pattern_rows.len() != dof {
        return Err(ControllerError::PatternMismatch {
            rows: pattern_rows.len(),
            dof,
        });
    }
    if references.len() != topology.node_count() {
        return Err(ControllerError::InvalidConfig(format!(
            "{} references for {} nodes",
            references.len(),
            topology.node_count()
        )));
    }
    debug_assert_eq!(pi_prev.len(), dof);

    let z_act = system.actuation_matrix(pattern_rows);

    let mut hessian = DMatrix::<f64>::zeros(dof, dof);
    let mut gradient = DVector::<f64>::zeros(dof);
    for node in 0..topology.node_count() {
        let weight = cfg.weight(node);
        if weight == 0.0 {
            continue;
        }
        // Angular rows of the node's feasible-velocity block.
        let a = system.null_velocity.view((6 * node + 3, 0), (3, dof));
        hessian += weight * (a.transpose() * a);
        gradient -= weight * (a.transpose() * references[node]);
    }
    // Motor-rate regularization pulled back through pi = Z_act w.
    let zz = z_act.transpose() * &z_act;
    hessian += (cfg.w_norm + cfg.w_slew) * &zz;
    gradient -= z_act.transpose() * (cfg.w_slew * pi_prev);
    // Internal-motion damping: a strictly positive floor in every
    // direction, including those the motors barely reach.
    for i in 0..dof {
        hessian[(i, i)] += cfg.damping;
    }

    // Range-of-motion rows: for each joint, keep the paired-axis alignment
    // cosine above cos(alpha) after one forward-Euler step of length
    // control_dt. With c0 the current cosine and R_rel = R_p' R_c,
    //
    //   cos(alpha) <= c0 + dt * cross(R_rel e_a, e_a) . w_rel <= 1
    //
    // where w_rel is the joint's relative angular velocity (parent frame),
    // a linear function of w through the relative-velocity basis. The
    // lower bound is clamped so that w = 0 stays admissible: a joint
    // already at (or past) its cone is held, never asked to snap back
    // within one tick.
    let dt = cfg.control_dt;
    let cos_alpha = cfg.alpha.cos();
    let joints = topology.joint_count();
    let mut rows = DMatrix::<f64>::zeros(dof + joints, dof);
    let mut lower = DVector::<f64>::zeros(dof + joints);
    let mut upper = DVector::<f64>::zeros(dof + joints);
    rows.view_mut((0, 0), (dof, dof)).copy_from(&z_act);
    for r in 0..dof {
        lower[r] = -cfg.omega_max;
        upper[r] = cfg.omega_max;
    }
    for (j, joint) in topology.joints.iter().enumerate() {
        let e_a = joint.axis.direction();
        let r_rel = state.poses[joint.parent].rotation().transpose()
            * state.poses[joint.child].rotation();
        let rotated = r_rel * e_a;
        let c0 = e_a.dot(&rotated);
        let c = rotated.cross(&e_a);
        let flow = system.null_relative.view((6 + 3 * j, 0), (3, dof));
        let coeffs = flow.transpose() * c;
        let r = dof + j;
        rows.row_mut(r).copy_from(&coeffs.transpose());
        let lo = ((cos_alpha - c0) / dt).min(0.0);
        lower[r] = lo;
        upper[r] = ((1.0 - c0) / dt).max(lo);
    }

    Ok(QpProblem {
        hessian,
        gradient,
        rows,
        lower,
        upper,
        box_lower: DVector::from_element(dof, f64::NEG_INFINITY),
        box_upper: DVector::from_element(dof, f64::INFINITY),
    })
}

/// Result of one control tick.
#[derive(Debug, Clone)]
pub struct ControlTick {
    /// Commanded actuated joint rates (rad/s), one per degree of freedom.
    pub pi: DVector<f64>,
    /// Per-node reference angular velocities used this tick.
    pub references: Vec<Vector3<f64>>,
    pub qp_iterations: usize,
    /// True when the QP failed to converge and the previous command,
    /// clamped into the speed box, was issued instead.
    pub fell_back: bool,
    /// Number of nodes whose normal had to be nudged off the antipodal
    /// point this tick.
    pub antipodal_fixes: usize,
}

/// Stateful shape controller: owns the actuation pattern, the previous
/// command (for slew regularization), the previous free-coordinate
/// solution with its multipliers (for QP warm starting), and the
/// previously sampled normals (for the backward-difference normal rate).
pub struct Controller {
    cfg: ControllerConfig,
    pattern_rows: Vec<usize>,
    pi_prev: DVector<f64>,
    prev_normals: Option<Vec<Vector3<f64>>>,
    warm_w: Option<DVector<f64>>,
    warm_multipliers: Option<DVector<f64>>,
}

impl Controller {
    pub fn new(
        cfg: ControllerConfig,
        pattern_rows: Vec<usize>,
        topology: &MeshTopology,
    ) -> Result<Self, ControllerError> {
        cfg.validate(topology.node_count())?;
        let dof = pattern_rows.len();
        Ok(Self {
            cfg,
            pattern_rows,
            pi_prev: DVector::zeros(dof),
            prev_normals: None,
            warm_w: None,
            warm_multipliers: None,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn pattern_rows(&self) -> &[usize] {
        &self.pattern_rows
    }

    /// Last issued command (zero before the first tick).
    pub fn previous_command(&self) -> &DVector<f64> {
        &self.pi_prev
    }

    /// Runs one tick, analyzing the constraints at `state` internally.
    pub fn tick(
        &mut self,
        topology: &MeshTopology,
        state: &MeshState,
        shape: &ShapeField,
        t: f64,
    ) -> Result<ControlTick, ControllerError> {
        let system = analyze_constraints(topology, state, None);
        self.tick_with_system(topology, state, &system, shape, t)
    }

    /// Runs one tick against a precomputed constraint analysis of `state`
    /// (the simulation loop reuses its own analysis this way).
    pub fn tick_with_system(
        &mut self,
        topology: &MeshTopology,
        state: &MeshState,
        system: &ConstraintSystem,
        shape: &ShapeField,
        t: f64,
    ) -> Result<ControlTick, ControllerError> {
        let nodes = topology.node_count();
        let mut normals = Vec::with_capacity(nodes);
        let mut references = Vec::with_capacity(nodes);
        let mut antipodal_fixes = 0usize;
        for node in 0..nodes {
            let pose = &state.poses[node];
            let (_, n_hat) = shape.sample(pose.position.x, pose.position.y, t)?;
            let n_dot = match &self.prev_normals {
                Some(prev) => (n_hat - prev[node]) / self.cfg.control_dt,
                None => Vector3::zeros(),
            };
            let z_hat = pose.rotation() * Vector3::z();
            let omega = match reference_omega(&z_hat, &n_hat, &n_dot, &self.cfg) {
                Ok(w) => w,
                Err(ControllerError::AntipodalNormal { .. }) => {
                    antipodal_fixes += 1;
                    let nudged = nudge_antipodal(&z_hat, &n_hat);
                    reference_omega(&nudged, &n_hat, &n_dot, &self.cfg)?
                }
                Err(e) => return Err(e),
            };
            normals.push(n_hat);
            references.push(omega);
        }

        let problem = assemble_qp(
            topology,
            state,
            system,
            &self.pattern_rows,
            &references,
            &self.pi_prev,
            &self.cfg,
        )?;
        let warm = match (&self.warm_w, &self.warm_multipliers) {
            (Some(w), Some(y)) => Some((w, y)),
            _ => None,
        };
        let (pi, iterations, fell_back) =
            match solve_qp(&problem, &self.cfg.qp_settings(), warm) {
                Ok(sol) => {
                    // Commands live on the actuated rows; the final clamp
                    // turns the solver's epsilon-feasibility into an exact
                    // speed guarantee.
                    let z_act = system.actuation_matrix(&self.pattern_rows);
                    let mut pi = &z_act * &sol.x;
                    for v in pi.iter_mut() {
                        *v = v.clamp(-self.cfg.omega_max, self.cfg.omega_max);
                    }
                    self.warm_w = Some(sol.x);
                    self.warm_multipliers = Some(sol.multipliers);
                    (pi, sol.iterations, false)
                }
                Err(QpError::MaxIterations { iterations, .. }) => {
                    // Contractual fallback: previous command clamped into
                    // the speed box.
                    let mut pi = self.pi_prev.clone();
                    for v in pi.iter_mut() {
                        *v = v.clamp(-self.cfg.omega_max, self.cfg.omega_max);
                    }
                    self.warm_w = None;
                    self.warm_multipliers = None;
                    (pi, iterations, true)
                }
                Err(e) => return Err(e.into()),
            };

        self.pi_prev = pi.clone();
        self.prev_normals = Some(normals);
        Ok(ControlTick {
            pi,
            references,
            qp_iterations: iterations,
            fell_back,
            antipodal_fixes,
        })
    }
}

/// Predicted pair-axis alignment cosine of joint `j` after one tick at
/// relative angular velocity `w_rel` (the linearization behind the
/// range-of-motion rows); exposed for simulation-side verification.
pub fn predicted_alignment(
    topology: &MeshTopology,
    state: &MeshState,
    joint_index: usize,
    w_rel: &Vector3<f64>,
    dt: f64,
) -> f64 {
    let joint = &topology.joints[joint_index];
    let e_a = joint.axis.direction();
    let r_rel =
        state.poses[joint.parent].rotation().transpose() * state.poses[joint.child].rotation();
    let stepped = (Matrix3::identity() + skew(w_rel) * dt) * (r_rel * e_a);
    e_a.dot(&stepped)
}

/// Current pair-axis alignment cosine of joint `j`.
pub fn alignment_cosine(topology: &MeshTopology, state: &MeshState, joint_index: usize) -> f64 {
    let joint = &topology.joints[joint_index];
    let e_a = joint.axis.direction();
    let r_rel =
        state.poses[joint.parent].rotation().transpose() * state.poses[joint.child].rotation();
    e_a.dot(&(r_rel * e_a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{apply_velocity, build_mesh, relative_from_actuated, InitialSurface};
    use crate::se3::UnitQuaternion;
    use crate::shape::{builtin, Transform};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Deterministic full-rank row selection by greedy Gram-Schmidt over
    /// the relative-velocity basis rows (no GA dependence in these tests).
    fn greedy_rows(system: &ConstraintSystem) -> Vec<usize> {
        let mut rows = Vec::new();
        let mut basis: Vec<DVector<f64>> = Vec::new();
        for r in 6..system.null_relative.nrows() {
            let mut v = system.null_relative.row(r).transpose();
            for b in &basis {
                let p = b.dot(&v);
                v -= b * p;
            }
            let norm = v.norm();
            if norm > 1e-6 {
                basis.push(v / norm);
                rows.push(r);
                if rows.len() == system.dof {
                    break;
                }
            }
        }
        assert_eq!(rows.len(), system.dof, "greedy selection must fill dof");
        rows
    }

    fn paraboloid() -> ShapeField {
        builtin("paraboloid").unwrap().with_transform(Transform {
            amplitude: 2.0,
            offset: -0.01,
            x0: 0.05,
            y0: 0.05,
            sx: 1.0,
            sy: 1.0,
        })
    }

    fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 {
                return v / n;
            }
        }
    }

    #[test]
    fn reference_is_zero_at_equilibrium() {
        let cfg = ControllerConfig::default();
        let n = Vector3::z();
        let w = reference_omega(&n, &n, &Vector3::zeros(), &cfg).unwrap();
        assert_eq!(w, Vector3::zeros());
    }

    #[test]
    fn reference_substitution_example() {
        let cfg = ControllerConfig {
            k: 1.0,
            lambda: 0.0,
            ..ControllerConfig::default()
        };
        let w = reference_omega(&Vector3::x(), &Vector3::z(), &Vector3::zeros(), &cfg).unwrap();
        assert_eq!(w, Vector3::new(0.0, -1.0, 0.0));
    }

    #[test]
    fn cross_term_vanishes_when_aligned() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = ControllerConfig {
            lambda: 0.7,
            ..ControllerConfig::default()
        };
        for _ in 0..20 {
            let n = random_unit(&mut rng);
            let n_dot = random_unit(&mut rng) * 0.3;
            let w = reference_omega(&n, &n, &n_dot, &cfg).unwrap();
            let expected = n.cross(&n_dot) + cfg.lambda * n;
            assert_eq!(w, expected, "z = n must leave only w_n + lambda n");
        }
    }

    #[test]
    fn reference_is_rotation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = ControllerConfig {
            lambda: 0.4,
            sigma: 2.0,
            sigma_dot: 0.5,
            ..ControllerConfig::default()
        };
        for _ in 0..20 {
            let z = random_unit(&mut rng);
            let mut n = random_unit(&mut rng);
            if z.dot(&n) < -0.9 {
                n = -n;
            }
            let n_dot = random_unit(&mut rng) * 0.2;
            let rot = UnitQuaternion::from_axis_angle(
                &random_unit(&mut rng),
                rng.random_range(0.0..std::f64::consts::PI),
            )
            .to_rotation();
            let lhs = rot * reference_omega(&z, &n, &n_dot, &cfg).unwrap();
            let rhs = reference_omega(
                &(rot * z).normalize(),
                &(rot * n).normalize(),
                &(rot * n_dot),
                &cfg,
            )
            .unwrap();
            assert!((lhs - rhs).norm() < 1e-12);
        }
    }

    #[test]
    fn antipodal_normal_is_flagged_and_nudged() {
        let cfg = ControllerConfig::default();
        let n = Vector3::z();
        let z = -Vector3::z();
        assert!(matches!(
            reference_omega(&z, &n, &Vector3::zeros(), &cfg),
            Err(ControllerError::AntipodalNormal { .. })
        ));
        let nudged = nudge_antipodal(&z, &n);
        assert!((nudged.norm() - 1.0).abs() < 1e-12);
        assert!(nudged.dot(&n) > -1.0 + ANTIPODAL_MARGIN);
        // The nudge axis is orthogonal to n, so the angle moved is exactly
        // the nudge angle.
        assert!((nudged.dot(&z) - (1e-3f64).cos()).abs() < 1e-9);
        assert!(reference_omega(&nudged, &n, &Vector3::zeros(), &cfg).is_ok());
    }

    #[test]
    fn rigid_body_alignment_decays_at_gain_rate() {
        // A free rigid body driven by w = w* aligns its z axis with the
        // target normal; the log orientation error decays with slope -k.
        let cfg = ControllerConfig {
            k: 2.0,
            ..ControllerConfig::default()
        };
        let target = Vector3::z();
        let mut q = UnitQuaternion::from_axis_angle(&Vector3::x(), 30.0_f64.to_radians());
        let dt = 1e-3;
        let angle_at = |q: &UnitQuaternion| -> f64 {
            let z = q.to_rotation() * Vector3::z();
            z.dot(&target).clamp(-1.0, 1.0).acos()
        };
        let mut samples = Vec::new();
        for step in 0..=1500 {
            let t = step as f64 * dt;
            if (t - 0.5).abs() < dt / 2.0 || (t - 1.0).abs() < dt / 2.0 {
                samples.push(angle_at(&q));
            }
            let z = q.to_rotation() * Vector3::z();
            let w = reference_omega(&z, &target, &Vector3::zeros(), &cfg).unwrap();
            q = UnitQuaternion::from_scaled_axis(&(w * dt)).mul(&q);
        }
        assert_eq!(samples.len(), 2);
        let slope = (samples[1].ln() - samples[0].ln()) / 0.5;
        assert!(
            (slope + cfg.k).abs() < 0.1 * cfg.k,
            "decay slope {slope} should be about -{}",
            cfg.k
        );
    }

    #[test]
    fn damped_inverse_identity_example() {
        let z = DMatrix::<f64>::identity(3, 3);
        let inv = damped_inverse(&z, 1e-6).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 / (1.0 + 1e-6) } else { 0.0 };
                assert!((inv[(i, j)] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn damped_inverse_singular_diagonal_example() {
        let z = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0]));
        let inv = damped_inverse(&z, 1e-6).unwrap();
        assert!((inv[(0, 0)] - 2.0 / (4.0 + 1e-6)).abs() < 1e-15);
        assert!(inv[(1, 1)].abs() < 1e-15);
        assert!(inv[(0, 1)].abs() < 1e-15 && inv[(1, 0)].abs() < 1e-15);
    }

    #[test]
    fn undamped_inverse_is_exact_or_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0))
            + DMatrix::identity(4, 4) * 2.0;
        let inv = damped_inverse(&z, 0.0).unwrap();
        assert!((inv * &z - DMatrix::identity(4, 4)).abs().max() < 1e-10);
        let singular = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0]));
        assert!(matches!(
            damped_inverse(&singular, 0.0),
            Err(ControllerError::SingularMatrix)
        ));
    }

    #[test]
    fn damped_inverse_deviation_is_order_damping() {
        // For Z with singular values s_i, the product (damped inverse) * Z
        // differs from identity by singular values damping/(s_i^2 +
        // damping), bounded by damping/s_min^2.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let damping = 1e-6;
        for _ in 0..5 {
            let z = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0))
                + DMatrix::identity(5, 5) * 3.0;
            let s_min = z.clone().singular_values().min();
            let inv = damped_inverse(&z, damping).unwrap();
            let dev = (inv * &z - DMatrix::identity(5, 5)).abs().max();
            let bound = damping / (s_min * s_min);
            assert!(
                dev <= 5.0 * bound,
                "deviation {dev} should be O(damping) (bound {bound})"
            );
        }
    }

    #[test]
    fn zero_references_yield_zero_command() {
        let surface = paraboloid();
        let (topo, state) =
            build_mesh(3, 3, 0.025, &InitialSurface::Surface(&surface), &[]).unwrap();
        let system = analyze_constraints(&topo, &state, None);
        let rows = greedy_rows(&system);
        let cfg = ControllerConfig::default();
        let refs = vec![Vector3::zeros(); topo.node_count()];
        let pi_prev = DVector::zeros(system.dof);
        let problem = assemble_qp(&topo, &state, &system, &rows, &refs, &pi_prev, &cfg).unwrap();
        let sol = solve_qp(&problem, &cfg.qp_settings(), None).unwrap();
        assert!(
            sol.x.abs().max() < 1e-9,
            "zero references must command zero rates, got {}",
            sol.x.abs().max()
        );
    }

    #[test]
    fn hessian_is_symmetric_with_eigenvalue_floor() {
        let surface = paraboloid();
        let (topo, state) =
            build_mesh(3, 3, 0.025, &InitialSurface::Surface(&surface), &[]).unwrap();
        let system = analyze_constraints(&topo, &state, None);
        let rows = greedy_rows(&system);
        let cfg = ControllerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let refs: Vec<Vector3<f64>> = (0..topo.node_count())
            .map(|_| random_unit(&mut rng) * 0.1)
            .collect();
        let pi_prev = DVector::zeros(system.dof);
        let problem = assemble_qp(&topo, &state, &system, &rows, &refs, &pi_prev, &cfg).unwrap();
        let asym = (&problem.hessian - problem.hessian.transpose()).abs().max();
        assert!(asym < 1e-10);
        let min_eig = problem
            .hessian
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .min();
        assert!(
            min_eig >= cfg.damping - 1e-12,
            "minimum eigenvalue {min_eig} below the damping floor"
        );
    }

    #[test]
    fn one_dof_toy_matches_normal_equation_oracle() {
        // 1x3 chain with both ends pinned leaves one degree of freedom.
        // With wide limits the QP is unconstrained and must match the
        // closed-form regularized least-squares solution.
        let (topo, state) = build_mesh(1, 3, 0.025, &InitialSurface::Flat, &[2]).unwrap();
        let system = analyze_constraints(&topo, &state, None);
        assert_eq!(system.dof, 1);
        let rows = greedy_rows(&system);
        let cfg = ControllerConfig {
            omega_max: 100.0,
            alpha: 3.0,
            ..ControllerConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let refs: Vec<Vector3<f64>> = (0..topo.node_count())
            .map(|_| random_unit(&mut rng) * 0.05)
            .collect();
        let pi_prev = DVector::from_element(1, 0.02);
        let problem = assemble_qp(&topo, &state, &system, &rows, &refs, &pi_prev, &cfg).unwrap();
        let sol = solve_qp(&problem, &cfg.qp_settings(), None).unwrap();
        // Normal equations of the same objective over the free coordinate.
        let z = system.actuation_matrix(&rows)[(0, 0)];
        let mut lhs = 0.0;
        let mut rhs = 0.0;
        for node in 0..topo.node_count() {
            let a = system
                .null_velocity
                .view((6 * node + 3, 0), (3, 1))
                .clone_owned();
            lhs += (a.transpose() * &a)[(0, 0)];
            rhs += (a.transpose() * refs[node])[(0, 0)];
        }
        lhs += (cfg.w_norm + cfg.w_slew) * z * z + cfg.damping;
        rhs += cfg.w_slew * z * pi_prev[0];
        let oracle = rhs / lhs;
        assert!(
            (sol.x[0] - oracle).abs() < 1e-8,
            "QP {} vs normal equations {oracle}",
            sol.x[0]
        );
        // The motor command is the actuated row of the free solution.
        assert!((z * sol.x[0] - z * oracle).abs() < 1e-8);
    }

    #[test]
    fn rom_rows_predict_alignment_to_second_order() {
        let surface = paraboloid();
        let (topo, state) =
            build_mesh(3, 3, 0.025, &InitialSurface::Surface(&surface), &[]).unwrap();
        let system = analyze_constraints(&topo, &state, None);
        let rows = greedy_rows(&system);
        let cfg = ControllerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let pi = DVector::from_fn(system.dof, |_, _| rng.random_range(-0.5..0.5));
        let (nu_rel, nu_full) = relative_from_actuated(&system, &rows, &pi, 1e12).unwrap();
        let dt = cfg.control_dt;
        let moved = apply_velocity(&state, &nu_full, dt);
        for j in 0..topo.joint_count() {
            let w_rel = Vector3::new(nu_rel[6 + 3 * j], nu_rel[7 + 3 * j], nu_rel[8 + 3 * j]);
            let predicted = predicted_alignment(&topo, &state, j, &w_rel, dt);
            let actual = alignment_cosine(&topo, &moved, j);
            // Agreement is second order in ||w_rel|| * dt.
            let slack = 1e-6 + (w_rel.norm() * dt).powi(2);
            assert!(
                (predicted - actual).abs() < slack,
                "joint {j}: predicted {predicted} vs actual {actual}"
            );
        }
    }

    #[test]
    fn first_tick_respects_speed_limit() {
        let init = paraboloid();
        let (topo, state) = build_mesh(3, 3, 0.025, &InitialSurface::Surface(&init), &[]).unwrap();
        let system = analyze_constraints(&topo, &state, None);
        let rows = greedy_rows(&system);
        let target = builtin("mesh3x3_target").unwrap().with_transform(Transform {
            amplitude: 0.5,
            offset: 0.0,
            x0: 0.05,
            y0: 0.05,
            sx: 0.1,
            sy: 0.1,
        });
        let cfg = ControllerConfig::default();
        let omega_max = cfg.omega_max;
        let mut controller = Controller::new(cfg, rows, &topo).unwrap();
        let tick = controller
            .tick_with_system(&topo, &state, &system, &target, 0.0)
            .unwrap();
        assert!(!tick.fell_back);
        assert!(
            tick.pi.abs().max() <= omega_max + 1e-9,
            "first tick speed {} exceeds limit",
            tick.pi.abs().max()
        );
    }

    #[test]
    fn matched_flat_mesh_commands_negligible_rates() {
        // Flat mesh, flat static target: normals already agree everywhere,
        // so the commanded rates are regularization-level zero.
        let (topo, state) = build_mesh(3, 3, 0.025, &InitialSurface::Flat, &[]).unwrap();
        let system = analyze_constraints(&topo, &state, None);
        let rows = greedy_rows(&system);
        let flat = ShapeField::from_source("0", Transform::default()).unwrap();
        let mut controller = Controller::new(ControllerConfig::default(), rows, &topo).unwrap();
        let tick = controller
            .tick_with_system(&topo, &state, &system, &flat, 0.0)
            .unwrap();
        assert!(
            tick.pi.abs().max() < 1e-9,
            "matched mesh commanded {}",
            tick.pi.abs().max()
        );
    }

    #[test]
    fn ticks_are_deterministic() {
        let init = paraboloid();
        let (topo, state) = build_mesh(3, 3, 0.025, &InitialSurface::Surface(&init), &[]).unwrap();
        let system = analyze_constraints(&topo, &state, None);
        let rows = greedy_rows(&system);
        let target = builtin("mesh3x3_target").unwrap().with_transform(Transform {
            amplitude: 0.5,
            offset: 0.0,
            x0: 0.05,
            y0: 0.05,
            sx: 0.1,
            sy: 0.1,
        });
        let run = || {
            let mut controller =
                Controller::new(ControllerConfig::default(), rows.clone(), &topo).unwrap();
            let mut out = Vec::new();
            let mut s = state.clone();
            for step in 0..3 {
                let sys = analyze_constraints(&topo, &s, None);
                let tick = controller
                    .tick_with_system(&topo, &s, &sys, &target, step as f64 * 0.01)
                    .unwrap();
                let (_, nu) =
                    relative_from_actuated(&sys, &rows, &tick.pi, 1e12).unwrap();
                s = apply_velocity(&s, &nu, 0.01);
                out.push(tick.pi);
            }
            out
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "identical inputs must reproduce identical commands");
    }

    #[test]
    fn qp_failure_falls_back_to_clamped_previous_command() {
        let init = paraboloid();
        let (topo, state) = build_mesh(3, 3, 0.025, &InitialSurface::Surface(&init), &[]).unwrap();
        let system = analyze_constraints(&topo, &state, None);
        let rows = greedy_rows(&system);
        let target = builtin("mesh3x3_target").unwrap().with_transform(Transform {
            amplitude: 0.5,
            offset: 0.0,
            x0: 0.05,
            y0: 0.05,
            sx: 0.1,
            sy: 0.1,
        });
        let cfg = ControllerConfig {
            qp: QpTolerances {
                max_iter: 1,
                ..QpTolerances::default()
            },
            ..ControllerConfig::default()
        };
        let mut controller = Controller::new(cfg, rows, &topo).unwrap();
        let tick = controller
            .tick_with_system(&topo, &state, &system, &target, 0.0)
            .unwrap();
        assert!(tick.fell_back);
        // Previous command starts at zero, so the fallback is zero.
        assert_eq!(tick.pi, DVector::zeros(system.dof));
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let topo = build_mesh(2, 2, 0.025, &InitialSurface::Flat, &[]).unwrap().0;
        let cases: Vec<ControllerConfig> = vec![
            ControllerConfig {
                k: 0.0,
                ..ControllerConfig::default()
            },
            ControllerConfig {
                sigma: -1.0,
                ..ControllerConfig::default()
            },
            ControllerConfig {
                alpha: 3.3,
                ..ControllerConfig::default()
            },
            ControllerConfig {
                node_weights: Some(vec![1.0; 3]),
                ..ControllerConfig::default()
            },
            ControllerConfig {
                node_weights: Some(vec![1.0, 1.0, -0.5, 1.0]),
                ..ControllerConfig::default()
            },
        ];
        for cfg in cases {
            assert!(cfg.validate(topo.node_count()).is_err());
        }
        assert!(ControllerConfig::default().validate(4).is_ok());
    }

    #[test]
    fn pattern_row_count_must_match_dof() {
        let (topo, state) = build_mesh(2, 2, 0.025, &InitialSurface::Flat, &[]).unwrap();
        let system = analyze_constraints(&topo, &state, None);
        let refs = vec![Vector3::zeros(); topo.node_count()];
        let pi_prev = DVector::zeros(system.dof);
        let err = assemble_qp(
            &topo,
            &state,
            &system,
            &[6, 7],
            &refs,
            &pi_prev,
            &ControllerConfig::default(),
        );
        assert!(matches!(
            err,
            Err(ControllerError::PatternMismatch { rows: 2, .. })
        ));
    }
}
