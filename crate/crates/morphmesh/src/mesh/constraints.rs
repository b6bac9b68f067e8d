//! Holonomic constraint function, its Jacobian, and the relative-velocity
//! map.
//!
//! Row order (shared by residual and Jacobian): 3 rows per joint in joint
//! order, then 6 rows per fixed node in ascending node order. With poses
//! perturbed by world-frame velocities (`p_dot = v`, `R_dot = skew(w) R`),
//! the joint closure `g = (p_p + R_p d) - (p_c - R_c d)` differentiates to
//!
//! `g_dot = v_p - skew(R_p d) w_p - v_c - skew(R_c d) w_c`
//!
//! which gives the parent block `[I, -skew(R_p d)]` and child block
//! `[-I, -skew(R_c d)]`. Fixed-node rows are identity on the node's 6
//! velocity slots (the orientation residual is the SO(3) log, whose
//! derivative is the identity at zero error).

use super::{MeshState, MeshTopology};
use crate::linalg::CsrMatrix;
use crate::se3::rotation_log;
use nalgebra::DVector;

/// Stacked constraint residual; zero exactly on closed configurations.
///
/// Units: joint rows and fixed-position rows are meters; fixed-orientation
/// rows are radians (rotation-vector error against the pinned pose).
pub fn constraint_residual(topology: &MeshTopology, state: &MeshState) -> DVector<f64> {
    let mut g = DVector::zeros(topology.constraint_dim());
    let mut row = 0;
    for joint in &topology.joints {
        let d = joint.axis.direction() * topology.half_spacing;
        let pp = &state.poses[joint.parent];
        let pc = &state.poses[joint.child];
        let from_parent = pp.position + pp.rotation() * d;
        let from_child = pc.position - pc.rotation() * d;
        let r = from_parent - from_child;
        g.fixed_rows_mut::<3>(row).copy_from(&r);
        row += 3;
    }
    for (k, &idx) in topology.fixed.iter().enumerate() {
        let pose = &state.poses[idx];
        let pref = &topology.fixed_poses[k];
        let dp = pose.position - pref.position;
        let dr = rotation_log(&(pose.rotation() * pref.rotation().transpose()));
        g.fixed_rows_mut::<3>(row).copy_from(&dp);
        g.fixed_rows_mut::<3>(row + 3).copy_from(&dr);
        row += 6;
    }
    g
}

/// Sparse constraint Jacobian mapping stacked node velocities (6 per node,
/// linear then angular, world frame) to constraint-residual rates.
pub fn constraint_jacobian(topology: &MeshTopology, state: &MeshState) -> CsrMatrix {
    let rows = topology.constraint_dim();
    let cols = topology.velocity_dim();
    // 24 entries per joint row-block (2 identity + 2 skew blocks), 6 per
    // fixed node.
    let mut triplets = Vec::with_capacity(24 * topology.joints.len() + 6 * topology.fixed.len());
    let mut row = 0;
    for joint in &topology.joints {
        let d = joint.axis.direction() * topology.half_spacing;
        let rp_d = state.poses[joint.parent].rotation() * d;
        let rc_d = state.poses[joint.child].rotation() * d;
        let (pv, pw) = (6 * joint.parent, 6 * joint.parent + 3);
        let (cv, cw) = (6 * joint.child, 6 * joint.child + 3);
        for r in 0..3 {
            triplets.push((row + r, pv + r, 1.0));
            triplets.push((row + r, cv + r, -1.0));
        }
        // -skew(rp_d) on parent angular, -skew(rc_d) on child angular.
        let skews = [(pw, rp_d), (cw, rc_d)];
        for (base, a) in skews {
            triplets.push((row, base + 1, a.z));
            triplets.push((row, base + 2, -a.y));
            triplets.push((row + 1, base, -a.z));
            triplets.push((row + 1, base + 2, a.x));
            triplets.push((row + 2, base, a.y));
            triplets.push((row + 2, base + 1, -a.x));
        }
        row += 3;
    }
    for &idx in &topology.fixed {
        for r in 0..6 {
            triplets.push((row + r, 6 * idx + r, 1.0));
        }
        row += 6;
    }
    CsrMatrix::from_triplets(rows, cols, &triplets)
}

/// Sparse map from stacked node velocities to the relative-velocity vector:
/// the father node's 6 velocity slots, then for each joint the child's
/// angular velocity relative to the parent, expressed in the parent frame
/// (`R_p^T (w_c - w_p)`).
pub fn relative_velocity_map(topology: &MeshTopology, state: &MeshState) -> CsrMatrix {
    let rows = topology.relative_dim();
    let cols = topology.velocity_dim();
    let mut triplets = Vec::with_capacity(6 + 18 * topology.joints.len());
    for r in 0..6 {
        triplets.push((r, r, 1.0)); // father occupies node 0's slots
    }
    let mut row = 6;
    for joint in &topology.joints {
        let rpt = state.poses[joint.parent].rotation().transpose();
        let pw = 6 * joint.parent + 3;
        let cw = 6 * joint.child + 3;
        for r in 0..3 {
            for c in 0..3 {
                let v = rpt[(r, c)];
                triplets.push((row + r, cw + c, v));
                triplets.push((row + r, pw + c, -v));
            }
        }
        row += 3;
    }
    CsrMatrix::from_triplets(rows, cols, &triplets)
}
