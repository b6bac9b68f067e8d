//! Mesh topology, state, and maximal-coordinate constraint analysis.
//!
//! A morphing cover is an `n x m` grid of rigid square nodes. Adjacent nodes
//! are coupled by spherical joints located midway between their centers:
//! node `(i, j)` connects to `(i, j+1)` through a joint offset `l * e_x` from
//! both centers (in their body frames), and to `(i+1, j)` through a joint
//! offset `l * e_y`, where `l` is half the center spacing. A cover therefore
//! has `2nm - n - m` joints and, with each node's pose described maximally by
//! position plus orientation, `6nm` velocity coordinates.
//!
//! Node `(1, 1)` (the father node) is always rigidly fixed; configurations
//! may fix further nodes. The holonomic constraint function stacks, in a
//! documented deterministic order, one 3-vector closure residual per joint
//! and one 6-vector pose residual per fixed node. Feasible velocities are
//! the kernel of its Jacobian; [`analyze_constraints`] extracts an
//! orthonormal basis of that kernel together with the configuration's
//! degree-of-freedom count.
//!
//! Ordering conventions (stable, relied on by file formats and actuation
//! row indices):
//!
//! - Nodes: row-major, `(i, j)` at index `(i-1)*m + (j-1)`, `i` in `1..=n`,
//!   `j` in `1..=m`.
//! - Joints: for each node in row-major order, its `+x` joint (to `(i, j+1)`)
//!   precedes its `+y` joint (to `(i+1, j)`).
//! - Velocity vector: node `k` occupies slots `6k..6k+3` (linear) and
//!   `6k+3..6k+6` (angular), world frame.
//! - Relative-velocity vector: 6 father-velocity slots, then one 3-slot
//!   block per joint in joint order (relative angular velocity of the child
//!   with respect to the parent, expressed in the parent frame).

mod analysis;
mod build;
mod constraints;
mod maps;

pub use analysis::{analyze_constraints, ConstraintSystem};
pub use build::{build_mesh, InitialSurface};
pub use constraints::{constraint_jacobian, constraint_residual, relative_velocity_map};
pub use maps::{
    apply_velocity, project_to_constraints, project_to_constraints_direct, relative_from_actuated,
    Projection,
};

use crate::se3::Pose;
use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("mesh dimensions {n}x{m} invalid: {reason}")]
    InvalidDimensions { n: usize, m: usize, reason: String },
    #[error("fixed node index {0} out of range for {1} nodes")]
    InvalidFixedNode(usize, usize),
    #[error(
        "initial surface fit failed: residual {residual:.3e} above {tol:.3e} after {iters} iterations"
    )]
    InitFitFailure {
        residual: f64,
        tol: f64,
        iters: usize,
    },
    #[error("actuation rows produce a singular {0}x{0} actuation matrix (condition {1:.3e})")]
    SingularActuation(usize, f64),
    #[error("actuation row {row} out of range or inside the father block (valid: 6..{limit})")]
    InvalidActuationRow { row: usize, limit: usize },
    #[error("surface evaluation during mesh construction failed: {0}")]
    Surface(#[from] crate::shape::EvalError),
}

/// Which body axis carries a joint's offset (and names its range-of-motion
/// axis pair): `x` joints couple horizontal neighbors, `y` joints vertical.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointAxis {
    X,
    Y,
}

impl JointAxis {
    /// Unit offset direction in both bodies' frames.
    pub fn direction(self) -> Vector3<f64> {
        match self {
            JointAxis::X => Vector3::x(),
            JointAxis::Y => Vector3::y(),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            JointAxis::X => "x",
            JointAxis::Y => "y",
        }
    }
}

/// One spherical joint between two adjacent nodes.
///
/// The joint point sits at `+l * axis` in the parent body frame and at
/// `-l * axis` in the child body frame, so closure reads
/// `p_parent + R_parent * (l * axis) = p_child - R_child * (l * axis)`.
#[derive(Debug, Clone, Copy)]
pub struct Joint {
    /// Node index of the parent (the `(i, j)` side).
    pub parent: usize,
    /// Node index of the child (the `(i, j+1)` or `(i+1, j)` side).
    pub child: usize,
    pub axis: JointAxis,
}

/// Static description of a cover: dimensions, geometry, joints, and which
/// nodes are rigidly fixed (at which reference poses).
#[derive(Debug, Clone)]
pub struct MeshTopology {
    /// Rows of nodes.
    pub n: usize,
    /// Columns of nodes.
    pub m: usize,
    /// Half the center-to-center spacing; the joint offset magnitude.
    pub half_spacing: f64,
    /// Side length of each square node (display/geometry metadata; the
    /// kinematics depend only on `half_spacing`).
    pub square_side: f64,
    /// Joints in the documented deterministic order.
    pub joints: Vec<Joint>,
    /// Fixed node indices, sorted ascending; always contains node 0.
    pub fixed: Vec<usize>,
    /// Reference poses the fixed nodes are pinned to, parallel to `fixed`.
    pub fixed_poses: Vec<Pose>,
}

impl MeshTopology {
    pub fn node_count(&self) -> usize {
        self.n * self.m
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    /// Velocity-space dimension: 6 per node.
    pub fn velocity_dim(&self) -> usize {
        6 * self.node_count()
    }

    /// Pose-state dimension: 7 per node (position + quaternion).
    pub fn state_dim(&self) -> usize {
        7 * self.node_count()
    }

    /// Rows of the constraint function: 3 per joint plus 6 per fixed node.
    pub fn constraint_dim(&self) -> usize {
        3 * self.joints.len() + 6 * self.fixed.len()
    }

    /// Rows of the relative-velocity vector: father 6 plus 3 per joint.
    pub fn relative_dim(&self) -> usize {
        6 + 3 * self.joints.len()
    }

    /// Node index of 1-based grid coordinates.
    pub fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!((1..=self.n).contains(&i) && (1..=self.m).contains(&j));
        (i - 1) * self.m + (j - 1)
    }

    /// 1-based grid coordinates of a node index.
    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx / self.m + 1, idx % self.m + 1)
    }

    pub fn is_fixed(&self, idx: usize) -> bool {
        self.fixed.binary_search(&idx).is_ok()
    }

    /// Human-readable label of one relative-velocity row, e.g.
    /// `"J(1,1)-(1,2):x"` for the x-axis of the joint between nodes (1,1)
    /// and (1,2). Rows 0..6 are the father block.
    pub fn row_label(&self, row: usize) -> String {
        if row < 6 {
            let comp = ["vx", "vy", "vz", "wx", "wy", "wz"][row];
            return format!("father:{comp}");
        }
        let j = (row - 6) / 3;
        let comp = ["x", "y", "z"][(row - 6) % 3];
        let joint = &self.joints[j];
        let (pi, pj) = self.coords(joint.parent);
        let (ci, cj) = self.coords(joint.child);
        format!("J({pi},{pj})-({ci},{cj}):{comp}")
    }
}

/// Poses of all nodes, indexed like the topology's nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshState {
    pub poses: Vec<Pose>,
}

impl MeshState {
    pub fn node_count(&self) -> usize {
        self.poses.len()
    }
}

/// Builds the joint list for an `n x m` grid in the documented order.
pub(crate) fn grid_joints(n: usize, m: usize) -> Vec<Joint> {
    let mut joints = Vec::with_capacity(2 * n * m - n - m);
    for i in 0..n {
        for j in 0..m {
            let idx = i * m + j;
            if j + 1 < m {
                joints.push(Joint {
                    parent: idx,
                    child: idx + 1,
                    axis: JointAxis::X,
                });
            }
            if i + 1 < n {
                joints.push(Joint {
                    parent: idx,
                    child: idx + m,
                    axis: JointAxis::Y,
                });
            }
        }
    }
    joints
}
