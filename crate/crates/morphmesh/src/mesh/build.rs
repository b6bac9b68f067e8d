//! Mesh construction: flat grids and grids draped over surface fields.

use super::{grid_joints, project_to_constraints_direct, MeshError, MeshState, MeshTopology};
use crate::se3::{rotation_to_quat, Pose, UnitQuaternion};
use crate::shape::ShapeField;
use nalgebra::{Matrix3, Vector3};

/// Residual bound a fitted initial configuration must reach.
const INIT_FIT_TOL: f64 = 1e-10;
const INIT_FIT_MAX_ITER: usize = 50;
/// Above this after fitting, construction fails rather than returning a
/// configuration simulation would immediately have to repair.
const INIT_FIT_FAIL: f64 = 1e-6;

/// Initial configuration of a new mesh.
pub enum InitialSurface<'a> {
    /// All nodes coplanar at z = 0, identity orientations; closes exactly.
    Flat,
    /// Nodes draped over the graph of a field at `t = 0`: sampled on the
    /// grid, oriented along the tangent frame, then pulled onto the
    /// constraint manifold by Gauss-Newton.
    Surface(&'a ShapeField),
}

/// Builds an `n x m` mesh with joint-offset magnitude `half_spacing`
/// (meters). `extra_fixed` lists node indices to rigidly fix *in addition*
/// to the father node `(1,1)`, which is always fixed at its initial pose.
///
/// Nodes are spaced `2 * half_spacing` apart: node `(i, j)` starts above
/// the grid point `x = 2l(j-1)`, `y = 2l(i-1)`.
pub fn build_mesh(
    n: usize,
    m: usize,
    half_spacing: f64,
    init: &InitialSurface<'_>,
    extra_fixed: &[usize],
) -> Result<(MeshTopology, MeshState), MeshError> {
    if n == 0 || m == 0 {
        return Err(MeshError::InvalidDimensions {
            n,
            m,
            reason: "both dimensions must be at least 1".into(),
        });
    }
    if !(half_spacing > 0.0 && half_spacing.is_finite()) {
        return Err(MeshError::InvalidDimensions {
            n,
            m,
            reason: format!("half spacing {half_spacing} must be positive and finite"),
        });
    }
    let nodes = n * m;
    let mut fixed = vec![0usize];
    for &k in extra_fixed {
        if k >= nodes {
            return Err(MeshError::InvalidFixedNode(k, nodes));
        }
        fixed.push(k);
    }
    fixed.sort_unstable();
    fixed.dedup();

    let spacing = 2.0 * half_spacing;
    let mut poses = Vec::with_capacity(nodes);
    for i in 0..n {
        for j in 0..m {
            let x = spacing * j as f64;
            let y = spacing * i as f64;
            let pose = match init {
                InitialSurface::Flat => Pose {
                    position: Vector3::new(x, y, 0.0),
                    orientation: UnitQuaternion::identity(),
                },
                InitialSurface::Surface(field) => {
                    let z = field.value(x, y, 0.0)?;
                    let (fx, fy) = field.gradient(x, y, 0.0)?;
                    Pose {
                        position: Vector3::new(x, y, z),
                        orientation: tangent_frame(fx, fy),
                    }
                }
            };
            poses.push(pose);
        }
    }
    let state = MeshState { poses };

    // Fitting happens with only the father pinned; extra fixed nodes then
    // freeze the poses the fit gave them. Pinning them at their *sampled*
    // poses instead would often be infeasible: on a curved surface the
    // straight-line distance between two grid samples can exceed what the
    // joint chain between them can span, so the drape-then-bolt order is
    // what makes arbitrary fixed sets constructible.
    let mut topology = MeshTopology {
        n,
        m,
        half_spacing,
        square_side: half_spacing,
        joints: grid_joints(n, m),
        fixed: vec![0],
        fixed_poses: vec![state.poses[0]],
    };

    let state = match init {
        InitialSurface::Flat => state, // closes exactly by construction
        InitialSurface::Surface(_) => {
            let proj =
                project_to_constraints_direct(&topology, &state, INIT_FIT_TOL, INIT_FIT_MAX_ITER);
            if proj.residual_inf > INIT_FIT_FAIL {
                return Err(MeshError::InitFitFailure {
                    residual: proj.residual_inf,
                    tol: INIT_FIT_FAIL,
                    iters: proj.iterations,
                });
            }
            proj.state
        }
    };

    topology.fixed_poses = fixed.iter().map(|&k| state.poses[k]).collect();
    topology.fixed = fixed;

    Ok((topology, state))
}

/// Body frame of a node resting on the graph of `f`: z along the upward
/// surface normal, x along the (normalized) x tangent `(1, 0, f_x)`, which
/// is orthogonal to the normal exactly.
fn tangent_frame(fx: f64, fy: f64) -> UnitQuaternion {
    let zax = Vector3::new(-fx, -fy, 1.0).normalize();
    let xax = Vector3::new(1.0, 0.0, fx).normalize();
    let yax = zax.cross(&xax);
    let r = Matrix3::from_columns(&[xax, yax, zax]);
    rotation_to_quat(&r)
}
