//! Kinematic modeling, actuator placement, and closed-loop shape control for
//! morphing covers: regular n x m meshes of rigid square nodes joined by
//! spherical joints.
//!
//! The crate is organized bottom-up:
//!
//! - [`se3`]: quaternions, rotations, poses, and the small amount of Lie-group
//!   machinery the rest of the crate needs.
//! - [`linalg`]: dense numerical kernels (rank-revealing QR, thin QR,
//!   conjugate gradients, a minimal sparse matrix) shared by the mesh and
//!   control layers.
//! - [`mesh`]: mesh topology, maximal-coordinate constraint functions, their
//!   Jacobian, and the feasible-velocity (null-space) analysis that yields
//!   the degrees of freedom of a configuration.
//! - [`shape`]: a small expression language for time-varying surfaces
//!   `z = f(x, y, t)`, with exact symbolic partial derivatives, used both for
//!   target shapes and for initial mesh configurations.
//! - [`actuation`]: genetic-algorithm placement of actuated joint axes over
//!   the feasible-velocity basis, plus a sensitivity refinement that prefers
//!   placements whose solvability degrades slowly as the mesh moves.
//! - [`qp`] and [`control`]: the velocity-level shape controller; per-node
//!   angular-velocity references and a box/range-of-motion constrained
//!   quadratic program solved by operator splitting.
//! - [`sim`]: quaternion-state kinematic simulation with adaptive
//!   integration, constraint projection, noise models, and error metrics.
//! - [`scenario`] and [`report`]: JSON scenario configs (with bundled
//!   presets), deterministic run orchestration, and CSV/JSON outputs.
//!
//! The `morphmesh` binary exposes the `analyze`, `place`, `simulate`, and
//! `verify` subcommands over these modules.

pub mod actuation;
pub mod control;
pub mod linalg;
pub mod mesh;
pub mod qp;
pub mod report;
pub mod scenario;
pub mod se3;
pub mod shape;
pub mod sim;
