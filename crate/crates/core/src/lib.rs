//! Geometry and evaluation toolkit for metric monocular depth in a canonical
//! camera space.
//!
//! The crate covers the non-learned parts of a canonical-camera depth and
//! normal pipeline:
//!
//! * [`camera`]: pinhole algebra and the two canonical-space transforms
//!   (label rescaling and image resizing) with their inverses.
//! * [`geometry`]: back-projection, least-squares normals from depth, rigid
//!   transforms and multi-frame fusion.
//! * [`losses`]: silog, random-proposal normalization, virtual normal,
//!   depth-normal consistency and angular losses, plus loss schedules and a
//!   finite-difference gradient checker.
//! * [`refine`]: the residual update loop over a low-resolution depth and
//!   unnormalized normal state, with pluggable update operators.
//! * [`eval`]: depth, normal and reconstruction metrics, scale-shift
//!   alignment and ICP.
//! * [`io`] and [`cli`]: PFM / 16-bit PNG / PLY codecs, JSON sidecars and
//!   the `canodepth` command-line tool.
//!
//! Data-parallel inner loops go through [`Exec`]; with the `parallel` feature
//! (on by default) they run on rayon, otherwise sequentially. Both paths
//! produce bit-identical results.

// `!(x > 0.0)` is used on purpose so NaN takes the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod cli;
pub mod eval;
mod exec;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod knn;
pub mod losses;
pub mod refine;
pub mod rng;
pub mod synth;

pub use camera::{CameraIntrinsics, CanonicalBundle, CanonicalMode, PhysicalCamera};
pub use exec::{init_threads_from_env, Exec};
pub use geometry::{NormalMap, PointCloud, Pose};
pub use grid::{DepthMap, Grid, ImageBuffer, Mask};

/// Canonical focal length in pixels used when none is given.
pub const DEFAULT_CANONICAL_FOCAL: f64 = 1000.0;

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
