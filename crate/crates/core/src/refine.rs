//! Iterative joint depth-normal refinement.
//!
//! A [`RefineState`] holds a low-resolution canonical-space depth, an
//! unnormalized normal field and operator-owned hidden state. Each step an
//! [`UpdateOperator`] proposes residuals that [`apply_update`] adds verbatim;
//! no clamping or normalization happens until [`finalize`], which upsamples,
//! applies ReLU to depth, normalizes normals and undoes the canonical
//! transform.
//!
//! The learned recurrent block is out of scope. [`ZeroOperator`] and
//! [`ConsistencyDescent`] exercise the loop without learned weights.

use nalgebra::Vector3;
use thiserror::Error;

use crate::camera::{backproject_unchecked, CameraError, CameraIntrinsics, CanonicalMeta, CanonicalMode};
use crate::exec::Exec;
use crate::geometry::{normals_from_depth_with, GeometryError, NormalMap, DEFAULT_NORMAL_WINDOW};
use crate::grid::{resize_bilinear, resize_depth, DepthMap, Grid, GridError};
use crate::losses::{consistency_against, LossError};

/// Intermediate resolution relative to the full canonical image.
pub const DEFAULT_UPSAMPLE: usize = 4;
/// Refinement steps used when none is given.
pub const DEFAULT_STEPS: usize = 4;
/// Normals shorter than this are invalid after finalization.
pub const MIN_NORMAL_NORM: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum RefineError {
    #[error("update shape {got:?} does not match state shape {expected:?}")]
    ShapeMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("upsample factor must be at least 1")]
    ZeroUpsample,
    #[error("step size must be non-negative and finite, got {0}")]
    BadStepSize(f64),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineState<H> {
    pub depth_c: DepthMap,
    pub normal_u: Grid<Vector3<f64>>,
    pub hidden: H,
    pub step: usize,
}

impl<H> RefineState<H> {
    pub fn new(depth_c: DepthMap, normal_u: Grid<Vector3<f64>>, hidden: H) -> Result<Self, RefineError> {
        if depth_c.shape() != normal_u.shape() {
            return Err(RefineError::ShapeMismatch {
                expected: depth_c.shape(),
                got: normal_u.shape(),
            });
        }
        Ok(Self {
            depth_c,
            normal_u,
            hidden,
            step: 0,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.depth_c.shape()
    }

    /// `normal_u` normalized per pixel; near-zero vectors are invalid.
    pub fn unit_normals(&self) -> NormalMap {
        normalize_field(&self.normal_u)
    }
}

/// Residuals proposed by an operator for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Update<H> {
    pub delta_depth: Grid<f64>,
    pub delta_normal: Grid<Vector3<f64>>,
    pub hidden: H,
}

pub trait UpdateOperator {
    type Hidden: Clone;

    /// Proposes residuals for `state`. Must be deterministic.
    fn propose(&self, state: &RefineState<Self::Hidden>) -> Result<Update<Self::Hidden>, RefineError>;
}

/// Adds the residuals, replaces the hidden state and advances the step.
pub fn apply_update<H>(state: &RefineState<H>, update: Update<H>) -> Result<RefineState<H>, RefineError> {
    let shape = state.shape();
    for got in [update.delta_depth.shape(), update.delta_normal.shape()] {
        if got != shape {
            return Err(RefineError::ShapeMismatch { expected: shape, got });
        }
    }
    let depth_values = Grid::from_vec(
        shape.0,
        shape.1,
        state
            .depth_c
            .values
            .iter()
            .zip(update.delta_depth.iter())
            .map(|(d, dd)| d + dd)
            .collect(),
    )?;
    let normal_u = Grid::from_vec(
        shape.0,
        shape.1,
        state
            .normal_u
            .iter()
            .zip(update.delta_normal.iter())
            .map(|(n, dn)| n + dn)
            .collect(),
    )?;
    Ok(RefineState {
        depth_c: DepthMap {
            values: depth_values,
            valid: state.depth_c.valid.clone(),
        },
        normal_u,
        hidden: update.hidden,
        step: state.step + 1,
    })
}

/// Runs `steps + 1` updates. The trajectory holds the initial state followed
/// by every updated state, `steps + 2` entries in total.
pub fn run_refinement<O: UpdateOperator>(
    init: RefineState<O::Hidden>,
    op: &O,
    steps: usize,
) -> Result<Vec<RefineState<O::Hidden>>, RefineError> {
    let mut trajectory = Vec::with_capacity(steps + 2);
    trajectory.push(init);
    for _ in 0..=steps {
        let last = trajectory.last().expect("nonempty");
        let update = op.propose(last)?;
        let next = apply_update(last, update)?;
        trajectory.push(next);
    }
    Ok(trajectory)
}

fn normalize_field(field: &Grid<Vector3<f64>>) -> NormalMap {
    let valid = field.map(|n| n.norm() >= MIN_NORMAL_NORM && n.iter().all(|c| c.is_finite()));
    let vectors = field.map(|n| {
        let len = n.norm();
        if len >= MIN_NORMAL_NORM {
            n / len
        } else {
            Vector3::zeros()
        }
    });
    NormalMap { vectors, valid }
}

/// Upsamples by `upsample_factor`, clamps depth at zero, normalizes normals
/// and maps depth back to metric space using the canonical transform.
///
/// In image mode the upsampled grid must match the canonical image size;
/// depth and normals are then resized to the original image size.
pub fn finalize<H>(state: &RefineState<H>, upsample_factor: usize, meta: &CanonicalMeta) -> Result<(DepthMap, NormalMap), RefineError> {
    if upsample_factor == 0 {
        return Err(RefineError::ZeroUpsample);
    }
    let (w, h) = state.shape();
    let (uw, uh) = (w * upsample_factor, h * upsample_factor);
    let (depth_up, normal_up) = if upsample_factor == 1 {
        (state.depth_c.clone(), state.normal_u.clone())
    } else {
        (resize_depth(&state.depth_c, uw, uh), resize_bilinear(&state.normal_u, uw, uh))
    };
    let depth_c = DepthMap {
        values: depth_up.values.map(|d| d.max(0.0)),
        valid: depth_up.valid,
    };
    let depth = meta.restore(&depth_c)?;
    let normal_up = if meta.mode == CanonicalMode::Image && depth.shape() != normal_up.shape() {
        resize_bilinear(&normal_up, depth.width(), depth.height())
    } else {
        normal_up
    };
    Ok((depth, normalize_field(&normal_up)))
}

/// Emits zero residuals; the hidden state is carried through unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroOperator;

impl UpdateOperator for ZeroOperator {
    type Hidden = ();

    fn propose(&self, state: &RefineState<()>) -> Result<Update<()>, RefineError> {
        let (w, h) = state.shape();
        Ok(Update {
            delta_depth: Grid::filled(w, h, 0.0),
            delta_normal: Grid::filled(w, h, Vector3::zeros()),
            hidden: (),
        })
    }
}

/// Share of the neighbor-plane depth residual applied per unit step size.
pub const DEPTH_RELAXATION: f64 = 0.5;

/// Non-learned reference operator.
///
/// Normals move toward the least-squares pseudo-normals of the current
/// depth by `step_size`. Depth moves toward the mean of the depths at which
/// the pixel's viewing ray meets the tangent planes of its 8 neighbors
/// (each plane through the neighbor's point with the neighbor's current
/// normal), by `step_size · DEPTH_RELAXATION`. Geometry is evaluated in
/// metric space: canonical depth is divided by `ω_d` and `intr` (full
/// resolution, metric camera) is rescaled to the state resolution. The
/// hidden state keeps the last pseudo-normal field.
#[derive(Clone, Debug)]
pub struct ConsistencyDescent {
    pub step_size: f64,
    pub intr: CameraIntrinsics,
    pub omega_d: f64,
    pub exec: Exec,
}

pub fn consistency_descent_operator(
    step_size: f64,
    intr: CameraIntrinsics,
    meta: &CanonicalMeta,
) -> Result<ConsistencyDescent, RefineError> {
    if !(step_size >= 0.0 && step_size.is_finite()) {
        return Err(RefineError::BadStepSize(step_size));
    }
    intr.validate()?;
    Ok(ConsistencyDescent {
        step_size,
        intr,
        omega_d: meta.omega_d,
        exec: Exec::default(),
    })
}

impl ConsistencyDescent {
    /// Metric depth and intrinsics at the state's resolution.
    pub fn metric_view<H>(&self, state: &RefineState<H>) -> (DepthMap, CameraIntrinsics) {
        let (w, h) = state.shape();
        let intr = if (w, h) == self.intr.size() {
            self.intr
        } else {
            self.intr.rescaled_to(w, h)
        };
        let depth = if self.omega_d == 1.0 {
            state.depth_c.clone()
        } else {
            state.depth_c.scaled(1.0 / self.omega_d)
        };
        (depth, intr)
    }

    /// Depth-normal consistency of the state's normalized normals against
    /// the pseudo-normals of its metric depth.
    pub fn consistency<H>(&self, state: &RefineState<H>) -> Result<f64, RefineError> {
        let (depth, intr) = self.metric_view(state);
        let pseudo = normals_from_depth_with(&depth, &intr, DEFAULT_NORMAL_WINDOW, self.exec)?;
        Ok(consistency_against(&state.unit_normals(), &pseudo)?)
    }
}

impl UpdateOperator for ConsistencyDescent {
    type Hidden = Option<NormalMap>;

    fn propose(&self, state: &RefineState<Self::Hidden>) -> Result<Update<Self::Hidden>, RefineError> {
        let (w, h) = state.shape();
        let (depth, intr) = self.metric_view(state);
        let pseudo = normals_from_depth_with(&depth, &intr, DEFAULT_NORMAL_WINDOW, self.exec)?;
        let step = self.step_size;

        let delta_normal = Grid::from_vec(
            w,
            h,
            self.exec.map(w * h, |i| {
                if step == 0.0 || !pseudo.valid.as_slice()[i] {
                    return Vector3::zeros();
                }
                (pseudo.vectors.as_slice()[i] - state.normal_u.as_slice()[i]) * step
            }),
        )?;

        let unit = state.unit_normals();
        let points: Vec<Option<Vector3<f64>>> = (0..w * h)
            .map(|i| {
                let (x, y) = (i % w, i / w);
                depth
                    .at(x, y)
                    .filter(|&d| d > 0.0)
                    .map(|d| backproject_unchecked(x as f64, y as f64, d, &intr))
            })
            .collect();
        let depth_step = step * DEPTH_RELAXATION * self.omega_d;
        let delta_depth = Grid::from_vec(
            w,
            h,
            self.exec.map(w * h, |i| {
                let (x, y) = (i % w, i / w);
                let Some(p) = points[i] else { return 0.0 };
                if depth_step == 0.0 {
                    return 0.0;
                }
                let ray = intr.ray(x as f64, y as f64);
                let (mut sum, mut n) = (0.0, 0usize);
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        let j = yy * w + xx;
                        if j == i || !unit.valid.as_slice()[j] {
                            continue;
                        }
                        let Some(q) = points[j] else { continue };
                        let nq = unit.vectors.as_slice()[j];
                        let denom = nq.dot(&ray);
                        if denom.abs() > 1e-6 {
                            sum += nq.dot(&q) / denom;
                            n += 1;
                        }
                    }
                }
                if n == 0 {
                    return 0.0;
                }
                depth_step * (sum / n as f64 - p.z)
            }),
        )?;

        Ok(Update {
            delta_depth,
            delta_normal,
            hidden: Some(pseudo),
        })
    }
}
