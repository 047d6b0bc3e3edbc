//! Depth back-projection, least-squares surface normals, rigid transforms
//! and multi-frame fusion.
//!
//! Normal sign convention: every normal faces the camera, i.e. `n · p < 0`
//! for the back-projected point `p` of its pixel.

use nalgebra::{Matrix3, SymmetricEigen, Vector3, SVD};
use thiserror::Error;

use crate::camera::{backproject_unchecked, CameraIntrinsics};
use crate::exec::Exec;
use crate::grid::{DepthMap, Grid, GridError, Mask};

/// Default side of the normal-fitting window.
pub const DEFAULT_NORMAL_WINDOW: usize = 5;
/// Minimum number of valid neighbors (center excluded) for a normal fit.
pub const MIN_NORMAL_NEIGHBORS: usize = 6;
/// Relative eigenvalue gap below which a window counts as line-like.
const DEGENERATE_EIGEN_GAP: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("no frames to fuse")]
    EmptyInput,
    #[error("stride must be at least 1")]
    ZeroStride,
    #[error("normal window must be one of 3, 5, 7; got {0}")]
    BadWindow(usize),
    #[error("rotation is not orthonormal (error {0:e})")]
    NotOrthonormal(f64),
    #[error("non-finite coordinate in point cloud at index {0}")]
    NonFinite(usize),
    #[error("attribute length {attr} does not match point count {points}")]
    AttributeLength { attr: usize, points: usize },
    #[error("depth and intrinsics sizes differ: {depth:?} vs {intr:?}")]
    SizeMismatch { depth: (usize, usize), intr: (usize, usize) },
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub colors: Option<Vec<[u8; 3]>>,
    pub normals: Option<Vec<Vector3<f64>>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self, GeometryError> {
        let cloud = Self {
            points,
            colors: None,
            normals: None,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if let Some(i) = self.points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(GeometryError::NonFinite(i));
        }
        for attr in [self.colors.as_ref().map(Vec::len), self.normals.as_ref().map(Vec::len)]
            .into_iter()
            .flatten()
        {
            if attr != self.points.len() {
                return Err(GeometryError::AttributeLength {
                    attr,
                    points: self.points.len(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Axis-aligned bounding box diagonal length; 0 for an empty cloud.
    pub fn diameter(&self) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (hi - lo).norm()
    }

    /// Appends `other`; attributes survive only if both clouds carry them.
    pub fn extend(&mut self, other: PointCloud) {
        if other.points.is_empty() {
            return;
        }
        if self.points.is_empty() {
            *self = other;
            return;
        }
        self.normals = match (self.normals.take(), other.normals) {
            (Some(mut a), Some(b)) => {
                a.extend(b);
                Some(a)
            }
            _ => None,
        };
        self.colors = match (self.colors.take(), other.colors) {
            (Some(mut a), Some(b)) => {
                a.extend(b);
                Some(a)
            }
            _ => None,
        };
        self.points.extend(other.points);
    }
}

/// Unit normals in camera coordinates with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalMap {
    pub vectors: Grid<Vector3<f64>>,
    pub valid: Mask,
}

impl NormalMap {
    /// Checks shape and unit length (within 1e-6) at valid pixels.
    pub fn new(vectors: Grid<Vector3<f64>>, valid: Mask) -> Result<Self, GridError> {
        vectors.same_shape(&valid)?;
        for y in 0..vectors.height() {
            for x in 0..vectors.width() {
                if *valid.get(x, y) && ((vectors.get(x, y).norm() - 1.0).abs() > 1e-6) {
                    return Err(GridError::NotUnit { x, y });
                }
            }
        }
        Ok(Self { vectors, valid })
    }

    /// The same unit vector everywhere.
    pub fn constant(width: usize, height: usize, n: Vector3<f64>) -> Self {
        Self {
            vectors: Grid::filled(width, height, n.normalize()),
            valid: Grid::filled(width, height, true),
        }
    }

    pub fn width(&self) -> usize {
        self.vectors.width()
    }

    pub fn height(&self) -> usize {
        self.vectors.height()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.vectors.shape()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> Option<Vector3<f64>> {
        if *self.valid.get(x, y) {
            Some(*self.vectors.get(x, y))
        } else {
            None
        }
    }
}

/// Rigid transform `p' = R p + t`. Pose files and fusion treat it as
/// camera-to-world.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let err = orthonormality_error(&rotation);
        if err > 1e-9 || !translation.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::NotOrthonormal(err));
        }
        Ok(Self { rotation, translation })
    }

    /// Accepts a rotation orthonormal within `tol` and snaps it onto SO(3)
    /// (nearest rotation in Frobenius norm).
    pub fn new_snapped(rotation: Matrix3<f64>, translation: Vector3<f64>, tol: f64) -> Result<Self, GeometryError> {
        let err = orthonormality_error(&rotation);
        if err > tol || !translation.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::NotOrthonormal(err));
        }
        Ok(Self {
            rotation: nearest_rotation(&rotation),
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation of `angle` radians about `axis` (need not be unit), then `t`.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, t: Vector3<f64>) -> Self {
        let r = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        Self {
            rotation: *r.matrix(),
            translation: t,
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
    }
}

/// Max of ‖RᵀR − I‖_max and |det R − 1|.
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    let e = (r.transpose() * r - Matrix3::identity()).amax();
    e.max((r.determinant() - 1.0).abs())
}

pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = SVD::new(*m, true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = (u * vt).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt
}

/// One point per valid pixel with positive depth, sampling every `stride`-th
/// row and column. Pixel `(x, y)` back-projects from `(u, v) = (x, y)`.
pub fn depth_to_pointcloud(depth: &DepthMap, intr: &CameraIntrinsics, stride: usize) -> Result<PointCloud, GeometryError> {
    if stride == 0 {
        return Err(GeometryError::ZeroStride);
    }
    check_depth_intr(depth, intr)?;
    let mut points = Vec::new();
    for y in (0..depth.height()).step_by(stride) {
        for x in (0..depth.width()).step_by(stride) {
            if let Some(d) = depth.at(x, y) {
                if d > 0.0 {
                    points.push(backproject_unchecked(x as f64, y as f64, d, intr));
                }
            }
        }
    }
    Ok(PointCloud {
        points,
        colors: None,
        normals: None,
    })
}

fn check_depth_intr(depth: &DepthMap, intr: &CameraIntrinsics) -> Result<(), GeometryError> {
    if depth.shape() != intr.size() {
        return Err(GeometryError::SizeMismatch {
            depth: depth.shape(),
            intr: intr.size(),
        });
    }
    Ok(())
}

/// Least-squares normals from depth with the default execution policy.
pub fn normals_from_depth(depth: &DepthMap, intr: &CameraIntrinsics, window: usize) -> Result<NormalMap, GeometryError> {
    normals_from_depth_with(depth, intr, window, Exec::default())
}

/// Fits a total-least-squares plane to the back-projected points of each
/// `window x window` neighborhood and returns its normal, oriented toward
/// the camera.
///
/// A pixel gets a normal only if it is valid itself, has at least
/// [`MIN_NORMAL_NEIGHBORS`] valid neighbors in the window, and the window is
/// not line-like (two smallest covariance eigenvalues within 1e-12 of each
/// other relative to the trace).
pub fn normals_from_depth_with(depth: &DepthMap, intr: &CameraIntrinsics, window: usize, exec: Exec) -> Result<NormalMap, GeometryError> {
    if !matches!(window, 3 | 5 | 7) {
        return Err(GeometryError::BadWindow(window));
    }
    check_depth_intr(depth, intr)?;
    let (w, h) = depth.shape();
    // back-project once, reuse across overlapping windows
    let points: Vec<Option<Vector3<f64>>> = exec.map(w * h, |i| {
        let (x, y) = (i % w, i / w);
        depth
            .at(x, y)
            .filter(|&d| d > 0.0)
            .map(|d| backproject_unchecked(x as f64, y as f64, d, intr))
    });
    let half = window / 2;
    let fitted: Vec<Option<Vector3<f64>>> = exec.map(w * h, |i| {
        let (x, y) = (i % w, i / w);
        let center = points[i]?;
        let mut window_pts = [Vector3::zeros(); 49];
        let mut n = 0;
        for yy in y.saturating_sub(half)..(y + half + 1).min(h) {
            for xx in x.saturating_sub(half)..(x + half + 1).min(w) {
                if let Some(p) = points[yy * w + xx] {
                    window_pts[n] = p;
                    n += 1;
                }
            }
        }
        if n < MIN_NORMAL_NEIGHBORS + 1 {
            return None;
        }
        let normal = plane_normal(&window_pts[..n])?;
        let facing = normal.dot(&center);
        if facing < 0.0 {
            Some(normal)
        } else if facing > 0.0 {
            Some(-normal)
        } else {
            None
        }
    });
    let valid = Grid::from_vec(w, h, fitted.iter().map(Option::is_some).collect())?;
    let vectors = Grid::from_vec(w, h, fitted.into_iter().map(|n| n.unwrap_or_else(Vector3::zeros)).collect())?;
    Ok(NormalMap { vectors, valid })
}

/// Unit normal of the total-least-squares plane through `pts`, or `None` for
/// line-like or coincident sets.
pub fn plane_normal(pts: &[Vector3<f64>]) -> Option<Vector3<f64>> {
    let n = pts.len() as f64;
    let mean = pts.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut cov = Matrix3::zeros();
    for p in pts {
        let d = p - mean;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (l0, l1) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    let trace = eig.eigenvalues.sum();
    if !(trace > 0.0) || (l1 - l0) <= DEGENERATE_EIGEN_GAP * trace {
        return None;
    }
    let v = eig.eigenvectors.column(order[0]).into_owned();
    let norm = v.norm();
    (norm > 0.0).then(|| v / norm)
}

pub fn transform_cloud(cloud: &PointCloud, pose: &Pose) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| pose.apply(p)).collect(),
        colors: cloud.colors.clone(),
        normals: cloud.normals.as_ref().map(|ns| ns.iter().map(|n| pose.rotation * n).collect()),
    }
}

/// A depth frame with its intrinsics and camera-to-world pose.
#[derive(Clone, Debug)]
pub struct Frame {
    pub depth: DepthMap,
    pub intr: CameraIntrinsics,
    pub pose: Pose,
}

pub fn fuse_frames(frames: &[Frame], stride: usize) -> Result<PointCloud, GeometryError> {
    fuse_frames_with(frames, stride, Exec::default())
}

/// Back-projects every frame, moves it to world coordinates and concatenates
/// in frame order.
pub fn fuse_frames_with(frames: &[Frame], stride: usize, exec: Exec) -> Result<PointCloud, GeometryError> {
    if frames.is_empty() {
        return Err(GeometryError::EmptyInput);
    }
    let clouds = exec.map_slice(frames, |f| {
        depth_to_pointcloud(&f.depth, &f.intr, stride).map(|c| transform_cloud(&c, &f.pose))
    });
    let mut out = PointCloud::default();
    for c in clouds {
        out.extend(c?);
    }
    Ok(out)
}
