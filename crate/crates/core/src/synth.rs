//! Synthetic scenes with analytic geometry: planes, an inward-facing box
//! room and noisy refinement inputs. Used by the test suites, benchmarks and
//! the `refine-demo` command.

use nalgebra::Vector3;

use crate::camera::{backproject_unchecked, CameraIntrinsics};
use crate::geometry::{Frame, PointCloud, Pose};
use crate::grid::{DepthMap, Grid, ImageBuffer};
use crate::refine::RefineState;
use crate::rng::SeededRng;

/// Plane `{X : n·X = offset}` in camera coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

impl Plane {
    pub fn fronto(depth: f64) -> Self {
        Self {
            normal: Vector3::z(),
            offset: depth,
        }
    }

    /// Depth along the pixel ray `(u, v)`, `None` when the ray misses or
    /// hits behind the camera.
    pub fn depth_at(&self, intr: &CameraIntrinsics, u: f64, v: f64) -> Option<f64> {
        let denom = self.normal.dot(&intr.ray(u, v));
        if denom.abs() < 1e-12 {
            return None;
        }
        let d = self.offset / denom;
        (d > 0.0 && d.is_finite()).then_some(d)
    }
}

pub fn render_plane(intr: &CameraIntrinsics, plane: &Plane) -> DepthMap {
    DepthMap::from_fn(intr.width, intr.height, |x, y| plane.depth_at(intr, x as f64, y as f64))
}

/// Smooth grayscale texture on world `(X, Y)`.
pub fn texture(x: f64, y: f64) -> f64 {
    0.5 + 0.25 * (7.0 * x).sin() * (5.0 * y).cos() + 0.2 * (3.0 * x + 2.0 * y).sin()
}

/// Fronto-parallel plane at `depth` with [`texture`] painted on it.
pub fn render_textured_plane(intr: &CameraIntrinsics, depth: f64) -> (DepthMap, ImageBuffer) {
    let (w, h) = intr.size();
    let d = DepthMap::dense(Grid::filled(w, h, depth)).expect("finite");
    let pixels = Grid::from_fn(w, h, |x, y| {
        let wx = (x as f64 - intr.cx) * depth / intr.fx;
        let wy = (y as f64 - intr.cy) * depth / intr.fy;
        let g = texture(wx, wy).clamp(0.0, 1.0);
        [g, g, g]
    });
    (d, ImageBuffer { pixels })
}

/// Smooth positive depth: a base level plus a few random low-frequency waves.
pub fn smooth_depth(w: usize, h: usize, seed: u64) -> DepthMap {
    let mut rng = SeededRng::new(seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.uniform(0.05, 0.3),
                rng.uniform(-0.15, 0.15),
                rng.uniform(-0.15, 0.15),
                rng.uniform(0.0, std::f64::consts::TAU),
            )
        })
        .collect();
    let base = rng.uniform(2.0, 5.0);
    DepthMap::from_fn(w, h, |x, y| {
        let (x, y) = (x as f64, y as f64);
        Some(base + waves.iter().map(|(a, kx, ky, p)| a * (kx * x + ky * y + p).sin()).sum::<f64>())
    })
}

/// Axis-aligned box interior `[-half, half]` centered at the world origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxRoom {
    pub half: Vector3<f64>,
}

impl BoxRoom {
    pub fn new(size_x: f64, size_y: f64, size_z: f64) -> Self {
        Self {
            half: Vector3::new(size_x, size_y, size_z) * 0.5,
        }
    }

    /// Ray parameter at which `origin + t·dir` leaves the box, for an origin
    /// strictly inside.
    pub fn exit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> f64 {
        let mut t = f64::INFINITY;
        for i in 0..3 {
            if dir[i] != 0.0 {
                let wall = self.half[i].copysign(dir[i]);
                t = t.min((wall - origin[i]) / dir[i]);
            }
        }
        t
    }

    /// Camera-frame depth image seen from `pose` (camera-to-world).
    pub fn render(&self, intr: &CameraIntrinsics, pose: &Pose) -> DepthMap {
        DepthMap::from_fn(intr.width, intr.height, |x, y| {
            let dir = pose.rotation * intr.ray(x as f64, y as f64);
            Some(self.exit(&pose.translation, &dir))
        })
    }

    /// World-space wall points hit by every pixel ray, cast directly.
    pub fn ray_cast_cloud(&self, intr: &CameraIntrinsics, poses: &[Pose]) -> PointCloud {
        let mut pts = Vec::new();
        for pose in poses {
            for y in 0..intr.height {
                for x in 0..intr.width {
                    let dir = pose.rotation * intr.ray(x as f64, y as f64);
                    let t = self.exit(&pose.translation, &dir);
                    pts.push(pose.translation + dir * t);
                }
            }
        }
        PointCloud {
            points: pts,
            colors: None,
            normals: None,
        }
    }
}

/// Camera at the room center looking along +z, +x and −z (yaw 0°, 90°, 180°
/// about the y axis).
pub fn box_room_poses() -> Vec<Pose> {
    [0.0f64, 90.0, 180.0]
        .iter()
        .map(|deg| Pose::from_axis_angle(Vector3::y(), deg.to_radians(), Vector3::zeros()))
        .collect()
}

pub fn box_room_frames(room: &BoxRoom, intr: &CameraIntrinsics) -> Vec<Frame> {
    box_room_poses()
        .into_iter()
        .map(|pose| Frame {
            depth: room.render(intr, &pose),
            intr: *intr,
            pose,
        })
        .collect()
}

/// Points sampled uniformly in an axis-aligned box with the given extents.
pub fn random_cloud(n: usize, extent: Vector3<f64>, rng: &mut SeededRng) -> PointCloud {
    let points = (0..n)
        .map(|_| Vector3::new(rng.uniform(0.0, extent.x), rng.uniform(0.0, extent.y), rng.uniform(0.0, extent.z)))
        .collect();
    PointCloud {
        points,
        colors: None,
        normals: None,
    }
}

/// Noisy slanted plane for the refinement loop.
#[derive(Clone, Debug)]
pub struct NoisyPlaneScene {
    pub intr: CameraIntrinsics,
    pub plane: Plane,
    pub clean: DepthMap,
    pub state: RefineState<Option<crate::geometry::NormalMap>>,
}

/// Slanted plane at the given resolution with multiplicative Gaussian depth
/// noise (`depth_sigma`, relative) and additive Gaussian normal noise
/// (`normal_sigma`) on the true plane normal. Depth is in metric units, so
/// the state is canonical with `ω_d = 1`.
pub fn noisy_plane_scene(w: usize, h: usize, depth_sigma: f64, normal_sigma: f64, seed: u64) -> NoisyPlaneScene {
    let f = 0.9 * w.max(h) as f64;
    let intr = CameraIntrinsics::new(f, f, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h).expect("valid");
    let normal = Vector3::new(0.3, -0.2, -1.0).normalize();
    let plane = Plane { normal, offset: -3.0 };
    let clean = render_plane(&intr, &plane);
    let mut rng = SeededRng::new(seed);
    let noisy = DepthMap {
        values: clean.values.map(|d| d * (1.0 + depth_sigma * rng.normal())),
        valid: clean.valid.clone(),
    };
    let normal_u = Grid::from_fn(w, h, |_, _| {
        normal + Vector3::new(rng.normal(), rng.normal(), rng.normal()) * normal_sigma
    });
    let state = RefineState::new(noisy, normal_u, None).expect("same shape");
    NoisyPlaneScene { intr, plane, clean, state }
}

/// Back-projects the pixel `(x, y)` of a frame into world coordinates.
pub fn frame_point(frame: &Frame, x: usize, y: usize) -> Option<Vector3<f64>> {
    let d = frame.depth.at(x, y)?;
    Some(frame.pose.apply(&backproject_unchecked(x as f64, y as f64, d, &frame.intr)))
}
