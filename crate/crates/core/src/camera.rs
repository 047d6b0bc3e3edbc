//! Pinhole camera algebra and the canonical camera space.
//!
//! Metric depth from a single image is ambiguous in the focal length: an
//! object at depth `d` seen with focal `f` images identically to the same
//! object at `k·d` seen with `k·f`. Transforming every sample into a shared
//! canonical camera with focal `f_c` removes that ambiguity. Two transforms
//! are provided:
//!
//! * **label mode** rescales depth by `ω_d = f_c / f` and leaves the image
//!   alone; [`decanonicalize_label`] divides it back out.
//! * **image mode** resizes image and depth by `ω_r = f_c / f` without
//!   touching depth values; [`decanonicalize_image`] resizes back.
//!
//! Sensor pixel size only enters through the pixel focal `f = f̂ / δ`, which
//! is why it has no effect on metric reconstruction.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{resize_bilinear, resize_depth, DepthMap, GridError, ImageBuffer};

#[derive(Debug, Error, PartialEq)]
pub enum CameraError {
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("canonical focal must be positive and finite, got {0}")]
    InvalidFocal(f64),
    #[error("resize to {width}x{height} is degenerate")]
    ResizeDegenerate { width: i64, height: i64 },
    #[error("size mismatch: expected {expected:?}, got {actual:?}")]
    SizeMismatch { expected: (usize, usize), actual: (usize, usize) },
    #[error("physical camera quantities must be positive")]
    InvalidPhysical,
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, CameraError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.fx > 0.0 && self.fx.is_finite() && self.fy > 0.0 && self.fy.is_finite()) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(CameraError::InvalidIntrinsics("principal point must be finite".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(CameraError::InvalidIntrinsics("image size must be at least 1x1".into()));
        }
        Ok(())
    }

    /// Single scalar focal used for canonical ratios: the mean of fx and fy.
    pub fn mean_focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Unit-depth ray `((u-cx)/fx, (v-cy)/fy, 1)` through pixel `(u, v)`.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Intrinsics for the same camera sampled at `width x height`, scaling
    /// focal and principal point by the per-axis size ratio.
    pub fn rescaled_to(&self, width: usize, height: usize) -> CameraIntrinsics {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        CameraIntrinsics {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }
}

/// Physical focal length and pixel pitch, both in micrometers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicalCamera {
    pub focal_um: f64,
    pub pixel_size_um: f64,
}

impl PhysicalCamera {
    pub fn new(focal_um: f64, pixel_size_um: f64) -> Result<Self, CameraError> {
        if focal_um > 0.0 && pixel_size_um > 0.0 && focal_um.is_finite() && pixel_size_um.is_finite() {
            Ok(Self { focal_um, pixel_size_um })
        } else {
            Err(CameraError::InvalidPhysical)
        }
    }

    /// Focal length in pixels.
    pub fn pixel_focal(&self) -> f64 {
        pixel_focal(self)
    }
}

pub fn pixel_focal(cam: &PhysicalCamera) -> f64 {
    cam.focal_um / cam.pixel_size_um
}

/// Size on the image plane of an object of size `object_size` at `depth`.
/// Focal and image size share units (pixels or micrometers).
pub fn imaging_size(object_size: f64, depth: f64, focal: f64) -> f64 {
    focal * object_size / depth
}

pub fn project(point: &Vector3<f64>, intr: &CameraIntrinsics) -> Result<(f64, f64), CameraError> {
    if !(point.z > 0.0) {
        return Err(CameraError::NonPositiveDepth(point.z));
    }
    Ok((intr.fx * point.x / point.z + intr.cx, intr.fy * point.y / point.z + intr.cy))
}

pub fn backproject(u: f64, v: f64, depth: f64, intr: &CameraIntrinsics) -> Result<Vector3<f64>, CameraError> {
    if !(depth > 0.0) {
        return Err(CameraError::NonPositiveDepth(depth));
    }
    Ok(backproject_unchecked(u, v, depth, intr))
}

#[inline]
pub(crate) fn backproject_unchecked(u: f64, v: f64, depth: f64, intr: &CameraIntrinsics) -> Vector3<f64> {
    Vector3::new((u - intr.cx) * depth / intr.fx, (v - intr.cy) * depth / intr.fy, depth)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CanonicalMode {
    Label,
    Image,
}

/// Everything needed to undo a canonical transform.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalBundle {
    pub mode: CanonicalMode,
    pub depth_c: DepthMap,
    pub image_c: ImageBuffer,
    pub intr_c: CameraIntrinsics,
    pub omega_d: f64,
    pub omega_r: f64,
    pub original_intr: CameraIntrinsics,
    pub original_size: (usize, usize),
}

impl CanonicalBundle {
    /// Metadata without the pixel payloads, for sidecar files.
    pub fn meta(&self) -> CanonicalMeta {
        CanonicalMeta {
            mode: self.mode,
            omega_d: self.omega_d,
            omega_r: self.omega_r,
            canonical_intrinsics: self.intr_c,
            original_intrinsics: self.original_intr,
            original_size: self.original_size,
        }
    }

    pub fn canonical_size(&self) -> (usize, usize) {
        self.intr_c.size()
    }
}

/// Serializable transform record written next to canonicalized outputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanonicalMeta {
    pub mode: CanonicalMode,
    pub omega_d: f64,
    pub omega_r: f64,
    pub canonical_intrinsics: CameraIntrinsics,
    pub original_intrinsics: CameraIntrinsics,
    pub original_size: (usize, usize),
}

impl CanonicalMeta {
    /// De-canonicalizes a prediction made in this transform's canonical space.
    pub fn restore(&self, pred_c: &DepthMap) -> Result<DepthMap, CameraError> {
        match self.mode {
            CanonicalMode::Label => {
                check_size(self.canonical_intrinsics.size(), pred_c.shape())?;
                Ok(decanonicalize_label(pred_c, self.omega_d))
            }
            CanonicalMode::Image => {
                check_size(self.canonical_intrinsics.size(), pred_c.shape())?;
                let (w, h) = self.original_size;
                if (w, h) == pred_c.shape() {
                    return Ok(pred_c.clone());
                }
                Ok(resize_depth(pred_c, w, h))
            }
        }
    }
}

fn check_size(expected: (usize, usize), actual: (usize, usize)) -> Result<(), CameraError> {
    if expected == actual {
        Ok(())
    } else {
        Err(CameraError::SizeMismatch { expected, actual })
    }
}

fn check_inputs(depth: &DepthMap, image: &ImageBuffer, intr: &CameraIntrinsics, f_c: f64) -> Result<(), CameraError> {
    intr.validate()?;
    if !(f_c > 0.0 && f_c.is_finite()) {
        return Err(CameraError::InvalidFocal(f_c));
    }
    check_size(intr.size(), depth.shape())?;
    check_size(intr.size(), image.shape())?;
    Ok(())
}

/// Label-mode transform: `D_c = ω_d · D` with `ω_d = f_c / f`.
pub fn canonicalize_label(
    depth: &DepthMap,
    image: &ImageBuffer,
    intr: &CameraIntrinsics,
    f_c: f64,
) -> Result<CanonicalBundle, CameraError> {
    check_inputs(depth, image, intr, f_c)?;
    let omega_d = f_c / intr.mean_focal();
    Ok(CanonicalBundle {
        mode: CanonicalMode::Label,
        depth_c: depth.scaled(omega_d),
        image_c: image.clone(),
        intr_c: CameraIntrinsics { fx: f_c, fy: f_c, ..*intr },
        omega_d,
        omega_r: 1.0,
        original_intr: *intr,
        original_size: intr.size(),
    })
}

/// Inverse of the label transform. Each valid value is recovered as the
/// float `x` with `x·ω_d == d_c` (see [`unscale_exact`]), so depth that came
/// through [`canonicalize_label`] is restored bit for bit.
pub fn decanonicalize_label(depth_c: &DepthMap, omega_d: f64) -> DepthMap {
    let values = depth_c.values.as_slice().iter().map(|&d| unscale_exact(d, omega_d)).collect();
    DepthMap {
        values: crate::grid::Grid::from_vec(depth_c.width(), depth_c.height(), values).expect("same shape"),
        valid: depth_c.valid.clone(),
    }
}

/// Returns the preimage of `scaled` under `x -> x * omega`.
///
/// `scaled / omega` can land one ulp away from the original value. The
/// neighbours of the quotient are searched for floats whose product with
/// `omega` reproduces `scaled`. Rounding can merge two adjacent inputs into
/// one product; among such preimages the one with the most trailing zero
/// mantissa bits wins, which is the original for any value carrying fewer
/// than 52 significant bits (f32 sensor data, 1/256 m PNG depth). Full
/// 53-bit values with non-power-of-two `omega` can collide and are then not
/// recoverable from the product alone.
pub fn unscale_exact(scaled: f64, omega: f64) -> f64 {
    let q = scaled / omega;
    if !q.is_finite() || q == 0.0 {
        return q;
    }
    let mut best: Option<f64> = None;
    let mut lo = q;
    let mut hi = q;
    let score = |c: f64| (c.to_bits() & 0x000f_ffff_ffff_ffff | 1 << 52).trailing_zeros();
    let mut consider = |c: f64| {
        if c * omega == scaled {
            best = match best {
                None => Some(c),
                Some(b) if score(c) > score(b) || (score(c) == score(b) && (c - q).abs() < (b - q).abs()) => Some(c),
                keep => keep,
            };
        }
    };
    consider(q);
    for _ in 0..4 {
        lo = lo.next_down();
        hi = hi.next_up();
        consider(lo);
        consider(hi);
    }
    best.unwrap_or(q)
}

/// Image-mode transform: resize image and depth by `ω_r = f_c / f`, depth
/// values untouched; the validity mask is resized by nearest neighbor.
pub fn canonicalize_image(
    depth: &DepthMap,
    image: &ImageBuffer,
    intr: &CameraIntrinsics,
    f_c: f64,
) -> Result<CanonicalBundle, CameraError> {
    check_inputs(depth, image, intr, f_c)?;
    let omega_r = f_c / intr.mean_focal();
    let w = (omega_r * intr.width as f64).round();
    let h = (omega_r * intr.height as f64).round();
    if !(w >= 1.0 && h >= 1.0) || !w.is_finite() || !h.is_finite() {
        return Err(CameraError::ResizeDegenerate {
            width: w as i64,
            height: h as i64,
        });
    }
    let (w, h) = (w as usize, h as usize);
    let (depth_c, image_c) = if (w, h) == intr.size() {
        (depth.clone(), image.clone())
    } else {
        (
            resize_depth(depth, w, h),
            ImageBuffer {
                pixels: resize_bilinear(&image.pixels, w, h),
            },
        )
    };
    Ok(CanonicalBundle {
        mode: CanonicalMode::Image,
        depth_c,
        image_c,
        intr_c: CameraIntrinsics {
            fx: f_c,
            fy: f_c,
            cx: omega_r * intr.cx,
            cy: omega_r * intr.cy,
            width: w,
            height: h,
        },
        omega_d: 1.0,
        omega_r,
        original_intr: *intr,
        original_size: intr.size(),
    })
}

/// Resizes a canonical-space prediction back to the original image size.
pub fn decanonicalize_image(pred_c: &DepthMap, bundle: &CanonicalBundle) -> Result<DepthMap, CameraError> {
    check_size(bundle.canonical_size(), pred_c.shape())?;
    let (w, h) = bundle.original_size;
    if (w, h) == pred_c.shape() {
        return Ok(pred_c.clone());
    }
    Ok(resize_depth(pred_c, w, h))
}

/// Dispatches on the bundle's mode.
pub fn decanonicalize(pred_c: &DepthMap, bundle: &CanonicalBundle) -> Result<DepthMap, CameraError> {
    match bundle.mode {
        CanonicalMode::Label => {
            check_size(bundle.canonical_size(), pred_c.shape())?;
            Ok(decanonicalize_label(pred_c, bundle.omega_d))
        }
        CanonicalMode::Image => decanonicalize_image(pred_c, bundle),
    }
}
