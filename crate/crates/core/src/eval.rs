//! Depth, normal and reconstruction metrics.
//!
//! Threshold accuracies use strict `<` throughout. Dataset reductions are
//! done sequentially in input order so results do not depend on the
//! execution policy.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::geometry::{fuse_frames_with, Frame, GeometryError, NormalMap, PointCloud, Pose};
use crate::grid::{DepthMap, Grid, GridError, Mask};
use crate::knn::nearest_neighbors;

/// Default F-score distance threshold in meters.
pub const DEFAULT_TAU: f64 = 0.05;
/// Floor applied to aligned depth before computing metrics.
pub const ALIGN_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no pixels selected by the mask")]
    EmptyMask,
    #[error("non-positive depth {value} at ({x}, {y})")]
    NonPositiveDepth { x: usize, y: usize, value: f64 },
    #[error("no valid errors in the dataset")]
    EmptyDataset,
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("tau must be positive and finite, got {0}")]
    InvalidTau(f64),
    #[error("degenerate geometry: points are collinear or coincident")]
    DegenerateGeometry,
    #[error("index {index} out of range for cloud of {len} points")]
    IndexOutOfRange { index: usize, len: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub absrel: f64,
    pub log10: f64,
    pub rms: f64,
    pub rms_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalMetrics {
    pub mean_deg: f64,
    pub median_deg: f64,
    pub rms_deg: f64,
    pub acc_11_25: f64,
    pub acc_22_5: f64,
    pub acc_30: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// All valid errors across the dataset are pooled once.
    #[default]
    PixelPooled,
    /// Statistics per image, then averaged over images.
    SampleMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub pooling: Pooling,
    pub exclude_invalid: bool,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            pooling: Pooling::PixelPooled,
            exclude_invalid: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconMetrics {
    pub chamfer_l1: f64,
    pub fscore: f64,
    pub precision: f64,
    pub recall: f64,
}

fn depth_support(pred: &DepthMap, gt: &DepthMap, mask: &Mask) -> Result<Vec<usize>, EvalError> {
    pred.values.same_shape(&gt.values)?;
    pred.values.same_shape(mask)?;
    let w = mask.width();
    let idx: Vec<usize> = (0..mask.len())
        .filter(|&i| mask.as_slice()[i] && pred.valid.as_slice()[i] && gt.valid.as_slice()[i])
        .collect();
    if idx.is_empty() {
        return Err(EvalError::EmptyMask);
    }
    for &i in &idx {
        for v in [pred.values.as_slice()[i], gt.values.as_slice()[i]] {
            if !(v > 0.0) {
                return Err(EvalError::NonPositiveDepth {
                    x: i % w,
                    y: i / w,
                    value: v,
                });
            }
        }
    }
    Ok(idx)
}

/// Standard depth metrics over pixels selected by `mask` where both maps
/// are valid.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, mask: &Mask) -> Result<DepthMetrics, EvalError> {
    let idx = depth_support(pred, gt, mask)?;
    let pairs: Vec<(f64, f64)> = idx.iter().map(|&i| (pred.values.as_slice()[i], gt.values.as_slice()[i])).collect();
    Ok(metrics_from_pairs(&pairs))
}

fn metrics_from_pairs(pairs: &[(f64, f64)]) -> DepthMetrics {
    let n = pairs.len() as f64;
    let mut acc = [0.0f64; 4];
    let mut hits = [0usize; 3];
    for &(d, g) in pairs {
        acc[0] += (d - g).abs() / g;
        acc[1] += (d.log10() - g.log10()).abs();
        acc[2] += (d - g) * (d - g);
        let dl = d.ln() - g.ln();
        acc[3] += dl * dl;
        let ratio = (d / g).max(g / d);
        for (k, thr) in [1.25f64, 1.25f64.powi(2), 1.25f64.powi(3)].iter().enumerate() {
            if ratio < *thr {
                hits[k] += 1;
            }
        }
    }
    DepthMetrics {
        absrel: acc[0] / n,
        log10: acc[1] / n,
        rms: (acc[2] / n).sqrt(),
        rms_log: (acc[3] / n).sqrt(),
        delta1: hits[0] as f64 / n,
        delta2: hits[1] as f64 / n,
        delta3: hits[2] as f64 / n,
    }
}

/// Depth metrics over a dataset of `(pred, gt, mask)` triples.
///
/// Pixel pooling evaluates all selected pixels at once; sample mean averages
/// per-image metrics. Invalid depth pixels are always excluded since the
/// log metrics are undefined there.
pub fn depth_metrics_dataset(items: &[(DepthMap, DepthMap, Mask)], pooling: Pooling) -> Result<DepthMetrics, EvalError> {
    if items.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    match pooling {
        Pooling::PixelPooled => {
            let mut pairs = Vec::new();
            for (p, g, m) in items {
                for i in depth_support(p, g, m)? {
                    pairs.push((p.values.as_slice()[i], g.values.as_slice()[i]));
                }
            }
            Ok(metrics_from_pairs(&pairs))
        }
        Pooling::SampleMean => {
            let per: Vec<DepthMetrics> = items.iter().map(|(p, g, m)| depth_metrics(p, g, m)).collect::<Result<_, _>>()?;
            let n = per.len() as f64;
            let avg = |f: fn(&DepthMetrics) -> f64| per.iter().map(f).sum::<f64>() / n;
            Ok(DepthMetrics {
                absrel: avg(|m| m.absrel),
                log10: avg(|m| m.log10),
                rms: avg(|m| m.rms),
                rms_log: avg(|m| m.rms_log),
                delta1: avg(|m| m.delta1),
                delta2: avg(|m| m.delta2),
                delta3: avg(|m| m.delta3),
            })
        }
    }
}

/// Least-squares `(s, t)` minimizing `Σ (s·pred + t − gt)²` over the mask,
/// and the aligned map `max(s·pred + t, 1e-6)`.
///
/// When `pred` has (near) zero variance on the mask, falls back to `s = 1`
/// and `t = mean(gt) − mean(pred)`. Pixels outside the support keep their
/// validity and are aligned with the same `(s, t)`.
pub fn scale_shift_align(pred: &DepthMap, gt: &DepthMap, mask: &Mask) -> Result<(f64, f64, DepthMap), EvalError> {
    pred.values.same_shape(&gt.values)?;
    pred.values.same_shape(mask)?;
    let idx: Vec<usize> = (0..mask.len())
        .filter(|&i| mask.as_slice()[i] && pred.valid.as_slice()[i] && gt.valid.as_slice()[i])
        .collect();
    if idx.is_empty() {
        return Err(EvalError::EmptyMask);
    }
    let n = idx.len() as f64;
    let (mut mp, mut mg) = (0.0, 0.0);
    for &i in &idx {
        mp += pred.values.as_slice()[i];
        mg += gt.values.as_slice()[i];
    }
    mp /= n;
    mg /= n;
    let (mut spp, mut spg) = (0.0, 0.0);
    for &i in &idx {
        let dp = pred.values.as_slice()[i] - mp;
        spp += dp * dp;
        spg += dp * (gt.values.as_slice()[i] - mg);
    }
    let (s, t) = if idx.len() < 2 || spp / n < 1e-12 {
        (1.0, mg - mp)
    } else {
        let s = spg / spp;
        (s, mg - s * mp)
    };
    let aligned = DepthMap {
        values: pred.values.map(|&d| (s * d + t).max(ALIGN_FLOOR)),
        valid: pred.valid.clone(),
    };
    Ok((s, t, aligned))
}

/// Per-pixel angular error in degrees with the pixels that count as valid.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMap {
    pub degrees: Grid<f64>,
    pub valid: Mask,
}

impl ErrorMap {
    /// Builds a map from raw degree values; every entry is valid.
    pub fn from_values(width: usize, height: usize, degrees: Vec<f64>) -> Result<Self, GridError> {
        let degrees = Grid::from_vec(width, height, degrees)?;
        let valid = Grid::filled(width, height, true);
        Ok(Self { degrees, valid })
    }

    fn selected(&self, exclude_invalid: bool) -> Vec<f64> {
        self.degrees
            .iter()
            .zip(self.valid.iter())
            .filter(|(d, v)| d.is_finite() && (**v || !exclude_invalid))
            .map(|(d, _)| *d)
            .collect()
    }
}

/// `acos(clamp(dot, −1, 1))` in degrees at every pixel. A pixel is valid
/// only if both normals are valid and the mask is set; the error is still
/// computed from the stored vectors elsewhere so that a protocol that does
/// not exclude invalid pixels can use it.
pub fn normal_error_map(pred: &NormalMap, gt: &NormalMap, mask: &Mask) -> Result<ErrorMap, EvalError> {
    pred.vectors.same_shape(&gt.vectors)?;
    pred.vectors.same_shape(mask)?;
    let (w, h) = mask.shape();
    let degrees = Grid::from_vec(
        w,
        h,
        pred.vectors
            .iter()
            .zip(gt.vectors.iter())
            .map(|(a, b)| a.dot(b).clamp(-1.0, 1.0).acos().to_degrees())
            .collect(),
    )?;
    let valid = pred.valid.and(&gt.valid)?.and(mask)?;
    Ok(ErrorMap { degrees, valid })
}

/// Median with the even-count convention of averaging the two middle values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

fn stats(errors: &[f64]) -> NormalMetrics {
    let n = errors.len() as f64;
    let frac = |t: f64| errors.iter().filter(|&&e| e < t).count() as f64 / n;
    NormalMetrics {
        mean_deg: errors.iter().sum::<f64>() / n,
        median_deg: median(errors).expect("nonempty"),
        rms_deg: (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        acc_11_25: frac(11.25),
        acc_22_5: frac(22.5),
        acc_30: frac(30.0),
    }
}

/// Normal metrics over a dataset of error maps.
///
/// Under sample-mean pooling, images left empty after masking are skipped.
pub fn normal_metrics(maps: &[ErrorMap], protocol: Protocol) -> Result<NormalMetrics, EvalError> {
    let per: Vec<Vec<f64>> = maps.iter().map(|m| m.selected(protocol.exclude_invalid)).collect();
    match protocol.pooling {
        Pooling::PixelPooled => {
            let all: Vec<f64> = per.into_iter().flatten().collect();
            if all.is_empty() {
                return Err(EvalError::EmptyDataset);
            }
            Ok(stats(&all))
        }
        Pooling::SampleMean => {
            let each: Vec<NormalMetrics> = per.iter().filter(|v| !v.is_empty()).map(|v| stats(v)).collect();
            if each.is_empty() {
                return Err(EvalError::EmptyDataset);
            }
            let n = each.len() as f64;
            let avg = |f: fn(&NormalMetrics) -> f64| each.iter().map(f).sum::<f64>() / n;
            Ok(NormalMetrics {
                mean_deg: avg(|m| m.mean_deg),
                median_deg: avg(|m| m.median_deg),
                rms_deg: avg(|m| m.rms_deg),
                acc_11_25: avg(|m| m.acc_11_25),
                acc_22_5: avg(|m| m.acc_22_5),
                acc_30: avg(|m| m.acc_30),
            })
        }
    }
}

pub fn chamfer_fscore(pred: &PointCloud, gt: &PointCloud, tau: f64) -> Result<ReconMetrics, EvalError> {
    chamfer_fscore_with(pred, gt, tau, Exec::default())
}

/// Chamfer-l1 as the mean of the two directed mean nearest-neighbor
/// distances, and F-score at `tau` (a point counts when its distance is
/// strictly below `tau`).
pub fn chamfer_fscore_with(pred: &PointCloud, gt: &PointCloud, tau: f64, exec: Exec) -> Result<ReconMetrics, EvalError> {
    if pred.is_empty() || gt.is_empty() {
        return Err(EvalError::EmptyCloud);
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(EvalError::InvalidTau(tau));
    }
    let directed = |a: &[Vector3<f64>], b: &[Vector3<f64>]| {
        let nn = nearest_neighbors(a, b, exec);
        let mut sum = 0.0;
        let mut hit = 0usize;
        for &(_, d) in &nn {
            sum += d;
            if d < tau {
                hit += 1;
            }
        }
        (sum / a.len() as f64, hit as f64 / a.len() as f64)
    };
    let (d_pg, precision) = directed(&pred.points, &gt.points);
    let (d_gp, recall) = directed(&gt.points, &pred.points);
    let fscore = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(ReconMetrics {
        chamfer_l1: 0.5 * (d_pg + d_gp),
        fscore,
        precision,
        recall,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IcpConfig {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-12,
        }
    }
}

fn centroid(pts: &[Vector3<f64>]) -> Vector3<f64> {
    pts.iter().sum::<Vector3<f64>>() / pts.len() as f64
}

fn check_spread(pts: &[Vector3<f64>]) -> Result<(), EvalError> {
    if pts.len() < 3 {
        return Err(EvalError::DegenerateGeometry);
    }
    let c = centroid(pts);
    let cov: Matrix3<f64> = pts.iter().map(|p| (p - c) * (p - c).transpose()).sum();
    let mut ev: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    if !(ev[1] > 1e-12 * ev[2].max(f64::MIN_POSITIVE)) {
        return Err(EvalError::DegenerateGeometry);
    }
    Ok(())
}

/// Rigid transform minimizing `Σ ‖R·src_i + t − dst_i‖²` (Kabsch).
pub fn rigid_fit(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Pose {
    let cs = centroid(src);
    let cd = centroid(dst);
    let h: Matrix3<f64> = src.iter().zip(dst).map(|(s, d)| (s - cs) * (d - cd).transpose()).sum();
    let svd = h.svd(true, true);
    let u = svd.u.expect("u");
    let vt = svd.v_t.expect("v_t");
    let v = vt.transpose();
    let det = (v * u.transpose()).determinant();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum()));
    let r = v * fix * u.transpose();
    Pose {
        rotation: r,
        translation: cd - r * cs,
    }
}

pub fn icp_align(src: &PointCloud, dst: &PointCloud, cfg: IcpConfig) -> Result<(Pose, f64), EvalError> {
    icp_align_with(src, dst, cfg, Exec::default())
}

/// Point-to-point ICP returning the pose mapping `src` onto `dst` and the
/// final mean nearest-neighbor residual.
///
/// Starts from the centroid offset, then alternates nearest-neighbor
/// matching and a closed-form rigid fit until the mean residual changes by
/// less than `tol` or `max_iters` is reached.
pub fn icp_align_with(src: &PointCloud, dst: &PointCloud, cfg: IcpConfig, exec: Exec) -> Result<(Pose, f64), EvalError> {
    check_spread(&src.points)?;
    check_spread(&dst.points)?;
    let mut pose = Pose::from_translation(centroid(&dst.points) - centroid(&src.points));
    let residual_of = |pose: &Pose| {
        let moved: Vec<Vector3<f64>> = src.points.iter().map(|p| pose.apply(p)).collect();
        let nn = nearest_neighbors(&moved, &dst.points, exec);
        let mean = nn.iter().map(|&(_, d)| d).sum::<f64>() / nn.len() as f64;
        (nn, mean)
    };
    let (mut nn, mut residual) = residual_of(&pose);
    for _ in 0..cfg.max_iters {
        let matched: Vec<Vector3<f64>> = nn.iter().map(|&(j, _)| dst.points[j]).collect();
        let next = rigid_fit(&src.points, &matched);
        let (next_nn, next_res) = residual_of(&next);
        let change = (residual - next_res).abs();
        pose = next;
        nn = next_nn;
        residual = next_res;
        if change < cfg.tol {
            break;
        }
    }
    Ok((pose, residual))
}

/// Fuses `frames`, optionally registers the fused cloud to `gt` with ICP,
/// then scores it.
pub fn evaluate_reconstruction(frames: &[Frame], gt: &PointCloud, tau: f64, use_icp: bool, exec: Exec) -> Result<ReconMetrics, EvalError> {
    if frames.is_empty() {
        return Err(EvalError::EmptyCloud);
    }
    let mut pred = fuse_frames_with(frames, 1, exec)?;
    if pred.is_empty() {
        return Err(EvalError::EmptyCloud);
    }
    if use_icp {
        let (pose, _) = icp_align_with(&pred, gt, IcpConfig::default(), exec)?;
        pred = crate::geometry::transform_cloud(&pred, &pose);
    }
    chamfer_fscore_with(&pred, gt, tau, exec)
}

pub fn measure_distance(cloud: &PointCloud, a: usize, b: usize) -> Result<f64, EvalError> {
    let len = cloud.len();
    for index in [a, b] {
        if index >= len {
            return Err(EvalError::IndexOutOfRange { index, len });
        }
    }
    Ok((cloud.points[a] - cloud.points[b]).norm())
}
