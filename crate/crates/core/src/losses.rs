//! Depth and normal supervision terms as pure scoring functions.
//!
//! Every loss reads only pixels that are set in the caller's mask *and*
//! valid in each input map. Stochastic losses (random-proposal
//! normalization, virtual normal) take an explicit seed and own their random
//! state, so a call is reproducible bit for bit.
//!
//! Analytic gradients with respect to the predicted depth (or predicted
//! normal components) are provided for [`silog`], [`rpnl`] and
//! [`normal_angular_loss`]; [`grad_check`] compares any
//! [`DifferentiableLoss`] against central differences.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{backproject_unchecked, CameraIntrinsics};
use crate::exec::Exec;
use crate::geometry::{normals_from_depth_with, GeometryError, NormalMap, DEFAULT_NORMAL_WINDOW};
use crate::grid::{DepthMap, Grid, GridError, Mask};
use crate::rng::SeededRng;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("no pixels selected by the mask")]
    EmptyMask,
    #[error("non-positive depth {value} at ({x}, {y})")]
    NonPositiveDepth { x: usize, y: usize, value: f64 },
    #[error("not enough valid points for triplet sampling")]
    InsufficientPoints,
    #[error("normal and pseudo-normal maps share no valid pixel")]
    EmptyOverlap,
    #[error("expected {expected} step losses, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Balancing weights of the per-step loss `w_d·L_d + w_n·L_n + w_dn·L_dn`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_d: f64,
    pub w_n: f64,
    pub w_dn: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_d: 0.5,
            w_n: 1.0,
            w_dn: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpnlConfig {
    pub num_patches: usize,
    pub min_frac: f64,
    pub max_frac: f64,
    pub seed: u64,
}

impl Default for RpnlConfig {
    fn default() -> Self {
        Self {
            num_patches: 32,
            min_frac: 0.125,
            max_frac: 0.5,
            seed: 0,
        }
    }
}

impl RpnlConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if self.num_patches == 0 {
            return Err(LossError::InvalidConfig("num_patches must be >= 1".into()));
        }
        if !(self.min_frac > 0.0 && self.min_frac <= self.max_frac && self.max_frac <= 1.0) {
            return Err(LossError::InvalidConfig(format!(
                "patch fractions must satisfy 0 < min <= max <= 1, got [{}, {}]",
                self.min_frac, self.max_frac
            )));
        }
        Ok(())
    }
}

/// Exponential step weighting: the last of `steps + 1` losses gets weight 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub gamma: f64,
    pub steps: usize,
}

impl ScheduleConfig {
    pub fn new(steps: usize) -> Self {
        Self { gamma: 0.9, steps }
    }
}

/// Pixels selected by `mask` and valid in every map, with positive depth
/// required at each of them.
fn depth_support(pred: &DepthMap, gt: &DepthMap, mask: &Mask) -> Result<Vec<usize>, LossError> {
    pred.values.same_shape(&gt.values)?;
    pred.values.same_shape(mask)?;
    let w = pred.width();
    let mut idx = Vec::new();
    for (i, ((&m, &pv), &gv)) in mask.iter().zip(pred.valid.iter()).zip(gt.valid.iter()).enumerate() {
        if m && pv && gv {
            for v in [pred.values.as_slice()[i], gt.values.as_slice()[i]] {
                if !(v > 0.0) {
                    return Err(LossError::NonPositiveDepth {
                        x: i % w,
                        y: i / w,
                        value: v,
                    });
                }
            }
            idx.push(i);
        }
    }
    if idx.is_empty() {
        return Err(LossError::EmptyMask);
    }
    Ok(idx)
}

/// Scale-invariant log loss `sqrt(mean(g²) − λ·mean(g)²)`, `g = ln pred − ln gt`.
pub fn silog(pred: &DepthMap, gt: &DepthMap, mask: &Mask, lambda: f64) -> Result<f64, LossError> {
    let idx = depth_support(pred, gt, mask)?;
    let (p, g) = (pred.values.as_slice(), gt.values.as_slice());
    let n = idx.len() as f64;
    let (mut s1, mut s2) = (0.0, 0.0);
    for &i in &idx {
        let d = p[i].ln() - g[i].ln();
        s1 += d;
        s2 += d * d;
    }
    let (m1, m2) = (s1 / n, s2 / n);
    Ok((m2 - lambda * m1 * m1).max(0.0).sqrt())
}

/// Gradient of [`silog`] with respect to the predicted depth; zero outside
/// the support and everywhere when the loss is exactly zero.
pub fn silog_grad(pred: &DepthMap, gt: &DepthMap, mask: &Mask, lambda: f64) -> Result<Grid<f64>, LossError> {
    let idx = depth_support(pred, gt, mask)?;
    let (p, g) = (pred.values.as_slice(), gt.values.as_slice());
    let n = idx.len() as f64;
    let logs: Vec<f64> = idx.iter().map(|&i| p[i].ln() - g[i].ln()).collect();
    let m1 = logs.iter().sum::<f64>() / n;
    let m2 = logs.iter().map(|d| d * d).sum::<f64>() / n;
    let loss = (m2 - lambda * m1 * m1).max(0.0).sqrt();
    let mut grad = Grid::filled(pred.width(), pred.height(), 0.0);
    if loss == 0.0 {
        return Ok(grad);
    }
    for (&i, &d) in idx.iter().zip(&logs) {
        grad.as_mut_slice()[i] = (d - lambda * m1) / (n * loss) / p[i];
    }
    Ok(grad)
}

/// Axis-aligned crop in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRect {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

/// Minimum valid pixels for a proposal to be used.
pub const RPNL_MIN_PATCH_PIXELS: usize = 8;
/// Redraws allowed for a proposal that covers too few valid pixels.
pub const RPNL_MAX_RETRIES: usize = 8;
const RPNL_MIN_DEVIATION: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RpnlOutput {
    pub value: f64,
    /// Proposals that passed the valid-pixel rule, in draw order.
    pub patches: Vec<PatchRect>,
    /// Proposals that contributed to `value`.
    pub used: usize,
    /// Proposals skipped because a mean absolute deviation was below 1e-12.
    pub degenerate: usize,
    /// Proposal slots abandoned after exhausting retries.
    pub sparse: usize,
}

/// Draws the proposal crops for a `width x height` support mask.
///
/// For each of `num_patches` slots: width and height fractions are drawn
/// independently from `U[min_frac, max_frac)`, side = `max(1, round(frac·L))`,
/// then the top-left corner uniformly over all placements. A crop covering
/// fewer than [`RPNL_MIN_PATCH_PIXELS`] supported pixels is redrawn up to
/// [`RPNL_MAX_RETRIES`] times before the slot is abandoned. Returns the
/// accepted crops and the number of abandoned slots.
pub fn sample_rpnl_patches(support: &Mask, cfg: &RpnlConfig) -> Result<(Vec<PatchRect>, usize), LossError> {
    cfg.validate()?;
    let (w, h) = support.shape();
    let mut rng = SeededRng::new(cfg.seed);
    let mut patches = Vec::with_capacity(cfg.num_patches);
    let mut sparse = 0;
    for _ in 0..cfg.num_patches {
        let mut accepted = None;
        for _ in 0..=RPNL_MAX_RETRIES {
            let fw = rng.uniform(cfg.min_frac, cfg.max_frac);
            let fh = rng.uniform(cfg.min_frac, cfg.max_frac);
            let pw = ((fw * w as f64).round() as usize).clamp(1, w);
            let ph = ((fh * h as f64).round() as usize).clamp(1, h);
            let x0 = rng.below(w - pw + 1);
            let y0 = rng.below(h - ph + 1);
            let rect = PatchRect {
                x0,
                y0,
                width: pw,
                height: ph,
            };
            if count_in(support, &rect) >= RPNL_MIN_PATCH_PIXELS {
                accepted = Some(rect);
                break;
            }
        }
        match accepted {
            Some(r) => patches.push(r),
            None => sparse += 1,
        }
    }
    Ok((patches, sparse))
}

fn count_in(support: &Mask, r: &PatchRect) -> usize {
    let mut n = 0;
    for y in r.y0..r.y0 + r.height {
        for x in r.x0..r.x0 + r.width {
            n += *support.get(x, y) as usize;
        }
    }
    n
}

fn support_mask(pred: &DepthMap, gt: &DepthMap, mask: &Mask) -> Result<Mask, LossError> {
    pred.values.same_shape(&gt.values)?;
    pred.values.same_shape(mask)?;
    let m = mask.and(&pred.valid)?.and(&gt.valid)?;
    if m.count() == 0 {
        return Err(LossError::EmptyMask);
    }
    Ok(m)
}

/// Flat indices of supported pixels inside `r`, row-major.
fn patch_indices(support: &Mask, r: &PatchRect) -> Vec<usize> {
    let mut out = Vec::new();
    for y in r.y0..r.y0 + r.height {
        for x in r.x0..r.x0 + r.width {
            if *support.get(x, y) {
                out.push(support.index(x, y));
            }
        }
    }
    out
}

/// Median plus `dm/dx_k` weights: 1 for the middle element of an odd-sized
/// set, 1/2 for each of the two middle elements of an even-sized set.
fn median_with_weights(values: &[f64]) -> (f64, Vec<(usize, f64)>) {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    if n % 2 == 1 {
        let k = order[n / 2];
        (values[k], vec![(k, 1.0)])
    } else {
        let (a, b) = (order[n / 2 - 1], order[n / 2]);
        (0.5 * (values[a] + values[b]), vec![(a, 0.5), (b, 0.5)])
    }
}

fn median(values: &[f64]) -> f64 {
    median_with_weights(values).0
}

/// `(x − median) / mean|x − median|` for one patch, or `None` when the mean
/// absolute deviation vanishes.
fn normalize_patch(values: &[f64]) -> Option<(Vec<f64>, f64, f64)> {
    let m = median(values);
    let s = values.iter().map(|v| (v - m).abs()).sum::<f64>() / values.len() as f64;
    if !(s >= RPNL_MIN_DEVIATION) {
        return None;
    }
    Some((values.iter().map(|v| (v - m) / s).collect(), m, s))
}

/// Random proposal normalization loss.
///
/// Each crop's ground truth and prediction are normalized by their own
/// median and mean absolute deviation about the median; the loss is the
/// mean absolute difference of the normalized values, averaged over crops.
/// Crops with a vanishing deviation are skipped and counted.
pub fn rpnl(pred: &DepthMap, gt: &DepthMap, mask: &Mask, cfg: &RpnlConfig) -> Result<RpnlOutput, LossError> {
    let support = support_mask(pred, gt, mask)?;
    let (patches, sparse) = sample_rpnl_patches(&support, cfg)?;
    let (p, g) = (pred.values.as_slice(), gt.values.as_slice());
    let mut total = 0.0;
    let mut used = 0;
    let mut degenerate = 0;
    for rect in &patches {
        let idx = patch_indices(&support, rect);
        let gv: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
        let pv: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
        match (normalize_patch(&gv), normalize_patch(&pv)) {
            (Some((zg, ..)), Some((zp, ..))) => {
                total += zg.iter().zip(&zp).map(|(a, b)| (a - b).abs()).sum::<f64>() / idx.len() as f64;
                used += 1;
            }
            _ => degenerate += 1,
        }
    }
    Ok(RpnlOutput {
        value: if used > 0 { total / used as f64 } else { 0.0 },
        patches,
        used,
        degenerate,
        sparse,
    })
}

/// Gradient of [`rpnl`] with respect to the predicted depth, valid away from
/// median ties and from pixels where normalized values coincide.
pub fn rpnl_grad(pred: &DepthMap, gt: &DepthMap, mask: &Mask, cfg: &RpnlConfig) -> Result<Grid<f64>, LossError> {
    let support = support_mask(pred, gt, mask)?;
    let (patches, _) = sample_rpnl_patches(&support, cfg)?;
    let (p, g) = (pred.values.as_slice(), gt.values.as_slice());
    let mut grad = Grid::filled(pred.width(), pred.height(), 0.0);
    let mut contributions: Vec<(Vec<usize>, Vec<f64>)> = Vec::new();
    for rect in &patches {
        let idx = patch_indices(&support, rect);
        let gv: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
        let pv: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
        let (Some((zg, ..)), Some((zp, m, s))) = (normalize_patch(&gv), normalize_patch(&pv)) else {
            continue;
        };
        let n = idx.len() as f64;
        let (_, med_w) = median_with_weights(&pv);
        let mut dm = vec![0.0; idx.len()];
        for (k, wk) in med_w {
            dm[k] = wk;
        }
        // r_j = d(patch loss)/d(zp_j)
        let r: Vec<f64> = zg.iter().zip(&zp).map(|(a, b)| -(a - b).signum() / n).collect();
        let r_sum: f64 = r.iter().sum();
        let r_dot: f64 = r.iter().zip(&pv).map(|(rj, dj)| rj * (dj - m)).sum();
        let sign_sum: f64 = pv.iter().map(|d| sign0(d - m)).sum();
        let local: Vec<f64> = (0..idx.len())
            .map(|k| {
                let ds = (sign0(pv[k] - m) - dm[k] * sign_sum) / n;
                (r[k] - r_sum * dm[k]) / s - r_dot * ds / (s * s)
            })
            .collect();
        contributions.push((idx, local));
    }
    let used = contributions.len();
    if used == 0 {
        return Ok(grad);
    }
    for (idx, local) in contributions {
        for (i, v) in idx.into_iter().zip(local) {
            grad.as_mut_slice()[i] += v / used as f64;
        }
    }
    Ok(grad)
}

#[inline]
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Relative altitude below which a virtual triangle counts as collinear,
/// as a fraction of the point cloud's bounding-box diagonal.
pub const VNL_ALTITUDE_FRAC: f64 = 1e-3;

/// Flat pixel indices of sampled virtual-normal triplets that passed the
/// collinearity test.
pub fn sample_vnl_triplets(
    pred: &DepthMap,
    gt: &DepthMap,
    intr: &CameraIntrinsics,
    num_triplets: usize,
    seed: u64,
) -> Result<Vec<[usize; 3]>, LossError> {
    let full = Grid::filled(pred.width(), pred.height(), true);
    let idx = match depth_support(pred, gt, &full) {
        Ok(idx) => idx,
        Err(LossError::EmptyMask) => return Err(LossError::InsufficientPoints),
        Err(e) => return Err(e),
    };
    if idx.len() < 3 {
        return Err(LossError::InsufficientPoints);
    }
    let gt_pts = points_at(gt, intr, &idx);
    let pred_pts = points_at(pred, intr, &idx);
    let gt_tol = VNL_ALTITUDE_FRAC * bbox_diagonal(&gt_pts);
    let pred_tol = VNL_ALTITUDE_FRAC * bbox_diagonal(&pred_pts);
    let mut rng = SeededRng::new(seed);
    let mut out = Vec::with_capacity(num_triplets);
    for _ in 0..num_triplets {
        let t = [rng.below(idx.len()), rng.below(idx.len()), rng.below(idx.len())];
        if min_altitude(&gt_pts, t) >= gt_tol && min_altitude(&pred_pts, t) >= pred_tol && gt_tol > 0.0 {
            out.push([idx[t[0]], idx[t[1]], idx[t[2]]]);
        }
    }
    Ok(out)
}

fn points_at(depth: &DepthMap, intr: &CameraIntrinsics, idx: &[usize]) -> Vec<Vector3<f64>> {
    let w = depth.width();
    idx.iter()
        .map(|&i| backproject_unchecked((i % w) as f64, (i / w) as f64, depth.values.as_slice()[i], intr))
        .collect()
}

fn bbox_diagonal(pts: &[Vector3<f64>]) -> f64 {
    let (mut lo, mut hi) = (pts[0], pts[0]);
    for p in pts {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (hi - lo).norm()
}

/// Smallest altitude of the triangle, 0 when degenerate.
fn min_altitude(pts: &[Vector3<f64>], t: [usize; 3]) -> f64 {
    let (a, b, c) = (pts[t[0]], pts[t[1]], pts[t[2]]);
    let longest = (b - a).norm().max((c - b).norm()).max((a - c).norm());
    if longest == 0.0 {
        return 0.0;
    }
    (b - a).cross(&(c - a)).norm() / longest
}

fn triangle_normal(a: Vector3<f64>, b: Vector3<f64>, c: Vector3<f64>) -> Vector3<f64> {
    (b - a).cross(&(c - a)).normalize()
}

/// Mean L1 distance between unit normals of virtual planes spanned by the
/// given triplets in the ground-truth and predicted point clouds.
pub fn vnl_from_triplets(pred: &DepthMap, gt: &DepthMap, intr: &CameraIntrinsics, triplets: &[[usize; 3]]) -> Result<f64, LossError> {
    if triplets.is_empty() {
        return Err(LossError::InsufficientPoints);
    }
    let w = pred.width();
    let pt = |d: &DepthMap, i: usize| backproject_unchecked((i % w) as f64, (i / w) as f64, d.values.as_slice()[i], intr);
    let mut total = 0.0;
    for t in triplets {
        let ng = triangle_normal(pt(gt, t[0]), pt(gt, t[1]), pt(gt, t[2]));
        let np = triangle_normal(pt(pred, t[0]), pt(pred, t[1]), pt(pred, t[2]));
        total += (ng - np).abs().sum();
    }
    Ok(total / triplets.len() as f64)
}

/// Virtual normal loss over `num_triplets` seeded draws. Near-collinear
/// draws are dropped; if none survive the call fails with
/// `InsufficientPoints`.
pub fn vnl(pred: &DepthMap, gt: &DepthMap, intr: &CameraIntrinsics, num_triplets: usize, seed: u64) -> Result<f64, LossError> {
    let triplets = sample_vnl_triplets(pred, gt, intr, num_triplets, seed)?;
    vnl_from_triplets(pred, gt, intr, &triplets)
}

/// Depth-normal consistency: mean of `1 − n·n̂` over pixels where both the
/// normal map and the least-squares pseudo-normals of `depth` are valid.
/// `depth` must be real-space (de-canonicalized) depth.
pub fn consistency_dn(normal: &NormalMap, depth: &DepthMap, intr: &CameraIntrinsics) -> Result<f64, LossError> {
    consistency_dn_with(normal, depth, intr, DEFAULT_NORMAL_WINDOW, Exec::default())
}

pub fn consistency_dn_with(
    normal: &NormalMap,
    depth: &DepthMap,
    intr: &CameraIntrinsics,
    window: usize,
    exec: Exec,
) -> Result<f64, LossError> {
    normal.vectors.same_shape(&depth.values)?;
    let pseudo = normals_from_depth_with(depth, intr, window, exec)?;
    consistency_against(normal, &pseudo)
}

/// Consistency against precomputed pseudo-normals.
pub fn consistency_against(normal: &NormalMap, pseudo: &NormalMap) -> Result<f64, LossError> {
    normal.vectors.same_shape(&pseudo.vectors)?;
    let mut total = 0.0;
    let mut n = 0usize;
    for i in 0..normal.vectors.len() {
        if normal.valid.as_slice()[i] && pseudo.valid.as_slice()[i] {
            total += 1.0 - normal.vectors.as_slice()[i].dot(&pseudo.vectors.as_slice()[i]);
            n += 1;
        }
    }
    if n == 0 {
        return Err(LossError::EmptyOverlap);
    }
    Ok(total / n as f64)
}

fn normal_support(pred: &NormalMap, gt: &NormalMap, mask: &Mask) -> Result<Vec<usize>, LossError> {
    pred.vectors.same_shape(&gt.vectors)?;
    pred.vectors.same_shape(mask)?;
    let idx: Vec<usize> = (0..mask.len())
        .filter(|&i| mask.as_slice()[i] && pred.valid.as_slice()[i] && gt.valid.as_slice()[i])
        .collect();
    if idx.is_empty() {
        return Err(LossError::EmptyMask);
    }
    Ok(idx)
}

/// Angle between two vectors as `atan2(|a × b|, a · b)`: equal to
/// `acos(clamp(â · b̂))` but exact at 0 and well conditioned near 0 and π.
pub fn vector_angle(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Mean angle in radians between predicted and ground-truth normals.
pub fn normal_angular_loss(pred: &NormalMap, gt: &NormalMap, mask: &Mask) -> Result<f64, LossError> {
    let idx = normal_support(pred, gt, mask)?;
    let (p, g) = (pred.vectors.as_slice(), gt.vectors.as_slice());
    let total: f64 = idx.iter().map(|&i| vector_angle(&p[i], &g[i])).sum();
    Ok(total / idx.len() as f64)
}

/// Gradient of [`normal_angular_loss`] with respect to the predicted vector
/// components, `−(ĝ − cos θ · p̂) / (|p| sin θ)` per pixel; zero where the
/// vectors are parallel or anti-parallel.
pub fn normal_angular_grad(pred: &NormalMap, gt: &NormalMap, mask: &Mask) -> Result<Grid<Vector3<f64>>, LossError> {
    let idx = normal_support(pred, gt, mask)?;
    let (p, g) = (pred.vectors.as_slice(), gt.vectors.as_slice());
    let n = idx.len() as f64;
    let mut grad = Grid::filled(pred.width(), pred.height(), Vector3::zeros());
    for &i in &idx {
        let len = p[i].norm();
        let u = p[i] / len;
        let gh = g[i].normalize();
        let c = u.dot(&gh);
        let s = u.cross(&gh).norm();
        if s > 0.0 && len > 0.0 {
            grad.as_mut_slice()[i] = -(gh - u * c) / (len * s * n);
        }
    }
    Ok(grad)
}

pub fn compose_step_loss(l_d: f64, l_n: f64, l_dn: f64, w: &LossWeights) -> f64 {
    w.w_d * l_d + w.w_n * l_n + w.w_dn * l_dn
}

/// `Σ_t γ^(T−t) · L^t` over `T + 1` step losses.
pub fn gamma_total(step_losses: &[f64], cfg: &ScheduleConfig) -> Result<f64, LossError> {
    if step_losses.len() != cfg.steps + 1 {
        return Err(LossError::LengthMismatch {
            expected: cfg.steps + 1,
            got: step_losses.len(),
        });
    }
    if !(cfg.gamma > 0.0 && cfg.gamma <= 1.0) {
        return Err(LossError::InvalidConfig(format!("gamma must be in (0, 1], got {}", cfg.gamma)));
    }
    let t_max = cfg.steps as i32;
    Ok(step_losses
        .iter()
        .enumerate()
        .map(|(t, l)| cfg.gamma.powi(t_max - t as i32) * l)
        .sum())
}

/// Loss terms of a fine-tuning step that also distills from the pre-finetune
/// model's predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneParts {
    pub l_dn: f64,
    pub l_d: f64,
    pub l_n: f64,
    pub l_d_pseudo: f64,
    pub l_n_pseudo: f64,
}

pub fn finetune_loss(parts: &FinetuneParts) -> f64 {
    0.01 * parts.l_dn + parts.l_d + parts.l_n + 0.01 * (parts.l_d_pseudo + parts.l_n_pseudo)
}

/// Which depth terms enter `L_d` and their settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthLossConfig {
    pub silog: bool,
    pub vnl: bool,
    pub rpnl: bool,
    pub silog_lambda: f64,
    pub rpnl_cfg: RpnlConfig,
    pub vnl_triplets: usize,
    pub vnl_seed: u64,
}

impl Default for DepthLossConfig {
    fn default() -> Self {
        Self {
            silog: true,
            vnl: true,
            rpnl: true,
            silog_lambda: 0.5,
            rpnl_cfg: RpnlConfig::default(),
            vnl_triplets: 1000,
            vnl_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthLossBreakdown {
    pub silog: Option<f64>,
    pub vnl: Option<f64>,
    pub rpnl: Option<f64>,
    pub total: f64,
}

/// `L_d` as the sum of the enabled terms.
pub fn depth_loss(
    pred: &DepthMap,
    gt: &DepthMap,
    mask: &Mask,
    intr: &CameraIntrinsics,
    cfg: &DepthLossConfig,
) -> Result<DepthLossBreakdown, LossError> {
    let mut out = DepthLossBreakdown::default();
    if cfg.silog {
        out.silog = Some(silog(pred, gt, mask, cfg.silog_lambda)?);
    }
    if cfg.vnl {
        // VNL samples over the full joint validity; apply the caller mask first
        let masked_gt = DepthMap {
            values: gt.values.clone(),
            valid: gt.valid.and(mask)?,
        };
        out.vnl = Some(vnl(pred, &masked_gt, intr, cfg.vnl_triplets, cfg.vnl_seed)?);
    }
    if cfg.rpnl {
        out.rpnl = Some(rpnl(pred, gt, mask, &cfg.rpnl_cfg)?.value);
    }
    out.total = out.silog.unwrap_or(0.0) + out.vnl.unwrap_or(0.0) + out.rpnl.unwrap_or(0.0);
    Ok(out)
}

/// A scalar loss of a flat parameter vector with an analytic gradient.
pub trait DifferentiableLoss {
    fn value(&self, x: &[f64]) -> Result<f64, LossError>;
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, LossError>;
}

/// [`silog`] as a function of the flattened predicted depth.
pub struct SilogObjective {
    pub gt: DepthMap,
    pub mask: Mask,
    pub lambda: f64,
}

/// [`rpnl`] as a function of the flattened predicted depth.
pub struct RpnlObjective {
    pub gt: DepthMap,
    pub mask: Mask,
    pub cfg: RpnlConfig,
}

/// [`normal_angular_loss`] as a function of the flattened predicted normal
/// components `[x0, y0, z0, x1, ...]`.
pub struct AngularObjective {
    pub gt: NormalMap,
    pub mask: Mask,
}

fn depth_from_flat(like: &DepthMap, x: &[f64]) -> Result<DepthMap, LossError> {
    Ok(DepthMap {
        values: Grid::from_vec(like.width(), like.height(), x.to_vec())?,
        valid: Grid::filled(like.width(), like.height(), true),
    })
}

impl DifferentiableLoss for SilogObjective {
    fn value(&self, x: &[f64]) -> Result<f64, LossError> {
        silog(&depth_from_flat(&self.gt, x)?, &self.gt, &self.mask, self.lambda)
    }
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, LossError> {
        Ok(silog_grad(&depth_from_flat(&self.gt, x)?, &self.gt, &self.mask, self.lambda)?.into_vec())
    }
}

impl DifferentiableLoss for RpnlObjective {
    fn value(&self, x: &[f64]) -> Result<f64, LossError> {
        Ok(rpnl(&depth_from_flat(&self.gt, x)?, &self.gt, &self.mask, &self.cfg)?.value)
    }
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, LossError> {
        Ok(rpnl_grad(&depth_from_flat(&self.gt, x)?, &self.gt, &self.mask, &self.cfg)?.into_vec())
    }
}

impl AngularObjective {
    fn normals(&self, x: &[f64]) -> Result<NormalMap, LossError> {
        if x.len() != 3 * self.gt.vectors.len() {
            return Err(LossError::LengthMismatch {
                expected: 3 * self.gt.vectors.len(),
                got: x.len(),
            });
        }
        let v = x.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
        Ok(NormalMap {
            vectors: Grid::from_vec(self.gt.width(), self.gt.height(), v)?,
            valid: Grid::filled(self.gt.width(), self.gt.height(), true),
        })
    }
}

impl DifferentiableLoss for AngularObjective {
    fn value(&self, x: &[f64]) -> Result<f64, LossError> {
        normal_angular_loss(&self.normals(x)?, &self.gt, &self.mask)
    }
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, LossError> {
        let g = normal_angular_grad(&self.normals(x)?, &self.gt, &self.mask)?;
        Ok(g.iter().flat_map(|v| [v.x, v.y, v.z]).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Denominator floor for relative errors, so components whose analytic and
/// numeric gradients are both near zero do not blow up the ratio.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

/// Compares the analytic gradient with central differences
/// `(f(x + ε e_i) − f(x − ε e_i)) / 2ε` component by component. Relative
/// error is `|a − n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn grad_check(loss: &dyn DifferentiableLoss, point: &[f64], eps: f64) -> Result<GradCheckReport, LossError> {
    let analytic = loss.gradient(point)?;
    let mut x = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: 0,
        checked: point.len(),
    };
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let fp = loss.value(&x)?;
        x[i] = orig - eps;
        let fm = loss.value(&x)?;
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let abs = (analytic[i] - numeric).abs();
        let rel = abs / analytic[i].abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
        report.max_abs_err = report.max_abs_err.max(abs);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{E, FRAC_PI_2, FRAC_PI_6};

    fn ramp(w: usize, h: usize, seed: u64) -> DepthMap {
        let mut rng = SeededRng::new(seed);
        DepthMap::from_fn(w, h, |_, _| Some(rng.uniform(1.0, 10.0)))
    }

    fn all(w: usize, h: usize) -> Mask {
        Grid::filled(w, h, true)
    }

    fn intr(w: usize, h: usize) -> CameraIntrinsics {
        CameraIntrinsics::new(60.0, 60.0, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap()
    }

    #[test]
    fn silog_examples() {
        let gt = ramp(8, 8, 1);
        let m = all(8, 8);
        assert_eq!(silog(&gt, &gt, &m, 0.5).unwrap(), 0.0);
        let pred = gt.scaled(E);
        assert!((silog(&pred, &gt, &m, 0.5).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(silog(&pred, &gt, &m, 1.0).unwrap() < 1e-7);
    }

    #[test]
    fn silog_errors() {
        let gt = ramp(4, 4, 1);
        let none = Grid::filled(4, 4, false);
        assert_eq!(silog(&gt, &gt, &none, 0.5), Err(LossError::EmptyMask));
        let mut bad = gt.clone();
        *bad.values.get_mut(1, 2) = -1.0;
        assert!(matches!(
            silog(&bad, &gt, &all(4, 4), 0.5),
            Err(LossError::NonPositiveDepth { x: 1, y: 2, .. })
        ));
    }

    #[test]
    fn rpnl_zero_and_affine() {
        let gt = ramp(32, 32, 2);
        let m = all(32, 32);
        let cfg = RpnlConfig::with_seed(3);
        let same = rpnl(&gt, &gt, &m, &cfg).unwrap();
        assert_eq!(same.value, 0.0);
        assert_eq!(same.used, 32);
        let affine = DepthMap {
            values: gt.values.map(|v| 2.0 * v + 5.0),
            valid: gt.valid.clone(),
        };
        assert!(rpnl(&affine, &gt, &m, &cfg).unwrap().value < 1e-9);
    }

    #[test]
    fn rpnl_degenerate_patches_counted() {
        let gt = DepthMap::dense(Grid::filled(16, 16, 2.0)).unwrap();
        let pred = ramp(16, 16, 4);
        let out = rpnl(&pred, &gt, &all(16, 16), &RpnlConfig::with_seed(1)).unwrap();
        assert_eq!(out.used, 0);
        assert_eq!(out.degenerate, 32);
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn rpnl_sparse_slots_abandoned() {
        // only 4 valid pixels in total: no crop can reach the minimum
        let gt = DepthMap::from_fn(16, 16, |x, y| (x < 2 && y < 2).then_some(1.0 + x as f64));
        let out = rpnl(&gt, &gt, &all(16, 16), &RpnlConfig::with_seed(1)).unwrap();
        assert_eq!(out.sparse, 32);
        assert!(out.patches.is_empty());
    }

    #[test]
    fn rpnl_patch_sizes_within_fractions() {
        let m = all(64, 48);
        let (patches, sparse) = sample_rpnl_patches(&m, &RpnlConfig::with_seed(9)).unwrap();
        assert_eq!(sparse, 0);
        for p in patches {
            assert!(p.width >= 8 && p.width <= 32, "{p:?}");
            assert!(p.height >= 6 && p.height <= 24, "{p:?}");
            assert!(p.x0 + p.width <= 64 && p.y0 + p.height <= 48);
        }
    }

    #[test]
    fn rpnl_config_validation() {
        let bad = RpnlConfig {
            min_frac: 0.6,
            ..RpnlConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(RpnlConfig {
            num_patches: 0,
            ..RpnlConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn median_weights() {
        assert_eq!(median_with_weights(&[3.0, 1.0, 2.0]), (2.0, vec![(2, 1.0)]));
        assert_eq!(median_with_weights(&[4.0, 1.0, 3.0, 2.0]).0, 2.5);
    }

    #[test]
    fn vnl_zero_and_scale() {
        let gt = ramp(24, 24, 5);
        let k = intr(24, 24);
        assert_eq!(vnl(&gt, &gt, &k, 500, 1).unwrap(), 0.0);
        assert!(vnl(&gt.scaled(3.3), &gt, &k, 500, 1).unwrap() < 1e-9);
        let other = ramp(24, 24, 6);
        assert!(vnl(&other, &gt, &k, 500, 1).unwrap() > 0.01);
    }

    #[test]
    fn vnl_insufficient() {
        let gt = DepthMap::from_fn(4, 4, |x, y| (x == 0 && y < 2).then_some(1.0));
        assert_eq!(vnl(&gt, &gt, &intr(4, 4), 10, 1), Err(LossError::InsufficientPoints));
    }

    #[test]
    fn consistency_examples() {
        let k = intr(16, 12);
        let depth = DepthMap::dense(Grid::filled(16, 12, 2.0)).unwrap();
        let own = normals_from_depth_with(&depth, &k, 5, Exec::Sequential).unwrap();
        assert_eq!(consistency_dn(&own, &depth, &k).unwrap(), 0.0);
        let side = NormalMap::constant(16, 12, Vector3::new(1.0, 0.0, 0.0));
        assert!((consistency_dn(&side, &depth, &k).unwrap() - 1.0).abs() < 1e-12);
        let away = NormalMap::constant(16, 12, Vector3::new(0.0, 0.0, 1.0));
        assert!((consistency_dn(&away, &depth, &k).unwrap() - 2.0).abs() < 1e-12);
        let invalid = NormalMap {
            valid: Grid::filled(16, 12, false),
            ..away
        };
        assert_eq!(consistency_dn(&invalid, &depth, &k), Err(LossError::EmptyOverlap));
    }

    #[test]
    fn angular_examples() {
        let m = all(3, 2);
        let a = NormalMap::constant(3, 2, Vector3::new(0.0, 0.0, -1.0));
        assert_eq!(normal_angular_loss(&a, &a, &m).unwrap(), 0.0);
        let b = NormalMap::constant(3, 2, Vector3::new(1.0, 0.0, 0.0));
        assert!((normal_angular_loss(&a, &b, &m).unwrap() - FRAC_PI_2).abs() < 1e-12);
        let c = NormalMap::constant(3, 2, Vector3::new(FRAC_PI_6.sin(), 0.0, -FRAC_PI_6.cos()));
        assert!((normal_angular_loss(&a, &c, &m).unwrap() - FRAC_PI_6).abs() < 1e-9);
        assert_eq!(normal_angular_loss(&a, &b, &Grid::filled(3, 2, false)), Err(LossError::EmptyMask));
    }

    #[test]
    fn weights_and_schedules() {
        let w = LossWeights::default();
        assert_eq!(compose_step_loss(0.0, 0.0, 0.0, &w), 0.0);
        assert_eq!(compose_step_loss(1.0, 1.0, 1.0, &w), 1.51);
        assert_eq!(compose_step_loss(2.0, 0.0, 0.0, &w), 1.0);
        assert_eq!(gamma_total(&[3.0], &ScheduleConfig::new(0)).unwrap(), 3.0);
        assert_eq!(gamma_total(&[1.0, 1.0], &ScheduleConfig::new(1)).unwrap(), 1.9);
        assert_eq!(gamma_total(&[1.0, 0.0, 0.0], &ScheduleConfig::new(2)).unwrap(), 0.81);
        assert_eq!(
            gamma_total(&[1.0], &ScheduleConfig::new(2)),
            Err(LossError::LengthMismatch { expected: 3, got: 1 })
        );
    }

    #[test]
    fn finetune_examples() {
        assert_eq!(finetune_loss(&FinetuneParts::default()), 0.0);
        let ones = FinetuneParts {
            l_dn: 1.0,
            l_d: 1.0,
            l_n: 1.0,
            l_d_pseudo: 1.0,
            l_n_pseudo: 1.0,
        };
        assert_eq!(finetune_loss(&ones), 2.03);
        let p = FinetuneParts {
            l_d: 2.0,
            l_n: 3.0,
            ..Default::default()
        };
        assert_eq!(finetune_loss(&p), 5.0);
    }

    #[test]
    fn depth_loss_sums_enabled_terms() {
        let gt = ramp(24, 24, 8);
        let pred = ramp(24, 24, 9);
        let m = all(24, 24);
        let k = intr(24, 24);
        let cfg = DepthLossConfig::default();
        let out = depth_loss(&pred, &gt, &m, &k, &cfg).unwrap();
        assert_eq!(out.total, out.silog.unwrap() + out.vnl.unwrap() + out.rpnl.unwrap());
        let only = DepthLossConfig {
            vnl: false,
            rpnl: false,
            ..cfg
        };
        let s = depth_loss(&pred, &gt, &m, &k, &only).unwrap();
        assert_eq!(s.total, silog(&pred, &gt, &m, 0.5).unwrap());
        assert!(s.vnl.is_none());
    }

    #[test]
    fn silog_gradient_matches_differences() {
        let gt = ramp(6, 5, 10);
        let pred = ramp(6, 5, 11);
        let obj = SilogObjective {
            gt,
            mask: all(6, 5),
            lambda: 0.5,
        };
        let r = grad_check(&obj, pred.values.as_slice(), 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn angular_gradient_matches_differences() {
        let mut rng = SeededRng::new(12);
        let mk = |rng: &mut SeededRng| Vector3::new(rng.normal(), rng.normal(), rng.normal()).normalize();
        let gt = NormalMap {
            vectors: Grid::from_fn(4, 4, |_, _| mk(&mut rng)),
            valid: all(4, 4),
        };
        let pred: Vec<f64> = (0..16).flat_map(|_| mk(&mut rng).as_slice().to_vec()).collect();
        let obj = AngularObjective { gt, mask: all(4, 4) };
        let r = grad_check(&obj, &pred, 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}
