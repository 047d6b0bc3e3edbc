//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Oracles are independent of the code under test wherever the criterion
//! asks for one (brute-force nearest neighbors, direct ray casting, hand
//! enumeration, closed forms).

use std::path::Path;
use std::time::Instant;

use canodepth::camera::{
    backproject, canonicalize_image, canonicalize_label, decanonicalize_image, decanonicalize_label, imaging_size, CameraIntrinsics,
    PhysicalCamera,
};
use canodepth::eval::{
    chamfer_fscore_with, depth_metrics, icp_align, measure_distance, normal_error_map, normal_metrics, scale_shift_align, ErrorMap,
    IcpConfig, Pooling, Protocol,
};
use canodepth::geometry::{fuse_frames, normals_from_depth, Frame, NormalMap, PointCloud, Pose};
use canodepth::grid::{DepthMap, Grid, ImageBuffer, Mask};
use canodepth::io;
use canodepth::losses::{
    compose_step_loss, gamma_total, grad_check, normal_angular_loss, rpnl, silog, vnl, AngularObjective, LossWeights, RpnlConfig,
    RpnlObjective, ScheduleConfig, SilogObjective,
};
use canodepth::refine::{consistency_descent_operator, run_refinement};
use canodepth::rng::SeededRng;
use canodepth::synth::{self, BoxRoom, Plane};
use canodepth::{Exec, Vec3};

type Outcome = Result<String, String>;
type Criterion = (&'static str, Box<dyn Fn() -> Outcome>);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn k(f: f64, w: usize, h: usize) -> CameraIntrinsics {
    CameraIntrinsics::new(f, f, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h).unwrap()
}

fn all(w: usize, h: usize) -> Mask {
    Grid::filled(w, h, true)
}

/// Random depths in [0.1, 200] m at float32 precision (what PFM stores),
/// with roughly 5% invalid pixels.
fn f32_depth(w: usize, h: usize, rng: &mut SeededRng) -> DepthMap {
    DepthMap::from_fn(w, h, |_, _| {
        let d = rng.uniform(0.1, 200.0) as f32 as f64;
        (rng.unit() > 0.05).then_some(d)
    })
}

fn c01_cstm_round_trips() -> Outcome {
    let mut rng = SeededRng::new(101);
    let (w, h) = (96, 64);
    let gray = ImageBuffer::gray(w, h, 0.5);
    let mut mismatched = 0usize;
    for omega in [0.5, 1.0, 2.0, 3.7] {
        let intr = k(1000.0 / omega, w, h);
        for _ in 0..4 {
            let d = f32_depth(w, h, &mut rng);
            let b = canonicalize_label(&d, &gray, &intr, 1000.0).map_err(|e| e.to_string())?;
            let back = decanonicalize_label(&b.depth_c, b.omega_d);
            if back.valid != d.valid {
                return Err(format!("mask changed at omega {omega}"));
            }
            mismatched += d
                .values
                .iter()
                .zip(back.values.iter())
                .zip(d.valid.iter())
                .filter(|((a, b), v)| **v && a.to_bits() != b.to_bits())
                .count();
        }
    }

    // piecewise-constant depth in 16x16 blocks; compare pixels at least 3 px
    // from any block edge
    let (w, h) = (128, 96);
    let blocks = DepthMap::from_fn(w, h, |x, y| Some(1.0 + ((x / 16) * 7 + (y / 16) * 3) as f64 % 11.0));
    let gray = ImageBuffer::gray(w, h, 0.5);
    let mut worst = 0.0f64;
    for f in [500.0, 2000.0] {
        let b = canonicalize_image(&blocks, &gray, &k(f, w, h), 1000.0).map_err(|e| e.to_string())?;
        let back = decanonicalize_image(&b.depth_c, &b).map_err(|e| e.to_string())?;
        for y in 0..h {
            for x in 0..w {
                let interior = (3..13).contains(&(x % 16)) && (3..13).contains(&(y % 16));
                if interior {
                    let e = (back.at(x, y).unwrap() - blocks.at(x, y).unwrap()).abs();
                    worst = worst.max(e);
                }
            }
        }
    }
    check(
        mismatched == 0 && worst < 1e-6,
        format!("label: {mismatched} non-bitwise pixels over omega {{0.5,1,2,3.7}}; image: max interior error {worst:.2e}"),
    )
}

fn c02_focal_ambiguity() -> Outcome {
    let (w, h) = (80, 60);
    let mk = |f: f64| CameraIntrinsics::new(f, f, 39.5, 29.5, w, h).unwrap();
    let (k1, k2) = (mk(1000.0), mk(500.0));
    let (d1, i1) = synth::render_textured_plane(&k1, 4.0);
    let (d2, i2) = synth::render_textured_plane(&k2, 2.0);
    let same_image = i1 == i2;
    let s1 = imaging_size(0.3, 4.0, 1000.0);
    let s2 = imaging_size(0.3, 2.0, 500.0);
    let c1 = canonicalize_label(&d1, &i1, &k1, 1000.0).map_err(|e| e.to_string())?;
    let c2 = canonicalize_label(&d2, &i2, &k2, 1000.0).map_err(|e| e.to_string())?;
    let rel = c1
        .depth_c
        .values
        .iter()
        .zip(c2.depth_c.values.iter())
        .map(|(a, b)| (a - b).abs() / a)
        .fold(0.0, f64::max);
    let raw_differ = d1.values != d2.values;
    check(
        same_image && (s1 - s2).abs() < 1e-12 && rel < 1e-6 && raw_differ,
        format!("images identical: {same_image}; imaging sizes {s1} vs {s2}; canonical depth max rel diff {rel:.2e}"),
    )
}

fn c03_pixel_size_invariance() -> Outcome {
    let c1 = PhysicalCamera::new(5000.0, 5.0).unwrap();
    let c2 = PhysicalCamera::new(5000.0, 2.5).unwrap();
    let (w1, h1) = (64, 48);
    let (w2, h2) = (128, 96);
    let k1 = CameraIntrinsics::new(c1.pixel_focal(), c1.pixel_focal(), 31.5, 23.5, w1, h1).unwrap();
    let k2 = CameraIntrinsics::new(c2.pixel_focal(), c2.pixel_focal(), 63.5, 47.5, w2, h2).unwrap();
    let plane = Plane {
        normal: Vec3::new(0.2, -0.1, -1.0).normalize(),
        offset: -5.0,
    };
    let d1 = synth::render_plane(&k1, &plane);
    let mut worst = 0.0f64;
    for v in 0..h1 {
        for u in 0..w1 {
            // same sensor location expressed in each camera's pixel grid
            let sx = (u as f64 - k1.cx) * c1.pixel_size_um;
            let sy = (v as f64 - k1.cy) * c1.pixel_size_um;
            let u2 = sx / c2.pixel_size_um + k2.cx;
            let v2 = sy / c2.pixel_size_um + k2.cy;
            let p1 = backproject(u as f64, v as f64, d1.at(u, v).unwrap(), &k1).unwrap();
            let d2 = plane.depth_at(&k2, u2, v2).ok_or("ray missed plane")?;
            let p2 = backproject(u2, v2, d2, &k2).unwrap();
            worst = worst.max((p1 - p2).norm());
        }
    }
    check(
        worst < 1e-9 && c2.pixel_focal() == 2.0 * c1.pixel_focal(),
        format!(
            "pixel focal {} vs {}; max point distance {worst:.2e} m",
            c1.pixel_focal(),
            c2.pixel_focal()
        ),
    )
}

fn c04_normal_scale_agnostic() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let d = synth::smooth_depth(64, 48, seed);
        let intr = k(60.0, 64, 48);
        let n0 = normals_from_depth(&d, &intr, 5).map_err(|e| e.to_string())?;
        for kk in [0.5, 2.0, 10.0] {
            let nk = normals_from_depth(&d.scaled(kk), &intr, 5).map_err(|e| e.to_string())?;
            if nk.valid != n0.valid {
                return Err(format!("validity changed under k={kk}"));
            }
            for i in 0..n0.vectors.len() {
                if n0.valid.as_slice()[i] {
                    let a = n0.vectors.as_slice()[i];
                    let b = nk.vectors.as_slice()[i];
                    worst = worst.max(a.cross(&b).norm().atan2(a.dot(&b)));
                }
            }
        }
    }
    check(worst < 1e-6, format!("max angle {worst:.2e} rad over k in {{0.5, 2, 10}}"))
}

fn c05_loss_zeros_invariances() -> Outcome {
    let (w, h) = (48, 40);
    let gt = synth::smooth_depth(w, h, 9);
    let intr = k(50.0, w, h);
    let m = all(w, h);
    let cfg = RpnlConfig::with_seed(42);
    let err = |e: canodepth::losses::LossError| e.to_string();
    let mut rng = SeededRng::new(5);
    let normals = NormalMap {
        vectors: Grid::from_fn(w, h, |_, _| Vec3::new(rng.normal(), rng.normal(), rng.normal()).normalize()),
        valid: all(w, h),
    };
    let zeros = [
        silog(&gt, &gt, &m, 0.5).map_err(err)?,
        rpnl(&gt, &gt, &m, &cfg).map_err(err)?.value,
        vnl(&gt, &gt, &intr, 1000, 7).map_err(err)?,
        normal_angular_loss(&normals, &normals, &m).map_err(err)?,
    ];
    let affine = DepthMap {
        values: gt.values.map(|d| 2.5 * d + 0.7),
        valid: gt.valid.clone(),
    };
    let rpnl_affine = rpnl(&affine, &gt, &m, &cfg).map_err(err)?.value;
    let scaled = gt.scaled(3.0);
    let vnl_scaled = vnl(&scaled, &gt, &intr, 1000, 7).map_err(err)?;
    let silog_scaled = silog(&scaled, &gt, &m, 1.0).map_err(err)?;
    check(
        zeros.iter().all(|&z| z == 0.0) && rpnl_affine < 1e-9 && vnl_scaled < 1e-9 && silog_scaled < 1e-9,
        format!("at pred=gt {zeros:?}; rpnl(2.5 gt + 0.7) {rpnl_affine:.2e}; vnl(3 gt) {vnl_scaled:.2e}; silog_1(3 gt) {silog_scaled:.2e}"),
    )
}

fn c06_gradient_checks() -> Outcome {
    let (w, h) = (16, 12);
    let mut rng = SeededRng::new(77);
    let gt = DepthMap::from_fn(w, h, |_, _| Some(rng.uniform(1.0, 10.0)));
    let pred: Vec<f64> = (0..w * h).map(|_| rng.uniform(1.0, 10.0)).collect();
    let err = |e: canodepth::losses::LossError| e.to_string();

    let silog_obj = SilogObjective {
        gt: gt.clone(),
        mask: all(w, h),
        lambda: 0.5,
    };
    let rs = grad_check(&silog_obj, &pred, 1e-6).map_err(err)?;

    // independent uniform draws keep every patch's order statistics and
    // residual signs at least 1e-5 apart from a kink, far above eps
    let rpnl_obj = RpnlObjective {
        gt: gt.clone(),
        mask: all(w, h),
        cfg: RpnlConfig {
            num_patches: 8,
            min_frac: 0.5,
            max_frac: 1.0,
            seed: 3,
        },
    };
    let rr = grad_check(&rpnl_obj, &pred, 1e-7).map_err(err)?;

    let gn = NormalMap {
        vectors: Grid::from_fn(w, h, |_, _| Vec3::new(rng.normal(), rng.normal(), rng.normal()).normalize()),
        valid: all(w, h),
    };
    let x: Vec<f64> = (0..w * h)
        .flat_map(|_| {
            let v = Vec3::new(rng.normal(), rng.normal(), rng.normal()).normalize() * rng.uniform(0.5, 2.0);
            [v.x, v.y, v.z]
        })
        .collect();
    let ang = AngularObjective { gt: gn, mask: all(w, h) };
    let ra = grad_check(&ang, &x, 1e-6).map_err(err)?;
    let worst = rs.max_rel_err.max(rr.max_rel_err).max(ra.max_rel_err);
    check(
        worst < 1e-4,
        format!(
            "max rel err silog {:.2e}, rpnl {:.2e}, angular {:.2e}",
            rs.max_rel_err, rr.max_rel_err, ra.max_rel_err
        ),
    )
}

fn c07_schedule() -> Outcome {
    let g = gamma_total(&[1.0, 1.0], &ScheduleConfig::new(1)).map_err(|e| e.to_string())?;
    let c = compose_step_loss(1.0, 1.0, 1.0, &LossWeights::default());
    check(
        g == 1.9 && c == 1.51,
        format!("gamma_total([1,1]) = {g}; compose_step_loss(1,1,1) = {c}"),
    )
}

fn c08_refinement() -> Outcome {
    // the state lives in canonical space (f_c = 1000 against f = 43.2)
    let scene = synth::noisy_plane_scene(48, 36, 0.005, 0.3, 42);
    let b = canonicalize_label(&scene.state.depth_c, &ImageBuffer::gray(48, 36, 0.5), &scene.intr, 1000.0).map_err(|e| e.to_string())?;
    let mut init = scene.state.clone();
    init.depth_c = b.depth_c.clone();
    let op = consistency_descent_operator(0.5, scene.intr, &b.meta()).map_err(|e| e.to_string())?;
    let traj = run_refinement(init, &op, 8).map_err(|e| e.to_string())?;
    let curve: Vec<f64> = traj
        .iter()
        .map(|s| op.consistency(s))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let strictly = curve.windows(2).all(|p| p[1] < p[0]);
    let ratio = curve.last().unwrap() / curve[0];
    check(
        strictly && ratio < 0.5,
        format!(
            "{} states, strictly decreasing: {strictly}; {:.3e} -> {:.3e} (ratio {ratio:.2e})",
            curve.len(),
            curve[0],
            curve.last().unwrap()
        ),
    )
}

fn c09_protocols() -> Outcome {
    // hand enumeration: image A = {0}, image B = {30, 30, 30}
    // pooled {0, 30, 30, 30}: median (30 + 30) / 2 = 30, mean 22.5
    // per image medians 0 and 30 -> 15, means 0 and 30 -> 15
    let a = ErrorMap::from_values(1, 1, vec![0.0]).unwrap();
    let b = ErrorMap::from_values(3, 1, vec![30.0; 3]).unwrap();
    let pooled = Protocol {
        pooling: Pooling::PixelPooled,
        exclude_invalid: true,
    };
    let per = Protocol {
        pooling: Pooling::SampleMean,
        exclude_invalid: true,
    };
    let set = [a, b];
    let mp = normal_metrics(&set, pooled).map_err(|e| e.to_string())?;
    let ms = normal_metrics(&set, per).map_err(|e| e.to_string())?;
    let exact = mp.median_deg == 30.0 && ms.median_deg == 15.0 && mp.mean_deg == 22.5 && ms.mean_deg == 15.0;

    // the same set built from normal maps, plus invalid pixels that carry
    // large errors: 2x1 image A with one invalid pixel, 4x1 image B with one
    let z = Vec3::z();
    let r30 = Vec3::new(0.0, 30f64.to_radians().sin(), 30f64.to_radians().cos());
    let gt_a = NormalMap {
        vectors: Grid::from_vec(2, 1, vec![z, -z]).unwrap(),
        valid: Grid::from_vec(2, 1, vec![true, false]).unwrap(),
    };
    let pred_a = NormalMap {
        vectors: Grid::filled(2, 1, z),
        valid: all(2, 1),
    };
    let gt_b = NormalMap {
        vectors: Grid::filled(4, 1, z),
        valid: all(4, 1),
    };
    let pred_b = NormalMap {
        vectors: Grid::from_vec(4, 1, vec![r30, r30, r30, -z]).unwrap(),
        valid: all(4, 1),
    };
    let mask_b = Grid::from_vec(4, 1, vec![true, true, true, false]).unwrap();
    let maps = [
        normal_error_map(&pred_a, &gt_a, &all(2, 1)).map_err(|e| e.to_string())?,
        normal_error_map(&pred_b, &gt_b, &mask_b).map_err(|e| e.to_string())?,
    ];
    // oracle: the same normals with the masked pixels physically removed
    let kept = [
        normal_error_map(&NormalMap::constant(1, 1, z), &NormalMap::constant(1, 1, z), &all(1, 1)).map_err(|e| e.to_string())?,
        normal_error_map(&NormalMap::constant(3, 1, r30), &NormalMap::constant(3, 1, z), &all(3, 1)).map_err(|e| e.to_string())?,
    ];
    let np = normal_metrics(&maps, pooled).map_err(|e| e.to_string())?;
    let ns = normal_metrics(&maps, per).map_err(|e| e.to_string())?;
    let near = |x: f64, y: f64| (x - y).abs() < 1e-9;
    let excluded = np == normal_metrics(&kept, pooled).map_err(|e| e.to_string())?
        && ns == normal_metrics(&kept, per).map_err(|e| e.to_string())?
        && near(np.median_deg, 30.0)
        && near(ns.median_deg, 15.0);
    let with_invalid = normal_metrics(
        &maps,
        Protocol {
            pooling: Pooling::PixelPooled,
            exclude_invalid: false,
        },
    )
    .map_err(|e| e.to_string())?;
    let leaks = with_invalid.mean_deg > np.mean_deg + 1.0;
    check(
        exact && excluded && leaks,
        format!(
            "pixel-pooled median {} vs sample-mean median {}; from normals with invalid pixels excluded {:.6}/{:.6}; mean with invalid included {:.3}",
            mp.median_deg, ms.median_deg, np.median_deg, ns.median_deg, with_invalid.mean_deg
        ),
    )
}

fn brute_directed(a: &[Vec3], b: &[Vec3], tau: f64) -> (f64, f64) {
    let mut sum = 0.0;
    let mut hit = 0usize;
    for p in a {
        let mut best = f64::INFINITY;
        for q in b {
            let (dx, dy, dz) = (p.x - q.x, p.y - q.y, p.z - q.z);
            best = best.min(dx * dx + dy * dy + dz * dz);
        }
        let d = best.sqrt();
        sum += d;
        if d < tau {
            hit += 1;
        }
    }
    (sum / a.len() as f64, hit as f64 / a.len() as f64)
}

fn c10_chamfer_oracle() -> Outcome {
    let mut rng = SeededRng::new(1010);
    let tau = 0.05;
    for trial in 0..100 {
        let n = 1 + rng.below(500);
        let m = 1 + rng.below(500);
        let ext = Vec3::new(1.0, 0.8, 0.5);
        let p = synth::random_cloud(n, ext, &mut rng);
        let g = synth::random_cloud(m, ext, &mut rng);
        let exec = if trial % 2 == 0 { Exec::Parallel } else { Exec::Sequential };
        let got = chamfer_fscore_with(&p, &g, tau, exec).map_err(|e| e.to_string())?;
        let (dpg, precision) = brute_directed(&p.points, &g.points, tau);
        let (dgp, recall) = brute_directed(&g.points, &p.points, tau);
        let f = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let want = (0.5 * (dpg + dgp), f, precision, recall);
        if (got.chamfer_l1, got.fscore, got.precision, got.recall) != want {
            return Err(format!("trial {trial} ({n} vs {m} points): {got:?} != {want:?}"));
        }
    }
    Ok("100 random pairs of 1..=500 points match brute force exactly".into())
}

fn c11_icp() -> Outcome {
    let mut rng = SeededRng::new(1111);
    let mut worst_r = 0.0f64;
    let mut worst_t = 0.0f64;
    for _ in 0..20 {
        let src = synth::random_cloud(400, Vec3::new(1.0, 0.6, 0.3), &mut rng);
        let diam = src.diameter();
        let axis = Vec3::new(rng.normal(), rng.normal(), rng.normal()).normalize();
        let angle = rng.uniform(0.0, 10f64.to_radians());
        let dir = Vec3::new(rng.normal(), rng.normal(), rng.normal()).normalize();
        let t = dir * rng.uniform(0.0, 0.1 * diam);
        let truth = Pose::from_axis_angle(axis, angle, t);
        let dst = PointCloud::new(src.points.iter().map(|p| truth.apply(p)).collect()).unwrap();
        let (pose, _) = icp_align(&src, &dst, IcpConfig::default()).map_err(|e| e.to_string())?;
        worst_r = worst_r.max(pose.compose(&truth.inverse()).angle());
        worst_t = worst_t.max((pose.translation - truth.translation).norm());
    }
    check(
        worst_r < 1e-4 && worst_t < 1e-4,
        format!("20 trials: max rotation error {worst_r:.2e} rad, max translation error {worst_t:.2e}"),
    )
}

fn c12_box_reconstruction() -> Outcome {
    let room = BoxRoom::new(4.0, 3.0, 5.0);
    let intr = CameraIntrinsics::new(40.0, 40.0, 32.0, 24.0, 65, 49).unwrap();
    let gray = ImageBuffer::gray(65, 49, 0.5);
    // round trip every rendered frame through canonical space first
    let frames: Vec<Frame> = synth::box_room_frames(&room, &intr)
        .into_iter()
        .map(|f| {
            let b = canonicalize_label(&f.depth, &gray, &f.intr, 1000.0).unwrap();
            Frame {
                depth: decanonicalize_label(&b.depth_c, b.omega_d),
                ..f
            }
        })
        .collect();
    let fused = fuse_frames(&frames, 1).map_err(|e| e.to_string())?;
    let oracle = room.ray_cast_cloud(&intr, &synth::box_room_poses());
    let m = chamfer_fscore_with(&fused, &oracle, 0.05, Exec::Parallel).map_err(|e| e.to_string())?;
    // the center pixels of the forward and backward views hit the two z walls
    let center = 24 * 65 + 32;
    let per_frame = 65 * 49;
    let edge = measure_distance(&fused, center, 2 * per_frame + center).map_err(|e| e.to_string())?;
    let edge_err = (edge - 5.0).abs();
    check(
        m.chamfer_l1 < 1e-6 && m.fscore == 1.0 && edge_err < 1e-9,
        format!(
            "{} fused points; chamfer {:.2e}, F(0.05) {}; measured z edge {edge} (error {edge_err:.2e})",
            fused.len(),
            m.chamfer_l1,
            m.fscore
        ),
    )
}

fn c13_scale_shift() -> Outcome {
    let mut rng = SeededRng::new(1313);
    let mut worst = 0.0f64;
    let mut delta1 = 1.0f64;
    for seed in 0..10 {
        let gt = synth::smooth_depth(40, 30, seed);
        let s0 = rng.uniform(0.2, 5.0);
        let t0 = rng.uniform(-1.0, 1.0);
        let pred = DepthMap {
            values: gt.values.map(|g| (g - t0) / s0),
            valid: gt.valid.clone(),
        };
        let m = all(40, 30);
        let (s, t, aligned) = scale_shift_align(&pred, &gt, &m).map_err(|e| e.to_string())?;
        worst = worst.max((s - s0).abs()).max((t - t0).abs());
        delta1 = delta1.min(depth_metrics(&aligned, &gt, &m).map_err(|e| e.to_string())?.delta1);
    }
    check(
        worst < 1e-9 && delta1 == 1.0,
        format!("10 injected (s, t): max parameter error {worst:.2e}; min aligned delta1 {delta1}"),
    )
}

fn c14_depth_metrics() -> Outcome {
    let gt = synth::smooth_depth(32, 24, 4);
    let m = all(32, 24);
    let a = depth_metrics(&gt.scaled(1.1), &gt, &m).map_err(|e| e.to_string())?;
    let b = depth_metrics(&gt.scaled(1.3), &gt, &m).map_err(|e| e.to_string())?;
    check(
        (a.absrel - 0.1).abs() < 1e-12 && a.delta1 == 1.0 && b.delta1 == 0.0 && b.delta2 == 1.0,
        format!(
            "1.1 gt: absrel {:.15}, delta1 {}; 1.3 gt: delta1 {}, delta2 {}",
            a.absrel, a.delta1, b.delta1, b.delta2
        ),
    )
}

fn c15_codecs(dir: &Path) -> Outcome {
    let mut rng = SeededRng::new(1515);
    let e = |e: io::IoError| e.to_string();

    let d = f32_depth(37, 23, &mut rng);
    let p = dir.join("d.pfm");
    io::write_pfm_depth(&p, &d).map_err(e)?;
    let back = io::read_pfm_depth(&p).map_err(e)?;
    let pfm_ok = back.valid == d.valid
        && back
            .values
            .iter()
            .zip(d.values.iter())
            .zip(d.valid.iter())
            .all(|((a, b), v)| !v || a.to_bits() == b.to_bits());
    let raw = io::read_bytes(&p).map_err(e)?;
    let again = io::encode_pfm(&io::decode_pfm(&raw).map_err(e)?);
    let pfm_bytes_ok = again == raw;

    let n = 1000;
    let f32v = |rng: &mut SeededRng| Vec3::new(rng.normal() as f32 as f64, rng.normal() as f32 as f64, rng.normal() as f32 as f64);
    let cloud = PointCloud {
        points: (0..n).map(|_| f32v(&mut rng)).collect(),
        normals: Some((0..n).map(|_| f32v(&mut rng)).collect()),
        colors: Some(
            (0..n)
                .map(|_| [rng.below(256) as u8, rng.below(256) as u8, rng.below(256) as u8])
                .collect(),
        ),
    };
    let p = dir.join("c.ply");
    io::write_ply(&p, &cloud, io::PlyFormat::BinaryLittleEndian).map_err(e)?;
    let back = io::read_ply(&p).map_err(e)?;
    let bits = |c: &PointCloud| -> Vec<u64> {
        let mut v: Vec<u64> = c
            .points
            .iter()
            .flat_map(|p| p.iter().map(|x| x.to_bits()).collect::<Vec<_>>())
            .collect();
        v.extend(
            c.normals
                .iter()
                .flatten()
                .flat_map(|p| p.iter().map(|x| x.to_bits()).collect::<Vec<_>>()),
        );
        v
    };
    let ply_ok = bits(&back) == bits(&cloud) && back.colors == cloud.colors;

    let d = DepthMap::from_fn(31, 17, |_, _| (rng.unit() > 0.1).then(|| rng.uniform(0.1, 250.0)));
    let p = dir.join("d.png");
    io::write_png16_depth(&p, &d).map_err(e)?;
    let back = io::read_png16_depth(&p).map_err(e)?;
    let mut worst = 0.0f64;
    for i in 0..d.values.len() {
        if d.valid.as_slice()[i] != back.valid.as_slice()[i] {
            return Err("png16 mask changed".into());
        }
        if d.valid.as_slice()[i] {
            worst = worst.max((d.values.as_slice()[i] - back.values.as_slice()[i]).abs());
        }
    }
    check(
        pfm_ok && pfm_bytes_ok && ply_ok && worst <= 0.5 / 256.0,
        format!(
            "pfm bitwise {pfm_ok} (bytes stable {pfm_bytes_ok}); binary ply bitwise {ply_ok}; png16 max error {worst:.2e} m (bound 1/512)"
        ),
    )
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<Criterion> = vec![
        ("canonical transform round trips", Box::new(c01_cstm_round_trips)),
        ("focal ambiguity resolved in canonical space", Box::new(c02_focal_ambiguity)),
        ("pixel size invariance", Box::new(c03_pixel_size_invariance)),
        ("normals are scale agnostic", Box::new(c04_normal_scale_agnostic)),
        ("loss zeros and invariances", Box::new(c05_loss_zeros_invariances)),
        ("gradient checks", Box::new(c06_gradient_checks)),
        ("schedule arithmetic", Box::new(c07_schedule)),
        ("refinement demo", Box::new(c08_refinement)),
        ("normal protocol discrepancy", Box::new(c09_protocols)),
        ("chamfer and F-score vs brute force", Box::new(c10_chamfer_oracle)),
        ("ICP recovers rigid transforms", Box::new(c11_icp)),
        ("synthetic box reconstruction", Box::new(c12_box_reconstruction)),
        ("scale-shift alignment", Box::new(c13_scale_shift)),
        ("depth metric closed forms", Box::new(c14_depth_metrics)),
        ("codec round trips", Box::new(move || c15_codecs(dir.path()))),
    ];
    let mut failed = 0;
    let start = Instant::now();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let ms = t.elapsed().as_millis();
        match outcome {
            Ok(d) => println!("PASS {:>2} {name} ({ms} ms): {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({ms} ms): {d}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1} s",
        criteria.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
