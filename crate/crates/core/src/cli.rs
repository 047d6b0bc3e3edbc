//! The `canodepth` command-line tool.
//!
//! Every subcommand writes a JSON report (to stdout, or to `--out`). Exit
//! status is 0 on success, 1 when inputs are unreadable or invalid and 2 on
//! usage errors; failures print `{"error": {"kind", "message"}}` on stderr.
//!
//! Depth inputs ending in `.png` are read as 16-bit PNG (1/256 m), anything
//! else as single-channel PFM. Normal maps are three-channel PFM.

use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::camera::{canonicalize_image, canonicalize_label, CameraIntrinsics, CanonicalMeta};
use crate::eval::{
    chamfer_fscore_with, depth_metrics_dataset, evaluate_reconstruction, icp_align_with, measure_distance, normal_error_map,
    normal_metrics, scale_shift_align, IcpConfig, Pooling, Protocol, DEFAULT_TAU,
};
use crate::exec::Exec;
use crate::geometry::{depth_to_pointcloud, fuse_frames_with, normals_from_depth_with, transform_cloud, Frame, DEFAULT_NORMAL_WINDOW};
use crate::grid::{DepthMap, Grid, ImageBuffer};
use crate::io::{self, EvalReport, PlyFormat};
use crate::losses::{self, DepthLossConfig, RpnlConfig};
use crate::refine::{consistency_descent_operator, finalize, run_refinement};
use crate::synth::noisy_plane_scene;
use crate::DEFAULT_CANONICAL_FOCAL;

#[derive(Parser, Debug)]
#[command(name = "canodepth", version, about = "Canonical-camera depth toolkit")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct GlobalOpts {
    /// Seed for every sampled quantity (patches, triplets, synthetic scenes).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Dataset pooling for metrics.
    #[arg(long, global = true, value_enum, default_value_t = ProtocolArg::PixelPooled)]
    protocol: ProtocolArg,
    /// Canonical focal length in pixels.
    #[arg(long = "canonical-focal", global = true, default_value_t = DEFAULT_CANONICAL_FOCAL)]
    canonical_focal: f64,
    /// F-score distance threshold in meters.
    #[arg(long, global = true, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// Clamp depth to `min,max` meters before use.
    #[arg(long, global = true, value_parser = parse_clamp)]
    clamp: Option<(f64, f64)>,
    /// Write the JSON report here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run everything on one thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ProtocolArg {
    PixelPooled,
    SampleMean,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ModeArg {
    Label,
    Image,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum LossKind {
    Silog,
    Rpnl,
    Vnl,
    Depth,
    Angular,
    Dn,
}

fn parse_clamp(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected min,max")?;
    let lo: f64 = a.trim().parse().map_err(|_| format!("bad number {a:?}"))?;
    let hi: f64 = b.trim().parse().map_err(|_| format!("bad number {b:?}"))?;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(format!("need finite min < max, got {lo},{hi}"));
    }
    Ok((lo, hi))
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Map a depth map (and optional image) into canonical camera space.
    Canonicalize {
        #[arg(long, value_enum, default_value_t = ModeArg::Label)]
        mode: ModeArg,
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        /// RGB image (PNG or PPM); a gray image is used when absent.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Canonical depth output (PFM).
        #[arg(long = "output-depth")]
        output_depth: PathBuf,
        /// Transform record (JSON) needed by `decanonicalize`.
        #[arg(long)]
        sidecar: PathBuf,
        /// Canonical image output (three-channel PFM).
        #[arg(long = "output-image")]
        output_image: Option<PathBuf>,
        /// Canonical intrinsics output (JSON).
        #[arg(long = "output-intrinsics")]
        output_intrinsics: Option<PathBuf>,
    },
    /// Restore metric depth from a canonical-space prediction.
    Decanonicalize {
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        sidecar: PathBuf,
        #[arg(long = "output-depth")]
        output_depth: PathBuf,
    },
    /// Least-squares normals from a depth map.
    #[command(name = "depth2normal")]
    Depth2Normal {
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        #[arg(long, default_value_t = DEFAULT_NORMAL_WINDOW)]
        window: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Back-project a depth map to a PLY point cloud.
    #[command(name = "depth2cloud")]
    Depth2Cloud {
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        ascii: bool,
    },
    /// Fuse depth frames with camera-to-world poses into one cloud.
    Fuse {
        #[arg(long, num_args = 1.., required = true)]
        depths: Vec<PathBuf>,
        #[arg(long)]
        intrinsics: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        ascii: bool,
    },
    /// Run the consistency-descent refinement on a seeded noisy plane.
    RefineDemo {
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long = "step-size", default_value_t = 0.5)]
        step_size: f64,
        #[arg(long, default_value_t = 48)]
        width: usize,
        #[arg(long, default_value_t = 36)]
        height: usize,
        #[arg(long = "depth-noise", default_value_t = 0.005)]
        depth_noise: f64,
        #[arg(long = "normal-noise", default_value_t = 0.3)]
        normal_noise: f64,
        /// Finalized depth (PFM).
        #[arg(long = "output-depth")]
        output_depth: Option<PathBuf>,
        /// Finalized normals (PFM).
        #[arg(long = "output-normals")]
        output_normals: Option<PathBuf>,
    },
    /// Evaluate a training loss between two maps.
    Loss {
        #[arg(long, value_enum)]
        kind: LossKind,
        /// Predicted depth, or predicted normals for `angular`.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Ground-truth depth, or ground-truth normals for `angular`.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Normals for `dn`.
        #[arg(long)]
        normals: Option<PathBuf>,
        /// Depth for `dn`.
        #[arg(long)]
        depth: Option<PathBuf>,
        #[arg(long)]
        intrinsics: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        #[arg(long, default_value_t = 1000)]
        triplets: usize,
        #[arg(long, default_value_t = 32)]
        patches: usize,
    },
    /// Depth metrics over one or more prediction/ground-truth pairs.
    EvalDepth {
        #[arg(long, num_args = 1.., required = true)]
        pred: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        gt: Vec<PathBuf>,
        /// Fit scale and shift per image before scoring.
        #[arg(long)]
        align: bool,
    },
    /// Normal metrics over one or more normal-map pairs.
    EvalNormal {
        #[arg(long, num_args = 1.., required = true)]
        pred: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        gt: Vec<PathBuf>,
        /// Also score pixels where either map is invalid.
        #[arg(long = "include-invalid")]
        include_invalid: bool,
    },
    /// Chamfer-l1 and F-score of a reconstruction.
    EvalRecon {
        /// Predicted cloud (PLY). Alternatively give --depths/--intrinsics/--poses.
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long, num_args = 1..)]
        depths: Vec<PathBuf>,
        #[arg(long)]
        intrinsics: Option<PathBuf>,
        #[arg(long)]
        poses: Option<PathBuf>,
        #[arg(long)]
        gt: PathBuf,
        /// Register the prediction to the ground truth with ICP first.
        #[arg(long)]
        icp: bool,
    },
    /// Distance between two points of a cloud.
    Measure {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        a: usize,
        #[arg(long)]
        b: usize,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 1,
        }
    }

    fn to_json(&self) -> String {
        let (kind, message) = match self {
            CliError::Usage(m) => ("usage", m),
            CliError::Data(m) => ("data", m),
        };
        json!({ "error": { "kind": kind, "message": message } }).to_string()
    }
}

fn data(e: impl Display) -> CliError {
    CliError::Data(e.to_string())
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Runs the tool with `argv` (including the program name) on the process's
/// stdout and stderr; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

/// Like [`run`] with explicit output streams.
pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let ce = usage(e.to_string().trim_end());
            let _ = writeln!(err, "{}", ce.to_json());
            return ce.code();
        }
    };
    match dispatch(&cli).and_then(|report| emit(&cli.global, &report, out)) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{}", e.to_json());
            e.code()
        }
    }
}

fn emit(g: &GlobalOpts, report: &EvalReport, out: &mut dyn Write) -> Result<(), CliError> {
    let text = report.to_json().map_err(data)?;
    match &g.out {
        Some(p) => io::write_atomic(p, text.as_bytes()).map_err(data),
        None => out.write_all(text.as_bytes()).map_err(data),
    }
}

fn exec_of(g: &GlobalOpts) -> Exec {
    if g.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn protocol_of(g: &GlobalOpts, exclude_invalid: bool) -> Protocol {
    Protocol {
        pooling: match g.protocol {
            ProtocolArg::PixelPooled => Pooling::PixelPooled,
            ProtocolArg::SampleMean => Pooling::SampleMean,
        },
        exclude_invalid,
    }
}

fn read_depth(path: &Path, g: &GlobalOpts) -> Result<DepthMap, CliError> {
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let d = if is_png {
        io::read_png16_depth(path)
    } else {
        io::read_pfm_depth(path)
    }
    .map_err(data)?;
    Ok(match g.clamp {
        Some((lo, hi)) => d.clamped(lo, hi),
        None => d,
    })
}

fn write_depth(path: &Path, depth: &DepthMap) -> Result<(), CliError> {
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        io::write_png16_depth(path, depth)
    } else {
        io::write_pfm_depth(path, depth)
    }
    .map_err(data)
}

fn read_intr(path: &Path) -> Result<CameraIntrinsics, CliError> {
    io::read_intrinsics(path).map_err(data)
}

fn ply_format(ascii: bool) -> PlyFormat {
    if ascii {
        PlyFormat::Ascii
    } else {
        PlyFormat::BinaryLittleEndian
    }
}

fn metric<T: serde::Serialize>(r: &mut EvalReport, name: &str, v: &T) -> Result<(), CliError> {
    r.set_metric(name, v).map_err(data)
}

fn dispatch(cli: &Cli) -> Result<EvalReport, CliError> {
    let g = &cli.global;
    let exec = exec_of(g);
    match &cli.command {
        Command::Canonicalize {
            mode,
            depth,
            intrinsics,
            image,
            output_depth,
            sidecar,
            output_image,
            output_intrinsics,
        } => {
            let mut r = EvalReport::new("canonicalize");
            let d = read_depth(depth, g)?;
            let k = read_intr(intrinsics)?;
            let img = match image {
                Some(p) => io::read_rgb(p).map_err(data)?,
                None => ImageBuffer::gray(d.width(), d.height(), 0.5),
            };
            let bundle = match mode {
                ModeArg::Label => canonicalize_label(&d, &img, &k, g.canonical_focal),
                ModeArg::Image => canonicalize_image(&d, &img, &k, g.canonical_focal),
            }
            .map_err(data)?;
            io::write_pfm_depth(output_depth, &bundle.depth_c).map_err(data)?;
            let meta = bundle.meta();
            io::write_atomic(sidecar, io::to_precise_json(&meta).map_err(data)?.as_bytes()).map_err(data)?;
            if let Some(p) = output_image {
                io::write_pfm_image(p, &bundle.image_c).map_err(data)?;
                r.add_file("output-image", p);
            }
            if let Some(p) = output_intrinsics {
                let f = io::IntrinsicsFile::from(&bundle.intr_c);
                io::write_atomic(p, io::to_precise_json(&f).map_err(data)?.as_bytes()).map_err(data)?;
                r.add_file("output-intrinsics", p);
            }
            r.add_file("depth", depth);
            r.add_file("intrinsics", intrinsics);
            r.add_file("output-depth", output_depth);
            r.add_file("sidecar", sidecar);
            metric(&mut r, "transform", &meta)?;
            Ok(r)
        }
        Command::Decanonicalize {
            depth,
            sidecar,
            output_depth,
        } => {
            let mut r = EvalReport::new("decanonicalize");
            let pred = io::read_pfm_depth(depth).map_err(data)?;
            let meta: CanonicalMeta = serde_json::from_slice(&io::read_bytes(sidecar).map_err(data)?).map_err(data)?;
            let mut restored = meta.restore(&pred).map_err(data)?;
            if let Some((lo, hi)) = g.clamp {
                restored = restored.clamped(lo, hi);
            }
            write_depth(output_depth, &restored)?;
            r.add_file("depth", depth);
            r.add_file("sidecar", sidecar);
            r.add_file("output-depth", output_depth);
            metric(&mut r, "transform", &meta)?;
            Ok(r)
        }
        Command::Depth2Normal {
            depth,
            intrinsics,
            window,
            output,
        } => {
            let mut r = EvalReport::new("depth2normal");
            let d = read_depth(depth, g)?;
            let k = read_intr(intrinsics)?;
            let n = normals_from_depth_with(&d, &k, *window, exec).map_err(data)?;
            io::write_pfm_normals(output, &n).map_err(data)?;
            r.add_file("depth", depth);
            r.add_file("intrinsics", intrinsics);
            r.add_file("output", output);
            metric(&mut r, "valid_pixels", &n.valid.count())?;
            Ok(r)
        }
        Command::Depth2Cloud {
            depth,
            intrinsics,
            stride,
            output,
            ascii,
        } => {
            let mut r = EvalReport::new("depth2cloud");
            let d = read_depth(depth, g)?;
            let k = read_intr(intrinsics)?;
            let cloud = depth_to_pointcloud(&d, &k, *stride).map_err(data)?;
            io::write_ply(output, &cloud, ply_format(*ascii)).map_err(data)?;
            r.add_file("depth", depth);
            r.add_file("intrinsics", intrinsics);
            r.add_file("output", output);
            metric(&mut r, "points", &cloud.len())?;
            Ok(r)
        }
        Command::Fuse {
            depths,
            intrinsics,
            poses,
            stride,
            output,
            ascii,
        } => {
            let mut r = EvalReport::new("fuse");
            let frames = load_frames(depths, intrinsics, poses, g)?;
            let cloud = fuse_frames_with(&frames, *stride, exec).map_err(data)?;
            io::write_ply(output, &cloud, ply_format(*ascii)).map_err(data)?;
            for d in depths {
                r.add_file("depth", d);
            }
            r.add_file("intrinsics", intrinsics);
            r.add_file("poses", poses);
            r.add_file("output", output);
            metric(&mut r, "points", &cloud.len())?;
            Ok(r)
        }
        Command::RefineDemo {
            steps,
            step_size,
            width,
            height,
            depth_noise,
            normal_noise,
            output_depth,
            output_normals,
        } => {
            let mut r = EvalReport::new("refine-demo");
            r.seed = Some(g.seed);
            if *width < 5 || *height < 5 {
                return Err(usage("refine-demo needs at least a 5x5 grid"));
            }
            let scene = noisy_plane_scene(*width, *height, *depth_noise, *normal_noise, g.seed);
            let meta = CanonicalMeta {
                mode: crate::camera::CanonicalMode::Label,
                omega_d: 1.0,
                omega_r: 1.0,
                canonical_intrinsics: scene.intr,
                original_intrinsics: scene.intr,
                original_size: scene.intr.size(),
            };
            let mut op = consistency_descent_operator(*step_size, scene.intr, &meta).map_err(data)?;
            op.exec = exec;
            let traj = run_refinement(scene.state, &op, *steps).map_err(data)?;
            let curve: Vec<f64> = traj.iter().map(|s| op.consistency(s)).collect::<Result<_, _>>().map_err(data)?;
            let last = traj.last().expect("nonempty");
            let (d, n) = finalize(last, 1, &meta).map_err(data)?;
            if let Some(p) = output_depth {
                io::write_pfm_depth(p, &d).map_err(data)?;
                r.add_file("output-depth", p);
            }
            if let Some(p) = output_normals {
                io::write_pfm_normals(p, &n).map_err(data)?;
                r.add_file("output-normals", p);
            }
            metric(&mut r, "consistency", &curve)?;
            metric(&mut r, "steps", steps)?;
            metric(&mut r, "step_size", step_size)?;
            Ok(r)
        }
        Command::Loss {
            kind,
            pred,
            gt,
            normals,
            depth,
            intrinsics,
            lambda,
            triplets,
            patches,
        } => {
            let mut r = EvalReport::new("loss");
            let need = |p: &Option<PathBuf>, name: &str| p.clone().ok_or_else(|| usage(format!("--kind {kind:?} needs --{name}")));
            let value: serde_json::Value = match kind {
                LossKind::Angular => {
                    let (pp, gp) = (need(pred, "pred")?, need(gt, "gt")?);
                    let pn = io::read_pfm_normals(&pp).map_err(data)?;
                    let gn = io::read_pfm_normals(&gp).map_err(data)?;
                    let mask = Grid::filled(pn.width(), pn.height(), true);
                    r.add_file("pred", &pp);
                    r.add_file("gt", &gp);
                    json!(losses::normal_angular_loss(&pn, &gn, &mask).map_err(data)?)
                }
                LossKind::Dn => {
                    let (np, dp, kp) = (need(normals, "normals")?, need(depth, "depth")?, need(intrinsics, "intrinsics")?);
                    let n = io::read_pfm_normals(&np).map_err(data)?;
                    let d = read_depth(&dp, g)?;
                    let k = read_intr(&kp)?;
                    r.add_file("normals", &np);
                    r.add_file("depth", &dp);
                    r.add_file("intrinsics", &kp);
                    json!(losses::consistency_dn_with(&n, &d, &k, DEFAULT_NORMAL_WINDOW, exec).map_err(data)?)
                }
                _ => {
                    let (pp, gp) = (need(pred, "pred")?, need(gt, "gt")?);
                    let p = read_depth(&pp, g)?;
                    let t = read_depth(&gp, g)?;
                    r.add_file("pred", &pp);
                    r.add_file("gt", &gp);
                    let mask = Grid::filled(p.width(), p.height(), true);
                    let rpnl_cfg = RpnlConfig {
                        num_patches: *patches,
                        seed: g.seed,
                        ..RpnlConfig::default()
                    };
                    r.seed = Some(g.seed);
                    match kind {
                        LossKind::Silog => json!(losses::silog(&p, &t, &mask, *lambda).map_err(data)?),
                        LossKind::Rpnl => json!(losses::rpnl(&p, &t, &mask, &rpnl_cfg).map_err(data)?),
                        LossKind::Vnl | LossKind::Depth => {
                            let kp = need(intrinsics, "intrinsics")?;
                            let k = read_intr(&kp)?;
                            r.add_file("intrinsics", &kp);
                            if *kind == LossKind::Vnl {
                                json!(losses::vnl(&p, &t, &k, *triplets, g.seed).map_err(data)?)
                            } else {
                                let cfg = DepthLossConfig {
                                    silog_lambda: *lambda,
                                    rpnl_cfg,
                                    vnl_triplets: *triplets,
                                    vnl_seed: g.seed,
                                    ..DepthLossConfig::default()
                                };
                                json!(losses::depth_loss(&p, &t, &mask, &k, &cfg).map_err(data)?)
                            }
                        }
                        LossKind::Angular | LossKind::Dn => unreachable!(),
                    }
                }
            };
            metric(&mut r, "kind", &format!("{kind:?}").to_lowercase())?;
            metric(&mut r, "value", &value)?;
            Ok(r)
        }
        Command::EvalDepth { pred, gt, align } => {
            if pred.len() != gt.len() {
                return Err(usage(format!("{} predictions but {} ground truths", pred.len(), gt.len())));
            }
            let mut r = EvalReport::new("eval-depth");
            let protocol = protocol_of(g, true);
            r.protocol = Some(protocol);
            let mut items = Vec::with_capacity(pred.len());
            let mut fits = Vec::new();
            for (pp, gp) in pred.iter().zip(gt) {
                let mut p = read_depth(pp, g)?;
                let t = read_depth(gp, g)?;
                let mask = Grid::filled(t.width(), t.height(), true);
                if *align {
                    let (s, sh, aligned) = scale_shift_align(&p, &t, &mask).map_err(data)?;
                    fits.push(json!({ "scale": s, "shift": sh }));
                    p = aligned;
                }
                r.add_file("pred", pp);
                r.add_file("gt", gp);
                items.push((p, t, mask));
            }
            let m = depth_metrics_dataset(&items, protocol.pooling).map_err(data)?;
            metric(&mut r, "depth", &m)?;
            if *align {
                metric(&mut r, "alignment", &fits)?;
            }
            Ok(r)
        }
        Command::EvalNormal { pred, gt, include_invalid } => {
            if pred.len() != gt.len() {
                return Err(usage(format!("{} predictions but {} ground truths", pred.len(), gt.len())));
            }
            let mut r = EvalReport::new("eval-normal");
            let protocol = protocol_of(g, !include_invalid);
            r.protocol = Some(protocol);
            let mut maps = Vec::with_capacity(pred.len());
            for (pp, gp) in pred.iter().zip(gt) {
                let p = io::read_pfm_normals(pp).map_err(data)?;
                let t = io::read_pfm_normals(gp).map_err(data)?;
                let mask = Grid::filled(t.width(), t.height(), true);
                maps.push(normal_error_map(&p, &t, &mask).map_err(data)?);
                r.add_file("pred", pp);
                r.add_file("gt", gp);
            }
            let m = normal_metrics(&maps, protocol).map_err(data)?;
            metric(&mut r, "normal", &m)?;
            Ok(r)
        }
        Command::EvalRecon {
            pred,
            depths,
            intrinsics,
            poses,
            gt,
            icp,
        } => {
            let mut r = EvalReport::new("eval-recon");
            let gt_cloud = io::read_ply(gt).map_err(data)?;
            r.add_file("gt", gt);
            let m = match (pred, depths.is_empty()) {
                (Some(p), true) => {
                    let mut cloud = io::read_ply(p).map_err(data)?;
                    r.add_file("pred", p);
                    if *icp {
                        let (pose, _) = icp_align_with(&cloud, &gt_cloud, IcpConfig::default(), exec).map_err(data)?;
                        cloud = transform_cloud(&cloud, &pose);
                    }
                    chamfer_fscore_with(&cloud, &gt_cloud, g.tau, exec).map_err(data)?
                }
                (None, false) => {
                    let kp = intrinsics.as_ref().ok_or_else(|| usage("--depths needs --intrinsics"))?;
                    let pp = poses.as_ref().ok_or_else(|| usage("--depths needs --poses"))?;
                    let frames = load_frames(depths, kp, pp, g)?;
                    for d in depths {
                        r.add_file("depth", d);
                    }
                    r.add_file("intrinsics", kp);
                    r.add_file("poses", pp);
                    evaluate_reconstruction(&frames, &gt_cloud, g.tau, *icp, exec).map_err(data)?
                }
                _ => return Err(usage("give exactly one of --pred or --depths")),
            };
            metric(&mut r, "tau", &g.tau)?;
            metric(&mut r, "icp", icp)?;
            metric(&mut r, "reconstruction", &m)?;
            Ok(r)
        }
        Command::Measure { cloud, a, b } => {
            let mut r = EvalReport::new("measure");
            let c = io::read_ply(cloud).map_err(data)?;
            let d = measure_distance(&c, *a, *b).map_err(data)?;
            r.add_file("cloud", cloud);
            metric(&mut r, "distance", &d)?;
            Ok(r)
        }
    }
}

fn load_frames(depths: &[PathBuf], intrinsics: &Path, poses: &Path, g: &GlobalOpts) -> Result<Vec<Frame>, CliError> {
    let k = read_intr(intrinsics)?;
    let poses = io::read_poses(poses).map_err(data)?;
    if poses.len() != depths.len() {
        return Err(data(format!("{} depth maps but {} poses", depths.len(), poses.len())));
    }
    depths
        .iter()
        .zip(poses)
        .map(|(p, pose)| {
            Ok(Frame {
                depth: read_depth(p, g)?,
                intr: k,
                pose,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_with(std::iter::once("canodepth").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_2() {
        let (code, _, err) = run_capture(&["bogus"]);
        assert_eq!(code, 2);
        let v: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
        assert_eq!(v["error"]["kind"], "usage");
        assert_eq!(
            run_capture(&["measure", "--clamp", "3,1", "--cloud", "x", "--a", "0", "--b", "0"]).0,
            2
        );
    }

    #[test]
    fn data_errors_exit_1() {
        let (code, _, err) = run_capture(&["measure", "--cloud", "/nonexistent/x.ply", "--a", "0", "--b", "1"]);
        assert_eq!(code, 1);
        let v: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
        assert_eq!(v["error"]["kind"], "data");
    }

    #[test]
    fn refine_demo_reports_curve() {
        let (code, out, _) = run_capture(&["refine-demo", "--steps", "2", "--seed", "5"]);
        assert_eq!(code, 0);
        let r = EvalReport::from_json(&out).unwrap();
        assert_eq!(r.seed, Some(5));
        assert_eq!(r.metrics["consistency"].as_array().unwrap().len(), 4);
    }
}
