//! File codecs and sidecar documents.
//!
//! * PFM (`Pf` one channel, `PF` three channels) is the lossless float
//!   interchange for depth, normals and canonical images. Rows are stored
//!   bottom to top; a negative scale means little-endian. Invalid pixels are
//!   written as NaN and every non-finite value reads back as invalid.
//! * 16-bit PNG depth stores `round_half_up(d · 256)`; 0 means invalid.
//! * PLY point clouds, ascii or binary little-endian.
//! * JSON intrinsics, text pose lists (camera-to-world, row-major `[R|t]`)
//!   and JSON evaluation reports.
//!
//! Writers go through a temporary file in the target directory and rename
//! it into place.

use std::fs;
use std::io::{Cursor, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};
use thiserror::Error;

use crate::camera::{CameraError, CameraIntrinsics, PhysicalCamera};
use crate::eval::Protocol;
use crate::geometry::{orthonormality_error, GeometryError, NormalMap, PointCloud, Pose};
use crate::grid::{DepthMap, Grid, GridError, ImageBuffer};

/// Depth units per meter in 16-bit PNG files.
pub const PNG16_SCALE: f64 = 256.0;
/// Rotation blocks read from pose files must be orthonormal within this.
pub const POSE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes, got {got}")]
    TruncatedPayload { expected: usize, got: usize },
    #[error("unsupported PNG format: {0}")]
    UnsupportedBitDepth(String),
    #[error("expected {expected} channel(s), file has {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("depth {0} m does not fit a 16-bit PNG")]
    DepthOutOfRange(f64),
    #[error("malformed data: {0}")]
    MalformedData(String),
    #[error("pose line {line}: {reason}")]
    BadPose { line: usize, reason: String },
    #[error("png: {0}")]
    Png(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(io_err(path))
}

/// Writes `bytes` to a temporary file next to `path`, then renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.flush().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| io_err(path)(e.error))?;
    Ok(())
}

// ---------------------------------------------------------------- PFM

/// Decoded PFM payload in top-to-bottom row order, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Pfm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

fn header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize), IoError> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(IoError::MalformedHeader("unexpected end of header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the payload
    if i >= bytes.len() {
        return Err(IoError::MalformedHeader("missing payload separator".into()));
    }
    Ok((tokens, i + 1))
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Pfm, IoError> {
    let magic = bytes.get(..2).ok_or_else(|| IoError::MalformedHeader("empty file".into()))?;
    let channels = match magic {
        b"Pf" => 1,
        b"PF" => 3,
        _ => return Err(IoError::MalformedHeader(format!("bad magic {:?}", String::from_utf8_lossy(magic)))),
    };
    let (tokens, offset) = header_tokens(bytes, 4)?;
    if tokens[0].len() != 2 {
        return Err(IoError::MalformedHeader(format!("bad magic {:?}", tokens[0])));
    }
    let dim = |s: &str| {
        s.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| IoError::MalformedHeader(format!("bad dimension {s:?}")))
    };
    let width = dim(&tokens[1])?;
    let height = dim(&tokens[2])?;
    let scale: f64 = tokens[3]
        .parse()
        .ok()
        .filter(|s: &f64| s.is_finite() && *s != 0.0)
        .ok_or_else(|| IoError::MalformedHeader(format!("bad scale {:?}", tokens[3])))?;
    let little = scale < 0.0;
    let n = width * height * channels;
    let payload = &bytes[offset..];
    if payload.len() < n * 4 {
        return Err(IoError::TruncatedPayload {
            expected: n * 4,
            got: payload.len(),
        });
    }
    let mut data = vec![0f32; n];
    let row = width * channels;
    for (r, chunk) in payload[..n * 4].chunks_exact(row * 4).enumerate() {
        let y = height - 1 - r;
        for (k, b) in chunk.chunks_exact(4).enumerate() {
            let b = [b[0], b[1], b[2], b[3]];
            data[y * row + k] = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        }
    }
    Ok(Pfm {
        width,
        height,
        channels,
        data,
    })
}

/// Encodes little-endian (scale `-1`).
pub fn encode_pfm(pfm: &Pfm) -> Vec<u8> {
    let magic = if pfm.channels == 1 { "Pf" } else { "PF" };
    let mut out = format!("{magic}\n{} {}\n-1.0\n", pfm.width, pfm.height).into_bytes();
    let row = pfm.width * pfm.channels;
    for y in (0..pfm.height).rev() {
        for v in &pfm.data[y * row..(y + 1) * row] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn depth_to_pfm(depth: &DepthMap) -> Pfm {
    Pfm {
        width: depth.width(),
        height: depth.height(),
        channels: 1,
        data: depth
            .values
            .iter()
            .zip(depth.valid.iter())
            .map(|(&d, &ok)| if ok { d as f32 } else { f32::NAN })
            .collect(),
    }
}

pub fn pfm_to_depth(pfm: &Pfm) -> Result<DepthMap, IoError> {
    if pfm.channels != 1 {
        return Err(IoError::ChannelMismatch {
            expected: 1,
            got: pfm.channels,
        });
    }
    let mut it = pfm.data.iter();
    Ok(DepthMap::from_fn(pfm.width, pfm.height, |_, _| {
        let v = *it.next().expect("sized");
        v.is_finite().then_some(v as f64)
    }))
}

pub fn read_pfm_depth(path: &Path) -> Result<DepthMap, IoError> {
    pfm_to_depth(&decode_pfm(&read_bytes(path)?)?)
}

pub fn write_pfm_depth(path: &Path, depth: &DepthMap) -> Result<(), IoError> {
    write_atomic(path, &encode_pfm(&depth_to_pfm(depth)))
}

fn rgb_pfm(width: usize, height: usize, px: impl Iterator<Item = [f32; 3]>) -> Pfm {
    Pfm {
        width,
        height,
        channels: 3,
        data: px.flatten().collect(),
    }
}

/// Normals as camera-space components; invalid pixels are NaN.
pub fn normals_to_pfm(normals: &NormalMap) -> Pfm {
    rgb_pfm(
        normals.width(),
        normals.height(),
        normals.vectors.iter().zip(normals.valid.iter()).map(
            |(n, &ok)| {
                if ok {
                    [n.x as f32, n.y as f32, n.z as f32]
                } else {
                    [f32::NAN; 3]
                }
            },
        ),
    )
}

/// A pixel is valid when all components are finite and the vector is unit
/// length within float32 tolerance. Stored components are kept as-is.
pub fn pfm_to_normals(pfm: &Pfm) -> Result<NormalMap, IoError> {
    if pfm.channels != 3 {
        return Err(IoError::ChannelMismatch {
            expected: 3,
            got: pfm.channels,
        });
    }
    let mut vecs = Vec::with_capacity(pfm.width * pfm.height);
    let mut valid = Vec::with_capacity(pfm.width * pfm.height);
    for c in pfm.data.chunks_exact(3) {
        let v = Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64);
        let ok = v.iter().all(|x| x.is_finite()) && (v.norm() - 1.0).abs() < 1e-5;
        vecs.push(if ok { v } else { Vector3::zeros() });
        valid.push(ok);
    }
    Ok(NormalMap {
        vectors: Grid::from_vec(pfm.width, pfm.height, vecs)?,
        valid: Grid::from_vec(pfm.width, pfm.height, valid)?,
    })
}

pub fn read_pfm_normals(path: &Path) -> Result<NormalMap, IoError> {
    pfm_to_normals(&decode_pfm(&read_bytes(path)?)?)
}

pub fn write_pfm_normals(path: &Path, normals: &NormalMap) -> Result<(), IoError> {
    write_atomic(path, &encode_pfm(&normals_to_pfm(normals)))
}

pub fn write_pfm_image(path: &Path, image: &ImageBuffer) -> Result<(), IoError> {
    let pfm = rgb_pfm(
        image.width(),
        image.height(),
        image.pixels.iter().map(|p| [p[0] as f32, p[1] as f32, p[2] as f32]),
    );
    write_atomic(path, &encode_pfm(&pfm))
}

// ---------------------------------------------------------------- PNG16

/// Stored 16-bit value for a depth in meters (round half up). Invalid or
/// non-positive depths store 0.
pub fn quantize_png16(depth: f64) -> Result<u16, IoError> {
    if !(depth > 0.0) {
        return Ok(0);
    }
    let q = (depth * PNG16_SCALE + 0.5).floor();
    if q > u16::MAX as f64 {
        return Err(IoError::DepthOutOfRange(depth));
    }
    Ok(q as u16)
}

pub fn encode_png16_depth(depth: &DepthMap) -> Result<Vec<u8>, IoError> {
    let mut raw = Vec::with_capacity(depth.values.len() * 2);
    for (&d, &ok) in depth.values.iter().zip(depth.valid.iter()) {
        let q = if ok { quantize_png16(d)? } else { 0 };
        raw.extend_from_slice(&q.to_be_bytes());
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, depth.width() as u32, depth.height() as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut w = enc.write_header().map_err(|e| IoError::Png(e.to_string()))?;
        w.write_image_data(&raw).map_err(|e| IoError::Png(e.to_string()))?;
        w.finish().map_err(|e| IoError::Png(e.to_string()))?;
    }
    Ok(out)
}

fn decode_png_raw(bytes: &[u8]) -> Result<(png::OutputInfo, Vec<u8>), IoError> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| IoError::Png(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| IoError::Png("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| IoError::Png(e.to_string()))?;
    buf.truncate(info.line_size * info.height as usize);
    Ok((info, buf))
}

pub fn decode_png16_depth(bytes: &[u8]) -> Result<DepthMap, IoError> {
    let (info, buf) = decode_png_raw(bytes)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(IoError::UnsupportedBitDepth(format!(
            "{:?} {:?}, expected 16-bit grayscale",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    Ok(DepthMap::from_fn(w, h, |x, y| {
        let o = y * info.line_size + 2 * x;
        let q = u16::from_be_bytes([buf[o], buf[o + 1]]);
        (q != 0).then(|| q as f64 / PNG16_SCALE)
    }))
}

pub fn read_png16_depth(path: &Path) -> Result<DepthMap, IoError> {
    decode_png16_depth(&read_bytes(path)?)
}

pub fn write_png16_depth(path: &Path, depth: &DepthMap) -> Result<(), IoError> {
    write_atomic(path, &encode_png16_depth(depth)?)
}

// ---------------------------------------------------------------- RGB input

fn decode_png_rgb(bytes: &[u8]) -> Result<ImageBuffer, IoError> {
    let (info, buf) = decode_png_raw(bytes)?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(IoError::UnsupportedBitDepth("indexed color".into()));
        }
    };
    let (bytes_per, max) = match info.bit_depth {
        png::BitDepth::Eight => (1, 255.0),
        png::BitDepth::Sixteen => (2, 65535.0),
        d => return Err(IoError::UnsupportedBitDepth(format!("{d:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let sample = |o: usize| {
        if bytes_per == 1 {
            buf[o] as f64 / max
        } else {
            u16::from_be_bytes([buf[o], buf[o + 1]]) as f64 / max
        }
    };
    let pixels = Grid::from_fn(w, h, |x, y| {
        let o = y * info.line_size + x * channels * bytes_per;
        if channels >= 3 {
            [sample(o), sample(o + bytes_per), sample(o + 2 * bytes_per)]
        } else {
            [sample(o); 3]
        }
    });
    Ok(ImageBuffer { pixels })
}

fn decode_ppm(bytes: &[u8]) -> Result<ImageBuffer, IoError> {
    if bytes.get(..2) != Some(b"P6") {
        return Err(IoError::MalformedHeader("expected P6".into()));
    }
    let (tokens, offset) = header_tokens(bytes, 4)?;
    let num = |s: &str| {
        s.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| IoError::MalformedHeader(format!("bad number {s:?}")))
    };
    let (w, h, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
    if maxval > 65535 {
        return Err(IoError::MalformedHeader(format!("maxval {maxval}")));
    }
    let bytes_per = if maxval < 256 { 1 } else { 2 };
    let need = w * h * 3 * bytes_per;
    let payload = &bytes[offset..];
    if payload.len() < need {
        return Err(IoError::TruncatedPayload {
            expected: need,
            got: payload.len(),
        });
    }
    let sample = |o: usize| {
        let v = if bytes_per == 1 {
            payload[o] as f64
        } else {
            u16::from_be_bytes([payload[o], payload[o + 1]]) as f64
        };
        (v / maxval as f64).min(1.0)
    };
    let pixels = Grid::from_fn(w, h, |x, y| {
        let o = (y * w + x) * 3 * bytes_per;
        [sample(o), sample(o + bytes_per), sample(o + 2 * bytes_per)]
    });
    Ok(ImageBuffer { pixels })
}

/// Reads an 8/16-bit PNG or a binary PPM as RGB in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<ImageBuffer, IoError> {
    let bytes = read_bytes(path)?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png_rgb(&bytes)
    } else {
        decode_ppm(&bytes)
    }
}

// ---------------------------------------------------------------- PLY

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Scalar> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Field {
    Pos(usize),
    Normal(usize),
    Color(usize),
    Skip,
}

struct PlyHeader {
    format: PlyFormat,
    count: usize,
    props: Vec<(Scalar, Field)>,
    body: usize,
}

fn parse_ply_header(bytes: &[u8]) -> Result<PlyHeader, IoError> {
    let bad = |m: &str| IoError::MalformedHeader(m.to_string());
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let rest = &bytes[pos..];
        let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing end_header"))?;
        let line = String::from_utf8_lossy(&rest[..nl]).trim_end_matches('\r').trim().to_string();
        pos += nl + 1;
        if line == "end_header" {
            break;
        }
        lines.push(line);
    }
    if lines.first().map(String::as_str) != Some("ply") {
        return Err(bad("missing ply magic"));
    }
    let mut format = None;
    let mut count = None;
    let mut props = Vec::new();
    let mut in_vertex = false;
    let mut seen_vertex = false;
    for line in &lines[1..] {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", f, _] => {
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => return Err(IoError::MalformedHeader(format!("unsupported format {other}"))),
                })
            }
            ["element", name, n] => {
                let n: usize = n.parse().map_err(|_| bad("bad element count"))?;
                in_vertex = *name == "vertex";
                if in_vertex {
                    count = Some(n);
                    seen_vertex = true;
                } else if !seen_vertex && n > 0 {
                    return Err(IoError::MalformedHeader(format!("element {name} before vertex")));
                }
            }
            ["property", "list", ..] => {
                if in_vertex {
                    return Err(bad("list property in vertex element"));
                }
            }
            ["property", ty, name] => {
                if !in_vertex {
                    continue;
                }
                let s = Scalar::parse(ty).ok_or_else(|| IoError::MalformedHeader(format!("unknown type {ty}")))?;
                let field = match *name {
                    "x" => Field::Pos(0),
                    "y" => Field::Pos(1),
                    "z" => Field::Pos(2),
                    "nx" => Field::Normal(0),
                    "ny" => Field::Normal(1),
                    "nz" => Field::Normal(2),
                    "red" => Field::Color(0),
                    "green" => Field::Color(1),
                    "blue" => Field::Color(2),
                    other => {
                        log::warn!("ignoring unsupported vertex property {other:?}");
                        Field::Skip
                    }
                };
                props.push((s, field));
            }
            _ => return Err(IoError::MalformedHeader(format!("unexpected line {line:?}"))),
        }
    }
    let format = format.ok_or_else(|| bad("missing format line"))?;
    let count = count.ok_or_else(|| bad("missing vertex element"))?;
    for axis in 0..3 {
        if !props.iter().any(|p| p.1 == Field::Pos(axis)) {
            return Err(bad("vertex element lacks x, y or z"));
        }
    }
    Ok(PlyHeader {
        format,
        count,
        props,
        body: pos,
    })
}

pub fn decode_ply(bytes: &[u8]) -> Result<PointCloud, IoError> {
    let hdr = parse_ply_header(bytes)?;
    let has = |f: fn(usize) -> Field| (0..3).all(|i| hdr.props.iter().any(|p| p.1 == f(i)));
    let has_normals = has(Field::Normal);
    let has_colors = has(Field::Color);
    let mut points = Vec::with_capacity(hdr.count);
    let mut normals = Vec::new();
    let mut colors = Vec::new();
    let mut push = |vals: &[f64]| {
        let mut p = Vector3::zeros();
        let mut n = Vector3::zeros();
        let mut c = [0u8; 3];
        for ((_, field), &v) in hdr.props.iter().zip(vals) {
            match *field {
                Field::Pos(i) => p[i] = v,
                Field::Normal(i) => n[i] = v,
                Field::Color(i) => c[i] = v.clamp(0.0, 255.0) as u8,
                Field::Skip => {}
            }
        }
        points.push(p);
        if has_normals {
            normals.push(n);
        }
        if has_colors {
            colors.push(c);
        }
    };
    let body = &bytes[hdr.body..];
    let mut vals = vec![0.0; hdr.props.len()];
    match hdr.format {
        PlyFormat::Ascii => {
            let text = std::str::from_utf8(body).map_err(|_| IoError::MalformedData("non-utf8 ascii body".into()))?;
            let mut lines = text.lines().filter(|l| !l.trim().is_empty());
            for k in 0..hdr.count {
                let line = lines
                    .next()
                    .ok_or_else(|| IoError::MalformedData(format!("expected {} vertices, found {k}", hdr.count)))?;
                let toks: Vec<&str> = line.split_whitespace().collect();
                if toks.len() < vals.len() {
                    return Err(IoError::MalformedData(format!("vertex {k}: too few values")));
                }
                for ((slot, tok), (ty, _)) in vals.iter_mut().zip(&toks).zip(&hdr.props) {
                    let parsed = if *ty == Scalar::F32 {
                        tok.parse::<f32>().ok().map(f64::from)
                    } else {
                        tok.parse::<f64>().ok()
                    };
                    *slot = parsed.ok_or_else(|| IoError::MalformedData(format!("vertex {k}: bad number {tok:?}")))?;
                }
                push(&vals);
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let stride: usize = hdr.props.iter().map(|p| p.0.size()).sum();
            let need = stride * hdr.count;
            if body.len() < need {
                return Err(IoError::TruncatedPayload {
                    expected: need,
                    got: body.len(),
                });
            }
            for rec in body[..need].chunks_exact(stride) {
                let mut o = 0;
                for (slot, (ty, _)) in vals.iter_mut().zip(&hdr.props) {
                    *slot = ty.read_le(&rec[o..]);
                    o += ty.size();
                }
                push(&vals);
            }
        }
    }
    Ok(PointCloud {
        points,
        colors: has_colors.then_some(colors),
        normals: has_normals.then_some(normals),
    })
}

/// Positions and normals are written as float32, colors as uchar.
pub fn encode_ply(cloud: &PointCloud, format: PlyFormat) -> Vec<u8> {
    let mut out = String::from("ply\n");
    out += match format {
        PlyFormat::Ascii => "format ascii 1.0\n",
        PlyFormat::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    };
    out += &format!("element vertex {}\n", cloud.len());
    out += "property float x\nproperty float y\nproperty float z\n";
    if cloud.normals.is_some() {
        out += "property float nx\nproperty float ny\nproperty float nz\n";
    }
    if cloud.colors.is_some() {
        out += "property uchar red\nproperty uchar green\nproperty uchar blue\n";
    }
    out += "end_header\n";
    let mut bytes = out.into_bytes();
    for i in 0..cloud.len() {
        let mut floats: Vec<f32> = cloud.points[i].iter().map(|&v| v as f32).collect();
        if let Some(ns) = &cloud.normals {
            floats.extend(ns[i].iter().map(|&v| v as f32));
        }
        let color = cloud.colors.as_ref().map(|c| c[i]);
        match format {
            PlyFormat::Ascii => {
                let mut line: Vec<String> = floats.iter().map(|v| v.to_string()).collect();
                if let Some(c) = color {
                    line.extend(c.iter().map(|v| v.to_string()));
                }
                bytes.extend_from_slice(line.join(" ").as_bytes());
                bytes.push(b'\n');
            }
            PlyFormat::BinaryLittleEndian => {
                for v in floats {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                if let Some(c) = color {
                    bytes.extend_from_slice(&c);
                }
            }
        }
    }
    bytes
}

pub fn read_ply(path: &Path) -> Result<PointCloud, IoError> {
    let cloud = decode_ply(&read_bytes(path)?)?;
    cloud.validate()?;
    Ok(cloud)
}

pub fn write_ply(path: &Path, cloud: &PointCloud, format: PlyFormat) -> Result<(), IoError> {
    write_atomic(path, &encode_ply(cloud, format))
}

// ---------------------------------------------------------------- JSON sidecars

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicsFile {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focal_um: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_size_um: Option<f64>,
}

impl IntrinsicsFile {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics, CameraError> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
    }

    /// Physical camera, when both optional fields are present.
    pub fn physical(&self) -> Result<Option<PhysicalCamera>, CameraError> {
        match (self.focal_um, self.pixel_size_um) {
            (Some(f), Some(p)) => PhysicalCamera::new(f, p).map(Some),
            _ => Ok(None),
        }
    }
}

impl From<&CameraIntrinsics> for IntrinsicsFile {
    fn from(k: &CameraIntrinsics) -> Self {
        Self {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            focal_um: None,
            pixel_size_um: None,
        }
    }
}

pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics, IoError> {
    let file: IntrinsicsFile = serde_json::from_slice(&read_bytes(path)?)?;
    Ok(file.intrinsics()?)
}

/// Serializes floats with 17 significant digits (`1.0000000000000000e-1`)
/// so every value survives a text round trip; layout is pretty-printed.
pub struct PreciseFormatter<'a>(PrettyFormatter<'a>);

impl Default for PreciseFormatter<'_> {
    fn default() -> Self {
        Self(PrettyFormatter::new())
    }
}

impl Formatter for PreciseFormatter<'_> {
    fn write_f64<W: ?Sized + std::io::Write>(&mut self, w: &mut W, value: f64) -> std::io::Result<()> {
        write!(w, "{value:.16e}")
    }
    fn write_f32<W: ?Sized + std::io::Write>(&mut self, w: &mut W, value: f32) -> std::io::Result<()> {
        self.write_f64(w, value as f64)
    }
    fn begin_array<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + std::io::Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + std::io::Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_precise_json<T: Serialize>(value: &T) -> Result<String, IoError> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, PreciseFormatter::default());
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("json is utf-8"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub role: String,
    pub path: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: String,
    pub command: String,
    pub protocol: Option<Protocol>,
    pub seed: Option<u64>,
    pub files: Vec<ManifestEntry>,
    pub metrics: serde_json::Map<String, serde_json::Value>,
}

impl EvalReport {
    pub fn new(command: &str) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            protocol: None,
            seed: None,
            files: Vec::new(),
            metrics: serde_json::Map::new(),
        }
    }

    /// Records an input or output file with its size on disk (0 if absent).
    pub fn add_file(&mut self, role: &str, path: &Path) {
        let bytes = fs::metadata(path).map(|m| m.len()).unwrap_or(0);
        self.files.push(ManifestEntry {
            role: role.to_string(),
            path: path.display().to_string(),
            bytes,
        });
    }

    pub fn set_metric<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), IoError> {
        self.metrics.insert(name.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, IoError> {
        to_precise_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self, IoError> {
        Ok(serde_json::from_str(text)?)
    }
}

// ---------------------------------------------------------------- poses

/// Parses one camera-to-world pose per non-empty line: 12 numbers forming
/// the row-major 3×4 matrix `[R|t]`. Lines starting with `#` are skipped.
/// Rotations must be orthonormal within [`POSE_TOLERANCE`] and are snapped
/// to the nearest rotation.
pub fn parse_poses(text: &str) -> Result<Vec<Pose>, IoError> {
    let mut poses = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| IoError::BadPose { line: k + 1, reason };
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| bad(format!("bad number {t:?}"))))
            .collect::<Result<_, _>>()?;
        if vals.len() != 12 || vals.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("expected 12 finite numbers, got {}", vals.len())));
        }
        let r = Matrix3::new(vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10]);
        let t = Vector3::new(vals[3], vals[7], vals[11]);
        let err = orthonormality_error(&r);
        if err > POSE_TOLERANCE {
            return Err(bad(format!("rotation not orthonormal (error {err:e})")));
        }
        poses.push(Pose::new_snapped(r, t, POSE_TOLERANCE).map_err(|e| bad(e.to_string()))?);
    }
    Ok(poses)
}

pub fn format_poses(poses: &[Pose]) -> String {
    let mut out = String::new();
    for p in poses {
        let r = &p.rotation;
        let t = &p.translation;
        let row = [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ];
        out += &row.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ");
        out.push('\n');
    }
    out
}

pub fn read_poses(path: &Path) -> Result<Vec<Pose>, IoError> {
    let bytes = read_bytes(path)?;
    parse_poses(&String::from_utf8_lossy(&bytes))
}

pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<(), IoError> {
    write_atomic(path, format_poses(poses).as_bytes())
}
