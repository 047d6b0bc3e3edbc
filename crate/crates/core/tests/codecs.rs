use canodepth::geometry::{NormalMap, PointCloud};
use canodepth::grid::{DepthMap, Grid};
use canodepth::io::{self, IoError, PlyFormat};
use canodepth::rng::SeededRng;
use canodepth::Vec3;
use tempfile::TempDir;

fn cloud_with_attrs(n: usize, seed: u64) -> PointCloud {
    let mut rng = SeededRng::new(seed);
    let points = (0..n)
        .map(|_| Vec3::new(rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0), rng.uniform(0.1, 9.0)))
        .collect();
    let normals = (0..n)
        .map(|_| Vec3::new(rng.normal(), rng.normal(), rng.normal()).normalize())
        .collect();
    let colors = (0..n)
        .map(|i| [(i % 256) as u8, (i * 7 % 256) as u8, (i * 13 % 256) as u8])
        .collect();
    PointCloud {
        points,
        colors: Some(colors),
        normals: Some(normals),
    }
}

fn f32_round(v: Vec3) -> Vec3 {
    v.map(|c| c as f32 as f64)
}

#[test]
fn ply_ascii_and_binary_agree() {
    let c = cloud_with_attrs(1000, 5);
    let a = io::decode_ply(&io::encode_ply(&c, PlyFormat::Ascii)).unwrap();
    let b = io::decode_ply(&io::encode_ply(&c, PlyFormat::BinaryLittleEndian)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.colors, c.colors);
    for (p, q) in a.points.iter().zip(&c.points) {
        assert_eq!(*p, f32_round(*q));
    }
    for (p, q) in a.normals.as_ref().unwrap().iter().zip(c.normals.as_ref().unwrap()) {
        assert_eq!(*p, f32_round(*q));
    }
}

#[test]
fn ply_file_round_trip() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("c.ply");
    let c = PointCloud::new(vec![Vec3::new(0.5, -1.25, 3.0), Vec3::new(2.0, 0.0, 1.0)]).unwrap();
    io::write_ply(&path, &c, PlyFormat::BinaryLittleEndian).unwrap();
    assert_eq!(io::read_ply(&path).unwrap(), c);
}

#[test]
fn ply_skips_unknown_properties_and_elements() {
    let text = "ply\nformat ascii 1.0\ncomment hand written\nelement vertex 2\nproperty float x\nproperty float intensity\n\
                property float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n\
                1 9 2 3\n4 9 5 6\n3 0 1 1\n";
    let c = io::decode_ply(text.as_bytes()).unwrap();
    assert_eq!(c.points, vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(4.0, 5.0, 6.0)]);
    assert!(c.colors.is_none() && c.normals.is_none());
}

#[test]
fn ply_rejects_truncation() {
    let c = cloud_with_attrs(10, 1);
    let bytes = io::encode_ply(&c, PlyFormat::BinaryLittleEndian);
    assert!(io::decode_ply(&bytes[..bytes.len() - 3]).is_err());
    assert!(io::decode_ply(b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n").is_err());
}

#[test]
fn pfm_depth_round_trip_marks_invalid() {
    let d = DepthMap::from_fn(7, 5, |x, y| ((x * y) % 4 != 1).then_some(0.5 + x as f64 * 0.25 + y as f64));
    let back = io::pfm_to_depth(&io::decode_pfm(&io::encode_pfm(&io::depth_to_pfm(&d))).unwrap()).unwrap();
    assert_eq!(back, d);
}

#[test]
fn pfm_normals_round_trip() {
    let mut rng = SeededRng::new(8);
    let vectors = Grid::from_fn(6, 4, |_, _| Vec3::new(rng.normal(), rng.normal(), rng.normal()).normalize());
    let valid = Grid::from_fn(6, 4, |x, y| x != y);
    let n = NormalMap::new(vectors, valid.clone()).unwrap();
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("n.pfm");
    io::write_pfm_normals(&p, &n).unwrap();
    let back = io::read_pfm_normals(&p).unwrap();
    assert_eq!(back.valid, valid);
    for y in 0..4 {
        for x in 0..6 {
            if let Some(v) = n.at(x, y) {
                assert!((back.at(x, y).unwrap() - v).norm() < 1e-6);
            }
        }
    }
}

#[test]
fn pfm_big_endian_bottom_up() {
    // 2x2 grayscale, positive scale means big-endian, first stored row is the bottom one
    let mut bytes = b"Pf\n2 2\n1.0\n".to_vec();
    for v in [3.0f32, 4.0, 1.0, 2.0] {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    let pfm = io::decode_pfm(&bytes).unwrap();
    assert_eq!(pfm.data, vec![1.0, 2.0, 3.0, 4.0]);
    let d = io::pfm_to_depth(&pfm).unwrap();
    assert_eq!(d.at(0, 0), Some(1.0));
    assert_eq!(d.at(1, 1), Some(4.0));
}

#[test]
fn pfm_truncated_payload() {
    let mut bytes = b"Pf\n2 2\n-1.0\n".to_vec();
    bytes.extend_from_slice(&[0u8; 12]);
    assert!(matches!(io::decode_pfm(&bytes), Err(IoError::TruncatedPayload { .. })));
    assert!(matches!(io::decode_pfm(b"P5\n1 1\n-1\n"), Err(IoError::MalformedHeader(_))));
}

fn gray_png(bit_depth: png::BitDepth, data: &[u8], w: u32, h: u32) -> Vec<u8> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, w, h);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(bit_depth);
    enc.write_header().unwrap().write_image_data(data).unwrap();
    out
}

#[test]
fn png16_depth_round_trip_and_quantization() {
    let d = DepthMap::from_fn(5, 3, |x, y| (x != 2).then_some(1.0 + x as f64 + y as f64 / 256.0 + 0.001));
    let back = io::decode_png16_depth(&io::encode_png16_depth(&d).unwrap()).unwrap();
    assert_eq!(back.valid, d.valid);
    for y in 0..3 {
        for x in 0..5 {
            if let Some(v) = d.at(x, y) {
                assert_eq!(back.at(x, y).unwrap(), (v * 256.0 + 0.5).floor() / 256.0);
            }
        }
    }
    assert_eq!(io::quantize_png16(0.0).unwrap(), 0);
    assert_eq!(io::quantize_png16(255.99).unwrap(), 65533);
    assert!(matches!(io::quantize_png16(256.0), Err(IoError::DepthOutOfRange(..))));
}

#[test]
fn png16_rejects_eight_bit() {
    let bytes = gray_png(png::BitDepth::Eight, &[1, 2, 3, 4], 2, 2);
    assert!(matches!(io::decode_png16_depth(&bytes), Err(IoError::UnsupportedBitDepth(_))));
    let bytes16 = gray_png(png::BitDepth::Sixteen, &[0, 0, 1, 0], 2, 1);
    let d = io::decode_png16_depth(&bytes16).unwrap();
    assert_eq!(d.at(0, 0), None);
    assert_eq!(d.at(1, 0), Some(1.0));
}

#[test]
fn rgb_from_ppm_and_png() {
    let dir = TempDir::new().unwrap();
    let ppm = dir.path().join("a.ppm");
    let mut bytes = b"P6\n2 1\n255\n".to_vec();
    bytes.extend_from_slice(&[255, 0, 51, 0, 255, 102]);
    std::fs::write(&ppm, &bytes).unwrap();
    let img = io::read_rgb(&ppm).unwrap();
    assert_eq!(img.pixels.as_slice(), &[[1.0, 0.0, 0.2], [0.0, 1.0, 0.4]]);

    let png_path = dir.path().join("g.png");
    std::fs::write(&png_path, gray_png(png::BitDepth::Eight, &[0, 255], 2, 1)).unwrap();
    let img = io::read_rgb(&png_path).unwrap();
    assert_eq!(img.pixels.as_slice(), &[[0.0; 3], [1.0; 3]]);
}

#[test]
fn poses_round_trip_and_reject_non_rotation() {
    use canodepth::geometry::Pose;
    let poses = vec![
        Pose::identity(),
        Pose::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), 0.7, Vec3::new(1.0, -2.0, 0.5)),
    ];
    let back = io::parse_poses(&io::format_poses(&poses)).unwrap();
    for (a, b) in poses.iter().zip(&back) {
        assert!((a.rotation - b.rotation).abs().max() < 1e-12);
        assert!((a.translation - b.translation).norm() < 1e-12);
    }
    let bad = "# scaled\n2 0 0 0 0 1 0 0 0 0 1 0\n";
    assert!(matches!(io::parse_poses(bad), Err(IoError::BadPose { line: 2, .. })));
    assert!(matches!(io::parse_poses("1 0 0\n"), Err(IoError::BadPose { line: 1, .. })));
}

#[test]
fn missing_file_reports_path() {
    let err = io::read_pfm_depth(std::path::Path::new("/nonexistent/d.pfm")).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/d.pfm"));
}
