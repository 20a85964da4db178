//! Landmark-based face normalization.
//!
//! A similarity transform rotates the eye line to horizontal, scales so the
//! eye-midpoint to mouth-midpoint distance hits a target and places the eye
//! midpoint at a fixed position. Images are resampled bilinearly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn midpoint(self, other: Point) -> Point {
        Point::new((self.x + other.x) / 2.0, (self.y + other.y) / 2.0)
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Five facial points in source-image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmarks5 {
    pub left_eye: Point,
    pub right_eye: Point,
    /// Not used by the transform.
    pub nose: Point,
    pub mouth_left: Point,
    pub mouth_right: Point,
}

impl Landmarks5 {
    /// From `lx ly rx ry nx ny mlx mly mrx mry`.
    pub fn from_array(v: [f64; 10]) -> Self {
        Self {
            left_eye: Point::new(v[0], v[1]),
            right_eye: Point::new(v[2], v[3]),
            nose: Point::new(v[4], v[5]),
            mouth_left: Point::new(v[6], v[7]),
            mouth_right: Point::new(v[8], v[9]),
        }
    }

    pub fn to_array(&self) -> [f64; 10] {
        let p = self.points();
        std::array::from_fn(|i| if i % 2 == 0 { p[i / 2].x } else { p[i / 2].y })
    }

    pub fn points(&self) -> [Point; 5] {
        [self.left_eye, self.right_eye, self.nose, self.mouth_left, self.mouth_right]
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> Self {
        Self {
            left_eye: f(self.left_eye),
            right_eye: f(self.right_eye),
            nose: f(self.nose),
            mouth_left: f(self.mouth_left),
            mouth_right: f(self.mouth_right),
        }
    }

    pub fn eye_center(&self) -> Point {
        self.left_eye.midpoint(self.right_eye)
    }

    pub fn mouth_center(&self) -> Point {
        self.mouth_left.midpoint(self.mouth_right)
    }
}

/// Target geometry of a normalized face.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormSpec {
    /// Output side length in pixels.
    pub size: usize,
    /// Distance between eye midpoint and mouth midpoint.
    pub ec_mc_y: f64,
    /// Vertical position of the eye midpoint.
    pub ec_y: f64,
}

impl NormSpec {
    /// Training images: 144×144, eyes at y = 48, mouth 48 px below.
    pub const TRAIN: NormSpec = NormSpec {
        size: 144,
        ec_mc_y: 48.0,
        ec_y: 48.0,
    };
    /// Test images: 128×128, eyes at y = 40, mouth 48 px below.
    pub const TEST: NormSpec = NormSpec {
        size: 128,
        ec_mc_y: 48.0,
        ec_y: 40.0,
    };

    pub fn validate(&self) -> Result<()> {
        if self.ec_mc_y <= 0.0 || self.ec_y < 0.0 || self.ec_y + self.ec_mc_y >= self.size as f64 {
            return Err(Error::invalid(
                "norm spec",
                format!("ec_y {} + ec_mc_y {} must lie inside size {}", self.ec_y, self.ec_mc_y, self.size),
            ));
        }
        Ok(())
    }

    /// Where the eye midpoint lands.
    pub fn eye_target(&self) -> Point {
        Point::new(self.size as f64 / 2.0, self.ec_y)
    }
}

/// `p' = s·R(angle)·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub angle: f64,
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl SimilarityTransform {
    pub const IDENTITY: SimilarityTransform = SimilarityTransform {
        angle: 0.0,
        scale: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn new(angle: f64, scale: f64, tx: f64, ty: f64) -> Self {
        Self { angle, scale, tx, ty }
    }

    fn linear(&self, p: Point) -> Point {
        let (sin, cos) = self.angle.sin_cos();
        Point::new(self.scale * (cos * p.x - sin * p.y), self.scale * (sin * p.x + cos * p.y))
    }

    pub fn apply(&self, p: Point) -> Point {
        let q = self.linear(p);
        Point::new(q.x + self.tx, q.y + self.ty)
    }

    pub fn inverse(&self) -> Self {
        let inv = SimilarityTransform::new(-self.angle, 1.0 / self.scale, 0.0, 0.0);
        let t = inv.linear(Point::new(self.tx, self.ty));
        SimilarityTransform { tx: -t.x, ty: -t.y, ..inv }
    }

    /// `self ∘ first`: applies `first`, then `self`.
    pub fn after(&self, first: &SimilarityTransform) -> Self {
        let t = self.apply(Point::new(first.tx, first.ty));
        SimilarityTransform::new(self.angle + first.angle, self.scale * first.scale, t.x, t.y)
    }
}

/// Transform taking `lm` onto the normalized geometry of `spec`.
pub fn compute_alignment(lm: &Landmarks5, spec: &NormSpec) -> Result<SimilarityTransform> {
    spec.validate()?;
    let eyes = Point::new(lm.right_eye.x - lm.left_eye.x, lm.right_eye.y - lm.left_eye.y);
    if eyes.x.hypot(eyes.y) < 1e-9 {
        return Err(Error::DegenerateLandmarks("eye points coincide"));
    }
    let eye_center = lm.eye_center();
    let dist = eye_center.distance(lm.mouth_center());
    if dist < 1e-9 {
        return Err(Error::DegenerateLandmarks("eye and mouth midpoints coincide"));
    }
    let rot = SimilarityTransform::new(-eyes.y.atan2(eyes.x), spec.ec_mc_y / dist, 0.0, 0.0);
    let moved = rot.apply(eye_center);
    let target = spec.eye_target();
    Ok(SimilarityTransform {
        tx: target.x - moved.x,
        ty: target.y - moved.y,
        ..rot
    })
}

/// Single-channel image with `f32` intensities (0–255 when loaded from disk).
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape("GrayImage", "pixel count", width * height, data.len()));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let data = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers on the
    /// integer grid). Points outside `[0, W-1] × [0, H-1]` read as 0.
    pub fn sample(&self, x: f64, y: f64) -> f32 {
        let (max_x, max_y) = ((self.width - 1) as f64, (self.height - 1) as f64);
        if !(0.0..=max_x).contains(&x) || !(0.0..=max_y).contains(&y) {
            return 0.0;
        }
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let p = |xx, yy| self.get(xx, yy) as f64;
        let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
        let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
        (top * (1.0 - fy) + bottom * fy) as f32
    }

    /// `(1, 1, H, W)` tensor with every pixel multiplied by `scale`.
    pub fn to_tensor(&self, scale: f32) -> Tensor<f32> {
        let shape = Shape::new(1, 1, self.height, self.width);
        Tensor::from_vec(shape, self.data.iter().map(|&v| v * scale).collect()).expect("pixel count matches")
    }
}

/// Resamples `image` so that output pixel `p` shows input point `t⁻¹(p)`.
pub fn warp(image: &GrayImage, t: &SimilarityTransform, out_size: usize) -> GrayImage {
    let inv = t.inverse();
    let mut data = Vec::with_capacity(out_size * out_size);
    for y in 0..out_size {
        for x in 0..out_size {
            let src = inv.apply(Point::new(x as f64, y as f64));
            data.push(image.sample(src.x, src.y));
        }
    }
    GrayImage {
        width: out_size,
        height: out_size,
        data,
    }
}

/// Aligns one face: returns the normalized image and its landmarks in output
/// coordinates.
pub fn normalize_face(image: &GrayImage, lm: &Landmarks5, spec: &NormSpec) -> Result<(GrayImage, Landmarks5)> {
    let t = compute_alignment(lm, spec)?;
    Ok((warp(image, &t, spec.size), lm.map(|p| t.apply(p))))
}

/// Rec. 601 luma.
pub fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let err = |msg: String| Error::Image {
        path: path.to_path_buf(),
        msg,
    };
    let img = image::open(path).map_err(|e| err(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = if img.color().has_color() {
        img.to_rgb8()
            .pixels()
            .map(|p| luma(p[0] as f32, p[1] as f32, p[2] as f32))
            .collect()
    } else {
        img.to_luma8().pixels().map(|p| p[0] as f32).collect()
    };
    GrayImage::new(w, h, data)
}

/// Writes an 8-bit grayscale image; the format follows the file extension.
pub fn save_gray(path: &Path, img: &GrayImage) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
    let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, bytes).expect("pixel count matches");
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// One line of a dataset manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub path: String,
    pub label: usize,
    pub landmarks: Landmarks5,
}

/// Parses `path \t label \t lx ly rx ry nx ny mlx mly mrx mry` records
/// (every field tab-separated). Blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str, source: &str) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 12 {
            return Err(err(format!("expected 12 tab-separated fields, found {}", fields.len())));
        }
        let label = fields[1]
            .trim()
            .parse()
            .map_err(|_| err(format!("bad identity label {:?}", fields[1])))?;
        let mut coords = [0.0; 10];
        for (c, f) in coords.iter_mut().zip(&fields[2..]) {
            *c = f
                .trim()
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| err(format!("bad coordinate {f:?}")))?;
        }
        out.push(ManifestRecord {
            path: fields[0].to_string(),
            label,
            landmarks: Landmarks5::from_array(coords),
        });
    }
    Ok(out)
}

pub fn format_manifest(records: &[ManifestRecord]) -> String {
    let mut s = String::from("# path\tlabel\tlx\tly\trx\try\tnx\tny\tmlx\tmly\tmrx\tmry\n");
    for r in records {
        s.push_str(&r.path);
        s.push('\t');
        s.push_str(&r.label.to_string());
        for v in r.landmarks.to_array() {
            s.push('\t');
            s.push_str(&format!("{v:.4}"));
        }
        s.push('\n');
    }
    s
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    parse_manifest(&fs::read_to_string(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn canonical(spec: &NormSpec) -> Landmarks5 {
        let e = spec.eye_target();
        Landmarks5 {
            left_eye: Point::new(e.x - 18.0, e.y),
            right_eye: Point::new(e.x + 18.0, e.y),
            nose: Point::new(e.x, e.y + 24.0),
            mouth_left: Point::new(e.x - 14.0, e.y + spec.ec_mc_y),
            mouth_right: Point::new(e.x + 14.0, e.y + spec.ec_mc_y),
        }
    }

    #[test]
    fn canonical_landmarks_give_identity() {
        let t = compute_alignment(&canonical(&NormSpec::TRAIN), &NormSpec::TRAIN).unwrap();
        assert!(t.angle.abs() < 1e-9 && (t.scale - 1.0).abs() < 1e-9);
        assert!(t.tx.abs() < 1e-9 && t.ty.abs() < 1e-9);
    }

    #[test]
    fn round_trip_recovers_inverse() {
        let known = SimilarityTransform::new(17f64.to_radians(), 1.3, 11.0, -7.0);
        for spec in [NormSpec::TRAIN, NormSpec::TEST] {
            let target = canonical(&spec);
            let moved = target.map(|p| known.apply(p));
            let t = compute_alignment(&moved, &spec).unwrap();
            for (a, b) in moved.map(|p| t.apply(p)).points().iter().zip(target.points()) {
                assert!(a.distance(b) < 1e-6, "{a:?} vs {b:?}");
            }
            let inv = known.inverse();
            assert!((t.scale - inv.scale).abs() < 1e-9);
            assert!((t.tx - inv.tx).abs() < 1e-6 && (t.ty - inv.ty).abs() < 1e-6);
        }
    }

    #[test]
    fn alignment_post_conditions() {
        let lm = Landmarks5::from_array([31.0, 52.0, 70.5, 44.0, 50.0, 70.0, 38.0, 95.0, 66.0, 90.0]);
        let t = compute_alignment(&lm, &NormSpec::TEST).unwrap();
        let out = lm.map(|p| t.apply(p));
        assert!((out.left_eye.y - out.right_eye.y).abs() < 1e-9);
        assert!(out.right_eye.x > out.left_eye.x);
        assert!((out.eye_center().distance(out.mouth_center()) - 48.0).abs() < 1e-9);
        let e = out.eye_center();
        assert!((e.x - 64.0).abs() < 1e-9 && (e.y - 40.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_landmarks_rejected() {
        let mut lm = canonical(&NormSpec::TRAIN);
        lm.right_eye = lm.left_eye;
        assert!(compute_alignment(&lm, &NormSpec::TRAIN).is_err());
        let mut lm = canonical(&NormSpec::TRAIN);
        lm.mouth_left = lm.left_eye;
        lm.mouth_right = lm.right_eye;
        assert!(matches!(compute_alignment(&lm, &NormSpec::TRAIN), Err(Error::DegenerateLandmarks(_))));
    }

    #[test]
    fn transform_algebra() {
        let a = SimilarityTransform::new(0.3, 2.0, 1.0, -4.0);
        let b = SimilarityTransform::new(-1.1, 0.5, 3.0, 2.0);
        let p = Point::new(5.0, -2.0);
        let q = a.after(&b).apply(p);
        let r = a.apply(b.apply(p));
        assert!(q.distance(r) < 1e-12);
        assert!(a.inverse().apply(a.apply(p)).distance(p) < 1e-12);
    }

    #[test]
    fn identity_warp_is_exact_crop() {
        let img = GrayImage::from_fn(40, 30, |x, y| ((x * 7 + y * 13) % 256) as f32);
        let out = warp(&img, &SimilarityTransform::IDENTITY, 25);
        for y in 0..25 {
            for x in 0..25 {
                assert_eq!(out.get(x, y), img.get(x, y));
            }
        }
        let white = GrayImage::filled(32, 32, 255.0);
        assert!(warp(&white, &SimilarityTransform::IDENTITY, 32).data.iter().all(|&v| v == 255.0));
    }

    #[test]
    fn integer_translation_shifts_pixels() {
        let img = GrayImage::from_fn(20, 20, |x, y| (x + 20 * y) as f32);
        let out = warp(&img, &SimilarityTransform::new(0.0, 1.0, -3.0, -5.0), 10);
        for y in 0..10 {
            for x in 0..10 {
                assert_eq!(out.get(x, y), img.get(x + 3, y + 5));
            }
        }
        let out = warp(&img, &SimilarityTransform::new(0.0, 1.0, 4.0, 0.0), 10);
        assert_eq!(out.get(0, 0), 0.0);
        assert_eq!(out.get(4, 0), img.get(0, 0));
    }

    #[test]
    fn manifest_parse_and_format() {
        let text = "# header\n\nimg/a.png\t3\t1\t2\t3\t4\t5\t6\t7\t8\t9\t10\n";
        let recs = parse_manifest(text, "m").unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].label, 3);
        assert_eq!(recs[0].landmarks.mouth_right, Point::new(9.0, 10.0));
        let again = parse_manifest(&format_manifest(&recs), "m").unwrap();
        assert_eq!(again, recs);
        let err = parse_manifest("a\t1\t2\n", "m.tsv").unwrap_err().to_string();
        assert!(err.starts_with("m.tsv:1:"), "{err}");
        assert!(parse_manifest("a\tx\t1\t2\t3\t4\t5\t6\t7\t8\t9\t10\n", "m").is_err());
        assert!(parse_manifest("", "m").unwrap().is_empty());
    }

    #[test]
    fn luma_weights() {
        assert!((luma(255.0, 255.0, 255.0) - 255.0).abs() < 1e-3);
        assert!((luma(100.0, 0.0, 0.0) - 29.9).abs() < 1e-4);
    }
}
