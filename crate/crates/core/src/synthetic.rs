//! Rendered cartoon faces with exact 68-point annotations, for tests,
//! benchmarks and small experiments when no annotated photographs are at
//! hand.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::datasets::{encode_pgm, format_bbox_manifest, format_pts, IMAGE_EXTENSION, LANDMARK_EXTENSION};
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, Point, Shape, SimilarityTransform};
use crate::imaging::GrayImage;

/// A frontal 68-point face in unit coordinates: x in about [-1, 1], y
/// pointing down from the brows (-0.6) to the chin (1.1). Symmetric under
/// the mirror permutation.
pub fn template_shape() -> Shape {
    let mut p = Vec::with_capacity(68);
    for i in 0..17 {
        let t = i as f64 / 16.0;
        p.push((-0.95 * (PI * t).cos(), -0.2 + 1.3 * (PI * t).sin()));
    }
    for k in 0..5 {
        let s = k as f64 / 4.0;
        p.push((-0.75 + 0.6 * s, -0.45 - 0.12 * (PI * s).sin()));
    }
    for k in 0..5 {
        let s = k as f64 / 4.0;
        p.push((0.15 + 0.6 * s, -0.45 - 0.12 * (PI * (1.0 - s)).sin()));
    }
    for k in 0..4 {
        p.push((0.0, -0.3 + 0.55 * k as f64 / 3.0));
    }
    for k in 0..5 {
        let x = -0.2 + 0.1 * k as f64;
        p.push((x, 0.33 + 0.05 * (1.0 - (x / 0.2).powi(2))));
    }
    p.extend([(-0.63, -0.2), (-0.51, -0.27), (-0.39, -0.27), (-0.27, -0.2), (-0.39, -0.13), (-0.51, -0.13)]);
    p.extend([(0.27, -0.2), (0.39, -0.27), (0.51, -0.27), (0.63, -0.2), (0.51, -0.13), (0.39, -0.13)]);
    p.extend([
        (-0.35, 0.65),
        (-0.22, 0.58),
        (-0.08, 0.55),
        (0.0, 0.57),
        (0.08, 0.55),
        (0.22, 0.58),
        (0.35, 0.65),
        (0.22, 0.74),
        (0.08, 0.78),
        (0.0, 0.79),
        (-0.08, 0.78),
        (-0.22, 0.74),
    ]);
    p.extend([
        (-0.28, 0.65),
        (-0.1, 0.62),
        (0.0, 0.63),
        (0.1, 0.62),
        (0.28, 0.65),
        (0.1, 0.69),
        (0.0, 0.70),
        (-0.1, 0.69),
    ]);
    Shape::new(p.into_iter().map(|(x, y)| Point::new(x, y)).collect()).expect("template is finite")
}

/// Appearance and pose ranges of generated faces.
#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub width: usize,
    pub height: usize,
    /// Half-width of the face in pixels, drawn uniformly from this range.
    pub face_scale: (f64, f64),
    pub rotation_std_deg: f64,
    /// Offset of the face center from the image center, as a fraction of
    /// the face half-width.
    pub center_std: f64,
    /// Relative spread of per-face feature proportions.
    pub proportion_std: f64,
    /// Per-landmark jitter in template units.
    pub point_jitter: f64,
    pub noise_std: f64,
    /// Spread of the simulated detector box around the landmark box, as a
    /// fraction of its larger side.
    pub box_jitter: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            width: 128,
            height: 128,
            face_scale: (30.0, 40.0),
            rotation_std_deg: 10.0,
            center_std: 0.15,
            proportion_std: 0.08,
            point_jitter: 0.015,
            noise_std: 0.02,
            box_jitter: 0.04,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticFace {
    pub image: GrayImage,
    pub shape: Shape,
    /// Simulated face-detector box.
    pub bbox: BoundingBox,
}

fn vary_proportions(template: &Shape, std: f64, jitter: f64, rng: &mut impl Rng) -> Shape {
    let n = Normal::new(0.0, 1.0).unwrap();
    let mut f = || 1.0 + std * n.sample(rng);
    let (jaw_w, eye_gap, eye_size, mouth_w, mouth_open, brow_lift, nose_len) = (f(), f(), f(), f(), f(), f(), f());
    let mut pts: Vec<Point> = template.points().to_vec();
    for (i, p) in pts.iter_mut().enumerate() {
        match i {
            0..=16 => p.x *= jaw_w,
            17..=26 => p.y += (brow_lift - 1.0) * 0.3,
            27..=35 => p.y = -0.3 + (p.y + 0.3) * nose_len,
            36..=47 => {
                let c = if i < 42 { -0.45 } else { 0.45 };
                let (cx, cy) = (c * eye_gap, -0.2);
                p.x = cx + (p.x - c) * eye_size;
                p.y = cy + (p.y - cy) * eye_size;
            }
            _ => {
                p.x *= mouth_w;
                if i >= 60 {
                    let inner_mid = 0.655;
                    p.y = inner_mid + (p.y - inner_mid) * (1.0 + 2.0 * (mouth_open - 1.0)).max(0.2);
                }
            }
        }
    }
    let j = Normal::new(0.0, jitter.max(0.0)).unwrap();
    for p in &mut pts {
        p.x += j.sample(rng);
        p.y += j.sample(rng);
    }
    Shape::new(pts).expect("finite")
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    p.distance(Point::new(a.x + t * dx, a.y + t * dy))
}

fn polyline_distance(p: Point, pts: &[Point], closed: bool) -> f64 {
    let mut d = f64::INFINITY;
    for w in pts.windows(2) {
        d = d.min(segment_distance(p, w[0], w[1]));
    }
    if closed && pts.len() > 2 {
        d = d.min(segment_distance(p, pts[pts.len() - 1], pts[0]));
    }
    d
}

fn inside(p: Point, poly: &[Point]) -> bool {
    let mut c = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x {
            c = !c;
        }
        j = i;
    }
    c
}

/// Coverage of a filled polygon with a one-pixel soft edge.
fn fill(p: Point, poly: &[Point]) -> f64 {
    let d = polyline_distance(p, poly, true);
    let sd = if inside(p, poly) { -d } else { d };
    (0.5 - sd).clamp(0.0, 1.0)
}

fn stroke(p: Point, pts: &[Point], half_width: f64) -> f64 {
    (half_width + 0.5 - polyline_distance(p, pts, false)).clamp(0.0, 1.0)
}

fn render(shape: &Shape, width: usize, height: usize, tone: [f64; 6], noise: &mut dyn FnMut() -> f64) -> GrayImage {
    let s = shape.points();
    let scale = s[0].distance(s[16]) / 2.0;
    let brow_mid = Point::new((s[19].x + s[24].x) / 2.0, (s[19].y + s[24].y) / 2.0);
    let chin = s[8];
    let up = Point::new(brow_mid.x - chin.x, brow_mid.y - chin.y);
    let up_len = (up.x * up.x + up.y * up.y).sqrt();
    let up = Point::new(up.x / up_len, up.y / up_len);
    // Face outline: jaw plus a forehead arc above the brows.
    let mut face: Vec<Point> = s[0..17].to_vec();
    for k in 0..=8 {
        let a = PI * k as f64 / 8.0;
        let (along, across) = (a.cos(), a.sin());
        let right = Point::new(-up.y, up.x);
        let r = scale * 0.95;
        let c = Point::new(brow_mid.x + 0.1 * scale * up.x, brow_mid.y + 0.1 * scale * up.y);
        face.push(Point::new(
            c.x - right.x * r * along + up.x * r * 0.7 * across,
            c.y - right.y * r * along + up.y * r * 0.7 * across,
        ));
    }
    face.reverse();
    let left_eye = &s[36..42];
    let right_eye = &s[42..48];
    let outer_lip = &s[48..60];
    let inner_lip = &s[60..68];
    let [bg, skin, feature, eye, lip, mouth] = tone;
    let brow_w = (0.05 * scale).max(0.6);
    let nose_w = (0.025 * scale).max(0.4);
    GrayImage::from_fn(width, height, |x, y| {
        let p = Point::new(x as f64, y as f64);
        let shade = 0.05 * ((p.x - chin.x) * up.y - (p.y - chin.y) * up.x) / scale.max(1.0);
        let mut v = bg + 0.08 * (x as f64 / width as f64 - 0.5);
        v += (skin + shade - v) * fill(p, &face);
        v += (feature - v) * stroke(p, &s[17..22], brow_w).max(stroke(p, &s[22..27], brow_w));
        v += (feature + 0.15 - v) * stroke(p, &s[27..31], nose_w).max(stroke(p, &s[31..36], nose_w));
        v += (eye - v) * fill(p, left_eye).max(fill(p, right_eye));
        v += (lip - v) * fill(p, outer_lip);
        v += (mouth - v) * fill(p, inner_lip);
        (v + noise()).clamp(0.0, 1.0)
    })
}

/// One random face, deterministic in `rng`.
pub fn generate_face(config: &SyntheticConfig, rng: &mut impl Rng) -> SyntheticFace {
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let local = vary_proportions(&template_shape(), config.proportion_std, config.point_jitter, rng);
    let (lo, hi) = config.face_scale;
    let scale = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let angle = config.rotation_std_deg.to_radians() * std_normal.sample(rng);
    let cx = config.width as f64 / 2.0 - 0.5 + config.center_std * scale * std_normal.sample(rng);
    let cy = config.height as f64 / 2.0 - 0.5 + config.center_std * scale * std_normal.sample(rng) - 0.25 * scale;
    let shape = SimilarityTransform::from_scale_rotation(scale, angle, cx, cy).apply(&local);

    let bg = rng.random_range(0.1..0.35);
    let skin = rng.random_range(0.6..0.85);
    let tone = [
        bg,
        skin,
        skin - rng.random_range(0.3..0.45),
        rng.random_range(0.05..0.2),
        skin - rng.random_range(0.15..0.3),
        rng.random_range(0.0..0.15),
    ];
    let noise_dist = Normal::new(0.0, config.noise_std.max(0.0)).unwrap();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut noise = || noise_dist.sample(&mut noise_rng);
    let image = render(&shape, config.width, config.height, tone, &mut noise);

    let tight = shape.bounding_box();
    let side = tight.larger_side();
    let j = config.box_jitter;
    let grow = 1.0 + j * std_normal.sample(rng);
    let (w, h) = (tight.width * grow, tight.height * grow);
    let c = tight.center();
    let bbox = BoundingBox {
        x: c.x - w / 2.0 + j * side * std_normal.sample(rng),
        y: c.y - h / 2.0 + j * side * std_normal.sample(rng),
        width: w,
        height: h,
    };
    SyntheticFace { image, shape, bbox }
}

/// `n` faces; face `i` depends only on `seed` and `i`.
pub fn generate_faces(config: &SyntheticConfig, n: usize, seed: u64) -> Vec<SyntheticFace> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            generate_face(config, &mut rng)
        })
        .collect()
}

/// File name of the detector-box manifest written by [`write_dataset`].
pub const BBOX_MANIFEST: &str = "boxes.txt";

/// Writes `faces` under `dir` as `{prefix}{i:04}.pgm` / `.pts` pairs plus a
/// [`BBOX_MANIFEST`] of their detector boxes. Returns the stems.
pub fn write_dataset(dir: &Path, prefix: &str, faces: &[SyntheticFace]) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: String, bytes: &[u8]| {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(path, e))
    };
    let stems: Vec<String> = (0..faces.len()).map(|i| format!("{prefix}{i:04}")).collect();
    for (stem, f) in stems.iter().zip(faces) {
        write(format!("{stem}.{IMAGE_EXTENSION}"), &encode_pgm(&f.image))?;
        write(format!("{stem}.{LANDMARK_EXTENSION}"), format_pts(&f.shape).as_bytes())?;
    }
    let manifest = format_bbox_manifest(stems.iter().map(String::as_str).zip(faces.iter().map(|f| &f.bbox)));
    write(BBOX_MANIFEST.to_string(), manifest.as_bytes())?;
    Ok(stems)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::MIRROR_PERMUTATION;

    #[test]
    fn template_is_mirror_symmetric() {
        let t = template_shape();
        let m = t.mirrored(0.0);
        for (a, b) in t.points().iter().zip(m.points()) {
            assert!(a.distance(*b) < 1e-12, "{a:?} vs {b:?}");
        }
        assert_eq!(MIRROR_PERMUTATION[36], 45);
    }

    #[test]
    fn faces_are_reproducible_and_distinct() {
        let cfg = SyntheticConfig::default();
        let a = generate_faces(&cfg, 3, 7);
        let b = generate_faces(&cfg, 3, 7);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.shape, y.shape);
        }
        assert_ne!(a[0].shape, a[1].shape);
        // A prefix of a longer run matches a shorter run.
        let c = generate_faces(&cfg, 5, 7);
        assert_eq!(a[2].shape, c[2].shape);
    }

    #[test]
    fn written_dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let faces = generate_faces(&SyntheticConfig::default(), 3, 1);
        let stems = write_dataset(dir.path(), "f", &faces).unwrap();
        assert_eq!(stems, ["f0000", "f0001", "f0002"]);
        let loaded = crate::datasets::load_dataset(
            dir.path(),
            Some(&dir.path().join(BBOX_MANIFEST)),
            crate::datasets::LoadMode::Strict,
        )
        .unwrap();
        assert_eq!(loaded.records.len(), 3);
        for (r, f) in loaded.records.iter().zip(&faces) {
            assert_eq!(r.shape, f.shape);
            assert_eq!(r.bbox, Some(f.bbox));
            let worst = r.image.data().iter().zip(f.image.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(worst <= 1.0 / 510.0 + 1e-9, "{worst}");
        }
    }

    #[test]
    fn landmarks_stay_in_frame_and_features_are_dark() {
        let cfg = SyntheticConfig::default();
        for f in generate_faces(&cfg, 20, 3) {
            for p in f.shape.points() {
                assert!(p.x > 0.0 && p.y > 0.0 && p.x < 127.0 && p.y < 127.0, "{p:?}");
            }
            let (l, r) = f.shape.eye_centers();
            let cheek = f.shape.points()[30];
            let eye = f.image.get(l.x.round() as usize, l.y.round() as usize)
                .min(f.image.get(r.x.round() as usize, r.y.round() as usize));
            let skin = f.image.get((cheek.x + (l.x - cheek.x) * 0.3).round() as usize, cheek.y.round() as usize);
            assert!(eye < skin, "eye {eye} vs skin {skin}");
        }
    }
}
