//! Face shapes, 4-parameter similarity transforms and the canonical shape.

use crate::error::{Error, Result};

/// Number of landmarks in the iBUG 68-point markup.
pub const NUM_LANDMARKS: usize = 68;

/// 0-based indices of the six landmarks outlining each eye.
pub const LEFT_EYE: std::ops::Range<usize> = 36..42;
pub const RIGHT_EYE: std::ops::Range<usize> = 42..48;
/// 0-based indices of the outer eye corners.
pub const LEFT_EYE_OUTER: usize = 36;
pub const RIGHT_EYE_OUTER: usize = 45;

/// Index each landmark maps to under a horizontal flip.
pub const MIRROR_PERMUTATION: [usize; NUM_LANDMARKS] = [
    // jaw
    16, 15, 14, 13, 12, 11, 10, 9, 8, 7, 6, 5, 4, 3, 2, 1, 0, //
    // brows
    26, 25, 24, 23, 22, 21, 20, 19, 18, 17, //
    // nose bridge, nostrils
    27, 28, 29, 30, 35, 34, 33, 32, 31, //
    // eyes
    45, 44, 43, 42, 47, 46, 39, 38, 37, 36, 41, 40, //
    // outer lip
    54, 53, 52, 51, 50, 49, 48, 59, 58, 57, 56, 55, //
    // inner lip
    64, 63, 62, 61, 60, 67, 66, 65,
];

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// 68 landmarks in image coordinates (pixels, integer values at pixel centers).
#[derive(Clone, Debug, PartialEq)]
pub struct Shape {
    points: Vec<Point>,
}

impl Shape {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::InvalidArgument(format!(
                "a shape has {NUM_LANDMARKS} landmarks, got {}",
                points.len()
            )));
        }
        if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::InvalidArgument("landmark coordinates must be finite".into()));
        }
        Ok(Shape { points })
    }

    /// Builds a shape from interleaved `x0, y0, x1, y1, ...` coordinates.
    pub fn from_interleaved(coords: &[f64]) -> Result<Self> {
        if coords.len() != 2 * NUM_LANDMARKS {
            return Err(Error::InvalidArgument(format!(
                "expected {} coordinates, got {}",
                2 * NUM_LANDMARKS,
                coords.len()
            )));
        }
        Shape::new(coords.chunks(2).map(|c| Point::new(c[0], c[1])).collect())
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn to_interleaved(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    pub fn centroid(&self) -> Point {
        centroid(&self.points)
    }

    /// Tight axis-aligned box around the landmarks.
    pub fn bounding_box(&self) -> BoundingBox {
        let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
        let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.points {
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
        BoundingBox {
            x: x0,
            y: y0,
            width: x1 - x0,
            height: y1 - y0,
        }
    }

    pub fn map(&self, mut f: impl FnMut(Point) -> Point) -> Shape {
        Shape {
            points: self.points.iter().map(|&p| f(p)).collect(),
        }
    }

    /// Centroid of the six landmarks of each eye.
    pub fn eye_centers(&self) -> (Point, Point) {
        (centroid(&self.points[LEFT_EYE]), centroid(&self.points[RIGHT_EYE]))
    }

    /// Horizontal flip `x -> axis - x` with landmark relabelling.
    pub fn mirrored(&self, axis: f64) -> Shape {
        let points = (0..NUM_LANDMARKS)
            .map(|i| {
                let p = self.points[MIRROR_PERMUTATION[i]];
                Point::new(axis - p.x, p.y)
            })
            .collect();
        Shape { points }
    }

    /// Mean point-to-point distance.
    pub fn mean_distance(&self, other: &Shape) -> f64 {
        self.points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| a.distance(*b))
            .sum::<f64>()
            / NUM_LANDMARKS as f64
    }
}

fn centroid(points: &[Point]) -> Point {
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
    Point::new(sx / n, sy / n)
}

/// Planar similarity `p -> [[a, -b], [b, a]]·p + (tx, ty)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityTransform {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl SimilarityTransform {
    pub const IDENTITY: SimilarityTransform = SimilarityTransform {
        a: 1.0,
        b: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn new(a: f64, b: f64, tx: f64, ty: f64) -> Self {
        SimilarityTransform { a, b, tx, ty }
    }

    /// Rotation by `angle` radians and isotropic `scale` about the origin,
    /// then translation.
    pub fn from_scale_rotation(scale: f64, angle: f64, tx: f64, ty: f64) -> Self {
        SimilarityTransform::new(scale * angle.cos(), scale * angle.sin(), tx, ty)
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        SimilarityTransform::new(1.0, 0.0, tx, ty)
    }

    pub fn scale(&self) -> f64 {
        self.a.hypot(self.b)
    }

    pub fn rotation(&self) -> f64 {
        self.b.atan2(self.a)
    }

    pub fn is_invertible(&self) -> bool {
        let det = self.a * self.a + self.b * self.b;
        det > 0.0 && det.is_finite() && self.tx.is_finite() && self.ty.is_finite()
    }

    #[inline]
    pub fn apply_point(&self, p: Point) -> Point {
        Point::new(
            self.a * p.x - self.b * p.y + self.tx,
            self.b * p.x + self.a * p.y + self.ty,
        )
    }

    pub fn apply(&self, shape: &Shape) -> Shape {
        shape.map(|p| self.apply_point(p))
    }

    pub fn inverse(&self) -> Result<SimilarityTransform> {
        if !self.is_invertible() {
            return Err(Error::Degenerate(format!("similarity {self:?} is not invertible")));
        }
        let det = self.a * self.a + self.b * self.b;
        let a = self.a / det;
        let b = -self.b / det;
        Ok(SimilarityTransform {
            a,
            b,
            tx: -(a * self.tx - b * self.ty),
            ty: -(b * self.tx + a * self.ty),
        })
    }

    /// `self ∘ first`: applies `first`, then `self`.
    pub fn compose(&self, first: &SimilarityTransform) -> SimilarityTransform {
        let t = self.apply_point(Point::new(first.tx, first.ty));
        SimilarityTransform {
            a: self.a * first.a - self.b * first.b,
            b: self.b * first.a + self.a * first.b,
            tx: t.x,
            ty: t.y,
        }
    }
}

pub fn apply_transform(t: &SimilarityTransform, s: &Shape) -> Shape {
    t.apply(s)
}

pub fn invert_transform(t: &SimilarityTransform) -> Result<SimilarityTransform> {
    t.inverse()
}

/// Least-squares similarity taking `src` onto `dst` (closed-form normal
/// equations on centered coordinates; reflections excluded).
pub fn estimate_similarity(src: &Shape, dst: &Shape) -> Result<SimilarityTransform> {
    estimate_similarity_points(src.points(), dst.points())
}

pub(crate) fn estimate_similarity_points(src: &[Point], dst: &[Point]) -> Result<SimilarityTransform> {
    if src.len() != dst.len() || src.is_empty() {
        return Err(Error::InvalidArgument("point sets must be equally sized and non-empty".into()));
    }
    let cs = centroid(src);
    let cd = centroid(dst);
    let (mut norm, mut dot, mut cross) = (0.0, 0.0, 0.0);
    for (p, q) in src.iter().zip(dst) {
        let (x, y) = (p.x - cs.x, p.y - cs.y);
        let (u, v) = (q.x - cd.x, q.y - cd.y);
        norm += x * x + y * y;
        dot += x * u + y * v;
        cross += x * v - y * u;
    }
    if !(norm > 1e-300) || !norm.is_finite() {
        return Err(Error::Degenerate("source points have no spread".into()));
    }
    let a = dot / norm;
    let b = cross / norm;
    Ok(SimilarityTransform {
        a,
        b,
        tx: cd.x - (a * cs.x - b * cs.y),
        ty: cd.y - (b * cs.x + a * cs.y),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, width: f64, height: f64) -> Result<Self> {
        let b = BoundingBox { x, y, width, height };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.width, self.height].iter().all(|v| v.is_finite());
        if !finite || self.width <= 0.0 || self.height <= 0.0 {
            return Err(Error::Degenerate(format!("bounding box {self:?} has no area")));
        }
        Ok(())
    }

    pub fn center(&self) -> Point {
        Point::new(self.x + self.width / 2.0, self.y + self.height / 2.0)
    }

    pub fn larger_side(&self) -> f64 {
        self.width.max(self.height)
    }

    pub fn diagonal(&self) -> f64 {
        self.width.hypot(self.height)
    }

    /// Grows each side by `fraction` of its length, keeping the center.
    pub fn expanded(&self, fraction: f64) -> BoundingBox {
        let (dw, dh) = (self.width * fraction, self.height * fraction);
        BoundingBox {
            x: self.x - dw / 2.0,
            y: self.y - dh / 2.0,
            width: self.width + dw,
            height: self.height + dh,
        }
    }

    pub fn transformed(&self, t: &SimilarityTransform) -> BoundingBox {
        let c = t.apply_point(self.center());
        let s = t.scale();
        BoundingBox {
            x: c.x - self.width * s / 2.0,
            y: c.y - self.height * s / 2.0,
            width: self.width * s,
            height: self.height * s,
        }
    }
}

/// Translates and isotropically scales `s0` so that its bounding-box center
/// and larger side match those of `bbox`.
pub fn place_shape_in_bbox(s0: &Shape, bbox: &BoundingBox) -> Result<Shape> {
    bbox.validate()?;
    let own = s0.bounding_box();
    let side = own.larger_side();
    if !(side > 0.0) {
        return Err(Error::Degenerate("shape has zero extent".into()));
    }
    let scale = bbox.larger_side() / side;
    let (c0, c1) = (own.center(), bbox.center());
    Ok(s0.map(|p| Point::new(c1.x + scale * (p.x - c0.x), c1.y + scale * (p.y - c0.y))))
}

#[derive(Clone, Debug)]
pub struct CanonicalShapeConfig {
    /// Side of the square frame in pixels.
    pub frame: usize,
    /// Fraction of the frame left empty on each side of the longest extent.
    pub margin_fraction: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for CanonicalShapeConfig {
    fn default() -> Self {
        CanonicalShapeConfig {
            frame: 112,
            margin_fraction: 0.1,
            max_iterations: 100,
            tolerance: 1e-8,
        }
    }
}

/// Generalized Procrustes mean of `shapes`, oriented so the eye centers lie
/// on a horizontal line (left eye at smaller x) and fitted into the frame.
pub fn compute_canonical_shape(shapes: &[Shape], config: &CanonicalShapeConfig) -> Result<Shape> {
    if shapes.is_empty() {
        return Err(Error::InvalidArgument("canonical shape needs at least one training shape".into()));
    }
    if !(0.0..0.5).contains(&config.margin_fraction) {
        return Err(Error::InvalidArgument(format!(
            "margin fraction {} must lie in [0, 0.5)",
            config.margin_fraction
        )));
    }
    let mut mean = normalize_pose(&shapes[0])?;
    for _ in 0..config.max_iterations {
        let mut acc = vec![Point::default(); NUM_LANDMARKS];
        for s in shapes {
            let t = estimate_similarity(s, &mean)?;
            for (a, p) in acc.iter_mut().zip(s.points()) {
                let q = t.apply_point(*p);
                a.x += q.x;
                a.y += q.y;
            }
        }
        let n = shapes.len() as f64;
        let next = normalize_pose(&Shape::new(acc.into_iter().map(|p| Point::new(p.x / n, p.y / n)).collect())?)?;
        let moved = next
            .points()
            .iter()
            .zip(mean.points())
            .map(|(a, b)| a.distance(*b))
            .fold(0.0, f64::max);
        mean = next;
        if moved < config.tolerance {
            break;
        }
    }
    fit_into_frame(&mean, config.frame as f64, config.margin_fraction)
}

/// Centers at the origin, scales to unit RMS radius and levels the eyes.
fn normalize_pose(s: &Shape) -> Result<Shape> {
    let c = s.centroid();
    let rms = (s
        .points()
        .iter()
        .map(|p| (p.x - c.x).powi(2) + (p.y - c.y).powi(2))
        .sum::<f64>()
        / NUM_LANDMARKS as f64)
        .sqrt();
    if !(rms > 0.0) {
        return Err(Error::Degenerate("shape has no spread".into()));
    }
    let (l, r) = s.eye_centers();
    let angle = (r.y - l.y).atan2(r.x - l.x);
    let t = SimilarityTransform::from_scale_rotation(1.0 / rms, -angle, 0.0, 0.0)
        .compose(&SimilarityTransform::translation(-c.x, -c.y));
    Ok(t.apply(s))
}

fn fit_into_frame(s: &Shape, frame: f64, margin: f64) -> Result<Shape> {
    let side = frame * (1.0 - 2.0 * margin);
    let (lo, hi) = (frame / 2.0 - side / 2.0, frame / 2.0 + side / 2.0);
    let bbox = BoundingBox::new(lo, lo, hi - lo, hi - lo)?;
    // Pixel centers span [0, frame - 1]; center the shape on that range.
    let shift = SimilarityTransform::translation(-0.5, -0.5);
    Ok(shift.apply(&place_shape_in_bbox(s, &bbox)?))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    pub(crate) fn random_shape(r: &mut impl Rng) -> Shape {
        Shape::new(
            (0..NUM_LANDMARKS)
                .map(|_| Point::new(r.random_range(10.0..100.0), r.random_range(10.0..100.0)))
                .collect(),
        )
        .unwrap()
    }

    fn random_transform(r: &mut impl Rng) -> SimilarityTransform {
        SimilarityTransform::from_scale_rotation(
            r.random_range(0.2..3.0),
            r.random_range(-3.1..3.1),
            r.random_range(-50.0..50.0),
            r.random_range(-50.0..50.0),
        )
    }

    fn max_dev(a: &Shape, b: &Shape) -> f64 {
        a.points().iter().zip(b.points()).map(|(p, q)| p.distance(*q)).fold(0.0, f64::max)
    }

    fn residual(t: &SimilarityTransform, src: &[Point], dst: &[Point]) -> f64 {
        src.iter()
            .zip(dst)
            .map(|(p, q)| {
                let m = t.apply_point(*p);
                (m.x - q.x).powi(2) + (m.y - q.y).powi(2)
            })
            .sum()
    }

    #[test]
    fn shape_requires_68_finite_points() {
        assert!(Shape::new(vec![Point::default(); 5]).is_err());
        let mut pts = vec![Point::default(); 68];
        pts[3].x = f64::NAN;
        assert!(Shape::new(pts).is_err());
    }

    #[test]
    fn estimate_identity() {
        let s = random_shape(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(estimate_similarity(&s, &s).unwrap(), SimilarityTransform::IDENTITY);
    }

    #[test]
    fn estimate_scaled_rotation() {
        let s = random_shape(&mut ChaCha8Rng::seed_from_u64(2));
        let d = s.map(|p| Point::new(-2.0 * p.y, 2.0 * p.x));
        let t = estimate_similarity(&s, &d).unwrap();
        assert!(t.a.abs() < 1e-12 && (t.b - 2.0).abs() < 1e-12);
        let (cs, cd) = (s.centroid(), d.centroid());
        let mapped = t.apply_point(cs);
        assert!(mapped.distance(cd) < 1e-9);
        assert!(t.tx.abs() < 1e-9 && t.ty.abs() < 1e-9);
    }

    #[test]
    fn estimate_rejects_degenerate_source() {
        let s = Shape::new(vec![Point::new(3.0, 4.0); 68]).unwrap();
        let d = random_shape(&mut ChaCha8Rng::seed_from_u64(3));
        assert!(matches!(estimate_similarity(&s, &d), Err(Error::Degenerate(_))));
    }

    /// Brute-force oracle: coordinate-wise grid refinement of the four
    /// parameters, independent of the normal equations.
    fn grid_oracle(src: &[Point], dst: &[Point]) -> SimilarityTransform {
        let mut best = SimilarityTransform::new(1.0, 0.0, 0.0, 0.0);
        let mut step = 4.0;
        for _ in 0..200 {
            let mut improved = true;
            while improved {
                improved = false;
                for k in 0..4 {
                    for sign in [-1.0, 1.0] {
                        let mut c = best;
                        match k {
                            0 => c.a += sign * step,
                            1 => c.b += sign * step,
                            2 => c.tx += sign * step * 10.0,
                            _ => c.ty += sign * step * 10.0,
                        }
                        if residual(&c, src, dst) < residual(&best, src, dst) {
                            best = c;
                            improved = true;
                        }
                    }
                }
            }
            step *= 0.7;
        }
        best
    }

    #[test]
    fn estimate_matches_grid_oracle_on_noisy_points() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let src: Vec<Point> = (0..5)
                .map(|_| Point::new(r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)))
                .collect();
            let t = SimilarityTransform::from_scale_rotation(1.3, 0.4, 2.0, -1.0);
            let dst: Vec<Point> = src
                .iter()
                .map(|p| {
                    let q = t.apply_point(*p);
                    Point::new(q.x + r.random_range(-0.3..0.3), q.y + r.random_range(-0.3..0.3))
                })
                .collect();
            let fit = estimate_similarity_points(&src, &dst).unwrap();
            let oracle = grid_oracle(&src, &dst);
            for (x, y) in [(fit.a, oracle.a), (fit.b, oracle.b), (fit.tx, oracle.tx), (fit.ty, oracle.ty)] {
                assert!((x - y).abs() < 1e-6, "{fit:?} vs {oracle:?}");
            }
        }
    }

    #[test]
    fn least_squares_optimality_spot_check() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let src = random_shape(&mut r);
        let dst = random_shape(&mut r);
        let fit = estimate_similarity(&src, &dst).unwrap();
        let best = residual(&fit, src.points(), dst.points());
        for _ in 0..1000 {
            let c = SimilarityTransform::new(
                fit.a + r.random_range(-0.5..0.5),
                fit.b + r.random_range(-0.5..0.5),
                fit.tx + r.random_range(-10.0..10.0),
                fit.ty + r.random_range(-10.0..10.0),
            );
            assert!(residual(&c, src.points(), dst.points()) >= best);
        }
    }

    #[test]
    fn apply_examples() {
        let s = random_shape(&mut ChaCha8Rng::seed_from_u64(6));
        assert_eq!(SimilarityTransform::IDENTITY.apply(&s), s);
        let moved = SimilarityTransform::translation(5.0, -3.0).apply(&s);
        for (p, q) in s.points().iter().zip(moved.points()) {
            assert!((q.x - p.x - 5.0).abs() < 1e-12 && (q.y - p.y + 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(SimilarityTransform::IDENTITY.inverse().unwrap(), SimilarityTransform::IDENTITY);
        let t = SimilarityTransform::new(2.0, 0.0, 4.0, -6.0);
        let inv = t.inverse().unwrap();
        assert_eq!(inv, SimilarityTransform::new(0.5, 0.0, -2.0, 3.0));
        assert!(SimilarityTransform::new(0.0, 0.0, 1.0, 1.0).inverse().is_err());
    }

    #[test]
    fn inverse_composition_is_identity_on_unit_points() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let t = random_transform(&mut r);
            let c = t.inverse().unwrap().compose(&t);
            for p in [Point::new(0.0, 0.0), Point::new(1.0, 0.0), Point::new(0.0, 1.0)] {
                assert!(c.apply_point(p).distance(p) < 1e-12);
            }
        }
    }

    #[test]
    fn canonical_shape_single_and_congruent_pair() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let s = random_shape(&mut r);
        let cfg = CanonicalShapeConfig::default();
        let s0 = compute_canonical_shape(&[s.clone()], &cfg).unwrap();
        let t = estimate_similarity(&s, &s0).unwrap();
        assert!(max_dev(&t.apply(&s), &s0) < 1e-9);
        let bb = s0.bounding_box();
        assert!((bb.larger_side() - 112.0 * 0.8).abs() < 1e-9);
        assert!(bb.center().distance(Point::new(55.5, 55.5)) < 1e-9);

        let other = SimilarityTransform::from_scale_rotation(1.7, 0.8, 12.0, -4.0).apply(&s);
        let pair = compute_canonical_shape(&[s.clone(), other], &cfg).unwrap();
        let t = estimate_similarity(&s, &pair).unwrap();
        assert!(max_dev(&t.apply(&s), &pair) < 1e-6);
        assert!(compute_canonical_shape(&[], &cfg).is_err());
    }

    #[test]
    fn canonical_shape_is_pose_invariant() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let base = random_shape(&mut r);
        let shapes: Vec<Shape> = (0..6)
            .map(|_| {
                let jitter = base.map(|p| Point::new(p.x + r.random_range(-3.0..3.0), p.y + r.random_range(-3.0..3.0)));
                random_transform(&mut r).apply(&jitter)
            })
            .collect();
        let cfg = CanonicalShapeConfig::default();
        let reference = compute_canonical_shape(&shapes, &cfg).unwrap();
        let rot30 = SimilarityTransform::from_scale_rotation(1.0, 30f64.to_radians(), 0.0, 0.0);
        let rotated: Vec<Shape> = shapes.iter().map(|s| rot30.apply(s)).collect();
        assert!(max_dev(&compute_canonical_shape(&rotated, &cfg).unwrap(), &reference) < 1e-6);
        let global = SimilarityTransform::from_scale_rotation(0.4, -1.2, 300.0, -20.0);
        let moved: Vec<Shape> = shapes.iter().map(|s| global.apply(s)).collect();
        assert!(max_dev(&compute_canonical_shape(&moved, &cfg).unwrap(), &reference) < 1e-6);
    }

    #[test]
    fn place_in_bbox_examples() {
        let s = random_shape(&mut ChaCha8Rng::seed_from_u64(10));
        let own = s.bounding_box();
        let same = place_shape_in_bbox(&s, &own).unwrap();
        assert!(max_dev(&same, &s) < 1e-12);
        let shifted = place_shape_in_bbox(&s, &BoundingBox { x: own.x + 10.0, ..own }).unwrap();
        for (p, q) in s.points().iter().zip(shifted.points()) {
            assert!((q.x - p.x - 10.0).abs() < 1e-12 && (q.y - p.y).abs() < 1e-12);
        }
        let double = BoundingBox {
            width: own.width * 2.0,
            height: own.height * 2.0,
            ..own
        };
        let big = place_shape_in_bbox(&s, &double).unwrap();
        let d0 = s.points()[0].distance(s.points()[30]);
        let d1 = big.points()[0].distance(big.points()[30]);
        assert!((d1 - 2.0 * d0).abs() < 1e-9);
        assert!(place_shape_in_bbox(&s, &BoundingBox { width: 0.0, ..own }).is_err());
    }

    #[test]
    fn mirror_permutation_is_an_involution() {
        for i in 0..NUM_LANDMARKS {
            assert_eq!(MIRROR_PERMUTATION[MIRROR_PERMUTATION[i]], i);
        }
        let s = random_shape(&mut ChaCha8Rng::seed_from_u64(11));
        assert!(max_dev(&s.mirrored(99.0).mirrored(99.0), &s) < 1e-12);
    }

    proptest! {
        #[test]
        fn similarity_recovery(seed in any::<u64>()) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let s = random_shape(&mut r);
            let t = random_transform(&mut r);
            let fit = estimate_similarity(&s, &t.apply(&s)).unwrap();
            prop_assert!((fit.a - t.a).abs() < 1e-9 && (fit.b - t.b).abs() < 1e-9);
            prop_assert!((fit.tx - t.tx).abs() < 1e-9 && (fit.ty - t.ty).abs() < 1e-9);
        }

        #[test]
        fn transform_preserves_count_and_order(seed in any::<u64>()) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let s = random_shape(&mut r);
            let t = random_transform(&mut r);
            let out = t.apply(&s);
            prop_assert_eq!(out.points().len(), NUM_LANDMARKS);
            for (p, q) in s.points().iter().zip(out.points()) {
                prop_assert!(t.apply_point(*p) == *q);
            }
            let back = t.inverse().unwrap().apply(&out);
            prop_assert!(max_dev(&back, &s) < 1e-9);
        }

        #[test]
        fn composition_is_associative(seed in any::<u64>()) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let (a, b, c) = (random_transform(&mut r), random_transform(&mut r), random_transform(&mut r));
            let l = a.compose(&b).compose(&c);
            let rr = a.compose(&b.compose(&c));
            let scale = 1.0 + l.tx.abs() + l.ty.abs();
            prop_assert!((l.a - rr.a).abs() < 1e-12 * scale && (l.b - rr.b).abs() < 1e-12 * scale);
            prop_assert!((l.tx - rr.tx).abs() < 1e-10 * scale && (l.ty - rr.ty).abs() < 1e-10 * scale);
        }
    }
}
