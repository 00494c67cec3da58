//! Grayscale images and the resampling operators between stages.
//!
//! Integer coordinates address pixel centers: pixel `(x, y)` covers the
//! point `(x as f64, y as f64)`. Warps, heatmaps and landmark files share
//! this convention.

use crate::error::{Error, Result};
use crate::geometry::{Shape, SimilarityTransform};
use crate::interp::{corner_aligned_taps, lerp};

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("image extents must be positive".into()));
        }
        if data.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height} image needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("image intensities must be finite".into()));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0);
        GrayImage {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        GrayImage { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Zero-mean, unit-variance copy; the deviation is floored at `1e-6`.
    pub fn standardized(&self) -> GrayImage {
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        let var = self.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt().max(1e-6);
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| (v - mean) / sd).collect(),
        }
    }

    /// Flip about the vertical axis `x = (width - 1) / 2`.
    pub fn mirrored(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y))
    }
}

/// Four-neighbor bilinear interpolation; neighbors outside the image read 0.
pub fn bilinear_sample(img: &GrayImage, x: f64, y: f64) -> f64 {
    if !x.is_finite() || !y.is_finite() {
        return 0.0;
    }
    let (w, h) = (img.width as isize, img.height as isize);
    let (x0, y0) = (x.floor(), y.floor());
    if x0 < -1.0 || y0 < -1.0 || x0 >= w as f64 || y0 >= h as f64 {
        return 0.0;
    }
    let (fx, fy) = (x - x0, y - y0);
    let (xi, yi) = (x0 as isize, y0 as isize);
    let px = |xx: isize, yy: isize| -> f64 {
        if xx < 0 || yy < 0 || xx >= w || yy >= h {
            0.0
        } else {
            img.data[(yy * w + xx) as usize]
        }
    };
    let mut acc = px(xi, yi) * (1.0 - fx) * (1.0 - fy);
    if fx != 0.0 {
        acc += px(xi + 1, yi) * fx * (1.0 - fy);
    }
    if fy != 0.0 {
        acc += px(xi, yi + 1) * (1.0 - fx) * fy;
        if fx != 0.0 {
            acc += px(xi + 1, yi + 1) * fx * fy;
        }
    }
    acc
}

/// Backward-mapped warp: `out(p) = img(T⁻¹(p))`.
pub fn warp_image(img: &GrayImage, t: &SimilarityTransform, out_w: usize, out_h: usize) -> Result<GrayImage> {
    let inv = t.inverse()?;
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidArgument("warp output must be non-empty".into()));
    }
    let mut data = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let (rowx, rowy) = (-inv.b * y as f64 + inv.tx, inv.a * y as f64 + inv.ty);
        for x in 0..out_w {
            let xf = x as f64;
            data.push(bilinear_sample(img, inv.a * xf + rowx, inv.b * xf + rowy));
        }
    }
    Ok(GrayImage {
        width: out_w,
        height: out_h,
        data,
    })
}

/// Landmark heatmap `1 / (1 + d)` where `d` is the distance from the pixel
/// center to the nearest landmark; pixels farther than `radius` from every
/// landmark are 0. Only pixels within `radius` of some landmark are visited.
pub fn generate_heatmap(landmarks: &Shape, width: usize, height: usize, radius: f64) -> GrayImage {
    let mut nearest = vec![f64::INFINITY; width * height];
    for p in landmarks.points() {
        let x_lo = (p.x - radius).ceil().max(0.0);
        let y_lo = (p.y - radius).ceil().max(0.0);
        let x_hi = (p.x + radius).floor().min(width as f64 - 1.0);
        let y_hi = (p.y + radius).floor().min(height as f64 - 1.0);
        if x_lo > x_hi || y_lo > y_hi {
            continue;
        }
        for y in y_lo as usize..=y_hi as usize {
            for x in x_lo as usize..=x_hi as usize {
                let d = heat_distance(x, y, p.x, p.y);
                let slot = &mut nearest[y * width + x];
                if d <= radius && d < *slot {
                    *slot = d;
                }
            }
        }
    }
    let data = nearest
        .into_iter()
        .map(|d| if d.is_finite() { 1.0 / (1.0 + d) } else { 0.0 })
        .collect();
    GrayImage { width, height, data }
}

#[inline]
pub(crate) fn heat_distance(x: usize, y: usize, lx: f64, ly: f64) -> f64 {
    let (dx, dy) = (x as f64 - lx, y as f64 - ly);
    (dx * dx + dy * dy).sqrt()
}

/// Corner-aligned bilinear magnification of a 56x56 image to 112x112.
pub fn upscale_2x(img: &GrayImage) -> Result<GrayImage> {
    if img.width != 56 || img.height != 56 {
        return Err(Error::InvalidArgument(format!(
            "upscale_2x expects a 56x56 image, got {}x{}",
            img.width, img.height
        )));
    }
    Ok(upscale_2x_any(img))
}

pub(crate) fn upscale_2x_any(img: &GrayImage) -> GrayImage {
    let (w, h) = (img.width, img.height);
    let tx = corner_aligned_taps(w, 2 * w);
    let ty = corner_aligned_taps(h, 2 * h);
    let mut data = Vec::with_capacity(4 * w * h);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            let top = lerp(img.get(x0, y0), img.get(x1, y0), fx);
            let bot = lerp(img.get(x0, y1), img.get(x1, y1), fx);
            data.push(lerp(top, bot, fy));
        }
    }
    GrayImage {
        width: 2 * w,
        height: 2 * h,
        data,
    }
}
