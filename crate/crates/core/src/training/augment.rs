use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::datasets::FaceRecord;
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, SimilarityTransform};
use crate::imaging::warp_image;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub mirror_probability: f64,
    pub rotation_std_deg: f64,
    pub scale_std: f64,
    /// Per-axis translation spread as a fraction of the larger side of the
    /// landmark bounding box.
    pub translation_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            mirror_probability: 0.5,
            rotation_std_deg: 20.0,
            scale_std: 0.1,
            translation_std: 0.05,
        }
    }
}

impl AugmentConfig {
    /// No perturbation at all.
    pub fn identity() -> Self {
        AugmentConfig {
            mirror_probability: 0.0,
            rotation_std_deg: 0.0,
            scale_std: 0.0,
            translation_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.mirror_probability)
            && [self.rotation_std_deg, self.scale_std, self.translation_std]
                .iter()
                .all(|v| v.is_finite() && *v >= 0.0);
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid augmentation settings {self:?}")));
        }
        Ok(())
    }
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("validated spread")
}

/// `count` perturbed copies of `record`. Each copy may be mirrored, then
/// rotated, scaled and translated about the landmark centroid; the image
/// and landmarks move together while the initialization box (the record's
/// training box) stays where it was, so the face shifts relative to it.
pub fn augment(record: &FaceRecord, count: usize, config: &AugmentConfig, rng: &mut impl Rng) -> Result<Vec<FaceRecord>> {
    config.validate()?;
    let (w, h) = (record.image.width(), record.image.height());
    let rot = normal(config.rotation_std_deg.to_radians());
    let scale = normal(config.scale_std);
    let shift = normal(config.translation_std * record.shape.bounding_box().larger_side());
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let mirror = config.mirror_probability > 0.0 && rng.random_bool(config.mirror_probability);
        let angle = rot.sample(rng);
        let s = loop {
            let s = 1.0 + scale.sample(rng);
            if s > 0.05 {
                break s;
            }
        };
        let (dx, dy) = (shift.sample(rng), shift.sample(rng));

        let mut image = record.image.clone();
        let mut shape = record.shape.clone();
        let mut bbox = record.training_box();
        if mirror {
            image = image.mirrored();
            shape = shape.mirrored(w as f64 - 1.0);
            bbox = BoundingBox {
                x: w as f64 - 1.0 - bbox.x - bbox.width,
                ..bbox
            };
        }
        let c = shape.centroid();
        let t = SimilarityTransform::translation(c.x + dx, c.y + dy)
            .compose(&SimilarityTransform::from_scale_rotation(s, angle, 0.0, 0.0))
            .compose(&SimilarityTransform::translation(-c.x, -c.y));
        out.push(FaceRecord {
            id: format!("{}#{k}", record.id),
            image: warp_image(&image, &t, w, h)?,
            shape: t.apply(&shape),
            bbox: Some(bbox),
        });
    }
    Ok(out)
}
