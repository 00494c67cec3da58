use crate::error::{Error, Result};
use crate::geometry::{estimate_similarity, place_shape_in_bbox, BoundingBox, Shape, SimilarityTransform};
use crate::imaging::{warp_image, GrayImage};
use crate::model::{dan_forward, DanModel, FRAME};

pub const DEFAULT_HEIGHT_FRACTION: f64 = 0.46;

/// Square box of side `fraction * height` centered in the image.
pub fn square_center_box(width: usize, height: usize, fraction: f64) -> Result<BoundingBox> {
    let side = fraction * height as f64;
    if !(side > 0.0) || side > width as f64 || side > height as f64 {
        return Err(Error::InvalidArgument(format!(
            "a {side}-pixel box does not fit a {width}x{height} image"
        )));
    }
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    BoundingBox::new(cx - side / 2.0, cy - side / 2.0, side, side)
}

#[derive(Clone, Debug)]
pub struct TwoStepResult {
    pub step1_box: BoundingBox,
    pub step1: Shape,
    /// Transform taking the step-1 shape onto the canonical shape.
    pub transform: SimilarityTransform,
    /// Final shape; equals `step1` if the second step could not run.
    pub shape: Shape,
    pub refined: bool,
}

/// Alignment without a detector: first from a centered square box, then
/// again on the image normalized by the first result.
pub fn two_step_align(model: &DanModel, img: &GrayImage, height_fraction: f64) -> Result<TwoStepResult> {
    let step1_box = square_center_box(img.width(), img.height(), height_fraction)?;
    let init = place_shape_in_bbox(&model.canonical, &step1_box)?;
    let step1 = dan_forward(model, img, &init)?.pop().expect("at least one stage");

    let second = || -> Result<(SimilarityTransform, Shape)> {
        let t = estimate_similarity(&step1, &model.canonical)?;
        let inv = t.inverse()?;
        let warped = warp_image(img, &t, FRAME, FRAME)?;
        let init2 = place_shape_in_bbox(&model.canonical, &t.apply(&step1).bounding_box())?;
        let s2 = dan_forward(model, &warped, &init2)?.pop().expect("at least one stage");
        Ok((t, inv.apply(&s2)))
    };
    match second() {
        Ok((transform, shape)) => Ok(TwoStepResult {
            step1_box,
            step1,
            transform,
            shape,
            refined: true,
        }),
        Err(e) => {
            log::warn!("second alignment step skipped: {e}");
            Ok(TwoStepResult {
                step1_box,
                step1: step1.clone(),
                transform: SimilarityTransform::IDENTITY,
                shape: step1,
                refined: false,
            })
        }
    }
}
