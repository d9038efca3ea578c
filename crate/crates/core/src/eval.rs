//! Inference on samples and dataset-level metric reports.

use crate::data::SegmentationSample;
use crate::error::Result;
use crate::mask::BinaryMask;
use crate::metrics::{ImageMetrics, MetricsReport};
use crate::model::Model;
use crate::postprocess::{postprocess_pipeline, threshold};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub coarse: Tensor<f32>,
    pub fine: Tensor<f32>,
    pub mask: BinaryMask,
}

/// Fine-stage probability map and its mask. With `postprocess` off the mask
/// is the plain 0.5 threshold.
pub fn predict_image<T: Real>(model: &Model<T>, image: &Tensor<f32>, postprocess: bool) -> Result<Prediction> {
    let (coarse, fine) = model.predict(&image.cast())?;
    let (coarse, fine): (Tensor<f32>, Tensor<f32>) = (coarse.cast(), fine.cast());
    let mask = if postprocess { postprocess_pipeline(&fine) } else { threshold(&fine, 0.5) };
    Ok(Prediction { coarse, fine, mask })
}

pub fn evaluate_dataset<T: Real>(
    model: &Model<T>,
    samples: &[SegmentationSample],
    postprocess: bool,
) -> Result<MetricsReport> {
    let records = samples
        .iter()
        .map(|s| {
            let p = predict_image(model, &s.image, postprocess)?;
            ImageMetrics::compute(s.id.clone(), s.view, &p.mask, &s.mask)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_records(records)
}
