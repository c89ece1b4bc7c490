//! Inference-time anonymization and deanonymization. Nothing in this module
//! writes to disk: callers receive transformed images in memory, and only
//! they decide what gets persisted (the privacy contract is that original
//! images and passwords never do).

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::imageio;
use crate::networks::ModelBundle;
use crate::password::Password;

/// One detected face: pixel-space box corners (x1, y1, x2, y2) and five
/// keypoints (eyes, nose tip, mouth corners).
#[derive(Debug, Clone, Copy)]
pub struct Detection {
    pub bbox: [f32; 4],
    pub keypoints: [[f32; 2]; 5],
    pub confidence: f32,
}

/// Pluggable face detector. Concrete heavy detectors live outside this crate;
/// the built-in implementations cover pre-cropped faces and tests.
pub trait Detector {
    fn detect(&self, image: &Array3<f32>) -> Vec<Detection>;
}

/// Canonical keypoint layout for a face box: eyes at 30%/70% width and 35%
/// height, nose center, mouth corners at 75% height.
pub fn canonical_keypoints(bbox: &[f32; 4]) -> [[f32; 2]; 5] {
    let (x1, y1, x2, y2) = (bbox[0], bbox[1], bbox[2], bbox[3]);
    let (w, h) = (x2 - x1, y2 - y1);
    [
        [x1 + 0.30 * w, y1 + 0.35 * h],
        [x1 + 0.70 * w, y1 + 0.35 * h],
        [x1 + 0.50 * w, y1 + 0.55 * h],
        [x1 + 0.35 * w, y1 + 0.75 * h],
        [x1 + 0.65 * w, y1 + 0.75 * h],
    ]
}

/// Treats the whole image as one face: the right default for pre-cropped
/// corpora, and it keeps the pipeline free of heavyweight dependencies.
pub struct PassthroughDetector;

impl Detector for PassthroughDetector {
    fn detect(&self, image: &Array3<f32>) -> Vec<Detection> {
        let (h, w) = (image.shape()[1] as f32, image.shape()[2] as f32);
        let bbox = [0.0, 0.0, w, h];
        vec![Detection {
            bbox,
            keypoints: canonical_keypoints(&bbox),
            confidence: 1.0,
        }]
    }
}

/// Returns a fixed detection list regardless of input; test scaffolding and
/// the hook for externally computed boxes.
pub struct FixedDetector(pub Vec<Detection>);

impl Detector for FixedDetector {
    fn detect(&self, _image: &Array3<f32>) -> Vec<Detection> {
        self.0.clone()
    }
}

/// T_p(I) on a model-sized face crop. Deterministic in eval mode; the input
/// and password only ever live in memory.
pub fn anonymize(bundle: &mut ModelBundle, image: &Array3<f32>, p: &Password) -> Result<Array3<f32>> {
    let s = bundle.generator.cfg.image_size;
    if image.shape() != [3, s, s] {
        return Err(Error::Config(format!(
            "anonymize expects a [3,{s},{s}] face crop, got {:?} (use whole-image processing for other sizes)",
            image.shape()
        )));
    }
    bundle.generator.infer_one(image, p)
}

/// T_q(A): identical generator call. With q = inverse(p) this recovers the
/// original; with any other q it fabricates a decoy. The module cannot and
/// does not distinguish the cases.
pub fn deanonymize(bundle: &mut ModelBundle, image: &Array3<f32>, q: &Password) -> Result<Array3<f32>> {
    anonymize(bundle, image, q)
}

/// Square-expands a box, clamped to the image; returns (x, y, side).
fn square_crop(bbox: &[f32; 4], img_h: usize, img_w: usize) -> (usize, usize, usize) {
    let (x1, y1, x2, y2) = (bbox[0], bbox[1], bbox[2], bbox[3]);
    let cx = (x1 + x2) / 2.0;
    let cy = (y1 + y2) / 2.0;
    let side = (x2 - x1).max(y2 - y1).min(img_h.min(img_w) as f32);
    let side_i = (side.round() as usize).clamp(2, img_h.min(img_w));
    let x = ((cx - side / 2.0).round() as isize).clamp(0, (img_w - side_i) as isize) as usize;
    let y = ((cy - side / 2.0).round() as isize).clamp(0, (img_h - side_i) as isize) as usize;
    (x, y, side_i)
}

/// Outcome of whole-image processing.
pub struct WholeImageOutcome {
    pub image: Array3<f32>,
    pub faces: usize,
}

/// Detects faces, transforms each crop at model resolution, and feathers the
/// result back in. Pixels outside the detected boxes are bit-identical to the
/// input; with no detections the input comes back unchanged (faces == 0).
pub fn process_whole_image(
    bundle: &mut ModelBundle,
    image: &Array3<f32>,
    p: &Password,
    detector: &dyn Detector,
    blend_margin: f64,
) -> Result<WholeImageOutcome> {
    let detections = detector.detect(image);
    if detections.is_empty() {
        return Ok(WholeImageOutcome {
            image: image.clone(),
            faces: 0,
        });
    }
    let (img_h, img_w) = (image.shape()[1], image.shape()[2]);
    let model_size = bundle.generator.cfg.image_size;
    let mut out = image.clone();
    for det in &detections {
        let (x, y, side) = square_crop(&det.bbox, img_h, img_w);
        let crop = image
            .slice(ndarray::s![.., y..y + side, x..x + side])
            .to_owned();
        let resized = imageio::resize_bilinear(&crop, model_size, model_size);
        let transformed = bundle.generator.infer_one(&resized, p)?;
        let back = imageio::resize_bilinear(&transformed, side, side);
        // Linear alpha feather over a margin inside the crop; alpha is 0 on
        // the crop border so everything outside stays untouched.
        let margin = ((side as f64) * blend_margin).max(1.0);
        for cy in 0..side {
            for cx in 0..side {
                let d = cx.min(cy).min(side - 1 - cx).min(side - 1 - cy) as f64;
                let alpha = (d / margin).min(1.0) as f32;
                for ch in 0..3 {
                    let dst = &mut out[[ch, y + cy, x + cx]];
                    *dst = alpha * back[[ch, cy, cx]] + (1.0 - alpha) * *dst;
                }
            }
        }
    }
    Ok(WholeImageOutcome {
        image: out,
        faces: detections.len(),
    })
}
