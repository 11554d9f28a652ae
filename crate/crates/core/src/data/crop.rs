use crate::detection::{BBox, BoxSet};
use crate::error::{Error, Result};
use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Fraction of a box's area that must stay inside a crop for the box to be kept.
pub const MIN_VISIBLE_FRACTION: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CropMode {
    Random,
    Center,
}

/// Optional aspect-preserving resize to a target width, then a square crop.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropPolicy {
    pub resize_width: Option<u32>,
    pub crop_size: u32,
    pub mode: CropMode,
}

impl CropPolicy {
    /// Street-scene training crops: resize to width 1080, random 360 crop.
    pub fn street() -> Self {
        Self { resize_width: Some(1080), crop_size: 360, mode: CropMode::Random }
    }

    /// Driving-dataset variant: random 720 crop, no resize.
    pub fn driving() -> Self {
        Self { resize_width: None, crop_size: 720, mode: CropMode::Random }
    }

    /// Whole-image "crop" for small synthetic images.
    pub fn toy(size: u32) -> Self {
        Self { resize_width: None, crop_size: size, mode: CropMode::Center }
    }

    /// Resizes and crops `img`, remapping `boxes` into the crop window.
    ///
    /// Boxes are clipped to the window; a box survives only if at least
    /// [`MIN_VISIBLE_FRACTION`] of its (resized) area remains visible.
    pub fn apply<R: Rng>(&self, img: &RgbImage, boxes: &BoxSet, rng: &mut R) -> Result<(RgbImage, BoxSet)> {
        if self.crop_size == 0 {
            return Err(Error::Config("crop size must be positive".into()));
        }
        let resized;
        let img = match self.resize_width {
            Some(w) if w != img.width() => {
                let h = ((img.height() as f64) * (w as f64) / (img.width() as f64)).round().max(1.0) as u32;
                resized = imageops::resize(img, w, h, FilterType::Triangle);
                &resized
            }
            _ => img,
        };
        let (w, h) = img.dimensions();
        let s = self.crop_size;
        if w < s || h < s {
            return Err(Error::Shape(format!("image {}x{} is smaller than crop size {}", w, h, s)));
        }
        let (x0, y0) = match self.mode {
            CropMode::Center => ((w - s) / 2, (h - s) / 2),
            CropMode::Random => (rng.random_range(0..=w - s), rng.random_range(0..=h - s)),
        };
        let out = if (x0, y0, s, s) == (0, 0, w, h) { img.clone() } else { imageops::crop_imm(img, x0, y0, s, s).to_image() };
        let kept = crop_boxes(boxes, w as f64, h as f64, x0 as f64, y0 as f64, s as f64);
        Ok((out, kept))
    }
}

/// Maps normalized boxes of a `w x h` image into the `size`-pixel window at `(x0, y0)`.
pub fn crop_boxes(boxes: &BoxSet, w: f64, h: f64, x0: f64, y0: f64, size: f64) -> BoxSet {
    let mut kept = Vec::new();
    for b in boxes.iter() {
        let (bx1, by1, bx2, by2) = b.corners();
        let (px1, py1, px2, py2) = (bx1 * w, by1 * h, bx2 * w, by2 * h);
        let full = (px2 - px1) * (py2 - py1);
        let cx1 = px1.max(x0);
        let cy1 = py1.max(y0);
        let cx2 = px2.min(x0 + size);
        let cy2 = py2.min(y0 + size);
        if cx2 <= cx1 || cy2 <= cy1 {
            continue;
        }
        let visible = (cx2 - cx1) * (cy2 - cy1);
        if visible < MIN_VISIBLE_FRACTION * full {
            continue;
        }
        let nb = BBox::from_corners(
            b.class_id,
            (cx1 - x0) / size,
            (cy1 - y0) / size,
            (cx2 - x0) / size,
            (cy2 - y0) / size,
        );
        kept.push(nb.with_confidence(b.confidence));
    }
    BoxSet::new(kept)
}
