//! Horizontal flip plus small integer translation, applied jointly to an
//! image and its boxes.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::BBox;
use crate::taskloss::{GroundTruth, GtBox};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augmentation {
    pub flip_prob: f64,
    /// Maximum shift as a fraction of the image side.
    pub translate: f64,
    /// Boxes keeping less than this fraction of their area after the shift
    /// are dropped.
    pub min_visible: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            translate: 0.1,
            min_visible: 0.4,
        }
    }
}

const FILL: f32 = 0.5;

impl Augmentation {
    pub fn none() -> Self {
        Self {
            flip_prob: 0.0,
            translate: 0.0,
            min_visible: 0.0,
        }
    }

    pub fn apply<R: Rng + ?Sized>(&self, image: &Array3<f32>, gt: &GroundTruth, rng: &mut R) -> (Array3<f32>, GroundTruth) {
        let (_, h, w) = image.dim();
        let flip = self.flip_prob > 0.0 && rng.random_bool(self.flip_prob.min(1.0));
        let max_dx = (self.translate * w as f64).floor() as i64;
        let max_dy = (self.translate * h as f64).floor() as i64;
        let dx = if max_dx > 0 { rng.random_range(-max_dx..=max_dx) } else { 0 };
        let dy = if max_dy > 0 { rng.random_range(-max_dy..=max_dy) } else { 0 };
        if !flip && dx == 0 && dy == 0 {
            return (image.clone(), gt.clone());
        }

        let out = Array3::from_shape_fn(image.dim(), |(c, y, x)| {
            let sy = y as i64 - dy;
            let mut sx = x as i64 - dx;
            if sy < 0 || sy >= h as i64 || sx < 0 || sx >= w as i64 {
                return FILL;
            }
            if flip {
                sx = w as i64 - 1 - sx;
            }
            image[[c, sy as usize, sx as usize]]
        });

        let (wf, hf) = (w as f64, h as f64);
        let boxes = gt
            .boxes
            .iter()
            .filter_map(|b| {
                let mut bb = b.bbox;
                if flip {
                    bb = BBox::new(wf - bb.right, bb.top, wf - bb.left, bb.bottom);
                }
                let moved = BBox::new(bb.left + dx as f64, bb.top + dy as f64, bb.right + dx as f64, bb.bottom + dy as f64);
                let clipped = BBox::new(
                    moved.left.clamp(0.0, wf),
                    moved.top.clamp(0.0, hf),
                    moved.right.clamp(0.0, wf),
                    moved.bottom.clamp(0.0, hf),
                );
                let keep = clipped.is_valid()
                    && clipped.width() >= 2.0
                    && clipped.height() >= 2.0
                    && clipped.area() >= self.min_visible * moved.area();
                keep.then_some(GtBox {
                    bbox: clipped,
                    class_id: b.class_id,
                })
            })
            .collect();
        (
            out,
            GroundTruth {
                image_id: gt.image_id,
                boxes,
            },
        )
    }
}
