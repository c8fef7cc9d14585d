//! Anchor-free detector geometry, raw output container, DFL decoding and
//! inference post-processing.
//!
//! Each scale `i` with stride `stride_i` covers the image with an
//! `s_i × s_i` grid of anchor points (cell centres). Every anchor predicts
//! `Nc` class logits (sigmoid, multi-label) and `4 × L` DFL logits: one
//! categorical distribution over `L` bins per side (left, top, right, bottom).
//! The decoded side offset is `stride × E[bin]`.

mod layers;
mod network;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::numeric::{sigmoid, softmax_into};
use crate::{Error, Result};

pub use network::{Detector, DetectorConfig, ParamKind, TrainForward};

/// Score threshold used when decoding detections as pseudo-labels.
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.5;
/// IoU threshold used by NMS when decoding detections as pseudo-labels.
pub const DEFAULT_NMS_IOU: f64 = 0.7;

/// Square input geometry and the strides of the detection scales.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    image_size: usize,
    strides: Vec<usize>,
}

impl GridSpec {
    pub fn new(image_size: usize, strides: Vec<usize>) -> Result<Self> {
        if image_size == 0 {
            return Err(Error::config("image_size must be positive"));
        }
        if strides.is_empty() {
            return Err(Error::config("at least one stride is required"));
        }
        for (i, &s) in strides.iter().enumerate() {
            if s == 0 || image_size % s != 0 {
                return Err(Error::config(format!(
                    "stride {s} does not divide image size {image_size}"
                )));
            }
            if strides[..i].contains(&s) {
                return Err(Error::config(format!("duplicate stride {s}")));
            }
        }
        Ok(Self {
            image_size,
            strides,
        })
    }

    /// Desk-scale default: 64×64 images, strides 8 and 16.
    pub fn desk() -> Self {
        Self::new(64, vec![8, 16]).expect("valid preset")
    }

    /// Full-size three-scale geometry (640 px, strides 32/16/8).
    pub fn full_scale() -> Self {
        Self::new(640, vec![32, 16, 8]).expect("valid preset")
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn grid_sides(&self) -> Vec<usize> {
        self.strides.iter().map(|s| self.image_size / s).collect()
    }

    pub fn num_anchors(&self) -> usize {
        self.grid_sides().iter().map(|s| s * s).sum()
    }

    /// Anchor index range covered by scale `level`.
    pub fn level_range(&self, level: usize) -> std::ops::Range<usize> {
        let sides = self.grid_sides();
        let start: usize = sides[..level].iter().map(|s| s * s).sum();
        start..start + sides[level] * sides[level]
    }

    /// Pixel centres of all grid cells, scale by scale, row-major, plus the
    /// stride of each anchor.
    pub fn anchors(&self) -> (Array2<f64>, Vec<f64>) {
        let n = self.num_anchors();
        let mut points = Array2::zeros((n, 2));
        let mut strides = Vec::with_capacity(n);
        let mut k = 0;
        for &stride in &self.strides {
            let side = self.image_size / stride;
            for y in 0..side {
                for x in 0..side {
                    points[[k, 0]] = (x as f64 + 0.5) * stride as f64;
                    points[[k, 1]] = (y as f64 + 0.5) * stride as f64;
                    strides.push(stride as f64);
                    k += 1;
                }
            }
        }
        (points, strides)
    }
}

/// Axis-aligned box in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

impl BBox {
    pub fn new(left: f64, top: f64, right: f64, bottom: f64) -> Self {
        Self {
            left,
            top,
            right,
            bottom,
        }
    }

    /// From COCO `[x, y, w, h]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x, y, x + w, y + h)
    }

    pub fn width(&self) -> f64 {
        self.right - self.left
    }

    pub fn height(&self) -> f64 {
        self.bottom - self.top
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    /// `left < right` and `top < bottom`.
    pub fn is_valid(&self) -> bool {
        self.left < self.right && self.top < self.bottom
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.left + self.right),
            0.5 * (self.top + self.bottom),
        )
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x > self.left && x < self.right && y > self.top && y < self.bottom
    }

    pub fn clip(&self, size: f64) -> Self {
        Self::new(
            self.left.clamp(0.0, size),
            self.top.clamp(0.0, size),
            self.right.clamp(0.0, size),
            self.bottom.clamp(0.0, size),
        )
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.right.min(other.right) - self.left.max(other.left);
        let h = self.bottom.min(other.bottom) - self.top.max(other.top);
        w.max(0.0) * h.max(0.0)
    }

    /// Intersection over union; 0 when either box is degenerate.
    pub fn iou(&self, other: &BBox) -> f64 {
        if !self.is_valid() || !other.is_valid() {
            return 0.0;
        }
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// A scored, labelled box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
    /// Anchor that produced the detection.
    pub anchor: usize,
}

/// Post-processed detections for one image, sorted by descending score.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub detections: Vec<Detection>,
}

impl BoxSet {
    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }
}

/// Raw detector output for one image, flattened over all scales.
///
/// Anchors are ordered scale by scale (in [`GridSpec`] stride order) and
/// row-major inside each scale.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorOutput {
    pub grid: GridSpec,
    /// `[anchors × Nc]`
    pub class_logits: Array2<f64>,
    /// `[anchors × 4 × L]`, sides ordered left, top, right, bottom.
    pub dfl_logits: Array3<f64>,
    /// `[anchors × 2]` pixel centres.
    pub anchor_points: Array2<f64>,
    pub anchor_strides: Vec<f64>,
}

impl DetectorOutput {
    /// Builds an output on `grid` and validates every shape and value.
    pub fn new(grid: GridSpec, class_logits: Array2<f64>, dfl_logits: Array3<f64>) -> Result<Self> {
        let n = grid.num_anchors();
        if class_logits.nrows() != n || dfl_logits.shape()[0] != n {
            return Err(Error::shape(format!(
                "expected {n} anchors, got {} class rows and {} dfl rows",
                class_logits.nrows(),
                dfl_logits.shape()[0]
            )));
        }
        if dfl_logits.shape()[1] != 4 || dfl_logits.shape()[2] < 2 {
            return Err(Error::shape(format!(
                "dfl logits must be [anchors × 4 × L≥2], got {:?}",
                dfl_logits.shape()
            )));
        }
        if class_logits.iter().chain(dfl_logits.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite detector output".into()));
        }
        let (anchor_points, anchor_strides) = grid.anchors();
        Ok(Self {
            grid,
            class_logits,
            dfl_logits,
            anchor_points,
            anchor_strides,
        })
    }

    /// An all-zero output, handy for tests and as a gradient accumulator shape.
    pub fn zeros(grid: GridSpec, num_classes: usize, reg_max: usize) -> Self {
        let n = grid.num_anchors();
        Self::new(
            grid,
            Array2::zeros((n, num_classes)),
            Array3::zeros((n, 4, reg_max)),
        )
        .expect("zero output is valid")
    }

    pub fn num_anchors(&self) -> usize {
        self.class_logits.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.class_logits.ncols()
    }

    pub fn reg_max(&self) -> usize {
        self.dfl_logits.shape()[2]
    }

    /// Length of the per-anchor output vector, `Nc + 4·L`.
    pub fn values_per_anchor(&self) -> usize {
        self.num_classes() + 4 * self.reg_max()
    }

    pub(crate) fn check_compatible(&self, other: &DetectorOutput) -> Result<()> {
        if self.grid != other.grid
            || self.class_logits.dim() != other.class_logits.dim()
            || self.dfl_logits.dim() != other.dfl_logits.dim()
        {
            return Err(Error::shape(format!(
                "outputs differ: {:?}/{:?}/{:?} vs {:?}/{:?}/{:?}",
                self.grid,
                self.class_logits.dim(),
                self.dfl_logits.dim(),
                other.grid,
                other.class_logits.dim(),
                other.dfl_logits.dim()
            )));
        }
        Ok(())
    }

    /// Decoded offsets in pixels, `[anchors][side]`.
    pub fn decoded_offsets(&self) -> Vec<[f64; 4]> {
        let l = self.reg_max();
        let mut probs = vec![0.0; l];
        (0..self.num_anchors())
            .map(|a| {
                let mut sides = [0.0; 4];
                for (side, out) in sides.iter_mut().enumerate() {
                    let logits = self.dfl_logits.slice(ndarray::s![a, side, ..]);
                    let logits = logits.as_slice().expect("contiguous");
                    softmax_into(logits, 1.0, &mut probs);
                    let e: f64 = probs.iter().enumerate().map(|(j, p)| j as f64 * p).sum();
                    *out = e * self.anchor_strides[a];
                }
                sides
            })
            .collect()
    }

    /// Unclipped predicted boxes, used inside the losses.
    pub(crate) fn raw_boxes(&self) -> Vec<BBox> {
        self.decoded_offsets()
            .iter()
            .enumerate()
            .map(|(a, o)| {
                let (x, y) = (self.anchor_points[[a, 0]], self.anchor_points[[a, 1]]);
                BBox::new(x - o[0], y - o[1], x + o[2], y + o[3])
            })
            .collect()
    }
}

/// Gradient of a scalar loss with respect to a [`DetectorOutput`]'s logits.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGrad {
    pub class_logits: Array2<f64>,
    pub dfl_logits: Array3<f64>,
}

impl OutputGrad {
    pub fn zeros_like(output: &DetectorOutput) -> Self {
        Self {
            class_logits: Array2::zeros(output.class_logits.dim()),
            dfl_logits: Array3::zeros(output.dfl_logits.dim()),
        }
    }

    pub fn add_scaled(&mut self, other: &OutputGrad, scale: f64) {
        self.class_logits.scaled_add(scale, &other.class_logits);
        self.dfl_logits.scaled_add(scale, &other.dfl_logits);
    }

    pub fn scale(&mut self, factor: f64) {
        self.class_logits *= factor;
        self.dfl_logits *= factor;
    }
}

/// A loss value paired with its gradient with respect to the student output.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub value: f64,
    pub grad: OutputGrad,
}

/// Expected offset of one side: `stride × Σ_j j · softmax(logits)_j`.
pub fn dfl_decode(logits: &[f64], stride: f64) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::config(format!(
            "DFL needs at least 2 bins, got {}",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite DFL logits".into()));
    }
    let mut probs = vec![0.0; logits.len()];
    softmax_into(logits, 1.0, &mut probs);
    let e: f64 = probs.iter().enumerate().map(|(j, p)| j as f64 * p).sum();
    Ok(stride * e)
}

/// One box per anchor, clipped to the image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodedBox {
    pub bbox: BBox,
    /// `false` when the clipped box has zero width or height.
    pub valid: bool,
}

/// Decodes every anchor into `(x − l, y − t, x + r, y + b)`, clipped to the
/// image. Nothing is discarded.
pub fn decode_boxes(output: &DetectorOutput) -> Vec<DecodedBox> {
    let size = output.grid.image_size() as f64;
    output
        .raw_boxes()
        .into_iter()
        .map(|b| {
            let bbox = b.clip(size);
            DecodedBox {
                bbox,
                valid: bbox.is_valid(),
            }
        })
        .collect()
}

/// Keeps every `(anchor, class)` pair whose sigmoid score reaches
/// `score_threshold`, then runs greedy per-class NMS.
///
/// Several classes may fire at one anchor; each yields its own detection.
pub fn postprocess(output: &DetectorOutput, score_threshold: f64, nms_iou_threshold: f64) -> BoxSet {
    let boxes = decode_boxes(output);
    let mut per_class: Vec<Vec<Detection>> = vec![Vec::new(); output.num_classes()];
    for (a, decoded) in boxes.iter().enumerate() {
        for (c, &logit) in output.class_logits.row(a).iter().enumerate() {
            let score = sigmoid(logit);
            if score >= score_threshold {
                per_class[c].push(Detection {
                    bbox: decoded.bbox,
                    class_id: c,
                    score,
                    anchor: a,
                });
            }
        }
    }
    let mut detections = Vec::new();
    for mut candidates in per_class {
        sort_by_score(&mut candidates);
        detections.extend(nms(candidates, nms_iou_threshold));
    }
    sort_by_score(&mut detections);
    BoxSet { detections }
}

fn sort_by_score(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.anchor.cmp(&b.anchor))
            .then(a.class_id.cmp(&b.class_id))
    });
}

/// Greedy NMS over detections already sorted by descending score.
pub fn nms(sorted: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    let mut keep: Vec<Detection> = Vec::new();
    for det in sorted {
        if keep.iter().all(|k| k.bbox.iou(&det.bbox) <= iou_threshold) {
            keep.push(det);
        }
    }
    keep
}
