//! Mean average precision with 101-point interpolation, per class and per
//! class split.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::DetectionSet;
use crate::detector::{postprocess, BoxSet, Detector};
use crate::taskloss::GroundTruth;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    /// AP at IoU 0.5.
    #[default]
    #[serde(rename = "map50")]
    Map50,
    /// AP averaged over IoU 0.50, 0.55, …, 0.95.
    #[serde(rename = "map50-95")]
    Map50To95,
}

impl MetricKind {
    pub fn iou_thresholds(self) -> Vec<f64> {
        match self {
            MetricKind::Map50 => vec![0.5],
            MetricKind::Map50To95 => (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
        }
    }
}

/// Old/new/all mAP after one task, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task: usize,
    pub metric: MetricKind,
    pub old: Option<f64>,
    pub new: f64,
    pub all: f64,
    pub per_class: Vec<Option<f64>>,
}

/// Area under the precision envelope sampled at recall 0, 0.01, …, 1.
///
/// `hits` lists detections in descending score order, `true` for a match.
pub fn interpolated_ap(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 || hits.is_empty() {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < level - 1e-12);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// Greedy score-ordered matching of one class at one IoU threshold.
fn class_hits(preds: &[BoxSet], gts: &[GroundTruth], class_id: usize, iou_threshold: f64) -> (Vec<bool>, usize) {
    let mut dets: Vec<(f64, usize, usize)> = Vec::new();
    for (img, set) in preds.iter().enumerate() {
        for (d, det) in set.detections.iter().enumerate() {
            if det.class_id == class_id {
                dets.push((det.score, img, d));
            }
        }
    }
    dets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.boxes.len()]).collect();
    let num_gt = gts
        .iter()
        .map(|g| g.boxes.iter().filter(|b| b.class_id == class_id).count())
        .sum();
    let hits = dets
        .iter()
        .map(|&(_, img, d)| {
            let pred = &preds[img].detections[d].bbox;
            let mut best: Option<(f64, usize)> = None;
            for (g, gt) in gts[img].boxes.iter().enumerate() {
                if gt.class_id != class_id || matched[img][g] {
                    continue;
                }
                let iou = pred.iou(&gt.bbox);
                if iou >= iou_threshold && best.is_none_or(|(b, _)| iou > b) {
                    best = Some((iou, g));
                }
            }
            if let Some((_, g)) = best {
                matched[img][g] = true;
                true
            } else {
                false
            }
        })
        .collect();
    (hits, num_gt)
}

/// AP per class; `None` for classes without ground truth.
pub fn per_class_ap(
    preds: &[BoxSet],
    gts: &[GroundTruth],
    num_classes: usize,
    metric: MetricKind,
) -> Result<Vec<Option<f64>>> {
    if preds.len() != gts.len() {
        return Err(Error::shape(format!(
            "{} prediction sets for {} images",
            preds.len(),
            gts.len()
        )));
    }
    let thresholds = metric.iou_thresholds();
    Ok((0..num_classes)
        .map(|c| {
            let aps: Vec<f64> = thresholds
                .iter()
                .map(|&t| {
                    let (hits, n) = class_hits(preds, gts, c, t);
                    (n > 0).then(|| interpolated_ap(&hits, n))
                })
                .collect::<Option<_>>()?;
            Some(aps.iter().sum::<f64>() / aps.len() as f64)
        })
        .collect())
}

/// Mean AP over the classes of `split` that have ground truth; `None` when
/// none does.
pub fn split_map(per_class: &[Option<f64>], split: &BTreeSet<usize>) -> Option<f64> {
    let aps: Vec<f64> = split.iter().filter_map(|&c| per_class.get(c).copied().flatten()).collect();
    let skipped = split.len() - aps.len();
    if skipped > 0 {
        log::debug!("{skipped} class(es) without ground truth left out of the mean");
    }
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Inference settings used when scoring a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub metric: MetricKind,
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            metric: MetricKind::Map50,
            score_threshold: 0.001,
            nms_iou: 0.7,
        }
    }
}

pub fn predict(model: &Detector, data: &DetectionSet, settings: &EvalSettings) -> Result<Vec<BoxSet>> {
    (0..data.len())
        .map(|i| {
            let out = model.forward(data.image(i))?;
            Ok(postprocess(&out, settings.score_threshold, settings.nms_iou))
        })
        .collect()
}

/// Scores `model` on the fully labelled `test` set. `old` is empty for the
/// first task; "all" is taken over the union of both splits.
pub fn evaluate(
    model: &Detector,
    test: &DetectionSet,
    task: usize,
    old: &BTreeSet<usize>,
    new: &BTreeSet<usize>,
    settings: &EvalSettings,
) -> Result<EvalRecord> {
    let preds = predict(model, test, settings)?;
    let per_class = per_class_ap(&preds, test.ground_truths(), test.num_classes(), settings.metric)?;
    let union: BTreeSet<usize> = old.union(new).copied().collect();
    Ok(EvalRecord {
        task,
        metric: settings.metric,
        old: if old.is_empty() { None } else { Some(split_map(&per_class, old).unwrap_or(0.0)) },
        new: split_map(&per_class, new).unwrap_or(0.0),
        all: split_map(&per_class, &union).unwrap_or(0.0),
        per_class,
    })
}

/// Relative drop `(a − b) / a × 100` between the scores at two memory sizes.
pub fn sensitivity_delta(at_m1: f64, at_m2: f64) -> Result<f64> {
    if at_m1 == 0.0 || !at_m1.is_finite() || !at_m2.is_finite() {
        return Err(Error::Numeric(format!(
            "relative change undefined for reference mAP {at_m1}"
        )));
    }
    Ok((at_m1 - at_m2) / at_m1 * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{BBox, Detection};
    use crate::taskloss::GtBox;
    use approx::assert_abs_diff_eq;

    fn det(b: BBox, class_id: usize, score: f64) -> Detection {
        Detection {
            bbox: b,
            class_id,
            score,
            anchor: 0,
        }
    }

    #[test]
    fn staircase_examples() {
        assert_eq!(interpolated_ap(&[true, false], 1), 1.0);
        assert_eq!(interpolated_ap(&[false, true], 1), 0.5);
        assert_eq!(interpolated_ap(&[], 3), 0.0);
        // recall 0.5 reached at precision 1, recall 1 only at precision 2/3
        let ap = interpolated_ap(&[true, false, true], 2);
        assert_abs_diff_eq!(ap, (51.0 + 50.0 * 2.0 / 3.0) / 101.0, epsilon = 1e-12);
    }

    #[test]
    fn hand_constructed_pr_case() {
        let gt_box = BBox::new(10.0, 10.0, 30.0, 30.0);
        // IoU 0.9 against the gt: shrink one side
        let close = BBox::new(10.0, 10.0, 28.0, 30.0);
        assert_abs_diff_eq!(close.iou(&gt_box), 0.9, epsilon = 1e-12);
        let gts = vec![GroundTruth {
            image_id: 0,
            boxes: vec![GtBox { bbox: gt_box, class_id: 0 }],
        }];
        let preds = vec![BoxSet {
            detections: vec![det(close, 0, 0.9), det(BBox::new(40.0, 40.0, 50.0, 50.0), 0, 0.8)],
        }];
        let ap = per_class_ap(&preds, &gts, 1, MetricKind::Map50).unwrap();
        assert_eq!(ap, vec![Some(1.0)]);
    }

    #[test]
    fn classes_without_gt_are_excluded() {
        let gts = vec![GroundTruth {
            image_id: 0,
            boxes: vec![GtBox {
                bbox: BBox::new(0.0, 0.0, 5.0, 5.0),
                class_id: 1,
            }],
        }];
        let preds = vec![BoxSet {
            detections: vec![det(BBox::new(0.0, 0.0, 5.0, 5.0), 1, 1.0)],
        }];
        let ap = per_class_ap(&preds, &gts, 3, MetricKind::Map50To95).unwrap();
        assert_eq!(ap, vec![None, Some(1.0), None]);
        assert_eq!(split_map(&ap, &BTreeSet::from([0, 1, 2])), Some(1.0));
        assert_eq!(split_map(&ap, &BTreeSet::from([0])), None);
        let none = per_class_ap(&[BoxSet::default()], &gts, 3, MetricKind::Map50).unwrap();
        assert_eq!(none[1], Some(0.0));
    }

    #[test]
    fn duplicate_detections_are_false_positives() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let gts = vec![GroundTruth {
            image_id: 0,
            boxes: vec![GtBox { bbox: b, class_id: 0 }],
        }];
        let (hits, n) = class_hits(
            &[BoxSet {
                detections: vec![det(b, 0, 0.5), det(b, 0, 0.9)],
            }],
            &gts,
            0,
            0.5,
        );
        assert_eq!((hits, n), (vec![true, false], 1));
    }

    #[test]
    fn sensitivity_examples() {
        assert_abs_diff_eq!((sensitivity_delta(56.1, 52.5).unwrap() * 10.0).round() / 10.0, 6.4);
        assert_abs_diff_eq!((sensitivity_delta(60.7, 60.4).unwrap() * 10.0).round() / 10.0, 0.5);
        assert_eq!(sensitivity_delta(3.0, 3.0).unwrap(), 0.0);
        assert!(sensitivity_delta(0.0, 1.0).is_err());
    }
}
