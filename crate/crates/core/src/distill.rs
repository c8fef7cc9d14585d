//! Teacher/student output distillation.
//!
//! Three families live here:
//!
//! - the DFL-aware self-distillation: a tempered cross-entropy between the
//!   teacher's and student's per-side offset distributions, weighted per
//!   anchor by the teacher's objectness `w_k = max_j σ(z_kj)`, plus a soft
//!   BCE between class logits gated by `v_k = 1 − IoU(student box, teacher box)`;
//! - plain LwF: L2 over every raw output value;
//! - ERD-style elastic response distillation: L2 on the classification
//!   logits and tempered KL on the DFL distributions, each restricted to
//!   anchors whose teacher response exceeds `mean + α·std`.
//!
//! The gates `w` and `v` are computed from detached values, so every loss
//! here differentiates only through the student's logits. No `τ²`
//! compensation is applied to tempered terms.

use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::detector::{decode_boxes, BBox, Detector, DetectorOutput, LossGrad, OutputGrad};
use crate::numeric::{bce_with_logit, log_softmax, sigmoid, softmax, softmax_into};
use crate::{Error, Result};

/// Hyper-parameters and ablation switches of the DFL-aware distillation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// Temperature of the regression cross-entropy (applied to both sides).
    pub temperature: f64,
    /// Weight of the regression term (`β1`).
    pub beta_reg: f64,
    /// Weight of the classification term (`β2`).
    pub beta_cls: f64,
    /// Cross-entropy on DFL distributions; `false` falls back to L2 on the
    /// regression logits.
    #[serde(rename = "ce")]
    pub use_ce: bool,
    /// Weight each anchor's regression term by the teacher objectness.
    #[serde(rename = "wce")]
    pub use_wce: bool,
    /// Gate each anchor's classification term by `1 − IoU`.
    #[serde(rename = "cls_iou")]
    pub use_cls_iou: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            beta_reg: 4.0e3,
            beta_cls: 0.5e3,
            use_ce: true,
            use_wce: true,
            use_cls_iou: true,
        }
    }
}

/// Factor applied to both `β` weights by [`DistillConfig::desk`].
pub const DESK_BETA_SCALE: f64 = 0.08;

impl DistillConfig {
    /// Weights for the small desk grid. Both terms are means over anchors,
    /// so per-anchor pressure grows as the grid shrinks; `(4000, 500)` on an
    /// 80-anchor grid freezes the model, `(320, 40)` balances old and new
    /// classes on the synthetic benchmark.
    pub fn desk() -> Self {
        let d = Self::default();
        Self {
            beta_reg: d.beta_reg * DESK_BETA_SCALE,
            beta_cls: d.beta_cls * DESK_BETA_SCALE,
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::config("distillation temperature must be > 0"));
        }
        if self.beta_reg < 0.0 || self.beta_cls < 0.0 {
            return Err(Error::config("distillation weights must be ≥ 0"));
        }
        Ok(())
    }
}

/// A frozen copy of the model from the end of a previous task.
#[derive(Clone, Debug)]
pub struct TeacherSnapshot {
    model: Arc<Detector>,
    task_index: usize,
    checksum: u64,
}

impl TeacherSnapshot {
    pub fn freeze(model: &Detector, task_index: usize) -> Self {
        Self {
            checksum: model.checksum(),
            model: Arc::new(model.clone()),
            task_index,
        }
    }

    pub fn task_index(&self) -> usize {
        self.task_index
    }

    pub fn model(&self) -> &Detector {
        &self.model
    }

    /// Checksum recorded at freeze time.
    pub fn frozen_checksum(&self) -> u64 {
        self.checksum
    }

    pub fn forward(&self, image: &ndarray::Array3<f32>) -> Result<DetectorOutput> {
        self.model.forward(image)
    }

    /// Errors unless the student has the same grid, class count and `L`.
    pub fn check_student(&self, student: &Detector) -> Result<()> {
        let (t, s) = (self.model.config(), student.config());
        if t.grid != s.grid || t.num_classes != s.num_classes || t.reg_max != s.reg_max {
            return Err(Error::shape(format!(
                "teacher ({:?}, Nc={}, L={}) and student ({:?}, Nc={}, L={}) differ",
                t.grid, t.num_classes, t.reg_max, s.grid, s.num_classes, s.reg_max
            )));
        }
        Ok(())
    }
}

/// `max_j σ(z_j)`: the teacher's confidence that any object is present.
pub fn objectness_weight(teacher_class_logits: &[f64]) -> f64 {
    teacher_class_logits
        .iter()
        .map(|&z| sigmoid(z))
        .fold(0.0, f64::max)
}

pub fn objectness_weights(teacher: &DetectorOutput) -> Vec<f64> {
    teacher
        .class_logits
        .rows()
        .into_iter()
        .map(|r| objectness_weight(r.as_slice().expect("contiguous")))
        .collect()
}

fn check_dims3(a: &ArrayView3<f64>, b: &ArrayView3<f64>, weights: usize) -> Result<()> {
    if a.dim() != b.dim() || a.shape()[0] != weights {
        return Err(Error::shape(format!(
            "student {:?}, teacher {:?}, {} weights",
            a.dim(),
            b.dim(),
            weights
        )));
    }
    Ok(())
}

/// Weighted tempered cross-entropy between teacher and student DFL
/// distributions, averaged over `(anchor, side)`:
///
/// `(1 / (A·4)) Σ_k Σ_i w_k · H(softmax(t_ki/τ), softmax(s_ki/τ))`.
pub fn lwf_reg_loss(
    student: ArrayView3<f64>,
    teacher: ArrayView3<f64>,
    weights: &[f64],
    temperature: f64,
) -> Result<(f64, Array3<f64>)> {
    check_dims3(&student, &teacher, weights.len())?;
    let (n, sides, l) = student.dim();
    let norm = (n * sides) as f64;
    let mut grad = Array3::zeros((n, sides, l));
    let mut value = 0.0;
    let mut p = vec![0.0; l];
    let mut q = vec![0.0; l];
    for k in 0..n {
        let w = weights[k];
        if w == 0.0 {
            continue;
        }
        for i in 0..sides {
            let s = student.slice(ndarray::s![k, i, ..]).to_vec();
            let t = teacher.slice(ndarray::s![k, i, ..]).to_vec();
            softmax_into(&t, temperature, &mut p);
            softmax_into(&s, temperature, &mut q);
            let log_q = log_softmax(&s, temperature);
            let h: f64 = -p.iter().zip(&log_q).map(|(pj, lq)| pj * lq).sum::<f64>();
            value += w * h;
            for j in 0..l {
                grad[[k, i, j]] = w * (q[j] - p[j]) / (temperature * norm);
            }
        }
    }
    Ok((value / norm, grad))
}

/// Ablation replacement for [`lwf_reg_loss`]: weighted squared distance
/// between the raw DFL logit vectors, averaged over `(anchor, side)`.
pub fn lwf_reg_l2_loss(
    student: ArrayView3<f64>,
    teacher: ArrayView3<f64>,
    weights: &[f64],
) -> Result<(f64, Array3<f64>)> {
    check_dims3(&student, &teacher, weights.len())?;
    let (n, sides, _) = student.dim();
    let norm = (n * sides) as f64;
    let mut value = 0.0;
    let mut grad = &student - &teacher;
    for (k, mut g) in grad.axis_iter_mut(Axis(0)).enumerate() {
        let w = weights[k];
        value += w * g.iter().map(|d| d * d).sum::<f64>();
        g.mapv_inplace(|d| 2.0 * w * d / norm);
    }
    Ok((value / norm, grad))
}

/// Per-anchor classification gates `v_k = 1 − IoU(student_k, teacher_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct IouGate {
    pub values: Vec<f64>,
    /// Anchors where either box was degenerate (IoU taken as 0, so `v = 1`).
    pub degenerate: usize,
}

pub fn iou_gate(student_boxes: &[BBox], teacher_boxes: &[BBox]) -> Result<IouGate> {
    if student_boxes.len() != teacher_boxes.len() {
        return Err(Error::shape(format!(
            "{} student boxes vs {} teacher boxes",
            student_boxes.len(),
            teacher_boxes.len()
        )));
    }
    let mut degenerate = 0;
    let values = student_boxes
        .iter()
        .zip(teacher_boxes)
        .map(|(s, t)| {
            if !s.is_valid() || !t.is_valid() {
                degenerate += 1;
            }
            (1.0 - s.iou(t)).clamp(0.0, 1.0)
        })
        .collect();
    Ok(IouGate { values, degenerate })
}

/// Gated soft-target BCE between class logits, averaged over `(anchor, class)`:
///
/// `(1 / (A·Nc)) Σ_k Σ_j v_k · BCE(σ(zᵗ_kj), σ(zˢ_kj))`.
pub fn lwf_cls_loss(
    student: ArrayView2<f64>,
    teacher: ArrayView2<f64>,
    gates: &[f64],
) -> Result<(f64, Array2<f64>)> {
    if student.dim() != teacher.dim() || student.nrows() != gates.len() {
        return Err(Error::shape(format!(
            "student {:?}, teacher {:?}, {} gates",
            student.dim(),
            teacher.dim(),
            gates.len()
        )));
    }
    let (n, nc) = student.dim();
    let norm = (n * nc) as f64;
    let mut value = 0.0;
    let mut grad = Array2::zeros((n, nc));
    for k in 0..n {
        let v = gates[k];
        if v == 0.0 {
            continue;
        }
        for j in 0..nc {
            let target = sigmoid(teacher[[k, j]]);
            let zs = student[[k, j]];
            value += v * bce_with_logit(zs, target);
            grad[[k, j]] = v * (sigmoid(zs) - target) / norm;
        }
    }
    Ok((value / norm, grad))
}

/// Breakdown of [`yolo_lwf_total`] before the `β` weights.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct YoloLwfTerms {
    pub reg: f64,
    pub cls: f64,
    pub mean_weight: f64,
    pub mean_gate: f64,
}

/// `β1 · L_reg + β2 · L_cls` with the configured ablation switches.
pub fn yolo_lwf_total(
    student: &DetectorOutput,
    teacher: &DetectorOutput,
    cfg: &DistillConfig,
) -> Result<(LossGrad, YoloLwfTerms)> {
    cfg.validate()?;
    student.check_compatible(teacher)?;
    let n = student.num_anchors();
    let mut grad = OutputGrad::zeros_like(student);
    let mut terms = YoloLwfTerms::default();
    if cfg.beta_reg == 0.0 && cfg.beta_cls == 0.0 {
        return Ok((LossGrad { value: 0.0, grad }, terms));
    }

    let weights = if cfg.use_wce {
        objectness_weights(teacher)
    } else {
        vec![1.0; n]
    };
    terms.mean_weight = weights.iter().sum::<f64>() / n as f64;
    let (reg, reg_grad) = if cfg.use_ce {
        lwf_reg_loss(
            student.dfl_logits.view(),
            teacher.dfl_logits.view(),
            &weights,
            cfg.temperature,
        )?
    } else {
        lwf_reg_l2_loss(student.dfl_logits.view(), teacher.dfl_logits.view(), &weights)?
    };
    terms.reg = reg;
    grad.dfl_logits.scaled_add(cfg.beta_reg, &reg_grad);

    let gates = if cfg.use_cls_iou {
        let s: Vec<BBox> = decode_boxes(student).iter().map(|d| d.bbox).collect();
        let t: Vec<BBox> = decode_boxes(teacher).iter().map(|d| d.bbox).collect();
        iou_gate(&s, &t)?.values
    } else {
        vec![1.0; n]
    };
    terms.mean_gate = gates.iter().sum::<f64>() / n as f64;
    let (cls, cls_grad) = lwf_cls_loss(student.class_logits.view(), teacher.class_logits.view(), &gates)?;
    terms.cls = cls;
    grad.class_logits.scaled_add(cfg.beta_cls, &cls_grad);

    let value = cfg.beta_reg * reg + cfg.beta_cls * cls;
    Ok((LossGrad { value, grad }, terms))
}

/// `λ · mean((student − teacher)²)` over every raw output value.
pub fn vanilla_lwf_loss(student: &DetectorOutput, teacher: &DetectorOutput, lambda: f64) -> Result<LossGrad> {
    student.check_compatible(teacher)?;
    let count = (student.class_logits.len() + student.dfl_logits.len()) as f64;
    let dc = &student.class_logits - &teacher.class_logits;
    let dd = &student.dfl_logits - &teacher.dfl_logits;
    let value = lambda * (dc.iter().chain(dd.iter()).map(|d| d * d).sum::<f64>()) / count;
    let scale = 2.0 * lambda / count;
    Ok(LossGrad {
        value,
        grad: OutputGrad {
            class_logits: dc * scale,
            dfl_logits: dd * scale,
        },
    })
}

/// Elastic response distillation hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ErdConfig {
    /// Std multiplier of the classification-head selection threshold.
    pub alpha_cls: f64,
    /// Std multiplier of the regression-head selection threshold.
    pub alpha_reg: f64,
    pub lambda_cls: f64,
    pub lambda_reg: f64,
    /// Softmax temperature used to score DFL distributions for selection.
    pub selection_temperature: f64,
    /// Temperature of the regression KL divergence.
    pub kl_temperature: f64,
}

impl Default for ErdConfig {
    fn default() -> Self {
        Self {
            alpha_cls: 2.0,
            alpha_reg: 2.0,
            lambda_cls: 0.01,
            lambda_reg: 1.0,
            selection_temperature: 1.0,
            kl_temperature: 10.0,
        }
    }
}

impl ErdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_cls > 0.0 && self.alpha_reg > 0.0) {
            return Err(Error::config("ERD α1, α2 must be > 0"));
        }
        if !(self.selection_temperature > 0.0 && self.kl_temperature > 0.0) {
            return Err(Error::config("ERD temperatures must be > 0"));
        }
        Ok(())
    }
}

/// Anchors selected at each head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ErdSelection {
    pub cls: Vec<usize>,
    pub reg: Vec<usize>,
}

fn above_elastic_threshold(stats: &[f64], alpha: f64) -> Vec<usize> {
    let n = stats.len() as f64;
    let mean = stats.iter().sum::<f64>() / n;
    let std = (stats.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
    let threshold = mean + alpha * std;
    stats
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > threshold)
        .map(|(k, _)| k)
        .collect()
}

/// Selects anchors whose teacher response clears `mean + α·std`.
///
/// The classification statistic is the max class score; the regression
/// statistic is the mean over sides of the top DFL probability at the
/// selection temperature.
pub fn erd_selection(teacher: &DetectorOutput, cfg: &ErdConfig) -> ErdSelection {
    let cls_stats = objectness_weights(teacher);
    let reg_stats: Vec<f64> = (0..teacher.num_anchors())
        .map(|k| {
            (0..4)
                .map(|i| {
                    let t = teacher.dfl_logits.slice(ndarray::s![k, i, ..]).to_vec();
                    softmax(&t, cfg.selection_temperature)
                        .into_iter()
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 4.0
        })
        .collect();
    ErdSelection {
        cls: above_elastic_threshold(&cls_stats, cfg.alpha_cls),
        reg: above_elastic_threshold(&reg_stats, cfg.alpha_reg),
    }
}

/// `λ1 · L2(cls logits on selected anchors) + λ2 · KL_τ(teacher ‖ student)`
/// on anchors selected at the regression head. Empty selections contribute 0.
pub fn erd_loss(student: &DetectorOutput, teacher: &DetectorOutput, cfg: &ErdConfig) -> Result<LossGrad> {
    cfg.validate()?;
    student.check_compatible(teacher)?;
    let sel = erd_selection(teacher, cfg);
    erd_loss_with_selection(student, teacher, cfg, &sel)
}

/// [`erd_loss`] for a precomputed selection.
pub fn erd_loss_with_selection(
    student: &DetectorOutput,
    teacher: &DetectorOutput,
    cfg: &ErdConfig,
    sel: &ErdSelection,
) -> Result<LossGrad> {
    student.check_compatible(teacher)?;
    let mut grad = OutputGrad::zeros_like(student);
    let nc = student.num_classes();
    let l = student.reg_max();
    let mut value = 0.0;

    if !sel.cls.is_empty() {
        let norm = (sel.cls.len() * nc) as f64;
        let mut cls = 0.0;
        for &k in &sel.cls {
            for j in 0..nc {
                let d = student.class_logits[[k, j]] - teacher.class_logits[[k, j]];
                cls += d * d;
                grad.class_logits[[k, j]] = cfg.lambda_cls * 2.0 * d / norm;
            }
        }
        value += cfg.lambda_cls * cls / norm;
    }

    if !sel.reg.is_empty() {
        let tau = cfg.kl_temperature;
        let norm = (sel.reg.len() * 4) as f64;
        let mut kl = 0.0;
        for &k in &sel.reg {
            for i in 0..4 {
                let s = student.dfl_logits.slice(ndarray::s![k, i, ..]).to_vec();
                let t = teacher.dfl_logits.slice(ndarray::s![k, i, ..]).to_vec();
                let log_p = log_softmax(&t, tau);
                let log_q = log_softmax(&s, tau);
                for j in 0..l {
                    let p = log_p[j].exp();
                    kl += p * (log_p[j] - log_q[j]);
                    grad.dfl_logits[[k, i, j]] = cfg.lambda_reg * (log_q[j].exp() - p) / (tau * norm);
                }
            }
        }
        value += cfg.lambda_reg * kl / norm;
    }
    Ok(LossGrad { value, grad })
}
