//! Per-task training: supervised loss on the current task's labels plus the
//! method's distillation against the frozen previous model, on current and
//! replayed images alike.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::evaluate::{evaluate, EvalRecord, EvalSettings};
use super::optim::{OptimConfig, Sgd};
use super::schedule::TaskSchedule;
use crate::data::{Augmentation, DetectionSet};
use crate::detector::{Detector, DetectorOutput, LossGrad, OutputGrad};
use crate::distill::{erd_loss, vanilla_lwf_loss, yolo_lwf_total, DistillConfig, ErdConfig, TeacherSnapshot};
use crate::replay::{MemorySample, ReplayMemory};
use crate::taskloss::{assign, task_loss, ClassMask, GroundTruth, LossGains};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "finetune")]
    Finetune,
    #[serde(rename = "lwf")]
    Lwf,
    #[serde(rename = "lwf+ocdm")]
    LwfOcdm,
    #[serde(rename = "erd")]
    Erd,
    #[serde(rename = "erd+ocdm")]
    ErdOcdm,
    #[serde(rename = "yolo-lwf")]
    YoloLwf,
    #[serde(rename = "yolo-lwf+ocdm")]
    YoloLwfOcdm,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Finetune,
        Method::Lwf,
        Method::LwfOcdm,
        Method::Erd,
        Method::ErdOcdm,
        Method::YoloLwf,
        Method::YoloLwfOcdm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::Lwf => "lwf",
            Method::LwfOcdm => "lwf+ocdm",
            Method::Erd => "erd",
            Method::ErdOcdm => "erd+ocdm",
            Method::YoloLwf => "yolo-lwf",
            Method::YoloLwfOcdm => "yolo-lwf+ocdm",
        }
    }

    pub fn uses_memory(self) -> bool {
        matches!(self, Method::LwfOcdm | Method::ErdOcdm | Method::YoloLwfOcdm)
    }

    fn is_yolo_lwf(self) -> bool {
        matches!(self, Method::YoloLwf | Method::YoloLwfOcdm)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMethod {
                given: s.to_string(),
                valid: Method::ALL.map(Method::name).join(", "),
            })
    }
}

/// Everything that distinguishes one continual method run from another.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodConfig {
    pub method: Method,
    pub distill: DistillConfig,
    pub erd: ErdConfig,
    /// Weight of the plain L2 LwF term.
    pub lwf_lambda: f64,
    /// Replay capacity for the `+ocdm` methods.
    pub memory_size: usize,
    /// Drop old-class columns from the supervised classification loss.
    /// Only the YOLO LwF methods mask.
    pub mask: bool,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            method: Method::YoloLwf,
            distill: DistillConfig::desk(),
            erd: ErdConfig::default(),
            lwf_lambda: 1.0,
            memory_size: 50,
            mask: true,
        }
    }
}

impl MethodConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            ..Default::default()
        }
    }

    fn masks_old_classes(&self) -> bool {
        self.method.is_yolo_lwf() && self.mask
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub top_k: usize,
    pub gains: LossGains,
    pub augmentation: Augmentation,
    /// Also augment replayed images.
    pub augment_replay: bool,
    pub eval: EvalSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            optim: OptimConfig::default(),
            top_k: 10,
            gains: LossGains::default(),
            augmentation: Augmentation::default(),
            augment_replay: true,
            eval: EvalSettings::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub task_loss: f64,
    pub distill_loss: f64,
    pub replay_loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    pub task: usize,
    pub images: usize,
    pub steps: usize,
    pub epochs: Vec<EpochLog>,
    /// Total loss of every optimisation step, in order.
    pub step_losses: Vec<f64>,
    pub replay_draws_with_replacement: usize,
    pub replay_draws_empty: usize,
    pub teacher_checksum: Option<u64>,
}

/// One image prepared for a step.
struct Item {
    image: Array3<f32>,
    gt: Option<GroundTruth>,
}

fn distill_loss(
    method: &MethodConfig,
    student: &DetectorOutput,
    teacher: &DetectorOutput,
) -> Result<Option<LossGrad>> {
    Ok(match method.method {
        Method::Finetune => None,
        Method::Lwf | Method::LwfOcdm => Some(vanilla_lwf_loss(student, teacher, method.lwf_lambda)?),
        Method::Erd | Method::ErdOcdm => Some(erd_loss(student, teacher, &method.erd)?),
        Method::YoloLwf | Method::YoloLwfOcdm => Some(yolo_lwf_total(student, teacher, &method.distill)?.0),
    })
}

/// Inputs of one task's training run.
pub struct TaskData<'a> {
    pub task: usize,
    /// Training split with labels restricted to the current task's classes.
    pub train: &'a DetectionSet,
    /// Images of `train` used this task.
    pub indices: Vec<usize>,
    pub current: BTreeSet<usize>,
    pub old: BTreeSet<usize>,
    /// Where replayed images are looked up by image id.
    pub replay_source: &'a DetectionSet,
}

/// Trains `model` on one task. The teacher only ever runs in inference mode
/// and is checked to be unchanged afterwards.
pub fn train_task(
    model: &mut Detector,
    teacher: Option<&TeacherSnapshot>,
    memory: Option<&ReplayMemory>,
    data: &TaskData<'_>,
    method: &MethodConfig,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TaskLog> {
    if let Some(t) = teacher {
        t.check_student(model)?;
    }
    if data.indices.is_empty() {
        return Err(Error::config(format!("task {} has no training images", data.task + 1)));
    }
    let nc = model.num_classes();
    let mask = if method.masks_old_classes() {
        let active: BTreeSet<usize> = (0..nc).filter(|c| !data.old.contains(c)).collect();
        ClassMask::new(active, data.old.iter().copied(), nc)?
    } else {
        ClassMask::unmasked(nc)
    };
    let replay_lookup: BTreeMap<u64, usize> = data
        .replay_source
        .annotations
        .images
        .iter()
        .enumerate()
        .map(|(i, e)| (e.id, i))
        .collect();

    let bs = cfg.batch_size.max(1);
    let mut order = data.indices.clone();
    let iters_per_epoch = order.len().div_ceil(bs);
    let mut sgd = Sgd::new(model, &cfg.optim);
    let mut log = TaskLog {
        task: data.task,
        images: order.len(),
        teacher_checksum: teacher.map(|t| t.frozen_checksum()),
        ..Default::default()
    };
    let mut iteration = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut ep = EpochLog::default();
        let mut batches = 0usize;
        for chunk in order.chunks(bs) {
            let mut items: Vec<Item> = chunk
                .iter()
                .map(|&i| {
                    let (image, gt) = cfg.augmentation.apply(data.train.image(i), data.train.ground_truth(i), rng);
                    Item { image, gt: Some(gt) }
                })
                .collect();
            if let (Some(memory), Some(_)) = (memory, teacher) {
                let draw = memory.sample_batch(chunk.len(), rng);
                log.replay_draws_with_replacement += draw.with_replacement as usize;
                log.replay_draws_empty += draw.empty as usize;
                for idx in draw.indices {
                    let id = memory.samples()[idx].image_id;
                    let src = *replay_lookup
                        .get(&id)
                        .ok_or_else(|| Error::Integrity(format!("replayed image {id} not in the training split")))?;
                    let raw = data.replay_source.image(src);
                    let image = if cfg.augment_replay {
                        let empty = GroundTruth { image_id: id, boxes: vec![] };
                        cfg.augmentation.apply(raw, &empty, rng).0
                    } else {
                        raw.clone()
                    };
                    items.push(Item { image, gt: None });
                }
            }
            let refs: Vec<&Array3<f32>> = items.iter().map(|it| &it.image).collect();
            let fwd = model.forward_train(&refs)?;
            let mut grads = Vec::with_capacity(items.len());
            let mut step_loss = 0.0;
            for (item, out) in items.iter().zip(&fwd.outputs) {
                let mut grad = OutputGrad::zeros_like(out);
                if let Some(gt) = &item.gt {
                    let asg = assign(out, gt, cfg.top_k, &mask)?;
                    let (lg, _) = task_loss(out, gt, &asg, &mask, &cfg.gains)?;
                    ep.task_loss += lg.value;
                    step_loss += lg.value;
                    grad.add_scaled(&lg.grad, 1.0);
                }
                if let Some(t) = teacher {
                    let t_out = t.forward(&item.image)?;
                    if let Some(lg) = distill_loss(method, out, &t_out)? {
                        if item.gt.is_some() {
                            ep.distill_loss += lg.value;
                        } else {
                            ep.replay_loss += lg.value;
                        }
                        step_loss += lg.value;
                        grad.add_scaled(&lg.grad, 1.0);
                    }
                }
                grads.push(grad);
            }
            if !step_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at task {} epoch {epoch}",
                    data.task + 1
                )));
            }
            model.backward(fwd, &grads)?;
            let rates = cfg.optim.rates(iteration, iters_per_epoch, cfg.epochs);
            ep.grad_norm += sgd.step(model, rates);
            log.step_losses.push(step_loss);
            iteration += 1;
            batches += 1;
        }
        let n = order.len() as f64;
        ep.task_loss /= n;
        ep.distill_loss /= n;
        ep.replay_loss /= n;
        ep.grad_norm /= batches as f64;
        log::debug!(
            "task {} epoch {}: task {:.4} distill {:.4} replay {:.4} |g| {:.3}",
            data.task + 1,
            epoch + 1,
            ep.task_loss,
            ep.distill_loss,
            ep.replay_loss,
            ep.grad_norm
        );
        log.epochs.push(ep);
    }
    log.steps = iteration;
    if let Some(t) = teacher {
        if t.model().checksum() != t.frozen_checksum() {
            return Err(Error::Integrity("teacher parameters changed during training".into()));
        }
    }
    Ok(log)
}

/// A model moving through a schedule, one task at a time. Cloning a
/// learner branches the run.
#[derive(Clone, Debug)]
pub struct Learner {
    pub model: Detector,
    pub memory: Option<ReplayMemory>,
    pub next_task: usize,
    pub records: Vec<EvalRecord>,
    pub logs: Vec<TaskLog>,
}

fn task_rng(seed: u64, task: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task as u64 + 1);
    rng
}

impl Learner {
    pub fn new(model: Detector) -> Self {
        Self {
            model,
            memory: None,
            next_task: 0,
            records: Vec::new(),
            logs: Vec::new(),
        }
    }

    pub fn is_done(&self, schedule: &TaskSchedule) -> bool {
        self.next_task >= schedule.num_tasks()
    }

    /// Trains the next task of `schedule`, then evaluates on `test`.
    ///
    /// For replay methods the memory is refreshed with the previous task's
    /// images right before training, so a learner that finished task 1
    /// under any method can continue under a replay method.
    pub fn train_next(
        &mut self,
        train: &DetectionSet,
        test: &DetectionSet,
        schedule: &TaskSchedule,
        method: &MethodConfig,
        cfg: &TrainConfig,
        seed: u64,
    ) -> Result<&EvalRecord> {
        let task = self.next_task;
        if task >= schedule.num_tasks() {
            return Err(Error::config("schedule already finished"));
        }
        let current = schedule.tasks[task].clone();
        let old = schedule.classes_before(task);
        let teacher = (task > 0).then(|| TeacherSnapshot::freeze(&self.model, task - 1));

        if method.method.uses_memory() && task > 0 {
            let prev = &schedule.tasks[task - 1];
            let prev_view = train.filter_for_task(prev);
            let incoming = prev_view
                .indices_with_any(prev)
                .into_iter()
                .map(|i| {
                    let gt = prev_view.ground_truth(i);
                    MemorySample::new(gt.image_id, gt.boxes.iter().map(|b| b.class_id), task - 1)
                })
                .collect();
            let memory = self.memory.get_or_insert_with(|| ReplayMemory::new(method.memory_size));
            let report = memory.update(incoming);
            log::info!(
                "memory after task {}: {} samples ({} evicted), distance to uniform {:.3}",
                task,
                memory.len(),
                report.evicted,
                report.distance_to_uniform
            );
        }

        let view = train.filter_for_task(&current);
        let data = TaskData {
            task,
            indices: view.indices_with_any(&current),
            train: &view,
            current: current.clone(),
            old: old.clone(),
            replay_source: train,
        };
        let memory = if method.method.uses_memory() { self.memory.as_ref() } else { None };
        let mut rng = task_rng(seed, task);
        let log = train_task(&mut self.model, teacher.as_ref(), memory, &data, method, cfg, &mut rng)?;
        self.logs.push(log);
        let record = evaluate(&self.model, test, task, &old, &current, &cfg.eval)?;
        self.next_task += 1;
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }

    /// Runs every remaining task.
    pub fn run(
        &mut self,
        train: &DetectionSet,
        test: &DetectionSet,
        schedule: &TaskSchedule,
        method: &MethodConfig,
        cfg: &TrainConfig,
        seed: u64,
    ) -> Result<()> {
        while !self.is_done(schedule) {
            self.train_next(train, test, schedule, method, cfg, seed)?;
        }
        Ok(())
    }
}

/// Trains on every class at once: the upper reference for continual runs.
pub fn train_joint(
    model: &mut Detector,
    train: &DetectionSet,
    test: &DetectionSet,
    classes: &BTreeSet<usize>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(TaskLog, EvalRecord)> {
    let view = train.filter_for_task(classes);
    let data = TaskData {
        task: 0,
        indices: view.indices_with_any(classes),
        train: &view,
        current: classes.clone(),
        old: BTreeSet::new(),
        replay_source: train,
    };
    let mut rng = task_rng(seed, 0);
    let log = train_task(model, None, None, &data, &MethodConfig::new(Method::Finetune), cfg, &mut rng)?;
    let record = evaluate(model, test, 0, &BTreeSet::new(), classes, &cfg.eval)?;
    Ok((log, record))
}
