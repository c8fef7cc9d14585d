//! Class-incremental experiments: schedules, per-task training, evaluation
//! and the memory-size sensitivity figure.

mod evaluate;
mod optim;
mod schedule;
mod trainer;

pub use evaluate::{
    evaluate, interpolated_ap, per_class_ap, predict, sensitivity_delta, split_map, EvalRecord, EvalSettings,
    MetricKind,
};
pub use optim::{OptimConfig, Sgd, StepRates};
pub use schedule::{build_schedule, Scenario, TaskSchedule};
pub use trainer::{
    train_joint, train_task, EpochLog, Learner, Method, MethodConfig, TaskData, TaskLog, TrainConfig,
};
