//! Streaming optimization of the discriminative objective: per-example
//! log-domain moving averages of the inner partition sums, the gradient
//! estimator built on them, AdamW, and the epoch/minibatch loop.

mod estimator;
mod optim;
mod train;

pub use estimator::{update_u_linear, update_u_log, EstimatorState};
pub use optim::{AdamW, LrSchedule, SchedulerKind};
pub use train::{
    assemble, evaluate_batch, gradient_estimate, metrics_csv, train, update_estimators, write_metrics_csv, CandidateSource,
    DftSettings, FixedCandidates, GradientEstimate, ItemScores, Method, MinibatchItem, StepMetrics, TrainConfig,
    TrainOutput, Trainer, METRICS_HEADER,
};
