//! Optimization, the two-stage lite pipeline, and evaluation metrics.

pub mod eval;
pub mod fit;
pub mod metrics;
pub mod optim;

pub use eval::{boundary_miou, evaluate, summary_table, EvalReport, Predictor, ScaleResult};
pub use fit::{
    history_csv, train, train_lite_two_stage, LogRow, LossKind, Stage2Config, TrainConfig,
    TrainOutcome, TwoStageOutcome,
};
pub use metrics::{boundary_band, population_std, Confusion};
pub use optim::{poly_lr, sgd_step, Sgd};
