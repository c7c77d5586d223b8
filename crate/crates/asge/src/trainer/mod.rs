//! Training machinery: optimizers and schedule, the epoch loop in both
//! sequential and layer-pipelined form, binary checkpoints, and per-epoch
//! metrics emission.

pub mod checkpoint;
pub mod opt;
pub mod session;

pub use checkpoint::Checkpoint;
pub use opt::{
    adamw_step, cosine_lr, sgd_momentum_step, OptimizerHyper, OptimizerKind, ParamState, Schedule,
};
pub use session::{EpochMetrics, RunArtifacts, TrainOptions, TrainSession};
