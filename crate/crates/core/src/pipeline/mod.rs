//! End-to-end composition, training, evaluation and ablations.

mod ablate;
mod checkpoint;
mod config;
mod gradcheck;
mod model;
mod train;

pub use ablate::{ablate, plan, table_positions, GridPoint, GridSpec};
pub use checkpoint::{BestRecord, Checkpoint, EpochLog, ForeignRecord, MAGIC};
pub use config::{Flags, ForeignConfig, ModelConfig, RunConfig, TrainConfig};
pub use gradcheck::{pipeline_grad_check, small_flagship, small_scene, PIPELINE_FLOOR, PIPELINE_STEP, PIPELINE_TOLERANCE};
pub use model::{Budget, Model, SceneStep, Stages};
pub use train::{
    constant_velocity_baseline, evaluate, evaluate_baseline, evaluate_checkpoint, train, TrainOutcome, BEST_CHECKPOINT,
    LAST_CHECKPOINT, LOG_FILE,
};
