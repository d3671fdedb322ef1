//! Desk-scale architectures, the masked forward pass, SGD training and
//! checkpoints.

mod checkpoint;
mod model;
mod train;

pub use checkpoint::Checkpoint;
pub use model::{
    count_correct, cross_entropy, Arch, Evaluation, ForwardTrace, GraphPass, Layer, ModelState, Overlay,
    ParamInfo, ParamKind,
};
pub use train::{train, LrDrop, LrSchedule, Precision, TrainConfig, Trainer, DIVERGENCE_STREAK};
