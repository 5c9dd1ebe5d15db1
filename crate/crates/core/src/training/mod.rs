//! Joint ranking and point-process objective, Adam, and the epoch loop.

pub mod adam;
pub mod loss;
pub mod trainer;

pub use adam::{adam_step, AdamState};
pub use loss::{bpr_loss, joint_loss, regularizer, tpp_nll};
pub use trainer::{
    batch_loss, make_instance, sample_negative, train, BatchLoss, EpochLog, Instance, TrainConfig, TrainOutcome,
};
