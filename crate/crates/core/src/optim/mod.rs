//! Gradients, Adam and the training loop.

pub mod adam;
pub mod tape;
pub mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use tape::{Tape, Var};
pub use train::{curve_to_csv, grad_batch_cost, train, CurvePoint, TrainConfig, TrainReport, TRAIN_OFFSET};
