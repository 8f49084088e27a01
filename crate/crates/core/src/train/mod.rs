//! Teacher-forced training: NLL loss, RMSProp and the epoch loop.

mod loss;
mod optim;
mod trainer;

pub use loss::{nll_loss, nll_loss_with, LossReduction, NllValue};
pub use optim::{staircase_lr, RmsProp};
pub use trainer::{best_checkpoint, train, TrainConfig, TrainOutcome, Trainer};
