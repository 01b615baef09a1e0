//! Optimization: freeze plans, Adam, checkpoints, the training loop and the
//! finite-difference gradient check.

mod adam;
mod checkpoint;
mod freeze;
mod gradcheck;
mod trainer;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use freeze::FreezePlan;
pub use gradcheck::{gradcheck, gradcheck_samples, relative_error, GradcheckOptions, GradcheckReport, ParamCheck};
pub use trainer::{
    batch_gradients, epoch_means, epoch_order, loss_csv, run_training, train_step, write_loss_csv, LossRecord,
    TrainState,
};
