//! Denoising and cycle-consistency losses, the optimizer, and training
//! schedules.

mod config;
mod losses;
mod optim;
mod schedule;
mod step;

pub use config::{Schedule, TrainConfig};
pub use losses::{
    batch_gates, loss_auto, loss_cycle, loss_cycle_from, pseudo_translate, NoiseConfig,
};
pub use optim::{Adam, AdamConfig};
pub use schedule::{
    finetune_init, run_schedule, RunOptions, TrainData, TrainOutcome, ValidationPoint,
};
pub use step::{
    accumulate_step_gradients, step_losses, train_step, StepLosses, StepMetrics, StepRngs,
};
