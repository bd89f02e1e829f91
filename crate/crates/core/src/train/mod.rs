//! Optimizer, losses, learning-rate schedule and the training loop.

mod adam;
mod fit;
mod loss;
mod schedule;

pub use adam::Adam;
pub use fit::{
    evaluate, fit, train_step, DatasetValidator, EpochRecord, FitOutputs, TrainConfig, TrainingLog, Validator,
    BEST_WEIGHTS, LAST_WEIGHTS, LOG_FILE,
};
pub use loss::{bce, bce_dice, dice_loss, loss_by_name, loss_names, Bce, BceDice, Dice, Loss, BCE_CLAMP};
pub use schedule::{Action, PlateauSchedule};
