//! Synthetic data, image quality metrics, optimisation and the training loop.

pub mod checks;
mod metrics;
mod optim;
mod synthetic;
mod toy;
mod train;

pub use metrics::{mse, psnr, ssim, Psnr, PSNR_CAP};
pub use optim::{adam_step, AdamState, LrSchedule, ADAM_EPS, BETA1, BETA2};
pub use synthetic::{
    generate_dataset, generate_sequence, Background, MovingShape, Scene, ShapeKind, SyntheticConfig, SyntheticSequence,
};
pub use toy::{toy_model_config, ToyOutcome, ToyTask, HELDOUT_SEED_OFFSET};
pub use train::{
    evaluate, loss_and_grads, prepare, sequence_loss, train_toy, EvalReport, FrameScore, LogEntry, TrainConfig,
    TrainLog, TrainSample,
};
