//! The toy training task: a small model trained on generated sequences and
//! scored on held-out ones.

use super::optim::LrSchedule;
use super::synthetic::{generate_dataset, SyntheticConfig};
use super::train::{evaluate, prepare, sequence_loss, train_toy, EvalReport, TrainConfig, TrainLog, TrainSample};
use crate::error::{arg_err, Result};
use crate::model::{FgstModel, ModelConfig};

/// Held-out sequences are drawn from seeds at this offset from the data seed,
/// so they never coincide with training sequences.
pub const HELDOUT_SEED_OFFSET: u64 = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTask {
    pub model: ModelConfig,
    pub data: SyntheticConfig,
    pub train_sequences: usize,
    pub heldout_sequences: usize,
    pub data_seed: u64,
    pub train: TrainConfig,
}

/// Model small enough to train for 200 iterations in a few minutes on one core.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        frames: 5,
        channels: 8,
        height: 32,
        width: 32,
        levels: 1,
        fgabs_per_stage: 1,
        io_res_blocks: 2,
        ..ModelConfig::default()
    }
}

impl Default for ToyTask {
    fn default() -> Self {
        Self {
            model: toy_model_config(),
            data: SyntheticConfig::default(),
            train_sequences: 16,
            heldout_sequences: 4,
            data_seed: 0,
            train: TrainConfig {
                iterations: 200,
                schedule: LrSchedule::constant(2e-4),
                batch: 4,
                seed: 0,
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyOutcome {
    pub model: FgstModel,
    pub log: TrainLog,
    pub heldout: Vec<TrainSample>,
    /// `(restored, blurry)` per held-out sequence.
    pub reports: Vec<(EvalReport, EvalReport)>,
    /// Mean L1 loss over the held-out sequences.
    pub heldout_l1: f64,
}

impl ToyOutcome {
    /// Mean over held-out sequences of the PSNR gain of the restoration over
    /// the blurry input.
    pub fn mean_gain(&self) -> f64 {
        let n = self.reports.len() as f64;
        self.reports.iter().map(|(r, b)| r.mean_psnr() - b.mean_psnr()).sum::<f64>() / n
    }
}

impl ToyTask {
    fn data_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            frames: self.model.frames,
            height: self.model.height,
            width: self.model.width,
            ..self.data.clone()
        }
    }

    /// Generates the data, trains a freshly initialised model and scores it.
    pub fn run(&self) -> Result<ToyOutcome> {
        self.run_from(FgstModel::new(self.model.clone())?)
    }

    pub fn run_from(&self, mut model: FgstModel) -> Result<ToyOutcome> {
        if self.train_sequences == 0 || self.heldout_sequences == 0 {
            return arg_err("toy task needs training and held-out sequences");
        }
        let data = self.data_config();
        let train = prepare(&model, &generate_dataset(self.data_seed, self.train_sequences, &data)?)?;
        let heldout = prepare(
            &model,
            &generate_dataset(self.data_seed + HELDOUT_SEED_OFFSET, self.heldout_sequences, &data)?,
        )?;
        let log = train_toy(&mut model, &train, &self.train)?;
        let reports = heldout.iter().map(|s| evaluate(&model, s)).collect::<Result<Vec<_>>>()?;
        let mut l1 = 0.0;
        for s in &heldout {
            l1 += sequence_loss(&model, s)?;
        }
        Ok(ToyOutcome {
            model,
            log,
            heldout_l1: l1 / heldout.len() as f64,
            heldout,
            reports,
        })
    }
}
