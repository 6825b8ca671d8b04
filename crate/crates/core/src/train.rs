//! Mini-batch training with Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState};
use crate::data::WindowSample;
use crate::error::{Error, Result};
use crate::model::{LossBreakdown, PfvaeModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Seeds the shuffling generator.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 50,
            epochs: 2000,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Contract("batch_size must be positive".into()));
        }
        AdamConfig::with_lr(self.lr).validate()
    }
}

/// Serializable position of the shuffling generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal string: the word position is a 128-bit counter.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Contract(format!("bad rng word position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Model, optimizer state, and shuffling generator advanced one epoch at a time.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: PfvaeModel,
    pub adam: AdamState,
    pub config: TrainConfig,
    rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(model: PfvaeModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(model.params(), AdamConfig::with_lr(config.lr))?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            model,
            adam,
            config,
            rng,
            epoch: 0,
        })
    }

    /// Rebuilds a trainer mid-run, e.g. from a checkpoint.
    pub fn resume(
        model: PfvaeModel,
        config: TrainConfig,
        adam: AdamState,
        rng: RngState,
        epoch: usize,
    ) -> Result<Self> {
        config.validate()?;
        if adam.m.len() != model.params().len() {
            return Err(Error::Contract("optimizer state does not match the model".into()));
        }
        Ok(Self {
            model,
            adam,
            config,
            rng: rng.restore()?,
            epoch,
        })
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    /// One optimizer step on `batch`.
    pub fn step(&mut self, batch: &[WindowSample]) -> Result<LossBreakdown> {
        self.model.params_mut().zero_grad();
        let loss = self.model.training_step(batch)?;
        adam_step(self.model.params_mut(), &mut self.adam)?;
        Ok(loss)
    }

    pub fn train_epoch(&mut self, windows: &[WindowSample]) -> Result<LossBreakdown> {
        self.train_epoch_with(windows, |_, _| {})
    }

    /// Shuffles, walks the mini-batches, and reports each step's loss to
    /// `on_step` (global step index, loss). Returns the sample-weighted mean.
    pub fn train_epoch_with(
        &mut self,
        windows: &[WindowSample],
        mut on_step: impl FnMut(u64, &LossBreakdown),
    ) -> Result<LossBreakdown> {
        if windows.is_empty() {
            return Err(Error::Contract("no training windows".into()));
        }
        if let Some(w) = windows.iter().find(|w| !w.normalized) {
            log::warn!("training on an unnormalized window (start {})", w.window_start);
        }
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut self.rng);
        let mut mean = LossBreakdown::default();
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<WindowSample> = chunk.iter().map(|&i| windows[i].clone()).collect();
            let loss = self.step(&batch)?;
            on_step(self.adam.step_count, &loss);
            let w = chunk.len() as f64 / windows.len() as f64;
            mean.total += loss.total * w;
            mean.reconstruction += loss.reconstruction * w;
            mean.prior += loss.prior * w;
        }
        self.epoch += 1;
        Ok(mean)
    }
}
