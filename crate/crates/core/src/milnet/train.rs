use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adam_step, bce_loss, bce_loss_var, AdamConfig, AdamState, Bag, MilDims, MilError, MilModel};
use crate::autodiff::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_bags: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_bags: 12,
            max_epochs: 150,
            patience: 4,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Stage-2 defaults: smaller step, shorter schedule.
    pub fn stage2() -> Self {
        Self {
            learning_rate: 0.0005,
            max_epochs: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), MilError> {
        let bad = |s: &str| Err(MilError::InvalidConfig(s.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.batch_bags == 0 {
            return bad("batch_bags must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Tracks the best validation loss and counts epochs without improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    /// Records an epoch's loss; returns true when it is a new best.
    pub fn update(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Splits indices into (train, validation) per class. Each class with at
/// least two members contributes `round(fraction * n)` items to validation,
/// clamped to `[1, n - 1]`.
pub fn stratified_split(labels: &[u8], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let k = if n < 2 {
            0
        } else {
            ((fraction * n as f64).round() as usize).clamp(1, n - 1)
        };
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn validation_loss(model: &MilModel, bags: &[Bag]) -> Result<f64, MilError> {
    let out = model.predict_all(bags)?;
    let preds: Vec<f64> = out.iter().map(|o| o.yhat).collect();
    let labels: Vec<u8> = bags.iter().map(|b| b.label).collect();
    bce_loss(&preds, &labels)
}

/// Minibatch Adam on mean BCE with early stopping on validation loss.
/// Returns the parameters from the epoch with the lowest validation loss.
pub fn train_stage1(
    train: &[Bag],
    val: &[Bag],
    dims: MilDims,
    config: &TrainConfig,
) -> Result<(MilModel, TrainHistory), MilError> {
    config.validate()?;
    if train.is_empty() {
        return Err(MilError::EmptySplit("training"));
    }
    if val.is_empty() {
        return Err(MilError::EmptySplit("validation"));
    }
    let first = train[0].label;
    if train.iter().all(|b| b.label == first) {
        return Err(MilError::SingleClass { class: first });
    }
    for b in train.iter().chain(val) {
        if b.dim() != dims.input_dim {
            return Err(MilError::WidthMismatch {
                expected: dims.input_dim,
                actual: b.dim(),
            });
        }
    }

    let mut model = MilModel::new(dims, config.seed);
    let mut best = model.clone();
    let mut adam = AdamState::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut stopper = EarlyStopping::new(config.patience);
    let mut history = TrainHistory {
        initial_val_loss: validation_loss(&model, val)?,
        ..TrainHistory::default()
    };
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_bags) {
            let tape = Tape::new();
            let p = model.params().bind(&tape);
            let mut preds = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &i in batch {
                preds.push(model.forward(&tape, &p, &train[i])?.yhat);
                labels.push(train[i].label);
            }
            let loss = bce_loss_var(&tape, &preds, &labels)?;
            loss_sum += loss.item() * batch.len() as f64;
            let grads = tape.backward(loss)?;
            let store = model.params_mut();
            store.zero_grad();
            store.accumulate(&p, &grads);
            adam_step(store, &mut adam, config.learning_rate, &config.adam)?;
        }
        let val_loss = validation_loss(&model, val)?;
        let train_loss = loss_sum / train.len() as f64;
        log::debug!("stage1 epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if stopper.update(epoch, val_loss) {
            best.params_mut().copy_values_from(model.params());
        }
        if stopper.should_stop() {
            history.stopped_early = true;
            break;
        }
    }
    history.best_epoch = stopper.best_epoch();
    history.best_val_loss = stopper.best();
    best.params_mut().zero_grad();
    Ok((best, history))
}
