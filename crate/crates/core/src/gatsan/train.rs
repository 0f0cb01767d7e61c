use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{infomax_loss_var, scalewise_loss_var, GatError, GraphSample, Stage2Config, Stage2Model};
use crate::autodiff::{Bound, Tape, Var};
use crate::milnet::{adam_step, AdamState, EarlyStopping, EpochRecord, MilError, TrainHistory};

/// `(total, infomax, scalewise)` for one core. The scalewise weights are
/// the current `c^m` values taken as constants.
pub fn sample_loss<'t>(
    model: &Stage2Model,
    tape: &'t Tape,
    p: &Bound<'t>,
    sample: &GraphSample,
) -> Result<(Var<'t>, Var<'t>, Var<'t>), GatError> {
    sample_loss_with_weights(model, tape, p, sample, None)
}

/// As [`sample_loss`], optionally with fixed scalewise weights in place of
/// the current `c^m`.
pub fn sample_loss_with_weights<'t>(
    model: &Stage2Model,
    tape: &'t Tape,
    p: &Bound<'t>,
    sample: &GraphSample,
    weights: Option<&[f64]>,
) -> Result<(Var<'t>, Var<'t>, Var<'t>), GatError> {
    let cfg = model.config();
    let f = model.forward(tape, p, sample)?;
    let info = infomax_loss_var(f.h, f.g, cfg.tau)?;
    let weights = match weights {
        Some(w) => w.to_vec(),
        None => f.san.c.data().to_vec(),
    };
    let levels = sample
        .alignment
        .level_ranges
        .iter()
        .map(|r| f.h.gather_rows(&r.clone().collect::<Vec<_>>()))
        .collect::<Result<Vec<_>, _>>()?;
    let scale = scalewise_loss_var(tape, &levels, &weights, cfg.tau, cfg.scale_loss_contrastive)?;
    Ok((info.add(scale)?, info, scale))
}

fn mean_loss(model: &Stage2Model, samples: &[GraphSample]) -> Result<f64, GatError> {
    let losses = samples
        .par_iter()
        .map(|s| {
            let tape = Tape::new();
            let p = model.params().bind_frozen(&tape);
            Ok(sample_loss(model, &tape, &p, s)?.0.item())
        })
        .collect::<Result<Vec<f64>, GatError>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Self-supervised training on `InfoMax + scalewise`. Early stopping
/// monitors the validation set, or the training set when no validation
/// cores are given.
pub fn train_stage2(
    train: &[GraphSample],
    val: &[GraphSample],
    config: &Stage2Config,
) -> Result<(Stage2Model, TrainHistory), GatError> {
    let tc = &config.train;
    tc.validate()?;
    if config.heads == 0 || config.head_dim == 0 || config.out_dim == 0 {
        return Err(MilError::InvalidConfig("GAT dimensions must be positive".into()).into());
    }
    let first = train.first().ok_or(GatError::EmptyGraphSet)?;
    let monitor = if val.is_empty() { train } else { val };
    let mut model = Stage2Model::new(first.features.cols(), first.num_levels(), *config, tc.seed);
    for s in train.iter().chain(val) {
        model.check(s)?;
    }
    let mut best = model.clone();
    let mut adam = AdamState::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(1));
    let mut stopper = EarlyStopping::new(tc.patience);
    let mut history = TrainHistory {
        initial_val_loss: mean_loss(&model, monitor)?,
        ..TrainHistory::default()
    };
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=tc.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(tc.batch_bags) {
            let tape = Tape::new();
            let p = model.params().bind(&tape);
            let mut total = tape.scalar(0.0);
            for &i in batch {
                total = total.add(sample_loss(&model, &tape, &p, &train[i])?.0)?;
            }
            let loss = total.scale(1.0 / batch.len() as f64);
            loss_sum += loss.item() * batch.len() as f64;
            let grads = tape.backward(loss)?;
            let store = model.params_mut();
            store.zero_grad();
            store.accumulate(&p, &grads);
            adam_step(store, &mut adam, tc.learning_rate, &tc.adam)?;
        }
        let val_loss = mean_loss(&model, monitor)?;
        let train_loss = loss_sum / train.len() as f64;
        log::debug!("stage2 epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
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

/// Mean total loss over a set of cores with frozen parameters.
pub fn evaluate_loss(model: &Stage2Model, samples: &[GraphSample]) -> Result<f64, GatError> {
    if samples.is_empty() {
        return Err(GatError::EmptyGraphSet);
    }
    mean_loss(model, samples)
}
