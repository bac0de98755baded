use log::debug;
use rand::seq::SliceRandom;
use rand::Rng as _;

use super::buffer::RehearsalBuffer;
use super::loss::{past_to_present_loss, Sample};
use super::TrainConfig;
use crate::error::{contract, Result};
use crate::model::Cosformer;
use crate::numerics::{AdamState, Graph};
use crate::rng::substream;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience counter over validation losses.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
            epoch: 0,
        }
    }

    /// Records one epoch's validation loss.
    pub fn observe(&mut self, loss: f64) -> StopDecision {
        self.epoch += 1;
        if loss < self.best {
            self.best = loss;
            self.best_epoch = self.epoch;
            self.since_best = 0;
            return StopDecision::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    /// 1-based epoch of the best loss so far; 0 before any improvement.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

fn validation_loss(model: &Cosformer, val: &[Sample<'_>], config: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    for s in val {
        let mut g = Graph::new();
        let f = model.forced_on(&mut g, s.patches, s.task, s.class, &config.conditioning(s.task))?;
        let ce = g.cross_entropy(f.logits, &f.targets);
        total += g.value(ce).item();
    }
    Ok(total / val.len() as f64)
}

/// Trains the current task with replay from `buffer`, early-stopping on
/// validation cross-entropy and restoring the best parameters. Without a
/// validation split the training loss is monitored instead.
pub fn train_task(
    model: &mut Cosformer,
    task: usize,
    train: &[Sample<'_>],
    val: &[Sample<'_>],
    buffer: &RehearsalBuffer,
    config: &TrainConfig,
) -> Result<History> {
    config.validate()?;
    if train.is_empty() {
        return contract(format!("task {task} has no training bags"));
    }
    let mut adam = AdamState::new(config.learning_rate);
    let mut shuffle = substream(config.seed, &format!("shuffle/{task}"));
    let mut replay_rng = substream(config.seed, &format!("replay/{task}"));
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.store.values();
    let mut history = History::default();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Sample<'_>> = chunk.iter().map(|&i| train[i]).collect();
            let replay: Vec<_> = if buffer.is_empty() {
                Vec::new()
            } else {
                (0..config.replay_batch)
                    .map(|_| &buffer.entries[replay_rng.random_range(0..buffer.len())])
                    .collect()
            };
            let mut g = Graph::new();
            let Some(loss) = past_to_present_loss(&mut g, model, &batch, &replay, config)? else {
                continue;
            };
            epoch_loss += g.value(loss).item();
            steps += 1;
            g.backward(loss, &mut model.store)?;
            adam.step(&mut model.store)?;
            model.store.zero_grad();
        }
        let train_loss = epoch_loss / steps.max(1) as f64;
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            validation_loss(model, val, config)?
        };
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        debug!("task {task} epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        match stopper.observe(val_loss) {
            StopDecision::Improved => best = model.store.values(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                history.stopped_early = true;
                break;
            }
        }
    }
    model.store.restore(&best)?;
    history.best_epoch = stopper.best_epoch();
    Ok(history)
}
