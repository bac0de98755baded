//! Task lifecycle, rehearsal buffer, replay loss and the training loop.

pub mod buffer;
pub mod checkpoint;
mod loss;
mod sequence;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::model::{Conditioning, Cosformer, WordEmbedder};
use crate::rng::Rng;

pub use buffer::{BufferEntry, BufferStrategy, RehearsalBuffer, DEFAULT_CAPACITY};
pub use loss::{past_to_present_loss, snapshot_logits, Sample};
pub use sequence::{evaluate_task, run_sequence, select_representatives, SequenceOutcome, StageHook};
pub use train::{train_task, EarlyStopping, History, StopDecision};

/// Learning rate for desk-scale runs.
pub const DESK_LEARNING_RATE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Task identity known at test time.
    #[default]
    TaskIl,
    /// Task identity hidden; all seen classes compete.
    ClassIl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub scenario: Scenario,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub gamma: f64,
    pub beta: f64,
    pub buffer: BufferStrategy,
    pub buffer_size: usize,
    pub n_clusters: usize,
    /// Current-task bags per optimizer step.
    pub batch_size: usize,
    /// Buffer bags drawn (with replacement) per optimizer step.
    pub replay_batch: usize,
    pub max_decode_len: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::TaskIl,
            learning_rate: DESK_LEARNING_RATE,
            max_epochs: 50,
            patience: 5,
            gamma: 5.0,
            beta: 1.0,
            buffer: BufferStrategy::TextRetrieval,
            buffer_size: DEFAULT_CAPACITY,
            n_clusters: 2,
            batch_size: 1,
            replay_batch: 1,
            max_decode_len: crate::model::DEFAULT_MAX_LEN,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return contract("learning rate must be positive");
        }
        if self.max_epochs == 0 || self.batch_size == 0 || self.n_clusters == 0 {
            return contract("max_epochs, batch_size and n_clusters must be positive");
        }
        if self.max_decode_len == 0 {
            return contract("max_decode_len must be positive");
        }
        if !self.gamma.is_finite() || !self.beta.is_finite() {
            return contract("gamma and beta must be finite");
        }
        Ok(())
    }

    /// Expert Consultation conditioning for a bag of `task`. CLASS-IL always
    /// uses gamma = 1, beta = 0 without a target.
    pub fn conditioning(&self, task: usize) -> Conditioning {
        match self.scenario {
            Scenario::TaskIl => Conditioning::task_aware(task, self.gamma, self.beta),
            Scenario::ClassIl => Conditioning::task_agnostic(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub words: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub classes: Vec<ClassSpec>,
}

impl TaskSpec {
    pub fn from_words(id: usize, labels: &[Vec<String>]) -> Self {
        Self {
            id,
            classes: labels
                .iter()
                .map(|w| ClassSpec {
                    name: w.join(" "),
                    words: w.clone(),
                })
                .collect(),
        }
    }
}

/// Grows the model for a new task: expert, router row, vocabulary and
/// output rows.
pub fn register_task(
    model: &mut Cosformer,
    spec: &TaskSpec,
    embed: WordEmbedder<'_>,
    rng: &mut Rng,
) -> Result<()> {
    if spec.id != model.task_count() {
        return contract(format!(
            "task {} cannot be registered; next id is {}",
            spec.id,
            model.task_count()
        ));
    }
    if spec.classes.is_empty() {
        return contract(format!("task {} has no classes", spec.id));
    }
    let labels: Vec<Vec<String>> = spec.classes.iter().map(|c| c.words.clone()).collect();
    model.add_task(spec.id, &labels, embed, rng)
}

/// Freezes every expert and router row of tasks before `current`.
pub fn freeze_past_experts(model: &mut Cosformer, current: usize) {
    model.freeze_past(current);
}
