use log::info;

use super::buffer::{
    importance_score, random_picks, reservoir_offers, text_retrieval_picks, BufferEntry,
    BufferStrategy, Candidate, RehearsalBuffer,
};
use super::loss::{snapshot_logits, Sample};
use super::train::{train_task, History};
use super::{freeze_past_experts, register_task, TaskSpec, TrainConfig};
use crate::error::{contract, Result};
use crate::harness::AccuracyMatrix;
use crate::model::{Cosformer, ModelConfig};
use crate::rng::substream;
use crate::synthdata::{Split, Stream};

/// Called after every stage with the stage index, model and buffer.
pub type StageHook<'a> = &'a mut dyn FnMut(usize, &Cosformer, &RehearsalBuffer) -> Result<()>;

pub struct SequenceOutcome {
    pub matrix: AccuracyMatrix,
    pub model: Cosformer,
    pub buffer: RehearsalBuffer,
    pub histories: Vec<History>,
}

fn entry(
    model: &Cosformer,
    c: &Candidate<'_>,
    task: usize,
    class_embeddings: &[Vec<f64>],
    config: &TrainConfig,
) -> Result<BufferEntry> {
    Ok(BufferEntry {
        bag_id: c.bag_id,
        task,
        class: c.class,
        score: importance_score(c.patches, &class_embeddings[c.class])?,
        patches: c.patches.clone(),
        snapshot: snapshot_logits(model, c.patches, task, c.class, config)?,
    })
}

/// Adds the finished task's representatives to the buffer (snapshotting
/// them with `model`) and enforces the capacity.
pub fn select_representatives(
    model: &Cosformer,
    task: usize,
    candidates: &[Candidate<'_>],
    class_embeddings: &[Vec<f64>],
    buffer: &mut RehearsalBuffer,
    config: &TrainConfig,
) -> Result<()> {
    let seed = config.seed;
    let picks: Vec<usize> = match config.buffer {
        BufferStrategy::None => return Ok(()),
        BufferStrategy::Reservoir => {
            let mut rng = substream(seed, &format!("reservoir/{task}"));
            for (i, slot) in reservoir_offers(buffer, candidates.len(), &mut rng) {
                let e = entry(model, &candidates[i], task, class_embeddings, config)?;
                match slot {
                    Some(j) => buffer.entries[j] = e,
                    None => buffer.entries.push(e),
                }
            }
            return Ok(());
        }
        BufferStrategy::TextRetrieval => {
            let mut rng = substream(seed, &format!("kmeans/{task}"));
            text_retrieval_picks(candidates, class_embeddings, config.n_clusters, &mut rng)?
                .into_iter()
                .map(|(i, _)| i)
                .collect()
        }
        BufferStrategy::Random => {
            let mut rng = substream(seed, &format!("random/{task}"));
            random_picks(candidates, class_embeddings.len(), config.n_clusters, &mut rng)
        }
    };
    for i in picks {
        buffer
            .entries
            .push(entry(model, &candidates[i], task, class_embeddings, config)?);
    }
    buffer.shrink(&mut substream(seed, &format!("deletion/{task}")));
    Ok(())
}

/// Fraction of `bags` the model labels correctly under the configured
/// scenario.
pub fn evaluate_task(model: &Cosformer, bags: &[Sample<'_>], config: &TrainConfig) -> Result<f64> {
    if bags.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for s in bags {
        let cond = config.conditioning(s.task);
        if model.is_correct(s.patches, s.task, s.class, &cond, config.max_decode_len)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / bags.len() as f64)
}

fn samples(stream: &Stream, stream_task: usize, model_task: usize, split: Split) -> Vec<Sample<'_>> {
    stream
        .bags_of(stream_task, split)
        .map(|b| Sample {
            patches: &b.patches,
            task: model_task,
            class: b.class,
        })
        .collect()
}

/// Trains the tasks of `stream` in `order`, filling one accuracy-matrix row
/// per stage. Model task ids follow the position in `order`.
pub fn run_sequence(
    stream: &Stream,
    order: &[usize],
    model_config: &ModelConfig,
    config: &TrainConfig,
    mut hook: Option<StageHook<'_>>,
) -> Result<SequenceOutcome> {
    config.validate()?;
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if order.is_empty() || sorted != (0..stream.tasks.len()).collect::<Vec<_>>() {
        return contract(format!(
            "order {order:?} is not a permutation of the {} stream tasks",
            stream.tasks.len()
        ));
    }
    if model_config.d_f != stream.config.d_f || model_config.d_text != stream.config.d_text {
        return contract("model and stream embedding widths differ");
    }
    let embed = stream.embedder();
    let mut init = substream(config.seed, "init");
    let mut model = Cosformer::new(model_config.clone(), &embed, &mut init)?;
    let capacity = match config.buffer {
        BufferStrategy::None => 0,
        _ => config.buffer_size,
    };
    let mut buffer = RehearsalBuffer::new(capacity);
    let mut matrix = AccuracyMatrix::new();
    let mut histories = Vec::with_capacity(order.len());

    for (stage, &st) in order.iter().enumerate() {
        let spec = TaskSpec::from_words(stage, &stream.tasks[st].label_words());
        register_task(&mut model, &spec, &embed, &mut init)?;
        freeze_past_experts(&mut model, stage);

        let train = samples(stream, st, stage, Split::Train);
        let val = samples(stream, st, stage, Split::Val);
        let history = train_task(&mut model, stage, &train, &val, &buffer, config)?;
        info!(
            "stage {stage} (task {st}): {} epochs, best {}",
            history.val_loss.len(),
            history.best_epoch
        );
        histories.push(history);

        let class_embeddings: Vec<Vec<f64>> = (0..stream.tasks[st].classes.len())
            .map(|c| stream.class_embedding(st, c))
            .collect::<Result<_>>()?;
        let candidates: Vec<Candidate<'_>> = stream
            .bags_of(st, Split::Train)
            .map(|b| Candidate {
                bag_id: b.id,
                class: b.class,
                patches: &b.patches,
            })
            .collect();
        select_representatives(&model, stage, &candidates, &class_embeddings, &mut buffer, config)?;

        let row = order[..=stage]
            .iter()
            .enumerate()
            .map(|(j, &sj)| evaluate_task(&model, &samples(stream, sj, j, Split::Test), config))
            .collect::<Result<Vec<f64>>>()?;
        info!("stage {stage} accuracies {row:?}");
        matrix.push_row(row)?;
        if let Some(h) = hook.as_mut() {
            h(stage, &model, &buffer)?;
        }
    }
    Ok(SequenceOutcome {
        matrix,
        model,
        buffer,
        histories,
    })
}
