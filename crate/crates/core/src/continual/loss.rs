use super::buffer::BufferEntry;
use super::TrainConfig;
use crate::error::{contract, Result};
use crate::model::Cosformer;
use crate::numerics::{Graph, Tensor, Var};

/// A labelled bag from the task being trained.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub patches: &'a Tensor,
    pub task: usize,
    pub class: usize,
}

fn mean(g: &mut Graph, terms: &[Var]) -> Option<Var> {
    let (&first, rest) = terms.split_first()?;
    let mut acc = first;
    for &t in rest {
        acc = g.add(acc, t);
    }
    Some(g.scale(acc, 1.0 / terms.len() as f64))
}

/// Current-bag cross-entropy, replayed-bag cross-entropy and replayed-bag
/// squared distance to the stored snapshot, each averaged over steps and
/// bags and summed with unit weights. Returns `None` without samples.
pub fn past_to_present_loss(
    g: &mut Graph,
    model: &Cosformer,
    current: &[Sample<'_>],
    replay: &[&BufferEntry],
    config: &TrainConfig,
) -> Result<Option<Var>> {
    let mut ce_now = Vec::with_capacity(current.len());
    for s in current {
        let f = model.forced_on(g, s.patches, s.task, s.class, &config.conditioning(s.task))?;
        ce_now.push(g.cross_entropy(f.logits, &f.targets));
    }
    let mut ce_past = Vec::with_capacity(replay.len());
    let mut mse_past = Vec::with_capacity(replay.len());
    for e in replay {
        let f = model.forced_on(g, &e.patches, e.task, e.class, &config.conditioning(e.task))?;
        let [steps, width] = g.shape(f.logits);
        if e.snapshot.rows() != steps || e.snapshot.cols() == 0 || e.snapshot.cols() > width {
            return contract(format!(
                "buffer entry {} has a {}x{} snapshot for {steps}x{width} logits",
                e.bag_id,
                e.snapshot.rows(),
                e.snapshot.cols()
            ));
        }
        ce_past.push(g.cross_entropy(f.logits, &f.targets));
        let old = g.slice_cols(f.logits, 0, e.snapshot.cols());
        mse_past.push(g.mse(old, e.snapshot.clone()));
    }
    let terms: Vec<Var> = [&ce_now, &ce_past, &mse_past]
        .into_iter()
        .filter_map(|t| mean(g, t))
        .collect();
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(None);
    };
    let mut total = first;
    for &t in rest {
        total = g.add(total, t);
    }
    Ok(Some(total))
}

/// Teacher-forced logits recorded for replay.
pub fn snapshot_logits(
    model: &Cosformer,
    patches: &Tensor,
    task: usize,
    class: usize,
    config: &TrainConfig,
) -> Result<Tensor> {
    model.forced_logits(patches, task, class, &config.conditioning(task))
}
