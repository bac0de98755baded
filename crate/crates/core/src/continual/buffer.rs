//! Rehearsal buffer: text-retrieval selection, baselines and capping.

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numerics::Tensor;
use crate::rng::Rng;

/// Default buffer capacity.
pub const DEFAULT_CAPACITY: usize = 26;

const KMEANS_MAX_ITERS: usize = 50;
const KMEANS_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BufferStrategy {
    /// Per class and cluster, the bag most similar to the class text.
    #[default]
    TextRetrieval,
    /// Reservoir sampling over every training bag seen.
    Reservoir,
    /// As many bags per class as text retrieval keeps, drawn at random.
    Random,
    None,
}

/// A stored bag with the logits the model produced right after its task.
#[derive(Clone, Debug, PartialEq)]
pub struct BufferEntry {
    pub bag_id: usize,
    pub task: usize,
    pub class: usize,
    pub score: f64,
    pub patches: Tensor,
    /// One row per teacher-forced step, as wide as the output at snapshot time.
    pub snapshot: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RehearsalBuffer {
    pub capacity: usize,
    pub entries: Vec<BufferEntry>,
    /// Training bags offered to the reservoir so far.
    pub seen: u64,
}

impl RehearsalBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: Vec::new(),
            seen: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Deletes uniformly random entries until the capacity is met.
    pub fn shrink(&mut self, rng: &mut Rng) {
        while self.entries.len() > self.capacity {
            let i = rng.random_range(0..self.entries.len());
            self.entries.remove(i);
        }
    }
}

/// A candidate bag handed to selection.
#[derive(Clone, Copy, Debug)]
pub struct Candidate<'a> {
    pub bag_id: usize,
    pub class: usize,
    pub patches: &'a Tensor,
}

/// Max over patches of the dot product with the class embedding.
pub fn importance_score(patches: &Tensor, class_embedding: &[f64]) -> Result<f64> {
    if patches.cols() != class_embedding.len() {
        return contract(format!(
            "patch width {} differs from class embedding width {}",
            patches.cols(),
            class_embedding.len()
        ));
    }
    if patches.rows() == 0 {
        return contract("cannot score an empty bag");
    }
    Ok((0..patches.rows())
        .map(|r| {
            patches
                .row(r)
                .iter()
                .zip(class_embedding)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        })
        .fold(f64::NEG_INFINITY, f64::max))
}

pub fn importance_scores(bags: &[&Tensor], class_embedding: &[f64]) -> Result<Vec<f64>> {
    bags.iter()
        .map(|b| importance_score(b, class_embedding))
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(point, center);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

/// k-means++ seeding then Lloyd iterations. Returns one cluster index per
/// point; `k` is clamped to the point count.
pub fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if k == 0 {
        return contract("k-means needs at least one cluster");
    }
    let n = points.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let k = k.min(n);
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| sq_dist(p, &centers[nearest(p, &centers)]))
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[pick].clone());
    }

    let dim = points[0].len();
    let mut assign = vec![0; n];
    for _ in 0..KMEANS_MAX_ITERS {
        for (a, p) in assign.iter_mut().zip(points) {
            *a = nearest(p, &centers);
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let mean: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&mean, &centers[c]).sqrt());
            centers[c] = mean;
        }
        if shift < KMEANS_TOL {
            break;
        }
    }
    for (a, p) in assign.iter_mut().zip(points) {
        *a = nearest(p, &centers);
    }
    Ok(assign)
}

/// Per class: cluster the mean-pooled bags and keep each cluster's highest
/// scoring bag (lowest bag id on ties). Returns `(candidate index, score)`.
pub fn text_retrieval_picks(
    candidates: &[Candidate<'_>],
    class_embeddings: &[Vec<f64>],
    n_clusters: usize,
    rng: &mut Rng,
) -> Result<Vec<(usize, f64)>> {
    let mut picks = Vec::new();
    for (class, emb) in class_embeddings.iter().enumerate() {
        let members: Vec<usize> = (0..candidates.len())
            .filter(|&i| candidates[i].class == class)
            .collect();
        if members.is_empty() {
            continue;
        }
        let means: Vec<Vec<f64>> = members
            .iter()
            .map(|&i| candidates[i].patches.mean_rows().into_data())
            .collect();
        let assign = kmeans(&means, n_clusters, rng)?;
        let scores: Vec<f64> = members
            .iter()
            .map(|&i| importance_score(candidates[i].patches, emb))
            .collect::<Result<_>>()?;
        let k = assign.iter().max().map_or(0, |m| m + 1);
        for cluster in 0..k {
            let best = members
                .iter()
                .enumerate()
                .filter(|(j, _)| assign[*j] == cluster)
                .max_by(|(ja, &a), (jb, &b)| {
                    scores[*ja]
                        .total_cmp(&scores[*jb])
                        .then(candidates[b].bag_id.cmp(&candidates[a].bag_id))
                });
            if let Some((j, &i)) = best {
                picks.push((i, scores[j]));
            }
        }
    }
    Ok(picks)
}

/// Per class, `per_class` uniformly chosen candidates.
pub fn random_picks(candidates: &[Candidate<'_>], classes: usize, per_class: usize, rng: &mut Rng) -> Vec<usize> {
    let mut picks = Vec::new();
    for class in 0..classes {
        let members: Vec<usize> = (0..candidates.len())
            .filter(|&i| candidates[i].class == class)
            .collect();
        let k = per_class.min(members.len());
        let mut chosen: Vec<usize> = sample(rng, members.len(), k).into_iter().map(|j| members[j]).collect();
        chosen.sort_unstable();
        picks.extend(chosen);
    }
    picks
}

/// Reservoir sampling: offers each candidate in order, returning
/// `(candidate index, slot)` where `slot` is `None` for an append.
pub fn reservoir_offers(
    buffer: &mut RehearsalBuffer,
    count: usize,
    rng: &mut Rng,
) -> Vec<(usize, Option<usize>)> {
    let mut moves = Vec::new();
    let mut len = buffer.entries.len();
    for i in 0..count {
        buffer.seen += 1;
        if len < buffer.capacity {
            moves.push((i, None));
            len += 1;
        } else {
            let j = rng.random_range(0..buffer.seen) as usize;
            if j < buffer.capacity {
                moves.push((i, Some(j)));
            }
        }
    }
    moves
}
