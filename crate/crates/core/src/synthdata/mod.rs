//! Synthetic task streams: bags of patch embeddings with planted class
//! signatures, a stand-in text encoder, and on-disk bag files.

mod io;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::Tensor;
use crate::rng::{substream, Rng};

pub use io::{read_bags, read_bag_file, write_bag_file, write_bags, MANIFEST};

const MAX_SIGNATURE_DRAWS: usize = 1000;
const MAX_SIGNATURE_COS: f64 = 0.5;
const WORD_SEED: u64 = 0x636f_7366;

/// Label catalog modelled on a slide benchmark: tumor detection followed by
/// organ-wise subtyping. Tasks or classes beyond it get synthetic names.
const CATALOG: &[(&str, &[&[&str]])] = &[
    ("C16", &[&["tumor"], &["normal"]]),
    ("NSCLC", &[&["adenocarcinoma"], &["squamous", "cell", "carcinoma"]]),
    (
        "BRCA",
        &[&["invasive", "ductal", "carcinoma"], &["invasive", "lobular", "carcinoma"]],
    ),
    (
        "RCC",
        &[
            &["clear", "cell", "carcinoma"],
            &["papillary", "renal", "carcinoma"],
            &["chromophobe", "renal", "carcinoma"],
        ],
    ),
    ("ESCA", &[&["adenocarcinoma"], &["squamous", "cell", "carcinoma"]]),
    ("TGCT", &[&["seminoma"], &["mixed", "germ", "tumor"]]),
    ("CESC", &[&["adenocarcinoma"], &["squamous", "cell", "carcinoma"]]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub tasks: usize,
    pub classes_per_task: usize,
    /// Explicit label words per task and class; the catalog when absent.
    pub labels: Option<Vec<Vec<Vec<String>>>>,
    pub d_f: usize,
    pub d_text: usize,
    /// Inclusive patch-count range `[N_min, N_max]`.
    pub bag_size: [usize; 2],
    pub signal_patches: usize,
    pub noise_sigma: f64,
    pub text_sigma: f64,
    /// Train, validation and test fractions.
    pub fractions: [f64; 3],
    pub bags_per_class: usize,
    /// Per-task, per-class multipliers on `bags_per_class`.
    pub class_multipliers: Option<Vec<Vec<f64>>>,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            tasks: 3,
            classes_per_task: 2,
            labels: None,
            d_f: 16,
            d_text: 16,
            bag_size: [8, 16],
            signal_patches: 3,
            noise_sigma: 0.1,
            text_sigma: 0.05,
            fractions: [0.8, 0.1, 0.1],
            bags_per_class: 250,
            class_multipliers: None,
            seed: 0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 || self.classes_per_task == 0 {
            return contract("a stream needs at least one task and one class");
        }
        if self.d_f == 0 || self.d_text == 0 {
            return contract("embedding widths must be positive");
        }
        let [lo, hi] = self.bag_size;
        if lo == 0 || lo > hi {
            return contract("bag_size must satisfy 1 <= N_min <= N_max");
        }
        if lo < self.signal_patches {
            return contract("N_min must be at least the signal patch count");
        }
        if self.noise_sigma < 0.0 || self.text_sigma < 0.0 {
            return contract("noise levels must be non-negative");
        }
        if self.fractions.iter().any(|f| *f < 0.0) || (self.fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return contract("split fractions must be non-negative and sum to 1");
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.tasks || labels.iter().any(|t| t.len() != self.classes_per_task) {
                return contract("labels must list every task and class");
            }
            if labels.iter().flatten().any(|l| l.is_empty() || l.len() > 3) {
                return contract("class labels must have 1 to 3 words");
            }
        }
        if let Some(m) = &self.class_multipliers {
            if m.len() != self.tasks
                || m.iter().any(|t| t.len() != self.classes_per_task || t.iter().any(|x| *x <= 0.0))
            {
                return contract("class_multipliers must give a positive factor per task and class");
            }
        }
        Ok(())
    }

    fn label(&self, task: usize, class: usize) -> (String, Vec<String>) {
        if let Some(l) = &self.labels {
            return (format!("task{task}"), l[task][class].clone());
        }
        match CATALOG.get(task) {
            Some((name, classes)) if class < classes.len() => (
                name.to_string(),
                classes[class].iter().map(|w| w.to_string()).collect(),
            ),
            Some((name, _)) => (name.to_string(), vec![format!("{}-class{class}", name.to_lowercase())]),
            None => (format!("task{task}"), vec![format!("task{task}-class{class}")]),
        }
    }

    fn bag_count(&self, task: usize, class: usize) -> usize {
        let m = self
            .class_multipliers
            .as_ref()
            .map_or(1.0, |m| m[task][class]);
        (self.bags_per_class as f64 * m).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub words: Vec<String>,
    pub signature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub id: usize,
    pub name: String,
    pub classes: Vec<ClassInfo>,
}

impl TaskInfo {
    pub fn label_words(&self) -> Vec<Vec<String>> {
        self.classes.iter().map(|c| c.words.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BagRecord {
    pub id: usize,
    pub task: usize,
    pub class: usize,
    pub split: Split,
    pub patches: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    pub config: StreamConfig,
    pub tasks: Vec<TaskInfo>,
    pub bags: Vec<BagRecord>,
}

fn gaussian_vec(rng: &mut Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit-norm signatures with pairwise `|cos| < 0.5`, each redrawn until it
/// clears every earlier one.
fn draw_signatures(count: usize, d: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    for i in 0..count {
        let mut accepted = false;
        for _ in 0..MAX_SIGNATURE_DRAWS {
            let mut s = gaussian_vec(rng, d);
            normalize(&mut s);
            if out.iter().all(|o| dot(o, &s).abs() < MAX_SIGNATURE_COS) {
                out.push(s);
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::Generation(format!(
                "signature {i} of {count} stayed within cos {MAX_SIGNATURE_COS} of another after {MAX_SIGNATURE_DRAWS} draws in {d} dims"
            )));
        }
    }
    Ok(out)
}

fn split_counts(n: usize, f: [f64; 3]) -> [usize; 3] {
    let train = (f[0] * n as f64 + 1e-9).floor() as usize;
    let val = ((f[1] * n as f64 + 1e-9).floor() as usize).min(n - train);
    [train, val, n - train - val]
}

/// Generates the full stream. Pure in `config`.
pub fn make_stream(config: &StreamConfig) -> Result<Stream> {
    config.validate()?;
    let total = config.tasks * config.classes_per_task;
    let mut sig_rng = substream(config.seed, "data/signatures");
    let signatures = draw_signatures(total, config.d_f, &mut sig_rng)?;

    let mut tasks = Vec::with_capacity(config.tasks);
    for t in 0..config.tasks {
        let mut classes = Vec::with_capacity(config.classes_per_task);
        let mut name = String::new();
        for c in 0..config.classes_per_task {
            let (task_name, words) = config.label(t, c);
            name = task_name;
            classes.push(ClassInfo {
                words,
                signature: signatures[t * config.classes_per_task + c].clone(),
            });
        }
        tasks.push(TaskInfo { id: t, name, classes });
    }

    let d = config.d_f;
    let sigma = config.noise_sigma;
    let noise_norm = (1.0 + sigma * sigma * d as f64).sqrt();
    let mut rng = substream(config.seed, "data/bags");
    let mut bags = Vec::new();
    for (t, task) in tasks.iter().enumerate() {
        for (c, class) in task.classes.iter().enumerate() {
            let n = config.bag_count(t, c);
            let [n_train, n_val, _] = split_counts(n, config.fractions);
            for i in 0..n {
                let size = rng.random_range(config.bag_size[0]..=config.bag_size[1]);
                let mut rows: Vec<Vec<f64>> = Vec::with_capacity(size);
                for _ in 0..config.signal_patches {
                    let noise = gaussian_vec(&mut rng, d);
                    rows.push(
                        class
                            .signature
                            .iter()
                            .zip(noise)
                            .map(|(s, e)| s + sigma * e)
                            .collect(),
                    );
                }
                for _ in config.signal_patches..size {
                    let mut v = gaussian_vec(&mut rng, d);
                    normalize(&mut v);
                    rows.push(v.into_iter().map(|x| x * noise_norm).collect());
                }
                // Shuffle so signal patches have no fixed position.
                for k in (1..rows.len()).rev() {
                    let j = rng.random_range(0..=k);
                    rows.swap(k, j);
                }
                let split = if i < n_train {
                    Split::Train
                } else if i < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                };
                bags.push(BagRecord {
                    id: bags.len(),
                    task: t,
                    class: c,
                    split,
                    patches: Tensor::from_rows(&rows)?,
                });
            }
        }
    }
    Ok(Stream {
        config: config.clone(),
        tasks,
        bags,
    })
}

/// Seeded unit vector for a word; independent of any stream.
pub fn word_embedding(word: &str, d_text: usize) -> Vec<f64> {
    let mut rng = substream(WORD_SEED, &format!("word/{word}"));
    let mut v = gaussian_vec(&mut rng, d_text);
    normalize(&mut v);
    v
}

/// Class signature plus `N(0, sigma_t^2)` noise, renormalized.
pub fn class_embedding(signature: &[f64], sigma_t: f64, seed: u64, task: usize, class: usize) -> Vec<f64> {
    if sigma_t == 0.0 {
        return signature.to_vec();
    }
    let mut rng = substream(seed, &format!("text/{task}/{class}"));
    let noise = gaussian_vec(&mut rng, signature.len());
    let mut v: Vec<f64> = signature
        .iter()
        .zip(noise)
        .map(|(s, e)| s + sigma_t * e)
        .collect();
    normalize(&mut v);
    v
}

impl Stream {
    pub fn bags_of(&self, task: usize, split: Split) -> impl Iterator<Item = &BagRecord> + '_ {
        self.bags
            .iter()
            .filter(move |b| b.task == task && b.split == split)
    }

    pub fn bag(&self, id: usize) -> Option<&BagRecord> {
        self.bags.get(id).filter(|b| b.id == id)
    }

    /// Text-stub embedding of a class name.
    pub fn class_embedding(&self, task: usize, class: usize) -> Result<Vec<f64>> {
        let info = self
            .tasks
            .get(task)
            .and_then(|t| t.classes.get(class))
            .ok_or_else(|| Error::Contract(format!("unknown class {task}/{class}")))?;
        Ok(class_embedding(
            &info.signature,
            self.config.text_sigma,
            self.config.seed,
            task,
            class,
        ))
    }

    /// Text-stub embedding of a word used by some class label.
    pub fn word_embedding(&self, word: &str) -> Result<Vec<f64>> {
        let known = word == crate::model::vocab::BOS_WORD
            || word == crate::model::vocab::EOS_WORD
            || self
                .tasks
                .iter()
                .flat_map(|t| &t.classes)
                .any(|c| c.words.iter().any(|w| w == word));
        if !known {
            return contract(format!("word {word} is not part of the stream"));
        }
        Ok(word_embedding(word, self.config.d_text))
    }

    /// Embedder for model construction; unknown words still get a stable
    /// vector so models can be extended beyond the stream.
    pub fn embedder(&self) -> impl Fn(&str) -> Vec<f64> + '_ {
        move |w| word_embedding(w, self.config.d_text)
    }
}

/// Index of the signature with the largest max-over-patches dot product.
pub fn nearest_signature(patches: &Tensor, signatures: &[&[f64]]) -> usize {
    let score = |s: &[f64]| {
        (0..patches.rows())
            .map(|r| dot(patches.row(r), s))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, s) in signatures.iter().enumerate() {
        let v = score(s);
        if v > best_score {
            best = i;
            best_score = v;
        }
    }
    best
}

/// Accuracy of the nearest-signature classifier on one split. With
/// `task_aware` each bag competes only among its own task's classes.
pub fn oracle_accuracy(stream: &Stream, split: Split, task_aware: bool) -> f64 {
    let all: Vec<(usize, usize, &[f64])> = stream
        .tasks
        .iter()
        .flat_map(|t| {
            t.classes
                .iter()
                .enumerate()
                .map(move |(c, info)| (t.id, c, info.signature.as_slice()))
        })
        .collect();
    let mut hits = 0usize;
    let mut total = 0usize;
    for bag in stream.bags.iter().filter(|b| b.split == split) {
        let cands: Vec<&(usize, usize, &[f64])> = all
            .iter()
            .filter(|(t, _, _)| !task_aware || *t == bag.task)
            .collect();
        let sigs: Vec<&[f64]> = cands.iter().map(|c| c.2).collect();
        let (t, c, _) = cands[nearest_signature(&bag.patches, &sigs)];
        hits += usize::from(*t == bag.task && *c == bag.class);
        total += 1;
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts_floor_then_remainder() {
        assert_eq!(split_counts(250, [0.8, 0.1, 0.1]), [200, 25, 25]);
        assert_eq!(split_counts(10, [0.48, 0.12, 0.4]), [4, 1, 5]);
        assert_eq!(split_counts(100, [0.29, 0.71, 0.0]), [29, 71, 0]);
    }

    #[test]
    fn catalog_labels_then_synthetic() {
        let cfg = StreamConfig {
            tasks: 9,
            classes_per_task: 3,
            ..StreamConfig::default()
        };
        assert_eq!(cfg.label(0, 0).1, vec!["tumor"]);
        assert_eq!(cfg.label(3, 2).1, vec!["chromophobe", "renal", "carcinoma"]);
        assert_eq!(cfg.label(0, 2).1, vec!["c16-class2"]);
        assert_eq!(cfg.label(8, 1).1, vec!["task8-class1"]);
    }

    #[test]
    fn impossible_separation_is_a_generation_fault() {
        let mut rng = substream(0, "sig");
        assert!(matches!(
            draw_signatures(3, 1, &mut rng),
            Err(Error::Generation(_))
        ));
    }
}
