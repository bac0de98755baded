//! Experiment orchestration, metrics and report files.

mod metrics;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::continual::{checkpoint, evaluate_task, run_sequence, Sample, Scenario, TrainConfig};
use crate::error::{contract, Error, Result};
use crate::model::{Cosformer, HeadKind, ModelConfig, Projection};
use crate::synthdata::{read_bags, Split, Stream};

pub use metrics::{compute_metrics, silhouette, AccuracyMatrix, Metrics};

pub const RUN_FILE: &str = "run.json";
pub const MATRIX_FILE: &str = "accuracy_matrix.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const TIMING_FILE: &str = "timing.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_path(run: &Path, stage: usize) -> PathBuf {
    run.join(CHECKPOINT_DIR).join(format!("task_{stage}.cosc"))
}

/// Ablation switches layered over a base model configuration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub no_ec: bool,
    pub linear_head: bool,
}

impl Variant {
    pub fn apply(self, config: &mut ModelConfig) {
        config.projection = if self.no_ec {
            Projection::SharedLinear
        } else {
            Projection::ExpertConsultation
        };
        config.head = if self.linear_head {
            HeadKind::Linear
        } else {
            HeadKind::Decoder
        };
    }
}

/// Everything needed to reproduce a run; echoed to `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub order: Vec<usize>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub final_accuracies: Vec<f64>,
    pub average_accuracy: f64,
    pub forgetting: Vec<f64>,
    pub silhouette: Option<f64>,
    pub seed: u64,
    pub scenario: Scenario,
    pub order: Vec<usize>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunReport {
    fn new(config: &RunConfig, metrics: Metrics, silhouette: Option<f64>) -> Self {
        Self {
            final_accuracies: metrics.final_accuracies,
            average_accuracy: metrics.average_accuracy,
            forgetting: metrics.forgetting,
            silhouette,
            seed: config.train.seed,
            scenario: config.train.scenario,
            order: config.order.clone(),
            model: config.model.clone(),
            train: config.train.clone(),
        }
    }
}

/// One test bag's head-input representation.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub bag_id: usize,
    pub task: usize,
    pub class: usize,
    pub values: Vec<f64>,
}

/// Head-input representations of every test bag, tasks numbered by their
/// position in `order`.
pub fn embeddings(
    model: &Cosformer,
    stream: &Stream,
    order: &[usize],
    train: &TrainConfig,
) -> Result<Vec<EmbeddingRow>> {
    let mut rows = Vec::new();
    for (task, &st) in order.iter().enumerate() {
        for b in stream.bags_of(st, Split::Test) {
            rows.push(EmbeddingRow {
                bag_id: b.id,
                task,
                class: b.class,
                values: model.embedding(&b.patches, &train.conditioning(task))?,
            });
        }
    }
    Ok(rows)
}

pub fn embedding_silhouette(rows: &[EmbeddingRow]) -> Result<f64> {
    let points: Vec<Vec<f64>> = rows.iter().map(|r| r.values.clone()).collect();
    let labels: Vec<usize> = rows.iter().map(|r| r.task).collect();
    silhouette(&points, &labels)
}

pub fn embeddings_to_csv(rows: &[EmbeddingRow]) -> String {
    let width = rows.first().map_or(0, |r| r.values.len());
    let mut s = String::from("bag_id,task,class");
    for i in 0..width {
        write!(s, ",e{i}").expect("string write");
    }
    s.push('\n');
    for r in rows {
        write!(s, "{},{},{}", r.bag_id, r.task, r.class).expect("string write");
        for v in &r.values {
            write!(s, ",{v:?}").expect("string write");
        }
        s.push('\n');
    }
    s
}

pub fn embeddings_from_csv(text: &str) -> Result<Vec<EmbeddingRow>> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        let bad = || Error::Contract(format!("malformed embedding line {}", n + 1));
        if fields.len() < 3 {
            return Err(bad());
        }
        let int = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
        rows.push(EmbeddingRow {
            bag_id: int(fields[0])?,
            task: int(fields[1])?,
            class: int(fields[2])?,
            values: fields[3..]
                .iter()
                .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
                .collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write(path, s)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_to_string(path)?).map_err(|e| Error::format(path, e.to_string()))
}

/// Runs the sequence and writes `run.json`, per-stage checkpoints, the
/// accuracy matrix, embeddings, `metrics.json` and `timing.json` into `out`.
pub fn run_experiment(stream: &Stream, config: &RunConfig, out: &Path) -> Result<RunReport> {
    let started = Instant::now();
    fs::create_dir_all(out.join(CHECKPOINT_DIR)).map_err(|e| Error::io(out, e))?;
    write_json(&out.join(RUN_FILE), config)?;

    let order = config.order.clone();
    let train = config.train.clone();
    let mut save = |stage: usize, model: &Cosformer, buffer: &crate::continual::RehearsalBuffer| {
        let meta = serde_json::json!({ "stage": stage, "stream_task": order[stage], "order": order });
        checkpoint::save(&checkpoint_path(out, stage), model, &train, buffer, meta)
    };
    let outcome = run_sequence(stream, &config.order, &config.model, &config.train, Some(&mut save))?;
    let trained = started.elapsed().as_secs_f64();

    write(&out.join(MATRIX_FILE), outcome.matrix.to_csv())?;
    let rows = embeddings(&outcome.model, stream, &config.order, &config.train)?;
    write(&out.join(EMBEDDINGS_FILE), embeddings_to_csv(&rows))?;
    let sil = if config.order.len() > 1 {
        Some(embedding_silhouette(&rows)?)
    } else {
        None
    };
    let report = RunReport::new(config, compute_metrics(&outcome.matrix)?, sil);
    write_json(&out.join(METRICS_FILE), &report)?;
    let epochs: Vec<usize> = outcome.histories.iter().map(|h| h.val_loss.len()).collect();
    write_json(
        &out.join(TIMING_FILE),
        &serde_json::json!({
            "train_seconds": trained,
            "total_seconds": started.elapsed().as_secs_f64(),
            "epochs": epochs,
        }),
    )?;
    Ok(report)
}

pub fn load_run_config(run: &Path) -> Result<RunConfig> {
    read_json(&run.join(RUN_FILE))
}

fn run_stream(run: &Path, config: &RunConfig) -> Result<Stream> {
    match &config.data {
        Some(dir) => read_bags(dir),
        None => contract(format!("{} does not record a data directory", run.display())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: Scenario,
    pub accuracies: Vec<f64>,
    pub average_accuracy: f64,
}

/// Re-evaluates the final checkpoint of a run on every task's test split
/// under `scenario`; writes `eval_<scenario>.json`.
pub fn evaluate_run(run: &Path, scenario: Scenario) -> Result<EvalReport> {
    let config = load_run_config(run)?;
    let stream = run_stream(run, &config)?;
    let last = config.order.len().checked_sub(1).ok_or_else(|| {
        Error::Contract("run has an empty task order".into())
    })?;
    let ck = checkpoint::load(&checkpoint_path(run, last))?;
    let train = TrainConfig {
        scenario,
        ..ck.train.clone()
    };
    let accuracies = config
        .order
        .iter()
        .enumerate()
        .map(|(task, &st)| {
            let bags: Vec<Sample<'_>> = stream
                .bags_of(st, Split::Test)
                .map(|b| Sample {
                    patches: &b.patches,
                    task,
                    class: b.class,
                })
                .collect();
            evaluate_task(&ck.model, &bags, &train)
        })
        .collect::<Result<Vec<f64>>>()?;
    let report = EvalReport {
        scenario,
        average_accuracy: accuracies.iter().sum::<f64>() / accuracies.len() as f64,
        accuracies,
    };
    let name = match scenario {
        Scenario::TaskIl => "eval_task-il.json",
        Scenario::ClassIl => "eval_class-il.json",
    };
    write_json(&run.join(name), &report)?;
    Ok(report)
}

/// Rebuilds `metrics.json` from the accuracy matrix and embeddings on disk.
/// With `emit_embeddings` the embeddings are first recomputed from the
/// final checkpoint.
pub fn report_run(run: &Path, emit_embeddings: bool) -> Result<RunReport> {
    let config = load_run_config(run)?;
    let matrix = AccuracyMatrix::from_csv(&read_to_string(&run.join(MATRIX_FILE))?)?;
    let emb_path = run.join(EMBEDDINGS_FILE);
    if emit_embeddings {
        let stream = run_stream(run, &config)?;
        let ck = checkpoint::load(&checkpoint_path(run, matrix.stages().saturating_sub(1)))?;
        let rows = embeddings(&ck.model, &stream, &config.order, &config.train)?;
        write(&emb_path, embeddings_to_csv(&rows))?;
    }
    let sil = if config.order.len() > 1 && emb_path.exists() {
        Some(embedding_silhouette(&embeddings_from_csv(&read_to_string(&emb_path)?)?)?)
    } else {
        None
    };
    let report = RunReport::new(&config, compute_metrics(&matrix)?, sil);
    write_json(&run.join(METRICS_FILE), &report)?;
    Ok(report)
}
