use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use cosformer::continual::{BufferStrategy, Scenario, TrainConfig, DEFAULT_CAPACITY};
use cosformer::harness::{evaluate_run, report_run, run_experiment, RunConfig, Variant};
use cosformer::model::ModelConfig;
use cosformer::synthdata::{make_stream, read_bags, write_bags, StreamConfig};

#[derive(Parser)]
#[command(name = "cosformer", version, about = "Continual MIL experiments on bags of patch embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    TaskIl,
    ClassIl,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::TaskIl => Scenario::TaskIl,
            ScenarioArg::ClassIl => Scenario::ClassIl,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BufferArg {
    TextRetrieval,
    Reservoir,
    Random,
    None,
}

impl From<BufferArg> for BufferStrategy {
    fn from(b: BufferArg) -> Self {
        match b {
            BufferArg::TextRetrieval => BufferStrategy::TextRetrieval,
            BufferArg::Reservoir => BufferStrategy::Reservoir,
            BufferArg::Random => BufferStrategy::Random,
            BufferArg::None => BufferStrategy::None,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task stream as bag files plus a manifest.
    Generate {
        /// Stream configuration JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model over a task sequence and write a run directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "task-il")]
        scenario: ScenarioArg,
        /// Comma-separated task ids; all tasks in stream order by default.
        #[arg(long, value_delimiter = ',')]
        order: Option<Vec<usize>>,
        #[arg(long, value_enum, default_value = "text-retrieval")]
        buffer: BufferArg,
        #[arg(long)]
        buf_size: Option<usize>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Replace Expert Consultation with one shared linear projection.
        #[arg(long)]
        no_ec: bool,
        /// Replace the label decoder with a linear classification head.
        #[arg(long)]
        linear_head: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        patience: Option<usize>,
        /// Model configuration JSON; widths are taken from the data.
        #[arg(long)]
        model_config: Option<PathBuf>,
    },
    /// Re-evaluate a run's final checkpoint under a scenario.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        scenario: ScenarioArg,
    },
    /// Rebuild metrics.json from a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        emit_embeddings: bool,
    },
}

/// A failure that maps to the usage exit code.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Usage(msg.into()).into())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn generate(config: Option<PathBuf>, out: PathBuf, seed: Option<u64>) -> Result<()> {
    let mut cfg: StreamConfig = match config {
        Some(p) => read_json(&p)?,
        None => StreamConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Err(e) = cfg.validate() {
        return usage(e.to_string());
    }
    let stream = make_stream(&cfg)?;
    write_bags(&stream, &out)?;
    println!("wrote {} bags for {} tasks to {}", stream.bags.len(), stream.tasks.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    data: PathBuf,
    scenario: ScenarioArg,
    order: Option<Vec<usize>>,
    buffer: BufferArg,
    buf_size: Option<usize>,
    gamma: Option<f64>,
    beta: Option<f64>,
    clusters: Option<usize>,
    seed: u64,
    out: PathBuf,
    variant: Variant,
    epochs: Option<usize>,
    lr: Option<f64>,
    patience: Option<usize>,
    model_config: Option<PathBuf>,
) -> Result<()> {
    let scenario = Scenario::from(scenario);
    let buffer = BufferStrategy::from(buffer);
    if scenario == Scenario::ClassIl && (gamma.is_some() || beta.is_some()) {
        return usage("--gamma and --beta have no effect under class-il");
    }
    if buffer == BufferStrategy::None && (buf_size.is_some() || clusters.is_some()) {
        return usage("--buf-size and --clusters need a buffer strategy");
    }
    if variant.no_ec && (gamma.is_some() || beta.is_some()) {
        return usage("--gamma and --beta configure Expert Consultation, which --no-ec removes");
    }
    let mut train = TrainConfig {
        scenario,
        buffer,
        buffer_size: buf_size.unwrap_or(DEFAULT_CAPACITY),
        seed,
        ..TrainConfig::default()
    };
    if let Some(g) = gamma {
        train.gamma = g;
    }
    if let Some(b) = beta {
        train.beta = b;
    }
    if let Some(c) = clusters {
        train.n_clusters = c;
    }
    if let Some(e) = epochs {
        train.max_epochs = e;
    }
    if let Some(l) = lr {
        train.learning_rate = l;
    }
    if let Some(p) = patience {
        train.patience = p;
    }
    if buffer != BufferStrategy::None && train.buffer_size == 0 {
        return usage("--buf-size must be positive");
    }
    if let Err(e) = train.validate() {
        return usage(e.to_string());
    }

    let stream = read_bags(&data)?;
    let order = order.unwrap_or_else(|| (0..stream.tasks.len()).collect());
    let mut sorted = order.clone();
    sorted.sort_unstable();
    if sorted != (0..stream.tasks.len()).collect::<Vec<_>>() {
        return usage(format!(
            "--order must be a permutation of 0..{}",
            stream.tasks.len()
        ));
    }
    let mut model: ModelConfig = match model_config {
        Some(p) => read_json(&p)?,
        None => ModelConfig::default(),
    };
    model.d_f = stream.config.d_f;
    model.d_text = stream.config.d_text;
    variant.apply(&mut model);
    if let Err(e) = model.validate() {
        return usage(e.to_string());
    }

    let data = std::fs::canonicalize(&data).unwrap_or(data);
    let config = RunConfig {
        data: Some(data),
        order,
        model,
        train,
    };
    let report = run_experiment(&stream, &config, &out)?;
    println!("final accuracies {:?}", report.final_accuracies);
    println!("average accuracy {:.4}", report.average_accuracy);
    if let Some(s) = report.silhouette {
        println!("silhouette {s:.4}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out, seed } => generate(config, out, seed),
        Command::Train {
            data,
            scenario,
            order,
            buffer,
            buf_size,
            gamma,
            beta,
            clusters,
            seed,
            out,
            no_ec,
            linear_head,
            epochs,
            lr,
            patience,
            model_config,
        } => train(
            data,
            scenario,
            order,
            buffer,
            buf_size,
            gamma,
            beta,
            clusters,
            seed,
            out,
            Variant { no_ec, linear_head },
            epochs,
            lr,
            patience,
            model_config,
        ),
        Command::Eval { run, scenario } => {
            let r = evaluate_run(&run, scenario.into())?;
            println!("accuracies {:?}", r.accuracies);
            println!("average accuracy {:.4}", r.average_accuracy);
            Ok(())
        }
        Command::Report { run, emit_embeddings } => {
            let r = report_run(&run, emit_embeddings)?;
            println!("average accuracy {:.4}", r.average_accuracy);
            println!("forgetting {:?}", r.forgetting);
            if let Some(s) = r.silhouette {
                println!("silhouette {s:.4}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
