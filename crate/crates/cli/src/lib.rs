//! `setclust` command-line front end.
//!
//! Exit codes: 0 success, 2 invalid configuration or input, 3 runtime failure
//! (including a non-finite training loss), 4 file or format errors.

pub mod config;
pub mod plot;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use setclust::checkpoint::{load_checkpoint, load_model, save_checkpoint, save_model};
use setclust::data::{normalize, read_dataset, write_dataset, LabeledSet};
use setclust::eval::{
    align_labels, episode_sets, evaluate_model, predict_partition, tune_dbscan, Baseline, BaselineClusterer,
    DbscanParams, KPartition, RandomStub, SetClusterer, UniformStub,
};
use setclust::model::Model;
use setclust::seed::Stream;
use setclust::train::Trainer;
use setclust::Error;

use crate::config::{is_override, Loaded};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn config(key: &str, reason: &str) -> Self {
        CliError::Config(format!("`{key}`: {reason}"))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Core(e) => match e {
                Error::Io(_) | Error::Format(_) => 4,
                Error::Json(j) if j.is_io() => 4,
                Error::NonFinite(_) | Error::NonFiniteLoss { .. } | Error::IndexOutOfRange { .. } => 3,
                _ => 2,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "setclust", version, about = "Learned clustering of 2D point sets")]
struct Cli {
    /// TOML configuration with `model`, `train`, `data` and `metric` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Sets both `train.seed` and `model.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Accepted for reproducible scripts; every command is already deterministic.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BaselineArg {
    Kmeans,
    Dbscan,
    Random,
    RandomStub,
    UniformStub,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes generated sets as line-delimited JSON.
    Generate {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Seed stream the sets are drawn from.
        #[arg(long, value_enum, default_value = "evaluation")]
        stream: StreamArg,
    },
    /// Trains a model and writes the model container plus its history.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// History JSON; defaults to `<out>.history.json`.
        #[arg(long)]
        history: Option<PathBuf>,
        /// Resumable checkpoint written at the end (and every `train.checkpoint_interval` steps).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Continue from a checkpoint under its stored configuration; only
        /// `train.steps` may be raised.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Clusters one set given as a JSON array of `[x, y]` points.
    Cluster {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Include the full assignment probability tensor.
        #[arg(long)]
        probs: bool,
    },
    /// Scores a model or a baseline on fresh evaluation episodes.
    Eval {
        #[arg(long, required_unless_present = "baseline")]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 300)]
        episodes: usize,
        #[arg(long)]
        report: PathBuf,
        /// Per-episode CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<BaselineArg>,
        /// Points per episode; defaults to the model's metric set size or `train.set_size`.
        #[arg(long)]
        set_size: Option<usize>,
    },
    /// Renders a cluster result or a dataset record as SVG.
    Plot {
        /// A `cluster` result JSON or a line-delimited dataset.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset whose labels mark misassigned points with an outline.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Record index within dataset files.
        #[arg(long, default_value_t = 0)]
        record: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StreamArg {
    Train,
    Validation,
    Evaluation,
}

impl From<StreamArg> for Stream {
    fn from(s: StreamArg) -> Self {
        match s {
            StreamArg::Train => Stream::Train,
            StreamArg::Validation => Stream::Validation,
            StreamArg::Evaluation => Stream::Evaluation,
        }
    }
}

/// Output of `cluster`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub k_max: usize,
    /// `count_distribution[k - 1] = P(k)`.
    pub count_distribution: Vec<f64>,
    pub best_k: usize,
    /// Labels under `best_k`; ids carry no meaning beyond equality.
    pub assignments: Vec<usize>,
    pub per_k_partitions: Vec<KPartition>,
    /// `assignment_probs[k - 1][i][l] = P(l | x_i, k)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assignment_probs: Option<Vec<Vec<Vec<f64>>>>,
    /// Input points as given.
    pub points: Vec<[f64; 2]>,
}

/// Parses arguments and runs one command, returning the process exit code.
pub fn run<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        match arg.to_str() {
            Some(s) if is_override(s) => overrides.push(s.to_string()),
            _ => rest.push(arg),
        }
    }
    let cli = match Cli::try_parse_from(rest) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli, &overrides) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli, overrides: &[String]) -> Result<()> {
    if cli.device != "cpu" {
        return Err(CliError::Usage(format!("unsupported device `{}` (only `cpu`)", cli.device)));
    }
    let mut loaded = config::load(cli.config.as_deref(), overrides)?;
    if let Some(seed) = cli.seed {
        loaded.config.train.seed = seed;
        loaded.config.model.seed = seed;
    }
    match cli.command {
        Command::Generate { count, out, stream } => cmd_generate(&loaded, count, &out, stream.into()),
        Command::Train {
            out,
            history,
            checkpoint,
            resume,
        } => cmd_train(&loaded, &out, history, checkpoint, resume),
        Command::Cluster { model, input, out, probs } => cmd_cluster(&loaded, &model, &input, &out, probs),
        Command::Eval {
            model,
            episodes,
            report,
            csv,
            baseline,
            set_size,
        } => cmd_eval(&loaded, model.as_deref(), episodes, &report, csv.as_deref(), baseline, set_size),
        Command::Plot {
            input,
            out,
            truth,
            record,
        } => cmd_plot(&input, &out, truth.as_deref(), record),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_generate(loaded: &Loaded, count: usize, out: &Path, stream: Stream) -> Result<()> {
    let c = &loaded.config;
    let sets = episode_sets(&c.data, c.train.set_size, stream, c.train.seed, count)?;
    write_dataset(out, &sets)?;
    println!("wrote {count} sets to {}", out.display());
    Ok(())
}

fn cmd_train(
    loaded: &Loaded,
    out: &Path,
    history: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> Result<()> {
    let c = &loaded.config;
    let mut trainer = match &resume {
        Some(path) => {
            let mut t = load_checkpoint::<f32>(path)?;
            if loaded.is_set("train.steps") {
                t.config.steps = c.train.steps;
            }
            t
        }
        None => Trainer::new(Model::<f32>::new(c.model.clone())?, c.train.clone(), c.data.clone())?,
    };
    trainer.checkpoint_path = checkpoint.clone();
    let outcome = trainer.run();
    if let Some(path) = &checkpoint {
        save_checkpoint(path, &trainer)?;
    }
    outcome?;
    let digest = trainer.config.digest();
    let (model, hist) = trainer.into_result();
    save_model(out, &model, Some(digest))?;
    let history = history.unwrap_or_else(|| with_suffix(out, ".history.json"));
    hist.write_json(&history)?;
    hist.write_log(&with_suffix(out, ".log.jsonl"))?;
    let last = hist.steps.last().map_or(f64::NAN, |s| s.l_tot);
    println!(
        "trained {} steps (final l_tot {last:.6}{}); model written to {}",
        hist.steps.len(),
        if hist.stopped_early { ", stopped early" } else { "" },
        out.display()
    );
    Ok(())
}

/// Rejects a model whose `k_max` contradicts an explicitly configured one.
fn check_k_max(loaded: &Loaded, model_k: usize) -> Result<()> {
    for key in ["model.k_max", "data.k_max"] {
        let configured = loaded.config.model.k_max;
        if loaded.is_set(key) && configured != model_k {
            return Err(CliError::config(key, &format!("{configured} differs from the model's k_max = {model_k}")));
        }
    }
    Ok(())
}

fn read_points(path: &Path) -> Result<Vec<[f64; 2]>> {
    let text = std::fs::read_to_string(path).map_err(Error::from)?;
    let points: Vec<[f64; 2]> = serde_json::from_str(&text)
        .map_err(|e| CliError::Input(format!("{}: expected a JSON array of [x, y] points: {e}", path.display())))?;
    if points.len() < 2 {
        return Err(CliError::Input(format!("need at least 2 points, got {}", points.len())));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CliError::Input("points must be finite".into()));
    }
    Ok(points)
}

pub fn cluster_points(model: &Model<f32>, points: &[[f64; 2]], probs: bool) -> Result<ClusterResult> {
    let mut normalized = points.to_vec();
    normalize(&mut normalized);
    let raw = Array2::from_shape_fn((normalized.len(), 2), |(i, d)| normalized[i][d] as f32);
    let out = model.forward(raw.view())?.to_f64();
    let prediction = predict_partition(&out);
    Ok(ClusterResult {
        k_max: out.k_max(),
        count_distribution: out.count_dist.to_vec(),
        best_k: prediction.k_pred,
        assignments: prediction.labels,
        per_k_partitions: prediction.per_k,
        assignment_probs: probs.then(|| {
            out.assignments
                .iter()
                .map(|a| a.rows().into_iter().map(|r| r.to_vec()).collect())
                .collect()
        }),
        points: points.to_vec(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    std::fs::write(path, text).map_err(Error::from)?;
    Ok(())
}

fn cmd_cluster(loaded: &Loaded, model_path: &Path, input: &Path, out: &Path, probs: bool) -> Result<()> {
    let (model, _) = load_model::<f32>(model_path)?;
    check_k_max(loaded, model.config.k_max)?;
    let points = read_points(input)?;
    let result = cluster_points(&model, &points, probs)?;
    write_json(out, &result)?;
    println!("best_k {} (P = {:.4})", result.best_k, result.count_distribution[result.best_k - 1]);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    loaded: &Loaded,
    model_path: Option<&Path>,
    episodes: usize,
    report: &Path,
    csv: Option<&Path>,
    baseline: Option<BaselineArg>,
    set_size: Option<usize>,
) -> Result<()> {
    let c = &loaded.config;
    let mut spec = c.data.clone();
    let model = match model_path {
        Some(p) if baseline.is_none() => {
            let (model, _) = load_model::<f32>(p)?;
            check_k_max(loaded, model.config.k_max)?;
            spec.k_max = model.config.k_max;
            Some(model)
        }
        _ => None,
    };
    let n = match (set_size, &model) {
        (Some(n), _) => n,
        (None, Some(m)) if m.config.metric.mode.is_active() => m.config.metric.set_size,
        _ => c.train.set_size,
    };
    let seed = c.train.seed;
    let clusterer: Box<dyn SetClusterer> = match (baseline, model) {
        (None, Some(model)) => Box::new(model),
        (Some(BaselineArg::Kmeans), _) => Box::new(BaselineClusterer::new(Baseline::Kmeans { restarts: 10 })),
        (Some(BaselineArg::Dbscan), _) => {
            let tuning = episode_sets(&spec, n, Stream::Validation, seed, 200)?;
            Box::new(BaselineClusterer::new(Baseline::Dbscan {
                per_family: tune_dbscan(&tuning)?,
                fallback: DbscanParams { eps: 0.1, min_pts: 3 },
            }))
        }
        (Some(BaselineArg::Random), _) => Box::new(BaselineClusterer::new(Baseline::Random)),
        (Some(BaselineArg::RandomStub), _) => Box::new(RandomStub { k_max: spec.k_max }),
        (Some(BaselineArg::UniformStub), _) => Box::new(UniformStub { k_max: spec.k_max }),
        (None, None) => return Err(CliError::Usage("eval needs --model or --baseline".into())),
    };
    let result = evaluate_model(clusterer.as_ref(), &spec, episodes, n, seed)?;
    result.write_json(report)?;
    if let Some(csv) = csv {
        result.write_csv(csv)?;
    }
    println!("method {}", result.method);
    println!("episodes {}", result.episodes);
    println!("mr_mean {:.6}", result.mr_mean);
    println!("nmi_mean {:.6}", result.nmi_mean);
    println!("count_accuracy {:.6}", result.count_accuracy);
    Ok(())
}

/// Points and labels from a cluster result or a dataset record.
fn read_labeled(path: &Path, record: usize) -> Result<(Vec<[f64; 2]>, Vec<usize>, String)> {
    let text = std::fs::read_to_string(path).map_err(Error::from)?;
    if let Ok(result) = serde_json::from_str::<ClusterResult>(&text) {
        if result.assignments.len() != result.points.len() {
            return Err(CliError::Input("result has mismatched points and assignments".into()));
        }
        let title = format!("best_k = {}", result.best_k);
        return Ok((result.points, result.assignments, title));
    }
    let sets: Vec<LabeledSet> = read_dataset(path)
        .map_err(|e| CliError::Input(format!("{}: not a 2D cluster result or dataset: {e}", path.display())))?;
    let set = sets
        .into_iter()
        .nth(record)
        .ok_or_else(|| CliError::Input(format!("{}: no record {record}", path.display())))?;
    let title = format!("{} (k = {})", set.family, set.k);
    Ok((set.points, set.labels, title))
}

/// Flags points whose label disagrees with the truth after optimal relabeling.
/// Only points present in both inputs (same coordinates) are compared.
pub fn misassigned(points: &[[f64; 2]], labels: &[usize], truth: &LabeledSet) -> Result<Vec<bool>> {
    let key = |p: &[f64; 2]| (p[0].to_bits(), p[1].to_bits());
    let truth_of: std::collections::HashMap<_, usize> =
        truth.points.iter().zip(&truth.labels).map(|(p, &l)| (key(p), l)).collect();
    let shared: Vec<(usize, usize)> = points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| truth_of.get(&key(p)).map(|&t| (i, t)))
        .collect();
    if shared.is_empty() {
        return Err(CliError::Input("result and truth share no points".into()));
    }
    let pred: Vec<usize> = shared.iter().map(|&(i, _)| labels[i]).collect();
    let gold: Vec<usize> = shared.iter().map(|&(_, t)| t).collect();
    let aligned = align_labels(&pred, &gold)?;
    let mut flags = vec![false; points.len()];
    for ((&(i, _), a), g) in shared.iter().zip(aligned).zip(gold) {
        flags[i] = a != g;
    }
    Ok(flags)
}

fn cmd_plot(input: &Path, out: &Path, truth: Option<&Path>, record: usize) -> Result<()> {
    let (points, labels, title) = read_labeled(input, record)?;
    let outlined = match truth {
        Some(t) => {
            let sets = read_dataset(t)?;
            let set = sets
                .into_iter()
                .nth(record)
                .ok_or_else(|| CliError::Input(format!("{}: no record {record}", t.display())))?;
            misassigned(&points, &labels, &set)?
        }
        None => Vec::new(),
    };
    let svg = plot::scatter_svg(&points, &labels, &outlined, &title);
    std::fs::write(out, svg).map_err(Error::from)?;
    let wrong = outlined.iter().filter(|&&b| b).count();
    println!("plotted {} points ({wrong} outlined) to {}", points.len(), out.display());
    Ok(())
}
