//! `mcr2`: reproducible runs over the coding-rate-reduction library.

mod manifest;
mod plot;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mcr2::cluster::{
    evaluate_head, evaluate_kmeans, read_sr_report, write_sr_report, RetrievalSplit, SrRow,
    DEFAULT_CLUSTERS,
};
use mcr2::projector::{load_checkpoint_for, project};
use mcr2::store::{
    generate_synthetic, read_embeddings, read_gold, read_pairs, write_embeddings, write_labels,
    write_pairs, EmbeddingMatrix, SyntheticSpec,
};
use mcr2::trainer::{default_lambda, train_with, TrainConfig, TrainOptions};
use mcr2::sts_score;
use serde::{Deserialize, Serialize};

use manifest::{beside, RunManifest};
use plot::{line_plot, Series};

#[derive(Debug)]
pub enum CliError {
    Core(mcr2::Error),
    Io { path: PathBuf, source: std::io::Error },
    Usage(String),
    EmptyReport(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 for numerical failures, 2 for anything the caller got wrong.
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 1,
            _ => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io { path, source } => write!(f, "i/o failure on {}: {source}", path.display()),
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::EmptyReport(m) => write!(f, "empty report: {m}"),
        }
    }
}

impl From<mcr2::Error> for CliError {
    fn from(e: mcr2::Error) -> Self {
        CliError::Core(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "mcr2", version, about = "Coding-rate-reduction projections of sentence embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate clusters on orthogonal subspaces with paired noisy duplicates.
    GenSynth {
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        clusters: usize,
        #[arg(long)]
        rank: usize,
        #[arg(long)]
        per: usize,
        #[arg(long, default_value_t = 0.05)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a projector on paired embeddings.
    Train {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        dim_out: usize,
        #[arg(long)]
        clusters: usize,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        /// Defaults to 2000 for 50/100 output dims, 4000 otherwise.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value_t = mcr2::rate::DEFAULT_EPSILON_SQ)]
        epsilon_sq: f64,
        #[arg(long, default_value_t = mcr2::trainer::DEFAULT_TEMPERATURE)]
        tau: f64,
        #[arg(long, default_value_t = mcr2::trainer::DEFAULT_LEARNING_RATE)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Independent runs; the lowest final loss is kept.
        #[arg(long, default_value_t = 1)]
        restarts: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Map embeddings to unit-norm features with a trained projector.
    Project {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Duplicate retrieval through the cluster head and/or k-means.
    EvalSr {
        #[arg(long)]
        embeddings: PathBuf,
        /// `(query, duplicate)` pairs.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Method::Both)]
        method: Method,
        #[arg(long, default_value_t = DEFAULT_CLUSTERS)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Spearman correlation of pair cosines against gold scores.
    EvalSts {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plot retrieval and similarity reports against dimension.
    Report {
        #[arg(long = "input", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Method {
    Head,
    Kmeans,
    Both,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StsRow {
    metric: String,
    value: f64,
    n: usize,
    dim: usize,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn gen_synth(spec: SyntheticSpec, out: &Path) -> Result<()> {
    let corpus = generate_synthetic(&spec)?;
    create_dir(out)?;
    let emb = out.join("embeddings.emb1");
    let pairs = out.join("pairs.jsonl");
    let labels = out.join("labels.txt");
    write_embeddings(&corpus.embeddings, &emb)?;
    write_pairs(&corpus.pairs, &pairs)?;
    write_labels(&corpus.labels, &labels)?;
    let mut m = RunManifest::new("gen-synth", Some(spec.seed));
    m.set("dim", spec.dim);
    m.set("clusters", spec.clusters);
    m.set("rank", spec.subspace_rank);
    m.set("per", spec.points_per_cluster);
    m.set("sigma", spec.noise_sigma);
    for p in [&emb, &pairs, &labels] {
        m.output(p)?;
    }
    m.write(&out.join("manifest.json"))
}

fn train_cmd(embeddings: &Path, pairs: &Path, cfg: TrainConfig, out: &Path) -> Result<()> {
    let emb = read_embeddings(embeddings)?;
    let pair_set = read_pairs(pairs)?;
    create_dir(out)?;
    let checkpoint = out.join("projector.prj1");
    let history_path = out.join("history.csv");
    let options = TrainOptions {
        checkpoint: Some(checkpoint.clone()),
    };
    let (params, history) = train_with(&emb, &pair_set, &cfg, &options)?;
    mcr2::projector::save_checkpoint(&params, &checkpoint)?;
    history.write_csv(&history_path)?;

    let mut m = RunManifest::new("train", Some(cfg.seed));
    m.set("dim_out", cfg.d_feat);
    m.set("clusters", cfg.k);
    m.set("batch", cfg.batch_pairs);
    m.set("epochs", cfg.epochs);
    m.set("lambda", cfg.lambda);
    m.set("epsilon_sq", cfg.epsilon_sq);
    m.set("tau", cfg.temperature);
    m.set("lr", cfg.learning_rate);
    m.set("restarts", cfg.restarts);
    m.set("selected_restart", history.restart);
    m.input(embeddings)?;
    m.input(pairs)?;
    m.output(&checkpoint)?;
    m.output(&history_path)?;
    m.write(&out.join("manifest.json"))
}

fn project_cmd(checkpoint: &Path, embeddings: &Path, out: &Path) -> Result<()> {
    let emb = read_embeddings(embeddings)?;
    let params = load_checkpoint_for(checkpoint, emb.dim())?;
    let features = project(&params, emb.to_f64().view())?;
    write_embeddings(&EmbeddingMatrix::from_f64(&features)?, out)?;
    let mut m = RunManifest::new("project", None);
    m.set("dim_out", params.d_feat());
    m.input(checkpoint)?;
    m.input(embeddings)?;
    m.output(out)?;
    m.write(&beside(out))
}

struct SrArgs<'a> {
    embeddings: &'a Path,
    pairs: &'a Path,
    checkpoint: Option<&'a Path>,
    method: Method,
    k: usize,
    seed: u64,
    out: &'a Path,
}

fn eval_sr(a: SrArgs<'_>) -> Result<()> {
    let emb = read_embeddings(a.embeddings)?;
    let pair_set = read_pairs(a.pairs)?;
    let params = a
        .checkpoint
        .map(|p| load_checkpoint_for(p, emb.dim()))
        .transpose()?;
    if params.is_none() && a.method != Method::Kmeans {
        return Err(CliError::Usage("--method head/both needs --checkpoint".into()));
    }
    let split = RetrievalSplit::new(emb.count(), pair_set.pairs())?;
    let mut rows: Vec<SrRow> = Vec::new();
    if let (Some(p), Method::Head | Method::Both) = (&params, a.method) {
        rows.push(evaluate_head(&emb, &split, p)?);
    }
    if matches!(a.method, Method::Kmeans | Method::Both) {
        rows.push(evaluate_kmeans(&emb, &split, params.as_ref(), a.k, a.seed)?);
    }
    write_sr_report(&rows, a.out)?;
    let mut m = RunManifest::new("eval-sr", Some(a.seed));
    m.set("method", a.method);
    m.set("k", a.k);
    m.input(a.embeddings)?;
    m.input(a.pairs)?;
    if let Some(c) = a.checkpoint {
        m.input(c)?;
    }
    m.output(a.out)?;
    m.write(&beside(a.out))
}

fn eval_sts(embeddings: &Path, gold: &Path, out: &Path) -> Result<()> {
    let emb = read_embeddings(embeddings)?;
    let gold_scores = read_gold(gold)?;
    let r = sts_score(&emb, &gold_scores)?;
    let row = StsRow {
        metric: r.metric,
        value: r.value,
        n: r.n,
        dim: emb.dim(),
    };
    write_csv(&[row], out)?;
    let mut m = RunManifest::new("eval-sts", None);
    m.input(embeddings)?;
    m.input(gold)?;
    m.output(out)?;
    m.write(&beside(out))
}

fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::io(path, e.into()))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn read_sts_report(path: &Path) -> Result<Vec<StsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e.into()))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<StsRow>, _>>()
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn header_of(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(text.lines().next().unwrap_or("").trim().to_string())
}

fn series_by<T>(rows: &[T], key: impl Fn(&T) -> String, point: impl Fn(&T) -> (f64, f64)) -> Vec<Series> {
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        groups.entry(key(r)).or_default().push(point(r));
    }
    groups
        .into_iter()
        .map(|(label, points)| Series { label, points })
        .collect()
}

/// Relative drop against the largest dimension of the same metric.
fn relative_errors(rows: &[StsRow]) -> Vec<StsRow> {
    let mut reference: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for r in rows {
        let e = reference.entry(&r.metric).or_insert((r.dim, r.value));
        if r.dim > e.0 {
            *e = (r.dim, r.value);
        }
    }
    rows.iter()
        .map(|r| {
            let base = reference[r.metric.as_str()].1;
            StsRow {
                value: if base == 0.0 { 0.0 } else { (base - r.value) / base.abs() },
                ..r.clone()
            }
        })
        .collect()
}

fn report(inputs: &[PathBuf], out: &Path) -> Result<()> {
    let mut sr = Vec::new();
    let mut sts = Vec::new();
    for path in inputs {
        let header = header_of(path)?;
        if header.is_empty() {
            continue;
        }
        if header.starts_with("method,") {
            sr.extend(read_sr_report(path)?);
        } else if header.starts_with("metric,") {
            sts.extend(read_sts_report(path)?);
        } else {
            return Err(CliError::Usage(format!(
                "{}: not a retrieval or similarity report (header {header:?})",
                path.display()
            )));
        }
    }
    if sr.is_empty() && sts.is_empty() {
        return Err(CliError::EmptyReport("no data rows in the given reports".into()));
    }
    create_dir(out)?;
    let mut written = Vec::new();
    let mut emit = |name: &str, svg: String| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, svg).map_err(|e| CliError::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    if !sr.is_empty() {
        let acc = series_by(&sr, |r| r.method.clone(), |r| (r.dim as f64, r.accuracy));
        emit("sr_accuracy.svg", line_plot("Retrieval accuracy", "dimension", "accuracy", &acc))?;
        let time = series_by(&sr, |r| r.method.clone(), |r| (r.dim as f64, r.cluster_s));
        emit("sr_time.svg", line_plot("Clustering time", "dimension", "seconds", &time))?;
    }
    if !sts.is_empty() {
        let rel = relative_errors(&sts);
        let s = series_by(&rel, |r| r.metric.clone(), |r| (r.dim as f64, r.value));
        emit("sts_relative_error.svg", line_plot("STS relative error", "dimension", "relative error", &s))?;
    }
    let mut m = RunManifest::new("report", None);
    for p in inputs {
        m.input(p)?;
    }
    for p in &written {
        m.output(p)?;
    }
    m.write(&out.join("manifest.json"))
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("MCR2_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(format!("MCR2_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::GenSynth { dim, clusters, rank, per, sigma, seed, out } => gen_synth(
            SyntheticSpec {
                dim,
                clusters,
                points_per_cluster: per,
                subspace_rank: rank,
                noise_sigma: sigma,
                seed,
            },
            &out,
        ),
        Command::Train {
            embeddings,
            pairs,
            dim_out,
            clusters,
            batch,
            epochs,
            lambda,
            epsilon_sq,
            tau,
            lr,
            seed,
            restarts,
            out,
        } => {
            let cfg = TrainConfig {
                batch_pairs: batch,
                epochs,
                lambda: lambda.unwrap_or_else(|| default_lambda(dim_out)),
                epsilon_sq,
                temperature: tau,
                learning_rate: lr,
                seed,
                k: clusters,
                d_feat: dim_out,
                restarts,
            };
            train_cmd(&embeddings, &pairs, cfg, &out)
        }
        Command::Project { checkpoint, embeddings, out } => project_cmd(&checkpoint, &embeddings, &out),
        Command::EvalSr { embeddings, pairs, checkpoint, method, k, seed, out } => eval_sr(SrArgs {
            embeddings: &embeddings,
            pairs: &pairs,
            checkpoint: checkpoint.as_deref(),
            method,
            k,
            seed,
            out: &out,
        }),
        Command::EvalSts { embeddings, gold, out } => eval_sts(&embeddings, &gold, &out),
        Command::Report { inputs, out } => report(&inputs, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
