//! `glocom` command-line front end.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0  | success |
//! | 1  | unexpected internal failure |
//! | 2  | an input file does not exist |
//! | 3  | invalid arguments or config |
//! | 4  | preprocess stage failed |
//! | 5  | cluster stage failed |
//! | 6  | train stage failed |
//! | 7  | infer stage failed |
//! | 8  | eval stage failed |
//! | 9  | synth stage failed |
//! | 10 | grid search failed |
//! | 11 | writing outputs failed |

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use glocom::aggregation::{ClusterAssignment, GlobalCorpus};
use glocom::corpus::{self, BowCorpus, Vocabulary};
use glocom::eval::Metrics;
use glocom::model::{argmax_rows, GloCom};
use glocom::pipeline::{self, PipelineInputs, RunManifest};
use glocom::synthetic::{self, SyntheticSpec};
use glocom::trainer::{self, Ablation, Grid, Objective, TrainConfig, TrainingContext};
use glocom::{rng, Error};
use log::info;

const CONFIG_FILE: &str = "config.txt";
const KEPT_FILE: &str = "kept.txt";
const CORPUS_FILE: &str = "corpus.bow";
const VOCAB_FILE: &str = "vocab.txt";
const LABELS_FILE: &str = "labels.txt";
const GRID_FILE: &str = "grid_report.json";

#[derive(Parser)]
#[command(
    name = "glocom",
    version,
    about = "Short-text topic modeling with global clustering context"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// `key=value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set num_topics=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary and sparse bag-of-words from a tokenized corpus.
    Preprocess {
        /// One document per line, whitespace-separated tokens.
        #[arg(long)]
        input: PathBuf,
        /// Optional per-document integer labels, filtered alongside documents.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        min_freq: usize,
        #[arg(long, default_value_t = 2)]
        min_terms: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster documents into global groups with k-means.
    Cluster {
        #[arg(long)]
        corpus: PathBuf,
        /// Document embeddings (binary or CSV). Required unless `embedding_source=tfidf`.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Cluster ids, one per line. Not needed under `ablation=noc`.
        #[arg(long)]
        clusters: Option<PathBuf>,
        /// GloVe-style text vectors; needs `--vocab`.
        #[arg(long, requires = "vocab")]
        word_embeddings: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Infer topics and document proportions from a checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        clusters: Option<PathBuf>,
        /// Defaults to the `config.txt` written next to the checkpoint.
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score topics and document assignments.
    Eval {
        /// One topic per line, top words separated by spaces.
        #[arg(long)]
        topics: PathBuf,
        /// Document-topic proportions (CSV or binary), one row per document.
        #[arg(long)]
        theta: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Reference corpus for NPMI co-occurrence counts.
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a planted-topic synthetic corpus.
    Synth {
        /// `key=value` spec file; defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster, train, infer and evaluate in one run.
    Pipeline {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every (eta, epsilon, lambda_ecr) combination and rank them.
    Grid {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated values; the defaults are the full search grid.
        #[arg(long, value_delimiter = ',')]
        eta: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        epsilon: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        lambda_ecr: Option<Vec<f64>>,
        /// auto, nmi or elbo.
        #[arg(long, default_value = "auto")]
        objective: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    doc_embeddings: Option<PathBuf>,
    #[arg(long)]
    word_embeddings: Option<PathBuf>,
}

enum Failure {
    MissingInput(PathBuf),
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CliResult<T> = Result<T, Failure>;

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::MissingInput(_) => 2,
            Failure::Usage(_) => 3,
            Failure::Run(Error::Stage { stage, .. }) => match *stage {
                "config" => 3,
                "preprocess" => 4,
                "cluster" => 5,
                "train" => 6,
                "infer" => 7,
                "eval" => 8,
                "synth" => 9,
                "grid" => 10,
                "output" => 11,
                _ => 1,
            },
            Failure::Run(Error::Config(_)) => 3,
            Failure::Run(_) => 1,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::MissingInput(p) => format!("input file not found: {}", p.display()),
            Failure::Usage(m) => m.clone(),
            Failure::Run(e) => e.to_string(),
        }
    }
}

trait Stage<T> {
    fn stage(self, name: &'static str) -> CliResult<T>;
}

impl<T> Stage<T> for glocom::Result<T> {
    fn stage(self, name: &'static str) -> CliResult<T> {
        self.map_err(|e| Failure::Run(e.in_stage(name)))
    }
}

fn require<'a>(paths: impl IntoIterator<Item = &'a Path>) -> CliResult<()> {
    for p in paths {
        if !p.exists() {
            return Err(Failure::MissingInput(p.to_path_buf()));
        }
    }
    Ok(())
}

fn resolve_config(args: &ConfigArgs, fallback: Option<&Path>) -> CliResult<TrainConfig> {
    let mut config = match (&args.config, fallback) {
        (Some(p), _) => {
            require([p.as_path()])?;
            TrainConfig::load(p).stage("config")?
        }
        (None, Some(p)) if p.exists() => TrainConfig::load(p).stage("config")?,
        _ => TrainConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        config.set(k, v).stage("config")?;
    }
    config.validate().stage("config")?;
    Ok(config)
}

fn command_line() -> Vec<String> {
    std::env::args().collect()
}

/// Hashes existing inputs and writes the manifest into `out`.
fn start_manifest(
    out: &Path,
    config: Option<&TrainConfig>,
    inputs: &[Option<&PathBuf>],
    seed: Option<u64>,
) -> CliResult<RunManifest> {
    let paths: Vec<&Path> = inputs.iter().flatten().map(|p| p.as_path()).collect();
    let manifest = RunManifest::new(command_line(), config, &paths, seed).stage("output")?;
    manifest.write(out).stage("output")?;
    Ok(manifest)
}

fn load_corpus(path: &Path, labels: Option<&PathBuf>) -> glocom::Result<BowCorpus> {
    let corpus = BowCorpus::load(path)?;
    match labels {
        Some(l) => corpus.with_labels(corpus::read_int_lines(l)?),
        None => Ok(corpus),
    }
}

fn load_assignment(path: Option<&PathBuf>, corpus: &BowCorpus, config: &TrainConfig) -> CliResult<ClusterAssignment> {
    if config.ablation == Ablation::NoClustering {
        return Ok(ClusterAssignment::identity(corpus.num_docs()));
    }
    let path = path.ok_or_else(|| Failure::Usage("--clusters is required unless ablation=noc".into()))?;
    let ids = corpus::read_int_lines(path).stage("train")?;
    let ids: Vec<usize> = ids
        .into_iter()
        .map(|i| {
            usize::try_from(i).map_err(|_| Failure::Usage(format!("negative cluster id {i} in {}", path.display())))
        })
        .collect::<CliResult<_>>()?;
    let g = ids.iter().max().map_or(0, |m| m + 1);
    ClusterAssignment::from_labels(ids, g).stage("train")
}

fn word_vectors(
    path: Option<&PathBuf>,
    vocab: Option<&Vocabulary>,
    config: &TrainConfig,
) -> glocom::Result<Option<glocom::numerics::Tensor2>> {
    match (path, vocab) {
        (Some(p), Some(v)) => {
            let init = corpus::load_word_embeddings(p, v, &mut rng::substream(config.seed, rng::INIT))?;
            info!("word embedding coverage {:.3}", init.coverage);
            Ok(Some(init.vectors))
        }
        _ => Ok(None),
    }
}

fn preprocess(input: &Path, labels: Option<&PathBuf>, min_freq: usize, min_terms: usize, out: &Path) -> CliResult<()> {
    require([input].into_iter().chain(labels.map(|p| p.as_path())))?;
    let mut manifest = start_manifest(out, None, &[Some(&input.to_path_buf()), labels], None)?;
    let raw = corpus::read_corpus_file(input).stage("preprocess")?;
    let vocab = corpus::build_vocabulary(&raw, min_freq).stage("preprocess")?;
    let filtered = corpus::build_bow(&raw, &vocab, min_terms).stage("preprocess")?;
    info!(
        "kept {} of {} documents, {} words",
        filtered.kept.len(),
        raw.len(),
        vocab.len()
    );
    filtered.corpus.save(&out.join(CORPUS_FILE)).stage("output")?;
    vocab.save(&out.join(VOCAB_FILE)).stage("output")?;
    corpus::write_int_lines(&out.join(KEPT_FILE), &filtered.kept).stage("output")?;
    if let Some(l) = labels {
        let all = corpus::read_int_lines(l).stage("preprocess")?;
        let kept = corpus::filter_by_kept(&all, &filtered.kept).stage("preprocess")?;
        corpus::write_int_lines(&out.join(LABELS_FILE), &kept).stage("output")?;
    }
    manifest.finish(out).stage("output")?;
    Ok(())
}

fn cluster(corpus_path: &Path, embeddings: Option<&PathBuf>, cfg: &ConfigArgs, out: &Path) -> CliResult<()> {
    require([corpus_path].into_iter().chain(embeddings.map(|p| p.as_path())))?;
    let config = resolve_config(cfg, None)?;
    let mut manifest = start_manifest(
        out,
        Some(&config),
        &[Some(&corpus_path.to_path_buf()), embeddings, cfg.config.as_ref()],
        Some(config.seed),
    )?;
    let corpus = BowCorpus::load(corpus_path).stage("cluster")?;
    let emb = embeddings
        .map(|p| corpus::load_embeddings(p, corpus.num_docs()))
        .transpose()
        .stage("cluster")?;
    let assignment = pipeline::cluster_documents(&corpus, emb.as_ref(), &config).stage("cluster")?;
    corpus::write_int_lines(&out.join(pipeline::CLUSTERS_FILE), &assignment.assignment).stage("output")?;
    manifest.finish(out).stage("output")?;
    Ok(())
}

struct TrainArgs<'a> {
    corpus: &'a Path,
    clusters: Option<&'a PathBuf>,
    word_embeddings: Option<&'a PathBuf>,
    vocab: Option<&'a PathBuf>,
    cfg: &'a ConfigArgs,
    out: &'a Path,
}

fn train(a: TrainArgs<'_>) -> CliResult<()> {
    require(
        [a.corpus].into_iter().chain(
            [a.clusters, a.word_embeddings, a.vocab]
                .into_iter()
                .flatten()
                .map(|p| p.as_path()),
        ),
    )?;
    let config = resolve_config(a.cfg, None)?;
    let corpus_path = a.corpus.to_path_buf();
    let mut manifest = start_manifest(
        a.out,
        Some(&config),
        &[
            Some(&corpus_path),
            a.clusters,
            a.word_embeddings,
            a.vocab,
            a.cfg.config.as_ref(),
        ],
        Some(config.seed),
    )?;
    let corpus = BowCorpus::load(a.corpus).stage("train")?;
    let assignment = load_assignment(a.clusters, &corpus, &config)?;
    let vocab = a.vocab.map(|p| Vocabulary::load(p)).transpose().stage("train")?;
    let words = word_vectors(a.word_embeddings, vocab.as_ref(), &config).stage("train")?;
    let ctx = TrainingContext::prepare(&corpus, &assignment, &config).stage("train")?;
    let mut model = trainer::init_model(corpus.vocab_size(), words, &config).stage("train")?;
    let mut report = trainer::train(&mut model, &corpus, &ctx, &config).stage("train")?;
    model.save(&a.out.join(pipeline::CHECKPOINT_DIR)).stage("output")?;
    report.checkpoint = Some(PathBuf::from(pipeline::CHECKPOINT_DIR));
    write_text(&a.out.join(pipeline::REPORT_FILE), &(to_json(&report)? + "\n"))?;
    write_text(&a.out.join(CONFIG_FILE), &config.to_text())?;
    manifest.finish(a.out).stage("output")?;
    Ok(())
}

fn infer(
    checkpoint: &Path,
    corpus_path: &Path,
    vocab_path: &Path,
    clusters: Option<&PathBuf>,
    cfg: &ConfigArgs,
    out: &Path,
) -> CliResult<()> {
    require(
        [checkpoint, corpus_path, vocab_path]
            .into_iter()
            .chain(clusters.map(|p| p.as_path())),
    )?;
    let fallback = checkpoint.parent().map(|p| p.join(CONFIG_FILE));
    let config = resolve_config(cfg, fallback.as_deref())?;
    let mut manifest = start_manifest(
        out,
        Some(&config),
        &[
            Some(&corpus_path.to_path_buf()),
            Some(&vocab_path.to_path_buf()),
            clusters,
            cfg.config.as_ref(),
        ],
        Some(config.seed),
    )?;
    let model = GloCom::load(checkpoint).stage("infer")?;
    let corpus = BowCorpus::load(corpus_path).stage("infer")?;
    let vocab = Vocabulary::load(vocab_path).stage("infer")?;
    let assignment = load_assignment(clusters, &corpus, &config)?;
    let global = GlobalCorpus::build(&corpus, &assignment, config.effective_eta()).stage("infer")?;
    let output = model
        .infer(&corpus, &assignment, &global, config.local_mode, config.top_n)
        .stage("infer")?;
    pipeline::write_outputs(out, &vocab, &output, None).stage("output")?;
    manifest.finish(out).stage("output")?;
    Ok(())
}

struct EvalArgs<'a> {
    topics: &'a Path,
    theta: &'a Path,
    labels: Option<&'a PathBuf>,
    reference: &'a Path,
    vocab: &'a Path,
    out: &'a Path,
}

fn eval(a: EvalArgs<'_>) -> CliResult<()> {
    require(
        [a.topics, a.theta, a.reference, a.vocab]
            .into_iter()
            .chain(a.labels.map(|p| p.as_path())),
    )?;
    let owned: Vec<PathBuf> = [a.topics, a.theta, a.reference, a.vocab]
        .iter()
        .map(|p| p.to_path_buf())
        .collect();
    let inputs: Vec<Option<&PathBuf>> = owned.iter().map(Some).chain([a.labels]).collect();
    let mut manifest = start_manifest(a.out, None, &inputs, None)?;
    let vocab = Vocabulary::load(a.vocab).stage("eval")?;
    let topics = pipeline::read_topics(a.topics, &vocab).stage("eval")?;
    let theta = corpus::load_matrix(a.theta).stage("eval")?;
    let reference = BowCorpus::load(a.reference).stage("eval")?;
    let labels = a.labels.map(|p| corpus::read_int_lines(p)).transpose().stage("eval")?;
    let metrics = Metrics::compute(&topics, &argmax_rows(&theta), labels.as_deref(), &reference).stage("eval")?;
    write_text(&a.out.join(pipeline::METRICS_FILE), &metrics.to_json().stage("eval")?)?;
    manifest.finish(a.out).stage("output")?;
    Ok(())
}

fn synth(spec_path: Option<&PathBuf>, overrides: &[String], out: &Path) -> CliResult<()> {
    require(spec_path.map(|p| p.as_path()))?;
    let mut spec = match spec_path {
        Some(p) => SyntheticSpec::load(p).stage("config")?,
        None => SyntheticSpec::default(),
    };
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        spec.set(k, v).stage("config")?;
    }
    let mut manifest = start_manifest(out, None, &[spec_path], Some(spec.seed))?;
    let data = synthetic::generate(&spec).stage("synth")?;
    data.save(out).stage("output")?;
    manifest.finish(out).stage("output")?;
    Ok(())
}

fn data_inputs(data: &DataArgs, config: &TrainConfig) -> CliResult<PipelineInputs> {
    let corpus = load_corpus(&data.corpus, data.labels.as_ref()).stage("config")?;
    let vocab = Vocabulary::load(&data.vocab).stage("config")?;
    let doc_embeddings = data
        .doc_embeddings
        .as_ref()
        .map(|p| corpus::load_embeddings(p, corpus.num_docs()))
        .transpose()
        .stage("cluster")?;
    let word_embeddings = word_vectors(data.word_embeddings.as_ref(), Some(&vocab), config).stage("train")?;
    Ok(PipelineInputs {
        corpus,
        vocab,
        doc_embeddings,
        word_embeddings,
    })
}

fn data_paths(data: &DataArgs) -> Vec<Option<&PathBuf>> {
    vec![
        Some(&data.corpus),
        Some(&data.vocab),
        data.labels.as_ref(),
        data.doc_embeddings.as_ref(),
        data.word_embeddings.as_ref(),
    ]
}

fn require_data(data: &DataArgs, cfg: &ConfigArgs) -> CliResult<()> {
    let mut paths = data_paths(data);
    paths.push(cfg.config.as_ref());
    require(paths.into_iter().flatten().map(|p| p.as_path()))
}

fn run_pipeline(data: &DataArgs, cfg: &ConfigArgs, out: &Path) -> CliResult<()> {
    require_data(data, cfg)?;
    let config = resolve_config(cfg, None)?;
    let mut paths = data_paths(data);
    paths.push(cfg.config.as_ref());
    let mut manifest = start_manifest(out, Some(&config), &paths, Some(config.seed))?;
    let inputs = data_inputs(data, &config)?;
    let run = pipeline::run(&inputs, &config)?;
    pipeline::write_run(out, &inputs.vocab, &run).stage("output")?;
    write_text(&out.join(CONFIG_FILE), &config.to_text())?;
    manifest.finish(out).stage("output")?;
    Ok(())
}

struct GridArgs<'a> {
    data: &'a DataArgs,
    cfg: &'a ConfigArgs,
    eta: Option<&'a Vec<f64>>,
    epsilon: Option<&'a Vec<f64>>,
    lambda_ecr: Option<&'a Vec<f64>>,
    objective: &'a str,
    out: &'a Path,
}

fn grid(a: GridArgs<'_>) -> CliResult<()> {
    require_data(a.data, a.cfg)?;
    let config = resolve_config(a.cfg, None)?;
    let objective: Objective = a.objective.parse().stage("config")?;
    let full = Grid::full();
    let grid = Grid {
        eta: a.eta.cloned().unwrap_or(full.eta),
        epsilon: a.epsilon.cloned().unwrap_or(full.epsilon),
        lambda_ecr: a.lambda_ecr.cloned().unwrap_or(full.lambda_ecr),
    };
    let mut paths = data_paths(a.data);
    paths.push(a.cfg.config.as_ref());
    let mut manifest = start_manifest(a.out, Some(&config), &paths, Some(config.seed))?;
    let inputs = data_inputs(a.data, &config)?;
    let assignment = match config.ablation {
        Ablation::NoClustering => ClusterAssignment::identity(inputs.corpus.num_docs()),
        _ => pipeline::cluster_documents(&inputs.corpus, inputs.doc_embeddings.as_ref(), &config).stage("cluster")?,
    };
    let report = trainer::grid_search(
        &config,
        &grid,
        &inputs.corpus,
        &assignment,
        inputs.word_embeddings.as_ref(),
        objective,
    )
    .stage("grid")?;
    let best = report.best();
    info!(
        "best eta={} epsilon={} lambda_ecr={} score={}",
        best.eta, best.epsilon, best.lambda_ecr, best.score
    );
    let best_config = TrainConfig {
        eta: best.eta,
        epsilon: best.epsilon,
        lambda_ecr: best.lambda_ecr,
        ..config
    };
    write_text(&a.out.join(GRID_FILE), &(to_json(&report)? + "\n"))?;
    write_text(&a.out.join(CONFIG_FILE), &best_config.to_text())?;
    manifest.finish(a.out).stage("output")?;
    Ok(())
}

fn to_json<T: serde::Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string_pretty(value).map_err(|e| Failure::Run(Error::from(e).in_stage("output")))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| {
        Failure::Run(
            Error::Io {
                path: path.to_path_buf(),
                source: e,
            }
            .in_stage("output"),
        )
    })
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("GLOCOM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Failure::Usage(format!("GLOCOM_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("cannot configure thread pool: {e}")))
}

fn dispatch(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match &cli.command {
        Command::Preprocess {
            input,
            labels,
            min_freq,
            min_terms,
            out,
        } => preprocess(input, labels.as_ref(), *min_freq, *min_terms, out),
        Command::Cluster {
            corpus,
            embeddings,
            cfg,
            out,
        } => cluster(corpus, embeddings.as_ref(), cfg, out),
        Command::Train {
            corpus,
            clusters,
            word_embeddings,
            vocab,
            cfg,
            out,
        } => train(TrainArgs {
            corpus,
            clusters: clusters.as_ref(),
            word_embeddings: word_embeddings.as_ref(),
            vocab: vocab.as_ref(),
            cfg,
            out,
        }),
        Command::Infer {
            checkpoint,
            corpus,
            vocab,
            clusters,
            cfg,
            out,
        } => infer(checkpoint, corpus, vocab, clusters.as_ref(), cfg, out),
        Command::Eval {
            topics,
            theta,
            labels,
            reference,
            vocab,
            out,
        } => eval(EvalArgs {
            topics,
            theta,
            labels: labels.as_ref(),
            reference,
            vocab,
            out,
        }),
        Command::Synth { spec, overrides, out } => synth(spec.as_ref(), overrides, out),
        Command::Pipeline { data, cfg, out } => run_pipeline(data, cfg, out),
        Command::Grid {
            data,
            cfg,
            eta,
            epsilon,
            lambda_ecr,
            objective,
            out,
        } => grid(GridArgs {
            data,
            cfg,
            eta: eta.as_ref(),
            epsilon: epsilon.as_ref(),
            lambda_ecr: lambda_ecr.as_ref(),
            objective,
            out,
        }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 3 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}
