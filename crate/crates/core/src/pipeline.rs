//! End-to-end stages (cluster, train, infer, evaluate) and the files they
//! read and write.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::{kmeans, ClusterAssignment, KMeansParams};
use crate::corpus::{self, BowCorpus, EmbeddingMatrix, EmbeddingSource, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::Metrics;
use crate::model::{GloCom, TopicModelOutput};
use crate::numerics::Tensor2;
use crate::rng::{self, substream};
use crate::trainer::{self, Ablation, TrainConfig, TrainReport, TrainingContext};

pub const TOPICS_FILE: &str = "topics.txt";
pub const THETA_LOCAL_FILE: &str = "theta_local.csv";
pub const THETA_GLOBAL_FILE: &str = "theta_global.csv";
pub const BETA_FILE: &str = "beta.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const CLUSTERS_FILE: &str = "clusters.txt";
pub const REPORT_FILE: &str = "train_report.json";

/// Clusters documents per `config`: k-means on the chosen representation,
/// seeded from the clustering sub-stream.
pub fn cluster_documents(
    corpus: &BowCorpus,
    doc_embeddings: Option<&EmbeddingMatrix>,
    config: &TrainConfig,
) -> Result<ClusterAssignment> {
    let matrix = match config.embedding_source {
        EmbeddingSource::Tfidf => corpus::tfidf(corpus)?,
        EmbeddingSource::Precomputed => {
            let m = doc_embeddings.ok_or_else(|| {
                Error::Config("embedding_source=precomputed but no document embeddings were given".into())
            })?;
            if m.num_rows() != corpus.num_docs() {
                return Err(Error::RowCountMismatch {
                    expected: corpus.num_docs(),
                    found: m.num_rows(),
                });
            }
            m.clone()
        }
    };
    let params = KMeansParams {
        clusters: config.num_clusters,
        max_iters: config.kmeans_max_iters,
        normalize: config.kmeans_normalize,
        ..KMeansParams::new(config.num_clusters)
    };
    kmeans(&matrix, &params, &mut substream(config.seed, rng::CLUSTERING))
}

/// Inputs of a full run.
#[derive(Debug, Clone)]
pub struct PipelineInputs {
    pub corpus: BowCorpus,
    pub vocab: Vocabulary,
    pub doc_embeddings: Option<EmbeddingMatrix>,
    /// Initial word embeddings; random when absent.
    pub word_embeddings: Option<Tensor2>,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub assignment: ClusterAssignment,
    pub model: GloCom,
    pub report: TrainReport,
    pub output: TopicModelOutput,
    pub metrics: Metrics,
}

/// Clusters (skipped under the no-clustering ablation), trains, infers and
/// evaluates against the training corpus and its labels.
pub fn run(inputs: &PipelineInputs, config: &TrainConfig) -> Result<PipelineRun> {
    config.validate().map_err(|e| e.in_stage("config"))?;
    if inputs.vocab.len() != inputs.corpus.vocab_size() {
        return Err(Error::shape(
            "pipeline",
            format!(
                "vocabulary has {} words, corpus {}",
                inputs.vocab.len(),
                inputs.corpus.vocab_size()
            ),
        ));
    }
    let corpus = &inputs.corpus;
    let assignment = match config.ablation {
        Ablation::NoClustering => ClusterAssignment::identity(corpus.num_docs()),
        _ => cluster_documents(corpus, inputs.doc_embeddings.as_ref(), config).map_err(|e| e.in_stage("cluster"))?,
    };
    let ctx = TrainingContext::prepare(corpus, &assignment, config).map_err(|e| e.in_stage("train"))?;
    let mut model = trainer::init_model(corpus.vocab_size(), inputs.word_embeddings.clone(), config)
        .map_err(|e| e.in_stage("train"))?;
    let report = trainer::train(&mut model, corpus, &ctx, config).map_err(|e| e.in_stage("train"))?;
    let output = model
        .infer(corpus, &ctx.assignment, &ctx.global, config.local_mode, config.top_n)
        .map_err(|e| e.in_stage("infer"))?;
    let metrics = Metrics::compute(
        &output.top_words,
        &output.document_topics(),
        corpus.labels.as_deref(),
        corpus,
    )
    .map_err(|e| e.in_stage("eval"))?;
    info!("metrics: {metrics:?}");
    Ok(PipelineRun {
        assignment: ctx.assignment,
        model,
        report,
        output,
        metrics,
    })
}

/// One line per topic with its top words separated by spaces.
pub fn topics_text(top_words: &[Vec<usize>], vocab: &Vocabulary) -> String {
    let mut s = String::new();
    for topic in top_words {
        let words: Vec<&str> = topic.iter().map(|&w| vocab.word(w)).collect();
        s.push_str(&words.join(" "));
        s.push('\n');
    }
    s
}

/// Reads a topics file back to word ids; words missing from `vocab` map to
/// `usize::MAX` so coherence scores them as absent.
pub fn read_topics(path: &Path, vocab: &Vocabulary) -> Result<Vec<Vec<usize>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|w| vocab.id(w).unwrap_or(usize::MAX))
                .collect()
        })
        .collect())
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes topics, θ matrices, β and metrics into `dir`.
pub fn write_outputs(
    dir: &Path,
    vocab: &Vocabulary,
    output: &TopicModelOutput,
    metrics: Option<&Metrics>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join(TOPICS_FILE), &topics_text(&output.top_words, vocab))?;
    corpus::save_matrix_csv(&dir.join(THETA_LOCAL_FILE), &output.theta_local)?;
    corpus::save_matrix_csv(&dir.join(THETA_GLOBAL_FILE), &output.theta_global)?;
    corpus::save_matrix_csv(&dir.join(BETA_FILE), &output.beta)?;
    if let Some(m) = metrics {
        write(&dir.join(METRICS_FILE), &m.to_json()?)?;
    }
    Ok(())
}

/// Everything written by [`run`] plus the checkpoint and training report.
pub fn write_run(dir: &Path, vocab: &Vocabulary, run: &PipelineRun) -> Result<()> {
    write_outputs(dir, vocab, &run.output, Some(&run.metrics))?;
    run.model.save(&dir.join(CHECKPOINT_DIR))?;
    corpus::write_int_lines(&dir.join(CLUSTERS_FILE), &run.assignment.assignment)?;
    let mut report = run.report.clone();
    report.checkpoint = Some(PathBuf::from(CHECKPOINT_DIR));
    write(&dir.join(REPORT_FILE), &(serde_json::to_string_pretty(&report)? + "\n"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Record of a command invocation, written before any output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    /// Resolved `key=value` config, if the command uses one.
    pub config: Option<String>,
    pub inputs: Vec<InputDigest>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn new(
        command: Vec<String>,
        config: Option<&TrainConfig>,
        inputs: &[&Path],
        seed: Option<u64>,
    ) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|p| {
                Ok(InputDigest {
                    path: p.to_path_buf(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            command,
            config: config.map(TrainConfig::to_text),
            inputs,
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: now(),
            finished_unix: None,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join(MANIFEST_FILE), &(serde_json::to_string_pretty(self)? + "\n"))
    }

    pub fn finish(&mut self, dir: &Path) -> Result<()> {
        self.finished_unix = Some(now());
        self.write(dir)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate, SyntheticSpec};

    fn tiny() -> (PipelineInputs, TrainConfig) {
        let s = generate(&SyntheticSpec {
            vocab_size: 20,
            num_topics: 3,
            num_clusters: 3,
            num_docs: 40,
            seed: 2,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let inputs = PipelineInputs {
            corpus: s.corpus,
            vocab: s.vocab,
            doc_embeddings: Some(s.doc_embeddings),
            word_embeddings: None,
        };
        let cfg = TrainConfig {
            num_topics: 3,
            num_clusters: 3,
            epochs: 2,
            batch_size: 16,
            hidden_width: 8,
            embed_dim: 5,
            top_n: 4,
            ..TrainConfig::default()
        };
        (inputs, cfg)
    }

    #[test]
    fn outputs_round_trip_topics() {
        let (inputs, cfg) = tiny();
        let run = run(&inputs, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), &inputs.vocab, &run).unwrap();
        let topics = read_topics(&dir.path().join(TOPICS_FILE), &inputs.vocab).unwrap();
        assert_eq!(topics, run.output.top_words);
        let theta = corpus::load_matrix(&dir.path().join(THETA_LOCAL_FILE)).unwrap();
        assert_eq!(theta, run.output.theta_local);
        assert_eq!(GloCom::load(&dir.path().join(CHECKPOINT_DIR)).unwrap(), run.model);
    }

    #[test]
    fn precomputed_source_requires_embeddings() {
        let (mut inputs, cfg) = tiny();
        inputs.doc_embeddings = None;
        let err = run(&inputs, &cfg).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "cluster", .. }), "{err}");
        let tfidf = TrainConfig {
            embedding_source: EmbeddingSource::Tfidf,
            ..cfg
        };
        assert!(run(&inputs, &tfidf).is_ok());
    }

    #[test]
    fn manifest_digests_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("x.txt");
        std::fs::write(&f, "abc").unwrap();
        let m = RunManifest::new(vec!["train".into()], Some(&TrainConfig::default()), &[&f], Some(3)).unwrap();
        assert_eq!(
            m.inputs[0].sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        m.write(dir.path()).unwrap();
        assert_eq!(RunManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap(), m);
    }
}
