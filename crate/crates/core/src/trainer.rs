//! Training loop, configuration, ablation switches and grid search.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{ClusterAssignment, GlobalCorpus};
use crate::corpus::{BowCorpus, EmbeddingSource};
use crate::ecr::{default_nu, sinkhorn, TransportProblem};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{
    Batch, DecoderNorm, GloCom, KlAttribution, LocalMode, LossBreakdown, LossOptions, ModelDims, Noise,
};
use crate::numerics::{AdamConfig, AdamState, Tensor2};
use crate::rng::{self, substream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// No clustering context: every document is its own cluster.
    NoClustering,
    /// No augmentation of the reconstruction target (η forced to 0).
    NoAugmentation,
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "no_clustering" | "noc" => Ok(Self::NoClustering),
            "no_augmentation" | "noa" => Ok(Self::NoAugmentation),
            other => Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::NoClustering => "no_clustering",
            Self::NoAugmentation => "no_augmentation",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcrConfig {
    /// Entropic regularization; `None` means half the mean initial cost.
    pub nu: Option<f64>,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for EcrConfig {
    fn default() -> Self {
        Self {
            nu: None,
            max_iters: 50,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub num_topics: usize,
    pub num_clusters: usize,
    pub tau: f64,
    pub eta: f64,
    pub epsilon: f64,
    pub lambda_ecr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden_width: usize,
    /// Width of randomly initialized word and topic embeddings. Ignored when
    /// word embeddings come from a file.
    pub embed_dim: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub embedding_source: EmbeddingSource,
    pub kl_attribution: KlAttribution,
    pub local_mode: LocalMode,
    pub decoder_norm: DecoderNorm,
    /// Linear KL warm-up length in epochs; 0 disables it.
    pub kl_warmup: usize,
    pub top_n: usize,
    pub kmeans_normalize: bool,
    pub kmeans_max_iters: usize,
    pub ecr: EcrConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_topics: 50,
            num_clusters: 50,
            tau: 0.2,
            eta: 0.1,
            epsilon: 0.01,
            lambda_ecr: 20.0,
            epochs: 200,
            batch_size: 200,
            lr: 0.002,
            hidden_width: 200,
            embed_dim: 200,
            seed: 0,
            ablation: Ablation::Full,
            embedding_source: EmbeddingSource::Precomputed,
            kl_attribution: KlAttribution::Divided,
            local_mode: LocalMode::Adaptive,
            decoder_norm: DecoderNorm::Batch,
            kl_warmup: 0,
            top_n: eval::DEFAULT_TOP_N,
            kmeans_normalize: true,
            kmeans_max_iters: 300,
            ecr: EcrConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl TrainConfig {
    /// Sets one field from its textual key (`ecr.nu` for nested fields).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "num_topics" | "K" => self.num_topics = parse(key, v)?,
            "num_clusters" | "G" => self.num_clusters = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "eta" => self.eta = parse(key, v)?,
            "epsilon" => self.epsilon = parse(key, v)?,
            "lambda_ecr" => self.lambda_ecr = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "hidden_width" => self.hidden_width = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "ablation" => self.ablation = v.parse()?,
            "embedding_source" => self.embedding_source = v.parse()?,
            "kl_attribution" => {
                self.kl_attribution = match v {
                    "divided" => KlAttribution::Divided,
                    "per_document" => KlAttribution::PerDocument,
                    _ => return Err(Error::Config(format!("unknown kl_attribution {v:?}"))),
                }
            }
            "local_mode" => {
                self.local_mode = match v {
                    "adaptive" => LocalMode::Adaptive,
                    "direct" => LocalMode::Direct,
                    _ => return Err(Error::Config(format!("unknown local_mode {v:?}"))),
                }
            }
            "decoder_norm" => {
                self.decoder_norm = match v {
                    "none" => DecoderNorm::None,
                    "batch" => DecoderNorm::Batch,
                    _ => return Err(Error::Config(format!("unknown decoder_norm {v:?}"))),
                }
            }
            "kl_warmup" => self.kl_warmup = parse(key, v)?,
            "top_n" => self.top_n = parse(key, v)?,
            "kmeans_normalize" => self.kmeans_normalize = parse(key, v)?,
            "kmeans_max_iters" => self.kmeans_max_iters = parse(key, v)?,
            "ecr.nu" => {
                self.ecr.nu = match v {
                    "auto" | "" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "ecr.max_iters" => self.ecr.max_iters = parse(key, v)?,
            "ecr.tol" => self.ecr.tol = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Every field as `key=value`, in a fixed order that [`Self::apply_text`]
    /// reads back to an equal config.
    pub fn to_text(&self) -> String {
        let kl = match self.kl_attribution {
            KlAttribution::Divided => "divided",
            KlAttribution::PerDocument => "per_document",
        };
        let lm = match self.local_mode {
            LocalMode::Adaptive => "adaptive",
            LocalMode::Direct => "direct",
        };
        let dn = match self.decoder_norm {
            DecoderNorm::None => "none",
            DecoderNorm::Batch => "batch",
        };
        let nu = self.ecr.nu.map_or("auto".to_string(), |v| format!("{v:?}"));
        let mut s = String::new();
        let pairs: [(&str, String); 23] = [
            ("num_topics", self.num_topics.to_string()),
            ("num_clusters", self.num_clusters.to_string()),
            ("tau", format!("{:?}", self.tau)),
            ("eta", format!("{:?}", self.eta)),
            ("epsilon", format!("{:?}", self.epsilon)),
            ("lambda_ecr", format!("{:?}", self.lambda_ecr)),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("hidden_width", self.hidden_width.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("seed", self.seed.to_string()),
            ("ablation", self.ablation.to_string()),
            ("embedding_source", self.embedding_source.to_string()),
            ("kl_attribution", kl.to_string()),
            ("local_mode", lm.to_string()),
            ("decoder_norm", dn.to_string()),
            ("kl_warmup", self.kl_warmup.to_string()),
            ("top_n", self.top_n.to_string()),
            ("kmeans_normalize", self.kmeans_normalize.to_string()),
            ("kmeans_max_iters", self.kmeans_max_iters.to_string()),
            ("ecr.nu", nu),
            ("ecr.max_iters", self.ecr.max_iters.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k}={v}");
        }
        let _ = writeln!(s, "ecr.tol={:?}", self.ecr.tol);
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive_int = [
            ("num_topics", self.num_topics),
            ("num_clusters", self.num_clusters),
            ("batch_size", self.batch_size),
            ("hidden_width", self.hidden_width),
            ("embed_dim", self.embed_dim),
            ("top_n", self.top_n),
            ("ecr.max_iters", self.ecr.max_iters),
        ];
        for (name, v) in positive_int {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let positive = [
            ("tau", self.tau),
            ("epsilon", self.epsilon),
            ("lr", self.lr),
            ("ecr.tol", self.ecr.tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        for (name, v) in [("eta", self.eta), ("lambda_ecr", self.lambda_ecr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be non-negative and finite, got {v}"
                )));
            }
        }
        if let Some(nu) = self.ecr.nu {
            if !(nu > 0.0 && nu.is_finite()) {
                return Err(Error::Config(format!("ecr.nu must be positive, got {nu}")));
            }
        }
        Ok(())
    }

    /// Augmentation coefficient after applying the ablation.
    pub fn effective_eta(&self) -> f64 {
        match self.ablation {
            Ablation::NoAugmentation => 0.0,
            _ => self.eta,
        }
    }
}

/// Cluster assignment and global corpus that match a config's ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingContext {
    pub assignment: ClusterAssignment,
    pub global: GlobalCorpus,
}

impl TrainingContext {
    /// Builds the context for `config`. Under the no-clustering ablation the
    /// given assignment is replaced by one cluster per document.
    pub fn prepare(corpus: &BowCorpus, assignment: &ClusterAssignment, config: &TrainConfig) -> Result<Self> {
        let assignment = match config.ablation {
            Ablation::NoClustering => ClusterAssignment::identity(corpus.num_docs()),
            _ => assignment.clone(),
        };
        let global = GlobalCorpus::build(corpus, &assignment, config.effective_eta())?;
        let ctx = Self { assignment, global };
        ctx.check(corpus, config)?;
        Ok(ctx)
    }

    fn check(&self, corpus: &BowCorpus, config: &TrainConfig) -> Result<()> {
        self.global.check_consistent(corpus, &self.assignment)?;
        if self.global.eta != config.effective_eta() {
            return Err(Error::Config(format!(
                "global corpus built with eta={} but config requires {}",
                self.global.eta,
                config.effective_eta()
            )));
        }
        if config.ablation == Ablation::NoClustering {
            for d in 0..corpus.num_docs() {
                let g = &self.global.global_docs[self.assignment.cluster_of(d)];
                let local = corpus.doc(d);
                if g.len() != local.len()
                    || g.iter()
                        .zip(local)
                        .any(|(&(a, x), &(b, y))| a != b || x != u64::from(y))
                {
                    return Err(Error::Config(format!(
                        "no_clustering requires x^g = x^d, violated at document {d}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Epoch means of each loss component.
    pub trajectory: Vec<LossBreakdown>,
    pub wall_time_secs: f64,
    pub nu: f64,
    pub steps: u64,
    pub checkpoint: Option<PathBuf>,
}

fn kl_scale(config: &TrainConfig, epoch: usize) -> f64 {
    if config.kl_warmup == 0 {
        1.0
    } else {
        ((epoch + 1) as f64 / config.kl_warmup as f64).min(1.0)
    }
}

/// Initializes a model for `config`. `word_embeddings` of `None` draws random
/// vectors of width `config.embed_dim`.
pub fn init_model(vocab_size: usize, word_embeddings: Option<Tensor2>, config: &TrainConfig) -> Result<GloCom> {
    let mut rng = substream(config.seed, rng::INIT);
    let words = match word_embeddings {
        Some(w) => w,
        None => crate::corpus::random_word_embeddings(vocab_size, config.embed_dim, &mut rng).vectors,
    };
    let dims = ModelDims {
        vocab_size,
        num_topics: config.num_topics,
        embed_dim: words.cols(),
        hidden: config.hidden_width,
    };
    GloCom::init(dims, words, config.tau, config.epsilon, &mut rng)
}

/// Trains `model` in place for `config.epochs` epochs.
pub fn train(
    model: &mut GloCom,
    corpus: &BowCorpus,
    ctx: &TrainingContext,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    ctx.check(corpus, config)?;
    if model.vocab_size() != corpus.vocab_size() || model.num_topics() != config.num_topics {
        return Err(Error::Config(format!(
            "model is {}x{} but corpus/config need {}x{}",
            model.vocab_size(),
            model.num_topics(),
            corpus.vocab_size(),
            config.num_topics
        )));
    }
    if corpus.num_docs() == 0 {
        return Err(Error::InvalidArgument("cannot train on an empty corpus".into()));
    }
    let start = Instant::now();
    let nu = config
        .ecr
        .nu
        .unwrap_or_else(|| default_nu(&model.space.squared_distances()));
    let adam_cfg = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_cfg, &model.param_group_sizes());
    let mut rng = substream(config.seed, rng::TRAINING);
    let mut order: Vec<usize> = (0..corpus.num_docs()).collect();
    let mut trajectory = Vec::with_capacity(config.epochs);
    let k = config.num_topics;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let mut unconverged = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = Batch::build(corpus, &ctx.assignment, &ctx.global, chunk)?;
            let noise = Noise::sample(&batch, k, &mut rng);
            let plan = if config.lambda_ecr > 0.0 {
                let p = sinkhorn(&TransportProblem::new(
                    model.space.squared_distances(),
                    nu,
                    config.ecr.max_iters,
                    config.ecr.tol,
                ))?;
                unconverged += usize::from(!p.converged);
                Some(p)
            } else {
                None
            };
            let opts = LossOptions {
                kl_attribution: config.kl_attribution,
                local_mode: config.local_mode,
                lambda_ecr: config.lambda_ecr,
                decoder_norm: config.decoder_norm,
                kl_scale: kl_scale(config, epoch),
                plan: plan.as_ref(),
            };
            let (loss, cache) = model.forward(&batch, &noise, &opts)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    total: loss.total,
                    recon: loss.recon,
                    kl_global: loss.kl_global,
                    kl_local: loss.kl_local,
                    ecr: loss.ecr,
                });
            }
            model.zero_grad();
            model.backward(&batch, &noise, &opts, &cache)?;
            let (mut params, grads): (Vec<&mut [f64]>, Vec<&[f64]>) = model.param_groups_mut().into_iter().unzip();
            adam.step(&mut params, &grads)?;

            let w = batch.len() as f64;
            sums.total += w * loss.total;
            sums.recon += w * loss.recon;
            sums.kl_global += w * loss.kl_global;
            sums.kl_local += w * loss.kl_local;
            sums.ecr += w * loss.ecr;
        }
        let n = corpus.num_docs() as f64;
        let mean = LossBreakdown {
            total: sums.total / n,
            recon: sums.recon / n,
            kl_global: sums.kl_global / n,
            kl_local: sums.kl_local / n,
            ecr: sums.ecr / n,
        };
        if unconverged > 0 {
            debug!("epoch {epoch}: sinkhorn hit max_iters in {unconverged} steps");
        }
        info!(
            "epoch {epoch}: loss {:.4} (recon {:.4}, kl_g {:.4}, kl_l {:.4}, ecr {:.4})",
            mean.total, mean.recon, mean.kl_global, mean.kl_local, mean.ecr
        );
        trajectory.push(mean);
    }
    model.zero_grad();
    Ok(TrainReport {
        trajectory,
        wall_time_secs: start.elapsed().as_secs_f64(),
        nu,
        steps: adam.step,
        checkpoint: None,
    })
}

/// Values tried for each tuned hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub eta: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub lambda_ecr: Vec<f64>,
}

impl Grid {
    /// 5 × 3 × 5 combinations.
    pub fn full() -> Self {
        Self {
            eta: vec![0.01, 0.05, 0.1, 0.5, 1.0],
            epsilon: vec![0.001, 0.01, 0.1],
            lambda_ecr: vec![10.0, 20.0, 30.0, 60.0, 90.0],
        }
    }

    /// Every combination in lexicographic `(eta, epsilon, lambda_ecr)` order.
    pub fn combinations(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        for &e in &self.eta {
            for &s in &self.epsilon {
                for &l in &self.lambda_ecr {
                    out.push((e, s, l));
                }
            }
        }
        out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.total_cmp(&b.2)));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// NMI against gold labels when the corpus has them, otherwise ELBO.
    Auto,
    Nmi,
    /// Negative final-epoch topic-model loss.
    Elbo,
}

impl FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "nmi" => Ok(Self::Nmi),
            "elbo" => Ok(Self::Elbo),
            other => Err(Error::Config(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub eta: f64,
    pub epsilon: f64,
    pub lambda_ecr: f64,
    /// Higher is better.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub objective: Objective,
    /// Best first; ties keep lexicographic config order.
    pub ranked: Vec<GridEntry>,
}

impl GridReport {
    pub fn best(&self) -> &GridEntry {
        &self.ranked[0]
    }
}

/// Trains every grid combination on an isolated model and ranks them.
/// `word_embeddings` is shared read-only initialization for every run.
pub fn grid_search(
    base: &TrainConfig,
    grid: &Grid,
    corpus: &BowCorpus,
    assignment: &ClusterAssignment,
    word_embeddings: Option<&Tensor2>,
    objective: Objective,
) -> Result<GridReport> {
    let combos = grid.combinations();
    if combos.is_empty() {
        return Err(Error::Config("grid has no combinations".into()));
    }
    let objective = match objective {
        Objective::Auto if corpus.labels.is_some() => Objective::Nmi,
        Objective::Auto => Objective::Elbo,
        Objective::Nmi if corpus.labels.is_none() => {
            return Err(Error::Config("nmi objective needs gold labels".into()));
        }
        o => o,
    };
    let scores: Vec<Result<f64>> = combos
        .par_iter()
        .map(|&(eta, epsilon, lambda_ecr)| {
            let cfg = TrainConfig {
                eta,
                epsilon,
                lambda_ecr,
                ..base.clone()
            };
            let ctx = TrainingContext::prepare(corpus, assignment, &cfg)?;
            let mut model = init_model(corpus.vocab_size(), word_embeddings.cloned(), &cfg)?;
            let report = train(&mut model, corpus, &ctx, &cfg)?;
            match objective {
                Objective::Nmi => {
                    let out = model.infer(corpus, &ctx.assignment, &ctx.global, cfg.local_mode, cfg.top_n)?;
                    let gold = corpus.labels.as_deref().expect("checked above");
                    eval::nmi(&out.document_topics(), gold)
                }
                _ => Ok(report.trajectory.last().map_or(f64::NEG_INFINITY, |l| -l.topic_model())),
            }
        })
        .collect();
    let mut ranked = Vec::with_capacity(combos.len());
    for (&(eta, epsilon, lambda_ecr), score) in combos.iter().zip(scores) {
        let score = score?;
        if !score.is_finite() {
            warn!("grid point eta={eta} epsilon={epsilon} lambda_ecr={lambda_ecr} scored {score}");
        }
        ranked.push(GridEntry {
            eta,
            epsilon,
            lambda_ecr,
            score,
        });
    }
    // stable sort keeps lexicographic order among ties
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(GridReport { objective, ranked })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    fn toy(seed: u64) -> (BowCorpus, ClusterAssignment) {
        let mut rng = substream(seed, "toy");
        let docs: Vec<Vec<(usize, u32)>> = (0..24)
            .map(|d| {
                let base = (d % 3) * 5;
                (0..4).map(|_| (base + rng.random_range(0..5), 1)).collect()
            })
            .collect();
        let labels: Vec<i64> = (0..24).map(|d| (d % 3) as i64).collect();
        let corpus = BowCorpus::new(15, docs).unwrap().with_labels(labels).unwrap();
        let assignment = ClusterAssignment::from_labels((0..24).map(|d| d % 3).collect(), 3).unwrap();
        (corpus, assignment)
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            num_topics: 3,
            num_clusters: 3,
            epochs: 3,
            batch_size: 10,
            hidden_width: 8,
            embed_dim: 6,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = small_config();
        cfg.ecr.nu = Some(0.3);
        cfg.ablation = Ablation::NoAugmentation;
        cfg.kl_attribution = KlAttribution::PerDocument;
        cfg.decoder_norm = DecoderNorm::None;
        let mut back = TrainConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_errors() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.set("nope", "1").is_err());
        assert!(cfg.set("epochs", "x").is_err());
        assert!(cfg.apply_text("epochs 3").is_err());
        cfg.tau = 0.0;
        assert!(cfg.validate().is_err());
        cfg.tau = 0.2;
        cfg.apply_text("# comment\n\nK = 7\necr.nu=auto\n").unwrap();
        assert_eq!(cfg.num_topics, 7);
        assert_eq!(cfg.ecr.nu, None);
    }

    #[test]
    fn zero_epochs_leave_parameters() {
        let (corpus, assignment) = toy(1);
        let cfg = TrainConfig {
            epochs: 0,
            ..small_config()
        };
        let ctx = TrainingContext::prepare(&corpus, &assignment, &cfg).unwrap();
        let mut model = init_model(15, None, &cfg).unwrap();
        let before = model.clone();
        let report = train(&mut model, &corpus, &ctx, &cfg).unwrap();
        assert!(report.trajectory.is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn zero_lambda_total_is_topic_model_loss() {
        let (corpus, assignment) = toy(2);
        let cfg = TrainConfig {
            lambda_ecr: 0.0,
            ..small_config()
        };
        let ctx = TrainingContext::prepare(&corpus, &assignment, &cfg).unwrap();
        let mut model = init_model(15, None, &cfg).unwrap();
        let report = train(&mut model, &corpus, &ctx, &cfg).unwrap();
        for l in &report.trajectory {
            assert_eq!(l.ecr, 0.0);
            assert!((l.total - l.topic_model()).abs() <= 1e-12 * l.total.abs());
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let (corpus, assignment) = toy(3);
        let cfg = small_config();
        let run = || {
            let ctx = TrainingContext::prepare(&corpus, &assignment, &cfg).unwrap();
            let mut model = init_model(15, None, &cfg).unwrap();
            let r = train(&mut model, &corpus, &ctx, &cfg).unwrap();
            (r.trajectory, model)
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert_eq!(a.len(), 3);
    }

    #[test]
    fn no_augmentation_equals_full_with_zero_eta() {
        let (corpus, assignment) = toy(4);
        let noa = TrainConfig {
            ablation: Ablation::NoAugmentation,
            eta: 0.5,
            ..small_config()
        };
        let full = TrainConfig {
            eta: 0.0,
            ..small_config()
        };
        let run = |cfg: &TrainConfig| {
            let ctx = TrainingContext::prepare(&corpus, &assignment, cfg).unwrap();
            let mut model = init_model(15, None, cfg).unwrap();
            train(&mut model, &corpus, &ctx, cfg).unwrap().trajectory
        };
        assert_eq!(run(&noa), run(&full));
    }

    #[test]
    fn no_clustering_uses_documents_as_global_context() {
        let (corpus, assignment) = toy(5);
        let cfg = TrainConfig {
            ablation: Ablation::NoClustering,
            ..small_config()
        };
        let ctx = TrainingContext::prepare(&corpus, &assignment, &cfg).unwrap();
        assert_eq!(ctx.global.num_clusters(), corpus.num_docs());
        // a mismatched context is rejected
        let wrong = TrainingContext::prepare(&corpus, &assignment, &small_config()).unwrap();
        let mut model = init_model(15, None, &cfg).unwrap();
        assert!(matches!(
            train(&mut model, &corpus, &wrong, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn non_finite_loss_aborts_with_breakdown() {
        let (corpus, assignment) = toy(6);
        let cfg = small_config();
        let ctx = TrainingContext::prepare(&corpus, &assignment, &cfg).unwrap();
        let mut model = init_model(15, None, &cfg).unwrap();
        model.encoders.phi.hidden1.bias[0] = f64::NAN;
        assert!(matches!(
            train(&mut model, &corpus, &ctx, &cfg),
            Err(Error::NonFiniteLoss { epoch: 0, .. })
        ));
    }

    #[test]
    fn grid_orders_and_ties() {
        assert_eq!(Grid::full().combinations().len(), 75);
        let (corpus, assignment) = toy(7);
        let cfg = TrainConfig {
            epochs: 1,
            ..small_config()
        };
        let single = Grid {
            eta: vec![0.1],
            epsilon: vec![0.01],
            lambda_ecr: vec![20.0],
        };
        let r = grid_search(&cfg, &single, &corpus, &assignment, None, Objective::Auto).unwrap();
        assert_eq!(r.ranked.len(), 1);
        assert_eq!(r.objective, Objective::Nmi);
        assert_eq!((r.best().eta, r.best().epsilon, r.best().lambda_ecr), (0.1, 0.01, 20.0));

        // zero epochs: every combination shares the same initial model, so
        // NMI ties and lexicographic order decides
        let cfg0 = TrainConfig {
            epochs: 0,
            ..small_config()
        };
        let grid = Grid {
            eta: vec![0.5, 0.1],
            epsilon: vec![0.01],
            lambda_ecr: vec![30.0, 10.0],
        };
        let r = grid_search(&cfg0, &grid, &corpus, &assignment, None, Objective::Nmi).unwrap();
        let order: Vec<(f64, f64)> = r.ranked.iter().map(|e| (e.eta, e.lambda_ecr)).collect();
        assert!(r.ranked.iter().all(|e| e.score == r.ranked[0].score));
        assert_eq!(order, vec![(0.1, 10.0), (0.1, 30.0), (0.5, 10.0), (0.5, 30.0)]);
    }
}
