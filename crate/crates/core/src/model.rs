//! The topic model: embedding-based topic-word matrix, the global and local
//! inference networks, the combination of global topic proportions with a
//! per-document adaptive variable, and the evidence lower bound.
//!
//! The computation graph is fixed, so gradients are produced by a hand-written
//! backward pass over a cached forward pass rather than a general autodiff
//! engine. Every step is checked against finite differences in the tests.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::aggregation::{ClusterAssignment, GlobalCorpus};
use crate::corpus::{self, BowCorpus, Precision};
use crate::ecr::{ecr_loss_backward, TransportPlan};
use crate::error::{Error, Result};
use crate::numerics::gaussian::{
    clamp_log_var, gaussian_reparameterize_backward, kl_diag_gaussian, kl_diag_gaussian_backward,
};
use crate::numerics::layers::{log_softmax, softmax, softmax_backward, softmax_forward, softmax_in_place};
use crate::numerics::{softplus_backward, softplus_forward, DenseLayer, Tensor2};
use crate::rng::StageRng;

/// Word and topic embeddings plus the temperature of the topic-word kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicSpace {
    /// `V × L`
    pub word_embeddings: Tensor2,
    /// `K × L`
    pub topic_embeddings: Tensor2,
    pub tau: f64,
}

impl TopicSpace {
    pub fn new(word_embeddings: Tensor2, topic_embeddings: Tensor2, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
        }
        if word_embeddings.cols() != topic_embeddings.cols() {
            return Err(Error::shape(
                "TopicSpace::new",
                format!(
                    "word dim {} vs topic dim {}",
                    word_embeddings.cols(),
                    topic_embeddings.cols()
                ),
            ));
        }
        if !word_embeddings.is_finite() || !topic_embeddings.is_finite() {
            return Err(Error::InvalidArgument("embeddings must be finite".into()));
        }
        Ok(Self {
            word_embeddings,
            topic_embeddings,
            tau,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.word_embeddings.rows()
    }

    pub fn num_topics(&self) -> usize {
        self.topic_embeddings.rows()
    }

    /// `‖w_i − t_j‖²` as a `V × K` matrix.
    pub fn squared_distances(&self) -> Tensor2 {
        let w = &self.word_embeddings;
        let t = &self.topic_embeddings;
        let wn: Vec<f64> = w.rows_iter().map(|r| r.iter().map(|x| x * x).sum()).collect();
        let tn: Vec<f64> = t.rows_iter().map(|r| r.iter().map(|x| x * x).sum()).collect();
        let cross = w.matmul_t(t).expect("dims checked at construction");
        Tensor2::from_fn(w.rows(), t.rows(), |i, j| {
            (wn[i] + tn[j] - 2.0 * cross.get(i, j)).max(0.0)
        })
    }
}

/// Topic-word matrix: `β_ij = softmax_j(−‖w_i − t_j‖² / τ)`, a `V × K`
/// matrix whose word rows sum to one.
pub fn compute_beta(space: &TopicSpace) -> Tensor2 {
    beta_from_distances(&space.squared_distances(), space.tau)
}

fn beta_from_distances(dist: &Tensor2, tau: f64) -> Tensor2 {
    let mut logits = dist.clone();
    logits.scale(-1.0 / tau);
    softmax_forward(&logits)
}

/// Gradient of `Σ_ij G_ij ‖w_i − t_j‖²` w.r.t. `W` and `T`.
pub(crate) fn squared_distance_backward(w: &Tensor2, t: &Tensor2, grad: &Tensor2) -> (Tensor2, Tensor2) {
    // d/dw_i = 2 Σ_j G_ij (w_i − t_j);  d/dt_j = 2 Σ_i G_ij (t_j − w_i)
    let row_g = grad.row_sums();
    let col_g = grad.column_sums();
    let gt = grad.matmul(t).expect("V×K · K×L");
    let gw = grad.t_matmul(w).expect("(V×K)ᵀ · V×L");
    let mut dw = Tensor2::zeros(w.rows(), w.cols());
    for i in 0..w.rows() {
        for l in 0..w.cols() {
            dw.set(i, l, 2.0 * (row_g[i] * w.get(i, l) - gt.get(i, l)));
        }
    }
    let mut dt = Tensor2::zeros(t.rows(), t.cols());
    for j in 0..t.rows() {
        for l in 0..t.cols() {
            dt.set(j, l, 2.0 * (col_g[j] * t.get(j, l) - gw.get(j, l)));
        }
    }
    (dw, dt)
}

/// Two softplus hidden layers followed by mean and log-variance heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub hidden1: DenseLayer,
    pub hidden2: DenseLayer,
    pub mean: DenseLayer,
    pub log_var: DenseLayer,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    input: Tensor2,
    z1: Tensor2,
    a1: Tensor2,
    z2: Tensor2,
    a2: Tensor2,
    pub mu: Tensor2,
    /// Pre-clamp log-variance.
    pub log_var: Tensor2,
}

impl Encoder {
    pub fn init(input: usize, hidden: usize, latent: usize, rng: &mut StageRng) -> Self {
        Self {
            hidden1: DenseLayer::init(input, hidden, rng),
            hidden2: DenseLayer::init(hidden, hidden, rng),
            mean: DenseLayer::init(hidden, latent, rng),
            log_var: DenseLayer::init(hidden, latent, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden1.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.mean.output_dim()
    }

    pub fn forward(&self, input: &Tensor2) -> Result<EncoderCache> {
        let z1 = self.hidden1.forward(input)?;
        let a1 = softplus_forward(&z1);
        let z2 = self.hidden2.forward(&a1)?;
        let a2 = softplus_forward(&z2);
        let mu = self.mean.forward(&a2)?;
        let log_var = self.log_var.forward(&a2)?;
        Ok(EncoderCache {
            input: input.clone(),
            z1,
            a1,
            z2,
            a2,
            mu,
            log_var,
        })
    }

    /// Accumulates parameter gradients given gradients w.r.t. `mu` and the
    /// pre-clamp log-variance.
    pub fn backward(&mut self, cache: &EncoderCache, d_mu: &Tensor2, d_log_var: &Tensor2) -> Result<()> {
        let mut da2 = self.mean.backward(&cache.a2, d_mu)?;
        da2.add_assign(&self.log_var.backward(&cache.a2, d_log_var)?)?;
        let dz2 = softplus_backward(&cache.z2, &da2)?;
        let da1 = self.hidden2.backward(&cache.a1, &dz2)?;
        let dz1 = softplus_backward(&cache.z1, &da1)?;
        self.hidden1.backward_params(&cache.input, &dz1)
    }

    pub fn layers(&self) -> [&DenseLayer; 4] {
        [&self.hidden1, &self.hidden2, &self.mean, &self.log_var]
    }

    pub fn layers_mut(&mut self) -> [&mut DenseLayer; 4] {
        [&mut self.hidden1, &mut self.hidden2, &mut self.mean, &mut self.log_var]
    }

    pub fn zero_grad(&mut self) {
        self.layers_mut().into_iter().for_each(DenseLayer::zero_grad);
    }
}

/// Inference networks: `phi` reads normalized global documents, `gamma`
/// reads normalized local documents.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPair {
    pub phi: Encoder,
    pub gamma: Encoder,
}

/// Divides each row by its sum. Rows summing to zero are rejected.
pub fn normalize_rows(x: &Tensor2) -> Result<Tensor2> {
    let mut out = x.clone();
    let cols = out.cols().max(1);
    for (i, row) in out.data_mut().chunks_mut(cols).enumerate() {
        let s: f64 = row.iter().sum();
        if !(s > 0.0) {
            return Err(Error::ZeroInput { row: i });
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(out)
}

impl EncoderPair {
    /// `(mu, log_var)` of the global latent for normalized global documents.
    pub fn encode_global(&self, x_g_normalized: &Tensor2) -> Result<(Tensor2, Tensor2)> {
        let c = self.phi.forward(x_g_normalized)?;
        Ok((c.mu, c.log_var))
    }

    /// `(mu, log_var)` of the adaptive variable for normalized local documents.
    pub fn encode_local(&self, x_d_normalized: &Tensor2) -> Result<(Tensor2, Tensor2)> {
        let c = self.gamma.forward(x_d_normalized)?;
        Ok((c.mu, c.log_var))
    }
}

/// `softmax(θ^g ⊙ ρ)`.
pub fn combine(theta_g: &[f64], rho: &[f64]) -> Vec<f64> {
    let mut s: Vec<f64> = theta_g.iter().zip(rho).map(|(a, b)| a * b).collect();
    softmax_in_place(&mut s);
    s
}

/// `−x̃ᵀ ln softmax(β θ)`.
pub fn reconstruction_loss(x_aug: &[f64], theta: &[f64], beta: &Tensor2) -> f64 {
    let logits: Vec<f64> = beta
        .rows_iter()
        .map(|r| crate::numerics::tensor::dot(r, theta))
        .collect();
    let lp = log_softmax(&logits);
    -x_aug.iter().zip(&lp).map(|(x, l)| x * l).sum::<f64>()
}

/// Negative ELBO of one document: reconstruction of the augmented target plus
/// its share of the global KL and its local KL.
pub fn elbo_per_doc(x_aug: &[f64], theta_gd: &[f64], beta: &Tensor2, kl_global_share: f64, kl_local: f64) -> f64 {
    reconstruction_loss(x_aug, theta_gd, beta) + kl_global_share + kl_local
}

/// How a cluster's global KL is charged to the documents of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlAttribution {
    /// Once per distinct cluster in the batch, split equally among its documents.
    Divided,
    /// Charged in full to every document.
    PerDocument,
}

/// How local topic proportions are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalMode {
    /// `θ^g_d = softmax(θ^g ⊙ ρ_d)`.
    Adaptive,
    /// `θ^g_d = θ^g` with no adaptive variable (the local document is its own
    /// global context).
    Direct,
}

/// Optional normalization of decoder logits `β θ` before the word softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderNorm {
    /// `softmax(β θ)` as written.
    None,
    /// Each word's logit is standardized across the documents of the batch
    /// (batch normalization without a learned scale or shift).
    Batch,
}

pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Column-wise standardization over rows. Returns the output and the
/// per-column inverse standard deviations.
pub fn batch_norm_forward(x: &Tensor2) -> (Tensor2, Vec<f64>) {
    let (b, v) = x.shape();
    let n = b as f64;
    let mean: Vec<f64> = x.column_sums().iter().map(|s| s / n).collect();
    let mut var = vec![0.0; v];
    for r in x.rows_iter() {
        for j in 0..v {
            var[j] += (r[j] - mean[j]).powi(2) / n;
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + BATCH_NORM_EPS).sqrt()).collect();
    let y = Tensor2::from_fn(b, v, |i, j| (x.get(i, j) - mean[j]) * inv_std[j]);
    (y, inv_std)
}

/// Gradient through [`batch_norm_forward`] given its output `y`.
pub fn batch_norm_backward(y: &Tensor2, inv_std: &[f64], grad: &Tensor2) -> Tensor2 {
    let (b, v) = y.shape();
    let n = b as f64;
    let mut sum_g = vec![0.0; v];
    let mut sum_gy = vec![0.0; v];
    for i in 0..b {
        for j in 0..v {
            sum_g[j] += grad.get(i, j);
            sum_gy[j] += grad.get(i, j) * y.get(i, j);
        }
    }
    Tensor2::from_fn(b, v, |i, j| {
        inv_std[j] / n * (n * grad.get(i, j) - sum_g[j] - y.get(i, j) * sum_gy[j])
    })
}

/// Documents of one minibatch together with the global documents they touch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub docs: Vec<usize>,
    /// Distinct cluster ids, in order of first appearance.
    pub clusters: Vec<usize>,
    /// For each batch document, its position in `clusters`.
    pub slot: Vec<usize>,
    /// `B × V`, rows sum to one.
    pub x_local: Tensor2,
    /// `n_clusters × V`, rows sum to one.
    pub x_global: Tensor2,
    /// `B × V` augmented reconstruction targets.
    pub x_aug: Tensor2,
}

impl Batch {
    pub fn build(
        corpus: &BowCorpus,
        assignment: &ClusterAssignment,
        global: &GlobalCorpus,
        docs: &[usize],
    ) -> Result<Self> {
        let v = corpus.vocab_size();
        let mut clusters = Vec::new();
        let mut slot = Vec::with_capacity(docs.len());
        for &d in docs {
            if d >= corpus.num_docs() || d >= assignment.num_docs() {
                return Err(Error::InvalidArgument(format!(
                    "document {d} has no cluster mapping ({} assigned)",
                    assignment.num_docs()
                )));
            }
            let g = assignment.cluster_of(d);
            if g >= global.num_clusters() {
                return Err(Error::InvalidArgument(format!(
                    "document {d} maps to cluster {g} but only {} global documents exist",
                    global.num_clusters()
                )));
            }
            let pos = match clusters.iter().position(|&c| c == g) {
                Some(p) => p,
                None => {
                    clusters.push(g);
                    clusters.len() - 1
                }
            };
            slot.push(pos);
        }
        let mut x_local = Tensor2::zeros(docs.len(), v);
        let mut x_aug = Tensor2::zeros(docs.len(), v);
        for (b, &d) in docs.iter().enumerate() {
            for &(w, c) in corpus.doc(d) {
                x_local.set(b, w, f64::from(c));
            }
            for (w, c) in global.augmented_doc(corpus, assignment, d) {
                x_aug.set(b, w, c);
            }
        }
        let mut x_global = Tensor2::zeros(clusters.len(), v);
        for (p, &g) in clusters.iter().enumerate() {
            for &(w, c) in &global.global_docs[g] {
                x_global.set(p, w, c as f64);
            }
        }
        Ok(Self {
            docs: docs.to_vec(),
            clusters,
            slot,
            x_local: normalize_rows(&x_local)?,
            x_global: normalize_rows(&x_global)?,
            x_aug,
        })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

/// Standard-normal draws for the reparameterized latents of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    /// One row per distinct cluster in the batch.
    pub global: Tensor2,
    /// One row per batch document.
    pub local: Tensor2,
}

impl Noise {
    pub fn sample(batch: &Batch, k: usize, rng: &mut StageRng) -> Self {
        Self {
            global: Tensor2::from_fn(batch.clusters.len(), k, |_, _| rng.sample(StandardNormal)),
            local: Tensor2::from_fn(batch.len(), k, |_, _| rng.sample(StandardNormal)),
        }
    }

    pub fn zeros(batch: &Batch, k: usize) -> Self {
        Self {
            global: Tensor2::zeros(batch.clusters.len(), k),
            local: Tensor2::zeros(batch.len(), k),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions<'a> {
    pub kl_attribution: KlAttribution,
    pub local_mode: LocalMode,
    pub lambda_ecr: f64,
    pub decoder_norm: DecoderNorm,
    /// Multiplier on both KL terms in `total` (KL warm-up).
    pub kl_scale: f64,
    /// Fixed transport plan for the regularizer; `None` disables it.
    pub plan: Option<&'a TransportPlan>,
}

impl Default for LossOptions<'_> {
    fn default() -> Self {
        Self {
            kl_attribution: KlAttribution::Divided,
            local_mode: LocalMode::Adaptive,
            lambda_ecr: 0.0,
            decoder_norm: DecoderNorm::None,
            kl_scale: 1.0,
            plan: None,
        }
    }
}

/// Batch-mean loss components. `total = recon + s·(kl_global + kl_local) + λ·ecr`
/// where `s` is the KL warm-up scale (normally 1).
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub kl_global: f64,
    pub kl_local: f64,
    pub ecr: f64,
}

impl LossBreakdown {
    pub fn topic_model(&self) -> f64 {
        self.recon + self.kl_global + self.kl_local
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.recon, self.kl_global, self.kl_local, self.ecr]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    global: EncoderCache,
    local: Option<EncoderCache>,
    /// Per-cluster weight on the global KL in the batch loss.
    kl_weights: Vec<f64>,
    theta_g: Tensor2,
    rho: Option<Tensor2>,
    pub theta_gd: Tensor2,
    beta: Tensor2,
    /// Word probabilities per document, `B × V`.
    probs: Tensor2,
    /// Normalized logits and inverse deviations under [`DecoderNorm::Batch`].
    normalized: Option<(Tensor2, Vec<f64>)>,
}

/// Model parameters with gradient accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct GloCom {
    pub space: TopicSpace,
    pub encoders: EncoderPair,
    /// Prior variance of the adaptive variable, `ρ_d ∼ N(1, εI)`.
    pub epsilon: f64,
    pub grad_word_embeddings: Tensor2,
    pub grad_topic_embeddings: Tensor2,
}

/// Architecture sizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub num_topics: usize,
    pub embed_dim: usize,
    pub hidden: usize,
}

impl GloCom {
    /// Random initialization. Topic embeddings use the same uniform scale as
    /// uncovered word embeddings; the adaptive-variable heads start at the
    /// prior (mean 1, variance ε).
    pub fn init(dims: ModelDims, word_embeddings: Tensor2, tau: f64, epsilon: f64, rng: &mut StageRng) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        if word_embeddings.shape() != (dims.vocab_size, dims.embed_dim) {
            return Err(Error::shape(
                "GloCom::init",
                format!(
                    "word embeddings {:?}, expected {}x{}",
                    word_embeddings.shape(),
                    dims.vocab_size,
                    dims.embed_dim
                ),
            ));
        }
        let r = corpus::OOV_INIT_RANGE;
        let topics = Tensor2::from_fn(dims.num_topics, dims.embed_dim, |_, _| rng.random_range(-r..=r));
        let space = TopicSpace::new(word_embeddings, topics, tau)?;
        let phi = Encoder::init(dims.vocab_size, dims.hidden, dims.num_topics, rng);
        let mut gamma = Encoder::init(dims.vocab_size, dims.hidden, dims.num_topics, rng);
        gamma.mean.weight.fill(0.0);
        gamma.mean.bias.iter_mut().for_each(|b| *b = 1.0);
        gamma.log_var.weight.fill(0.0);
        gamma.log_var.bias.iter_mut().for_each(|b| *b = epsilon.ln());
        Self::from_parts(space, EncoderPair { phi, gamma }, epsilon)
    }

    pub fn from_parts(space: TopicSpace, encoders: EncoderPair, epsilon: f64) -> Result<Self> {
        let (v, k) = (space.vocab_size(), space.num_topics());
        for (name, e) in [("phi", &encoders.phi), ("gamma", &encoders.gamma)] {
            if e.input_dim() != v || e.latent_dim() != k || e.log_var.output_dim() != k {
                return Err(Error::shape(
                    "GloCom::from_parts",
                    format!(
                        "encoder {name} maps {}→{}, expected {v}→{k}",
                        e.input_dim(),
                        e.latent_dim()
                    ),
                ));
            }
        }
        Ok(Self {
            grad_word_embeddings: Tensor2::zeros(v, space.word_embeddings.cols()),
            grad_topic_embeddings: Tensor2::zeros(k, space.topic_embeddings.cols()),
            space,
            encoders,
            epsilon,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.space.vocab_size()
    }

    pub fn num_topics(&self) -> usize {
        self.space.num_topics()
    }

    pub fn beta(&self) -> Tensor2 {
        compute_beta(&self.space)
    }

    pub fn zero_grad(&mut self) {
        self.grad_word_embeddings.fill(0.0);
        self.grad_topic_embeddings.fill(0.0);
        self.encoders.phi.zero_grad();
        self.encoders.gamma.zero_grad();
    }

    /// Forward pass over a batch with fixed noise.
    pub fn forward(
        &self,
        batch: &Batch,
        noise: &Noise,
        opts: &LossOptions<'_>,
    ) -> Result<(LossBreakdown, ForwardCache)> {
        let k = self.num_topics();
        let b = batch.len();
        if b == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if noise.global.shape() != (batch.clusters.len(), k) || noise.local.shape() != (b, k) {
            return Err(Error::shape(
                "GloCom::forward",
                format!(
                    "noise {:?}/{:?} for batch {b} with {} clusters",
                    noise.global.shape(),
                    noise.local.shape(),
                    batch.clusters.len()
                ),
            ));
        }
        let inv_b = 1.0 / b as f64;

        // Global latent: α = μ_φ + σ_φ ⊙ e, θ^g = softmax(α).
        let global = self.encoders.phi.forward(&batch.x_global)?;
        let mut alpha = Tensor2::zeros(batch.clusters.len(), k);
        let mut kl_global = 0.0;
        let mut members = vec![0usize; batch.clusters.len()];
        for &s in &batch.slot {
            members[s] += 1;
        }
        let kl_weights: Vec<f64> = members
            .iter()
            .map(|&m| match opts.kl_attribution {
                KlAttribution::Divided => inv_b,
                KlAttribution::PerDocument => m as f64 * inv_b,
            })
            .collect();
        let zeros = vec![0.0; k];
        for c in 0..batch.clusters.len() {
            let (mu, lv) = (global.mu.row(c), global.log_var.row(c));
            for j in 0..k {
                alpha.set(
                    c,
                    j,
                    mu[j] + (0.5 * clamp_log_var(lv[j])).exp() * noise.global.get(c, j),
                );
            }
            kl_global += kl_weights[c] * kl_diag_gaussian(mu, lv, &zeros, 1.0)?;
        }
        let theta_g = softmax_forward(&alpha);

        // Local proportions.
        let (local, rho, theta_gd, kl_local) = match opts.local_mode {
            LocalMode::Adaptive => {
                let local = self.encoders.gamma.forward(&batch.x_local)?;
                let ones = vec![1.0; k];
                let mut rho = Tensor2::zeros(b, k);
                let mut theta_gd = Tensor2::zeros(b, k);
                let mut kl_local = 0.0;
                for d in 0..b {
                    let (mu, lv) = (local.mu.row(d), local.log_var.row(d));
                    for j in 0..k {
                        rho.set(d, j, mu[j] + (0.5 * clamp_log_var(lv[j])).exp() * noise.local.get(d, j));
                    }
                    theta_gd
                        .row_mut(d)
                        .copy_from_slice(&combine(theta_g.row(batch.slot[d]), rho.row(d)));
                    kl_local += inv_b * kl_diag_gaussian(mu, lv, &ones, self.epsilon)?;
                }
                (Some(local), Some(rho), theta_gd, kl_local)
            }
            LocalMode::Direct => (None, None, theta_g.select_rows(&batch.slot), 0.0),
        };

        // Reconstruction of the augmented targets.
        let dist = self.space.squared_distances();
        let beta = beta_from_distances(&dist, self.space.tau);
        let raw_logits = theta_gd.matmul_t(&beta)?;
        let (logits, normalized) = match opts.decoder_norm {
            DecoderNorm::None => (raw_logits, None),
            DecoderNorm::Batch => {
                let (y, inv_std) = batch_norm_forward(&raw_logits);
                (y.clone(), Some((y, inv_std)))
            }
        };
        let mut probs = logits.clone();
        let mut recon = 0.0;
        for d in 0..b {
            let lp = log_softmax(logits.row(d));
            recon -= inv_b * batch.x_aug.row(d).iter().zip(&lp).map(|(x, l)| x * l).sum::<f64>();
            probs.row_mut(d).iter_mut().zip(&lp).for_each(|(p, l)| *p = l.exp());
        }

        let ecr = match opts.plan {
            Some(plan) => {
                if plan.psi.shape() != dist.shape() {
                    return Err(Error::shape(
                        "ecr",
                        format!("plan {:?} vs {:?}", plan.psi.shape(), dist.shape()),
                    ));
                }
                dist.data().iter().zip(plan.psi.data()).map(|(c, p)| c * p).sum()
            }
            None => 0.0,
        };
        let total = recon + opts.kl_scale * (kl_global + kl_local) + opts.lambda_ecr * ecr;
        let losses = LossBreakdown {
            total,
            recon,
            kl_global,
            kl_local,
            ecr,
        };
        Ok((
            losses,
            ForwardCache {
                global,
                local,
                kl_weights,
                theta_g,
                rho,
                theta_gd,
                beta,
                probs,
                normalized,
            },
        ))
    }

    /// Accumulates gradients of `total` into the model's gradient buffers.
    pub fn backward(
        &mut self,
        batch: &Batch,
        noise: &Noise,
        opts: &LossOptions<'_>,
        cache: &ForwardCache,
    ) -> Result<()> {
        let k = self.num_topics();
        let b = batch.len();
        let inv_b = 1.0 / b as f64;

        // d recon / d logits = (|x̃| p − x̃) / B
        let mut d_logits = cache.probs.clone();
        for d in 0..b {
            let mass: f64 = batch.x_aug.row(d).iter().sum();
            for (g, x) in d_logits.row_mut(d).iter_mut().zip(batch.x_aug.row(d)) {
                *g = inv_b * (mass * *g - x);
            }
        }
        if let Some((y, inv_std)) = &cache.normalized {
            d_logits = batch_norm_backward(y, inv_std, &d_logits);
        }
        let d_beta = d_logits.t_matmul(&cache.theta_gd)?;
        let d_theta_gd = d_logits.matmul(&cache.beta)?;

        let mut d_theta_g = Tensor2::zeros(batch.clusters.len(), k);
        match (opts.local_mode, &cache.local, &cache.rho) {
            (LocalMode::Adaptive, Some(local), Some(rho)) => {
                let d_s = softmax_backward(&cache.theta_gd, &d_theta_gd)?;
                let mut d_mu = Tensor2::zeros(b, k);
                let mut d_lv = Tensor2::zeros(b, k);
                let ones = vec![1.0; k];
                for d in 0..b {
                    let c = batch.slot[d];
                    let d_rho: Vec<f64> = (0..k).map(|j| d_s.get(d, j) * cache.theta_g.get(c, j)).collect();
                    for j in 0..k {
                        let v = d_theta_g.get(c, j) + d_s.get(d, j) * rho.get(d, j);
                        d_theta_g.set(c, j, v);
                    }
                    let (rm, rl) = gaussian_reparameterize_backward(local.log_var.row(d), noise.local.row(d), &d_rho);
                    let (km, kl) = kl_diag_gaussian_backward(
                        local.mu.row(d),
                        local.log_var.row(d),
                        &ones,
                        self.epsilon,
                        opts.kl_scale * inv_b,
                    );
                    for j in 0..k {
                        d_mu.set(d, j, rm[j] + km[j]);
                        d_lv.set(d, j, rl[j] + kl[j]);
                    }
                }
                self.encoders.gamma.backward(local, &d_mu, &d_lv)?;
            }
            (LocalMode::Direct, _, _) => {
                for d in 0..b {
                    let c = batch.slot[d];
                    for j in 0..k {
                        let v = d_theta_g.get(c, j) + d_theta_gd.get(d, j);
                        d_theta_g.set(c, j, v);
                    }
                }
            }
            _ => return Err(Error::InvalidArgument("forward cache does not match local mode".into())),
        }

        let d_alpha = softmax_backward(&cache.theta_g, &d_theta_g)?;
        let mut d_mu = Tensor2::zeros(batch.clusters.len(), k);
        let mut d_lv = Tensor2::zeros(batch.clusters.len(), k);
        let zeros = vec![0.0; k];
        for c in 0..batch.clusters.len() {
            let g = &cache.global;
            let (rm, rl) = gaussian_reparameterize_backward(g.log_var.row(c), noise.global.row(c), d_alpha.row(c));
            let (km, kl) = kl_diag_gaussian_backward(
                g.mu.row(c),
                g.log_var.row(c),
                &zeros,
                1.0,
                opts.kl_scale * cache.kl_weights[c],
            );
            for j in 0..k {
                d_mu.set(c, j, rm[j] + km[j]);
                d_lv.set(c, j, rl[j] + kl[j]);
            }
        }
        self.encoders.phi.backward(&cache.global, &d_mu, &d_lv)?;

        // β = softmax(−dist/τ) row-wise.
        let mut d_dist = softmax_backward(&cache.beta, &d_beta)?;
        d_dist.scale(-1.0 / self.space.tau);
        let (mut dw, mut dt) =
            squared_distance_backward(&self.space.word_embeddings, &self.space.topic_embeddings, &d_dist);
        if let Some(plan) = opts.plan {
            if opts.lambda_ecr != 0.0 {
                let (ew, et) = ecr_loss_backward(&self.space, plan)?;
                for (a, e) in dw.data_mut().iter_mut().zip(ew.data()) {
                    *a += opts.lambda_ecr * e;
                }
                for (a, e) in dt.data_mut().iter_mut().zip(et.data()) {
                    *a += opts.lambda_ecr * e;
                }
            }
        }
        self.grad_word_embeddings.add_assign(&dw)?;
        self.grad_topic_embeddings.add_assign(&dt)?;
        Ok(())
    }

    /// Named views of every parameter tensor, in a fixed order.
    pub fn parameters(&self) -> Vec<(String, &Tensor2)> {
        let mut out = vec![
            ("word_embeddings".to_string(), &self.space.word_embeddings),
            ("topic_embeddings".to_string(), &self.space.topic_embeddings),
        ];
        for (enc_name, enc) in [("phi", &self.encoders.phi), ("gamma", &self.encoders.gamma)] {
            for (layer_name, layer) in LAYER_NAMES.iter().zip(enc.layers()) {
                out.push((format!("{enc_name}.{layer_name}.weight"), &layer.weight));
            }
        }
        out
    }

    /// Flat `(parameter, gradient)` slices in the order used by the optimizer.
    pub fn param_groups_mut(&mut self) -> Vec<(&mut [f64], &[f64])> {
        let mut out: Vec<(&mut [f64], &[f64])> = vec![
            (self.space.word_embeddings.data_mut(), self.grad_word_embeddings.data()),
            (
                self.space.topic_embeddings.data_mut(),
                self.grad_topic_embeddings.data(),
            ),
        ];
        for enc in [&mut self.encoders.phi, &mut self.encoders.gamma] {
            for layer in enc.layers_mut() {
                out.push((layer.weight.data_mut(), layer.grad_weight.data()));
                out.push((&mut layer.bias[..], &layer.grad_bias[..]));
            }
        }
        out
    }

    pub fn param_group_sizes(&self) -> Vec<usize> {
        let mut out = vec![
            self.space.word_embeddings.data().len(),
            self.space.topic_embeddings.data().len(),
        ];
        for enc in [&self.encoders.phi, &self.encoders.gamma] {
            for layer in enc.layers() {
                out.push(layer.weight.data().len());
                out.push(layer.bias.len());
            }
        }
        out
    }

    /// Deterministic inference from posterior means.
    pub fn infer(
        &self,
        corpus: &BowCorpus,
        assignment: &ClusterAssignment,
        global: &GlobalCorpus,
        local_mode: LocalMode,
        top_n: usize,
    ) -> Result<TopicModelOutput> {
        if corpus.vocab_size() != self.vocab_size() {
            return Err(Error::shape(
                "infer",
                format!(
                    "corpus vocabulary {} vs model {}",
                    corpus.vocab_size(),
                    self.vocab_size()
                ),
            ));
        }
        global.check_consistent(corpus, assignment)?;
        let k = self.num_topics();
        let v = self.vocab_size();
        let n_clusters = global.num_clusters();

        let mut theta_global = Tensor2::filled(n_clusters, k, 1.0 / k as f64);
        let non_empty: Vec<usize> = (0..n_clusters).filter(|&g| !global.global_docs[g].is_empty()).collect();
        for chunk in non_empty.chunks(INFER_CHUNK) {
            let mut x = Tensor2::zeros(chunk.len(), v);
            for (r, &g) in chunk.iter().enumerate() {
                x.row_mut(r).copy_from_slice(&global.dense_global(g, v));
            }
            let (mu, _) = self.encoders.encode_global(&normalize_rows(&x)?)?;
            for (r, &g) in chunk.iter().enumerate() {
                theta_global.row_mut(g).copy_from_slice(&softmax(mu.row(r)));
            }
        }

        let d_total = corpus.num_docs();
        let mut theta_local = Tensor2::zeros(d_total, k);
        let ids: Vec<usize> = (0..d_total).collect();
        for chunk in ids.chunks(INFER_CHUNK) {
            match local_mode {
                LocalMode::Adaptive => {
                    let mut x = Tensor2::zeros(chunk.len(), v);
                    for (r, &d) in chunk.iter().enumerate() {
                        x.row_mut(r).copy_from_slice(&corpus.dense_doc(d));
                    }
                    let (rho, _) = self.encoders.encode_local(&normalize_rows(&x)?)?;
                    for (r, &d) in chunk.iter().enumerate() {
                        let tg = theta_global.row(assignment.cluster_of(d));
                        theta_local.row_mut(d).copy_from_slice(&combine(tg, rho.row(r)));
                    }
                }
                LocalMode::Direct => {
                    for &d in chunk {
                        let tg = theta_global.row(assignment.cluster_of(d)).to_vec();
                        theta_local.row_mut(d).copy_from_slice(&tg);
                    }
                }
            }
        }

        let beta = self.beta();
        let top_words = top_words(&beta, top_n);
        Ok(TopicModelOutput {
            beta,
            theta_global,
            theta_local,
            top_words,
        })
    }

    /// Writes a manifest (`name rows cols` per line) and one `GEMD` file per tensor.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tensors = self.checkpoint_tensors();
        let mut manifest = String::new();
        for (name, t) in &tensors {
            manifest.push_str(&format!("{name} {} {}\n", t.rows(), t.cols()));
            corpus::save_matrix(&dir.join(format!("{name}.bin")), t, Precision::F64)?;
        }
        let path = dir.join(MANIFEST);
        std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut tensors = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            let [name, rows, cols] = f[..] else {
                return Err(Error::Checkpoint(format!("bad manifest line {line:?}")));
            };
            let shape = (
                rows.parse::<usize>()
                    .map_err(|_| Error::Checkpoint(format!("bad rows in {line:?}")))?,
                cols.parse::<usize>()
                    .map_err(|_| Error::Checkpoint(format!("bad cols in {line:?}")))?,
            );
            let t = corpus::load_matrix(&dir.join(format!("{name}.bin")))?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "{name}: manifest says {shape:?}, file has {:?}",
                    t.shape()
                )));
            }
            tensors.insert(name.to_string(), t);
        }
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let scalar = |t: Tensor2, name: &str| -> Result<f64> {
            if t.shape() != (1, 1) {
                return Err(Error::Checkpoint(format!("{name} must be 1x1")));
            }
            Ok(t.get(0, 0))
        };
        let tau = scalar(take("tau")?, "tau")?;
        let epsilon = scalar(take("epsilon")?, "epsilon")?;
        let space = TopicSpace::new(take("word_embeddings")?, take("topic_embeddings")?, tau)?;
        let mut encoder = |prefix: &str| -> Result<Encoder> {
            let mut layers = Vec::with_capacity(4);
            for ln in LAYER_NAMES {
                let w = take(&format!("{prefix}.{ln}.weight"))?;
                let b = take(&format!("{prefix}.{ln}.bias"))?;
                if b.rows() != 1 {
                    return Err(Error::Checkpoint(format!("{prefix}.{ln}.bias must be a row vector")));
                }
                layers.push(DenseLayer::new(w, b.into_vec())?);
            }
            let mut it = layers.into_iter();
            let mut next = || it.next().expect("four layers");
            Ok(Encoder {
                hidden1: next(),
                hidden2: next(),
                mean: next(),
                log_var: next(),
            })
        };
        let phi = encoder("phi")?;
        let gamma = encoder("gamma")?;
        Self::from_parts(space, EncoderPair { phi, gamma }, epsilon)
    }

    fn checkpoint_tensors(&self) -> Vec<(String, Tensor2)> {
        let mut out = vec![
            ("tau".to_string(), Tensor2::filled(1, 1, self.space.tau)),
            ("epsilon".to_string(), Tensor2::filled(1, 1, self.epsilon)),
            ("word_embeddings".to_string(), self.space.word_embeddings.clone()),
            ("topic_embeddings".to_string(), self.space.topic_embeddings.clone()),
        ];
        for (enc_name, enc) in [("phi", &self.encoders.phi), ("gamma", &self.encoders.gamma)] {
            for (ln, layer) in LAYER_NAMES.iter().zip(enc.layers()) {
                out.push((format!("{enc_name}.{ln}.weight"), layer.weight.clone()));
                out.push((
                    format!("{enc_name}.{ln}.bias"),
                    Tensor2::from_vec(1, layer.bias.len(), layer.bias.clone()).expect("row vector"),
                ));
            }
        }
        out
    }
}

const LAYER_NAMES: [&str; 4] = ["hidden1", "hidden2", "mean", "log_var"];
pub const MANIFEST: &str = "manifest.txt";
const INFER_CHUNK: usize = 512;

/// Indices of the `n` largest entries of each β column, by descending weight
/// (ties to the lower word id).
pub fn top_words(beta: &Tensor2, n: usize) -> Vec<Vec<usize>> {
    (0..beta.cols())
        .map(|k| {
            let mut ids: Vec<usize> = (0..beta.rows()).collect();
            ids.sort_by(|&a, &b| beta.get(b, k).total_cmp(&beta.get(a, k)).then(a.cmp(&b)));
            ids.truncate(n);
            ids
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopicModelOutput {
    /// `V × K`
    pub beta: Tensor2,
    /// `G × K`
    pub theta_global: Tensor2,
    /// `D × K`
    pub theta_local: Tensor2,
    /// Top word ids per topic.
    pub top_words: Vec<Vec<usize>>,
}

impl TopicModelOutput {
    /// Argmax topic per document, ties to the lowest topic index.
    pub fn document_topics(&self) -> Vec<usize> {
        argmax_rows(&self.theta_local)
    }
}

pub fn argmax_rows(m: &Tensor2) -> Vec<usize> {
    m.rows_iter()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
