//! Synthetic corpora drawn from the model's generative process, with the
//! planted parameters kept for recovery checks.

use std::path::Path;

use log::warn;
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::corpus::{self, BowCorpus, EmbeddingMatrix, EmbeddingSource, Precision, Vocabulary};
use crate::error::{Error, Result};
use crate::model::combine;
use crate::numerics::layers::softmax;
use crate::numerics::Tensor2;
use crate::rng::{self, substream, StageRng};

const MAX_RETRIES: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub num_topics: usize,
    pub num_clusters: usize,
    pub num_docs: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Variance of the adaptive variable around 1.
    pub epsilon_true: f64,
    /// Mass each topic puts on its own word block.
    pub block_mass: f64,
    /// Resample cluster proportions until clusters have pairwise distinct
    /// dominant topics (only possible when `num_clusters <= num_topics`).
    pub distinct_dominant: bool,
    /// Width of the emitted document embeddings.
    pub embedding_dim: usize,
    /// Standard deviation of per-document noise around the cluster centroid.
    pub embedding_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            vocab_size: 100,
            num_topics: 5,
            num_clusters: 5,
            num_docs: 1000,
            min_len: 4,
            max_len: 12,
            epsilon_true: 0.01,
            block_mass: 0.9,
            distinct_dominant: true,
            embedding_dim: 32,
            embedding_noise: 0.5,
            seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl SyntheticSpec {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key.trim() {
            "vocab_size" | "V" => self.vocab_size = parse(key, value)?,
            "num_topics" | "K" => self.num_topics = parse(key, value)?,
            "num_clusters" | "G" => self.num_clusters = parse(key, value)?,
            "num_docs" | "D" => self.num_docs = parse(key, value)?,
            "min_len" => self.min_len = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "epsilon_true" => self.epsilon_true = parse(key, value)?,
            "block_mass" => self.block_mass = parse(key, value)?,
            "distinct_dominant" => self.distinct_dominant = parse(key, value)?,
            "embedding_dim" => self.embedding_dim = parse(key, value)?,
            "embedding_noise" => self.embedding_noise = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown synthetic spec key {other:?}"))),
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            spec.set(k, v)?;
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("num_topics", self.num_topics),
            ("num_clusters", self.num_clusters),
            ("num_docs", self.num_docs),
            ("embedding_dim", self.embedding_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.min_len < 2 || self.max_len < self.min_len {
            return Err(Error::Config(format!(
                "document lengths need 2 <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        if self.num_docs < self.num_clusters {
            return Err(Error::Config("fewer documents than clusters".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if !(self.epsilon_true >= 0.0 && self.epsilon_true.is_finite()) {
            return Err(Error::Config("epsilon_true must be non-negative".into()));
        }
        if !(self.block_mass > 0.0 && self.block_mass <= 1.0) {
            return Err(Error::Config("block_mass must be in (0, 1]".into()));
        }
        if !(self.embedding_noise >= 0.0 && self.embedding_noise.is_finite()) {
            return Err(Error::Config("embedding_noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Planted parameters behind a synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTruth {
    /// `V × K`; each column is a distribution over words.
    pub beta: Tensor2,
    /// `G × K`
    pub theta_global: Tensor2,
    /// `D × K`
    pub theta_local: Tensor2,
    pub labels: Vec<usize>,
    /// Word ids owned by each topic.
    pub blocks: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: BowCorpus,
    pub vocab: Vocabulary,
    pub truth: SyntheticTruth,
    /// Stand-in for pre-computed document embeddings: cluster centroid plus
    /// isotropic noise.
    pub doc_embeddings: EmbeddingMatrix,
}

/// Word blocks: topic `k` owns `⌈V/K⌉` consecutive ids (the last block may be
/// shorter or empty when `V` is not a multiple).
pub fn word_blocks(v: usize, k: usize) -> Vec<Vec<usize>> {
    let size = v.div_ceil(k);
    (0..k)
        .map(|t| (t * size).min(v)..((t + 1) * size).min(v))
        .map(|r| r.collect())
        .collect()
}

/// Column-stochastic planted topic-word matrix.
pub fn planted_beta(v: usize, k: usize, block_mass: f64) -> Tensor2 {
    let blocks = word_blocks(v, k);
    let mut beta = Tensor2::zeros(v, k);
    for (t, block) in blocks.iter().enumerate() {
        let rest = v - block.len();
        let (inside, outside) = match (block.len(), rest) {
            (0, _) => (0.0, 1.0 / v as f64),
            (b, 0) => (1.0 / b as f64, 0.0),
            (b, r) => (block_mass / b as f64, (1.0 - block_mass) / r as f64),
        };
        for w in 0..v {
            beta.set(w, t, if block.contains(&w) { inside } else { outside });
        }
    }
    beta
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

fn sample_labels(spec: &SyntheticSpec, rng: &mut StageRng) -> Result<Vec<usize>> {
    for _ in 0..MAX_RETRIES {
        let labels: Vec<usize> = (0..spec.num_docs)
            .map(|_| rng.random_range(0..spec.num_clusters))
            .collect();
        let mut seen = vec![false; spec.num_clusters];
        labels.iter().for_each(|&l| seen[l] = true);
        if seen.iter().all(|&s| s) {
            return Ok(labels);
        }
    }
    Err(Error::Config("could not draw labels covering every cluster".into()))
}

fn sample_theta_global(spec: &SyntheticSpec, rng: &mut StageRng) -> Result<Tensor2> {
    let (g, k) = (spec.num_clusters, spec.num_topics);
    let enforce = spec.distinct_dominant && g <= k && k > 1;
    if spec.distinct_dominant && g > k {
        warn!("distinct_dominant needs num_clusters <= num_topics; drawing unconstrained proportions");
    }
    for _ in 0..MAX_RETRIES {
        let rows: Vec<Vec<f64>> = (0..g)
            .map(|_| softmax(&(0..k).map(|_| rng.sample(StandardNormal)).collect::<Vec<f64>>()))
            .collect();
        let theta = Tensor2::from_rows(&rows)?;
        if !enforce {
            return Ok(theta);
        }
        let mut dominant: Vec<usize> = rows.iter().map(|r| argmax(r)).collect();
        dominant.sort_unstable();
        dominant.dedup();
        if dominant.len() == g {
            return Ok(theta);
        }
    }
    Err(Error::Config(
        "could not draw clusters with distinct dominant topics".into(),
    ))
}

/// Samples a corpus from the generative process.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = substream(spec.seed, rng::SYNTHESIS);
    let (v, k) = (spec.vocab_size, spec.num_topics);
    let beta = planted_beta(v, k, spec.block_mass);
    let word_dists: Vec<WeightedIndex<f64>> = (0..k)
        .map(|t| WeightedIndex::new((0..v).map(|w| beta.get(w, t))).expect("columns are distributions"))
        .collect();

    let labels = sample_labels(spec, &mut rng)?;
    let theta_global = sample_theta_global(spec, &mut rng)?;
    let rho_dist = Normal::new(1.0, spec.epsilon_true.sqrt()).expect("finite std");

    let mut theta_local = Tensor2::zeros(spec.num_docs, k);
    let mut docs = Vec::with_capacity(spec.num_docs);
    for d in 0..spec.num_docs {
        let rho: Vec<f64> = (0..k).map(|_| rho_dist.sample(&mut rng)).collect();
        let theta = combine(theta_global.row(labels[d]), &rho);
        let topic_dist = WeightedIndex::new(&theta).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut doc = None;
        for _ in 0..MAX_RETRIES {
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let mut counts = vec![0u32; v];
            for _ in 0..len {
                let z = topic_dist.sample(&mut rng);
                counts[word_dists[z].sample(&mut rng)] += 1;
            }
            let sparse: Vec<(usize, u32)> = counts
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0)
                .map(|(w, &c)| (w, c))
                .collect();
            if sparse.len() >= 2 {
                doc = Some(sparse);
                break;
            }
        }
        docs.push(doc.ok_or_else(|| Error::Config(format!("document {d} never reached 2 distinct words")))?);
        theta_local.row_mut(d).copy_from_slice(&theta);
    }
    let corpus = BowCorpus::new(v, docs)?.with_labels(labels.iter().map(|&l| l as i64).collect())?;
    let vocab = Vocabulary::from_words((0..v).map(|w| format!("w{w}")).collect())?;

    let centroids = Tensor2::from_fn(spec.num_clusters, spec.embedding_dim, |_, _| rng.sample(StandardNormal));
    let noise = Normal::new(0.0, spec.embedding_noise).expect("finite std");
    let emb = Tensor2::from_fn(spec.num_docs, spec.embedding_dim, |d, j| {
        centroids.get(labels[d], j) + noise.sample(&mut rng)
    });
    let doc_embeddings = EmbeddingMatrix::new(emb, EmbeddingSource::Precomputed)?;

    Ok(SyntheticCorpus {
        corpus,
        vocab,
        truth: SyntheticTruth {
            beta,
            theta_global,
            theta_local,
            labels,
            blocks: word_blocks(v, k),
        },
        doc_embeddings,
    })
}

impl SyntheticCorpus {
    /// Writes `corpus.bow`, `vocab.txt`, `labels.txt`, `doc_embeddings.bin`
    /// and the planted `truth_*.csv` matrices.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.corpus.save(&dir.join("corpus.bow"))?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        corpus::write_int_lines(&dir.join("labels.txt"), &self.truth.labels)?;
        corpus::save_matrix(
            &dir.join("doc_embeddings.bin"),
            &self.doc_embeddings.rows,
            Precision::F32,
        )?;
        corpus::save_matrix_csv(&dir.join("truth_beta.csv"), &self.truth.beta)?;
        corpus::save_matrix_csv(&dir.join("truth_theta_global.csv"), &self.truth.theta_global)?;
        corpus::save_matrix_csv(&dir.join("truth_theta_local.csv"), &self.truth.theta_local)?;
        Ok(())
    }
}

/// Result of aligning learned topics with planted ones.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicMatch {
    /// `permutation[planted] = learned` column index.
    pub permutation: Vec<usize>,
    /// Cosine similarity of each planted column with its matched column.
    pub cosines: Vec<f64>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// `sim[p][l]` = cosine between planted column `p` and learned column `l`.
pub fn column_cosines(learned: &Tensor2, planted: &Tensor2) -> Result<Vec<Vec<f64>>> {
    if learned.shape() != planted.shape() {
        return Err(Error::shape(
            "match_topics",
            format!("learned {:?} vs planted {:?}", learned.shape(), planted.shape()),
        ));
    }
    let lt = learned.transpose();
    let pt = planted.transpose();
    Ok(pt
        .rows_iter()
        .map(|p| lt.rows_iter().map(|l| cosine(p, l)).collect())
        .collect())
}

/// One-to-one matching maximizing summed column cosine similarity.
pub fn match_topics(learned: &Tensor2, planted: &Tensor2) -> Result<TopicMatch> {
    let sim = column_cosines(learned, planted)?;
    let permutation = if sim.len() <= 8 {
        best_permutation_exhaustive(&sim)
    } else {
        hungarian_max(&sim)
    };
    let cosines = permutation.iter().enumerate().map(|(p, &l)| sim[p][l]).collect();
    Ok(TopicMatch { permutation, cosines })
}

/// Tries every permutation; ties keep the lexicographically first one.
pub fn best_permutation_exhaustive(sim: &[Vec<f64>]) -> Vec<usize> {
    let n = sim.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_score = f64::NEG_INFINITY;
    loop {
        let score: f64 = perm.iter().enumerate().map(|(i, &j)| sim[i][j]).sum();
        if score > best_score {
            best_score = score;
            best.clone_from(&perm);
        }
        if !next_permutation(&mut perm) {
            return best;
        }
    }
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Maximum-weight perfect matching on a square matrix (Kuhn–Munkres with
/// potentials, O(n³)). Returns `assignment[row] = column`.
pub fn hungarian_max(sim: &[Vec<f64>]) -> Vec<usize> {
    let n = sim.len();
    // minimize negated similarity; 1-based arrays with a virtual column 0
    let cost = |i: usize, j: usize| -sim[i - 1][j - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            vocab_size: 20,
            num_topics: 3,
            num_clusters: 3,
            num_docs: 60,
            seed,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn planted_beta_columns_are_distributions() {
        let beta = planted_beta(100, 5, 0.9);
        for k in 0..5 {
            let col: f64 = (0..100).map(|w| beta.get(w, k)).sum();
            assert!((col - 1.0).abs() < 1e-12);
            assert!((beta.get(k * 20, k) - 0.045).abs() < 1e-15);
        }
        // V not a multiple of K: blocks of ⌈7/3⌉ = 3, last one has 1 word
        assert_eq!(word_blocks(7, 3), vec![vec![0, 1, 2], vec![3, 4, 5], vec![6]]);
    }

    #[test]
    fn zero_epsilon_shares_cluster_proportions() {
        let s = generate(&SyntheticSpec {
            epsilon_true: 0.0,
            ..small(1)
        })
        .unwrap();
        for d in 0..60 {
            let want = softmax(s.truth.theta_global.row(s.truth.labels[d]));
            assert_eq!(s.truth.theta_local.row(d), &want[..]);
        }
    }

    #[test]
    fn single_topic_uses_its_column() {
        let s = generate(&SyntheticSpec {
            num_topics: 1,
            num_clusters: 1,
            ..small(2)
        })
        .unwrap();
        assert!(s.truth.theta_local.data().iter().all(|&t| t == 1.0));
        assert!((s.truth.beta.column_sums()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn word_frequencies_match_mixture() {
        // one cluster, one long document
        let spec = SyntheticSpec {
            vocab_size: 12,
            num_topics: 3,
            num_clusters: 1,
            num_docs: 1,
            min_len: 100_000,
            max_len: 100_000,
            epsilon_true: 0.0,
            seed: 3,
            ..SyntheticSpec::default()
        };
        let s = generate(&spec).unwrap();
        let theta = s.truth.theta_local.row(0);
        let n = 100_000.0;
        let counts = s.corpus.dense_doc(0);
        for w in 0..12 {
            let p: f64 = (0..3).map(|k| s.truth.beta.get(w, k) * theta[k]).sum();
            let sd = (n * p * (1.0 - p)).sqrt();
            assert!(
                (counts[w] - n * p).abs() <= 3.0 * sd,
                "word {w}: {} vs {}",
                counts[w],
                n * p
            );
        }
    }

    #[test]
    fn every_cluster_non_empty_and_dominants_distinct() {
        for seed in 0..5 {
            let s = generate(&small(seed)).unwrap();
            let mut seen = [false; 3];
            s.truth.labels.iter().for_each(|&l| seen[l] = true);
            assert!(seen.iter().all(|&x| x));
            let mut dom: Vec<usize> = s.truth.theta_global.rows_iter().map(argmax).collect();
            dom.sort_unstable();
            dom.dedup();
            assert_eq!(dom.len(), 3);
            assert!(s.corpus.docs().iter().all(|d| d.len() >= 2));
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate(&small(9)).unwrap();
        let b = generate(&small(9)).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.doc_embeddings, b.doc_embeddings);
    }

    #[test]
    fn spec_validation() {
        assert!(generate(&SyntheticSpec { min_len: 1, ..small(0) }).is_err());
        assert!(generate(&SyntheticSpec {
            num_docs: 2,
            ..small(0)
        })
        .is_err());
    }

    #[test]
    fn matching_identity_and_swap() {
        let beta = planted_beta(12, 3, 0.9);
        let m = match_topics(&beta, &beta).unwrap();
        assert_eq!(m.permutation, vec![0, 1, 2]);
        assert!(m.cosines.iter().all(|c| (c - 1.0).abs() < 1e-12));
        let swapped = Tensor2::from_fn(12, 3, |w, k| beta.get(w, [1, 0, 2][k]));
        assert_eq!(match_topics(&swapped, &beta).unwrap().permutation, vec![1, 0, 2]);
        assert!(match_topics(&Tensor2::zeros(12, 2), &beta).is_err());
    }

    #[test]
    fn hungarian_handles_larger_square() {
        // 10×10 identity-like similarity with the diagonal shifted by 3
        let sim: Vec<Vec<f64>> = (0..10)
            .map(|i| (0..10).map(|j| if j == (i + 3) % 10 { 1.0 } else { 0.1 }).collect())
            .collect();
        assert_eq!(hungarian_max(&sim), (0..10).map(|i| (i + 3) % 10).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn hungarian_matches_exhaustive(values in proptest::collection::vec(-1.0f64..1.0, 16)) {
            let sim: Vec<Vec<f64>> = values.chunks(4).map(|c| c.to_vec()).collect();
            let score = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| sim[i][j]).sum::<f64>();
            let h = hungarian_max(&sim);
            let e = best_permutation_exhaustive(&sim);
            prop_assert!((score(&h) - score(&e)).abs() < 1e-12);
        }
    }
}
