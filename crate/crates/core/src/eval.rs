//! Topic and document-clustering quality metrics.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::corpus::BowCorpus;
use crate::error::{Error, Result};

pub const DEFAULT_TOP_N: usize = 15;

/// Smoothing used when a co-occurrence probability reaches one.
pub const NPMI_EPS: f64 = 1e-12;

/// Fraction of distinct words across all topics' top-word lists.
pub fn topic_diversity<T: Eq + Hash>(topics: &[Vec<T>]) -> Result<f64> {
    let total: usize = topics.iter().map(Vec::len).sum();
    if topics.is_empty() || total == 0 {
        return Err(Error::InvalidArgument(
            "topic diversity needs at least one non-empty topic".into(),
        ));
    }
    let n = topics[0].len();
    if topics.iter().any(|t| t.len() != n) {
        return Err(Error::InvalidArgument(
            "all topics must list the same number of words".into(),
        ));
    }
    let unique: HashSet<&T> = topics.iter().flatten().collect();
    Ok(unique.len() as f64 / total as f64)
}

/// Contingency table between two labelings, keyed by (predicted, gold).
struct Contingency {
    n: usize,
    joint: HashMap<(usize, usize), usize>,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

fn contingency<A: Eq + Hash + Clone, B: Eq + Hash + Clone>(predicted: &[A], gold: &[B]) -> Result<Contingency> {
    if predicted.len() != gold.len() {
        return Err(Error::shape(
            "contingency",
            format!("{} predictions vs {} labels", predicted.len(), gold.len()),
        ));
    }
    if predicted.is_empty() {
        return Err(Error::InvalidArgument(
            "clustering metrics need at least one document".into(),
        ));
    }
    fn intern<T: Eq + Hash + Clone>(xs: &[T]) -> (Vec<usize>, usize) {
        let mut ids = HashMap::new();
        let out = xs
            .iter()
            .map(|x| {
                let next = ids.len();
                *ids.entry(x.clone()).or_insert(next)
            })
            .collect();
        (out, ids.len())
    }
    let (p, np) = intern(predicted);
    let (g, ng) = intern(gold);
    let mut joint = HashMap::new();
    let mut rows = vec![0; np];
    let mut cols = vec![0; ng];
    for (&a, &b) in p.iter().zip(&g) {
        *joint.entry((a, b)).or_insert(0) += 1;
        rows[a] += 1;
        cols[b] += 1;
    }
    Ok(Contingency {
        n: predicted.len(),
        joint,
        rows,
        cols,
    })
}

/// `(1/D) Σ_clusters max_class |cluster ∩ class|`.
pub fn purity<A: Eq + Hash + Clone, B: Eq + Hash + Clone>(predicted: &[A], gold: &[B]) -> Result<f64> {
    let c = contingency(predicted, gold)?;
    let mut best = vec![0usize; c.rows.len()];
    for (&(a, _), &count) in &c.joint {
        best[a] = best[a].max(count);
    }
    Ok(best.iter().sum::<usize>() as f64 / c.n as f64)
}

fn entropy(counts: &[usize], n: usize) -> f64 {
    let n = n as f64;
    -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Mutual information normalized by the arithmetic mean of the two
/// entropies. When both entropies are zero the score is 0.
pub fn nmi<A: Eq + Hash + Clone, B: Eq + Hash + Clone>(predicted: &[A], gold: &[B]) -> Result<f64> {
    let c = contingency(predicted, gold)?;
    let n = c.n as f64;
    // sort for a summation order independent of hash iteration
    let mut cells: Vec<_> = c.joint.iter().collect();
    cells.sort_unstable();
    let mi: f64 = cells
        .into_iter()
        .map(|(&(a, b), &count)| {
            let pab = count as f64 / n;
            pab * (pab * n * n / (c.rows[a] as f64 * c.cols[b] as f64)).ln()
        })
        .sum();
    let denom = 0.5 * (entropy(&c.rows, c.n) + entropy(&c.cols, c.n));
    if denom <= 0.0 {
        return Ok(0.0);
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coherence {
    pub mean: f64,
    pub per_topic: Vec<f64>,
}

/// Mean pairwise NPMI of each topic's words, with probabilities estimated
/// from whole-document co-occurrence in `reference`.
///
/// Word ids outside the reference vocabulary, and pairs that never share a
/// document, score −1.
pub fn npmi_coherence(topics: &[Vec<usize>], reference: &BowCorpus) -> Result<Coherence> {
    if reference.num_docs() == 0 {
        return Err(Error::InvalidArgument("reference corpus is empty".into()));
    }
    let n = reference.num_docs() as f64;
    let words: HashSet<usize> = topics.iter().flatten().copied().collect();
    let mut postings: HashMap<usize, Vec<usize>> = words.iter().map(|&w| (w, Vec::new())).collect();
    for (d, doc) in reference.docs().iter().enumerate() {
        for &(w, _) in doc {
            if let Some(p) = postings.get_mut(&w) {
                p.push(d);
            }
        }
    }
    let pair = |a: usize, b: usize| -> f64 {
        let (pa, pb) = (&postings[&a], &postings[&b]);
        if pa.is_empty() || pb.is_empty() {
            return -1.0;
        }
        let joint = intersection_size(pa, pb);
        if joint == 0 {
            return -1.0;
        }
        let p_ab = joint as f64 / n;
        let p_a = pa.len() as f64 / n;
        let p_b = pb.len() as f64 / n;
        let denom = -p_ab.ln();
        if denom < NPMI_EPS {
            return 1.0;
        }
        ((p_ab.ln() - (p_a * p_b).ln()) / denom).clamp(-1.0, 1.0)
    };
    let mut per_topic = Vec::with_capacity(topics.len());
    for topic in topics {
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..topic.len() {
            for j in i + 1..topic.len() {
                sum += pair(topic[i], topic[j]);
                count += 1;
            }
        }
        per_topic.push(if count == 0 { 0.0 } else { sum / count as f64 });
    }
    let mean = if per_topic.is_empty() {
        0.0
    } else {
        per_topic.iter().sum::<f64>() / per_topic.len() as f64
    };
    Ok(Coherence { mean, per_topic })
}

fn intersection_size(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub td: f64,
    pub purity: Option<f64>,
    pub nmi: Option<f64>,
    pub npmi: f64,
    pub per_topic_npmi: Vec<f64>,
}

impl Metrics {
    /// `labels` are optional gold classes aligned with `assignments`.
    pub fn compute(
        topics: &[Vec<usize>],
        assignments: &[usize],
        labels: Option<&[i64]>,
        reference: &BowCorpus,
    ) -> Result<Self> {
        let td = topic_diversity(topics)?;
        let (purity, nmi) = match labels {
            Some(gold) => (Some(purity(assignments, gold)?), Some(nmi(assignments, gold)?)),
            None => (None, None),
        };
        let coherence = npmi_coherence(topics, reference)?;
        Ok(Self {
            td,
            purity,
            nmi,
            npmi: coherence.mean,
            per_topic_npmi: coherence.per_topic,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}
