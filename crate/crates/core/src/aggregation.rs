//! Document clustering and construction of global and augmented documents.

use rand::Rng;
use rayon::prelude::*;

use crate::corpus::{BowCorpus, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::numerics::tensor::squared_distance;
use crate::numerics::Tensor2;
use crate::rng::StageRng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub clusters: usize,
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tol: f64,
    /// L2-normalize rows before clustering.
    pub normalize: bool,
}

impl KMeansParams {
    pub fn new(clusters: usize) -> Self {
        Self {
            clusters,
            max_iters: 300,
            tol: 1e-6,
            normalize: false,
        }
    }
}

/// Hard assignment of documents to `num_clusters` groups.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub assignment: Vec<usize>,
    pub num_clusters: usize,
    pub centroids: Tensor2,
    /// Total within-cluster squared distance of the final assignment.
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
}

impl ClusterAssignment {
    /// Builds an assignment from explicit ids, without centroids.
    pub fn from_labels(assignment: Vec<usize>, num_clusters: usize) -> Result<Self> {
        if let Some(&bad) = assignment.iter().find(|&&g| g >= num_clusters) {
            return Err(Error::InvalidArgument(format!(
                "cluster id {bad} >= number of clusters {num_clusters}"
            )));
        }
        Ok(Self {
            assignment,
            num_clusters,
            centroids: Tensor2::zeros(0, 0),
            inertia: 0.0,
            inertia_history: Vec::new(),
        })
    }

    /// Every document forms its own cluster.
    pub fn identity(num_docs: usize) -> Self {
        Self::from_labels((0..num_docs).collect(), num_docs).expect("ids < D")
    }

    pub fn num_docs(&self) -> usize {
        self.assignment.len()
    }

    pub fn cluster_of(&self, d: usize) -> usize {
        self.assignment[d]
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_clusters];
        for &g in &self.assignment {
            sizes[g] += 1;
        }
        sizes
    }

    /// Member document indices per cluster.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.num_clusters];
        for (d, &g) in self.assignment.iter().enumerate() {
            m[g].push(d);
        }
        m
    }
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans(embeddings: &EmbeddingMatrix, params: &KMeansParams, rng: &mut StageRng) -> Result<ClusterAssignment> {
    let data = if params.normalize {
        embeddings.l2_normalized().rows
    } else {
        embeddings.rows.clone()
    };
    let n = data.rows();
    if n == 0 {
        return Err(Error::InvalidArgument(
            "cannot cluster an empty embedding matrix".into(),
        ));
    }
    if params.clusters == 0 || params.clusters > n {
        return Err(Error::InvalidArgument(format!(
            "cluster count {} must be in 1..={n}",
            params.clusters
        )));
    }
    if !data.is_finite() {
        return Err(Error::InvalidArgument("embeddings contain non-finite values".into()));
    }
    let init = kmeans_plus_plus(&data, params.clusters, rng);
    lloyd(&data, init, params.max_iters, params.tol)
}

/// k-means++ seeding: first centre uniform, then proportional to squared
/// distance from the nearest chosen centre.
pub fn kmeans_plus_plus(data: &Tensor2, k: usize, rng: &mut StageRng) -> Tensor2 {
    let n = data.rows();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| squared_distance(data.row(i), data.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = None;
            for (i, &w) in nearest.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                if target < w {
                    pick = Some(i);
                    break;
                }
                target -= w;
            }
            // Rounding can exhaust `target`; fall back to the last positive weight.
            pick.unwrap_or_else(|| nearest.iter().rposition(|&w| w > 0.0).expect("total > 0"))
        } else {
            // All remaining points coincide with chosen centres.
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(squared_distance(data.row(i), data.row(next)));
        }
    }
    data.select_rows(&chosen)
}

/// Lloyd iterations from explicit initial centroids.
pub fn lloyd(data: &Tensor2, init: Tensor2, max_iters: usize, tol: f64) -> Result<ClusterAssignment> {
    let (n, dim) = data.shape();
    let k = init.rows();
    if init.cols() != dim {
        return Err(Error::shape(
            "lloyd",
            format!("centroid dim {} vs data dim {dim}", init.cols()),
        ));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("cluster count {k} must be in 1..={n}")));
    }
    let mut centroids = init;
    let mut history = Vec::new();
    let (mut labels, mut dists) = assign(data, &centroids);
    history.push(dists.iter().sum::<f64>());

    for _ in 0..max_iters {
        let next = update_centroids(data, &labels, &dists, k);
        let shift = (0..k)
            .map(|g| squared_distance(next.row(g), centroids.row(g)).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        let (new_labels, new_dists) = assign(data, &centroids);
        history.push(new_dists.iter().sum::<f64>());
        let unchanged = new_labels == labels;
        labels = new_labels;
        dists = new_dists;
        if unchanged || shift < tol {
            break;
        }
    }
    if labels.iter().collect::<std::collections::HashSet<_>>().len() < k {
        log::warn!("k-means finished with empty clusters");
    }
    Ok(ClusterAssignment {
        assignment: labels,
        num_clusters: k,
        inertia: *history.last().expect("at least one assignment"),
        inertia_history: history,
        centroids,
    })
}

/// Nearest centroid per row (ties to the lowest index) and its squared distance.
fn assign(data: &Tensor2, centroids: &Tensor2) -> (Vec<usize>, Vec<f64>) {
    (0..data.rows())
        .into_par_iter()
        .map(|i| {
            let row = data.row(i);
            let mut best = (0usize, f64::INFINITY);
            for g in 0..centroids.rows() {
                let d = squared_distance(row, centroids.row(g));
                if d < best.1 {
                    best = (g, d);
                }
            }
            best
        })
        .unzip()
}

fn update_centroids(data: &Tensor2, labels: &[usize], dists: &[f64], k: usize) -> Tensor2 {
    let dim = data.cols();
    let mut sums = Tensor2::zeros(k, dim);
    let mut counts = vec![0usize; k];
    for (i, &g) in labels.iter().enumerate() {
        counts[g] += 1;
        for (s, v) in sums.row_mut(g).iter_mut().zip(data.row(i)) {
            *s += v;
        }
    }
    // Empty clusters are re-seeded at the points farthest from their centroids.
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| dists[b].total_cmp(&dists[a]).then(a.cmp(&b)));
    let mut donors = order.into_iter();
    for g in 0..k {
        if counts[g] > 0 {
            let c = counts[g] as f64;
            sums.row_mut(g).iter_mut().for_each(|s| *s /= c);
        } else if let Some(p) = donors.next() {
            sums.row_mut(g).copy_from_slice(data.row(p));
        }
    }
    sums
}

/// Sparse count vector, sorted by word id.
pub type SparseCounts = Vec<(usize, u64)>;

/// Per-cluster element-wise sum of member bag-of-words vectors.
pub fn build_global_docs(corpus: &BowCorpus, assignment: &ClusterAssignment) -> Result<Vec<SparseCounts>> {
    if corpus.num_docs() != assignment.num_docs() {
        return Err(Error::shape(
            "build_global_docs",
            format!(
                "corpus has {} documents, assignment covers {}",
                corpus.num_docs(),
                assignment.num_docs()
            ),
        ));
    }
    let mut dense: Vec<std::collections::BTreeMap<usize, u64>> = vec![Default::default(); assignment.num_clusters];
    for d in 0..corpus.num_docs() {
        let g = assignment.cluster_of(d);
        for &(w, c) in corpus.doc(d) {
            *dense[g].entry(w).or_insert(0) += u64::from(c);
        }
    }
    let empty = dense.iter().filter(|m| m.is_empty()).count();
    if empty > 0 {
        log::warn!("{empty} cluster(s) have no documents; their global documents are zero");
    }
    Ok(dense.into_iter().map(|m| m.into_iter().collect()).collect())
}

/// Sparse real vector, sorted by word id.
pub type SparseReal = Vec<(usize, f64)>;

fn augment(local: &[(usize, u32)], global: &[(usize, u64)], eta: f64) -> SparseReal {
    let mut out = Vec::with_capacity(local.len() + global.len());
    let (mut i, mut j) = (0, 0);
    while i < local.len() || j < global.len() {
        let lw = local.get(i).map_or(usize::MAX, |e| e.0);
        let gw = global.get(j).map_or(usize::MAX, |e| e.0);
        if lw < gw {
            out.push((lw, f64::from(local[i].1)));
            i += 1;
        } else if gw < lw {
            out.push((gw, eta * global[j].1 as f64));
            j += 1;
        } else {
            out.push((lw, f64::from(local[i].1) + eta * global[j].1 as f64));
            i += 1;
            j += 1;
        }
    }
    out
}

/// `x̃^d = x^d + η · x^{g(d)}` for every document.
pub fn build_augmented_docs(
    corpus: &BowCorpus,
    assignment: &ClusterAssignment,
    global_docs: &[SparseCounts],
    eta: f64,
) -> Result<Vec<SparseReal>> {
    check_eta(eta)?;
    check_global_shapes(corpus, assignment, global_docs)?;
    Ok((0..corpus.num_docs())
        .map(|d| augment(corpus.doc(d), &global_docs[assignment.cluster_of(d)], eta))
        .collect())
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "eta must be a finite value >= 0, got {eta}"
        )));
    }
    Ok(())
}

fn check_global_shapes(corpus: &BowCorpus, assignment: &ClusterAssignment, global_docs: &[SparseCounts]) -> Result<()> {
    if corpus.num_docs() != assignment.num_docs() || global_docs.len() != assignment.num_clusters {
        return Err(Error::shape(
            "global corpus",
            format!(
                "{} documents, {} assigned, {} global docs for {} clusters",
                corpus.num_docs(),
                assignment.num_docs(),
                global_docs.len(),
                assignment.num_clusters
            ),
        ));
    }
    Ok(())
}

/// Global documents together with the augmentation coefficient.
///
/// Augmented documents are produced on demand; materializing all of them
/// densely costs `D × V` memory.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalCorpus {
    pub global_docs: Vec<SparseCounts>,
    pub eta: f64,
}

impl GlobalCorpus {
    pub fn build(corpus: &BowCorpus, assignment: &ClusterAssignment, eta: f64) -> Result<Self> {
        check_eta(eta)?;
        let global_docs = build_global_docs(corpus, assignment)?;
        Ok(Self { global_docs, eta })
    }

    pub fn num_clusters(&self) -> usize {
        self.global_docs.len()
    }

    pub fn check_consistent(&self, corpus: &BowCorpus, assignment: &ClusterAssignment) -> Result<()> {
        check_global_shapes(corpus, assignment, &self.global_docs)
    }

    pub fn augmented_doc(&self, corpus: &BowCorpus, assignment: &ClusterAssignment, d: usize) -> SparseReal {
        augment(corpus.doc(d), &self.global_docs[assignment.cluster_of(d)], self.eta)
    }

    /// Dense global document for cluster `g`.
    pub fn dense_global(&self, g: usize, vocab_size: usize) -> Vec<f64> {
        densify_counts(&self.global_docs[g], vocab_size)
    }
}

pub fn densify_counts(v: &[(usize, u64)], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for &(w, c) in v {
        out[w] = c as f64;
    }
    out
}

pub fn densify(v: &[(usize, f64)], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for &(w, c) in v {
        out[w] = c;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EmbeddingSource;
    use crate::rng::substream;
    use proptest::prelude::*;
    use rand::Rng;

    fn emb(rows: &[Vec<f64>]) -> EmbeddingMatrix {
        EmbeddingMatrix::new(Tensor2::from_rows(rows).unwrap(), EmbeddingSource::Precomputed).unwrap()
    }

    fn random_points(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
        let mut rng = substream(seed, "points");
        (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn one_cluster_per_point() {
        let pts = random_points(1, 9, 3);
        let a = kmeans(&emb(&pts), &KMeansParams::new(9), &mut substream(0, "c")).unwrap();
        assert_eq!(a.inertia, 0.0);
        let mut ids = a.assignment.clone();
        ids.sort_unstable();
        assert_eq!(ids, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn single_cluster_centroid_is_mean() {
        let pts = random_points(2, 15, 4);
        let a = kmeans(&emb(&pts), &KMeansParams::new(1), &mut substream(0, "c")).unwrap();
        for j in 0..4 {
            let mean = pts.iter().map(|p| p[j]).sum::<f64>() / 15.0;
            assert!((a.centroids.get(0, j) - mean).abs() < 1e-12);
        }
        assert!(a.assignment.iter().all(|&g| g == 0));
    }

    #[test]
    fn invalid_cluster_counts() {
        let pts = random_points(3, 4, 2);
        assert!(kmeans(&emb(&pts), &KMeansParams::new(5), &mut substream(0, "c")).is_err());
        assert!(kmeans(&emb(&pts), &KMeansParams::new(0), &mut substream(0, "c")).is_err());
    }

    /// Minimum inertia over every 2-partition of the points.
    fn best_two_partition(pts: &[Vec<f64>]) -> (f64, Vec<usize>) {
        let n = pts.len();
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1u32..(1 << (n - 1)) {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let mut cost = 0.0;
            for g in 0..2 {
                let members: Vec<&Vec<f64>> = pts
                    .iter()
                    .zip(&labels)
                    .filter(|(_, &l)| l == g)
                    .map(|(p, _)| p)
                    .collect();
                let dim = pts[0].len();
                let mean: Vec<f64> = (0..dim)
                    .map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64)
                    .collect();
                cost += members.iter().map(|p| squared_distance(p, &mean)).sum::<f64>();
            }
            if cost < best.0 {
                best = (cost, labels);
            }
        }
        best
    }

    fn same_partition(a: &[usize], b: &[usize]) -> bool {
        (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
    }

    #[test]
    fn two_blobs_match_exhaustive_optimum() {
        let mut rng = substream(4, "blobs");
        let mut pts = Vec::new();
        for i in 0..12 {
            let c = if i < 6 { [-3.0, 0.0] } else { [3.0, 1.0] };
            pts.push(vec![
                c[0] + rng.random_range(-0.5..0.5),
                c[1] + rng.random_range(-0.5..0.5),
            ]);
        }
        let (best_cost, best_labels) = best_two_partition(&pts);
        let a = kmeans(&emb(&pts), &KMeansParams::new(2), &mut substream(9, "c")).unwrap();
        assert!(same_partition(&a.assignment, &best_labels));
        assert!((a.inertia - best_cost).abs() < 1e-9);
        let truth: Vec<usize> = (0..12).map(|i| usize::from(i >= 6)).collect();
        assert!(same_partition(&a.assignment, &truth));
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        // Both initial centroids on the same side; one becomes empty at first.
        let data = Tensor2::from_rows(&[vec![0.0], vec![0.1], vec![10.0], vec![10.1]]).unwrap();
        let init = Tensor2::from_rows(&[vec![0.05], vec![-100.0]]).unwrap();
        let a = lloyd(&data, init, 50, 1e-9).unwrap();
        assert_eq!(a.cluster_sizes(), vec![2, 2]);
    }

    #[test]
    fn global_docs_examples() {
        let corpus = BowCorpus::new(2, vec![vec![(0, 1)], vec![(0, 2), (1, 1)], vec![(1, 4)]]).unwrap();
        let a = ClusterAssignment::from_labels(vec![0, 0, 1], 3).unwrap();
        let g = build_global_docs(&corpus, &a).unwrap();
        assert_eq!(g[0], vec![(0, 3), (1, 1)]);
        assert_eq!(g[1], vec![(1, 4)]);
        assert!(g[2].is_empty());

        let one = ClusterAssignment::from_labels(vec![0, 0, 0], 1).unwrap();
        let g1 = build_global_docs(&corpus, &one).unwrap();
        assert_eq!(g1[0], vec![(0, 3), (1, 5)]);

        let bad = ClusterAssignment::from_labels(vec![0, 0], 1).unwrap();
        assert!(build_global_docs(&corpus, &bad).is_err());
    }

    #[test]
    fn augmented_docs_examples() {
        let corpus = BowCorpus::new(2, vec![vec![(0, 1)], vec![(0, 2), (1, 1)]]).unwrap();
        let a = ClusterAssignment::from_labels(vec![0, 0], 1).unwrap();
        let g = build_global_docs(&corpus, &a).unwrap();
        let aug = build_augmented_docs(&corpus, &a, &g, 0.5).unwrap();
        assert_eq!(densify(&aug[0], 2), vec![2.5, 0.5]);

        let zero = build_augmented_docs(&corpus, &a, &g, 0.0).unwrap();
        for d in 0..2 {
            assert_eq!(densify(&zero[d], 2), corpus.dense_doc(d));
        }

        let id = ClusterAssignment::identity(2);
        let gi = build_global_docs(&corpus, &id).unwrap();
        let doubled = build_augmented_docs(&corpus, &id, &gi, 1.0).unwrap();
        for d in 0..2 {
            let want: Vec<f64> = corpus.dense_doc(d).iter().map(|v| 2.0 * v).collect();
            assert_eq!(densify(&doubled[d], 2), want);
        }
        assert!(build_augmented_docs(&corpus, &a, &g, -0.1).is_err());
    }

    proptest! {
        #[test]
        fn inertia_monotone_and_fixed_point(seed in any::<u64>(), n in 2usize..40, k in 1usize..6) {
            prop_assume!(k <= n);
            let pts = random_points(seed, n, 3);
            let e = emb(&pts);
            let a = kmeans(&e, &KMeansParams::new(k), &mut substream(seed, "c")).unwrap();
            for w in a.inertia_history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
            prop_assert!(a.inertia >= 0.0);
            let (again, _) = assign(&e.rows, &a.centroids);
            prop_assert_eq!(again, a.assignment);
        }

        #[test]
        fn permutation_gives_same_partition(seed in any::<u64>(), n in 3usize..30, k in 1usize..5) {
            prop_assume!(k <= n);
            let pts = random_points(seed, n, 2);
            let data = Tensor2::from_rows(&pts).unwrap();
            let init = kmeans_plus_plus(&data, k, &mut substream(seed, "c"));
            let a = lloyd(&data, init.clone(), 100, 0.0).unwrap();

            let mut perm: Vec<usize> = (0..n).collect();
            perm.reverse();
            let permuted = data.select_rows(&perm);
            let b = lloyd(&permuted, init, 100, 0.0).unwrap();
            let unpermuted: Vec<usize> = {
                let mut out = vec![0; n];
                for (pos, &orig) in perm.iter().enumerate() {
                    out[orig] = b.assignment[pos];
                }
                out
            };
            prop_assert!(same_partition(&a.assignment, &unpermuted));
        }

        #[test]
        fn aggregation_conserves_mass(
            docs in proptest::collection::vec(proptest::collection::vec((0usize..12, 1u32..5), 1..6), 1..25),
            groups in 1usize..6,
            eta in 0.0f64..2.0,
        ) {
            let corpus = BowCorpus::new(12, docs).unwrap();
            let labels: Vec<usize> = (0..corpus.num_docs()).map(|d| (d * 7 + 3) % groups).collect();
            let a = ClusterAssignment::from_labels(labels, groups).unwrap();
            let g = build_global_docs(&corpus, &a).unwrap();
            let mut total = vec![0u64; 12];
            for gd in &g {
                for &(w, c) in gd {
                    total[w] += c;
                }
            }
            prop_assert_eq!(total, corpus.column_sums());
            let aug = build_augmented_docs(&corpus, &a, &g, eta).unwrap();
            for d in 0..corpus.num_docs() {
                let want: Vec<f64> = corpus.dense_doc(d).iter()
                    .zip(densify_counts(&g[a.cluster_of(d)], 12))
                    .map(|(x, gx)| x + eta * gx).collect();
                prop_assert_eq!(densify(&aug[d], 12), want);
            }
        }
    }
}
