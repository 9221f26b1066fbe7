//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run with `cargo test -p glocom --test acceptance`.

use std::collections::BTreeMap;
use std::time::Instant;

use glocom::aggregation::{
    build_augmented_docs, build_global_docs, kmeans, ClusterAssignment, GlobalCorpus, KMeansParams,
};
use glocom::corpus::{BowCorpus, EmbeddingMatrix, EmbeddingSource};
use glocom::ecr::{sinkhorn, TransportProblem};
use glocom::eval::{nmi, purity, topic_diversity};
use glocom::model::{
    compute_beta, Batch, DecoderNorm, GloCom, KlAttribution, LocalMode, LossOptions, ModelDims, Noise, TopicSpace,
};
use glocom::numerics::gradcheck::{central_difference, max_relative_error};
use glocom::numerics::{kl_diag_gaussian, Tensor2};
use glocom::pipeline::{self, PipelineInputs, PipelineRun, METRICS_FILE, TOPICS_FILE};
use glocom::rng::substream;
use glocom::synthetic::{generate, match_topics, SyntheticCorpus, SyntheticSpec};
use glocom::trainer::{Ablation, TrainConfig};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: u32, name: &'static str, pass: bool, detail: String) -> Outcome {
    let o = Outcome { id, name, pass, detail };
    println!(
        "[{}] {}. {}: {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.id,
        o.name,
        o.detail
    );
    o
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let (v, k, d, g) = (20, 4, 6, 2);
    let mut rng = substream(7, "acceptance-gradcheck");
    let docs: Vec<Vec<(usize, u32)>> = (0..d)
        .map(|_| {
            (0..4)
                .map(|_| (rng.random_range(0..v), rng.random_range(1..3)))
                .collect()
        })
        .collect();
    let corpus = BowCorpus::new(v, docs).unwrap();
    let assignment = ClusterAssignment::from_labels((0..d).map(|i| i % g).collect(), g).unwrap();
    let global = GlobalCorpus::build(&corpus, &assignment, 0.3).unwrap();
    let dims = ModelDims {
        vocab_size: v,
        num_topics: k,
        embed_dim: 5,
        hidden: 6,
    };
    let words = Tensor2::from_fn(v, 5, |_, _| rng.random_range(-0.5..0.5));
    let mut model = GloCom::init(dims, words, 0.2, 0.1, &mut rng).unwrap();
    // Off the prior so the adaptive heads carry real gradient.
    for layer in [&mut model.encoders.gamma.mean, &mut model.encoders.gamma.log_var] {
        layer
            .weight
            .data_mut()
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-0.5..0.5));
    }
    model
        .space
        .topic_embeddings
        .data_mut()
        .iter_mut()
        .for_each(|t| *t = rng.random_range(-0.5..0.5));

    let all: Vec<usize> = (0..d).collect();
    let batch = Batch::build(&corpus, &assignment, &global, &all).unwrap();
    let noise = Noise::sample(&batch, k, &mut rng);
    let plan = sinkhorn(&TransportProblem::new(model.space.squared_distances(), 0.5, 200, 1e-10)).unwrap();

    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for attribution in [KlAttribution::Divided, KlAttribution::PerDocument] {
        for decoder_norm in [DecoderNorm::None, DecoderNorm::Batch] {
            for local_mode in [LocalMode::Adaptive, LocalMode::Direct] {
                let opts = LossOptions {
                    kl_attribution: attribution,
                    local_mode,
                    lambda_ecr: 20.0,
                    decoder_norm,
                    kl_scale: 1.0,
                    plan: Some(&plan),
                };
                let mut m = model.clone();
                m.zero_grad();
                let (_, cache) = m.forward(&batch, &noise, &opts).unwrap();
                m.backward(&batch, &noise, &opts, &cache).unwrap();
                let analytic: Vec<Vec<f64>> = m.param_groups_mut().into_iter().map(|(_, gr)| gr.to_vec()).collect();
                let params: Vec<Vec<f64>> = model
                    .clone()
                    .param_groups_mut()
                    .into_iter()
                    .map(|(p, _)| p.to_vec())
                    .collect();
                for (gi, p) in params.iter().enumerate() {
                    let numeric = central_difference(p, 1e-4, |x| {
                        let mut probe = model.clone();
                        probe.param_groups_mut()[gi].0.copy_from_slice(x);
                        probe.forward(&batch, &noise, &opts).unwrap().0.total
                    });
                    worst = worst.max(max_relative_error(&analytic[gi], &numeric));
                }
                cases += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        1,
        "gradient correctness",
        worst < 1e-3 && secs < 10.0,
        format!("max relative error {worst:.2e} (< 1e-3) over {cases} loss variants, {secs:.2} s (< 10 s)"),
    )
}

fn beta_contract() -> Outcome {
    let mut rng = substream(11, "acceptance-beta");
    let mut worst_sum: f64 = 0.0;
    let mut worst_uniform: f64 = 0.0;
    for _ in 0..100 {
        let v = rng.random_range(2..40);
        let k = rng.random_range(2..12);
        let e = rng.random_range(k..k + 8);
        let scale = rng.random_range(0.1..3.0);
        let mut words = Tensor2::from_fn(v, e, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
        let topics = Tensor2::from_fn(k, e, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
        // Topics pushed onto a sphere around word 0, so word 0 is equidistant
        // from all of them.
        let center: Vec<f64> = (0..e).map(|_| rng.random_range(-1.0..1.0)).collect();
        let radius = rng.random_range(0.1..2.0);
        let mut sphere = topics.clone();
        for t in 0..k {
            let row = sphere.row_mut(t);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (x, c) in row.iter_mut().zip(&center) {
                *x = c + radius * *x / norm;
            }
        }
        words.row_mut(0).copy_from_slice(&center);
        let space = TopicSpace::new(words, sphere, 0.2).unwrap();
        let beta = compute_beta(&space);
        for i in 0..v {
            worst_sum = worst_sum.max((beta.row(i).iter().sum::<f64>() - 1.0).abs());
        }
        for &b in beta.row(0) {
            worst_uniform = worst_uniform.max((b - 1.0 / k as f64).abs());
        }
    }
    outcome(
        2,
        "beta contract",
        worst_sum <= 1e-9 && worst_uniform <= 1e-9,
        format!(
            "100 trials, max |row sum − 1| {worst_sum:.1e}, max equidistant deviation {worst_uniform:.1e} (≤ 1e-9)"
        ),
    )
}

fn sinkhorn_contract() -> Outcome {
    let start = Instant::now();
    let mut rng = substream(13, "acceptance-sinkhorn");
    let mut worst_rows: f64 = 0.0;
    let mut worst_cols: f64 = 0.0;
    for _ in 0..20 {
        let cost = Tensor2::from_fn(50, 10, |_, _| rng.random_range(0.0..4.0));
        let nu = rng.random_range(0.05..1.0);
        let plan = sinkhorn(&TransportProblem::new(cost, nu, 5000, 1e-9)).unwrap();
        for s in plan.psi.row_sums() {
            worst_rows = worst_rows.max((s - 1.0 / 50.0).abs());
        }
        for s in plan.psi.column_sums() {
            worst_cols = worst_cols.max((s - 1.0 / 10.0).abs());
        }
    }

    // 2×2 with uniform marginals: feasible plans are [[a, ½−a], [½−a, a]],
    // so the LP optimum is one of the two vertices a ∈ {0, ½}.
    let cost = Tensor2::from_rows(&[vec![0.3, 1.1], vec![0.9, 0.2]]).unwrap();
    let vertex = |a: f64| [a, 0.5 - a, 0.5 - a, a];
    let lp_cost = |p: [f64; 4]| p.iter().zip(cost.data()).map(|(x, c)| x * c).sum::<f64>();
    let optimum = [vertex(0.0), vertex(0.5)]
        .into_iter()
        .min_by(|x, y| lp_cost(*x).total_cmp(&lp_cost(*y)))
        .unwrap();
    let tv: Vec<f64> = [1.0, 0.1, 0.01]
        .iter()
        .map(|&nu| {
            let plan = sinkhorn(&TransportProblem::new(cost.clone(), nu, 100_000, 1e-12)).unwrap();
            0.5 * plan
                .psi
                .data()
                .iter()
                .zip(&optimum)
                .map(|(p, q)| (p - q).abs())
                .sum::<f64>()
        })
        .collect();
    let decreasing = tv.windows(2).all(|w| w[1] < w[0]);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        3,
        "sinkhorn contract",
        worst_rows <= 1e-6 && worst_cols <= 1e-6 && decreasing && secs < 5.0,
        format!(
            "marginal error rows {worst_rows:.1e} cols {worst_cols:.1e} (≤ 1e-6); 2×2 TV to LP optimum {:.3e} > {:.3e} > {:.3e}; {secs:.2} s (< 5 s)",
            tv[0], tv[1], tv[2]
        ),
    )
}

/// `∫ q log(q/p)` by composite Simpson over ±14 standard deviations of `q`.
fn kl_quadrature(mq: f64, vq: f64, mp: f64, vp: f64) -> f64 {
    let log_pdf = |x: f64, m: f64, v: f64| -0.5 * ((x - m).powi(2) / v + (2.0 * std::f64::consts::PI * v).ln());
    let sd = vq.sqrt();
    let (lo, hi) = (mq - 14.0 * sd, mq + 14.0 * sd);
    let n = 40_000;
    let h = (hi - lo) / n as f64;
    let f = |x: f64| {
        let lq = log_pdf(x, mq, vq);
        lq.exp() * (lq - log_pdf(x, mp, vp))
    };
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn kl_oracle() -> Outcome {
    let mut rng = substream(17, "acceptance-kl");
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mq = rng.random_range(-2.0..2.0);
        let lv = rng.random_range(-3.0..2.0);
        let mp = rng.random_range(-2.0..2.0);
        let vp = rng.random_range(0.05..3.0);
        let closed = kl_diag_gaussian(&[mq], &[lv], &[mp], vp).unwrap();
        worst = worst.max((closed - kl_quadrature(mq, f64::exp(lv), mp, vp)).abs());
    }
    let mut negatives = 0;
    for _ in 0..10_000 {
        let n = rng.random_range(1..30);
        let mu: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let lv: Vec<f64> = (0..n).map(|_| rng.random_range(-9.0..9.0)).collect();
        let mp: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let vp = f64::exp(rng.random_range(-6.0..3.0));
        if kl_diag_gaussian(&mu, &lv, &mp, vp).unwrap() < 0.0 {
            negatives += 1;
        }
    }
    outcome(
        4,
        "KL oracle",
        worst <= 1e-6 && negatives == 0,
        format!("max |closed form − quadrature| {worst:.1e} (≤ 1e-6) on 20 cases; {negatives} negative values in 10^4 cases"),
    )
}

fn full_config(seed: u64, ablation: Ablation) -> TrainConfig {
    TrainConfig {
        num_topics: 5,
        num_clusters: 5,
        eta: 0.1,
        lambda_ecr: 20.0,
        epochs: 200,
        seed,
        ablation,
        ..TrainConfig::default()
    }
}

fn synthetic(seed: u64) -> SyntheticCorpus {
    generate(&SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn inputs(syn: &SyntheticCorpus) -> PipelineInputs {
    PipelineInputs {
        corpus: syn.corpus.clone(),
        vocab: syn.vocab.clone(),
        doc_embeddings: Some(syn.doc_embeddings.clone()),
        word_embeddings: None,
    }
}

struct Recovery {
    cosines: Vec<f64>,
    purity: f64,
    td: f64,
}

impl Recovery {
    fn pass(&self) -> bool {
        self.cosines.iter().filter(|&&c| c >= 0.8).count() >= 4 && self.purity >= 0.8 && self.td == 1.0
    }
}

fn synthetic_recovery(corpora: &[SyntheticCorpus], runs: &[PipelineRun], secs: f64) -> Outcome {
    let mut lines = Vec::new();
    let mut passes = 0;
    for ((syn, run), seed) in corpora.iter().zip(runs).zip(SEEDS) {
        let matched = match_topics(&run.output.beta, &syn.truth.beta).unwrap();
        let r = Recovery {
            cosines: matched.cosines,
            purity: purity(&run.output.document_topics(), &syn.truth.labels).unwrap(),
            td: run.metrics.td,
        };
        passes += usize::from(r.pass());
        let cos: Vec<String> = r.cosines.iter().map(|c| format!("{c:.3}")).collect();
        lines.push(format!(
            "seed {seed}: cos [{}] purity {:.3} TD {:.3} {}",
            cos.join(" "),
            r.purity,
            r.td,
            if r.pass() { "ok" } else { "miss" }
        ));
    }
    let pass = passes * 2 > SEEDS.len() && secs < 600.0;
    outcome(
        5,
        "synthetic recovery",
        pass,
        format!(
            "{passes}/3 seeds meet cos ≥ 0.8 for ≥ 4/5 topics, purity ≥ 0.8, TD = 1.0; {secs:.0} s (< 600 s)\n      {}",
            lines.join("\n      ")
        ),
    )
}

fn ablation_ordering(full: &[PipelineRun], corpora: &[SyntheticCorpus]) -> Outcome {
    let mean_nmi = |runs: &[PipelineRun]| runs.iter().map(|r| r.metrics.nmi.unwrap()).sum::<f64>() / runs.len() as f64;
    let variant = |ablation: Ablation| -> Vec<PipelineRun> {
        corpora
            .par_iter()
            .zip(SEEDS)
            .map(|(syn, seed)| pipeline::run(&inputs(syn), &full_config(seed, ablation)).unwrap())
            .collect()
    };
    let noc = variant(Ablation::NoClustering);
    let noa = variant(Ablation::NoAugmentation);
    let (f, c, a) = (mean_nmi(full), mean_nmi(&noc), mean_nmi(&noa));
    outcome(
        6,
        "ablation ordering",
        f >= c && f >= a,
        format!("mean NMI over 3 seeds: full {f:.4}, NoC {c:.4}, NoA {a:.4}"),
    )
}

/// Brute-force contingency table over label values.
fn table(pred: &[u8], gold: &[u8]) -> BTreeMap<(u8, u8), usize> {
    let mut t = BTreeMap::new();
    for (&p, &g) in pred.iter().zip(gold) {
        *t.entry((p, g)).or_insert(0) += 1;
    }
    t
}

fn purity_oracle(pred: &[u8], gold: &[u8]) -> f64 {
    let t = table(pred, gold);
    let mut best: BTreeMap<u8, usize> = BTreeMap::new();
    for (&(p, _), &c) in &t {
        let b = best.entry(p).or_insert(0);
        *b = (*b).max(c);
    }
    best.values().sum::<usize>() as f64 / pred.len() as f64
}

fn nmi_oracle(pred: &[u8], gold: &[u8]) -> f64 {
    let n = pred.len() as f64;
    let t = table(pred, gold);
    let marginal = |first: bool| {
        let mut m: BTreeMap<u8, f64> = BTreeMap::new();
        for (&(p, g), &c) in &t {
            *m.entry(if first { p } else { g }).or_insert(0.0) += c as f64;
        }
        m
    };
    let (mp, mg) = (marginal(true), marginal(false));
    let h = |m: &BTreeMap<u8, f64>| -m.values().map(|c| c / n * (c / n).ln()).sum::<f64>();
    let mi: f64 = t
        .iter()
        .map(|(&(p, g), &c)| {
            let c = c as f64;
            c / n * (c * n / (mp[&p] * mg[&g])).ln()
        })
        .sum();
    let denom = (h(&mp) + h(&mg)) / 2.0;
    if denom == 0.0 {
        0.0
    } else {
        mi / denom
    }
}

fn metric_oracles() -> Outcome {
    let mut rng = substream(19, "acceptance-metrics");
    let mut purity_mismatch = 0;
    let mut worst_nmi: f64 = 0.0;
    for _ in 0..50 {
        let kp = rng.random_range(1..7u8);
        let kg = rng.random_range(1..7u8);
        let pred: Vec<u8> = (0..20).map(|_| rng.random_range(0..kp)).collect();
        let gold: Vec<u8> = (0..20).map(|_| rng.random_range(0..kg)).collect();
        if purity(&pred, &gold).unwrap() != purity_oracle(&pred, &gold) {
            purity_mismatch += 1;
        }
        worst_nmi = worst_nmi.max((nmi(&pred, &gold).unwrap() - nmi_oracle(&pred, &gold)).abs());
    }
    let distinct = topic_diversity(&[vec!["a", "b", "c"], vec!["d", "e", "f"]]).unwrap();
    let identical = topic_diversity(&vec![vec!["a", "b", "c"]; 4]).unwrap();
    let overlap = topic_diversity(&[vec!["a", "b", "c"], vec!["a", "d", "e"]]).unwrap();
    let td_ok = distinct == 1.0 && identical == 1.0 / 4.0 && overlap == 5.0 / 6.0;
    outcome(
        7,
        "metric oracles",
        purity_mismatch == 0 && worst_nmi <= 1e-9 && td_ok,
        format!(
            "purity mismatches {purity_mismatch}/50, max NMI error {worst_nmi:.1e} (≤ 1e-9); TD hand cases {distinct}, {identical}, {overlap:.6}"
        ),
    )
}

fn determinism(syn: &SyntheticCorpus, first: &PipelineRun) -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline::write_run(a.path(), &syn.vocab, first).unwrap();
    let second = pipeline::run(&inputs(syn), &full_config(SEEDS[0], Ablation::Full)).unwrap();
    pipeline::write_run(b.path(), &syn.vocab, &second).unwrap();
    let same = |name: &str| std::fs::read(a.path().join(name)).unwrap() == std::fs::read(b.path().join(name)).unwrap();
    let (metrics, topics) = (same(METRICS_FILE), same(TOPICS_FILE));
    outcome(
        8,
        "determinism",
        metrics && topics,
        format!("metrics.json identical: {metrics}, topics.txt identical: {topics}"),
    )
}

fn conservation_holds(corpus: &BowCorpus, assignment: &ClusterAssignment) -> bool {
    let global = build_global_docs(corpus, assignment).unwrap();
    let mut sums = vec![0u64; corpus.vocab_size()];
    for doc in &global {
        for &(w, c) in doc {
            sums[w] += c;
        }
    }
    let augmented = build_augmented_docs(corpus, assignment, &global, 0.0).unwrap();
    let unchanged = augmented.iter().enumerate().all(|(d, aug)| {
        let original: Vec<(usize, f64)> = corpus.doc(d).iter().map(|&(w, c)| (w, f64::from(c))).collect();
        let nonzero: Vec<(usize, f64)> = aug.iter().copied().filter(|&(_, x)| x != 0.0).collect();
        nonzero == original
    });
    sums == corpus.column_sums() && unchanged
}

fn aggregation_conservation(corpora: &[SyntheticCorpus], runs: &[PipelineRun]) -> Outcome {
    let mut checked = 0;
    let mut failed = 0;
    let mut tally = |ok: bool| {
        checked += 1;
        failed += usize::from(!ok);
    };
    for (syn, run) in corpora.iter().zip(runs) {
        tally(conservation_holds(&syn.corpus, &run.assignment));
        tally(conservation_holds(
            &syn.corpus,
            &ClusterAssignment::identity(syn.corpus.num_docs()),
        ));
        let labels = ClusterAssignment::from_labels(syn.truth.labels.clone(), 5).unwrap();
        tally(conservation_holds(&syn.corpus, &labels));
    }
    let mut rng = substream(23, "acceptance-aggregation");
    for _ in 0..30 {
        let v = rng.random_range(3..60);
        let d = rng.random_range(2..80);
        let docs: Vec<Vec<(usize, u32)>> = (0..d)
            .map(|_| {
                (0..rng.random_range(1..10))
                    .map(|_| (rng.random_range(0..v), rng.random_range(1..5)))
                    .collect()
            })
            .collect();
        let corpus = BowCorpus::new(v, docs).unwrap();
        let g = rng.random_range(1..=d.min(8));
        let data = Tensor2::from_fn(d, 4, |_, _| rng.random_range(-1.0..1.0));
        let data = EmbeddingMatrix::new(data, EmbeddingSource::Precomputed).unwrap();
        let assignment = kmeans(&data, &KMeansParams::new(g), &mut rng).unwrap();
        tally(conservation_holds(&corpus, &assignment));
    }
    outcome(
        9,
        "aggregation conservation",
        failed == 0,
        format!(
            "{} of {checked} corpus/assignment pairs conserve column sums and keep x̃ = x at η = 0",
            checked - failed
        ),
    )
}

fn main() {
    let mut results = vec![
        gradient_correctness(),
        beta_contract(),
        sinkhorn_contract(),
        kl_oracle(),
    ];

    let corpora: Vec<SyntheticCorpus> = SEEDS.iter().map(|&s| synthetic(s)).collect();
    let start = Instant::now();
    let full: Vec<PipelineRun> = corpora
        .par_iter()
        .zip(SEEDS)
        .map(|(syn, seed)| pipeline::run(&inputs(syn), &full_config(seed, Ablation::Full)).unwrap())
        .collect();
    let secs = start.elapsed().as_secs_f64();
    results.push(synthetic_recovery(&corpora, &full, secs));
    results.push(ablation_ordering(&full, &corpora));
    results.push(metric_oracles());
    results.push(determinism(&corpora[0], &full[0]));
    results.push(aggregation_conservation(&corpora, &full));

    let failed: Vec<String> = results
        .iter()
        .filter(|o| !o.pass)
        .map(|o| format!("{} ({})", o.id, o.name))
        .collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
