//! Embedding clustering regularization.
//!
//! Words and topics are matched by entropic optimal transport with uniform
//! marginals (`1/V` per word, `1/K` per topic). The transport plan is solved
//! with log-domain Sinkhorn iterations and then held fixed while the
//! regularizer `Σ_ij ‖w_i − t_j‖² ψ_ij` is differentiated.

use crate::error::{Error, Result};
use crate::model::TopicSpace;
use crate::numerics::layers::log_sum_exp;
use crate::numerics::Tensor2;

#[derive(Debug, Clone, PartialEq)]
pub struct TransportProblem {
    /// `V × K` non-negative costs.
    pub cost: Tensor2,
    pub nu: f64,
    pub max_iters: usize,
    /// L1 tolerance on the marginal violation.
    pub tol: f64,
}

impl TransportProblem {
    pub fn new(cost: Tensor2, nu: f64, max_iters: usize, tol: f64) -> Self {
        Self {
            cost,
            nu,
            max_iters,
            tol,
        }
    }

    pub fn row_marginal(&self) -> f64 {
        1.0 / self.cost.rows() as f64
    }

    pub fn col_marginal(&self) -> f64 {
        1.0 / self.cost.cols() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub psi: Tensor2,
    pub iterations_used: usize,
    pub converged: bool,
    /// Dual objective `⟨a, f⟩ + ⟨b, g⟩ − ν Σ ψ` after each iteration. The
    /// intermediate plans are not feasible, so their primal value is not
    /// monotone; this one never decreases and meets the primal at the optimum.
    pub dual_history: Vec<f64>,
}

impl TransportPlan {
    /// L1 distance of row and column sums from their targets.
    pub fn marginal_violation(&self) -> (f64, f64) {
        let (v, k) = self.psi.shape();
        let rows = self.psi.row_sums().iter().map(|s| (s - 1.0 / v as f64).abs()).sum();
        let cols = self.psi.column_sums().iter().map(|s| (s - 1.0 / k as f64).abs()).sum();
        (rows, cols)
    }
}

/// Entropy `H(P) = −Σ P (ln P − 1)`, with `0 ln 0 = 0`.
pub fn entropy(p: &Tensor2) -> f64 {
    -p.data()
        .iter()
        .map(|&x| if x > 0.0 { x * (x.ln() - 1.0) } else { 0.0 })
        .sum::<f64>()
}

/// `⟨C, ψ⟩ − ν H(ψ)`.
pub fn entropic_objective(cost: &Tensor2, psi: &Tensor2, nu: f64) -> f64 {
    let transport: f64 = cost.data().iter().zip(psi.data()).map(|(c, p)| c * p).sum();
    transport - nu * entropy(psi)
}

/// Log-domain Sinkhorn. Each iteration updates the row potential then the
/// column potential, so column marginals are exact after every iteration and
/// convergence is judged on the row violation.
pub fn sinkhorn(problem: &TransportProblem) -> Result<TransportPlan> {
    let nu = problem.nu;
    if !(nu > 0.0) || !nu.is_finite() {
        return Err(Error::InvalidArgument(format!("nu must be positive, got {nu}")));
    }
    let cost = &problem.cost;
    let (v, k) = cost.shape();
    if v == 0 || k == 0 {
        return Err(Error::shape("sinkhorn", format!("empty cost matrix {v}x{k}")));
    }
    if let Some(bad) = cost.data().iter().find(|c| !c.is_finite() || **c < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "cost entries must be finite and >= 0, got {bad}"
        )));
    }
    let log_a = problem.row_marginal().ln();
    let log_b = problem.col_marginal().ln();
    let mut f = vec![0.0; v];
    let mut g = vec![0.0; k];
    let mut scratch_k = vec![0.0; k];
    let mut scratch_v = vec![0.0; v];
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    let plan_from = |f: &[f64], g: &[f64]| Tensor2::from_fn(v, k, |i, j| ((f[i] + g[j] - cost.get(i, j)) / nu).exp());

    for it in 0..problem.max_iters {
        iterations = it + 1;
        for i in 0..v {
            for j in 0..k {
                scratch_k[j] = (g[j] - cost.get(i, j)) / nu;
            }
            f[i] = nu * (log_a - log_sum_exp(&scratch_k));
            if !f[i].is_finite() {
                return Err(Error::KernelCollapse { row: i, nu });
            }
        }
        for j in 0..k {
            for i in 0..v {
                scratch_v[i] = (f[i] - cost.get(i, j)) / nu;
            }
            g[j] = nu * (log_b - log_sum_exp(&scratch_v));
            if !g[j].is_finite() {
                return Err(Error::KernelCollapse { row: j, nu });
            }
        }
        let psi = plan_from(&f, &g);
        let mass: f64 = psi.data().iter().sum();
        history.push(
            problem.row_marginal() * f.iter().sum::<f64>() + problem.col_marginal() * g.iter().sum::<f64>() - nu * mass,
        );
        let row_err: f64 = psi.row_sums().iter().map(|s| (s - problem.row_marginal()).abs()).sum();
        if row_err < problem.tol {
            converged = true;
            break;
        }
    }
    Ok(TransportPlan {
        psi: plan_from(&f, &g),
        iterations_used: iterations,
        converged,
        dual_history: history,
    })
}

/// `Σ_ij ‖w_i − t_j‖² ψ_ij` for a fixed plan.
pub fn ecr_loss(space: &TopicSpace, plan: &TransportPlan) -> Result<f64> {
    let dist = space.squared_distances();
    if dist.shape() != plan.psi.shape() {
        return Err(Error::shape(
            "ecr_loss",
            format!("distances {:?} vs plan {:?}", dist.shape(), plan.psi.shape()),
        ));
    }
    Ok(dist.data().iter().zip(plan.psi.data()).map(|(c, p)| c * p).sum())
}

/// Gradients of [`ecr_loss`] w.r.t. word and topic embeddings, with `ψ` held
/// constant. Returns `(d_words, d_topics)`.
pub fn ecr_loss_backward(space: &TopicSpace, plan: &TransportPlan) -> Result<(Tensor2, Tensor2)> {
    let w = &space.word_embeddings;
    let t = &space.topic_embeddings;
    if plan.psi.shape() != (w.rows(), t.rows()) {
        return Err(Error::shape(
            "ecr_loss_backward",
            format!("plan {:?} vs {}x{}", plan.psi.shape(), w.rows(), t.rows()),
        ));
    }
    Ok(crate::model::squared_distance_backward(w, t, &plan.psi))
}

/// Default entropic weight: half the mean cost.
pub fn default_nu(cost: &Tensor2) -> f64 {
    0.5 * cost.sum() / cost.data().len().max(1) as f64
}
