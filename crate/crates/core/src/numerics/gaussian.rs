//! Diagonal-Gaussian sampling and KL divergence.

use crate::error::{Error, Result};

/// Log-variances are clamped to this range before exponentiation.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

#[inline]
pub fn clamp_log_var(v: f64) -> f64 {
    v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)
}

/// Derivative of [`clamp_log_var`]: 1 strictly inside the range, 0 outside.
#[inline]
pub fn clamp_log_var_grad(v: f64) -> f64 {
    if (LOG_VAR_MIN..=LOG_VAR_MAX).contains(&v) {
        1.0
    } else {
        0.0
    }
}

/// `mu + exp(0.5 · log_var) ⊙ noise`, with `log_var` clamped.
pub fn gaussian_reparameterize(mu: &[f64], log_var: &[f64], noise: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != log_var.len() || mu.len() != noise.len() {
        return Err(Error::shape(
            "gaussian_reparameterize",
            format!("{} / {} / {}", mu.len(), log_var.len(), noise.len()),
        ));
    }
    Ok(mu
        .iter()
        .zip(log_var)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * clamp_log_var(*lv)).exp() * e)
        .collect())
}

/// Gradients of a reparameterized sample w.r.t. `mu` and `log_var` given the
/// upstream gradient `grad_out`. Returns `(d_mu, d_log_var)`.
pub fn gaussian_reparameterize_backward(log_var: &[f64], noise: &[f64], grad_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d_mu = grad_out.to_vec();
    let d_lv = log_var
        .iter()
        .zip(noise)
        .zip(grad_out)
        .map(|((lv, e), g)| g * e * 0.5 * (0.5 * clamp_log_var(*lv)).exp() * clamp_log_var_grad(*lv))
        .collect();
    (d_mu, d_lv)
}

/// `KL(N(mu_q, diag(exp(log_var_q))) || N(mu_p, var_p · I))`.
pub fn kl_diag_gaussian(mu_q: &[f64], log_var_q: &[f64], mu_p: &[f64], var_p: f64) -> Result<f64> {
    if !(var_p > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "prior variance must be positive, got {var_p}"
        )));
    }
    if mu_q.len() != log_var_q.len() || mu_q.len() != mu_p.len() {
        return Err(Error::shape(
            "kl_diag_gaussian",
            format!("{} / {} / {}", mu_q.len(), log_var_q.len(), mu_p.len()),
        ));
    }
    let ln_var_p = var_p.ln();
    let kl = mu_q
        .iter()
        .zip(log_var_q)
        .zip(mu_p)
        .map(|((m, lv), mp)| {
            let lv = clamp_log_var(*lv);
            lv.exp() / var_p + (m - mp).powi(2) / var_p - 1.0 + ln_var_p - lv
        })
        .sum::<f64>();
    Ok(0.5 * kl)
}

/// Gradients of [`kl_diag_gaussian`] w.r.t. `mu_q` and `log_var_q`, scaled by
/// `weight`. Returns `(d_mu, d_log_var)`.
pub fn kl_diag_gaussian_backward(
    mu_q: &[f64],
    log_var_q: &[f64],
    mu_p: &[f64],
    var_p: f64,
    weight: f64,
) -> (Vec<f64>, Vec<f64>) {
    let d_mu = mu_q.iter().zip(mu_p).map(|(m, mp)| weight * (m - mp) / var_p).collect();
    let d_lv = log_var_q
        .iter()
        .map(|lv| weight * 0.5 * (clamp_log_var(*lv).exp() / var_p - 1.0) * clamp_log_var_grad(*lv))
        .collect();
    (d_mu, d_lv)
}
