//! Individual Gibbs and Metropolis–Hastings updates.

use std::f64::consts::LN_2;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{gating_log_probs, Dataset, Hyperparams};
use crate::numcore::{log_multigamma, SpdMatrix};
use crate::sampling::{
    draw_categorical_from_logweights, draw_dirichlet, draw_inverse_wishart, draw_std_normal, RngState,
};

/// Per-cluster sufficient statistics: counts `n_k`, scatter sums `S_(k)` and
/// log-determinant sums `L_(k)`.
#[derive(Debug, Clone)]
pub struct ClusterStats {
    pub counts: Vec<usize>,
    pub scatter: Vec<DMatrix<f64>>,
    pub logdet_sum: Vec<f64>,
}

impl ClusterStats {
    pub fn from_labels(data: &Dataset, labels: &[usize], k: usize) -> Self {
        let p = data.p();
        let mut counts = vec![0; k];
        let mut scatter = vec![DMatrix::zeros(p, p); k];
        let mut logdet_sum = vec![0.0; k];
        for (i, &z) in labels.iter().enumerate() {
            counts[z] += 1;
            scatter[z] += data.matrices()[i].entries();
            logdet_sum[z] += data.logdets()[i];
        }
        Self { counts, scatter, logdet_sum }
    }
}

pub fn label_counts(labels: &[usize], k: usize) -> Vec<usize> {
    let mut counts = vec![0; k];
    for &z in labels {
        counts[z] += 1;
    }
    counts
}

/// Collapsed label sweep: each `z_i` in index order from
/// `∝ f_W(S_i | ν_k, Σ_k)·(α_k + n_{−i,k})`, with counts updated after each draw.
/// `logf` holds the `n × K` component log-densities.
pub fn gibbs_step_labels(
    logf: &DMatrix<f64>,
    labels: &mut [usize],
    alpha: &[f64],
    rng: &mut RngState,
) -> Result<()> {
    let k = logf.ncols();
    let mut counts = label_counts(labels, k);
    let mut w = vec![0.0; k];
    for (i, z) in labels.iter_mut().enumerate() {
        counts[*z] -= 1;
        for c in 0..k {
            w[c] = logf[(i, c)] + (alpha[c] + counts[c] as f64).ln();
        }
        *z = draw_categorical_from_logweights(rng, &w)?;
        counts[*z] += 1;
    }
    Ok(())
}

/// Label draw given explicit log weights `ℓ_ik` (mixing weights included).
pub fn gibbs_step_labels_explicit(logw: &DMatrix<f64>, labels: &mut [usize], rng: &mut RngState) -> Result<()> {
    let k = logw.ncols();
    let mut w = vec![0.0; k];
    for (i, z) in labels.iter_mut().enumerate() {
        for c in 0..k {
            w[c] = logw[(i, c)];
        }
        *z = draw_categorical_from_logweights(rng, &w)?;
    }
    Ok(())
}

/// `π | z ~ Dirichlet(α + n)`.
pub fn gibbs_step_weights(labels: &[usize], alpha: &[f64], rng: &mut RngState) -> Result<Vec<f64>> {
    let counts = label_counts(labels, alpha.len());
    let post: Vec<f64> = alpha.iter().zip(&counts).map(|(a, n)| a + *n as f64).collect();
    draw_dirichlet(rng, &post)
}

/// Conjugate scale draws `Σ_k ~ IW(ν₀ + n_k ν_k, Ψ₀⁻¹ + S_(k))`; empty clusters
/// draw from the prior.
pub fn gibbs_step_scales(
    stats: &ClusterStats,
    nu: &[f64],
    nu0: f64,
    prior_scale: &SpdMatrix,
    rng: &mut RngState,
) -> Result<Vec<SpdMatrix>> {
    stats
        .counts
        .iter()
        .enumerate()
        .map(|(k, &n_k)| {
            if n_k == 0 {
                draw_inverse_wishart(rng, nu0, prior_scale)
            } else {
                let b = SpdMatrix::new(prior_scale.entries() + &stats.scatter[k])?;
                draw_inverse_wishart(rng, nu0 + n_k as f64 * nu[k], &b)
            }
        })
        .collect()
}

/// Cluster log-posterior of ν up to terms constant in ν:
/// `(ν−p−1)/2·L − n(νp/2·log 2 + ν/2·log|Σ| + log Γ_p(ν/2)) + (a−1)log ν − bν`.
pub fn nu_log_target(nu: f64, n_k: usize, logdet_sum: f64, sigma_logdet: f64, p: usize, a: f64, b: f64) -> f64 {
    let pf = p as f64;
    let n = n_k as f64;
    let mut v = (a - 1.0) * nu.ln() - b * nu;
    if n_k > 0 {
        let lmg = log_multigamma(p, nu / 2.0).unwrap_or(f64::INFINITY);
        v += (nu - pf - 1.0) / 2.0 * logdet_sum - n * (nu * pf / 2.0 * LN_2 + nu / 2.0 * sigma_logdet + lmg);
    }
    v
}

/// Log-scale random-walk MH update of one ν_k. Returns the new value and
/// whether the proposal was accepted.
#[allow(clippy::too_many_arguments)]
pub fn mh_step_nu(
    n_k: usize,
    logdet_sum: f64,
    sigma_k: &SpdMatrix,
    nu_k: f64,
    a: f64,
    b: f64,
    scale: f64,
    rng: &mut RngState,
) -> (f64, bool) {
    let p = sigma_k.dim();
    let prop = (nu_k.ln() + scale * draw_std_normal(rng)).exp();
    let u = rng.uniform();
    if !(prop > p as f64 - 1.0) || !prop.is_finite() {
        return (nu_k, false);
    }
    let cur = nu_log_target(nu_k, n_k, logdet_sum, sigma_k.logdet(), p, a, b) + nu_k.ln();
    let new = nu_log_target(prop, n_k, logdet_sum, sigma_k.logdet(), p, a, b) + prop.ln();
    if u.ln() < new - cur {
        (prop, true)
    } else {
        (nu_k, false)
    }
}

/// `Σ_i log π_{i,z_i}(X_i; β)`.
pub fn gating_label_loglik(x: &DMatrix<f64>, beta: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let lp = gating_log_probs(x, beta);
    labels.iter().enumerate().map(|(i, &z)| lp[(i, z)]).sum()
}

fn block_log_prior(beta: &DMatrix<f64>, k: usize, sigma_beta2: f64) -> f64 {
    -beta.column(k).norm_squared() / (2.0 * sigma_beta2)
}

/// Sequential per-block random-walk MH for the gating coefficients. Returns
/// one acceptance flag per block.
pub fn mh_step_beta(
    x: &DMatrix<f64>,
    labels: &[usize],
    beta: &mut DMatrix<f64>,
    sigma_beta2: f64,
    scales: &[f64],
    rng: &mut RngState,
) -> Vec<bool> {
    let (q, km1) = beta.shape();
    let mut cur_ll = gating_label_loglik(x, beta, labels);
    let mut accepted = vec![false; km1];
    for k in 0..km1 {
        let mut prop = beta.clone();
        for j in 0..q {
            prop[(j, k)] += scales[k] * draw_std_normal(rng);
        }
        let u = rng.uniform();
        let prop_ll = gating_label_loglik(x, &prop, labels);
        let ratio = prop_ll - cur_ll + block_log_prior(&prop, k, sigma_beta2) - block_log_prior(beta, k, sigma_beta2);
        if u.ln() < ratio {
            *beta = prop;
            cur_ll = prop_ll;
            accepted[k] = true;
        }
    }
    accepted
}

/// Joint variant: all blocks proposed together with one accept/reject.
pub fn mh_step_beta_joint(
    x: &DMatrix<f64>,
    labels: &[usize],
    beta: &mut DMatrix<f64>,
    sigma_beta2: f64,
    scales: &[f64],
    rng: &mut RngState,
) -> bool {
    let (q, km1) = beta.shape();
    let mut prop = beta.clone();
    for k in 0..km1 {
        for j in 0..q {
            prop[(j, k)] += scales[k] * draw_std_normal(rng);
        }
    }
    let u = rng.uniform();
    let prior = |b: &DMatrix<f64>| -b.norm_squared() / (2.0 * sigma_beta2);
    let ratio = gating_label_loglik(x, &prop, labels) - gating_label_loglik(x, beta, labels) + prior(&prop) - prior(beta);
    if u.ln() < ratio {
        *beta = prop;
        true
    } else {
        false
    }
}

/// One Robbins–Monro step on a log proposal scale toward acceptance rate `target`.
pub fn adapt_scale(scale: f64, accepted: bool, iteration: usize, target: f64) -> f64 {
    let gain = ((iteration + 1) as f64).powf(-0.6);
    let acc = if accepted { 1.0 } else { 0.0 };
    (scale.ln() + gain * (acc - target)).exp().clamp(1e-4, 10.0)
}

pub(crate) fn check_hyper(hyper: &Hyperparams, p: usize, k: usize) -> Result<()> {
    hyper.validate(p)?;
    if hyper.k() != k {
        return Err(Error::Config(format!("hyperparameters have {} alpha entries for K = {k}", hyper.k())));
    }
    Ok(())
}
