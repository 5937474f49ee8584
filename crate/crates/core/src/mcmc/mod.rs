//! Gibbs-within-Metropolis–Hastings samplers for the Wishart mixture and the
//! Wishart mixture-of-experts, chain storage and diagnostics.

mod chain;
mod ess;
mod steps;

pub use chain::{
    ess_for_columns, interval, relabel_chain, relabel_fraction, rereference_beta, Chain, Draw, EssReport, Interval,
    PosteriorSummary, SamplerConfig,
};
pub use ess::{ess, MIN_TRACE};
pub use steps::{
    adapt_scale, gating_label_loglik, gibbs_step_labels, gibbs_step_labels_explicit, gibbs_step_scales,
    gibbs_step_weights, label_counts, mh_step_beta, mh_step_beta_joint, mh_step_nu, nu_log_target, ClusterStats,
};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::kmeans::kmeans;
use crate::model::{component_log_densities, gating_log_probs, row_log_sum_exp, Dataset, Family, Hyperparams, MixtureParams, MoeParams};
use crate::numcore::SpdMatrix;
use crate::sampling::RngState;

const TARGET_ACCEPTANCE: f64 = 0.3;

/// k-means labels on the vectorized observations.
pub fn initial_labels(data: &Dataset, k: usize, rng: &mut RngState) -> Result<Vec<usize>> {
    Ok(kmeans(data.vec_stack(), k, 5, rng)?.labels)
}

/// `Σ_k = mean{S_i : z_i = k} / ν_k`; empty clusters get the pooled mean.
pub fn initial_scales(data: &Dataset, labels: &[usize], nu: &[f64]) -> Result<Vec<SpdMatrix>> {
    let k = nu.len();
    let stats = ClusterStats::from_labels(data, labels, k);
    let pooled: DMatrix<f64> = stats.scatter.iter().fold(DMatrix::zeros(data.p(), data.p()), |a, b| a + b) / data.n() as f64;
    (0..k)
        .map(|c| {
            let mean = if stats.counts[c] > 0 { &stats.scatter[c] / stats.counts[c] as f64 } else { pooled.clone() };
            SpdMatrix::new(mean / nu[c])
        })
        .collect()
}

fn check_inputs(data: &Dataset, hyper: &Hyperparams, k: usize, config: &SamplerConfig) -> Result<()> {
    config.validate()?;
    steps::check_hyper(hyper, data.p(), k)?;
    if data.n() < k {
        return Err(Error::DegenerateData(format!("{} observations cannot support {k} components", data.n())));
    }
    Ok(())
}

pub fn run_mixture_sampler(data: &Dataset, hyper: &Hyperparams, k: usize, config: &SamplerConfig, rng: &mut RngState) -> Result<Chain> {
    check_inputs(data, hyper, k, config)?;
    let labels = initial_labels(data, k, rng)?;
    let nu = vec![data.p() as f64 + 2.0; k];
    let sigma = initial_scales(data, &labels, &nu)?;
    let counts = label_counts(&labels, k);
    let pi = counts.iter().map(|&c| c as f64 / data.n() as f64).collect();
    run_mixture_sampler_from(data, hyper, MixtureParams { pi, nu, sigma, labels: Some(labels) }, config, rng)
}

/// Mixture sampler from an explicit starting state (labels required).
pub fn run_mixture_sampler_from(
    data: &Dataset,
    hyper: &Hyperparams,
    init: MixtureParams,
    config: &SamplerConfig,
    rng: &mut RngState,
) -> Result<Chain> {
    let k = init.k();
    check_inputs(data, hyper, k, config)?;
    init.validate(data.p())?;
    let MixtureParams { mut pi, mut nu, mut sigma, labels } = init;
    let mut labels = labels.ok_or_else(|| Error::Config("initial state needs labels".into()))?;
    if labels.len() != data.n() || labels.iter().any(|&z| z >= k) {
        return Err(Error::Config("initial labels do not match the data".into()));
    }
    let prior_scale = hyper.prior_scale(data.p())?;
    let mut scales = vec![hyper.prop_scale_nu; k];
    let mut accept = vec![0usize; k];
    let mut draws = Vec::with_capacity(config.kept());
    let mut trace = Vec::with_capacity(config.iterations);
    let mut logf = component_log_densities(data, &nu, &sigma)?;

    for t in 0..config.iterations {
        if config.collapsed {
            gibbs_step_labels(&logf, &mut labels, &hyper.alpha, rng)?;
        } else {
            let logw = add_log_weights(&logf, &pi);
            gibbs_step_labels_explicit(&logw, &mut labels, rng)?;
        }
        pi = gibbs_step_weights(&labels, &hyper.alpha, rng)?;
        let stats = ClusterStats::from_labels(data, &labels, k);
        sigma = gibbs_step_scales(&stats, &nu, hyper.nu0, &prior_scale, rng)?;
        if !config.fix_nu {
            update_nu(&stats, &sigma, &mut nu, hyper, &mut scales, &mut accept, t, config, rng);
        }
        logf = component_log_densities(data, &nu, &sigma)?;
        let ll: f64 = row_log_sum_exp(&add_log_weights(&logf, &pi)).iter().sum();
        trace.push(ll);
        if let Some(j) = kept_index(t, config) {
            draws.push(Draw {
                pi: Some(pi.clone()),
                beta: None,
                nu: nu.clone(),
                sigma: sigma.clone(),
                labels: store_labels(j, config).then(|| labels.clone()),
                loglik: ll,
            });
        }
    }
    Ok(Chain {
        family: Family::Mixture,
        k,
        p: data.p(),
        q: 0,
        config: config.clone(),
        draws,
        loglik_trace: trace,
        accept_nu: accept,
        accept_beta: Vec::new(),
        attempts: config.iterations - config.burnin,
        nu_scales: scales,
        beta_scales: Vec::new(),
    })
}

pub fn run_moe_sampler(data: &Dataset, hyper: &Hyperparams, k: usize, config: &SamplerConfig, rng: &mut RngState) -> Result<Chain> {
    let x = data.require_covariates()?;
    check_inputs(data, hyper, k, config)?;
    let labels = initial_labels(data, k, rng)?;
    let nu = vec![data.p() as f64 + 2.0; k];
    let sigma = initial_scales(data, &labels, &nu)?;
    let beta = DMatrix::zeros(x.ncols(), k - 1);
    run_moe_sampler_from(data, hyper, MoeParams { beta, nu, sigma, labels: Some(labels) }, config, rng)
}

pub fn run_moe_sampler_from(
    data: &Dataset,
    hyper: &Hyperparams,
    init: MoeParams,
    config: &SamplerConfig,
    rng: &mut RngState,
) -> Result<Chain> {
    let x = data.require_covariates()?.clone();
    let k = init.k();
    check_inputs(data, hyper, k, config)?;
    init.validate(data.p())?;
    if init.q() != x.ncols() {
        return Err(Error::DimensionMismatch(format!("beta has {} rows, design has {} columns", init.q(), x.ncols())));
    }
    let MoeParams { mut beta, mut nu, mut sigma, labels } = init;
    let mut labels = labels.ok_or_else(|| Error::Config("initial state needs labels".into()))?;
    if labels.len() != data.n() || labels.iter().any(|&z| z >= k) {
        return Err(Error::Config("initial labels do not match the data".into()));
    }
    let prior_scale = hyper.prior_scale(data.p())?;
    let mut scales = vec![hyper.prop_scale_nu; k];
    let mut beta_scales = vec![hyper.prop_scale_beta; k - 1];
    let mut accept = vec![0usize; k];
    let mut accept_beta = vec![0usize; k - 1];
    let mut draws = Vec::with_capacity(config.kept());
    let mut trace = Vec::with_capacity(config.iterations);
    let mut logf = component_log_densities(data, &nu, &sigma)?;

    for t in 0..config.iterations {
        let logw = logf.clone() + gating_log_probs(&x, &beta);
        gibbs_step_labels_explicit(&logw, &mut labels, rng)?;

        if k > 1 {
            let flags = if config.joint_beta {
                vec![mh_step_beta_joint(&x, &labels, &mut beta, hyper.sigma_beta2, &beta_scales, rng); k - 1]
            } else {
                mh_step_beta(&x, &labels, &mut beta, hyper.sigma_beta2, &beta_scales, rng)
            };
            for (b, &acc) in flags.iter().enumerate() {
                if t < config.burnin && config.adapt {
                    beta_scales[b] = adapt_scale(beta_scales[b], acc, t, TARGET_ACCEPTANCE);
                } else if t >= config.burnin && acc {
                    accept_beta[b] += 1;
                }
            }
        }

        let stats = ClusterStats::from_labels(data, &labels, k);
        sigma = gibbs_step_scales(&stats, &nu, hyper.nu0, &prior_scale, rng)?;
        if !config.fix_nu {
            update_nu(&stats, &sigma, &mut nu, hyper, &mut scales, &mut accept, t, config, rng);
        }
        logf = component_log_densities(data, &nu, &sigma)?;
        let ll: f64 = row_log_sum_exp(&(logf.clone() + gating_log_probs(&x, &beta))).iter().sum();
        trace.push(ll);
        if let Some(j) = kept_index(t, config) {
            draws.push(Draw {
                pi: None,
                beta: Some(beta.clone()),
                nu: nu.clone(),
                sigma: sigma.clone(),
                labels: store_labels(j, config).then(|| labels.clone()),
                loglik: ll,
            });
        }
    }
    Ok(Chain {
        family: Family::Moe,
        k,
        p: data.p(),
        q: x.ncols(),
        config: config.clone(),
        draws,
        loglik_trace: trace,
        accept_nu: accept,
        accept_beta,
        attempts: config.iterations - config.burnin,
        nu_scales: scales,
        beta_scales,
    })
}

#[allow(clippy::too_many_arguments)]
fn update_nu(
    stats: &ClusterStats,
    sigma: &[SpdMatrix],
    nu: &mut [f64],
    hyper: &Hyperparams,
    scales: &mut [f64],
    accept: &mut [usize],
    t: usize,
    config: &SamplerConfig,
    rng: &mut RngState,
) {
    for c in 0..nu.len() {
        let (v, acc) = mh_step_nu(stats.counts[c], stats.logdet_sum[c], &sigma[c], nu[c], hyper.a_nu, hyper.b_nu, scales[c], rng);
        nu[c] = v;
        if t < config.burnin {
            if config.adapt {
                scales[c] = adapt_scale(scales[c], acc, t, TARGET_ACCEPTANCE);
            }
        } else if acc {
            accept[c] += 1;
        }
    }
}

fn add_log_weights(logf: &DMatrix<f64>, pi: &[f64]) -> DMatrix<f64> {
    let logpi: Vec<f64> = pi.iter().map(|w| w.ln()).collect();
    DMatrix::from_fn(logf.nrows(), logf.ncols(), |i, k| logf[(i, k)] + logpi[k])
}

fn kept_index(t: usize, config: &SamplerConfig) -> Option<usize> {
    if t < config.burnin {
        return None;
    }
    let since = t - config.burnin + 1;
    since.is_multiple_of(config.thin).then(|| since / config.thin - 1)
}

fn store_labels(j: usize, config: &SamplerConfig) -> bool {
    config.label_stride > 0 && j.is_multiple_of(config.label_stride)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::draw_wishart;

    fn mixp2_data(n: usize, seed: u64) -> Dataset {
        let mut rng = RngState::new(seed);
        let sig = [
            SpdMatrix::from_row_slice(2, &[0.5, 0.2, 0.2, 0.7]).unwrap(),
            SpdMatrix::from_row_slice(2, &[2.0, 0.6, 0.6, 1.5]).unwrap(),
        ];
        let nu = [8.0, 12.0];
        let mats = (0..n).map(|i| draw_wishart(&mut rng, nu[i % 2], &sig[i % 2]).unwrap()).collect();
        Dataset::new(mats).unwrap()
    }

    #[test]
    fn chain_shape_and_determinism() {
        let data = mixp2_data(60, 1);
        let hyper = Hyperparams::default_for(2, 2);
        let cfg = SamplerConfig::new(103, 20, 4, 9);
        let a = run_mixture_sampler(&data, &hyper, 2, &cfg, &mut RngState::new(9)).unwrap();
        let b = run_mixture_sampler(&data, &hyper, 2, &cfg, &mut RngState::new(9)).unwrap();
        assert_eq!(a.draws.len(), 20);
        assert_eq!(a.loglik_trace.len(), 103);
        assert_eq!(a.loglik_trace, b.loglik_trace);
        assert!(a.loglik_trace.iter().all(|v| v.is_finite()));
        for d in &a.draws {
            assert!(d.nu.iter().all(|v| *v > 1.0));
            assert!((d.pi.as_ref().unwrap().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(a.acceptance_nu().iter().all(|r| (0.0..=1.0).contains(r)));
    }

    #[test]
    fn scales_frozen_after_burnin() {
        let data = mixp2_data(40, 2);
        let hyper = Hyperparams::default_for(2, 2);
        let cfg = SamplerConfig::new(60, 30, 1, 3);
        let c = run_mixture_sampler(&data, &hyper, 2, &cfg, &mut RngState::new(3)).unwrap();
        let again = run_mixture_sampler(&data, &hyper, 2, &SamplerConfig::new(200, 30, 1, 3), &mut RngState::new(3)).unwrap();
        assert_eq!(c.nu_scales, again.nu_scales);
    }

    #[test]
    fn config_errors() {
        let data = mixp2_data(10, 3);
        let hyper = Hyperparams::default_for(2, 2);
        let mut rng = RngState::new(0);
        assert!(matches!(
            run_mixture_sampler(&data, &hyper, 2, &SamplerConfig::new(10, 10, 1, 0), &mut rng),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            run_moe_sampler(&data, &hyper, 2, &SamplerConfig::new(10, 5, 1, 0), &mut rng),
            Err(Error::MissingCovariates)
        ));
        let small = data.subset(&[0]).unwrap();
        assert!(matches!(
            run_mixture_sampler(&small, &hyper, 2, &SamplerConfig::new(10, 5, 1, 0), &mut rng),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn moe_sampler_runs() {
        let data = mixp2_data(60, 4);
        let x = DMatrix::from_fn(60, 2, |i, j| if j == 0 { 1.0 } else { (i % 2) as f64 * 2.0 - 1.0 });
        let data = data.with_covariates(x, None).unwrap();
        let hyper = Hyperparams::default_for(2, 2);
        let cfg = SamplerConfig::new(150, 50, 1, 5);
        let c = run_moe_sampler(&data, &hyper, 2, &cfg, &mut RngState::new(5)).unwrap();
        assert_eq!(c.draws.len(), 100);
        assert!(c.loglik_trace.iter().all(|v| v.is_finite()));
        let mut joint = cfg.clone();
        joint.joint_beta = true;
        let j = run_moe_sampler(&data, &hyper, 2, &joint, &mut RngState::new(5)).unwrap();
        assert_eq!(j.accept_beta.len(), 1);
    }
}
