//! Maximum-likelihood fitting by EM for the Wishart mixture and
//! mixture-of-experts.

use std::f64::consts::LN_2;

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kmeans::kmeans;
use crate::model::{gating_log_probs, row_log_sum_exp, Dataset, Family, MixtureParams, MoeParams, Params};
use crate::numcore::{log_multigamma, multidigamma, multitrigamma, SpdMatrix};
use crate::sampling::RngState;

pub const NU_CEILING: f64 = 1e6;
const RIDGE: f64 = 1e-8;
const MONOTONE_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Relative log-likelihood change that ends a trajectory.
    pub tol: f64,
    pub restarts: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { max_iter: 500, tol: 1e-8, restarts: 5 }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 || self.restarts == 0 || !(self.tol > 0.0) {
            return Err(Error::Config("max_iter, restarts and tol must be positive".into()));
        }
        Ok(())
    }
}

/// Lower bound for ν in the M-step.
pub fn nu_floor(p: usize) -> f64 {
    p as f64 - 1.0 + 1e-6
}

/// Membership probabilities with their weighted summaries.
#[derive(Debug, Clone)]
pub struct Responsibilities {
    pub r: DMatrix<f64>,
    pub n_k: Vec<f64>,
    /// `M_k = Σ_i r_ik S_i`.
    pub m_k: Vec<DMatrix<f64>>,
    /// `(1/n_k) Σ_i r_ik log|S_i|`.
    pub wavg_logdet: Vec<f64>,
}

impl Responsibilities {
    pub fn from_matrix(data: &Dataset, r: DMatrix<f64>) -> Result<Self> {
        if r.nrows() != data.n() {
            return Err(Error::LengthMismatch { left: r.nrows(), right: data.n() });
        }
        let (n, k) = r.shape();
        let p = data.p();
        let mut n_k = vec![0.0; k];
        let mut m_k = vec![DMatrix::zeros(p, p); k];
        let mut wavg_logdet = vec![0.0; k];
        for i in 0..n {
            let s = data.matrices()[i].entries();
            for c in 0..k {
                let w = r[(i, c)];
                n_k[c] += w;
                m_k[c] += s * w;
                wavg_logdet[c] += w * data.logdets()[i];
            }
        }
        for c in 0..k {
            if n_k[c] > 0.0 {
                wavg_logdet[c] /= n_k[c];
            }
        }
        Ok(Self { r, n_k, m_k, wavg_logdet })
    }

    pub fn k(&self) -> usize {
        self.r.ncols()
    }

    /// Weighted mean `S̄_k = M_k / n_k`.
    pub fn sbar(&self, k: usize) -> Result<SpdMatrix> {
        SpdMatrix::new(&self.m_k[k] / self.n_k[k])
    }

    /// Hard assignments by row maximum.
    pub fn map_labels(&self) -> Vec<usize> {
        (0..self.r.nrows())
            .map(|i| (0..self.k()).max_by(|&a, &b| self.r[(i, a)].total_cmp(&self.r[(i, b)])).unwrap_or(0))
            .collect()
    }

    /// `Σ_i Σ_k r_ik log r_ik` with `0 log 0 = 0`.
    pub fn neg_entropy(&self) -> f64 {
        self.r.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum()
    }
}

/// Responsibilities and the observed-data log-likelihood at `params`.
pub fn e_step(data: &Dataset, params: &Params) -> Result<(Responsibilities, f64)> {
    let lw = params.log_weight_matrix(data)?;
    let lse = row_log_sum_exp(&lw);
    let r = DMatrix::from_fn(lw.nrows(), lw.ncols(), |i, k| (lw[(i, k)] - lse[i]).exp());
    let ll = lse.iter().sum();
    Ok((Responsibilities::from_matrix(data, r)?, ll))
}

/// `Σ_i Σ_k r_ik log π_ik(X_i; β)`.
pub fn gating_objective(r: &DMatrix<f64>, x: &DMatrix<f64>, beta: &DMatrix<f64>) -> f64 {
    let lp = gating_log_probs(x, beta);
    r.iter().zip(lp.iter()).filter(|(w, _)| **w > 0.0).map(|(w, l)| w * l).sum()
}

fn penalized(r: &DMatrix<f64>, x: &DMatrix<f64>, beta: &DMatrix<f64>) -> f64 {
    gating_objective(r, x, beta) - RIDGE * beta.norm_squared()
}

/// Gradient `Xᵀ(R − Π)` restricted to the first K−1 classes (no ridge).
pub fn gating_gradient(r: &DMatrix<f64>, x: &DMatrix<f64>, beta: &DMatrix<f64>) -> DMatrix<f64> {
    let km1 = beta.ncols();
    let pi = gating_log_probs(x, beta).map(f64::exp);
    let diff = DMatrix::from_fn(r.nrows(), km1, |i, k| r[(i, k)] - pi[(i, k)]);
    x.transpose() * diff
}

#[derive(Debug, Clone)]
pub struct BetaFit {
    pub beta: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Weighted multinomial logistic regression by damped Newton with Fisher
/// blocks, warm-started at `beta_init`.
pub fn m_step_beta(r: &DMatrix<f64>, x: &DMatrix<f64>, beta_init: &DMatrix<f64>) -> Result<BetaFit> {
    let (n, q) = x.shape();
    let km1 = beta_init.ncols();
    if r.nrows() != n || r.ncols() != km1 + 1 || beta_init.nrows() != q {
        return Err(Error::DimensionMismatch("responsibilities, design and beta disagree".into()));
    }
    crate::model::check_full_rank(x)?;
    if km1 == 0 {
        return Ok(BetaFit { beta: beta_init.clone(), converged: true, iterations: 0 });
    }
    let d = q * km1;
    let mut beta = beta_init.clone();
    let mut obj = penalized(r, x, &beta);
    let max_iter = 100;
    for it in 0..max_iter {
        let grad = gating_gradient(r, x, &beta) - &beta * (2.0 * RIDGE);
        let gmax = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gmax < 1e-8 {
            return Ok(BetaFit { beta, converged: true, iterations: it });
        }
        let pi = gating_log_probs(x, &beta).map(f64::exp);
        let mut info = DMatrix::zeros(d, d);
        for i in 0..n {
            let xi = x.row(i);
            let outer = xi.transpose() * xi;
            for a in 0..km1 {
                for b in 0..km1 {
                    let w = pi[(i, a)] * (if a == b { 1.0 } else { 0.0 } - pi[(i, b)]);
                    if w != 0.0 {
                        let mut blk = info.view_mut((a * q, b * q), (q, q));
                        blk += &outer * w;
                    }
                }
            }
        }
        for j in 0..d {
            info[(j, j)] += 2.0 * RIDGE;
        }
        let g = DVector::from_iterator(d, (0..km1).flat_map(|a| (0..q).map(move |j| (j, a))).map(|(j, a)| grad[(j, a)]));
        let step = match Cholesky::new(info.clone()) {
            Some(ch) => ch.solve(&g),
            None => {
                let scale = info.diagonal().max().max(1.0);
                for j in 0..d {
                    info[(j, j)] += 1e-8 * scale;
                }
                Cholesky::new(info).map(|ch| ch.solve(&g)).unwrap_or_else(|| g.clone())
            }
        };
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..50 {
            let mut cand = beta.clone();
            for a in 0..km1 {
                for j in 0..q {
                    cand[(j, a)] += t * step[a * q + j];
                }
            }
            let c_obj = penalized(r, x, &cand);
            if c_obj >= obj {
                let stalled = c_obj - obj <= 1e-15 * obj.abs().max(1.0);
                beta = cand;
                obj = c_obj;
                improved = !stalled;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            let grad = gating_gradient(r, x, &beta) - &beta * (2.0 * RIDGE);
            let gmax = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            return Ok(BetaFit { beta, converged: gmax < 1e-6, iterations: it + 1 });
        }
    }
    let grad = gating_gradient(r, x, &beta) - &beta * (2.0 * RIDGE);
    let gmax = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(BetaFit { beta, converged: gmax < 1e-8, iterations: max_iter })
}

fn check_nonempty(resp: &Responsibilities) -> Result<()> {
    let n = resp.r.nrows() as f64;
    for (k, &nk) in resp.n_k.iter().enumerate() {
        if !(nk >= 1e-8 * n) {
            return Err(Error::EmptyComponent { component: k, size: nk });
        }
    }
    Ok(())
}

/// `Σ_k = M_k / (n_k ν_k)`.
pub fn m_step_sigma(resp: &Responsibilities, nu: &[f64]) -> Result<Vec<SpdMatrix>> {
    check_nonempty(resp)?;
    (0..resp.k()).map(|k| SpdMatrix::new(&resp.m_k[k] / (resp.n_k[k] * nu[k]))).collect()
}

/// Profile score `g(ν) = L̄ − log|S̄| + p log ν − p log 2 − ψ_p(ν/2)`; twice
/// the derivative of the per-unit-weight profile log-likelihood.
pub fn nu_score(nu: f64, wavg_logdet: f64, logdet_sbar: f64, p: usize) -> f64 {
    let pf = p as f64;
    wavg_logdet - logdet_sbar + pf * nu.ln() - pf * LN_2 - multidigamma(p, nu / 2.0).unwrap_or(f64::NEG_INFINITY)
}

fn nu_score_derivative(nu: f64, p: usize) -> f64 {
    p as f64 / nu - 0.5 * multitrigamma(p, nu / 2.0).unwrap_or(f64::INFINITY)
}

/// Weighted profile log-likelihood `Σ_i r_ik log f_W(S_i | ν, S̄_k/ν)`.
pub fn nu_profile_loglik(nu: f64, n_k: f64, wavg_logdet: f64, logdet_sbar: f64, p: usize) -> f64 {
    let pf = p as f64;
    let lmg = log_multigamma(p, nu / 2.0).unwrap_or(f64::INFINITY);
    n_k * ((nu - pf - 1.0) / 2.0 * wavg_logdet
        - nu * pf / 2.0
        - nu * pf / 2.0 * LN_2
        - nu / 2.0 * (logdet_sbar - pf * nu.ln())
        - lmg)
}

#[derive(Debug, Clone, Copy)]
pub struct NuFit {
    pub nu: f64,
    /// The score had no sign change and ν was clamped to the bracket edge.
    pub at_boundary: bool,
}

/// Root of the profile score by safeguarded Newton with bisection fallback.
pub fn m_step_nu(resp: &Responsibilities, k: usize, p: usize, start: f64) -> Result<NuFit> {
    check_nonempty(resp)?;
    let sbar = resp.sbar(k)?;
    solve_nu(resp.wavg_logdet[k], sbar.logdet(), p, start)
}

/// Solve `g(ν) = 0` on `(p − 1 + 1e-6, 10⁶)` given the summary statistics.
pub fn solve_nu(wavg_logdet: f64, logdet_sbar: f64, p: usize, start: f64) -> Result<NuFit> {
    let g = |nu: f64| nu_score(nu, wavg_logdet, logdet_sbar, p);
    let mut lo = nu_floor(p);
    let mut hi = NU_CEILING;
    let (g_lo, g_hi) = (g(lo), g(hi));
    if !g_lo.is_finite() && !g_hi.is_finite() {
        return Err(Error::Domain("nu score is not finite".into()));
    }
    if g_hi >= 0.0 {
        return Ok(NuFit { nu: hi, at_boundary: true });
    }
    if g_lo <= 0.0 {
        return Ok(NuFit { nu: lo, at_boundary: true });
    }
    let mut nu = if start > lo && start < hi { start } else { (lo * hi).sqrt() };
    for _ in 0..500 {
        let gv = g(nu);
        if gv == 0.0 {
            break;
        }
        if gv > 0.0 {
            lo = nu;
        } else {
            hi = nu;
        }
        let newton = nu - gv / nu_score_derivative(nu, p);
        let next = if newton > lo && newton < hi && newton.is_finite() {
            newton
        } else if hi / lo > 4.0 {
            (lo * hi).sqrt()
        } else {
            0.5 * (lo + hi)
        };
        if (next - nu).abs() <= 1e-14 * nu || hi - lo <= 1e-14 * hi {
            nu = next;
            break;
        }
        nu = next;
    }
    Ok(NuFit { nu, at_boundary: false })
}

/// One EM trajectory.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub params: Params,
    pub loglik: f64,
    /// Observed-data log-likelihood at every visited parameter state.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub resp: Responsibilities,
    pub nu_boundary: bool,
    pub beta_unconverged: bool,
    /// Largest decrease between consecutive trace entries.
    pub max_decrease: f64,
}

/// Best-of-restarts EM result.
#[derive(Debug, Clone)]
pub struct EmReport {
    pub best: EmFit,
    pub restart: usize,
    pub restart_logliks: Vec<Option<f64>>,
    pub failures: Vec<String>,
}

/// k-means labels mixed `0.9·hard + 0.1·uniform`.
pub fn initial_responsibilities(data: &Dataset, k: usize, rng: &mut RngState) -> Result<DMatrix<f64>> {
    let labels = kmeans(data.vec_stack(), k, 1, rng)?.labels;
    Ok(smoothed_hard(&labels, k))
}

pub fn smoothed_hard(labels: &[usize], k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(labels.len(), k, |i, c| 0.9 * if labels[i] == c { 1.0 } else { 0.0 } + 0.1 / k as f64)
}

/// EM from given initial responsibilities. Initial parameters are
/// `ν_k = p + 2`, `Σ_k = M_k/(n_k ν_k)` and uniform gating (`β = 0` or `π = 1/K`).
pub fn run_em_from(data: &Dataset, r0: DMatrix<f64>, family: Family, config: &EmConfig) -> Result<EmFit> {
    config.validate()?;
    let k = r0.ncols();
    let p = data.p();
    let x = match family {
        Family::Moe => Some(data.require_covariates()?.clone()),
        Family::Mixture => None,
    };
    let resp0 = Responsibilities::from_matrix(data, r0)?;
    let nu = vec![p as f64 + 2.0; k];
    let sigma = m_step_sigma(&resp0, &nu)?;
    let mut params = match &x {
        Some(x) => Params::Moe(MoeParams { beta: DMatrix::zeros(x.ncols(), k - 1), nu, sigma, labels: None }),
        None => Params::Mixture(MixtureParams { pi: vec![1.0 / k as f64; k], nu, sigma, labels: None }),
    };
    let mut trace = Vec::new();
    let mut converged = false;
    let mut nu_boundary = false;
    let mut beta_unconverged = false;
    let mut max_decrease = 0.0f64;
    let mut iterations = 0;
    let (mut resp, mut ll) = e_step(data, &params)?;
    trace.push(ll);
    while iterations < config.max_iter {
        iterations += 1;
        check_nonempty(&resp)?;
        params = m_step(data, &resp, &params, x.as_ref(), &mut nu_boundary, &mut beta_unconverged)?;
        let (new_resp, new_ll) = e_step(data, &params)?;
        if !new_ll.is_finite() {
            return Err(Error::Domain("log-likelihood became non-finite".into()));
        }
        max_decrease = max_decrease.max(ll - new_ll);
        trace.push(new_ll);
        let rel = (new_ll - ll).abs() / ll.abs().max(f64::MIN_POSITIVE);
        resp = new_resp;
        ll = new_ll;
        if rel < config.tol {
            converged = true;
            break;
        }
    }
    if max_decrease > MONOTONE_SLACK {
        log::warn!("EM log-likelihood decreased by {max_decrease:e}");
    }
    Ok(EmFit { params, loglik: ll, trace, iterations, converged, resp, nu_boundary, beta_unconverged, max_decrease })
}

fn m_step(
    data: &Dataset,
    resp: &Responsibilities,
    current: &Params,
    x: Option<&DMatrix<f64>>,
    nu_boundary: &mut bool,
    beta_unconverged: &mut bool,
) -> Result<Params> {
    let p = data.p();
    let k = resp.k();
    let gating = match (current, x) {
        (Params::Moe(m), Some(x)) => {
            let fit = m_step_beta(&resp.r, x, &m.beta)?;
            *beta_unconverged |= !fit.converged;
            let beta = if gating_objective(&resp.r, x, &fit.beta) >= gating_objective(&resp.r, x, &m.beta) {
                fit.beta
            } else {
                m.beta.clone()
            };
            Ok(beta)
        }
        _ => Err(resp.n_k.iter().map(|v| v / data.n() as f64).collect::<Vec<f64>>()),
    };
    let mut nu = Vec::with_capacity(k);
    for c in 0..k {
        let fit = m_step_nu(resp, c, p, current.nu()[c])?;
        *nu_boundary |= fit.at_boundary;
        nu.push(fit.nu);
    }
    let sigma = m_step_sigma(resp, &nu)?;
    Ok(match gating {
        Ok(beta) => Params::Moe(MoeParams { beta, nu, sigma, labels: None }),
        Err(pi) => Params::Mixture(MixtureParams { pi, nu, sigma, labels: None }),
    })
}

/// EM with `config.restarts` k-means initializations run in parallel; the
/// restart with the highest final log-likelihood wins (lowest index on ties).
pub fn run_em(data: &Dataset, k: usize, family: Family, config: &EmConfig, rng: &RngState) -> Result<EmReport> {
    config.validate()?;
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if data.n() < k {
        return Err(Error::DegenerateData(format!("{} observations cannot support {k} components", data.n())));
    }
    if family == Family::Moe {
        data.require_covariates()?;
    }
    let results: Vec<Result<EmFit>> = (0..config.restarts)
        .into_par_iter()
        .map(|r| {
            let mut stream = rng.derive(r as u64);
            let r0 = initial_responsibilities(data, k, &mut stream)?;
            run_em_from(data, r0, family, config)
        })
        .collect();
    let mut best: Option<(usize, EmFit)> = None;
    let mut failures = Vec::new();
    let mut restart_logliks = Vec::new();
    for (i, res) in results.into_iter().enumerate() {
        match res {
            Ok(fit) => {
                restart_logliks.push(Some(fit.loglik));
                if best.as_ref().is_none_or(|(_, b)| fit.loglik > b.loglik) {
                    best = Some((i, fit));
                }
            }
            Err(e) => {
                restart_logliks.push(None);
                failures.push(format!("restart {i}: {e}"));
            }
        }
    }
    match best {
        Some((restart, best)) => Ok(EmReport { best, restart, restart_logliks, failures }),
        None => Err(Error::AllRestartsFailed {
            restarts: config.restarts,
            last: failures.last().cloned().unwrap_or_default(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{loglik_mixture, log_wishart_density};
    use crate::sampling::draw_wishart;
    use proptest::prelude::*;

    fn scalar_data(vals: &[f64]) -> Dataset {
        Dataset::new(vals.iter().map(|v| SpdMatrix::from_row_slice(1, &[*v]).unwrap()).collect()).unwrap()
    }

    fn two_cluster(n: usize, seed: u64) -> Dataset {
        let mut rng = RngState::new(seed);
        let s = [
            SpdMatrix::from_row_slice(2, &[0.5, 0.2, 0.2, 0.7]).unwrap(),
            SpdMatrix::from_row_slice(2, &[4.0, 0.2, 0.2, 3.0]).unwrap(),
        ];
        Dataset::new((0..n).map(|i| draw_wishart(&mut rng, [8.0, 5.0][i % 2], &s[i % 2]).unwrap()).collect()).unwrap()
    }

    #[test]
    fn e_step_examples() {
        let data = scalar_data(&[0.5, 3.0]);
        let sig = SpdMatrix::identity(1);
        let same = Params::Mixture(MixtureParams { pi: vec![0.3, 0.7], nu: vec![4.0, 4.0], sigma: vec![sig.clone(), sig.clone()], labels: None });
        let (r, _) = e_step(&data, &same).unwrap();
        for i in 0..2 {
            assert!((r.r[(i, 0)] - 0.3).abs() < 1e-15);
        }
        let sig2 = SpdMatrix::from_row_slice(1, &[2.0]).unwrap();
        let two = Params::Mixture(MixtureParams { pi: vec![0.4, 0.6], nu: vec![3.0, 6.0], sigma: vec![sig.clone(), sig2.clone()], labels: None });
        let (r, _) = e_step(&data, &two).unwrap();
        for i in 0..2 {
            let a = 0.4 * log_wishart_density(&data.matrices()[i], 3.0, &sig).unwrap().exp();
            let b = 0.6 * log_wishart_density(&data.matrices()[i], 6.0, &sig2).unwrap().exp();
            assert!((r.r[(i, 0)] - a / (a + b)).abs() < 1e-14);
        }
        let one = Params::Mixture(MixtureParams { pi: vec![1.0], nu: vec![3.0], sigma: vec![sig], labels: None });
        assert!(e_step(&data, &one).unwrap().0.r.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn intercept_only_beta_recovers_weights() {
        let n = 40;
        let w = [0.2, 0.5, 0.3];
        let r = DMatrix::from_fn(n, 3, |_, k| w[k]);
        let x = DMatrix::from_element(n, 1, 1.0);
        let fit = m_step_beta(&r, &x, &DMatrix::zeros(1, 2)).unwrap();
        assert!(fit.converged);
        let pi = crate::model::gating_probs(&[1.0], &fit.beta).unwrap();
        for k in 0..3 {
            assert!((pi[k] - w[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn beta_gradient_matches_finite_differences() {
        let n = 30;
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { (i as f64 * 0.37).sin() * 2.0 });
        let r = DMatrix::from_fn(n, 3, |i, k| {
            let raw = [1.0 + (i as f64).cos().abs(), 0.5 + (i % 3) as f64, 1.0];
            raw[k] / raw.iter().sum::<f64>()
        });
        let beta = DMatrix::from_row_slice(2, 2, &[0.3, -0.4, 0.8, 0.1]);
        let g = gating_gradient(&r, &x, &beta);
        let h = 1e-5;
        for j in 0..2 {
            for k in 0..2 {
                let mut a = beta.clone();
                let mut b = beta.clone();
                a[(j, k)] += h;
                b[(j, k)] -= h;
                let fd = (gating_objective(&r, &x, &a) - gating_objective(&r, &x, &b)) / (2.0 * h);
                assert!((fd - g[(j, k)]).abs() < 1e-5);
            }
        }
        let fit = m_step_beta(&r, &x, &beta).unwrap();
        assert!(gating_gradient(&r, &x, &fit.beta).iter().all(|v| v.abs() < 1e-6));
        assert!(gating_objective(&r, &x, &fit.beta) >= gating_objective(&r, &x, &beta));
    }

    #[test]
    fn sigma_update_examples() {
        let data = scalar_data(&[2.0, 6.0]);
        let r = DMatrix::from_row_slice(2, 2, &[0.25, 0.75, 0.5, 0.5]);
        let resp = Responsibilities::from_matrix(&data, r).unwrap();
        let s = m_step_sigma(&resp, &[4.0, 2.0]).unwrap();
        let m0 = (0.25 * 2.0 + 0.5 * 6.0) / 0.75;
        assert!((s[0].entries()[(0, 0)] - m0 / 4.0).abs() < 1e-14);
        let empty = Responsibilities::from_matrix(&data, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0])).unwrap();
        assert!(matches!(m_step_sigma(&empty, &[3.0, 3.0]), Err(Error::EmptyComponent { component: 1, .. })));
    }

    #[test]
    fn nu_root_satisfies_score_and_maximizes_profile() {
        let data = two_cluster(400, 3);
        let r = DMatrix::from_fn(400, 1, |_, _| 1.0);
        let resp = Responsibilities::from_matrix(&data, r).unwrap();
        let fit = m_step_nu(&resp, 0, 2, 4.0).unwrap();
        let sbar = resp.sbar(0).unwrap();
        assert!(!fit.at_boundary);
        assert!(nu_score(fit.nu, resp.wavg_logdet[0], sbar.logdet(), 2).abs() < 1e-10);
        let prof = |v: f64| nu_profile_loglik(v, resp.n_k[0], resp.wavg_logdet[0], sbar.logdet(), 2);
        let h = 1e-5 * fit.nu;
        assert!(((prof(fit.nu + h) - prof(fit.nu - h)) / (2.0 * h) / resp.n_k[0]).abs() < 1e-6);
        assert!(prof(fit.nu) >= prof(fit.nu * 1.01) && prof(fit.nu) >= prof(fit.nu * 0.99));
    }

    #[test]
    fn nu_large_sample_consistency() {
        let mut rng = RngState::new(77);
        let one = SpdMatrix::identity(1);
        let data = Dataset::new((0..100_000).map(|_| draw_wishart(&mut rng, 5.0, &one).unwrap()).collect()).unwrap();
        let resp = Responsibilities::from_matrix(&data, DMatrix::from_element(100_000, 1, 1.0)).unwrap();
        let fit = m_step_nu(&resp, 0, 1, 3.0).unwrap();
        assert!((fit.nu - 5.0).abs() < 0.1, "{}", fit.nu);
    }

    #[test]
    fn identical_data_clamps_nu() {
        let data = scalar_data(&[2.0, 2.0, 2.0]);
        let resp = Responsibilities::from_matrix(&data, DMatrix::from_element(3, 1, 1.0)).unwrap();
        let fit = m_step_nu(&resp, 0, 1, 3.0).unwrap();
        assert!(fit.at_boundary);
    }

    #[test]
    fn single_component_is_closed_form() {
        let data = two_cluster(200, 8);
        let fit = run_em_from(&data, DMatrix::from_element(200, 1, 1.0), Family::Mixture, &EmConfig::default()).unwrap();
        let resp = Responsibilities::from_matrix(&data, DMatrix::from_element(200, 1, 1.0)).unwrap();
        let nu = m_step_nu(&resp, 0, 2, 4.0).unwrap().nu;
        assert!((fit.params.nu()[0] - nu).abs() < 1e-8 * nu);
        let t = &fit.trace;
        assert!(t[1..].iter().all(|v| (v - t[1]).abs() < 1e-9 * t[1].abs()));
    }

    #[test]
    fn mixture_em_is_monotone_and_beats_truthless_start() {
        let data = two_cluster(300, 5);
        let rep = run_em(&data, 2, Family::Mixture, &EmConfig::default(), &RngState::new(1)).unwrap();
        assert!(rep.best.max_decrease <= MONOTONE_SLACK);
        let ll = loglik_mixture(&data, match &rep.best.params {
            Params::Mixture(m) => m,
            _ => unreachable!(),
        })
        .unwrap();
        assert!((ll - rep.best.loglik).abs() < 1e-8 * ll.abs());
        let nus = rep.best.params.nu();
        let (lo, hi) = if nus[0] < nus[1] { (nus[0], nus[1]) } else { (nus[1], nus[0]) };
        assert!((3.5..7.0).contains(&lo) && (6.0..11.0).contains(&hi), "{nus:?}");
    }

    #[test]
    fn intercept_moe_equals_mixture() {
        let data = two_cluster(200, 6);
        let r0 = initial_responsibilities(&data, 2, &mut RngState::new(4)).unwrap();
        let cfg = EmConfig::default();
        let mix = run_em_from(&data, r0.clone(), Family::Mixture, &cfg).unwrap();
        let moe = run_em_from(&data.clone().with_intercept_only(), r0, Family::Moe, &cfg).unwrap();
        for k in 0..2 {
            assert!((mix.params.nu()[k] - moe.params.nu()[k]).abs() < 1e-6);
            assert!((mix.params.sigma()[k].entries() - moe.params.sigma()[k].entries()).amax() < 1e-6);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn em_monotone_on_random_seeds(seed in 0u64..10_000) {
            let data = two_cluster(120, seed);
            let x = DMatrix::from_fn(120, 2, |i, j| if j == 0 { 1.0 } else { ((i as f64) * 0.7 + seed as f64).sin() });
            let moe_data = data.clone().with_covariates(x, None).unwrap();
            let cfg = EmConfig { restarts: 1, ..EmConfig::default() };
            for (d, fam) in [(&data, Family::Mixture), (&moe_data, Family::Moe)] {
                if let Ok(rep) = run_em(d, 2, fam, &cfg, &RngState::new(seed)) {
                    prop_assert!(rep.best.max_decrease <= MONOTONE_SLACK);
                    let rows_ok = (0..120).all(|i| (rep.best.resp.r.row(i).sum() - 1.0).abs() < 1e-12);
                    prop_assert!(rows_ok);
                }
            }
        }
    }
}
