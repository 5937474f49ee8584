//! Wishart log-densities, gating probabilities and observed-data
//! likelihoods for the mixture and mixture-of-experts families.
//!
//! Every consumer that needs the per-observation, per-component log weights
//! `ℓ_ik = log π_ik + log f_W(S_i | ν_k, Σ_k)` (label sampling, E-step, ICL
//! entropy, LOO, likelihood monitoring) goes through [`Params::log_weight_matrix`]
//! so they all agree exactly.

use std::f64::consts::LN_2;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{log_multigamma, log_sum_exp, row_major, trace_prod_batch, SpdMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Mixture,
    Moe,
}

/// `n` SPD observations of a common dimension `p`, with cached
/// log-determinants, the `n × p²` stack of row-major `vec(S_i)`, and optional
/// covariates whose first column is an intercept.
#[derive(Debug, Clone)]
pub struct Dataset {
    p: usize,
    matrices: Vec<SpdMatrix>,
    logdets: DVector<f64>,
    vec_stack: DMatrix<f64>,
    covariates: Option<DMatrix<f64>>,
    covariate_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(matrices: Vec<SpdMatrix>) -> Result<Self> {
        let Some(first) = matrices.first() else {
            return Err(Error::DegenerateData("dataset has no observations".into()));
        };
        let p = first.dim();
        if let Some((i, m)) = matrices.iter().enumerate().find(|(_, m)| m.dim() != p) {
            return Err(Error::DimensionMismatch(format!(
                "observation {i} is {}x{}, expected {p}x{p}",
                m.dim(),
                m.dim()
            )));
        }
        let n = matrices.len();
        let logdets = DVector::from_iterator(n, matrices.iter().map(|m| m.logdet()));
        let mut vec_stack = DMatrix::zeros(n, p * p);
        for (i, m) in matrices.iter().enumerate() {
            for (c, v) in m.to_row_major().into_iter().enumerate() {
                vec_stack[(i, c)] = v;
            }
        }
        Ok(Self { p, matrices, logdets, vec_stack, covariates: None, covariate_names: None })
    }

    /// Attach an `n × q` design. The first column must be all ones and the
    /// design must have full column rank.
    pub fn with_covariates(mut self, x: DMatrix<f64>, names: Option<Vec<String>>) -> Result<Self> {
        if x.nrows() != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "covariates have {} rows for {} observations",
                x.nrows(),
                self.n()
            )));
        }
        if x.ncols() == 0 || x.column(0).iter().any(|v| *v != 1.0) {
            return Err(Error::DegenerateData("first covariate column must be an all-ones intercept".into()));
        }
        if let Some(names) = &names {
            if names.len() != x.ncols() {
                return Err(Error::LengthMismatch { left: names.len(), right: x.ncols() });
            }
        }
        check_full_rank(&x)?;
        self.covariates = Some(x);
        self.covariate_names = names;
        Ok(self)
    }

    /// Replace any covariates by the intercept column alone.
    pub fn with_intercept_only(self) -> Self {
        let n = self.n();
        self.with_covariates(DMatrix::from_element(n, 1, 1.0), Some(vec!["intercept".into()]))
            .expect("intercept-only design is full rank")
    }

    pub fn without_covariates(mut self) -> Self {
        self.covariates = None;
        self.covariate_names = None;
        self
    }

    pub fn n(&self) -> usize {
        self.matrices.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Number of covariate columns (0 when there are none).
    pub fn q(&self) -> usize {
        self.covariates.as_ref().map_or(0, |x| x.ncols())
    }

    pub fn matrices(&self) -> &[SpdMatrix] {
        &self.matrices
    }

    pub fn logdets(&self) -> &DVector<f64> {
        &self.logdets
    }

    pub fn vec_stack(&self) -> &DMatrix<f64> {
        &self.vec_stack
    }

    pub fn covariates(&self) -> Option<&DMatrix<f64>> {
        self.covariates.as_ref()
    }

    pub fn covariate_names(&self) -> Option<&[String]> {
        self.covariate_names.as_deref()
    }

    pub fn require_covariates(&self) -> Result<&DMatrix<f64>> {
        self.covariates.as_ref().ok_or(Error::MissingCovariates)
    }

    /// Observations at `idx`, in that order, with matching covariate rows.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let mats = idx.iter().map(|&i| self.matrices[i].clone()).collect();
        let mut out = Self::new(mats)?;
        if let Some(x) = &self.covariates {
            let rows: Vec<_> = idx.iter().map(|&i| x.row(i)).collect();
            out.covariates = Some(DMatrix::from_rows(&rows));
            out.covariate_names = self.covariate_names.clone();
        }
        Ok(out)
    }
}

pub(crate) fn check_full_rank(x: &DMatrix<f64>) -> Result<()> {
    if x.ncols() > x.nrows() {
        return Err(Error::RankDeficientDesign);
    }
    let xtx = x.transpose() * x;
    let max_diag = xtx.diagonal().max();
    let Some(ch) = Cholesky::new(xtx) else {
        return Err(Error::RankDeficientDesign);
    };
    let l = ch.unpack();
    let min_pivot = l.diagonal().iter().map(|d| d * d).fold(f64::INFINITY, f64::min);
    if !(min_pivot > 1e-12 * max_diag) {
        return Err(Error::RankDeficientDesign);
    }
    Ok(())
}

/// Parameters of the covariate-free mixture.
#[derive(Debug, Clone)]
pub struct MixtureParams {
    pub pi: Vec<f64>,
    pub nu: Vec<f64>,
    pub sigma: Vec<SpdMatrix>,
    /// Zero-based component labels, when available.
    pub labels: Option<Vec<usize>>,
}

impl MixtureParams {
    pub fn k(&self) -> usize {
        self.pi.len()
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        let k = self.k();
        if k == 0 || self.nu.len() != k || self.sigma.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "pi/nu/sigma lengths {}/{}/{}",
                k,
                self.nu.len(),
                self.sigma.len()
            )));
        }
        if self.pi.iter().any(|w| !(*w >= 0.0)) || (self.pi.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("mixture weights {:?} are not on the simplex", self.pi)));
        }
        validate_experts(&self.nu, &self.sigma, p)
    }
}

/// Parameters of the mixture-of-experts model. `beta` is `q × (K−1)`; the
/// baseline class K has coefficients fixed at zero and is never stored.
#[derive(Debug, Clone)]
pub struct MoeParams {
    pub beta: DMatrix<f64>,
    pub nu: Vec<f64>,
    pub sigma: Vec<SpdMatrix>,
    pub labels: Option<Vec<usize>>,
}

impl MoeParams {
    pub fn k(&self) -> usize {
        self.nu.len()
    }

    pub fn q(&self) -> usize {
        self.beta.nrows()
    }

    /// `q × K` coefficients with the zero baseline column appended.
    pub fn full_beta(&self) -> DMatrix<f64> {
        let (q, km1) = self.beta.shape();
        let mut out = DMatrix::zeros(q, km1 + 1);
        out.columns_mut(0, km1).copy_from(&self.beta);
        out
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        let k = self.k();
        if k == 0 || self.beta.ncols() + 1 != k || self.sigma.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "beta has {} columns, nu {} entries, sigma {} matrices",
                self.beta.ncols(),
                k,
                self.sigma.len()
            )));
        }
        validate_experts(&self.nu, &self.sigma, p)
    }
}

fn validate_experts(nu: &[f64], sigma: &[SpdMatrix], p: usize) -> Result<()> {
    if let Some(v) = nu.iter().find(|v| !(**v > p as f64 - 1.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("degrees of freedom {v} must exceed p - 1 = {}", p - 1)));
    }
    if let Some(s) = sigma.iter().find(|s| s.dim() != p) {
        return Err(Error::DimensionMismatch(format!("scale matrix is {0}x{0}, expected {p}x{p}", s.dim())));
    }
    Ok(())
}

/// Either family's parameter state.
#[derive(Debug, Clone)]
pub enum Params {
    Mixture(MixtureParams),
    Moe(MoeParams),
}

impl Params {
    pub fn family(&self) -> Family {
        match self {
            Params::Mixture(_) => Family::Mixture,
            Params::Moe(_) => Family::Moe,
        }
    }

    pub fn k(&self) -> usize {
        self.nu().len()
    }

    pub fn nu(&self) -> &[f64] {
        match self {
            Params::Mixture(m) => &m.nu,
            Params::Moe(m) => &m.nu,
        }
    }

    pub fn sigma(&self) -> &[SpdMatrix] {
        match self {
            Params::Mixture(m) => &m.sigma,
            Params::Moe(m) => &m.sigma,
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match self {
            Params::Mixture(m) => m.labels.as_deref(),
            Params::Moe(m) => m.labels.as_deref(),
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        match self {
            Params::Mixture(m) => m.validate(p),
            Params::Moe(m) => m.validate(p),
        }
    }

    /// `n × K` matrix of log mixing weights `log π_ik`.
    pub fn log_mixing(&self, data: &Dataset) -> Result<DMatrix<f64>> {
        match self {
            Params::Mixture(m) => {
                let logpi: Vec<f64> = m.pi.iter().map(|w| w.ln()).collect();
                Ok(DMatrix::from_fn(data.n(), m.k(), |_, k| logpi[k]))
            }
            Params::Moe(m) => {
                let x = data.require_covariates()?;
                if x.ncols() != m.q() {
                    return Err(Error::DimensionMismatch(format!(
                        "design has {} columns, beta has {} rows",
                        x.ncols(),
                        m.q()
                    )));
                }
                Ok(gating_log_probs(x, &m.beta))
            }
        }
    }

    /// The shared kernel `ℓ_ik = log π_ik + log f_W(S_i | ν_k, Σ_k)`.
    pub fn log_weight_matrix(&self, data: &Dataset) -> Result<DMatrix<f64>> {
        let logf = component_log_densities(data, self.nu(), self.sigma())?;
        Ok(logf + self.log_mixing(data)?)
    }

    /// Observed-data log-likelihood.
    pub fn loglik(&self, data: &Dataset) -> Result<f64> {
        Ok(row_log_sum_exp(&self.log_weight_matrix(data)?).iter().sum())
    }
}

/// Prior hyperparameters and initial MH proposal scales.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Dirichlet concentrations, one per component.
    pub alpha: Vec<f64>,
    pub nu0: f64,
    /// Row-major `p × p` inverse-Wishart prior matrix Ψ₀.
    pub psi0: Vec<f64>,
    pub a_nu: f64,
    pub b_nu: f64,
    pub sigma_beta2: f64,
    pub prop_scale_nu: f64,
    pub prop_scale_beta: f64,
}

impl Hyperparams {
    /// Weakly informative defaults: `α_k = 1/K`, `ν₀ = p + 2`, `Ψ₀ = I`, a
    /// Gamma(2, 2/(p+6)) prior on ν (mean p + 6), `σ²_β = 10`.
    pub fn default_for(p: usize, k: usize) -> Self {
        let pf = p as f64;
        let mut psi0 = vec![0.0; p * p];
        for j in 0..p {
            psi0[j * p + j] = 1.0;
        }
        Self {
            alpha: vec![1.0 / k as f64; k],
            nu0: pf + 2.0,
            psi0,
            a_nu: 2.0,
            b_nu: 2.0 / (pf + 6.0),
            sigma_beta2: 10.0,
            prop_scale_nu: 0.1,
            prop_scale_beta: 0.1,
        }
    }

    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    pub fn psi0_matrix(&self, p: usize) -> Result<SpdMatrix> {
        SpdMatrix::from_row_slice(p, &self.psi0)
    }

    /// Inverse-Wishart prior scale `Ψ₀⁻¹` entering the conjugate update.
    pub fn prior_scale(&self, p: usize) -> Result<SpdMatrix> {
        SpdMatrix::new(self.psi0_matrix(p)?.inverse())
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("hyperparameter {name} = {v} must be positive")))
            }
        };
        for a in &self.alpha {
            pos("alpha", *a)?;
        }
        pos("nu0", self.nu0)?;
        pos("a_nu", self.a_nu)?;
        pos("b_nu", self.b_nu)?;
        pos("sigma_beta2", self.sigma_beta2)?;
        pos("prop_scale_nu", self.prop_scale_nu)?;
        pos("prop_scale_beta", self.prop_scale_beta)?;
        if self.nu0 <= p as f64 - 1.0 {
            return Err(Error::Config(format!("nu0 = {} must exceed p - 1", self.nu0)));
        }
        if self.a_nu / self.b_nu <= p as f64 - 1.0 {
            return Err(Error::Config(format!(
                "prior mean a/b = {} of nu must exceed p - 1",
                self.a_nu / self.b_nu
            )));
        }
        self.psi0_matrix(p).map_err(|e| Error::Config(format!("psi0: {e}")))?;
        Ok(())
    }
}

fn check_nu(nu: f64, p: usize) -> Result<()> {
    if !(nu > p as f64 - 1.0) || !nu.is_finite() {
        return Err(Error::Domain(format!("degrees of freedom {nu} must exceed p - 1 = {}", p - 1)));
    }
    Ok(())
}

/// Terms of `log f_W(S | ν, Σ)` that do not involve `S`:
/// `−νp/2·log 2 − ν/2·log|Σ| − log Γ_p(ν/2)`.
pub fn wishart_log_normalizer(nu: f64, sigma: &SpdMatrix) -> Result<f64> {
    let p = sigma.dim();
    check_nu(nu, p)?;
    Ok(-nu * p as f64 / 2.0 * LN_2 - nu / 2.0 * sigma.logdet() - log_multigamma(p, nu / 2.0)?)
}

/// `log f_W(S | ν, Σ) = (ν−p−1)/2·log|S| − ½tr(Σ⁻¹S) − νp/2·log 2 − ν/2·log|Σ| − log Γ_p(ν/2)`.
pub fn log_wishart_density(s: &SpdMatrix, nu: f64, sigma: &SpdMatrix) -> Result<f64> {
    let p = sigma.dim();
    if s.dim() != p {
        return Err(Error::DimensionMismatch(format!("S is {0}x{0}, Sigma is {p}x{p}", s.dim())));
    }
    let norm = wishart_log_normalizer(nu, sigma)?;
    Ok((nu - p as f64 - 1.0) / 2.0 * s.logdet() - 0.5 * sigma.trace_inv_prod(s.entries()) + norm)
}

/// `n × K` matrix of `log f_W(S_i | ν_k, Σ_k)`, with the trace terms for each
/// component evaluated in one product against the `vec(S_i)` stack.
pub fn component_log_densities(data: &Dataset, nu: &[f64], sigma: &[SpdMatrix]) -> Result<DMatrix<f64>> {
    if nu.len() != sigma.len() {
        return Err(Error::LengthMismatch { left: nu.len(), right: sigma.len() });
    }
    let p = data.p();
    let mut out = DMatrix::zeros(data.n(), nu.len());
    for (k, (&nu_k, sigma_k)) in nu.iter().zip(sigma).enumerate() {
        if sigma_k.dim() != p {
            return Err(Error::DimensionMismatch(format!("Sigma_{k} is {0}x{0}, data is {p}x{p}", sigma_k.dim())));
        }
        let norm = wishart_log_normalizer(nu_k, sigma_k)?;
        let traces = trace_prod_batch(&sigma_k.inverse(), data.vec_stack())?;
        let c = (nu_k - p as f64 - 1.0) / 2.0;
        for i in 0..data.n() {
            out[(i, k)] = c * data.logdets()[i] - 0.5 * traces[i] + norm;
        }
    }
    Ok(out)
}

/// Row-wise `log Σ_k exp(m_ik)`.
pub fn row_log_sum_exp(m: &DMatrix<f64>) -> Vec<f64> {
    let mut buf = vec![0.0; m.ncols()];
    (0..m.nrows())
        .map(|i| {
            for (k, b) in buf.iter_mut().enumerate() {
                *b = m[(i, k)];
            }
            log_sum_exp(&buf)
        })
        .collect()
}

fn softmax_log(eta: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(eta);
    eta.iter().map(|e| e - lse).collect()
}

/// Softmax gating probabilities for one covariate row; class K has zero
/// coefficients.
pub fn gating_probs(x_row: &[f64], beta: &DMatrix<f64>) -> Result<Vec<f64>> {
    if x_row.len() != beta.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "covariate row has {} entries, beta has {} rows",
            x_row.len(),
            beta.nrows()
        )));
    }
    let mut eta: Vec<f64> = (0..beta.ncols())
        .map(|k| x_row.iter().zip(beta.column(k).iter()).map(|(a, b)| a * b).sum())
        .collect();
    eta.push(0.0);
    Ok(softmax_log(&eta).into_iter().map(f64::exp).collect())
}

/// `n × K` matrix of `log π_ik(X_i; β)`.
pub fn gating_log_probs(x: &DMatrix<f64>, beta: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let km1 = beta.ncols();
    let eta = x * beta;
    let mut out = DMatrix::zeros(n, km1 + 1);
    let mut row = vec![0.0; km1 + 1];
    for i in 0..n {
        for k in 0..km1 {
            row[k] = eta[(i, k)];
        }
        row[km1] = 0.0;
        let lse = log_sum_exp(&row);
        for k in 0..=km1 {
            out[(i, k)] = row[k] - lse;
        }
    }
    out
}

pub fn loglik_mixture(data: &Dataset, params: &MixtureParams) -> Result<f64> {
    params.validate(data.p())?;
    Params::Mixture(params.clone()).loglik(data)
}

pub fn loglik_moe(data: &Dataset, params: &MoeParams) -> Result<f64> {
    data.require_covariates()?;
    params.validate(data.p())?;
    Params::Moe(params.clone()).loglik(data)
}

/// Number of free parameters. Each expert has `p(p+1)/2 + 1`; the gating
/// network adds `(K−1)q`; mixture weights live on the `(K−1)`-simplex.
pub fn model_dimension(k: usize, p: usize, q: usize, family: Family) -> usize {
    let expert = p * (p + 1) / 2 + 1;
    let weights = match family {
        Family::Moe => (k - 1) * q,
        Family::Mixture => k - 1,
    };
    k * expert + weights
}

/// Serializable form of [`Params`]: matrices row-major, labels one-based.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsRecord {
    pub family: Family,
    pub k: usize,
    pub p: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pi: Option<Vec<f64>>,
    /// `q` rows of `K−1` coefficients.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub beta: Option<Vec<Vec<f64>>>,
    pub nu: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub labels: Option<Vec<usize>>,
}

impl From<&Params> for ParamsRecord {
    fn from(params: &Params) -> Self {
        let sigma: Vec<Vec<f64>> = params.sigma().iter().map(|s| s.to_row_major()).collect();
        let p = params.sigma().first().map_or(0, |s| s.dim());
        let labels = params.labels().map(|l| l.iter().map(|z| z + 1).collect());
        match params {
            Params::Mixture(m) => ParamsRecord {
                family: Family::Mixture,
                k: m.k(),
                p,
                pi: Some(m.pi.clone()),
                beta: None,
                nu: m.nu.clone(),
                sigma,
                labels,
            },
            Params::Moe(m) => ParamsRecord {
                family: Family::Moe,
                k: m.k(),
                p,
                pi: None,
                beta: Some((0..m.q()).map(|j| m.beta.row(j).iter().copied().collect()).collect()),
                nu: m.nu.clone(),
                sigma,
                labels,
            },
        }
    }
}

impl TryFrom<&ParamsRecord> for Params {
    type Error = Error;

    fn try_from(r: &ParamsRecord) -> Result<Self> {
        let sigma = r
            .sigma
            .iter()
            .map(|s| SpdMatrix::from_row_slice(r.p, s))
            .collect::<Result<Vec<_>>>()?;
        let labels = match &r.labels {
            Some(l) => Some(
                l.iter()
                    .map(|z| {
                        if *z >= 1 && *z <= r.k {
                            Ok(z - 1)
                        } else {
                            Err(Error::Domain(format!("label {z} outside 1..={}", r.k)))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        let params = match r.family {
            Family::Mixture => Params::Mixture(MixtureParams {
                pi: r.pi.clone().ok_or_else(|| Error::MalformedDataset("mixture record without pi".into()))?,
                nu: r.nu.clone(),
                sigma,
                labels,
            }),
            Family::Moe => {
                let rows = r.beta.as_ref().ok_or_else(|| Error::MalformedDataset("moe record without beta".into()))?;
                let q = rows.len();
                let km1 = r.k.saturating_sub(1);
                if rows.iter().any(|row| row.len() != km1) {
                    return Err(Error::DimensionMismatch(format!("beta rows must have {km1} entries")));
                }
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                Params::Moe(MoeParams { beta: DMatrix::from_row_slice(q, km1, &flat), nu: r.nu.clone(), sigma, labels })
            }
        };
        params.validate(r.p)?;
        Ok(params)
    }
}

/// Row-major rendering of a matrix as nested rows.
pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let flat = row_major(m);
    flat.chunks(m.ncols().max(1)).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn spd(p: usize, v: &[f64]) -> SpdMatrix {
        SpdMatrix::from_row_slice(p, v).unwrap()
    }

    fn tiny_dataset() -> Dataset {
        Dataset::new(vec![
            spd(2, &[1.0, 0.2, 0.2, 0.8]),
            spd(2, &[3.0, -0.5, -0.5, 2.0]),
            spd(2, &[0.4, 0.1, 0.1, 0.3]),
        ])
        .unwrap()
    }

    #[test]
    fn scalar_density_is_gamma() {
        // p = 1: S ~ Gamma(shape ν/2, rate 1/(2σ²)).
        let (s, nu, s2) = (2.0f64, 4.0f64, 1.0f64);
        let shape = nu / 2.0;
        let rate = 1.0 / (2.0 * s2);
        let gamma_pdf = shape * rate.ln() + (shape - 1.0) * s.ln() - rate * s - crate::numcore::ln_gamma(shape);
        let got = log_wishart_density(&spd(1, &[s]), nu, &spd(1, &[s2])).unwrap();
        assert!((got - gamma_pdf).abs() < 1e-13);
    }

    #[test]
    fn density_integrates_to_one() {
        // Composite Simpson on a log-spaced grid over (0, 200), p = 1, ν = 5.
        let sigma = spd(1, &[1.0]);
        let f = |t: f64| {
            let s = t.exp();
            log_wishart_density(&spd(1, &[s]), 5.0, &sigma).unwrap().exp() * s
        };
        let (a, b) = ((1e-12f64).ln(), 200f64.ln());
        let m = 20_000;
        let h = (b - a) / m as f64;
        let mut acc = f(a) + f(b);
        for j in 1..m {
            acc += if j % 2 == 1 { 4.0 } else { 2.0 } * f(a + j as f64 * h);
        }
        let integral = acc * h / 3.0;
        assert!((integral - 1.0).abs() < 1e-6, "integral {integral}");
    }

    #[test]
    fn scaling_identity() {
        // S → cS, Σ → cΣ shifts the log-density by −p(p+1)/2 · log c.
        let c = 3.7;
        for p in [1usize, 2] {
            let (s, sig) = if p == 1 {
                (spd(1, &[2.3]), spd(1, &[0.6]))
            } else {
                (spd(2, &[2.0, 0.3, 0.3, 1.0]), spd(2, &[0.5, 0.2, 0.2, 0.7]))
            };
            let base = log_wishart_density(&s, 6.0, &sig).unwrap();
            let sc = SpdMatrix::new(s.entries() * c).unwrap();
            let sigc = SpdMatrix::new(sig.entries() * c).unwrap();
            let scaled = log_wishart_density(&sc, 6.0, &sigc).unwrap();
            let expect = -((p * (p + 1)) as f64) / 2.0 * c.ln();
            assert!((scaled - base - expect).abs() < 1e-12, "p={p}");
        }
    }

    #[test]
    fn density_domain() {
        let s = spd(2, &[1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(log_wishart_density(&s, 1.0, &s), Err(Error::Domain(_))));
        assert!(log_wishart_density(&s, 1.0 + 1e-6, &s).unwrap().is_finite());
    }

    #[test]
    fn kernel_matches_pointwise_density() {
        let data = tiny_dataset();
        let nu = [4.0, 7.5];
        let sigma = [spd(2, &[0.5, 0.2, 0.2, 0.7]), spd(2, &[2.0, 0.6, 0.6, 1.5])];
        let m = component_log_densities(&data, &nu, &sigma).unwrap();
        for i in 0..3 {
            for k in 0..2 {
                let d = log_wishart_density(&data.matrices()[i], nu[k], &sigma[k]).unwrap();
                assert!((m[(i, k)] - d).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gating_examples() {
        let zero = DMatrix::zeros(2, 3);
        let g = gating_probs(&[1.0, 0.5], &zero).unwrap();
        assert!(g.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let b = DMatrix::from_element(1, 1, 3f64.ln());
        let g = gating_probs(&[1.0], &b).unwrap();
        assert!((g[0] - 0.75).abs() < 1e-15 && (g[1] - 0.25).abs() < 1e-15);
        // Shifting all linear predictors by a constant (via the intercept
        // column, including the baseline's implicit zero) changes nothing.
        let b = DMatrix::from_row_slice(2, 2, &[0.3, -1.0, 0.7, 0.2]);
        let g1 = gating_probs(&[1.0, 2.0], &b).unwrap();
        let shifted = DMatrix::from_row_slice(2, 2, &[0.3 + 5.0, -1.0 + 5.0, 0.7, 0.2]);
        let mut eta: Vec<f64> = (0..2).map(|k| shifted[(0, k)] + 2.0 * shifted[(1, k)]).collect();
        eta.push(5.0);
        let g2: Vec<f64> = softmax_log(&eta).into_iter().map(f64::exp).collect();
        for k in 0..3 {
            assert!((g1[k] - g2[k]).abs() < 1e-14);
        }
        assert!((g1.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn brute_force_loglik(data: &Dataset, weights: &dyn Fn(usize, usize) -> f64, nu: &[f64], sigma: &[SpdMatrix]) -> f64 {
        let mut total = 0.0;
        for i in 0..data.n() {
            let mut acc = 0.0;
            for k in 0..nu.len() {
                acc += weights(i, k) * log_wishart_density(&data.matrices()[i], nu[k], &sigma[k]).unwrap().exp();
            }
            total += acc.ln();
        }
        total
    }

    #[test]
    fn mixture_loglik_examples() {
        let data = tiny_dataset();
        let s1 = spd(2, &[0.5, 0.2, 0.2, 0.7]);
        let one = MixtureParams { pi: vec![1.0], nu: vec![5.0], sigma: vec![s1.clone()], labels: None };
        let direct: f64 = data.matrices().iter().map(|s| log_wishart_density(s, 5.0, &s1).unwrap()).sum();
        assert!((loglik_mixture(&data, &one).unwrap() - direct).abs() < 1e-12);

        let twin = MixtureParams { pi: vec![0.3, 0.7], nu: vec![5.0, 5.0], sigma: vec![s1.clone(), s1.clone()], labels: None };
        assert!((loglik_mixture(&data, &twin).unwrap() - direct).abs() < 1e-12);

        let s2 = spd(2, &[2.0, 0.6, 0.6, 1.5]);
        let two = MixtureParams { pi: vec![0.4, 0.6], nu: vec![3.5, 9.0], sigma: vec![s1, s2], labels: None };
        let bf = brute_force_loglik(&data, &|_, k| two.pi[k], &two.nu, &two.sigma);
        assert!((loglik_mixture(&data, &two).unwrap() - bf).abs() < 1e-11);

        // label permutation
        let perm = MixtureParams {
            pi: vec![0.6, 0.4],
            nu: vec![9.0, 3.5],
            sigma: vec![two.sigma[1].clone(), two.sigma[0].clone()],
            labels: None,
        };
        assert!((loglik_mixture(&data, &perm).unwrap() - loglik_mixture(&data, &two).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn moe_loglik_examples() {
        let base = tiny_dataset();
        assert!(matches!(
            loglik_moe(
                &base,
                &MoeParams { beta: DMatrix::zeros(1, 1), nu: vec![4.0, 5.0], sigma: vec![SpdMatrix::identity(2); 2], labels: None }
            ),
            Err(Error::MissingCovariates)
        ));
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.3, 1.0, -1.2, 1.0, 0.8]);
        let data = base.clone().with_covariates(x.clone(), None).unwrap();
        let sigma = vec![spd(2, &[0.5, 0.2, 0.2, 0.7]), spd(2, &[2.0, 0.6, 0.6, 1.5])];
        let zero = MoeParams { beta: DMatrix::zeros(2, 1), nu: vec![4.0, 6.0], sigma: sigma.clone(), labels: None };
        let mix = MixtureParams { pi: vec![0.5, 0.5], nu: vec![4.0, 6.0], sigma: sigma.clone(), labels: None };
        assert!((loglik_moe(&data, &zero).unwrap() - loglik_mixture(&base, &mix).unwrap()).abs() < 1e-12);

        let beta = DMatrix::from_row_slice(2, 1, &[0.4, -1.1]);
        let moe = MoeParams { beta: beta.clone(), nu: vec![4.0, 6.0], sigma: sigma.clone(), labels: None };
        let w = |i: usize, k: usize| gating_probs(&[x[(i, 0)], x[(i, 1)]], &beta).unwrap()[k];
        let bf = brute_force_loglik(&data, &w, &moe.nu, &moe.sigma);
        assert!((loglik_moe(&data, &moe).unwrap() - bf).abs() < 1e-11);
    }

    #[test]
    fn intercept_moe_matches_mixture_at_softmax_weights() {
        let base = tiny_dataset();
        let data = base.clone().with_intercept_only();
        let pi = [0.2f64, 0.5, 0.3];
        // β_k = log(π_k / π_K) reproduces π through the softmax.
        let beta = DMatrix::from_row_slice(1, 2, &[(pi[0] / pi[2]).ln(), (pi[1] / pi[2]).ln()]);
        let sigma = vec![spd(2, &[0.5, 0.2, 0.2, 0.7]), spd(2, &[2.0, 0.6, 0.6, 1.5]), spd(2, &[4.0, 0.2, 0.2, 3.0])];
        let nu = vec![8.0, 12.0, 3.0];
        let moe = MoeParams { beta, nu: nu.clone(), sigma: sigma.clone(), labels: None };
        let mix = MixtureParams { pi: pi.to_vec(), nu, sigma, labels: None };
        assert!((loglik_moe(&data, &moe).unwrap() - loglik_mixture(&base, &mix).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn dimension_examples() {
        assert_eq!(model_dimension(3, 2, 3, Family::Moe), 18);
        assert_eq!(model_dimension(1, 1, 5, Family::Moe), 2);
        assert_eq!(model_dimension(3, 2, 0, Family::Mixture), 14);
    }

    #[test]
    fn covariate_validation() {
        let base = tiny_dataset();
        let no_intercept = DMatrix::from_row_slice(3, 1, &[0.5, 1.0, 1.0]);
        assert!(base.clone().with_covariates(no_intercept, None).is_err());
        let collinear = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(base.clone().with_covariates(collinear, None), Err(Error::RankDeficientDesign)));
        assert_eq!(base.with_intercept_only().q(), 1);
    }

    #[test]
    fn record_round_trip() {
        let p = Params::Moe(MoeParams {
            beta: DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.3, 0.4]),
            nu: vec![3.0, 4.0, 5.0],
            sigma: vec![SpdMatrix::identity(2); 3],
            labels: Some(vec![0, 2, 1]),
        });
        let rec = ParamsRecord::from(&p);
        assert_eq!(rec.labels.as_deref(), Some(&[1, 3, 2][..]));
        let json = serde_json::to_string(&rec).unwrap();
        let back = Params::try_from(&serde_json::from_str::<ParamsRecord>(&json).unwrap()).unwrap();
        let Params::Moe(m) = back else { panic!() };
        assert_eq!(m.beta[(1, 0)], 0.3);
        assert_eq!(m.labels, Some(vec![0, 2, 1]));
        let _ = PI;
    }
}
