//! One entry point for the four estimation methods and the report they share.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{e_step, run_em, EmConfig, EmReport, Responsibilities};
use crate::error::{Error, Result};
use crate::mcmc::{relabel_chain, relabel_fraction, run_mixture_sampler, run_moe_sampler, Chain, PosteriorSummary, SamplerConfig};
use crate::model::{model_dimension, Dataset, Family, Hyperparams, Params, ParamsRecord};
use crate::sampling::RngState;
use crate::selection::{bic, elpd_loo, icl, select_k, Criterion, CriterionReport, KRow, LooMethod, LooResult, MIN_LOO_DRAWS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Bayes,
    Em,
    BayesMoe,
    EmMoe,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Bayes, Method::Em, Method::BayesMoe, Method::EmMoe];

    pub fn family(self) -> Family {
        match self {
            Method::Bayes | Method::Em => Family::Mixture,
            Method::BayesMoe | Method::EmMoe => Family::Moe,
        }
    }

    pub fn is_bayes(self) -> bool {
        matches!(self, Method::Bayes | Method::BayesMoe)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Bayes => "bayes",
            Method::Em => "em",
            Method::BayesMoe => "bayes-moe",
            Method::EmMoe => "em-moe",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (expected bayes, em, bayes-moe or em-moe)")))
    }
}

#[derive(Debug, Clone)]
pub struct FitSettings {
    pub sampler: SamplerConfig,
    pub em: EmConfig,
    /// `None` uses [`Hyperparams::default_for`].
    pub hyper: Option<Hyperparams>,
    pub loo: LooMethod,
    pub compute_elpd: bool,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::new(20_000, 5_000, 1, 0),
            em: EmConfig::default(),
            hyper: None,
            loo: LooMethod::Psis,
            compute_elpd: true,
        }
    }
}

/// A fitted model with its plug-in estimate and criteria.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub method: Method,
    pub k: usize,
    /// Maximum-likelihood estimate, or posterior mean after relabeling.
    pub estimate: Params,
    pub loglik: f64,
    pub resp: Responsibilities,
    pub bic: f64,
    pub icl: f64,
    pub em: Option<EmReport>,
    pub chain: Option<Chain>,
    pub loo: Option<LooResult>,
    pub intercept_inserted: bool,
}

/// The dataset a method actually sees: MoE methods get an intercept column
/// when there are no covariates; mixture methods ignore covariates.
pub fn prepare_data(data: &Dataset, method: Method) -> (Cow<'_, Dataset>, bool) {
    match method.family() {
        Family::Moe if data.covariates().is_none() => (Cow::Owned(data.clone().with_intercept_only()), true),
        _ => (Cow::Borrowed(data), false),
    }
}

pub fn fit(data: &Dataset, method: Method, k: usize, settings: &FitSettings, rng: &RngState) -> Result<Fitted> {
    let (data, intercept_inserted) = prepare_data(data, method);
    if intercept_inserted {
        log::warn!("{method} on a dataset without covariates: using an intercept-only design");
    }
    let data = data.as_ref();
    let family = method.family();
    let q = if family == Family::Moe { data.q() } else { 0 };
    let (estimate, em, chain, loo) = if method.is_bayes() {
        let hyper = match &settings.hyper {
            Some(h) => h.clone(),
            None => Hyperparams::default_for(data.p(), k),
        };
        let mut stream = rng.clone();
        let raw = match family {
            Family::Mixture => run_mixture_sampler(data, &hyper, k, &settings.sampler, &mut stream)?,
            Family::Moe => run_moe_sampler(data, &hyper, k, &settings.sampler, &mut stream)?,
        };
        let chain = relabel_chain(raw);
        let estimate = chain.posterior_mean()?;
        let loo = if settings.compute_elpd && chain.len() >= MIN_LOO_DRAWS {
            Some(elpd_loo(data, &chain, settings.loo)?)
        } else {
            None
        };
        (estimate, None, Some(chain), loo)
    } else {
        let report = run_em(data, k, family, &settings.em, rng)?;
        (report.best.params.clone(), Some(report), None, None)
    };
    let (resp, loglik) = e_step(data, &estimate)?;
    let b = bic(loglik, k, data.p(), q, family, data.n() as f64);
    let estimate = with_labels(estimate, resp.map_labels());
    Ok(Fitted { method, k, icl: icl(b, &resp), bic: b, estimate, loglik, resp, em, chain, loo, intercept_inserted })
}

fn with_labels(params: Params, labels: Vec<usize>) -> Params {
    match params {
        Params::Mixture(mut m) => {
            m.labels = Some(labels);
            Params::Mixture(m)
        }
        Params::Moe(mut m) => {
            m.labels = Some(labels);
            Params::Moe(m)
        }
    }
}

/// Fit every K in `ks` in parallel (stream `rng.derive(K)` for each) and
/// tabulate the requested criteria. A K that fails becomes a row with its
/// error message and no values.
pub fn criterion_sweep(
    data: &Dataset,
    method: Method,
    ks: std::ops::RangeInclusive<usize>,
    criteria: &[Criterion],
    settings: &FitSettings,
    rng: &RngState,
) -> Result<(CriterionReport, Vec<Option<Fitted>>)> {
    if ks.is_empty() || *ks.start() == 0 {
        return Err(Error::Config("K range must be non-empty and start at 1 or more".into()));
    }
    if criteria.contains(&Criterion::Elpd) && !method.is_bayes() {
        return Err(Error::Config(format!("elpd needs a Bayesian method, got {method}")));
    }
    let mut s = settings.clone();
    s.compute_elpd = criteria.contains(&Criterion::Elpd);
    let fits: Vec<(usize, Result<Fitted>)> =
        ks.into_par_iter().map(|k| (k, fit(data, method, k, &s, &rng.derive(k as u64)))).collect();
    let mut rows = Vec::with_capacity(fits.len());
    let mut kept = Vec::with_capacity(fits.len());
    for (k, f) in fits {
        match f {
            Ok(f) => {
                let want = |c: Criterion, v: f64| criteria.contains(&c).then_some(v);
                rows.push(KRow {
                    k,
                    loglik: Some(f.loglik),
                    bic: want(Criterion::Bic, f.bic),
                    icl: want(Criterion::Icl, f.icl),
                    elpd: f.loo.as_ref().map(|l| l.elpd),
                    elpd_se: f.loo.as_ref().map(|l| l.se),
                    error: None,
                });
                kept.push(Some(f));
            }
            Err(e) => {
                log::warn!("{method} with K = {k} failed: {e}");
                rows.push(KRow { k, loglik: None, bic: None, icl: None, elpd: None, elpd_se: None, error: Some(e.to_string()) });
                kept.push(None);
            }
        }
    }
    Ok((select_k(rows, criteria)?, kept))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmSection {
    pub restart: usize,
    pub converged: bool,
    pub iterations: usize,
    pub loglik_trace: Vec<f64>,
    pub nu_boundary: bool,
    pub beta_unconverged: bool,
    pub restart_logliks: Vec<Option<f64>>,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McmcSection {
    pub config: SamplerConfig,
    pub relabel_fraction: f64,
    pub nu_scales: Vec<f64>,
    pub beta_scales: Vec<f64>,
    pub summary: PosteriorSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LooSummary {
    pub method: LooMethod,
    pub elpd: f64,
    pub se: f64,
    pub khat_above_threshold: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub method: Method,
    pub family: Family,
    pub k: usize,
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub dimension: usize,
    pub params: ParamsRecord,
    pub loglik: f64,
    pub bic: f64,
    pub icl: f64,
    pub intercept_inserted: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub elpd: Option<LooSummary>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub em: Option<EmSection>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mcmc: Option<McmcSection>,
}

impl Fitted {
    pub fn report(&self, data: &Dataset) -> Result<FitReport> {
        let family = self.method.family();
        let q = match &self.estimate {
            Params::Moe(m) => m.q(),
            Params::Mixture(_) => 0,
        };
        let em = self.em.as_ref().map(|r| EmSection {
            restart: r.restart,
            converged: r.best.converged,
            iterations: r.best.iterations,
            loglik_trace: r.best.trace.clone(),
            nu_boundary: r.best.nu_boundary,
            beta_unconverged: r.best.beta_unconverged,
            restart_logliks: r.restart_logliks.clone(),
            failures: r.failures.clone(),
        });
        let mcmc = match &self.chain {
            Some(c) => Some(McmcSection {
                config: c.config.clone(),
                relabel_fraction: relabel_fraction(c),
                nu_scales: c.nu_scales.clone(),
                beta_scales: c.beta_scales.clone(),
                summary: c.summary()?,
            }),
            None => None,
        };
        Ok(FitReport {
            method: self.method,
            family,
            k: self.k,
            n: data.n(),
            p: data.p(),
            q,
            dimension: model_dimension(self.k, data.p(), q, family),
            params: ParamsRecord::from(&self.estimate),
            loglik: self.loglik,
            bic: self.bic,
            icl: self.icl,
            intercept_inserted: self.intercept_inserted,
            elpd: self.loo.as_ref().map(|l| LooSummary {
                method: l.method,
                elpd: l.elpd,
                se: l.se,
                khat_above_threshold: l.diagnostics.as_ref().map(|d| d.n_bad),
            }),
            em,
            mcmc,
        })
    }
}
