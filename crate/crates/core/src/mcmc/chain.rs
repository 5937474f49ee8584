use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::ess::ess;
use crate::error::{Error, Result};
use crate::matching::{frobenius_sq, hungarian, invert};
use crate::model::{row_log_sum_exp, Dataset, Family, MixtureParams, MoeParams, Params};
use crate::numcore::SpdMatrix;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub iterations: usize,
    pub burnin: usize,
    pub thin: usize,
    pub seed: u64,
    /// Store labels on every `label_stride`-th kept draw (0 disables).
    pub label_stride: usize,
    /// Collapsed label update for the mixture sampler; `false` uses the
    /// explicit-weights form.
    pub collapsed: bool,
    /// Propose all gating blocks jointly instead of block by block.
    pub joint_beta: bool,
    pub adapt: bool,
    /// Hold every ν_k at its initial value.
    pub fix_nu: bool,
}

impl SamplerConfig {
    pub fn new(iterations: usize, burnin: usize, thin: usize, seed: u64) -> Self {
        Self {
            iterations,
            burnin,
            thin,
            seed,
            label_stride: 10,
            collapsed: true,
            joint_beta: false,
            adapt: true,
            fix_nu: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 {
            return Err(Error::Config("thin must be positive".into()));
        }
        if self.burnin >= self.iterations {
            return Err(Error::Config(format!(
                "burn-in {} must be smaller than the iteration count {}",
                self.burnin, self.iterations
            )));
        }
        Ok(())
    }

    pub fn kept(&self) -> usize {
        (self.iterations - self.burnin) / self.thin
    }
}

/// One stored posterior draw.
#[derive(Debug, Clone)]
pub struct Draw {
    pub pi: Option<Vec<f64>>,
    pub beta: Option<DMatrix<f64>>,
    pub nu: Vec<f64>,
    pub sigma: Vec<SpdMatrix>,
    pub labels: Option<Vec<usize>>,
    pub loglik: f64,
}

impl Draw {
    pub fn to_params(&self) -> Params {
        match (&self.pi, &self.beta) {
            (Some(pi), _) => Params::Mixture(MixtureParams {
                pi: pi.clone(),
                nu: self.nu.clone(),
                sigma: self.sigma.clone(),
                labels: self.labels.clone(),
            }),
            (None, Some(beta)) => Params::Moe(MoeParams {
                beta: beta.clone(),
                nu: self.nu.clone(),
                sigma: self.sigma.clone(),
                labels: self.labels.clone(),
            }),
            (None, None) => unreachable!("a draw carries either weights or gating coefficients"),
        }
    }

    /// Reorder components so that new component `k` is old component `perm[k]`.
    pub fn permute(&mut self, perm: &[usize]) {
        let k = perm.len();
        if let Some(pi) = &mut self.pi {
            *pi = perm.iter().map(|&j| pi[j]).collect();
        }
        self.nu = perm.iter().map(|&j| self.nu[j]).collect();
        self.sigma = perm.iter().map(|&j| self.sigma[j].clone()).collect();
        if let Some(beta) = &mut self.beta {
            *beta = rereference_beta(beta, perm);
        }
        if let Some(labels) = &mut self.labels {
            let inv = invert(perm);
            for z in labels.iter_mut() {
                *z = inv[*z];
            }
        }
        debug_assert_eq!(self.nu.len(), k);
    }
}

/// Permute gating columns and re-reference to the new baseline:
/// `β̃_k = β_{σ(k)} − β_{σ(K)}`.
pub fn rereference_beta(beta: &DMatrix<f64>, perm: &[usize]) -> DMatrix<f64> {
    let (q, km1) = beta.shape();
    let col = |j: usize| {
        if j == km1 {
            nalgebra::DVector::zeros(q)
        } else {
            beta.column(j).into_owned()
        }
    };
    let base = col(perm[km1]);
    let mut out = DMatrix::zeros(q, km1);
    for k in 0..km1 {
        out.set_column(k, &(col(perm[k]) - &base));
    }
    out
}

/// Stored MCMC output.
#[derive(Debug, Clone)]
pub struct Chain {
    pub family: Family,
    pub k: usize,
    pub p: usize,
    pub q: usize,
    pub config: SamplerConfig,
    pub draws: Vec<Draw>,
    /// Observed-data log-likelihood after every iteration, burn-in included.
    pub loglik_trace: Vec<f64>,
    /// Post-burn-in acceptance counts per cluster and per gating block.
    pub accept_nu: Vec<usize>,
    pub accept_beta: Vec<usize>,
    pub attempts: usize,
    /// Proposal scales in effect after burn-in.
    pub nu_scales: Vec<f64>,
    pub beta_scales: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EssReport {
    pub entries: Vec<(String, f64)>,
}

impl EssReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub family: Family,
    pub k: usize,
    pub draws: usize,
    pub parameters: Vec<(String, Interval)>,
    pub acceptance_nu: Vec<f64>,
    pub acceptance_beta: Vec<f64>,
    pub ess: Vec<(String, f64)>,
}

fn quantile(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn interval(values: &[f64]) -> Interval {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Interval { mean: values.iter().sum::<f64>() / values.len() as f64, lower: quantile(&s, 0.025), upper: quantile(&s, 0.975) }
}

impl Chain {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    fn rates(&self, counts: &[usize]) -> Vec<f64> {
        counts.iter().map(|&c| if self.attempts == 0 { 0.0 } else { c as f64 / self.attempts as f64 }).collect()
    }

    pub fn acceptance_nu(&self) -> Vec<f64> {
        self.rates(&self.accept_nu)
    }

    pub fn acceptance_beta(&self) -> Vec<f64> {
        self.rates(&self.accept_beta)
    }

    /// Column names in export order.
    pub fn column_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.family == Family::Mixture {
            names.extend((1..=self.k).map(|k| format!("pi_{k}")));
        }
        names.extend((1..=self.k).map(|k| format!("nu_{k}")));
        for k in 1..=self.k {
            for i in 1..=self.p {
                for j in 1..=self.p {
                    names.push(format!("sigma_{k}_{i}_{j}"));
                }
            }
        }
        if self.family == Family::Moe {
            for j in 1..=self.q {
                for k in 1..self.k {
                    names.push(format!("beta_{j}_{k}"));
                }
            }
        }
        names.push("loglik".into());
        names
    }

    fn row(&self, d: &Draw) -> Vec<f64> {
        let mut row = Vec::new();
        if let Some(pi) = &d.pi {
            row.extend_from_slice(pi);
        }
        row.extend_from_slice(&d.nu);
        for s in &d.sigma {
            row.extend(s.to_row_major());
        }
        if let Some(beta) = &d.beta {
            for j in 0..beta.nrows() {
                row.extend(beta.row(j).iter());
            }
        }
        row.push(d.loglik);
        row
    }

    /// Named per-parameter traces over the kept draws.
    pub fn named_traces(&self) -> Vec<(String, Vec<f64>)> {
        let names = self.column_names();
        let rows: Vec<Vec<f64>> = self.draws.iter().map(|d| self.row(d)).collect();
        names
            .into_iter()
            .enumerate()
            .map(|(c, name)| (name, rows.iter().map(|r| r[c]).collect()))
            .collect()
    }

    pub fn trace(&self, name: &str) -> Option<Vec<f64>> {
        self.named_traces().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn ess_report(&self) -> Result<EssReport> {
        ess_for_columns(&self.named_traces())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(self.column_names())?;
        for d in &self.draws {
            out.write_record(self.row(d).iter().map(|v| format!("{v:.17e}")))?;
        }
        out.flush()?;
        Ok(())
    }

    /// Posterior means: `π` renormalized, element-wise `Σ`, and `ν`, `β`.
    pub fn posterior_mean(&self) -> Result<Params> {
        let t = self.draws.len();
        if t == 0 {
            return Err(Error::ChainTooShort { draws: 0, min: 1 });
        }
        let tf = t as f64;
        let mut nu = vec![0.0; self.k];
        let mut sigma = vec![DMatrix::zeros(self.p, self.p); self.k];
        for d in &self.draws {
            for k in 0..self.k {
                nu[k] += d.nu[k] / tf;
                sigma[k] += d.sigma[k].entries() / tf;
            }
        }
        let sigma = sigma.into_iter().map(SpdMatrix::new).collect::<Result<Vec<_>>>()?;
        Ok(match self.family {
            Family::Mixture => {
                let mut pi = vec![0.0; self.k];
                for d in &self.draws {
                    for (acc, v) in pi.iter_mut().zip(d.pi.as_ref().expect("mixture draw")) {
                        *acc += v / tf;
                    }
                }
                let s: f64 = pi.iter().sum();
                pi.iter_mut().for_each(|v| *v /= s);
                Params::Mixture(MixtureParams { pi, nu, sigma, labels: None })
            }
            Family::Moe => {
                let mut beta = DMatrix::zeros(self.q, self.k - 1);
                for d in &self.draws {
                    beta += d.beta.as_ref().expect("moe draw") / tf;
                }
                Params::Moe(MoeParams { beta, nu, sigma, labels: None })
            }
        })
    }

    pub fn summary(&self) -> Result<PosteriorSummary> {
        let traces = self.named_traces();
        let parameters = traces.iter().filter(|(n, _)| n != "loglik").map(|(n, t)| (n.clone(), interval(t))).collect();
        let ess = if self.draws.len() >= super::ess::MIN_TRACE { ess_for_columns(&traces)?.entries } else { Vec::new() };
        Ok(PosteriorSummary {
            family: self.family,
            k: self.k,
            draws: self.draws.len(),
            parameters,
            acceptance_nu: self.acceptance_nu(),
            acceptance_beta: self.acceptance_beta(),
            ess,
        })
    }

    /// `T × n` matrix of `log p(S_i | Θ^(t))` under the marginal mixture or
    /// MoE density.
    pub fn pointwise_loglik(&self, data: &Dataset) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.draws.len(), data.n());
        for (t, d) in self.draws.iter().enumerate() {
            let lw = d.to_params().log_weight_matrix(data)?;
            for (i, v) in row_log_sum_exp(&lw).into_iter().enumerate() {
                out[(t, i)] = v;
            }
        }
        Ok(out)
    }

    /// Every `step`-th kept draw.
    pub fn thinned(&self, step: usize) -> Chain {
        let mut c = self.clone();
        c.draws = self.draws.iter().step_by(step.max(1)).cloned().collect();
        c
    }
}

/// ESS for each named column.
pub fn ess_for_columns(traces: &[(String, Vec<f64>)]) -> Result<EssReport> {
    Ok(EssReport {
        entries: traces.iter().map(|(n, t)| Ok((n.clone(), ess(t)?))).collect::<Result<Vec<_>>>()?,
    })
}

/// Align component labels across draws to the first kept draw by optimal
/// Frobenius matching of the scale matrices.
pub fn relabel_chain(mut chain: Chain) -> Chain {
    if chain.k <= 1 || chain.draws.is_empty() {
        return chain;
    }
    let reference: Vec<DMatrix<f64>> = chain.draws[0].sigma.iter().map(|s| s.entries().clone()).collect();
    let k = chain.k;
    for d in chain.draws.iter_mut() {
        let cost = DMatrix::from_fn(k, k, |r, e| frobenius_sq(&reference[r], d.sigma[e].entries()).sqrt());
        let perm = hungarian(&cost);
        if perm.iter().enumerate().any(|(i, &j)| i != j) {
            d.permute(&perm);
        }
    }
    chain
}

/// Fraction of draws whose alignment is not the identity.
pub fn relabel_fraction(chain: &Chain) -> f64 {
    if chain.k <= 1 || chain.draws.is_empty() {
        return 0.0;
    }
    let reference: Vec<DMatrix<f64>> = chain.draws[0].sigma.iter().map(|s| s.entries().clone()).collect();
    let k = chain.k;
    let moved = chain
        .draws
        .iter()
        .filter(|d| {
            let cost = DMatrix::from_fn(k, k, |r, e| frobenius_sq(&reference[r], d.sigma[e].entries()).sqrt());
            hungarian(&cost).iter().enumerate().any(|(i, &j)| i != j)
        })
        .count();
    moved as f64 / chain.draws.len() as f64
}
