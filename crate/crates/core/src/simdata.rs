//! Built-in simulation designs, data generation, permutation-matched error
//! metrics and a replicate study runner.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{fit, FitSettings, Method};
use crate::matching::{frobenius_sq, match_scales};
use crate::mcmc::rereference_beta;
use crate::model::{gating_probs, Dataset, Family, MixtureParams, MoeParams, Params};
use crate::numcore::SpdMatrix;
use crate::sampling::{draw_categorical_from_logweights, draw_std_normal, draw_wishart, RngState};

/// Seed that fixes the gating coefficients of the MoE designs.
pub const DESIGN_SEED: u64 = 20_240_601;
pub const DESIGN_NAMES: [&str; 4] = ["mix-p2", "mix-p8", "moe-p2", "moe-p8"];

#[derive(Debug, Clone)]
pub struct SimDesign {
    pub name: String,
    pub family: Family,
    pub n: usize,
    pub p: usize,
    pub k: usize,
    pub q: usize,
    pub truth: Params,
    pub seed: u64,
}

impl SimDesign {
    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }
}

fn ar_scale(p: usize, rho: f64) -> SpdMatrix {
    SpdMatrix::new(DMatrix::from_fn(p, p, |i, j| rho.powi((i as i32 - j as i32).abs()))).expect("AR(1) matrix is SPD")
}

fn experts(p: usize) -> (Vec<f64>, Vec<SpdMatrix>) {
    if p == 2 {
        (
            vec![8.0, 12.0, 3.0],
            vec![
                SpdMatrix::from_row_slice(2, &[0.5, 0.2, 0.2, 0.7]).expect("SPD"),
                SpdMatrix::from_row_slice(2, &[2.0, 0.6, 0.6, 1.5]).expect("SPD"),
                SpdMatrix::from_row_slice(2, &[4.0, 0.2, 0.2, 3.0]).expect("SPD"),
            ],
        )
    } else {
        (vec![9.0, 20.0, 14.0], [0.5, 0.2, 0.8].iter().map(|&r| ar_scale(p, r)).collect())
    }
}

/// The gating coefficients shared by every MoE replicate: `q × (K−1)`
/// entries from U(−2, 2) under [`DESIGN_SEED`].
pub fn design_beta(q: usize, k: usize) -> DMatrix<f64> {
    let mut rng = RngState::new(DESIGN_SEED);
    DMatrix::from_fn(q, k - 1, |_, _| 0.0).map(|_| -2.0 + 4.0 * rng.uniform())
}

pub fn builtin_design(name: &str) -> Result<SimDesign> {
    let (family, p) = match name {
        "mix-p2" => (Family::Mixture, 2),
        "mix-p8" => (Family::Mixture, 8),
        "moe-p2" => (Family::Moe, 2),
        "moe-p8" => (Family::Moe, 8),
        other => return Err(Error::UnknownDesign(other.to_string())),
    };
    let (nu, sigma) = experts(p);
    let k = 3;
    let (q, truth) = match family {
        Family::Mixture => (0, Params::Mixture(MixtureParams { pi: vec![0.35, 0.40, 0.25], nu, sigma, labels: None })),
        Family::Moe => (3, Params::Moe(MoeParams { beta: design_beta(3, k), nu, sigma, labels: None })),
    };
    Ok(SimDesign { name: name.to_string(), family, n: 500, p, k, q, truth, seed: DESIGN_SEED })
}

/// Draw a dataset and its true zero-based labels. MoE designs get an
/// intercept plus `q − 1` standard normal covariates.
pub fn generate(design: &SimDesign, rng: &mut RngState) -> Result<(Dataset, Vec<usize>)> {
    let n = design.n;
    let (x, probs): (Option<DMatrix<f64>>, Vec<Vec<f64>>) = match &design.truth {
        Params::Mixture(m) => (None, vec![m.pi.clone(); n]),
        Params::Moe(m) => {
            let x = DMatrix::from_fn(n, design.q, |_, j| if j == 0 { 1.0 } else { f64::NAN });
            let mut x = x;
            for i in 0..n {
                for j in 1..design.q {
                    x[(i, j)] = draw_std_normal(rng);
                }
            }
            let probs = (0..n)
                .map(|i| gating_probs(&x.row(i).iter().copied().collect::<Vec<_>>(), &m.beta))
                .collect::<Result<Vec<_>>>()?;
            (Some(x), probs)
        }
    };
    let mut labels = Vec::with_capacity(n);
    let mut mats = Vec::with_capacity(n);
    for pr in &probs {
        let logw: Vec<f64> = pr.iter().map(|v| v.ln()).collect();
        let z = draw_categorical_from_logweights(rng, &logw)?;
        mats.push(draw_wishart(rng, design.truth.nu()[z], &design.truth.sigma()[z])?);
        labels.push(z);
    }
    let mut data = Dataset::new(mats)?;
    if let Some(x) = x {
        let names = std::iter::once("intercept".to_string()).chain((1..design.q).map(|j| format!("x{j}"))).collect();
        data = data.with_covariates(x, Some(names))?;
    }
    Ok((data, labels))
}

/// Per-metric errors after optimal component matching.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub pi: Option<f64>,
    pub nu: f64,
    pub sigma: f64,
    pub beta: Option<f64>,
    /// `perm[k]` is the estimated component matched to true component `k`.
    pub perm: Vec<usize>,
}

fn implied_weights(params: &Params) -> Option<Vec<f64>> {
    match params {
        Params::Mixture(m) => Some(m.pi.clone()),
        Params::Moe(m) if m.q() == 1 => gating_probs(&[1.0], &m.beta).ok(),
        Params::Moe(_) => None,
    }
}

/// `(1/K)‖π̂−π‖₁`, `(1/K)‖ν̂−ν‖₁`, `(1/K)Σ‖Σ̂_k−Σ_k‖²_F` and, for two MoE
/// parameter sets, `(1/K)Σ‖β̂_k−β_k‖²` with β re-referenced to the matched
/// baseline.
pub fn eval_errors(estimate: &Params, truth: &Params) -> Result<ErrorRecord> {
    let k = truth.k();
    if estimate.k() != k {
        return Err(Error::DimensionMismatch(format!("estimate has K = {}, truth has K = {k}", estimate.k())));
    }
    let p = truth.sigma()[0].dim();
    if estimate.sigma()[0].dim() != p {
        return Err(Error::DimensionMismatch("estimate and truth differ in p".into()));
    }
    let perm = match_scales(estimate.sigma(), truth.sigma());
    let kf = k as f64;
    let nu = (0..k).map(|c| (estimate.nu()[perm[c]] - truth.nu()[c]).abs()).sum::<f64>() / kf;
    let sigma = (0..k).map(|c| frobenius_sq(estimate.sigma()[perm[c]].entries(), truth.sigma()[c].entries())).sum::<f64>() / kf;
    let pi = match (implied_weights(estimate), truth) {
        (Some(w), Params::Mixture(t)) => Some((0..k).map(|c| (w[perm[c]] - t.pi[c]).abs()).sum::<f64>() / kf),
        _ => None,
    };
    let beta = match (estimate, truth) {
        (Params::Moe(e), Params::Moe(t)) => {
            if e.q() != t.q() {
                return Err(Error::DimensionMismatch(format!("beta has {} rows, truth has {}", e.q(), t.q())));
            }
            let aligned = rereference_beta(&e.beta, &perm);
            let mut total = (aligned - &t.beta).norm_squared();
            // The baseline columns are both zero after re-referencing.
            total += 0.0;
            Some(total / kf)
        }
        _ => None,
    };
    Ok(ErrorRecord { pi, nu, sigma, beta, perm })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyRow {
    pub design: String,
    pub rep: usize,
    pub method: String,
    pub metric: String,
    pub value: f64,
    pub failed: bool,
}

/// Generate `reps` datasets and fit each method on each, in parallel over
/// replicates. Failures are recorded as rows with `failed = true`.
pub fn run_study(design: &SimDesign, methods: &[Method], reps: usize, settings: &FitSettings, rng: &RngState) -> Result<Vec<StudyRow>> {
    if reps == 0 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    let per_rep: Vec<Vec<StudyRow>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rows = Vec::new();
            let row = |method: &str, metric: &str, value: f64, failed: bool| StudyRow {
                design: design.name.clone(),
                rep,
                method: method.to_string(),
                metric: metric.to_string(),
                value,
                failed,
            };
            let rep_rng = rng.derive(rep as u64);
            let (data, _) = match generate(design, &mut rep_rng.derive(0)) {
                Ok(d) => d,
                Err(e) => {
                    log::warn!("replicate {rep}: generation failed: {e}");
                    rows.push(row("-", "generate", f64::NAN, true));
                    return rows;
                }
            };
            for (mi, &method) in methods.iter().enumerate() {
                let view = match (method.family(), design.family) {
                    (Family::Mixture, _) => data.clone().without_covariates(),
                    (Family::Moe, Family::Mixture) => data.clone().with_intercept_only(),
                    (Family::Moe, Family::Moe) => data.clone(),
                };
                let mut s = settings.clone();
                s.compute_elpd = false;
                s.sampler.seed = rep_rng.seed();
                match fit(&view, method, design.k, &s, &rep_rng.derive(1 + mi as u64)) {
                    Ok(f) => match eval_errors(&f.estimate, &design.truth) {
                        Ok(err) => {
                            if let Some(v) = err.pi {
                                rows.push(row(method.name(), "pi_error", v, false));
                            }
                            rows.push(row(method.name(), "nu_error", err.nu, false));
                            rows.push(row(method.name(), "sigma_error", err.sigma, false));
                            if let Some(v) = err.beta {
                                rows.push(row(method.name(), "beta_error", v, false));
                            }
                            if let Some(em) = &f.em {
                                if !em.best.converged {
                                    rows.push(row(method.name(), "em_not_converged", 1.0, true));
                                }
                            }
                            if let Some(chain) = &f.chain {
                                if let Ok(report) = chain.ess_report() {
                                    for c in 0..design.k {
                                        let truth_comp = err.perm[c];
                                        if let Some(v) = report.get(&format!("nu_{}", truth_comp + 1)) {
                                            rows.push(row(method.name(), &format!("ess_nu_{}", c + 1), v, false));
                                        }
                                    }
                                }
                            }
                        }
                        Err(e) => {
                            log::warn!("replicate {rep}, {method}: evaluation failed: {e}");
                            rows.push(row(method.name(), "failed", f64::NAN, true));
                        }
                    },
                    Err(e) => {
                        log::warn!("replicate {rep}, {method}: fit failed: {e}");
                        rows.push(row(method.name(), "failed", f64::NAN, true));
                    }
                }
            }
            rows
        })
        .collect();
    Ok(per_rep.into_iter().flatten().collect())
}

pub fn write_study_csv<W: Write>(rows: &[StudyRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["design", "rep", "method", "metric", "value", "failed_flag"])?;
    for r in rows {
        out.write_record([
            r.design.clone(),
            r.rep.to_string(),
            r.method.clone(),
            r.metric.clone(),
            format!("{:.17e}", r.value),
            (r.failed as u8).to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
