//! Model-selection criteria: BIC, ICL, leave-one-out elpd by (Pareto-smoothed)
//! importance sampling, and cluster purity against external labels.

use std::collections::HashMap;
use std::hash::Hash;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::em::Responsibilities;
use crate::error::{Error, Result};
use crate::mcmc::Chain;
use crate::model::{model_dimension, Dataset, Family};
use crate::numcore::log_sum_exp;

pub const MIN_LOO_DRAWS: usize = 100;
pub const KHAT_WARN: f64 = 0.7;

pub fn bic(loglik: f64, k: usize, p: usize, q: usize, family: Family, n: f64) -> f64 {
    -2.0 * loglik + model_dimension(k, p, q, family) as f64 * n.ln()
}

/// `BIC − 2 Σ r log r`; never below the BIC.
pub fn icl(bic_value: f64, resp: &Responsibilities) -> f64 {
    bic_value - 2.0 * resp.neg_entropy()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LooMethod {
    Raw,
    Psis,
}

impl FromStr for LooMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Self::Raw),
            "psis" => Ok(Self::Psis),
            other => Err(Error::Config(format!("unknown LOO method {other:?} (expected raw or psis)"))),
        }
    }
}

/// Generalized Pareto fit to exceedances by the Zhang–Stephens profile
/// estimator with the weakly informative shape adjustment. Returns `(k, σ)`.
pub fn gpd_fit(sorted_x: &[f64]) -> (f64, f64) {
    let n = sorted_x.len();
    let prior = 3.0;
    let m = 30 + (n as f64).sqrt().floor() as usize;
    let xstar = sorted_x[((n as f64 / 4.0 + 0.5).floor() as usize).max(1) - 1];
    let xmax = sorted_x[n - 1];
    let theta: Vec<f64> = (1..=m)
        .map(|j| 1.0 / xmax + (1.0 - (m as f64 / (j as f64 - 0.5)).sqrt()) / prior / xstar)
        .collect();
    let l_theta: Vec<f64> = theta
        .iter()
        .map(|&t| {
            let a = -t;
            let kk = sorted_x.iter().map(|x| (a * x).ln_1p()).sum::<f64>() / n as f64;
            n as f64 * ((a / kk).ln() - kk - 1.0)
        })
        .collect();
    let lse = log_sum_exp(&l_theta);
    let theta_hat: f64 = theta.iter().zip(&l_theta).map(|(t, l)| t * (l - lse).exp()).sum();
    let k = sorted_x.iter().map(|x| (-theta_hat * x).ln_1p()).sum::<f64>() / n as f64;
    let sigma = -k / theta_hat;
    let nf = n as f64;
    let k = k * nf / (nf + 10.0) + 5.0 / (nf + 10.0);
    (k, sigma)
}

fn qgpd(prob: f64, k: f64, sigma: f64) -> f64 {
    sigma * (-k * (-prob).ln_1p()).exp_m1() / k
}

/// Pareto-smoothed log weights for one observation's log importance ratios,
/// with the shape estimate `k̂` (infinite when the tail is too short to fit).
pub fn psis_smooth(log_ratios: &[f64]) -> (Vec<f64>, f64) {
    let s = log_ratios.len();
    let max = log_ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut lw: Vec<f64> = log_ratios.iter().map(|v| v - max).collect();
    let tail_len = ((0.2 * s as f64).ceil() as usize).min((3.0 * (s as f64).sqrt()).ceil() as usize);
    let mut khat = f64::INFINITY;
    if tail_len >= 5 && tail_len < s {
        let mut ord: Vec<usize> = (0..s).collect();
        ord.sort_by(|&a, &b| lw[a].total_cmp(&lw[b]));
        let tail_ids = &ord[s - tail_len..];
        let tail: Vec<f64> = tail_ids.iter().map(|&i| lw[i]).collect();
        let spread = tail[tail_len - 1] - tail[0];
        if spread.abs() >= f64::EPSILON / 100.0 {
            let cutoff = lw[ord[s - tail_len - 1]];
            let exp_cut = cutoff.exp();
            let exceed: Vec<f64> = tail.iter().map(|v| v.exp() - exp_cut).collect();
            let (k, sigma) = gpd_fit(&exceed);
            if k.is_finite() {
                for (j, &i) in tail_ids.iter().enumerate() {
                    let prob = (j as f64 + 0.5) / tail_len as f64;
                    lw[i] = (qgpd(prob, k, sigma) + exp_cut).ln();
                }
            }
            khat = k;
        }
    }
    for v in lw.iter_mut() {
        if *v > 0.0 {
            *v = 0.0;
        }
    }
    (lw, khat)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsisDiagnostics {
    pub khat: Vec<f64>,
    pub n_bad: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LooResult {
    pub elpd: f64,
    pub se: f64,
    pub pointwise: Vec<f64>,
    pub method: LooMethod,
    pub diagnostics: Option<PsisDiagnostics>,
}

/// LOO from a `T × n` matrix of `log p(S_i | Θ^(t))`.
pub fn elpd_loo_from_matrix(loglik: &DMatrix<f64>, method: LooMethod) -> Result<LooResult> {
    let (t, n) = loglik.shape();
    if t < MIN_LOO_DRAWS {
        return Err(Error::ChainTooShort { draws: t, min: MIN_LOO_DRAWS });
    }
    let mut pointwise = Vec::with_capacity(n);
    let mut khats = Vec::with_capacity(n);
    for i in 0..n {
        let ll: Vec<f64> = loglik.column(i).iter().copied().collect();
        let ratios: Vec<f64> = ll.iter().map(|v| -v).collect();
        let lw = match method {
            LooMethod::Raw => ratios,
            LooMethod::Psis => {
                let (lw, k) = psis_smooth(&ratios);
                khats.push(k);
                lw
            }
        };
        let num: Vec<f64> = lw.iter().zip(&ll).map(|(w, l)| w + l).collect();
        pointwise.push(log_sum_exp(&num) - log_sum_exp(&lw));
    }
    let elpd = pointwise.iter().sum::<f64>();
    let mean = elpd / n as f64;
    let var = pointwise.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
    let diagnostics = (method == LooMethod::Psis).then(|| PsisDiagnostics {
        n_bad: khats.iter().filter(|k| !(**k <= KHAT_WARN)).count(),
        khat: khats,
    });
    if let Some(d) = &diagnostics {
        if d.n_bad > 0 {
            log::warn!("{} observations have Pareto k above {KHAT_WARN}", d.n_bad);
        }
    }
    Ok(LooResult { elpd, se: (n as f64 * var).sqrt(), pointwise, method, diagnostics })
}

pub fn elpd_loo(data: &Dataset, chain: &Chain, method: LooMethod) -> Result<LooResult> {
    if chain.len() < MIN_LOO_DRAWS {
        return Err(Error::ChainTooShort { draws: chain.len(), min: MIN_LOO_DRAWS });
    }
    elpd_loo_from_matrix(&chain.pointwise_loglik(data)?, method)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Bic,
    Icl,
    Elpd,
}

impl Criterion {
    pub fn name(self) -> &'static str {
        match self {
            Criterion::Bic => "bic",
            Criterion::Icl => "icl",
            Criterion::Elpd => "elpd",
        }
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "bic" => Ok(Self::Bic),
            "icl" => Ok(Self::Icl),
            "elpd" => Ok(Self::Elpd),
            other => Err(Error::Config(format!("unknown criterion {other:?}"))),
        }
    }
}

/// Criterion values for one K.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KRow {
    pub k: usize,
    pub loglik: Option<f64>,
    pub bic: Option<f64>,
    pub icl: Option<f64>,
    pub elpd: Option<f64>,
    pub elpd_se: Option<f64>,
    /// Why this K has no values, if it failed.
    pub error: Option<String>,
}

impl KRow {
    pub fn value(&self, c: Criterion) -> Option<f64> {
        match c {
            Criterion::Bic => self.bic,
            Criterion::Icl => self.icl,
            Criterion::Elpd => self.elpd,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriterionReport {
    pub rows: Vec<KRow>,
    pub chosen: Vec<(Criterion, usize)>,
    pub recommended: Option<usize>,
}

impl CriterionReport {
    pub fn chosen_for(&self, c: Criterion) -> Option<usize> {
        self.chosen.iter().find(|(cc, _)| *cc == c).map(|(_, k)| *k)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["k", "loglik", "bic", "icl", "elpd", "elpd_se"])?;
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
        for r in &self.rows {
            out.write_record([r.k.to_string(), fmt(r.loglik), fmt(r.bic), fmt(r.icl), fmt(r.elpd), fmt(r.elpd_se)])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Smallest K minimizing BIC/ICL or maximizing elpd, per criterion; the
/// recommendation is the modal choice with ties going to the smaller K.
pub fn select_k(rows: Vec<KRow>, criteria: &[Criterion]) -> Result<CriterionReport> {
    let mut sorted = rows;
    sorted.sort_by_key(|r| r.k);
    if sorted.windows(2).any(|w| w[1].k != w[0].k + 1) {
        return Err(Error::Config("K range must be contiguous".into()));
    }
    let mut chosen = Vec::new();
    for &c in criteria {
        let mut best: Option<(usize, f64)> = None;
        for r in &sorted {
            if let Some(v) = r.value(c) {
                let better = match best {
                    None => true,
                    Some((_, b)) => match c {
                        Criterion::Elpd => v > b,
                        _ => v < b,
                    },
                };
                if better {
                    best = Some((r.k, v));
                }
            }
        }
        if let Some((k, _)) = best {
            chosen.push((c, k));
        }
    }
    let mut votes: HashMap<usize, usize> = HashMap::new();
    for (_, k) in &chosen {
        *votes.entry(*k).or_default() += 1;
    }
    let recommended = votes.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(k, _)| *k);
    Ok(CriterionReport { rows: sorted, chosen, recommended })
}

/// `(1/n) Σ_k max_c |{i : cluster(i) = k, class(i) = c}|`.
pub fn cluster_purity<A: Eq + Hash, B: Eq + Hash>(assignments: &[A], labels: &[B]) -> Result<f64> {
    if assignments.len() != labels.len() {
        return Err(Error::LengthMismatch { left: assignments.len(), right: labels.len() });
    }
    if assignments.is_empty() {
        return Ok(1.0);
    }
    let mut table: HashMap<&A, HashMap<&B, usize>> = HashMap::new();
    for (a, b) in assignments.iter().zip(labels) {
        *table.entry(a).or_default().entry(b).or_default() += 1;
    }
    let hit: usize = table.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    Ok(hit as f64 / assignments.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn resp(r: DMatrix<f64>) -> Responsibilities {
        Responsibilities { n_k: vec![0.0; r.ncols()], m_k: vec![], wavg_logdet: vec![], r }
    }

    #[test]
    fn bic_examples() {
        assert!((bic(0.0, 3, 2, 3, Family::Moe, std::f64::consts::E) - 18.0).abs() < 1e-12);
        let a = bic(-100.0, 3, 2, 0, Family::Mixture, 200.0);
        let b = bic(-100.0, 3, 2, 0, Family::Mixture, 400.0);
        assert!((b - a - 14.0 * 2f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn icl_examples() {
        let hard = resp(DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]));
        assert_eq!(icl(50.0, &hard), 50.0);
        let unif = resp(DMatrix::from_element(10, 2, 0.5));
        assert!((icl(50.0, &unif) - (50.0 + 20.0 * 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn identical_draws_give_exact_density() {
        let ll = DMatrix::from_fn(200, 3, |_, i| -1.5 - i as f64);
        for m in [LooMethod::Raw, LooMethod::Psis] {
            let res = elpd_loo_from_matrix(&ll, m).unwrap();
            for i in 0..3 {
                assert!((res.pointwise[i] - (-1.5 - i as f64)).abs() < 1e-12);
            }
        }
        assert!(matches!(
            elpd_loo_from_matrix(&DMatrix::zeros(50, 2), LooMethod::Psis),
            Err(Error::ChainTooShort { draws: 50, .. })
        ));
    }

    #[test]
    fn gpd_recovers_shape() {
        // Exact GPD quantiles with k = 0.5, σ = 1.
        let n = 2000;
        let x: Vec<f64> = (1..=n).map(|i| qgpd((i as f64 - 0.5) / n as f64, 0.5, 1.0)).collect();
        let (k, sigma) = gpd_fit(&x);
        assert!((k - 0.5).abs() < 0.05, "{k}");
        assert!((sigma - 1.0).abs() < 0.1, "{sigma}");
    }

    #[test]
    fn select_k_rules() {
        let row = |k, b: f64, e: f64| KRow { k, loglik: None, bic: Some(b), icl: Some(b + 1.0), elpd: Some(e), elpd_se: None, error: None };
        let r = select_k(vec![row(2, 10.0, -5.0), row(3, 8.0, -4.0), row(4, 9.0, -4.5)], &[Criterion::Bic]).unwrap();
        assert_eq!(r.chosen_for(Criterion::Bic), Some(3));
        let plateau = select_k(
            vec![row(4, 9.0, 0.0), row(5, 7.0, 0.0), row(6, 8.0, 0.0), row(7, 7.0, 0.0)],
            &[Criterion::Bic],
        )
        .unwrap();
        assert_eq!(plateau.chosen_for(Criterion::Bic), Some(5));
        let disagree = select_k(
            vec![row(2, 5.0, -9.0), row(3, 6.0, -8.0), row(4, 7.0, -7.0)],
            &[Criterion::Icl, Criterion::Elpd],
        )
        .unwrap();
        assert_eq!(disagree.chosen_for(Criterion::Icl), Some(2));
        assert_eq!(disagree.chosen_for(Criterion::Elpd), Some(4));
        assert_eq!(disagree.recommended, Some(2));
        assert!(select_k(vec![row(2, 1.0, 1.0), row(4, 1.0, 1.0)], &[Criterion::Bic]).is_err());
    }

    #[test]
    fn purity_examples() {
        assert_eq!(cluster_purity(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        let one = vec![0; 100];
        let two: Vec<u8> = (0..100).map(|i| (i % 2) as u8).collect();
        assert_eq!(cluster_purity(&one, &two).unwrap(), 0.5);
        let c = [1, 1, 1, 2, 2, 2];
        let g = ['a', 'a', 'b', 'b', 'b', 'a'];
        assert!((cluster_purity(&c, &g).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert!(matches!(cluster_purity(&[1], &[1, 2]), Err(Error::LengthMismatch { .. })));
    }

    proptest! {
        #[test]
        fn purity_relabel_invariant(pairs in proptest::collection::vec((0u8..4, 0u8..3), 1..60), shift in 1u8..10) {
            let a: Vec<u8> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<u8> = pairs.iter().map(|p| p.1).collect();
            let a2: Vec<u8> = a.iter().map(|v| (v + shift) % 4 + 10).collect();
            let b2: Vec<String> = b.iter().map(|v| format!("class{}", (v + shift) % 3)).collect();
            let base = cluster_purity(&a, &b).unwrap();
            prop_assert!((base - cluster_purity(&a2, &b2).unwrap()).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&base));
        }

        #[test]
        fn icl_never_below_bic(vals in proptest::collection::vec(0.001f64..1.0, 12)) {
            let r = DMatrix::from_fn(4, 3, |i, k| vals[i * 3 + k] / (vals[i * 3] + vals[i * 3 + 1] + vals[i * 3 + 2]));
            prop_assert!(icl(3.0, &resp(r)) >= 3.0);
        }

        #[test]
        fn loo_is_order_invariant(seed in 0u64..1000) {
            let mut rng = crate::sampling::RngState::new(seed);
            let ll = DMatrix::from_fn(150, 5, |_, i| -2.0 - i as f64 + 0.5 * crate::sampling::draw_std_normal(&mut rng));
            let a = elpd_loo_from_matrix(&ll, LooMethod::Psis).unwrap();
            let perm = [3usize, 0, 4, 1, 2];
            let llp = DMatrix::from_fn(150, 5, |t, i| ll[(t, perm[i])]);
            let b = elpd_loo_from_matrix(&llp, LooMethod::Psis).unwrap();
            prop_assert!((a.elpd - b.elpd).abs() < 1e-9);
        }
    }
}
