//! Seeded random generation for every distribution the samplers and the
//! simulation designs draw from.
//!
//! All draws go through [`RngState`], a ChaCha stream cipher keyed by a
//! 64-bit seed. Independent streams for parallel chains, restarts and
//! replicates are obtained from `(seed, stream id)` pairs, so no coordination
//! between workers is needed and results do not depend on scheduling.

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::numcore::SpdMatrix;

#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    /// Independent generator for sub-job `id` (chain, restart, replicate).
    /// Stream ids are mixed so that nested derivations do not collide.
    pub fn derive(&self, id: u64) -> Self {
        let mixed = self
            .stream
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .rotate_left(17)
            ^ id.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        Self::with_stream(self.seed, mixed)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

pub fn draw_normal(rng: &mut RngState, mean: f64, sd: f64) -> Result<f64> {
    let d = Normal::new(mean, sd).map_err(|e| Error::Domain(format!("normal({mean}, {sd}): {e}")))?;
    Ok(d.sample(rng))
}

pub fn draw_std_normal(rng: &mut RngState) -> f64 {
    StandardNormal.sample(rng)
}

/// Gamma with shape/rate parametrization (mean = shape / rate).
pub fn draw_gamma(rng: &mut RngState, shape: f64, rate: f64) -> Result<f64> {
    if !(shape > 0.0 && rate > 0.0) || !shape.is_finite() || !rate.is_finite() {
        return Err(Error::Domain(format!("gamma(shape={shape}, rate={rate})")));
    }
    let d = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(d.sample(rng))
}

/// `log G` for `G ~ Gamma(shape, 1)`, accurate for tiny shapes where `G`
/// itself underflows: `G = G' · U^{1/shape}` with `G' ~ Gamma(shape + 1)`.
pub fn draw_log_gamma(rng: &mut RngState, shape: f64) -> Result<f64> {
    if shape >= 1.0 {
        return Ok(draw_gamma(rng, shape, 1.0)?.ln());
    }
    let g = draw_gamma(rng, shape + 1.0, 1.0)?;
    let u: f64 = rng.uniform();
    Ok(g.ln() + u.ln() / shape)
}

pub fn draw_chi_square(rng: &mut RngState, df: f64) -> Result<f64> {
    if !(df > 0.0) || !df.is_finite() {
        return Err(Error::Domain(format!("chi-square df={df}")));
    }
    let d = ChiSquared::new(df).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(d.sample(rng))
}

pub fn draw_dirichlet(rng: &mut RngState, alpha: &[f64]) -> Result<Vec<f64>> {
    if alpha.is_empty() {
        return Err(Error::Domain("dirichlet with no components".into()));
    }
    if let Some(a) = alpha.iter().find(|a| !(**a > 0.0) || !a.is_finite()) {
        return Err(Error::Domain(format!("dirichlet concentration {a} must be positive")));
    }
    let logs = alpha.iter().map(|&a| draw_log_gamma(rng, a)).collect::<Result<Vec<_>>>()?;
    let lse = crate::numcore::log_sum_exp(&logs);
    let mut out: Vec<f64> = logs.iter().map(|l| (l - lse).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

/// Index `k` with probability ∝ `exp(logw[k])`, normalized by subtracting
/// the maximum.
pub fn draw_categorical_from_logweights(rng: &mut RngState, logw: &[f64]) -> Result<usize> {
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::AllMinusInfinity);
    }
    let weights: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.uniform() * total;
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return Ok(k);
        }
        u -= w;
    }
    // Rounding can leave u marginally above the last weight.
    Ok(weights.iter().rposition(|w| *w > 0.0).unwrap_or(0))
}

/// Lower-triangular Bartlett factor `A` with `A Aᵀ ~ W_p(ν, I)`.
fn bartlett_factor(rng: &mut RngState, p: usize, nu: f64) -> Result<DMatrix<f64>> {
    let mut a = DMatrix::zeros(p, p);
    for j in 0..p {
        a[(j, j)] = draw_chi_square(rng, nu - j as f64)?.sqrt();
        for i in (j + 1)..p {
            a[(i, j)] = draw_std_normal(rng);
        }
    }
    Ok(a)
}

fn check_df(nu: f64, p: usize) -> Result<()> {
    if !(nu > p as f64 - 1.0) || !nu.is_finite() {
        return Err(Error::Domain(format!("Wishart degrees of freedom {nu} must exceed p - 1 = {}", p - 1)));
    }
    Ok(())
}

/// `S ~ W_p(ν, Σ)` with `E[S] = νΣ`, built as `L A Aᵀ Lᵀ`, `L = chol(Σ)`.
pub fn draw_wishart(rng: &mut RngState, nu: f64, scale: &SpdMatrix) -> Result<SpdMatrix> {
    let p = scale.dim();
    check_df(nu, p)?;
    let a = bartlett_factor(rng, p, nu)?;
    let la = scale.chol() * a;
    SpdMatrix::from_symmetric_product(&la * la.transpose())
}

/// Inverse-Wishart draw `Σ = W⁻¹` with `W ~ W_p(df, B⁻¹)`, so that
/// `E[Σ] = B / (df − p − 1)`.
///
/// With `B = U Uᵀ` and `A` a Bartlett factor, `W = U⁻ᵀ A Aᵀ U⁻¹` has the
/// required law and `W⁻¹ = (U A⁻ᵀ)(U A⁻ᵀ)ᵀ`, so `B` never has to be
/// inverted.
pub fn draw_inverse_wishart(rng: &mut RngState, df: f64, scale: &SpdMatrix) -> Result<SpdMatrix> {
    let p = scale.dim();
    check_df(df, p)?;
    let a = bartlett_factor(rng, p, df)?;
    let a_inv = a
        .solve_lower_triangular(&DMatrix::identity(p, p))
        .ok_or(Error::NotPositiveDefinite { jitter: 0.0 })?;
    let c = scale.chol() * a_inv.transpose();
    SpdMatrix::from_symmetric_product(&c * c.transpose())
}
