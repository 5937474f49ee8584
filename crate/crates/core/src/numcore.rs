//! Dense symmetric linear algebra and the scalar special functions used by
//! the Wishart family.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

/// Diagonal jitter added (once) when a Cholesky factorization fails.
pub const JITTER: f64 = 1e-6;

/// Relative asymmetry accepted (and then removed) by [`SpdMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-10;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const LANCZOS_G: f64 = 7.0;
#[allow(clippy::excessive_precision)]
const LANCZOS_COEFFS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// Lower Cholesky factor together with the log-determinant of the factored
/// matrix. `jitter` is the diagonal shift that was needed (0 or [`JITTER`]).
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    pub lower: DMatrix<f64>,
    pub logdet: f64,
    pub jitter: f64,
}

/// Factor `m + δI` with δ = 0, retrying once with δ = [`JITTER`].
pub fn cholesky_logdet(m: &DMatrix<f64>) -> Result<CholeskyFactor> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(Error::DimensionMismatch(format!(
            "expected a non-empty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite { jitter: 0.0 });
    }
    for jitter in [0.0, JITTER] {
        let mut shifted = m.clone();
        if jitter > 0.0 {
            for j in 0..m.nrows() {
                shifted[(j, j)] += jitter;
            }
        }
        if let Some(ch) = Cholesky::new(shifted) {
            let lower = ch.unpack();
            let logdet = 2.0 * lower.diagonal().iter().map(|d| d.ln()).sum::<f64>();
            if logdet.is_finite() {
                return Ok(CholeskyFactor { lower, logdet, jitter });
            }
        }
    }
    Err(Error::NotPositiveDefinite { jitter: JITTER })
}

/// A symmetric positive definite matrix with its Cholesky factor and
/// log-determinant cached at construction.
#[derive(Debug, Clone)]
pub struct SpdMatrix {
    entries: DMatrix<f64>,
    chol: DMatrix<f64>,
    logdet: f64,
    jitter: f64,
}

impl SpdMatrix {
    /// Symmetrize `m` and factor it. Fails if the input is not symmetric to
    /// [`SYMMETRY_TOL`] (relative to its largest entry) or is not positive
    /// definite even after jitter.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "expected a non-empty square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let scale = m.amax().max(f64::MIN_POSITIVE);
        let asym = (&m - m.transpose()).amax() / scale;
        if asym > SYMMETRY_TOL || asym.is_nan() {
            return Err(Error::NotSymmetric { asymmetry: asym });
        }
        let entries = (&m + m.transpose()) * 0.5;
        let f = cholesky_logdet(&entries)?;
        Ok(Self { entries, chol: f.lower, logdet: f.logdet, jitter: f.jitter })
    }

    /// Symmetrize without the asymmetry check. Used for matrices produced by
    /// products that are symmetric in exact arithmetic.
    pub fn from_symmetric_product(m: DMatrix<f64>) -> Result<Self> {
        let entries = (&m + m.transpose()) * 0.5;
        Self::new(entries)
    }

    pub fn from_row_slice(p: usize, values: &[f64]) -> Result<Self> {
        if values.len() != p * p {
            return Err(Error::DimensionMismatch(format!(
                "expected {} entries for a {p}x{p} matrix, got {}",
                p * p,
                values.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(p, p, values))
    }

    pub fn identity(p: usize) -> Self {
        Self::new(DMatrix::identity(p, p)).expect("identity is SPD")
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_entries(self) -> DMatrix<f64> {
        self.entries
    }

    /// Lower Cholesky factor of `entries + jitter·I`.
    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn was_jittered(&self) -> bool {
        self.jitter > 0.0
    }

    /// Inverse of the (jittered) matrix, computed from the Cholesky factor.
    pub fn inverse(&self) -> DMatrix<f64> {
        let p = self.dim();
        let linv = self
            .chol
            .solve_lower_triangular(&DMatrix::identity(p, p))
            .expect("cholesky factor has a positive diagonal");
        let inv = linv.transpose() * linv;
        (&inv + inv.transpose()) * 0.5
    }

    /// Row-major entries, i.e. `vec(S)` as laid out in data files.
    pub fn to_row_major(&self) -> Vec<f64> {
        row_major(&self.entries)
    }

    /// `tr(self⁻¹ · s)`.
    pub fn trace_inv_prod(&self, s: &DMatrix<f64>) -> f64 {
        let inv = self.inverse();
        inv.component_mul(&s.transpose()).sum()
    }
}

pub fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// `tr(a_inv · S_i)` for every row `vec(S_i)` of `s_stack`, as one
/// matrix-vector product `s_stack · vec(a_invᵀ)`.
pub fn trace_prod_batch(a_inv: &DMatrix<f64>, s_stack: &DMatrix<f64>) -> Result<DVector<f64>> {
    let p = a_inv.nrows();
    if !a_inv.is_square() || s_stack.ncols() != p * p {
        return Err(Error::DimensionMismatch(format!(
            "s_stack has {} columns, expected {} for a {}x{} matrix",
            s_stack.ncols(),
            p * p,
            a_inv.nrows(),
            a_inv.ncols()
        )));
    }
    // tr(A S) = Σ_jk A_jk S_kj = vec(Aᵀ)·vec(S) with row-major vec.
    let v = DVector::from_vec(row_major(&a_inv.transpose()));
    Ok(s_stack * v)
}

/// Natural log of the gamma function for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        return (PI / (PI * x).sin().abs()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS_COEFFS[0];
    for (i, c) in LANCZOS_COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    LN_SQRT_2PI + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Digamma ψ(x) for `x > 0`: upward recurrence then the asymptotic series.
pub fn digamma(x: f64) -> f64 {
    if x <= 0.0 || !x.is_finite() {
        return f64::NAN;
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    let series = x2
        * (1.0 / 12.0
            - x2 * (1.0 / 120.0
                - x2 * (1.0 / 252.0
                    - x2 * (1.0 / 240.0
                        - x2 * (1.0 / 132.0 - x2 * (691.0 / 32760.0 - x2 / 12.0))))));
    acc + x.ln() - 0.5 / x - series
}

/// Trigamma ψ′(x) for `x > 0`.
pub fn trigamma(x: f64) -> f64 {
    if x <= 0.0 || !x.is_finite() {
        return f64::NAN;
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let x2 = inv * inv;
    let series = inv
        + x2 / 2.0
        + inv
            * x2
            * (1.0 / 6.0
                - x2 * (1.0 / 30.0
                    - x2 * (1.0 / 42.0
                        - x2 * (1.0 / 30.0
                            - x2 * (5.0 / 66.0 - x2 * (691.0 / 2730.0 - x2 * 7.0 / 6.0))))));
    acc + series
}

fn check_multi_domain(p: usize, a: f64) -> Result<()> {
    if p == 0 {
        return Err(Error::Domain("dimension p must be positive".into()));
    }
    let lo = (p as f64 - 1.0) / 2.0;
    if !(a > lo) || !a.is_finite() {
        return Err(Error::Domain(format!("multivariate gamma argument {a} must exceed {lo}")));
    }
    Ok(())
}

/// `log Γ_p(a) = p(p−1)/4 · log π + Σ_{j=1..p} log Γ(a + (1−j)/2)`.
pub fn log_multigamma(p: usize, a: f64) -> Result<f64> {
    check_multi_domain(p, a)?;
    let pf = p as f64;
    let mut acc = pf * (pf - 1.0) / 4.0 * PI.ln();
    for j in 0..p {
        acc += ln_gamma(a - j as f64 / 2.0);
    }
    Ok(acc)
}

/// Multivariate digamma `ψ_p(a) = Σ_{j=1..p} ψ(a + (1−j)/2)`.
pub fn multidigamma(p: usize, a: f64) -> Result<f64> {
    check_multi_domain(p, a)?;
    Ok((0..p).map(|j| digamma(a - j as f64 / 2.0)).sum())
}

/// Derivative of [`multidigamma`].
pub fn multitrigamma(p: usize, a: f64) -> Result<f64> {
    check_multi_domain(p, a)?;
    Ok((0..p).map(|j| trigamma(a - j as f64 / 2.0)).sum())
}

/// Stable `log Σ exp(v_i)`; −∞ when every entry is −∞ (or `v` is empty).
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let s: f64 = v.iter().map(|x| (x - max).exp()).sum();
    max + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn cholesky_examples() {
        let f = cholesky_logdet(&DMatrix::identity(2, 2)).unwrap();
        assert_eq!(f.lower, DMatrix::identity(2, 2));
        assert_eq!(f.logdet, 0.0);
        assert_eq!(f.jitter, 0.0);

        let f = cholesky_logdet(&DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]))).unwrap();
        assert!((f.lower[(0, 0)] - 2.0).abs() < 1e-15);
        assert!((f.lower[(1, 1)] - 3.0).abs() < 1e-15);
        assert!((f.logdet - 36f64.ln()).abs() < 1e-14);

        let s = SpdMatrix::from_row_slice(2, &[2.0, 0.6, 0.6, 1.5]).unwrap();
        assert!((s.logdet() - 2.64f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn jitter_is_applied_once_and_recorded() {
        // PSD but singular: needs the jitter.
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let s = SpdMatrix::new(m.clone()).unwrap();
        assert!(s.was_jittered());
        assert_eq!(s.jitter(), JITTER);
        let rec = s.chol() * s.chol().transpose();
        let target = m + DMatrix::identity(2, 2) * JITTER;
        assert!((rec - target).norm() < 1e-8);

        let neg = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(SpdMatrix::new(neg), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn asymmetric_input_rejected_small_asymmetry_removed() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.4, 2.0]);
        assert!(matches!(SpdMatrix::new(m), Err(Error::NotSymmetric { .. })));
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5 + 1e-14, 2.0]);
        let s = SpdMatrix::new(m).unwrap();
        assert_eq!(s.entries()[(0, 1)], s.entries()[(1, 0)]);
    }

    #[test]
    fn inverse_matches() {
        let s = SpdMatrix::from_row_slice(3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]).unwrap();
        let prod = s.entries() * s.inverse();
        assert!((prod - DMatrix::identity(3, 3)).amax() < 1e-13);
    }

    #[test]
    fn trace_batch_examples() {
        let s = DMatrix::from_row_slice(1, 4, &[3.0, 0.0, 0.0, 5.0]);
        let t = trace_prod_batch(&DMatrix::identity(2, 2), &s).unwrap();
        assert_eq!(t[0], 8.0);
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]);
        let s = DMatrix::from_row_slice(1, 4, &[1.0, 1.0, 1.0, 4.0]);
        assert_eq!(trace_prod_batch(&a, &s).unwrap()[0], 4.0);
        assert!(matches!(
            trace_prod_batch(&a, &DMatrix::zeros(1, 3)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    // Reference values computed with mpmath at 40 digits.
    const REFS: [(f64, f64, f64, f64); 10] = [
        (0.1, 2.2527126517342059599, -10.423754940411076795, 101.43329915079275882),
        (0.5, 0.57236494292470008707, -1.9635100260214234794, 4.9348022005446793094),
        (1.0, 0.0, -0.57721566490153286061, 1.6449340668482264365),
        (1.5, -0.12078223763524522235, 0.036489973978576520559, 0.93480220054467930942),
        (2.5, 0.28468287047291915963, 0.70315664064524318723, 0.49035775610023486497),
        (3.0, 0.69314718055994530942, 0.92278433509846713939, 0.39493406684822643647),
        (7.25, 7.0521854507385394449, 1.9104535268837360284, 0.14787923315893216965),
        (10.0, 12.801827480081469611, 2.2517525890667211076, 0.10516633568168574612),
        (33.3, 82.603723581654952928, 3.4904672385202428639, 0.030485444095338885149),
        (150.5, 602.51395487058541195, 5.0106371459337046472, 0.006666641975692716268),
    ];

    #[test]
    fn scalar_special_functions_against_references() {
        for (x, lg, dg, tg) in REFS {
            if lg == 0.0 {
                assert!(ln_gamma(x).abs() < 1e-14, "lgamma({x})");
            } else {
                assert!(rel(ln_gamma(x), lg) < 1e-12, "lgamma({x}) = {} vs {lg}", ln_gamma(x));
            }
            assert!(rel(digamma(x), dg) < 1e-12, "digamma({x}) = {} vs {dg}", digamma(x));
            assert!(rel(trigamma(x), tg) < 1e-12, "trigamma({x}) = {} vs {tg}", trigamma(x));
        }
    }

    #[test]
    fn multigamma_examples() {
        assert!(log_multigamma(1, 2.0).unwrap().abs() < 1e-14);
        assert!((log_multigamma(2, 1.5).unwrap() - (PI / 2.0).ln()).abs() < 1e-13);
        let direct = 3.0 * 2.0 / 4.0 * PI.ln() + ln_gamma(4.0) + ln_gamma(3.5) + ln_gamma(3.0);
        assert!((log_multigamma(3, 4.0).unwrap() - direct).abs() < 1e-13);
        assert!(rel(log_multigamma(3, 4.0).unwrap(), 5.4029750809091747963) < 1e-12);
        assert!(matches!(log_multigamma(3, 1.0), Err(Error::Domain(_))));
        assert!(matches!(log_multigamma(2, 0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn multidigamma_examples() {
        assert!((multidigamma(1, 1.0).unwrap() + 0.5772156649015329).abs() < 1e-12);
        assert!(rel(multidigamma(2, 3.0).unwrap(), 1.6259409757437103266) < 1e-12);
        let h = 1e-5;
        let fd = (log_multigamma(3, 5.0 + h).unwrap() - log_multigamma(3, 5.0 - h).unwrap()) / (2.0 * h);
        assert!((fd - multidigamma(3, 5.0).unwrap()).abs() < 1e-6);
        let fd2 = (multidigamma(3, 5.0 + h).unwrap() - multidigamma(3, 5.0 - h).unwrap()) / (2.0 * h);
        assert!((fd2 - multitrigamma(3, 5.0).unwrap()).abs() < 1e-6);
        assert!(multidigamma(2, 0.5).is_err());
    }

    #[test]
    fn log_sum_exp_examples() {
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!((log_sum_exp(&[-1.0, -2.0, -3.0]) + 0.59239403555561969552).abs() < 1e-14);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }
}
