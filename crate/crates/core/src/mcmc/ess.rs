use crate::error::{Error, Result};

pub const MIN_TRACE: usize = 10;

/// Effective sample size by Geyer's initial positive monotone sequence,
/// clamped to `[1, N]`.
pub fn ess(trace: &[f64]) -> Result<f64> {
    let n = trace.len();
    if n < MIN_TRACE {
        return Err(Error::TooShort { len: n, min: MIN_TRACE });
    }
    let nf = n as f64;
    let mean = trace.iter().sum::<f64>() / nf;
    let centered: Vec<f64> = trace.iter().map(|x| x - mean).collect();
    let autocov = |lag: usize| -> f64 {
        centered[..n - lag].iter().zip(&centered[lag..]).map(|(a, b)| a * b).sum::<f64>() / nf
    };
    let c0 = autocov(0);
    if !(c0 > 1e-300 * (1.0 + mean * mean)) {
        return Ok(1.0);
    }
    let mut tau = -1.0;
    let mut prev_pair = f64::INFINITY;
    let mut m = 0;
    while 2 * m + 1 < n {
        let rho_even = if m == 0 { 1.0 } else { autocov(2 * m) / c0 };
        let rho_odd = autocov(2 * m + 1) / c0;
        let pair = rho_even + rho_odd;
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        tau += 2.0 * pair;
        prev_pair = pair;
        m += 1;
    }
    Ok((nf / tau.max(1e-12)).clamp(1.0, nf))
}
