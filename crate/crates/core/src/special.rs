//! Special functions used by the closed-form intensity functionals.

use crate::error::{Error, Result};
use std::f64::consts::PI;

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Natural log of the gamma function for `x > 0` (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    if x.is_nan() || x <= 0.0 {
        return f64::NAN;
    }
    if x < 0.5 {
        // reflection
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS_COEF[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    LN_SQRT_2PI + (x + 0.5) * t.ln() - t + a.ln()
}

/// `ln(r^{[k]}) = ln Γ(r + k) - ln Γ(r)`, the rising factorial.
pub fn ln_rising(r: f64, k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    if k <= 32 {
        (0..k).map(|j| (r + j as f64).ln()).sum()
    } else {
        ln_gamma(r + k as f64) - ln_gamma(r)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 35.0 {
        x + (-x).exp()
    } else if x < -35.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln(e^a + e^b)`.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `ln Σ e^{x_i}`; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    if max == f64::INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

const SERIES_EPS: f64 = 1e-17;
const CF_TINY: f64 = 1e-300;
const MAX_ITER: usize = 100_000;

/// ln γ(s, x) when `x < s + 1`, from `ln x` so that tiny `x` keeps full precision.
fn ln_lower_series(s: f64, ln_x: f64, x: f64) -> f64 {
    let mut term = 1.0 / s;
    let mut sum = term;
    let mut k = 1.0;
    for _ in 0..MAX_ITER {
        term *= x / (s + k);
        sum += term;
        if term.abs() < sum.abs() * SERIES_EPS {
            break;
        }
        k += 1.0;
    }
    s * ln_x - x + sum.ln()
}

/// ln Γ(s, x) (upper) by modified Lentz on the Legendre continued fraction, `x ≥ s + 1`.
fn ln_upper_cf(s: f64, ln_x: f64, x: f64) -> f64 {
    let mut b = x + 1.0 - s;
    let mut c = 1.0 / CF_TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let an = -(i as f64) * (i as f64 - s);
        b += 2.0;
        d = an * d + b;
        if d.abs() < CF_TINY {
            d = CF_TINY;
        }
        c = b + an / c;
        if c.abs() < CF_TINY {
            c = CF_TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 4.0 * f64::EPSILON {
            break;
        }
    }
    s * ln_x - x + h.ln()
}

/// ln γ(s, e^{ln_x}). Accepts `ln_x = -inf` (returns `-inf`) and `ln_x = +inf`
/// (returns ln Γ(s)).
pub fn ln_lower_incomplete_gamma_lnx(s: f64, ln_x: f64) -> f64 {
    if ln_x == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let x = ln_x.exp();
    if x.is_infinite() {
        return ln_gamma(s);
    }
    if x < s + 1.0 {
        ln_lower_series(s, ln_x, x)
    } else {
        let lg = ln_gamma(s);
        let ln_q = ln_upper_cf(s, ln_x, x) - lg;
        lg + (-ln_q.exp()).ln_1p()
    }
}

/// ln γ(s, x).
pub fn ln_lower_incomplete_gamma(s: f64, x: f64) -> Result<f64> {
    check_args(s, x)?;
    Ok(ln_lower_incomplete_gamma_lnx(s, x.ln()))
}

/// Lower incomplete gamma function γ(s, x) = ∫_0^x t^{s-1} e^{-t} dt.
///
/// Power series below `x = s + 1`, continued fraction for the complement above.
pub fn lower_incomplete_gamma(s: f64, x: f64) -> Result<f64> {
    Ok(ln_lower_incomplete_gamma(s, x)?.exp())
}

/// Regularized lower incomplete gamma P(s, x) = γ(s, x) / Γ(s).
pub fn regularized_lower_gamma(s: f64, x: f64) -> Result<f64> {
    check_args(s, x)?;
    if x == 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(1.0);
    }
    if x < s + 1.0 {
        Ok((ln_lower_series(s, x.ln(), x) - ln_gamma(s)).exp())
    } else {
        Ok(-(ln_upper_cf(s, x.ln(), x) - ln_gamma(s)).exp_m1())
    }
}

/// Regularized upper incomplete gamma Q(s, x) = 1 - P(s, x), accurate in the tail.
pub fn regularized_upper_gamma(s: f64, x: f64) -> Result<f64> {
    check_args(s, x)?;
    if x == 0.0 {
        return Ok(1.0);
    }
    if x.is_infinite() {
        return Ok(0.0);
    }
    if x < s + 1.0 {
        Ok(-(ln_lower_series(s, x.ln(), x) - ln_gamma(s)).exp_m1())
    } else {
        Ok((ln_upper_cf(s, x.ln(), x) - ln_gamma(s)).exp())
    }
}

fn check_args(s: f64, x: f64) -> Result<()> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Domain(format!("incomplete gamma needs s > 0, got {s}")));
    }
    if !(x >= 0.0) {
        return Err(Error::Domain(format!("incomplete gamma needs x >= 0, got {x}")));
    }
    Ok(())
}
