//! The auxiliary density g_r(v, n), the EPPF, and prediction weights.
//!
//! g_r(v, n) = r^{[k]} ψ(v)^{-(r+k)} · v^{n-1}/Γ(n) · Π_i π_{n_i}(v). Every
//! integral over `v` is taken in `x = ln v`, where the integrand is
//! `v · g_r(v, n) = r^{[k]}/Γ(n) · ψ^{-(r+k)} · Π_i v^{n_i} π_{n_i}(v)`.

use crate::error::{Error, Result};
use crate::levy::{LevyModel, ModelKind, ModelParams};
use crate::numerics::{log_integrate_line, GridSampler, GridSpec, QuadratureSpec};
use crate::partitions::{enumerate_afs, log_partition_coefficient, Configuration};
use crate::special::{ln_gamma, ln_rising, regularized_lower_gamma};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::Serialize;

/// ψ and tilted moments in log-`v` coordinates. [`LevyModel`] is the only
/// production implementation; tests wrap it to check log-linearity.
pub trait LevyFunctionals {
    /// ln ψ(e^x)
    fn ln_psi(&self, ln_v: f64) -> f64;
    /// ln(v^n π_n(v)) at v = e^x
    fn ln_tilted_moment(&self, n: u32, ln_v: f64) -> f64;
}

impl LevyFunctionals for LevyModel {
    fn ln_psi(&self, ln_v: f64) -> f64 {
        LevyModel::ln_psi(self, ln_v)
    }
    fn ln_tilted_moment(&self, n: u32, ln_v: f64) -> f64 {
        LevyModel::ln_tilted_moment(self, n, ln_v)
    }
}

/// ln(v · g_r(v, counts)) at `v = e^{ln_v}`; `r_plus` replaces `r` (for g_{r+1}).
pub(crate) fn ln_g_times_v<F: LevyFunctionals + ?Sized>(
    f: &F,
    r: f64,
    counts: &[u32],
    ln_v: f64,
) -> f64 {
    let k = counts.len();
    let n: u32 = counts.iter().sum();
    let mut out = ln_rising(r, k) - ln_gamma(n as f64) - (r + k as f64) * f.ln_psi(ln_v);
    for &c in counts {
        out += f.ln_tilted_moment(c, ln_v);
    }
    out
}

fn map_nan(model: &LevyModel, e: Error) -> Error {
    match (model.kind(), e) {
        (ModelKind::Generic, Error::NanIntegrand { at }) => {
            Error::InvalidDensity(format!("functionals failed near ln v = {at}"))
        }
        (_, e) => e,
    }
}

/// ln g_r(v, n) through an arbitrary set of functionals.
pub fn log_g_r_with<F: LevyFunctionals + ?Sized>(
    f: &F,
    r: f64,
    config: &Configuration,
    v: f64,
) -> Result<f64> {
    if !(v > 0.0) {
        return Err(Error::Domain(format!("g_r needs v > 0, got {v}")));
    }
    let x = v.ln();
    Ok(ln_g_times_v(f, r, config.counts(), x) - x)
}

/// ln g_r(v, n).
pub fn log_g_r(params: &ModelParams, config: &Configuration, v: f64) -> Result<f64> {
    let out = log_g_r_with(&params.model, params.r, config, v)?;
    if out.is_nan() {
        return Err(Error::InvalidDensity(format!("g_r is NaN at v = {v}")));
    }
    Ok(out)
}

/// log ∫ e^{ln_h(ln v)} d(ln v) for an integrand already multiplied by `v`.
pub(crate) fn integrate_ln_v(
    params: &ModelParams,
    quad: &QuadratureSpec,
    ln_h: impl Fn(f64) -> f64,
) -> Result<f64> {
    log_integrate_line(ln_h, quad)
        .map(|q| q.log_value)
        .map_err(|e| map_nan(&params.model, e))
}

/// ln p(n) = ln ∫ g_r(v, n) dv.
pub fn log_eppf(params: &ModelParams, config: &Configuration) -> Result<f64> {
    log_eppf_with(params, config, &QuadratureSpec::default())
}

pub fn log_eppf_with(
    params: &ModelParams,
    config: &Configuration,
    quad: &QuadratureSpec,
) -> Result<f64> {
    let counts = config.counts();
    integrate_ln_v(params, quad, |x| ln_g_times_v(&params.model, params.r, counts, x))
}

/// ln E[f(V)] under the density proportional to `g_r(v, config)`, for a
/// positive `f` given as `ln f` in terms of `ln v`.
pub fn log_v_expectation(
    params: &ModelParams,
    config: &Configuration,
    ln_f: impl Fn(f64) -> f64,
) -> Result<f64> {
    let quad = QuadratureSpec::default();
    let counts = config.counts();
    let num = integrate_ln_v(params, &quad, |x| ln_g_times_v(&params.model, params.r, counts, x) + ln_f(x))?;
    Ok(num - log_eppf_with(params, config, &quad)?)
}

/// ln E[V^power]; fails with a quadrature error when the moment is infinite.
pub fn log_v_moment(params: &ModelParams, config: &Configuration, power: f64) -> Result<f64> {
    log_v_expectation(params, config, |x| power * x)
}

/// Raw prediction weights. They sum (as `ω_0 + Σ ω_i / n`) to the EPPF, not to one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictiveWeights {
    /// New-block weight ω_0 from the `(r+k)/n ∫ v π_1/ψ g_r` form.
    pub omega0: f64,
    /// The same weight from the `r/n ∫ v π_1 g_{r+1}` form.
    pub omega0_alt: f64,
    /// ω_i for each existing block.
    pub omega: Vec<f64>,
    pub log_eppf: f64,
    pub n: u32,
}

impl PredictiveWeights {
    /// `(ω_0, ω_1/n, …, ω_k/n) / p(n)`.
    pub fn normalized(&self) -> Vec<f64> {
        let p = self.log_eppf.exp();
        let n = self.n as f64;
        std::iter::once(self.omega0 / p)
            .chain(self.omega.iter().map(|w| w / (n * p)))
            .collect()
    }

    /// `|ω_0 + Σ ω_i / n - p| / p`.
    pub fn nune_residual(&self) -> f64 {
        let p = self.log_eppf.exp();
        let lhs = self.omega0 + self.omega.iter().sum::<f64>() / self.n as f64;
        (lhs - p).abs() / p
    }
}

pub fn predictive_weights(params: &ModelParams, config: &Configuration) -> Result<PredictiveWeights> {
    predictive_weights_with(params, config, &QuadratureSpec::default())
}

pub fn predictive_weights_with(
    params: &ModelParams,
    config: &Configuration,
    quad: &QuadratureSpec,
) -> Result<PredictiveWeights> {
    let m = &params.model;
    let r = params.r;
    let counts = config.counts();
    let n = config.total();
    let nf = n as f64;
    let k = config.k() as f64;
    let log_p = log_eppf_with(params, config, quad)?;

    let log_w0 = integrate_ln_v(params, quad, |x| {
        m.ln_tilted_moment(1, x) - m.ln_psi(x) + ln_g_times_v(m, r, counts, x)
    })?;
    let omega0 = ((r + k).ln() - nf.ln() + log_w0).exp();

    // r/n ∫ v π_1 g_{r+1} dv, with v π_1 = e^{T_1} and dv = v dx
    let log_w0_alt = integrate_ln_v(params, quad, |x| {
        m.ln_tilted_moment(1, x) + ln_g_times_v(m, r + 1.0, counts, x)
    })?;
    let omega0_alt = (r.ln() - nf.ln() + log_w0_alt).exp();

    let mut omega = Vec::with_capacity(counts.len());
    for &c in counts {
        let lw = integrate_ln_v(params, quad, |x| {
            m.ln_tilted_moment(c + 1, x) - m.ln_tilted_moment(c, x) + ln_g_times_v(m, r, counts, x)
        })?;
        omega.push(lw.exp());
    }
    Ok(PredictiveWeights {
        omega0,
        omega0_alt,
        omega,
        log_eppf: log_p,
        n,
    })
}

/// Predictive probabilities `(new, block 1, …, block k)`, summing to one.
pub fn normalized_predictive(params: &ModelParams, config: &Configuration) -> Result<Vec<f64>> {
    Ok(predictive_weights(params, config)?.normalized())
}

/// Relative residual of `ω_0 + Σ ω_i / n = p(n)`.
pub fn check_nune(params: &ModelParams, config: &Configuration) -> Result<f64> {
    Ok(predictive_weights(params, config)?.nune_residual())
}

/// Largest `n` accepted by [`check_nunf`].
pub const NUNF_MAX_N: u32 = 12;

/// `|Σ_m coef(m) · p(m) - 1|` over every integer partition `m` of `n`.
pub fn check_nunf(params: &ModelParams, n: u32) -> Result<f64> {
    check_nunf_with(params, n, &QuadratureSpec::default())
}

pub fn check_nunf_with(params: &ModelParams, n: u32, quad: &QuadratureSpec) -> Result<f64> {
    if n == 0 || n > NUNF_MAX_N {
        return Err(Error::Domain(format!("check_nunf needs 1 <= n <= {NUNF_MAX_N}, got {n}")));
    }
    let mut total = 0.0;
    for m in enumerate_afs(n)? {
        let lp = log_eppf_with(params, &m.to_configuration(), quad)?;
        total += (log_partition_coefficient(&m) + lp).exp();
    }
    Ok((total - 1.0).abs())
}

/// Options for [`sample_jump_given_v_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpSamplerSpec {
    pub rejection_cap: usize,
    pub grid: GridSpec,
}

impl Default for JumpSamplerSpec {
    fn default() -> Self {
        Self {
            rejection_cap: 100_000,
            grid: GridSpec::default(),
        }
    }
}

/// One draw from `s^{n_i} e^{-vs} ρ(s) / π_{n_i}(v)`.
pub fn sample_jump_given_v<R: Rng + ?Sized>(
    params: &ModelParams,
    n_i: u32,
    v: f64,
    rng: &mut R,
) -> Result<f64> {
    sample_jump_given_v_with(params, n_i, v, rng, &JumpSamplerSpec::default())
}

pub fn sample_jump_given_v_with<R: Rng + ?Sized>(
    params: &ModelParams,
    n_i: u32,
    v: f64,
    rng: &mut R,
    spec: &JumpSamplerSpec,
) -> Result<f64> {
    if n_i == 0 {
        return Err(Error::Domain("jump sampler needs n_i >= 1".into()));
    }
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::Domain(format!("jump sampler needs finite v > 0, got {v}")));
    }
    let nf = n_i as f64;
    let gamma = |shape: f64, rate: f64| {
        Gamma::new(shape, 1.0 / rate).map_err(|e| Error::InvalidParameter(e.to_string()))
    };
    let model = &params.model;
    let draw = match model.kind() {
        ModelKind::Gamma => gamma(nf, 1.0 + v)?.sample(rng),
        ModelKind::GeneralizedGamma => gamma(nf - model.alpha().unwrap(), 1.0 + v)?.sample(rng),
        ModelKind::Stable => gamma(nf - model.alpha().unwrap(), v)?.sample(rng),
        ModelKind::TruncatedStable => {
            let a = nf - model.alpha().unwrap();
            truncated_gamma_unit(a, v, rng, spec.rejection_cap)?
        }
        ModelKind::Generic => {
            // density of t = ln s is s^{n+1} ρ(s) e^{-vs}
            let grid = GridSampler::build(
                |t: f64| {
                    let s = t.exp();
                    let r = model.density(s);
                    if r <= 0.0 {
                        f64::NEG_INFINITY
                    } else {
                        (nf + 1.0) * t + r.ln() - v * s
                    }
                },
                &spec.grid,
            )?;
            grid.sample(rng).exp()
        }
    };
    Ok(draw.max(f64::MIN_POSITIVE))
}

/// Gamma(a, rate v) conditioned on `(0, 1]`, by rejection from whichever of
/// Gamma(a, v) or the power law `a s^{a-1}` accepts more often.
fn truncated_gamma_unit<R: Rng + ?Sized>(a: f64, v: f64, rng: &mut R, cap: usize) -> Result<f64> {
    // acceptance of Gamma proposal: P(a, v); of power proposal: a Γ(a) P(a, v) / v^a
    let p = regularized_lower_gamma(a, v)?;
    let ln_power_accept = a.ln() + ln_gamma(a) + p.ln() - a * v.ln();
    let use_gamma = p.ln() >= ln_power_accept;
    let proposal = Gamma::new(a, 1.0 / v).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    for _ in 0..cap {
        if use_gamma {
            let s = proposal.sample(rng);
            if s <= 1.0 {
                return Ok(s);
            }
        } else {
            let u: f64 = rng.random();
            let s = u.powf(1.0 / a);
            let w: f64 = rng.random();
            if w <= (-v * s).exp() {
                return Ok(s);
            }
        }
    }
    Err(Error::RejectionCap(cap))
}
