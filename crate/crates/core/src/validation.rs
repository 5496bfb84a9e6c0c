//! Closed-form oracles and identity checks, grouped into suites.

use crate::coalescent::{backward_event_probabilities, h_solver_exact, mc_h_estimate, RateFunction};
use crate::error::{Error, Result};
use crate::levy::{LevyModel, ModelKind, ModelParams};
use crate::partitions::{enumerate_afs, log_partition_coefficient, Configuration};
use crate::posterior::{check_nunf, log_eppf, log_v_expectation, predictive_weights};
use crate::sampler::{GibbsOptions, GibbsSampler, VSampler};
use crate::special::{ln_gamma, regularized_upper_gamma, softplus};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::fmt;
use std::str::FromStr;

/// ln of the PD(α, θ) EPPF:
/// `Π_{i<k} (θ + iα) / (θ+1)_{n-1} · Π_j (1-α)_{n_j - 1}`.
pub fn pd_log_eppf(alpha: f64, theta: f64, counts: &[u32]) -> f64 {
    let k = counts.len();
    let n: u32 = counts.iter().sum();
    let mut out = 0.0;
    for i in 1..k {
        out += (theta + i as f64 * alpha).ln();
    }
    out -= ln_gamma(theta + n as f64) - ln_gamma(theta + 1.0);
    for &c in counts {
        out += ln_gamma(c as f64 - alpha) - ln_gamma(1.0 - alpha);
    }
    out
}

/// PD(α, θ) predictive probabilities `((θ + kα)/(θ + n), (n_i - α)/(θ + n), …)`.
pub fn pd_predictive(alpha: f64, theta: f64, counts: &[u32]) -> Vec<f64> {
    let n: u32 = counts.iter().sum();
    let d = theta + n as f64;
    std::iter::once((theta + counts.len() as f64 * alpha) / d)
        .chain(counts.iter().map(|&c| (c as f64 - alpha) / d))
        .collect()
}

/// `(α, θ)` of the Poisson-Dirichlet law a model reduces to, if any.
pub fn pd_parameters(params: &ModelParams) -> Option<(f64, f64)> {
    match params.model.kind() {
        ModelKind::GeneralizedGamma => params.model.alpha().map(|a| (a, params.r * a)),
        ModelKind::Stable => params.model.alpha().map(|a| (a, 0.0)),
        _ => None,
    }
}

/// Points used by the derivative identity checks.
pub const DERIVATIVE_GRID: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];

/// Central difference with step `1e-5 · v`.
fn central_difference(f: impl Fn(f64) -> Result<f64>, v: f64) -> Result<f64> {
    let h = 1e-5 * v;
    Ok((f(v + h)? - f(v - h)?) / (2.0 * h))
}

/// Largest relative residual of `π_1 = ψ'` and `π_n = -π'_{n-1}` (2 ≤ n ≤ n_max)
/// by central differences, over `grid`.
pub fn derivative_residual(model: &LevyModel, n_max: u32, grid: &[f64]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for &v in grid {
        let pi1 = model.log_pi_n(1, v)?.exp();
        let d = central_difference(|s| model.psi(s), v)?;
        worst = worst.max((d - pi1).abs() / pi1);
        for n in 2..=n_max {
            // scale by π_n(v) so that tiny values keep full precision
            let ln_pin = model.log_pi_n(n, v)?;
            let d = central_difference(|s| Ok((model.log_pi_n(n - 1, s)? - ln_pin).exp()), v)?;
            worst = worst.max((d + 1.0).abs());
        }
    }
    Ok(worst)
}

/// Seed used by the stochastic suites.
pub const VALIDATION_SEED: u64 = 42;

/// One check: a measured value against a bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    /// `true` when passing means `value > bound` (p-values), `false` for `value < bound`.
    pub lower_bound: bool,
}

impl CheckOutcome {
    /// Passes when `residual < tolerance`.
    pub fn residual(name: impl Into<String>, residual: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value: residual,
            bound: tolerance,
            lower_bound: false,
        }
    }

    /// Passes when `p_value > level`.
    pub fn p_value(name: impl Into<String>, p_value: f64, level: f64) -> Self {
        Self {
            name: name.into(),
            value: p_value,
            bound: level,
            lower_bound: true,
        }
    }

    pub fn passed(&self) -> bool {
        if self.lower_bound {
            self.value > self.bound
        } else {
            self.value < self.bound
        }
    }
}

/// Upper tail of the chi-square distribution with `df` degrees of freedom.
pub fn chi_square_p_value(stat: f64, df: usize) -> Result<f64> {
    regularized_upper_gamma(0.5 * df as f64, 0.5 * stat)
}

/// Pearson chi-square p-value of urn chains at `n` against the EPPF, over partition classes.
pub fn gibbs_p_value(params: &ModelParams, n: u32, chains: usize, seed: u64) -> Result<f64> {
    let classes = enumerate_afs(n)?;
    if classes.len() < 2 {
        return Ok(1.0);
    }
    let sampler = GibbsSampler::new(params.clone(), GibbsOptions::default());
    let recs = sampler.run_many(n, chains, seed)?;
    let mut stat = 0.0;
    for m in &classes {
        let e = (log_partition_coefficient(m) + log_eppf(params, &m.to_configuration())?).exp() * chains as f64;
        let o = recs.iter().filter(|r| &r.afs == m).count() as f64;
        stat += (o - e).powi(2) / e;
    }
    chi_square_p_value(stat, classes.len() - 1)
}

/// Largest |z| of the sample means of `(1+V)^{-1}` and `(1+V)^{-2}` against quadrature.
/// Both are bounded, so their standard errors exist for every model.
pub fn v_sampler_z(params: &ModelParams, config: &Configuration, draws: usize, seed: u64) -> Result<f64> {
    let sampler = VSampler::new(params, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..draws).map(|_| sampler.sample_ln(&mut rng)).collect();
    let mut worst: f64 = 0.0;
    for j in [1.0, 2.0] {
        let exact = log_v_expectation(params, config, |x| -j * softplus(x))?.exp();
        let ys: Vec<f64> = xs.iter().map(|&x| (-j * softplus(x)).exp()).collect();
        let m = ys.iter().sum::<f64>() / ys.len() as f64;
        let var = ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (ys.len() - 1) as f64;
        worst = worst.max((m - exact).abs() / (var / ys.len() as f64).sqrt());
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    /// ω_0 + Σ ω_i / n = p(n)
    Nune,
    /// Σ over partitions of n of coef · p = 1
    Nunf,
    /// EPPF and predictive weights against the Poisson-Dirichlet closed forms
    Pd,
    /// finite-difference checks of π_n against ψ
    Derivative,
    /// backward terms sum to p(n)
    Backward,
    /// H-solver preserves constants
    HSolver,
    /// urn chains against the EPPF (chi-square)
    Gibbs,
    /// V sampler against quadrature expectations
    VMoments,
    /// Monte Carlo histories against the H-solver
    CoalescentMc,
    All,
}

impl Suite {
    pub const EACH: [Suite; 9] = [
        Suite::Nune,
        Suite::Nunf,
        Suite::Pd,
        Suite::Derivative,
        Suite::Backward,
        Suite::HSolver,
        Suite::Gibbs,
        Suite::VMoments,
        Suite::CoalescentMc,
    ];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Nune => "nune",
            Suite::Nunf => "nunf",
            Suite::Pd => "pd",
            Suite::Derivative => "derivative",
            Suite::Backward => "backward",
            Suite::HSolver => "hsolver",
            Suite::Gibbs => "gibbs",
            Suite::VMoments => "vmoments",
            Suite::CoalescentMc => "coalescent-mc",
            Suite::All => "all",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "nune" => Suite::Nune,
            "nunf" => Suite::Nunf,
            "pd" => Suite::Pd,
            "derivative" => Suite::Derivative,
            "backward" => Suite::Backward,
            "hsolver" => Suite::HSolver,
            "gibbs" => Suite::Gibbs,
            "vmoments" => Suite::VMoments,
            "coalescent-mc" => Suite::CoalescentMc,
            "all" => Suite::All,
            _ => return Err(Error::Parse(format!("unknown suite {s:?}"))),
        })
    }
}

fn configs_up_to(n_max: u32) -> Result<Vec<Configuration>> {
    let mut out = Vec::new();
    for n in 1..=n_max {
        out.extend(enumerate_afs(n)?.iter().map(|m| m.to_configuration()));
    }
    Ok(out)
}

/// Runs one suite (or all of them) for `params` on every configuration with `n ≤ n_max`.
/// The stochastic suites use `seed`.
pub fn run_suite(suite: Suite, params: &ModelParams, n_max: u32, seed: u64) -> Result<Vec<CheckOutcome>> {
    if n_max == 0 {
        return Err(Error::Domain("n_max must be >= 1".into()));
    }
    let mut out = Vec::new();
    match suite {
        Suite::All => {
            for s in Suite::EACH {
                if s == Suite::Pd && pd_parameters(params).is_none() {
                    continue;
                }
                out.extend(run_suite(s, params, n_max, seed)?);
            }
        }
        Suite::Nune => {
            let mut worst: f64 = 0.0;
            for c in configs_up_to(n_max)? {
                worst = worst.max(predictive_weights(params, &c)?.nune_residual());
            }
            out.push(CheckOutcome::residual(format!("nune n<={n_max}"), worst, 1e-6));
        }
        Suite::Nunf => {
            for n in 1..=n_max {
                out.push(CheckOutcome::residual(format!("nunf n={n}"), check_nunf(params, n)?, 1e-6));
            }
        }
        Suite::Pd => {
            let (a, t) = pd_parameters(params).ok_or_else(|| {
                Error::Domain(format!("no Poisson-Dirichlet closed form for the {} model", params.model.kind()))
            })?;
            let mut eppf: f64 = 0.0;
            let mut pred: f64 = 0.0;
            for c in configs_up_to(n_max)? {
                let w = predictive_weights(params, &c)?;
                eppf = eppf.max((w.log_eppf - pd_log_eppf(a, t, c.counts())).abs());
                for (x, y) in w.normalized().iter().zip(pd_predictive(a, t, c.counts())) {
                    pred = pred.max((x - y).abs());
                }
            }
            out.push(CheckOutcome::residual("pd log-eppf", eppf, 1e-6));
            out.push(CheckOutcome::residual("pd predictive", pred, 1e-6));
        }
        Suite::Derivative => {
            let r = derivative_residual(&params.model, n_max.max(2), &DERIVATIVE_GRID)?;
            out.push(CheckOutcome::residual(format!("derivative n<={}", n_max.max(2)), r, 1e-5));
        }
        Suite::Backward => {
            let mut worst: f64 = 0.0;
            for c in configs_up_to(n_max)?.into_iter().filter(|c| c.total() >= 2) {
                worst = worst.max(backward_event_probabilities(params, &c)?.residual());
            }
            out.push(CheckOutcome::residual(format!("backward n<={n_max}"), worst, 1e-5));
        }
        Suite::HSolver => {
            let start = Configuration::new(vec![1; n_max.min(12) as usize])?;
            let ts = [0.0, 0.25, 1.0, 4.0];
            let mut worst: f64 = 0.0;
            for phi in [RateFunction::TotalN, RateFunction::TotalNChoose2] {
                for h in h_solver_exact(&start, &phi, &|_| 1.0, &ts)? {
                    worst = worst.max((h - 1.0).abs());
                }
            }
            out.push(CheckOutcome::residual("h-solver constant", worst, 1e-9));
        }
        Suite::Gibbs => {
            let n = n_max.min(4);
            let p = gibbs_p_value(params, n, 100_000, seed)?;
            out.push(CheckOutcome::p_value(format!("gibbs chi-square n={n}"), p, 1e-3));
        }
        Suite::VMoments => {
            let mut worst: f64 = 0.0;
            for (j, c) in configs_up_to(n_max.min(4))?.iter().enumerate() {
                worst = worst.max(v_sampler_z(params, c, 100_000, seed.wrapping_add(j as u64))?);
            }
            out.push(CheckOutcome::residual(format!("v-sampler |z| n<={}", n_max.min(4)), worst, 3.0));
        }
        Suite::CoalescentMc => {
            let n = n_max.clamp(2, 5) as usize;
            let mut counts = vec![1u32; n - 1];
            counts[0] = 2;
            let start = Configuration::new(counts)?;
            let phi = RateFunction::TotalN;
            let blocks = |c: &Configuration| c.k() as f64;
            let exact = h_solver_exact(&start, &phi, &blocks, &[0.5])?[0];
            let (m, se) = mc_h_estimate(&start, &phi, &blocks, 0.5, 10_000, seed)?;
            out.push(CheckOutcome::residual(format!("coalescent mc |z| from {start}"), (m - exact).abs() / se, 3.0));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pd_oracle_values() {
        assert_relative_eq!(pd_log_eppf(0.5, 1.0, &[2]).exp(), 0.25, epsilon = 1e-14);
        assert_relative_eq!(pd_log_eppf(0.5, 1.0, &[1, 1]).exp(), 0.75, epsilon = 1e-14);
        // Ewens limit α → 0: θ^{k-1} Π (n_i-1)! / (θ+1)_{n-1}
        assert_relative_eq!(pd_log_eppf(1e-12, 2.0, &[2, 1]).exp(), 2.0 / 12.0, epsilon = 1e-10);
        let p = pd_predictive(0.5, 1.0, &[3, 1]);
        assert_relative_eq!(p[0], 0.4, epsilon = 1e-15);
        assert_relative_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn pd_oracle_sums_to_one() {
        for n in 1..=7 {
            let total: f64 = enumerate_afs(n)
                .unwrap()
                .iter()
                .map(|m| {
                    (crate::partitions::log_partition_coefficient(m) + pd_log_eppf(0.3, 1.5, &m.to_configuration().counts().to_vec())).exp()
                })
                .sum();
            assert_relative_eq!(total, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn derivative_identities_hold() {
        for m in [
            LevyModel::stable(0.4).unwrap(),
            LevyModel::gamma(2.0).unwrap(),
            LevyModel::generalized_gamma(0.7).unwrap(),
            LevyModel::truncated_stable(0.5).unwrap(),
        ] {
            let r = derivative_residual(&m, 10, &DERIVATIVE_GRID).unwrap();
            assert!(r < 1e-5, "{m:?}: {r}");
        }
    }

    #[test]
    fn generic_derivative_identities_hold() {
        let tsd = LevyModel::truncated_stable(0.5).unwrap();
        let g = LevyModel::generic(move |x| tsd.density(x)).unwrap();
        let r = derivative_residual(&g, 4, &[0.1, 1.0, 10.0]).unwrap();
        assert!(r < 1e-5, "{r}");
    }

    #[test]
    fn suites_pass() {
        let p = ModelParams::new(LevyModel::stable(0.3).unwrap(), 4.0).unwrap();
        let out = run_suite(Suite::All, &p, 4, VALIDATION_SEED).unwrap();
        assert!(out.iter().all(|c| c.passed()), "{out:?}");
        assert!(out.iter().any(|c| c.name.starts_with("pd")));
        let g = ModelParams::new(LevyModel::gamma(1.0).unwrap(), 2.0).unwrap();
        assert!(run_suite(Suite::Pd, &g, 3, 1).is_err());
        let out = run_suite(Suite::All, &g, 3, 1).unwrap();
        assert!(!out.iter().any(|c| c.name.starts_with("pd")));
        assert!(out.iter().all(|c| c.passed()), "{out:?}");
    }

    #[test]
    fn chi_square_tail_values() {
        // df = 2: exp(-x/2)
        assert_relative_eq!(chi_square_p_value(3.0, 2).unwrap(), (-1.5f64).exp(), max_relative = 1e-12);
        // df = 4 at its 0.999 quantile
        assert_relative_eq!(chi_square_p_value(18.466_826_952_903_17, 4).unwrap(), 1e-3, max_relative = 1e-9);
    }

    #[test]
    fn check_directions() {
        assert!(CheckOutcome::p_value("p", 0.5, 1e-3).passed());
        assert!(!CheckOutcome::p_value("p", 1e-4, 1e-3).passed());
        assert!(CheckOutcome::residual("r", 1e-9, 1e-6).passed());
        assert!(!CheckOutcome::residual("r", f64::NAN, 1e-6).passed());
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::EACH.into_iter().chain([Suite::All]) {
            assert_eq!(s.to_string().parse::<Suite>().unwrap(), s);
        }
        assert!("bogus".parse::<Suite>().is_err());
    }
}
