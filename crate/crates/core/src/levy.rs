//! Lévy intensities ρ and their functionals ψ(v) and π_n(v).
//!
//! ψ(v) = 1 + ∫ (1 - e^{-vx}) ρ(x) dx and π_n(v) = ∫ x^n e^{-vx} ρ(x) dx.
//! Downstream integrals work in `ln v`, so besides the plain `psi` / `log_pi_n`
//! each model also exposes `ln ψ` and `ln(v^n π_n(v))` as functions of `ln v`;
//! these are written so that no large terms cancel when `v` is huge or tiny.

use crate::error::{Error, Result};
use crate::numerics::{log_integrate_line, QuadratureSpec};
use crate::special::{
    ln_gamma, ln_lower_incomplete_gamma, ln_lower_incomplete_gamma_lnx, log_add_exp, softplus,
};
use std::fmt;
use std::sync::Arc;

pub use crate::special::lower_incomplete_gamma;

/// Which family a [`LevyModel`] belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    /// ρ(x) = α / Γ(1-α) · x^{-α-1}
    Stable,
    /// ρ(x) = θ x^{-1} e^{-x}
    Gamma,
    /// ρ(x) = α / Γ(1-α) · x^{-α-1} e^{-x}
    GeneralizedGamma,
    /// ρ(x) = α x^{-α-1} on (0, 1]
    TruncatedStable,
    /// user-supplied density, functionals by quadrature
    Generic,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelKind::Stable => "stable",
            ModelKind::Gamma => "gamma",
            ModelKind::GeneralizedGamma => "gengamma",
            ModelKind::TruncatedStable => "truncstable",
            ModelKind::Generic => "generic",
        };
        f.write_str(s)
    }
}

type DensityFn = dyn Fn(f64) -> f64 + Send + Sync;

#[derive(Clone)]
enum Repr {
    Stable { alpha: f64 },
    Gamma { theta: f64 },
    GeneralizedGamma { alpha: f64 },
    TruncatedStable { alpha: f64 },
    Generic { density: Arc<DensityFn>, quad: QuadratureSpec },
}

/// A Lévy density together with closed-form or numerical ψ and π_n.
#[derive(Clone)]
pub struct LevyModel {
    repr: Repr,
}

impl fmt::Debug for LevyModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.repr {
            Repr::Stable { alpha } => write!(f, "Stable(alpha={alpha})"),
            Repr::Gamma { theta } => write!(f, "Gamma(theta={theta})"),
            Repr::GeneralizedGamma { alpha } => write!(f, "GeneralizedGamma(alpha={alpha})"),
            Repr::TruncatedStable { alpha } => write!(f, "TruncatedStable(alpha={alpha})"),
            Repr::Generic { quad, .. } => write!(f, "Generic(rel_tol={})", quad.rel_tol),
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("alpha must lie in (0,1), got {alpha}")))
    }
}

impl LevyModel {
    pub fn stable(alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self { repr: Repr::Stable { alpha } })
    }

    pub fn gamma(theta: f64) -> Result<Self> {
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(Error::InvalidParameter(format!("theta must be > 0, got {theta}")));
        }
        Ok(Self { repr: Repr::Gamma { theta } })
    }

    pub fn generalized_gamma(alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self { repr: Repr::GeneralizedGamma { alpha } })
    }

    pub fn truncated_stable(alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self { repr: Repr::TruncatedStable { alpha } })
    }

    /// A model from an arbitrary density, with ψ and π_n computed by quadrature
    /// in `ln x` at `rel_tol = 1e-12`.
    ///
    /// Construction probes the density: it must be finite and nonnegative on a
    /// few test points, grow towards 0, and have `∫_0^1 s ρ(s) ds < ∞`. These
    /// are checks, not proofs; a density that passes can still violate the
    /// required conditions elsewhere.
    pub fn generic(density: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Result<Self> {
        Self::generic_with(density, QuadratureSpec::default().with_rel_tol(1e-12))
    }

    pub fn generic_with(
        density: impl Fn(f64) -> f64 + Send + Sync + 'static,
        quad: QuadratureSpec,
    ) -> Result<Self> {
        quad.validate()?;
        let density: Arc<DensityFn> = Arc::new(density);
        for s in [1e-9, 1e-6, 1e-3, 0.1, 0.5, 1.0] {
            let d = density(s);
            if !(d.is_finite() && d >= 0.0) {
                return Err(Error::InvalidDensity(format!("rho({s}) = {d}")));
            }
        }
        if !(density(1e-9) > density(1e-3)) {
            return Err(Error::InvalidDensity("rho does not grow towards 0".into()));
        }
        let probe = QuadratureSpec { rel_tol: 1e-6, ..quad };
        // ∫_0^1 s ρ(s) ds in t = ln s
        let first_moment = log_integrate_line(
            |t: f64| if t > 0.0 { f64::NEG_INFINITY } else { 2.0 * t + ln_rho(&*density, t) },
            &probe,
        )
        .map_err(|e| Error::InvalidDensity(format!("int_0^1 s rho(s) ds failed: {e}")))?
        .log_value;
        if !first_moment.is_finite() {
            return Err(Error::InvalidDensity("int_0^1 s rho(s) ds is not finite".into()));
        }
        Ok(Self { repr: Repr::Generic { density, quad } })
    }

    pub fn kind(&self) -> ModelKind {
        match self.repr {
            Repr::Stable { .. } => ModelKind::Stable,
            Repr::Gamma { .. } => ModelKind::Gamma,
            Repr::GeneralizedGamma { .. } => ModelKind::GeneralizedGamma,
            Repr::TruncatedStable { .. } => ModelKind::TruncatedStable,
            Repr::Generic { .. } => ModelKind::Generic,
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match self.repr {
            Repr::Stable { alpha }
            | Repr::GeneralizedGamma { alpha }
            | Repr::TruncatedStable { alpha } => Some(alpha),
            _ => None,
        }
    }

    pub fn theta(&self) -> Option<f64> {
        match self.repr {
            Repr::Gamma { theta } => Some(theta),
            _ => None,
        }
    }

    /// The Lévy density ρ(x).
    pub fn density(&self, x: f64) -> f64 {
        if !(x > 0.0) {
            return 0.0;
        }
        match &self.repr {
            Repr::Stable { alpha } => alpha / ln_gamma(1.0 - alpha).exp() * x.powf(-alpha - 1.0),
            Repr::Gamma { theta } => theta / x * (-x).exp(),
            Repr::GeneralizedGamma { alpha } => {
                alpha / ln_gamma(1.0 - alpha).exp() * x.powf(-alpha - 1.0) * (-x).exp()
            }
            Repr::TruncatedStable { alpha } => {
                if x <= 1.0 {
                    alpha * x.powf(-alpha - 1.0)
                } else {
                    0.0
                }
            }
            Repr::Generic { density, .. } => density(x),
        }
    }

    /// ψ(v) = 1 + ∫ (1 - e^{-vx}) ρ(x) dx for `v ≥ 0`.
    pub fn psi(&self, v: f64) -> Result<f64> {
        if !(v >= 0.0) || v.is_infinite() {
            return Err(Error::Domain(format!("psi needs finite v >= 0, got {v}")));
        }
        let out = match &self.repr {
            Repr::Stable { alpha } => 1.0 + v.powf(*alpha),
            Repr::Gamma { theta } => 1.0 + theta * v.ln_1p(),
            Repr::GeneralizedGamma { alpha } => (1.0 + v).powf(*alpha),
            Repr::TruncatedStable { alpha } => {
                if v == 0.0 {
                    1.0
                } else {
                    (-v).exp()
                        + (alpha * v.ln() + ln_lower_incomplete_gamma(1.0 - alpha, v)?).exp()
                }
            }
            Repr::Generic { .. } => {
                if v == 0.0 {
                    1.0
                } else {
                    self.ln_psi(v.ln()).exp()
                }
            }
        };
        if !out.is_finite() {
            return Err(Error::InvalidDensity(format!("psi({v}) is not finite")));
        }
        Ok(out)
    }

    /// ln π_n(v) for `n ≥ 1`, `v > 0`.
    pub fn log_pi_n(&self, n: u32, v: f64) -> Result<f64> {
        if n == 0 {
            return Err(Error::Domain("pi_n needs n >= 1".into()));
        }
        if !(v > 0.0) || v.is_infinite() {
            return Err(Error::Domain(format!("pi_n needs finite v > 0, got {v}")));
        }
        let nf = n as f64;
        let out = match &self.repr {
            Repr::Stable { alpha } => stable_const(*alpha, n) + (alpha - nf) * v.ln(),
            Repr::Gamma { theta } => theta.ln() + ln_gamma(nf) - nf * v.ln_1p(),
            Repr::GeneralizedGamma { alpha } => stable_const(*alpha, n) + (alpha - nf) * v.ln_1p(),
            Repr::TruncatedStable { alpha } => {
                alpha.ln() + (alpha - nf) * v.ln() + ln_lower_incomplete_gamma(nf - alpha, v)?
            }
            Repr::Generic { .. } => self.ln_tilted_moment(n, v.ln()) - nf * v.ln(),
        };
        if out.is_nan() || out == f64::INFINITY {
            return Err(Error::InvalidDensity(format!("log pi_{n}({v}) = {out}")));
        }
        Ok(out)
    }

    /// ln ψ(e^{ln_v}). NaN signals a failed quadrature for generic densities.
    pub fn ln_psi(&self, ln_v: f64) -> f64 {
        match &self.repr {
            Repr::Stable { alpha } => softplus(alpha * ln_v),
            Repr::Gamma { theta } => (theta * softplus(ln_v)).ln_1p(),
            Repr::GeneralizedGamma { alpha } => alpha * softplus(ln_v),
            Repr::TruncatedStable { alpha } => {
                let v = ln_v.exp();
                log_add_exp(-v, alpha * ln_v + ln_lower_incomplete_gamma_lnx(1.0 - alpha, ln_v))
            }
            Repr::Generic { density, quad } => {
                if ln_v == f64::NEG_INFINITY {
                    return 0.0;
                }
                let v = ln_v.exp();
                // ∫ (1 - e^{-v s}) ρ(s) ds in t = ln s
                let q = log_integrate_line(
                    |t: f64| {
                        let damp = -(-v * t.exp()).exp_m1();
                        if damp <= 0.0 {
                            f64::NEG_INFINITY
                        } else {
                            t + damp.ln() + ln_rho(&**density, t)
                        }
                    },
                    quad,
                );
                match q {
                    Ok(q) => log_add_exp(0.0, q.log_value),
                    Err(_) => f64::NAN,
                }
            }
        }
    }

    /// ln(v^n π_n(v)) at `v = e^{ln_v}`.
    pub fn ln_tilted_moment(&self, n: u32, ln_v: f64) -> f64 {
        let nf = n as f64;
        match &self.repr {
            Repr::Stable { alpha } => stable_const(*alpha, n) + alpha * ln_v,
            Repr::Gamma { theta } => theta.ln() + ln_gamma(nf) - nf * softplus(-ln_v),
            Repr::GeneralizedGamma { alpha } => {
                stable_const(*alpha, n) - nf * softplus(-ln_v) + alpha * softplus(ln_v)
            }
            Repr::TruncatedStable { alpha } => {
                alpha.ln() + alpha * ln_v + ln_lower_incomplete_gamma_lnx(nf - alpha, ln_v)
            }
            Repr::Generic { density, quad } => {
                let v = ln_v.exp();
                let q = log_integrate_line(
                    |t: f64| {
                        (nf + 1.0) * t + ln_rho(&**density, t) - v * t.exp()
                    },
                    quad,
                );
                match q {
                    Ok(q) => nf * ln_v + q.log_value,
                    Err(_) => f64::NAN,
                }
            }
        }
    }
}

/// ln ρ(e^t); `-inf` where ρ vanishes or `e^t` leaves the positive normal range.
fn ln_rho(density: &DensityFn, t: f64) -> f64 {
    let s = t.exp();
    if s == 0.0 || s.is_infinite() {
        return f64::NEG_INFINITY;
    }
    let r = density(s);
    if r > 0.0 {
        r.ln()
    } else if r == 0.0 {
        f64::NEG_INFINITY
    } else {
        f64::NAN
    }
}

/// ln(α Γ(n-α) / Γ(1-α))
#[inline]
fn stable_const(alpha: f64, n: u32) -> f64 {
    alpha.ln() + ln_gamma(n as f64 - alpha) - ln_gamma(1.0 - alpha)
}

/// A Lévy model together with the negative binomial shape `r > 0`.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub model: LevyModel,
    pub r: f64,
}

impl ModelParams {
    pub fn new(model: LevyModel, r: f64) -> Result<Self> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::InvalidParameter(format!("r must be > 0, got {r}")));
        }
        Ok(Self { model, r })
    }

    /// Two-parameter Poisson-Dirichlet PD(α, θ) as GeneralizedGamma with `r = θ/α`.
    pub fn poisson_dirichlet(alpha: f64, theta: f64) -> Result<Self> {
        if !(theta > 0.0) {
            return Err(Error::InvalidParameter(format!("theta must be > 0, got {theta}")));
        }
        Self::new(LevyModel::generalized_gamma(alpha)?, theta / alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn builtins() -> Vec<LevyModel> {
        vec![
            LevyModel::stable(0.5).unwrap(),
            LevyModel::stable(0.2).unwrap(),
            LevyModel::gamma(2.0).unwrap(),
            LevyModel::generalized_gamma(0.5).unwrap(),
            LevyModel::generalized_gamma(0.8).unwrap(),
            LevyModel::truncated_stable(0.5).unwrap(),
            LevyModel::truncated_stable(0.3).unwrap(),
        ]
    }

    #[test]
    fn psi_examples() {
        assert_eq!(LevyModel::gamma(2.0).unwrap().psi(0.0).unwrap(), 1.0);
        assert_relative_eq!(LevyModel::stable(0.5).unwrap().psi(4.0).unwrap(), 3.0, max_relative = 1e-15);
        assert_relative_eq!(
            LevyModel::generalized_gamma(0.5).unwrap().psi(3.0).unwrap(),
            2.0,
            max_relative = 1e-15
        );
    }

    #[test]
    fn psi_at_zero_is_one() {
        for m in builtins() {
            assert_eq!(m.psi(0.0).unwrap(), 1.0, "{m:?}");
            assert!(m.ln_psi(f64::NEG_INFINITY).abs() < 1e-300, "{m:?}");
        }
    }

    #[test]
    fn log_pi_examples() {
        let g = LevyModel::gamma(2.0).unwrap();
        assert_relative_eq!(g.log_pi_n(3, 1.0).unwrap(), 0.5f64.ln(), max_relative = 1e-14);
        let s = LevyModel::stable(0.5).unwrap();
        assert_relative_eq!(s.log_pi_n(1, 1.0).unwrap(), 0.5f64.ln(), max_relative = 1e-14);
        let t = LevyModel::truncated_stable(0.5).unwrap();
        assert!(t.log_pi_n(1, 1e-8).unwrap().abs() < 1e-7);
    }

    #[test]
    fn log_pi_domain_errors() {
        let m = LevyModel::stable(0.5).unwrap();
        assert!(matches!(m.log_pi_n(1, 0.0), Err(Error::Domain(_))));
        assert!(matches!(m.log_pi_n(1, -1.0), Err(Error::Domain(_))));
        assert!(matches!(m.log_pi_n(0, 1.0), Err(Error::Domain(_))));
        assert!(m.psi(-1.0).is_err());
    }

    #[test]
    fn parameter_validation() {
        assert!(LevyModel::stable(0.0).is_err());
        assert!(LevyModel::stable(1.0).is_err());
        assert!(LevyModel::generalized_gamma(f64::NAN).is_err());
        assert!(LevyModel::gamma(0.0).is_err());
        assert!(ModelParams::new(LevyModel::gamma(1.0).unwrap(), 0.0).is_err());
        assert!(ModelParams::new(LevyModel::gamma(1.0).unwrap(), -2.0).is_err());
    }

    #[test]
    fn generic_probes_reject_bad_densities() {
        assert!(matches!(LevyModel::generic(|_| f64::NAN), Err(Error::InvalidDensity(_))));
        assert!(matches!(LevyModel::generic(|_| 1.0), Err(Error::InvalidDensity(_))));
        // s ρ(s) = s^{-1.5} is not integrable at 0
        assert!(LevyModel::generic(|s: f64| s.powf(-2.5)).is_err());
        assert!(LevyModel::generic(|s: f64| s.powf(-1.5) * (-s).exp()).is_ok());
    }

    #[test]
    fn log_space_forms_agree_with_plain_forms() {
        for m in builtins() {
            for &v in &[1e-3f64, 0.3, 1.0, 7.0, 250.0] {
                assert_relative_eq!(m.ln_psi(v.ln()), m.psi(v).unwrap().ln(), max_relative = 1e-12);
                for n in 1..6 {
                    let a = m.ln_tilted_moment(n, v.ln()) - n as f64 * v.ln();
                    assert_relative_eq!(a, m.log_pi_n(n, v).unwrap(), epsilon = 1e-11, max_relative = 1e-12);
                }
            }
        }
    }

    /// A generic model built from the same density as `m`.
    fn generic_copy(m: &LevyModel) -> LevyModel {
        let m = m.clone();
        LevyModel::generic(move |x| m.density(x)).unwrap()
    }

    #[test]
    fn closed_forms_match_quadrature() {
        for m in builtins() {
            let g = generic_copy(&m);
            for &v in &[0.01, 0.1, 1.0, 10.0, 100.0] {
                assert_relative_eq!(m.psi(v).unwrap(), g.psi(v).unwrap(), max_relative = 1e-8);
                for n in 1..=10 {
                    let a = m.log_pi_n(n, v).unwrap();
                    let b = g.log_pi_n(n, v).unwrap();
                    // relative error of π_n, not of its log
                    assert!((a - b).abs() < 1e-8, "{m:?} n={n} v={v}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn generic_psi_handles_edges() {
        let g = generic_copy(&LevyModel::gamma(1.5).unwrap());
        assert_eq!(g.psi(0.0).unwrap(), 1.0);
        assert_eq!(g.kind(), ModelKind::Generic);
        assert!(g.alpha().is_none());
        assert!(g.log_pi_n(2, 0.0).is_err());
    }

    #[test]
    fn monotone_on_grid() {
        let grid: Vec<f64> = (0..60).map(|i| 10f64.powf(-3.0 + i as f64 * 0.1)).collect();
        for m in builtins() {
            for w in grid.windows(2) {
                assert!(m.psi(w[1]).unwrap() > m.psi(w[0]).unwrap(), "{m:?}");
                for n in 1..5 {
                    assert!(m.log_pi_n(n, w[1]).unwrap() < m.log_pi_n(n, w[0]).unwrap(), "{m:?}");
                }
            }
        }
    }

    #[test]
    fn extreme_arguments_stay_finite() {
        let m = LevyModel::gamma(1.0).unwrap();
        let x = 1e80;
        assert!(m.ln_psi(x).is_finite());
        assert!(m.ln_tilted_moment(3, x).is_finite());
        let t = LevyModel::truncated_stable(0.4).unwrap();
        assert!(t.ln_tilted_moment(3, -700.0).is_finite());
        assert!(t.ln_psi(800.0).is_finite());
    }

    proptest! {
        #[test]
        fn psi_up_and_pi_down(which in 0usize..7, a in -6.0f64..6.0, gap in 1e-6f64..3.0, n in 1u32..11) {
            let m = &builtins()[which];
            let (v0, v1) = (10f64.powf(a), 10f64.powf(a) * (1.0 + gap));
            prop_assert!(m.psi(v1).unwrap() >= m.psi(v0).unwrap());
            prop_assert!(m.log_pi_n(n, v1).unwrap() <= m.log_pi_n(n, v0).unwrap());
        }
    }
}
