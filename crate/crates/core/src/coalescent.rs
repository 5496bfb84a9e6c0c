//! Backward (ancestral) recursion for sample configurations.
//!
//! Going back in time a configuration `n` loses one observation from block
//! `i`: a coalescence inside the block when `n_i > 1`, the removal of a
//! singleton otherwise. The probability terms of this recursion sum to
//! `p(n)`; the continuous-time chain moves `n → n - e_i` at rate `φ(n) n_i / n`.

use crate::error::{Error, Result};
use crate::levy::ModelParams;
use crate::numerics::QuadratureSpec;
use crate::partitions::Configuration;
use crate::posterior::{integrate_ln_v, ln_g_times_v, log_eppf, predictive_weights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Coalescence,
    SingletonRemoval,
}

/// One backward step `n → n - e_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AncestralEvent {
    pub time: f64,
    pub kind: EventKind,
    /// 0-based index of the block that lost an observation.
    pub block_index: usize,
    pub config_after: Configuration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoalescentHistory {
    pub start: Configuration,
    pub events: Vec<AncestralEvent>,
    pub seed: u64,
}

impl CoalescentHistory {
    /// Configuration at backward time `t`.
    pub fn config_at(&self, t: f64) -> &Configuration {
        self.events
            .iter()
            .take_while(|e| e.time <= t)
            .last()
            .map_or(&self.start, |e| &e.config_after)
    }
}

type CustomRate = dyn Fn(&Configuration) -> f64 + Send + Sync;

/// Total event rate φ(n) of a configuration.
#[derive(Clone, Default)]
pub enum RateFunction {
    /// φ(n) = n
    #[default]
    TotalN,
    /// φ(n) = n(n-1)/2
    TotalNChoose2,
    Custom(Arc<CustomRate>),
}

impl fmt::Debug for RateFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RateFunction::TotalN => f.write_str("TotalN"),
            RateFunction::TotalNChoose2 => f.write_str("TotalNChoose2"),
            RateFunction::Custom(_) => f.write_str("Custom"),
        }
    }
}

impl RateFunction {
    pub fn custom(f: impl Fn(&Configuration) -> f64 + Send + Sync + 'static) -> Self {
        RateFunction::Custom(Arc::new(f))
    }

    pub fn rate(&self, config: &Configuration) -> Result<f64> {
        let n = config.total() as f64;
        let phi = match self {
            RateFunction::TotalN => n,
            RateFunction::TotalNChoose2 => 0.5 * n * (n - 1.0),
            RateFunction::Custom(f) => f(config),
        };
        if !(phi > 0.0 && phi.is_finite()) {
            return Err(Error::InvalidParameter(format!("rate φ({config}) = {phi} is not positive")));
        }
        Ok(phi)
    }
}

/// Unnormalized backward terms for each block and their sum.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BackwardTerms {
    pub terms: Vec<f64>,
    pub sum: f64,
    /// ln p(n), computed independently of the terms.
    pub log_eppf: f64,
    /// ln p(n - e_i) for each block.
    pub log_eppf_reduced: Vec<f64>,
}

impl BackwardTerms {
    /// Terms divided by p(n); these are `n_i / n`.
    pub fn normalized(&self) -> Vec<f64> {
        let p = self.log_eppf.exp();
        self.terms.iter().map(|t| t / p).collect()
    }

    /// Term `i` divided by p(n - e_i).
    pub fn ratio(&self, i: usize) -> f64 {
        self.terms[i] / self.log_eppf_reduced[i].exp()
    }

    /// `|Σ terms - p(n)| / p(n)`.
    pub fn residual(&self) -> f64 {
        let p = self.log_eppf.exp();
        (self.sum - p).abs() / p
    }
}

fn require_two(config: &Configuration) -> Result<()> {
    if config.total() < 2 {
        return Err(Error::Domain(format!("backward step needs n >= 2, got {config}")));
    }
    Ok(())
}

/// For each block `i`, the probability of arriving at `n` from `n - e_i`:
/// `(n_i/n)(1/(n-1)) ω_i(n - e_i)` if `n_i > 1`, `(1/n) ω_0(n - e_i)` if `n_i = 1`.
pub fn backward_event_probabilities(params: &ModelParams, config: &Configuration) -> Result<BackwardTerms> {
    require_two(config)?;
    let n = config.total() as f64;
    let mut terms = Vec::with_capacity(config.k());
    let mut reduced_logs = Vec::with_capacity(config.k());
    for (i, &ni) in config.counts().iter().enumerate() {
        let reduced = config.remove_one(i).expect("n >= 2");
        let w = predictive_weights(params, &reduced)?;
        let t = if ni > 1 {
            ni as f64 / n / (n - 1.0) * w.omega[i]
        } else {
            w.omega0 / n
        };
        terms.push(t);
        reduced_logs.push(w.log_eppf);
    }
    Ok(BackwardTerms {
        sum: terms.iter().sum(),
        terms,
        log_eppf: log_eppf(params, config)?,
        log_eppf_reduced: reduced_logs,
    })
}

/// Backward term for block `i` over p(n - e_i), as a direct ratio of two integrals.
pub fn ratio_integrals(params: &ModelParams, config: &Configuration, i: usize) -> Result<f64> {
    require_two(config)?;
    if i >= config.k() {
        return Err(Error::Domain(format!("block index {i} out of range for {config}")));
    }
    let quad = QuadratureSpec::default();
    let m = &params.model;
    let r = params.r;
    let n = config.total() as f64;
    let k = config.k() as f64;
    let ni = config.counts()[i];
    let reduced = config.remove_one(i).expect("n >= 2");
    let rc = reduced.counts();
    let denom = integrate_ln_v(params, &quad, |x| ln_g_times_v(m, r, rc, x))?;
    if ni > 1 {
        let num = integrate_ln_v(params, &quad, |x| {
            m.ln_tilted_moment(ni, x) - m.ln_tilted_moment(ni - 1, x) + ln_g_times_v(m, r, rc, x)
        })?;
        Ok(ni as f64 / (n * (n - 1.0)) * (num - denom).exp())
    } else {
        let num = integrate_ln_v(params, &quad, |x| {
            m.ln_tilted_moment(1, x) - m.ln_psi(x) + ln_g_times_v(m, r, rc, x)
        })?;
        Ok((r + k - 1.0) / (n * (n - 1.0)) * (num - denom).exp())
    }
}

/// Rates `φ(n) n_i / n` of the moves `n → n - e_i`.
pub fn transition_rates(config: &Configuration, phi: &RateFunction) -> Result<Vec<f64>> {
    require_two(config)?;
    let f = phi.rate(config)?;
    let n = config.total() as f64;
    Ok(config.counts().iter().map(|&c| f * c as f64 / n).collect())
}

/// One trajectory of the backward chain, run until a single observation remains.
pub fn simulate_backward(config: &Configuration, phi: &RateFunction, seed: u64) -> Result<CoalescentHistory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cur = config.clone();
    let mut t = 0.0;
    let mut events = Vec::with_capacity(config.total() as usize);
    while cur.total() > 1 {
        let rate = phi.rate(&cur)?;
        t += Exp::new(rate).expect("positive rate").sample(&mut rng);
        let mut u = rng.random_range(0..cur.total());
        let mut i = 0;
        while u >= cur.counts()[i] {
            u -= cur.counts()[i];
            i += 1;
        }
        let kind = if cur.counts()[i] > 1 {
            EventKind::Coalescence
        } else {
            EventKind::SingletonRemoval
        };
        cur = cur.remove_one(i).expect("n >= 2");
        events.push(AncestralEvent {
            time: t,
            kind,
            block_index: i,
            config_after: cur.clone(),
        });
    }
    Ok(CoalescentHistory {
        start: config.clone(),
        events,
        seed,
    })
}

/// Monte Carlo estimate of `E[h0(n(t))]` and its standard error, with seeds `seed + j`.
pub fn mc_h_estimate(
    config: &Configuration,
    phi: &RateFunction,
    h0: &(dyn Fn(&Configuration) -> f64 + Sync),
    t: f64,
    trajectories: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if trajectories < 2 {
        return Err(Error::Domain("need at least two trajectories".into()));
    }
    let vals = (0..trajectories as u64)
        .into_par_iter()
        .map(|j| simulate_backward(config, phi, seed.wrapping_add(j)).map(|h| h0(h.config_at(t))))
        .collect::<Result<Vec<f64>>>()?;
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
    Ok((m, (var / vals.len() as f64).sqrt()))
}

/// Largest total count accepted by [`h_solver_exact`].
pub const H_SOLVER_MAX_N: u32 = 12;

/// `h0` equal to one on the terminal configuration `(1)`, zero elsewhere.
pub fn terminal_indicator(c: &Configuration) -> f64 {
    if c.total() == 1 {
        1.0
    } else {
        0.0
    }
}

struct Lattice {
    rates: Vec<Vec<(usize, f64)>>,
    total: Vec<f64>,
}

impl Lattice {
    fn build(start: &Configuration, phi: &RateFunction) -> Result<(Self, Vec<Configuration>)> {
        let mut index: HashMap<Configuration, usize> = HashMap::new();
        let mut states = vec![start.clone()];
        index.insert(start.clone(), 0);
        let mut rates = Vec::new();
        let mut total = Vec::new();
        let mut j = 0;
        while j < states.len() {
            let c = states[j].clone();
            let mut out = Vec::new();
            let mut tot = 0.0;
            if c.total() > 1 {
                for (i, r) in transition_rates(&c, phi)?.into_iter().enumerate() {
                    let next = c.remove_one(i).expect("n >= 2");
                    let id = *index.entry(next.clone()).or_insert_with(|| {
                        states.push(next);
                        states.len() - 1
                    });
                    out.push((id, r));
                    tot += r;
                }
            }
            rates.push(out);
            total.push(tot);
            j += 1;
        }
        Ok((Self { rates, total }, states))
    }

    fn derivative(&self, h: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            let mut d = -self.total[j] * h[j];
            for &(to, r) in &self.rates[j] {
                d += r * h[to];
            }
            *o = d;
        }
    }

    fn rk4(&self, h: &[f64], dt: f64) -> Vec<f64> {
        let n = h.len();
        let mut k1 = vec![0.0; n];
        let mut k2 = vec![0.0; n];
        let mut k3 = vec![0.0; n];
        let mut k4 = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        self.derivative(h, &mut k1);
        for j in 0..n {
            tmp[j] = h[j] + 0.5 * dt * k1[j];
        }
        self.derivative(&tmp, &mut k2);
        for j in 0..n {
            tmp[j] = h[j] + 0.5 * dt * k2[j];
        }
        self.derivative(&tmp, &mut k3);
        for j in 0..n {
            tmp[j] = h[j] + dt * k3[j];
        }
        self.derivative(&tmp, &mut k4);
        (0..n)
            .map(|j| h[j] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]))
            .collect()
    }
}

/// Absolute error target of the step-doubling RK4 integrator.
pub const H_SOLVER_TOL: f64 = 1e-10;

/// `H(config, t)` for each `t` in `t_grid`, where
/// `dH(n)/dt = φ(n) (-H(n) + Σ_i (n_i/n) H(n - e_i))` and `H(n, 0) = h0(n)`.
pub fn h_solver_exact(
    config: &Configuration,
    phi: &RateFunction,
    h0: &dyn Fn(&Configuration) -> f64,
    t_grid: &[f64],
) -> Result<Vec<f64>> {
    if config.total() > H_SOLVER_MAX_N {
        return Err(Error::TooLarge(format!(
            "lattice for n = {} is too large (max {H_SOLVER_MAX_N}); use Monte Carlo (simulate_backward)",
            config.total()
        )));
    }
    if let Some(t) = t_grid.iter().find(|t| !(**t >= 0.0 && t.is_finite())) {
        return Err(Error::Domain(format!("times must be finite and >= 0, got {t}")));
    }
    let (lat, states) = Lattice::build(config, phi)?;
    let mut h: Vec<f64> = states.iter().map(h0).collect();
    let max_rate = lat.total.iter().cloned().fold(0.0, f64::max).max(1e-300);
    let mut order: Vec<usize> = (0..t_grid.len()).collect();
    order.sort_by(|&a, &b| t_grid[a].total_cmp(&t_grid[b]));
    let mut out = vec![0.0; t_grid.len()];
    let mut t = 0.0;
    let mut dt = 0.05 / max_rate;
    for &idx in &order {
        let target = t_grid[idx];
        while t < target {
            let step = dt.min(target - t);
            let full = lat.rk4(&h, step);
            let half = lat.rk4(&lat.rk4(&h, 0.5 * step), 0.5 * step);
            let err = full.iter().zip(&half).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / 15.0;
            if err <= H_SOLVER_TOL || step < 1e-12 {
                h = half.iter().zip(&full).map(|(b, a)| b + (b - a) / 15.0).collect();
                t += step;
                if step == dt {
                    dt *= (0.9 * (H_SOLVER_TOL / err.max(1e-300)).powf(0.2)).clamp(1.0, 4.0);
                }
            } else {
                dt = step * (0.9 * (H_SOLVER_TOL / err).powf(0.2)).clamp(0.1, 0.9);
            }
        }
        out[idx] = h[0];
    }
    Ok(out)
}

/// Newick-style topology of the genealogy implied by a history.
///
/// Leaves `s1, s2, …` are assigned to blocks in order. A coalescence merges
/// two lineages of the block chosen uniformly at random; a singleton removal
/// closes that lineage's subtree. The closed subtrees and the last lineage
/// are joined at the root.
pub fn to_newick(history: &CoalescentHistory) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(history.seed);
    rng.set_stream(1);
    let mut next = 1;
    let mut blocks: Vec<Vec<String>> = history
        .start
        .counts()
        .iter()
        .map(|&c| {
            (0..c)
                .map(|_| {
                    let s = format!("s{next}");
                    next += 1;
                    s
                })
                .collect()
        })
        .collect();
    let mut closed = Vec::new();
    for e in &history.events {
        let b = &mut blocks[e.block_index];
        match e.kind {
            EventKind::Coalescence => {
                let i = rng.random_range(0..b.len());
                let j = (i + rng.random_range(1..b.len())) % b.len();
                let (lo, hi) = (i.min(j), i.max(j));
                let y = b.remove(hi);
                let x = b.remove(lo);
                b.insert(lo, format!("({x},{y})"));
            }
            EventKind::SingletonRemoval => {
                closed.push(b.pop().expect("singleton block"));
                blocks.remove(e.block_index);
            }
        }
    }
    closed.extend(blocks.into_iter().flatten());
    if closed.len() == 1 {
        format!("{};", closed[0])
    } else {
        format!("({});", closed.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levy::LevyModel;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cfg(c: &[u32]) -> Configuration {
        Configuration::new(c.to_vec()).unwrap()
    }

    #[test]
    fn pd_backward_example() {
        let p = ModelParams::poisson_dirichlet(0.5, 1.0).unwrap();
        let b = backward_event_probabilities(&p, &cfg(&[3, 1])).unwrap();
        assert_relative_eq!(b.ratio(0), 0.28125, epsilon = 1e-8);
        assert_relative_eq!(b.ratio(1), 0.09375, epsilon = 1e-8);
        let norm = b.normalized();
        assert_relative_eq!(norm[0], 0.75, epsilon = 1e-8);
        assert_relative_eq!(norm[1], 0.25, epsilon = 1e-8);
        assert!(b.residual() < 1e-8);
        assert_relative_eq!(ratio_integrals(&p, &cfg(&[3, 1]), 0).unwrap(), 0.28125, epsilon = 1e-8);
        assert_relative_eq!(ratio_integrals(&p, &cfg(&[3, 1]), 1).unwrap(), 0.09375, epsilon = 1e-8);
    }

    #[test]
    fn both_ratio_routes_agree() {
        let p = ModelParams::new(LevyModel::truncated_stable(0.4).unwrap(), 1.7).unwrap();
        let c = cfg(&[2, 1, 3, 1]);
        let b = backward_event_probabilities(&p, &c).unwrap();
        for i in 0..c.k() {
            assert_relative_eq!(b.ratio(i), ratio_integrals(&p, &c, i).unwrap(), max_relative = 1e-8);
        }
        assert!(b.residual() < 1e-6);
    }

    #[test]
    fn backward_needs_two() {
        let p = ModelParams::poisson_dirichlet(0.5, 1.0).unwrap();
        assert!(backward_event_probabilities(&p, &cfg(&[1])).is_err());
        assert!(ratio_integrals(&p, &cfg(&[2]), 1).is_err());
    }

    #[test]
    fn rate_examples() {
        assert_eq!(transition_rates(&cfg(&[2, 1]), &RateFunction::TotalN).unwrap(), vec![2.0, 1.0]);
        assert_eq!(transition_rates(&cfg(&[4]), &RateFunction::TotalNChoose2).unwrap(), vec![6.0]);
        let bad = RateFunction::custom(|_| 0.0);
        assert!(transition_rates(&cfg(&[2]), &bad).is_err());
    }

    proptest! {
        #[test]
        fn rates_sum_to_phi(counts in proptest::collection::vec(1u32..6, 1..6)) {
            let c = Configuration::new(counts).unwrap();
            prop_assume!(c.total() >= 2);
            for phi in [RateFunction::TotalN, RateFunction::TotalNChoose2, RateFunction::custom(|c| 0.3 + c.k() as f64)] {
                let s: f64 = transition_rates(&c, &phi).unwrap().iter().sum();
                let f = phi.rate(&c).unwrap();
                prop_assert!((s - f).abs() <= 1e-12 * f);
            }
        }

        #[test]
        fn histories_step_down_to_one(counts in proptest::collection::vec(1u32..5, 1..5), seed in 0u64..500) {
            let c = Configuration::new(counts).unwrap();
            let h = simulate_backward(&c, &RateFunction::TotalN, seed).unwrap();
            let mut prev = c.clone();
            let mut t = 0.0;
            for e in &h.events {
                prop_assert_eq!(e.config_after.total() + 1, prev.total());
                prop_assert!(e.time > t);
                let before = prev.counts()[e.block_index];
                match e.kind {
                    EventKind::Coalescence => prop_assert!(before > 1),
                    EventKind::SingletonRemoval => prop_assert_eq!(before, 1),
                }
                t = e.time;
                prev = e.config_after.clone();
            }
            prop_assert_eq!(prev.total(), 1);
            let nw = to_newick(&h);
            prop_assert_eq!(nw.matches('s').count() as u32, c.total());
            prop_assert_eq!(nw.matches('(').count(), nw.matches(')').count());
        }
    }

    #[test]
    fn simulate_examples() {
        assert!(simulate_backward(&cfg(&[1]), &RateFunction::TotalN, 0).unwrap().events.is_empty());
        let h = simulate_backward(&cfg(&[5]), &RateFunction::TotalN, 3).unwrap();
        assert_eq!(h.events.len(), 4);
        assert!(h.events.iter().all(|e| e.kind == EventKind::Coalescence));
        for seed in 0..20 {
            let h = simulate_backward(&cfg(&[1, 1, 1, 1]), &RateFunction::TotalNChoose2, seed).unwrap();
            assert_eq!(h.events[0].kind, EventKind::SingletonRemoval);
        }
        assert_eq!(h, simulate_backward(&cfg(&[5]), &RateFunction::TotalN, 3).unwrap());
    }

    #[test]
    fn event_json_fields() {
        let h = simulate_backward(&cfg(&[2, 1]), &RateFunction::TotalN, 1).unwrap();
        let js = serde_json::to_value(&h.events[0]).unwrap();
        for f in ["time", "kind", "block_index", "config_after"] {
            assert!(js.get(f).is_some());
        }
    }

    #[test]
    fn h_constant_is_preserved() {
        let ts = [0.0, 0.1, 1.0, 3.0, 10.0];
        let h = h_solver_exact(&cfg(&[2, 1, 3, 1]), &RateFunction::TotalN, &|_| 1.0, &ts).unwrap();
        for v in h {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn h_two_state_closed_form() {
        let h0 = |c: &Configuration| if c.total() == 2 { 3.0 } else { -1.0 };
        let ts = [2.0, 0.0, 0.3, 1.1];
        let got = h_solver_exact(&cfg(&[2]), &RateFunction::TotalN, &h0, &ts).unwrap();
        for (g, t) in got.iter().zip(ts) {
            let e = (-2.0 * t).exp();
            assert!((g - (3.0 * e - (1.0 - e))).abs() < 1e-9, "t={t}: {g}");
        }
    }

    #[test]
    fn h_matches_monte_carlo() {
        let c = cfg(&[2, 1, 1, 1]);
        let phi = RateFunction::TotalN;
        let h0 = |c: &Configuration| c.k() as f64;
        let t = 0.4;
        let exact = h_solver_exact(&c, &phi, &h0, &[t]).unwrap()[0];
        let (m, se) = mc_h_estimate(&c, &phi, &h0, t, 10_000, 77).unwrap();
        assert!((m - exact).abs() < 3.0 * se, "{m} ± {se} vs {exact}");
    }

    #[test]
    fn h_solver_rejects_large_and_negative() {
        assert!(matches!(
            h_solver_exact(&cfg(&[13]), &RateFunction::TotalN, &terminal_indicator, &[1.0]),
            Err(Error::TooLarge(_))
        ));
        assert!(h_solver_exact(&cfg(&[3]), &RateFunction::TotalN, &terminal_indicator, &[-1.0]).is_err());
    }

    #[test]
    fn newick_examples() {
        let h = simulate_backward(&cfg(&[2]), &RateFunction::TotalN, 0).unwrap();
        assert_eq!(to_newick(&h), "(s1,s2);");
        let h = simulate_backward(&cfg(&[1, 1, 1]), &RateFunction::TotalN, 0).unwrap();
        let nw = to_newick(&h);
        assert!(nw.starts_with('(') && nw.ends_with(");"));
        assert_eq!(nw.matches(',').count(), 2);
    }
}
