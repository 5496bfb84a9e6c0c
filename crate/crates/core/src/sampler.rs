//! Sequential urn scheme: alternate draws of the auxiliary variable `V` and
//! of the next observation's block.
//!
//! By default `V` is drawn from `W(v) g_r(v, n)`, where `W` is the total
//! unnormalized weight of the conditional rule at `v`. With that draw the
//! block choice has exactly the predictive law `ω / p(n)`. Drawing `V` from
//! `g_r(v, n)` alone and then normalizing the weights is available as
//! [`VDraw::Posterior`]; it reproduces the EPPF only in special cases.

use crate::error::{Error, Result};
use crate::levy::ModelParams;
use crate::numerics::{GridSampler, GridSpec};
use crate::partitions::{AfsVector, Configuration};
use crate::posterior::ln_g_times_v;
use crate::special::log_sum_exp;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::{Arc, Mutex};

/// Coefficient on the new-block weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NewBlockWeight {
    /// `r + k`, with `k` the current number of blocks.
    #[default]
    Blocks,
    /// `r + ℓ`, with `ℓ` the current number of observations.
    Observations,
}

/// Density used for each draw of `V`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum VDraw {
    /// `W(v) g_r(v, n)`; exact.
    #[default]
    Tilted,
    /// `g_r(v, n)`.
    Posterior,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GibbsOptions {
    pub v_draw: VDraw,
    pub new_block: NewBlockWeight,
    pub record_v_trace: bool,
    pub grid: GridSpec,
}

/// State of one chain.
#[derive(Debug, Clone)]
pub struct ChainState {
    /// Block counts in order of appearance; empty before the first observation.
    pub counts: Vec<u32>,
    /// ln of the current auxiliary variable.
    pub ln_v: f64,
    /// Observations drawn so far.
    pub step: u32,
    rng: ChaCha8Rng,
}

impl ChainState {
    pub fn new(seed: u64) -> Self {
        Self {
            counts: Vec::new(),
            ln_v: f64::NAN,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn v(&self) -> f64 {
        self.ln_v.exp()
    }

    pub fn config(&self) -> Option<Configuration> {
        Configuration::new(self.counts.clone()).ok()
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Final state of a chain, written as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsSampleRecord {
    pub seed: u64,
    pub n: u32,
    pub k: usize,
    #[serde(rename = "counts")]
    pub final_config: Configuration,
    pub afs: AfsVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_trace: Option<Vec<f64>>,
}

fn coefficient(params: &ModelParams, counts: &[u32], rule: NewBlockWeight) -> f64 {
    match rule {
        NewBlockWeight::Blocks => params.r + counts.len() as f64,
        NewBlockWeight::Observations => params.r + counts.iter().sum::<u32>() as f64,
    }
}

/// `ln(v · w)` for the new block followed by each existing block, at `v = e^{ln_v}`.
fn log_rule_weights(params: &ModelParams, counts: &[u32], ln_v: f64, rule: NewBlockWeight) -> Vec<f64> {
    let m = &params.model;
    let mut out = Vec::with_capacity(counts.len() + 1);
    out.push(coefficient(params, counts, rule).ln() + m.ln_tilted_moment(1, ln_v) - m.ln_psi(ln_v));
    for &c in counts {
        out.push(m.ln_tilted_moment(c + 1, ln_v) - m.ln_tilted_moment(c, ln_v));
    }
    out
}

/// Conditional probabilities `(new, block 1, …, block k)` given `v`.
pub fn urn_probabilities(
    params: &ModelParams,
    counts: &[u32],
    v: f64,
    rule: NewBlockWeight,
) -> Result<Vec<f64>> {
    if !(v > 0.0) {
        return Err(Error::Domain(format!("urn weights need v > 0, got {v}")));
    }
    probabilities_at(params, counts, v.ln(), rule)
}

fn probabilities_at(params: &ModelParams, counts: &[u32], ln_v: f64, rule: NewBlockWeight) -> Result<Vec<f64>> {
    let lw = log_rule_weights(params, counts, ln_v, rule);
    if lw.iter().any(|w| w.is_nan()) {
        return Err(Error::InvalidDensity(format!("urn weight is NaN at ln v = {ln_v}")));
    }
    let lse = log_sum_exp(&lw);
    Ok(lw.iter().map(|w| (w - lse).exp()).collect())
}

fn pick<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Adds one observation using the state's current `v`.
pub fn urn_step(params: &ModelParams, mut state: ChainState, rule: NewBlockWeight) -> Result<ChainState> {
    if state.counts.is_empty() {
        state.counts.push(1);
    } else {
        let probs = probabilities_at(params, &state.counts, state.ln_v, rule)?;
        match pick(&probs, &mut state.rng) {
            0 => state.counts.push(1),
            i => state.counts[i - 1] += 1,
        }
    }
    state.step += 1;
    Ok(state)
}

fn build_grid(
    params: &ModelParams,
    counts: &[u32],
    tilt: Option<NewBlockWeight>,
    grid: &GridSpec,
) -> Result<GridSampler> {
    let m = &params.model;
    let r = params.r;
    let g = GridSampler::build(
        |x| {
            let base = ln_g_times_v(m, r, counts, x);
            match tilt {
                None => base,
                Some(rule) => base + log_sum_exp(&log_rule_weights(params, counts, x, rule)),
            }
        },
        grid,
    );
    g.map_err(|e| match e {
        Error::DegenerateGrid(msg) if params.model.kind() == crate::ModelKind::Generic => {
            Error::InvalidDensity(msg)
        }
        e => e,
    })
}

/// Reusable sampler for the density proportional to `g_r(v, config)`.
#[derive(Debug, Clone)]
pub struct VSampler {
    grid: GridSampler,
}

impl VSampler {
    pub fn new(params: &ModelParams, config: &Configuration) -> Result<Self> {
        Self::with_grid(params, config, &GridSpec::default())
    }

    pub fn with_grid(params: &ModelParams, config: &Configuration, grid: &GridSpec) -> Result<Self> {
        Ok(Self {
            grid: build_grid(params, config.counts(), None, grid)?,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.grid.sample(rng).exp()
    }

    /// A draw of `ln V`; unaffected by overflow of `V` itself.
    pub fn sample_ln<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.grid.sample(rng)
    }
}

/// One draw from the density proportional to `g_r(v, config)`.
/// Use [`VSampler`] for repeated draws.
pub fn sample_v<R: Rng + ?Sized>(params: &ModelParams, config: &Configuration, rng: &mut R) -> Result<f64> {
    Ok(VSampler::new(params, config)?.sample(rng))
}

type GridKey = (bool, Vec<u32>);

/// Runs urn chains for one model, caching the `V` grids by configuration.
pub struct GibbsSampler {
    params: ModelParams,
    options: GibbsOptions,
    grids: Mutex<HashMap<GridKey, Arc<GridSampler>>>,
}

impl GibbsSampler {
    pub fn new(params: ModelParams, options: GibbsOptions) -> Self {
        Self {
            params,
            options,
            grids: Mutex::new(HashMap::new()),
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn options(&self) -> &GibbsOptions {
        &self.options
    }

    fn grid(&self, counts: &[u32], tilted: bool) -> Result<Arc<GridSampler>> {
        let mut key = counts.to_vec();
        key.sort_unstable_by(|a, b| b.cmp(a));
        let key = (tilted, key);
        if let Some(g) = self.grids.lock().unwrap().get(&key) {
            return Ok(g.clone());
        }
        let tilt = tilted.then_some(self.options.new_block);
        let g = Arc::new(build_grid(&self.params, &key.1, tilt, &self.options.grid)?);
        self.grids.lock().unwrap().insert(key, g.clone());
        Ok(g)
    }

    /// Draws `V` for the state's current configuration.
    pub fn draw_v(&self, state: &mut ChainState) -> Result<()> {
        let tilted = self.options.v_draw == VDraw::Tilted && !state.counts.is_empty();
        let counts: &[u32] = if state.counts.is_empty() { &[1] } else { &state.counts };
        let g = self.grid(counts, tilted)?;
        state.ln_v = g.sample(&mut state.rng);
        Ok(())
    }

    pub fn run_chain(&self, n_target: u32, seed: u64) -> Result<GibbsSampleRecord> {
        if n_target == 0 {
            return Err(Error::Domain("n_target must be >= 1".into()));
        }
        let mut state = ChainState::new(seed);
        let mut trace = self.options.record_v_trace.then(Vec::new);
        // V_0 from g_r(·, (1)); the first observation always opens a block.
        self.draw_v(&mut state)?;
        if let Some(t) = trace.as_mut() {
            t.push(state.v());
        }
        state = urn_step(&self.params, state, self.options.new_block)?;
        while state.step < n_target {
            self.draw_v(&mut state)?;
            if let Some(t) = trace.as_mut() {
                t.push(state.v());
            }
            state = urn_step(&self.params, state, self.options.new_block)?;
        }
        let final_config = Configuration::new(state.counts)?;
        Ok(GibbsSampleRecord {
            seed,
            n: n_target,
            k: final_config.k(),
            afs: final_config.afs(),
            final_config,
            v_trace: trace,
        })
    }

    /// Chains with seeds `seed, seed+1, …`, run in parallel, returned in seed order.
    pub fn run_many(&self, n_target: u32, replications: usize, seed: u64) -> Result<Vec<GibbsSampleRecord>> {
        (0..replications as u64)
            .into_par_iter()
            .map(|i| self.run_chain(n_target, seed.wrapping_add(i)))
            .collect()
    }
}

/// One chain with default options.
pub fn run_chain(params: &ModelParams, n_target: u32, seed: u64) -> Result<GibbsSampleRecord> {
    GibbsSampler::new(params.clone(), GibbsOptions::default()).run_chain(n_target, seed)
}

/// Monte Carlo histogram of the number of blocks `K_n`; entry `k` counts chains
/// that ended with `k` blocks (entry 0 is always zero).
pub fn kn_posterior_mc(params: &ModelParams, n: u32, replications: usize, seed: u64) -> Result<Vec<u64>> {
    if replications == 0 {
        return Err(Error::Domain("replications must be >= 1".into()));
    }
    let sampler = GibbsSampler::new(params.clone(), GibbsOptions::default());
    let mut hist = vec![0u64; n as usize + 1];
    for rec in sampler.run_many(n, replications, seed)? {
        hist[rec.k] += 1;
    }
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levy::LevyModel;
    use crate::posterior::{integrate_ln_v, log_eppf};
    use crate::numerics::QuadratureSpec;
    use crate::special::ln_gamma;
    use approx::assert_relative_eq;

    fn cfg(c: &[u32]) -> Configuration {
        Configuration::new(c.to_vec()).unwrap()
    }

    fn gg(alpha: f64, r: f64) -> ModelParams {
        ModelParams::new(LevyModel::generalized_gamma(alpha).unwrap(), r).unwrap()
    }

    #[test]
    fn urn_probability_example() {
        let p = gg(0.5, 2.0);
        let pi1 = 0.5 * 2f64.powf(-0.5);
        let pi2 = 0.5 * (ln_gamma(1.5) - ln_gamma(0.5)).exp() * 2f64.powf(-1.5);
        let psi = 2f64.sqrt();
        let new = 3.0 * pi1 / psi;
        let expected = new / (new + pi2 / pi1);
        let probs = urn_probabilities(&p, &[1], 1.0, NewBlockWeight::Blocks).unwrap();
        assert_relative_eq!(probs[0], expected, max_relative = 1e-12);
        assert_relative_eq!(probs.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn first_step_opens_a_block() {
        let p = gg(0.5, 2.0);
        let s = urn_step(&p, ChainState::new(3), NewBlockWeight::Blocks).unwrap();
        assert_eq!(s.counts, vec![1]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn single_observation_chain() {
        let rec = run_chain(&gg(0.5, 2.0), 1, 11).unwrap();
        assert_eq!(rec.final_config, Configuration::singleton());
        assert_eq!(rec.k, 1);
        assert!(run_chain(&gg(0.5, 2.0), 0, 11).is_err());
    }

    #[test]
    fn chains_are_reproducible() {
        let opts = GibbsOptions { record_v_trace: true, ..Default::default() };
        let s = GibbsSampler::new(gg(0.3, 1.0), opts);
        let a = s.run_chain(12, 5).unwrap();
        let b = GibbsSampler::new(gg(0.3, 1.0), opts).run_chain(12, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.final_config.total(), 12);
        assert_eq!(a.v_trace.as_ref().unwrap().len(), 12);
    }

    #[test]
    fn record_json_fields() {
        let rec = run_chain(&gg(0.5, 2.0), 3, 1).unwrap();
        let js: serde_json::Value = serde_json::to_value(&rec).unwrap();
        for f in ["seed", "n", "k", "counts", "afs"] {
            assert!(js.get(f).is_some(), "{f}");
        }
        assert!(js.get("v_trace").is_none());
        let back: GibbsSampleRecord = serde_json::from_value(js).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn pair_frequency_matches_eppf() {
        let s = GibbsSampler::new(gg(0.5, 2.0), GibbsOptions::default());
        let recs = s.run_many(2, 100_000, 0).unwrap();
        let hits = recs.iter().filter(|r| r.k == 1).count() as f64 / recs.len() as f64;
        let se = (0.25f64 * 0.75 / recs.len() as f64).sqrt();
        assert!((hits - 0.25).abs() < 3.0 * se, "{hits}");
    }

    #[test]
    fn stable_kn_histogram() {
        let p = ModelParams::new(LevyModel::stable(0.5).unwrap(), 3.0).unwrap();
        let h = kn_posterior_mc(&p, 3, 40_000, 9).unwrap();
        assert_eq!(h.iter().sum::<u64>(), 40_000);
        let f = h[1] as f64 / 40_000.0;
        let se = (0.375f64 * 0.625 / 40_000.0).sqrt();
        assert!((f - 0.375).abs() < 3.0 * se, "{f}");
        let h1 = kn_posterior_mc(&p, 1, 10, 9).unwrap();
        assert_eq!(h1, vec![0, 10]);
    }

    /// Pearson statistic of n = 4 partition classes against the EPPF.
    fn chi_square_n4(p: &ModelParams, opts: GibbsOptions) -> f64 {
        use crate::partitions::{enumerate_afs, log_partition_coefficient};
        let chains = 100_000;
        let recs = GibbsSampler::new(p.clone(), opts).run_many(4, chains, 0).unwrap();
        enumerate_afs(4)
            .unwrap()
            .iter()
            .map(|m| {
                let e = (log_partition_coefficient(m) + log_eppf(p, &m.to_configuration()).unwrap()).exp()
                    * chains as f64;
                let o = recs.iter().filter(|r| &r.afs == m).count() as f64;
                (o - e).powi(2) / e
            })
            .sum()
    }

    #[test]
    fn only_default_variant_is_exact() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let p = ModelParams::new(LevyModel::stable(0.5).unwrap(), 1.0).unwrap();
        let pval = |o| 1.0 - ChiSquared::new(4.0).unwrap().cdf(chi_square_n4(&p, o));
        assert!(pval(GibbsOptions::default()) > 0.001);
        let literal = GibbsOptions { v_draw: VDraw::Posterior, ..Default::default() };
        assert!(pval(literal) < 1e-6);
        let by_obs = GibbsOptions { new_block: NewBlockWeight::Observations, ..Default::default() };
        assert!(pval(by_obs) < 1e-6);
    }

    /// E[V^j] and E[(ln V)^j] by quadrature.
    fn quad_moment(p: &ModelParams, c: &Configuration, f: impl Fn(f64) -> f64) -> f64 {
        let q = QuadratureSpec::default();
        let counts = c.counts();
        let base = |x: f64| ln_g_times_v(&p.model, p.r, counts, x);
        let z = log_eppf(p, c).unwrap();
        let num = integrate_ln_v(p, &q, |x| base(x) + f(x).abs().ln()).unwrap();
        num.exp() / z.exp()
    }

    #[test]
    fn single_draw_is_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_v(&gg(0.5, 2.0), &cfg(&[1]), &mut rng).unwrap() > 0.0);
    }

    #[test]
    fn v_moments_match_quadrature() {
        let p = gg(0.5, 8.0);
        let c = cfg(&[2, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let vs = VSampler::new(&p, &c).unwrap();
        let xs: Vec<f64> = (0..100_000).map(|_| vs.sample(&mut rng)).collect();
        assert!(xs.iter().all(|&x| x > 0.0));
        for j in [1, 2] {
            let exact = quad_moment(&p, &c, |x| (j as f64 * x).exp());
            let ys: Vec<f64> = xs.iter().map(|x| x.powi(j)).collect();
            let m = ys.iter().sum::<f64>() / ys.len() as f64;
            let sd = (ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / ys.len() as f64).sqrt();
            assert!((m - exact).abs() < 3.0 * sd / (ys.len() as f64).sqrt(), "j={j}: {m} vs {exact}");
        }
    }

    #[test]
    fn gamma_log_v_mean_matches_quadrature() {
        // E[V] is infinite for the gamma model, so compare E[ln V]
        let p = ModelParams::new(LevyModel::gamma(1.0).unwrap(), 2.0).unwrap();
        let c = cfg(&[2, 1]);
        let q = QuadratureSpec::default();
        let counts = c.counts();
        let z = log_eppf(&p, &c).unwrap().exp();
        let pos = integrate_ln_v(&p, &q, |x| {
            if x > 0.0 { ln_g_times_v(&p.model, p.r, counts, x) + x.ln() } else { f64::NEG_INFINITY }
        })
        .unwrap()
        .exp();
        let neg = integrate_ln_v(&p, &q, |x| {
            if x < 0.0 { ln_g_times_v(&p.model, p.r, counts, x) + (-x).ln() } else { f64::NEG_INFINITY }
        })
        .unwrap()
        .exp();
        let exact = (pos - neg) / z;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vs = VSampler::new(&p, &c).unwrap();
        let xs: Vec<f64> = (0..100_000).map(|_| vs.sample_ln(&mut rng)).collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let sd = (xs.iter().map(|y| (y - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
        assert!((m - exact).abs() < 3.0 * sd / (xs.len() as f64).sqrt(), "{m} vs {exact}");
    }
}
