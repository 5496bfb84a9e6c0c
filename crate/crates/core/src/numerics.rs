//! Log-space adaptive quadrature and grid inverse-CDF sampling.
//!
//! Every integrand is supplied as a log-density. Values are shifted by the
//! largest log value seen before exponentiation, so products of many small
//! or large factors never leave the representable range.

use crate::error::{Error, Result};
use crate::special::log_sum_exp;
use rand::Rng;
use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// Change of variables applied by [`log_integrate_halfline`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Transform {
    /// Integrate in `v` directly over dyadic panels `[0,1], [1,2], [2,4], …, 2^60`.
    None,
    /// `v = t / (1 - t)` with `t ∈ (0, 1)`.
    RationalToUnit,
    /// `v = e^x` with `x = c + sinh(z)` centred on the mode.
    #[default]
    LogScale,
}

/// Tolerances for the adaptive integrator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureSpec {
    pub rel_tol: f64,
    pub max_subdivisions: usize,
    pub transform: Transform,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            rel_tol: 1e-9,
            max_subdivisions: 2000,
            transform: Transform::LogScale,
        }
    }
}

impl QuadratureSpec {
    pub fn with_rel_tol(mut self, rel_tol: f64) -> Self {
        self.rel_tol = rel_tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.rel_tol <= 1e-2) {
            return Err(Error::InvalidParameter(format!(
                "rel_tol must lie in (0, 1e-2], got {}",
                self.rel_tol
            )));
        }
        if self.max_subdivisions == 0 {
            return Err(Error::InvalidParameter("max_subdivisions must be >= 1".into()));
        }
        Ok(())
    }
}

/// Outcome of a log-space integration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogQuadrature {
    /// Natural log of the integral; `-inf` when the integrand vanishes.
    pub log_value: f64,
    /// Estimated relative error.
    pub rel_error: f64,
    pub subdivisions: usize,
}

const GL_NODES: [f64; 5] = [
    0.148_874_338_981_631_2,
    0.433_395_394_129_247_2,
    0.679_409_568_299_024_4,
    0.865_063_366_688_984_5,
    0.973_906_528_517_171_7,
];
const GL_WEIGHTS: [f64; 5] = [
    0.295_524_224_714_752_9,
    0.269_266_719_309_996_3,
    0.219_086_362_515_982,
    0.149_451_349_150_580_6,
    0.066_671_344_308_688_1,
];

/// Headroom above the shift before values are rescaled.
const OVERFLOW_GUARD: f64 = 600.0;
/// Walk stops once the log-integrand is this far below its running maximum.
const TAIL_DROP: f64 = 50.0;
const MAX_Z: f64 = 705.0;

enum Eval {
    Value(f64),
    Rescale(f64),
}

/// Exponentiates `log_h` relative to a shift and reports when the shift is stale.
struct Shifted<'a, F: Fn(f64) -> f64> {
    log_h: &'a F,
    shift: f64,
}

impl<F: Fn(f64) -> f64> Shifted<'_, F> {
    fn gauss(&self, a: f64, b: f64) -> Result<Eval> {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut acc = 0.0;
        for (x, w) in GL_NODES.iter().zip(GL_WEIGHTS.iter()) {
            for t in [mid - half * x, mid + half * x] {
                let l = (self.log_h)(t);
                if l.is_nan() {
                    return Err(Error::NanIntegrand { at: t });
                }
                if l > self.shift + OVERFLOW_GUARD {
                    return Ok(Eval::Rescale(l));
                }
                acc += w * (l - self.shift).exp();
            }
        }
        Ok(Eval::Value(acc * half))
    }
}

#[derive(Debug, Clone, Copy)]
struct Panel {
    a: f64,
    b: f64,
    left: f64,
    right: f64,
    err: f64,
}

impl Panel {
    fn value(&self) -> f64 {
        self.left + self.right
    }
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.err == other.err
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.err.total_cmp(&other.err)
    }
}

enum Adaptive {
    Done(LogQuadrature),
    Rescale(f64),
}

macro_rules! value_or_rescale {
    ($e:expr) => {
        match $e? {
            Eval::Value(v) => v,
            Eval::Rescale(l) => return Ok(Adaptive::Rescale(l)),
        }
    };
}

fn make_panel<F: Fn(f64) -> f64>(
    s: &Shifted<'_, F>,
    a: f64,
    b: f64,
    whole: f64,
) -> Result<std::result::Result<Panel, f64>> {
    let m = 0.5 * (a + b);
    let left = match s.gauss(a, m)? {
        Eval::Value(v) => v,
        Eval::Rescale(l) => return Ok(Err(l)),
    };
    let right = match s.gauss(m, b)? {
        Eval::Value(v) => v,
        Eval::Rescale(l) => return Ok(Err(l)),
    };
    Ok(Ok(Panel {
        a,
        b,
        left,
        right,
        err: (whole - left - right).abs(),
    }))
}

/// Globally adaptive panel halving: each panel's error is the gap between its
/// one-panel and two-half-panel Gauss-Legendre values; the worst panel is split
/// until the summed error meets the relative tolerance.
fn adaptive<F: Fn(f64) -> f64>(
    log_h: &F,
    breaks: &[f64],
    shift: f64,
    spec: &QuadratureSpec,
) -> Result<Adaptive> {
    let s = Shifted { log_h, shift };
    let mut heap = BinaryHeap::with_capacity(breaks.len() * 4);
    for w in breaks.windows(2) {
        let whole = value_or_rescale!(s.gauss(w[0], w[1]));
        match make_panel(&s, w[0], w[1], whole)? {
            Ok(p) => heap.push(p),
            Err(l) => return Ok(Adaptive::Rescale(l)),
        }
    }
    let mut frozen_value = 0.0;
    let mut frozen_err = 0.0;
    let mut splits = 0usize;
    let exact_sums = |heap: &BinaryHeap<Panel>, fv: f64, fe: f64| {
        (
            fv + heap.iter().map(Panel::value).sum::<f64>(),
            fe + heap.iter().map(|p| p.err).sum::<f64>(),
        )
    };
    let (mut total, mut err) = exact_sums(&heap, 0.0, 0.0);
    loop {
        if err <= spec.rel_tol * total {
            // running sums drift; confirm before stopping
            (total, err) = exact_sums(&heap, frozen_value, frozen_err);
        }
        if total <= 0.0 && err == 0.0 {
            return Ok(Adaptive::Done(LogQuadrature {
                log_value: f64::NEG_INFINITY,
                rel_error: 0.0,
                subdivisions: splits,
            }));
        }
        if err <= spec.rel_tol * total {
            return Ok(Adaptive::Done(LogQuadrature {
                log_value: total.ln() + shift,
                rel_error: err / total,
                subdivisions: splits,
            }));
        }
        let Some(worst) = heap.pop() else {
            // everything frozen
            return Ok(Adaptive::Done(LogQuadrature {
                log_value: total.ln() + shift,
                rel_error: err / total,
                subdivisions: splits,
            }));
        };
        if splits >= spec.max_subdivisions {
            heap.push(worst);
            return Err(Error::Quadrature {
                log_estimate: total.ln() + shift,
                rel_error: err / total,
                reason: format!("{} subdivisions exhausted", spec.max_subdivisions),
            });
        }
        let m = 0.5 * (worst.a + worst.b);
        let scale = worst.a.abs().max(worst.b.abs()).max(1e-300);
        if (worst.b - worst.a) <= 64.0 * f64::EPSILON * scale {
            frozen_value += worst.value();
            frozen_err += worst.err;
            continue;
        }
        splits += 1;
        total -= worst.value();
        err -= worst.err;
        for (a, b, whole) in [(worst.a, m, worst.left), (m, worst.b, worst.right)] {
            match make_panel(&s, a, b, whole)? {
                Ok(p) => {
                    total += p.value();
                    err += p.err;
                    heap.push(p)
                }
                Err(l) => return Ok(Adaptive::Rescale(l)),
            }
        }
    }
}

fn run_adaptive<F: Fn(f64) -> f64>(
    log_h: &F,
    breaks: &[f64],
    mut shift: f64,
    spec: &QuadratureSpec,
) -> Result<LogQuadrature> {
    for _ in 0..8 {
        match adaptive(log_h, breaks, shift, spec)? {
            Adaptive::Done(q) => return Ok(q),
            Adaptive::Rescale(l) => shift = l,
        }
    }
    Err(Error::Quadrature {
        log_estimate: f64::NAN,
        rel_error: f64::INFINITY,
        reason: "log-integrand keeps growing; not integrable".into(),
    })
}

/// log ∫_a^b e^{log_h(t)} dt over a finite interval.
pub fn log_integrate_interval(
    log_h: impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    spec: &QuadratureSpec,
) -> Result<LogQuadrature> {
    spec.validate()?;
    if !(a.is_finite() && b.is_finite() && a < b) {
        return Err(Error::Domain(format!("bad interval [{a}, {b}]")));
    }
    let n0 = 16;
    let breaks: Vec<f64> = (0..=n0).map(|i| a + (b - a) * i as f64 / n0 as f64).collect();
    let mut shift = f64::NEG_INFINITY;
    for w in breaks.windows(2) {
        let l = log_h(0.5 * (w[0] + w[1]));
        if l.is_nan() {
            return Err(Error::NanIntegrand { at: 0.5 * (w[0] + w[1]) });
        }
        shift = shift.max(l);
    }
    if shift == f64::NEG_INFINITY {
        shift = 0.0;
    }
    run_adaptive(&log_h, &breaks, shift, spec)
}

#[inline]
fn ln_cosh(z: f64) -> f64 {
    let a = z.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Where the mass of a log-density on ℝ lives, in the stretched coordinate
/// `x = center + sinh(z)`.
#[derive(Debug, Clone)]
struct LineSupport {
    center: f64,
    nodes: Vec<f64>,
    max_log: f64,
}

impl LineSupport {
    fn locate(log_h: &impl Fn(f64) -> f64, step: f64) -> Result<Option<Self>> {
        let mut best = (f64::NEG_INFINITY, 0.0);
        for j in -200..=200 {
            let x = 0.5 * j as f64;
            let l = log_h(x);
            if l.is_nan() {
                return Err(Error::NanIntegrand { at: x });
            }
            if l > best.0 {
                best = (l, x);
            }
        }
        if best.0 == f64::NEG_INFINITY {
            return Ok(None);
        }
        let center = best.1;
        let lz = |z: f64| log_h(center + z.sinh()) + ln_cosh(z);
        let mut max_log = best.0;
        let mut walk = |dir: f64| -> Result<Vec<f64>> {
            let mut pts = Vec::new();
            let mut z = 0.0;
            loop {
                z += dir * step;
                if z.abs() > MAX_Z {
                    return Err(Error::Quadrature {
                        log_estimate: f64::NAN,
                        rel_error: f64::INFINITY,
                        reason: "integrand does not decay within the representable range".into(),
                    });
                }
                let l = lz(z);
                if l.is_nan() {
                    return Err(Error::NanIntegrand { at: center + z.sinh() });
                }
                pts.push(z);
                max_log = max_log.max(l);
                if l < max_log - TAIL_DROP {
                    return Ok(pts);
                }
            }
        };
        let right = walk(1.0)?;
        let left = walk(-1.0)?;
        let mut nodes: Vec<f64> = left.into_iter().rev().collect();
        nodes.push(0.0);
        nodes.extend(right);
        Ok(Some(Self {
            center,
            nodes,
            max_log,
        }))
    }

    /// Breakpoints for quadrature: every node near the centre, sparser far out.
    fn breakpoints(&self) -> Vec<f64> {
        let last = self.nodes.len() - 1;
        self.nodes
            .iter()
            .enumerate()
            .filter(|(i, z)| z.abs() <= 6.0 || i % 8 == 0 || *i == 0 || *i == last)
            .map(|(_, z)| *z)
            .collect()
    }
}

/// log ∫_ℝ e^{log_h(x)} dx for a log-integrand with (at least) integrable
/// power-law decay in `x`. The line is stretched by `x = c + sinh(z)` around
/// the scanned maximum `c`, which turns polynomial tails into exponential ones.
pub fn log_integrate_line(
    log_h: impl Fn(f64) -> f64,
    spec: &QuadratureSpec,
) -> Result<LogQuadrature> {
    spec.validate()?;
    let Some(support) = LineSupport::locate(&log_h, 0.5)? else {
        return Ok(LogQuadrature {
            log_value: f64::NEG_INFINITY,
            rel_error: 0.0,
            subdivisions: 0,
        });
    };
    let c = support.center;
    let lz = |z: f64| log_h(c + z.sinh()) + ln_cosh(z);
    run_adaptive(&lz, &support.breakpoints(), support.max_log, spec)
}

/// log ∫_0^∞ e^{log_f(v)} dv with the change of variables chosen by `spec.transform`.
///
/// `log_f` may return `-inf` (treated as an exact zero) but not NaN.
pub fn log_integrate_halfline(
    log_f: impl Fn(f64) -> f64,
    spec: &QuadratureSpec,
) -> Result<f64> {
    spec.validate()?;
    let q = match spec.transform {
        Transform::LogScale => log_integrate_line(
            |x: f64| {
                let v = x.exp();
                // mass beyond the representable range of v is dropped
                if v == 0.0 || v.is_infinite() {
                    f64::NEG_INFINITY
                } else {
                    log_f(v) + x
                }
            },
            spec,
        )?,
        Transform::RationalToUnit => log_integrate_interval(
            |t: f64| {
                if t <= 0.0 || t >= 1.0 {
                    return f64::NEG_INFINITY;
                }
                log_f(t / (1.0 - t)) - 2.0 * (-t).ln_1p()
            },
            0.0,
            1.0,
            spec,
        )?,
        Transform::None => {
            let mut breaks = vec![0.0];
            breaks.extend((0..=60).map(|j| 2f64.powi(j)));
            let mut shift = f64::NEG_INFINITY;
            for w in breaks.windows(2) {
                shift = shift.max(log_f(0.5 * (w[0] + w[1])));
            }
            if shift == f64::NEG_INFINITY {
                shift = 0.0;
            }
            let guarded = |v: f64| if v <= 0.0 { f64::NEG_INFINITY } else { log_f(v) };
            run_adaptive(&guarded, &breaks, shift, spec)?
        }
    };
    Ok(q.log_value)
}

/// Piecewise-exponential inverse-CDF sampler for an unnormalized log-density on ℝ.
///
/// The density is tabulated on the stretched coordinate `z` (`x = center + sinh z`);
/// between nodes the log-density is linear, so each cell is an exponential
/// segment that is inverted exactly.
#[derive(Debug, Clone)]
pub struct GridSampler {
    center: f64,
    z: Vec<f64>,
    lz: Vec<f64>,
    /// cumulative normalized mass at the right edge of each cell
    cdf: Vec<f64>,
    log_mass: f64,
}

/// Grid refinement settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    /// A cell is split while one- and two-segment masses differ by more than this (relative).
    pub rel_change: f64,
    pub max_cells: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            rel_change: 1e-6,
            max_cells: 200_000,
        }
    }
}

/// Mass of `exp` of a linear function on a cell of width `w` with end values `a`, `b`.
#[inline]
fn exp_linear_mass(w: f64, a: f64, b: f64) -> f64 {
    let d = b - a;
    if d.abs() < 1e-8 {
        w * a.exp() * (1.0 + 0.5 * d)
    } else {
        w * a.exp() * d.exp_m1() / d
    }
}

impl GridSampler {
    pub fn build(log_h: impl Fn(f64) -> f64, spec: &GridSpec) -> Result<Self> {
        let support = LineSupport::locate(&log_h, 0.25)?
            .ok_or_else(|| Error::DegenerateGrid("log-density is -inf on the scan grid".into()))?;
        let c = support.center;
        let floor_log = support.max_log - 800.0;
        let lz = |z: f64| {
            let l = log_h(c + z.sinh()) + ln_cosh(z) - support.max_log;
            l.max(floor_log - support.max_log)
        };
        let mut z = support.nodes.clone();
        let mut vals: Vec<f64> = z.iter().map(|&t| lz(t)).collect();
        if vals.iter().any(|v| v.is_nan()) {
            return Err(Error::DegenerateGrid("NaN log-density".into()));
        }
        loop {
            let total: f64 = z
                .windows(2)
                .zip(vals.windows(2))
                .map(|(zw, lw)| exp_linear_mass(zw[1] - zw[0], lw[0], lw[1]))
                .sum();
            if !(total > 0.0) || !total.is_finite() {
                return Err(Error::DegenerateGrid(format!("grid mass {total}")));
            }
            let floor = 1e-14 * total;
            let mut new_z = Vec::with_capacity(z.len() * 2);
            let mut new_v = Vec::with_capacity(z.len() * 2);
            let mut changed = false;
            for i in 0..z.len() - 1 {
                new_z.push(z[i]);
                new_v.push(vals[i]);
                let (a, b) = (z[i], z[i + 1]);
                let one = exp_linear_mass(b - a, vals[i], vals[i + 1]);
                let m = 0.5 * (a + b);
                let lm = lz(m);
                if lm.is_nan() {
                    return Err(Error::DegenerateGrid("NaN log-density".into()));
                }
                let two = exp_linear_mass(m - a, vals[i], lm) + exp_linear_mass(b - m, lm, vals[i + 1]);
                if (one - two).abs() > spec.rel_change * two.max(floor) && b - a > 1e-12 {
                    new_z.push(m);
                    new_v.push(lm);
                    changed = true;
                }
            }
            new_z.push(*z.last().unwrap());
            new_v.push(*vals.last().unwrap());
            z = new_z;
            vals = new_v;
            if !changed || z.len() > spec.max_cells {
                break;
            }
        }
        let masses: Vec<f64> = z
            .windows(2)
            .zip(vals.windows(2))
            .map(|(zw, lw)| exp_linear_mass(zw[1] - zw[0], lw[0], lw[1]))
            .collect();
        let total: f64 = masses.iter().sum();
        let mut acc = 0.0;
        let cdf = masses
            .iter()
            .map(|m| {
                acc += m;
                acc / total
            })
            .collect();
        Ok(Self {
            center: c,
            z,
            lz: vals,
            cdf,
            log_mass: total.ln() + support.max_log,
        })
    }

    /// Draw `x` from the normalized density.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let j = self.cdf.partition_point(|&c| c < u).min(self.cdf.len() - 1);
        let lo = if j == 0 { 0.0 } else { self.cdf[j - 1] };
        let width = self.cdf[j] - lo;
        let frac = if width > 0.0 { ((u - lo) / width).clamp(0.0, 1.0) } else { 0.5 };
        let (za, zb) = (self.z[j], self.z[j + 1]);
        let d = self.lz[j + 1] - self.lz[j];
        let t = if d.abs() < 1e-10 {
            frac
        } else {
            (frac * d.exp_m1()).ln_1p() / d
        };
        self.center + (za + t.clamp(0.0, 1.0) * (zb - za)).sinh()
    }

    /// log of the tabulated (unnormalized) mass; a coarse cross-check on quadrature.
    pub fn log_mass(&self) -> f64 {
        self.log_mass
    }

    pub fn cells(&self) -> usize {
        self.z.len() - 1
    }
}

/// `ln Σ w_i` of log-weights, then normalized probabilities.
pub fn normalize_log_weights(log_w: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(log_w);
    log_w.iter().map(|w| (w - lse).exp()).collect()
}
