use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nbpk::coalescent::{
    h_solver_exact, simulate_backward, terminal_indicator, to_newick, RateFunction,
};
use nbpk::numerics::GridSpec;
use nbpk::posterior::{log_eppf_with, predictive_weights_with};
use nbpk::sampler::{GibbsOptions, GibbsSampler, NewBlockWeight, VDraw};
use nbpk::validation::{run_suite, Suite};
use nbpk::{Configuration, LevyModel, ModelParams, QuadratureSpec};
use serde::Serialize;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

/// Seed used when `--seed` is not given.
const DEFAULT_SEED: u64 = 42;

#[derive(Parser, Debug)]
#[command(name = "nbpk", version, about = "Partitions from negative binomial Poisson-Kingman models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print ln p(n) and p(n) for each configuration
    Eppf(EppfArgs),
    /// Print raw and normalized prediction weights
    Predict(EppfArgs),
    /// Run the urn scheme and write one JSON record per chain
    Gibbs(GibbsArgs),
    /// Simulate backward histories, or solve for H on a time grid
    Coalescent(CoalescentArgs),
    /// Run identity checks and print a pass/fail table
    Validate(ValidateArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum ModelName {
    Stable,
    Gamma,
    Gengamma,
    Truncstable,
}

#[derive(Args, Debug, Clone, Serialize)]
struct ModelArgs {
    #[arg(long, value_enum)]
    model: ModelName,
    /// Index α in (0, 1) for stable, gengamma and truncstable
    #[arg(long)]
    alpha: Option<f64>,
    /// Scale θ > 0 for gamma
    #[arg(long)]
    theta: Option<f64>,
    /// Negative binomial shape r > 0
    #[arg(long, default_value_t = 1.0)]
    r: f64,
}

#[derive(Args, Debug, Clone, Serialize)]
struct CommonArgs {
    /// Write output here instead of stdout
    #[arg(long)]
    output: Option<PathBuf>,
    /// Write tables as CSV
    #[arg(long)]
    csv: bool,
    /// Print the resolved settings as JSON and exit
    #[arg(long)]
    show_config: bool,
    /// Relative tolerance of the quadrature
    #[arg(long, default_value_t = 1e-9)]
    rel_tol: f64,
    #[arg(long, default_value_t = 2000)]
    max_subdivisions: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
struct ConfigInput {
    /// Block counts, e.g. 3,2,1
    #[arg(long, conflicts_with = "counts_file")]
    counts: Option<String>,
    /// File with one comma-separated configuration per line
    #[arg(long)]
    counts_file: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct EppfArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    input: ConfigInput,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum VDrawArg {
    Tilted,
    Posterior,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum NewBlockArg {
    Blocks,
    Observations,
}

#[derive(Args, Debug, Serialize)]
struct GibbsArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Observations per chain
    #[arg(long)]
    n: u32,
    /// Number of chains; chain j uses seed + j
    #[arg(long, default_value_t = 1)]
    reps: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Record every draw of V
    #[arg(long)]
    v_trace: bool,
    /// Density for the V draws
    #[arg(long, value_enum, default_value_t = VDrawArg::Tilted)]
    v_draw: VDrawArg,
    /// Coefficient of the new-block weight: r + blocks or r + observations
    #[arg(long, value_enum, default_value_t = NewBlockArg::Blocks)]
    new_block_weight: NewBlockArg,
    /// Grid refinement target for the V sampler
    #[arg(long, default_value_t = 1e-6)]
    grid_rel_change: f64,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
enum PhiArg {
    /// φ(n) = n
    N,
    /// φ(n) = n(n-1)/2
    NChoose2,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum H0Arg {
    /// 1 on the configuration (1), 0 elsewhere
    Terminal,
    /// number of blocks
    Blocks,
    /// total count
    Total,
    /// constant 1
    One,
}

#[derive(Args, Debug, Serialize)]
struct CoalescentArgs {
    #[command(flatten)]
    input: ConfigInput,
    #[arg(long, value_enum, default_value_t = PhiArg::N)]
    phi: PhiArg,
    /// Histories per configuration; history j uses seed + j
    #[arg(long, default_value_t = 1)]
    reps: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Print one Newick tree per history instead of events
    #[arg(long)]
    newick: bool,
    /// Solve for H at these comma-separated times instead of simulating
    #[arg(long)]
    t_grid: Option<String>,
    #[arg(long, value_enum, default_value_t = H0Arg::Terminal)]
    h0: H0Arg,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug, Serialize)]
struct ValidateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// nune, nunf, pd, derivative, backward, hsolver, gibbs, vmoments, coalescent-mc or all
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 5)]
    n_max: u32,
    /// Seed for the stochastic suites
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[command(flatten)]
    common: CommonArgs,
}

/// Bad arguments discovered after parsing; reported with exit status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

impl ModelArgs {
    fn params(&self) -> anyhow::Result<ModelParams> {
        let name = self.model.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default();
        let need_alpha = || self.alpha.ok_or_else(|| usage(format!("--alpha is required for --model {name}")));
        let model = match self.model {
            ModelName::Stable => LevyModel::stable(need_alpha()?),
            ModelName::Gengamma => LevyModel::generalized_gamma(need_alpha()?),
            ModelName::Truncstable => LevyModel::truncated_stable(need_alpha()?),
            ModelName::Gamma => {
                LevyModel::gamma(self.theta.ok_or_else(|| usage("--theta is required for --model gamma"))?)
            }
        }
        .map_err(|e| usage(e.to_string()))?;
        ModelParams::new(model, self.r).map_err(|e| usage(e.to_string()))
    }
}

impl CommonArgs {
    fn quad(&self) -> anyhow::Result<QuadratureSpec> {
        let q = QuadratureSpec {
            rel_tol: self.rel_tol,
            max_subdivisions: self.max_subdivisions,
            ..QuadratureSpec::default()
        };
        q.validate().map_err(|e| usage(e.to_string()))?;
        Ok(q)
    }

    fn writer(&self) -> anyhow::Result<Box<dyn Write>> {
        Ok(match &self.output {
            Some(p) => Box::new(BufWriter::new(
                File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
            )),
            None => Box::new(BufWriter::new(io::stdout().lock())),
        })
    }
}

impl ConfigInput {
    fn configs(&self) -> anyhow::Result<Vec<Configuration>> {
        let parse = |s: &str| s.parse::<Configuration>().map_err(|e| usage(e.to_string()));
        match (&self.counts, &self.counts_file) {
            (Some(c), None) => Ok(vec![parse(c)?]),
            (None, Some(path)) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
                let out = text
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty() && !l.starts_with('#'))
                    .map(parse)
                    .collect::<anyhow::Result<Vec<_>>>()?;
                if out.is_empty() {
                    return Err(usage(format!("{} holds no configurations", path.display())));
                }
                Ok(out)
            }
            _ => Err(usage("give exactly one of --counts or --counts-file")),
        }
    }
}

/// Aligned plain-text or CSV table.
struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    fn write(&self, out: &mut dyn Write, csv: bool) -> io::Result<()> {
        if csv {
            let quote = |s: &String| if s.contains(',') { format!("\"{s}\"") } else { s.clone() };
            for r in std::iter::once(&self.header).chain(&self.rows) {
                writeln!(out, "{}", r.iter().map(quote).collect::<Vec<_>>().join(","))?;
            }
            return Ok(());
        }
        let mut widths: Vec<usize> = self.header.iter().map(|h| h.len()).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        for r in std::iter::once(&self.header).chain(&self.rows) {
            let cells: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            writeln!(out, "{}", cells.join("  ").trim_end())?;
        }
        Ok(())
    }
}

fn show_config(args: &impl Serialize, extra: serde_json::Value) -> anyhow::Result<()> {
    let mut v = serde_json::to_value(args)?;
    if let (Some(obj), serde_json::Value::Object(ext)) = (v.as_object_mut(), extra) {
        obj.extend(ext);
    }
    println!("{}", serde_json::to_string_pretty(&v)?);
    Ok(())
}

fn quad_json(q: &QuadratureSpec) -> serde_json::Value {
    serde_json::json!({ "quadrature": { "rel_tol": q.rel_tol, "max_subdivisions": q.max_subdivisions, "transform": format!("{:?}", q.transform) } })
}

fn fmt_num(x: f64) -> String {
    format!("{x:.12e}")
}

fn cmd_eppf(a: &EppfArgs) -> anyhow::Result<()> {
    let quad = a.common.quad()?;
    if a.common.show_config {
        return show_config(a, quad_json(&quad));
    }
    let params = a.model.params()?;
    let configs = a.input.configs()?;
    let mut t = Table::new(&["counts", "log_p", "p"]);
    for c in configs {
        let l = log_eppf_with(&params, &c, &quad)?;
        t.push(vec![c.to_string(), fmt_num(l), fmt_num(l.exp())]);
    }
    let mut out = a.common.writer()?;
    t.write(&mut out, a.common.csv)?;
    out.flush()?;
    Ok(())
}

fn cmd_predict(a: &EppfArgs) -> anyhow::Result<()> {
    let quad = a.common.quad()?;
    if a.common.show_config {
        return show_config(a, quad_json(&quad));
    }
    let params = a.model.params()?;
    let mut t = Table::new(&["counts", "target", "raw", "normalized"]);
    for c in a.input.configs()? {
        let w = predictive_weights_with(&params, &c, &quad)?;
        let norm = w.normalized();
        t.push(vec![c.to_string(), "new".into(), fmt_num(w.omega0), fmt_num(norm[0])]);
        for (i, raw) in w.omega.iter().enumerate() {
            t.push(vec![c.to_string(), format!("block{}", i + 1), fmt_num(*raw), fmt_num(norm[i + 1])]);
        }
    }
    let mut out = a.common.writer()?;
    t.write(&mut out, a.common.csv)?;
    out.flush()?;
    Ok(())
}

fn cmd_gibbs(a: &GibbsArgs) -> anyhow::Result<()> {
    let options = GibbsOptions {
        v_draw: match a.v_draw {
            VDrawArg::Tilted => VDraw::Tilted,
            VDrawArg::Posterior => VDraw::Posterior,
        },
        new_block: match a.new_block_weight {
            NewBlockArg::Blocks => NewBlockWeight::Blocks,
            NewBlockArg::Observations => NewBlockWeight::Observations,
        },
        record_v_trace: a.v_trace,
        grid: GridSpec {
            rel_change: a.grid_rel_change,
            ..GridSpec::default()
        },
    };
    if a.common.show_config {
        return show_config(a, serde_json::json!({ "grid": { "rel_change": options.grid.rel_change, "max_cells": options.grid.max_cells } }));
    }
    if a.n == 0 || a.reps == 0 {
        bail!(usage("--n and --reps must be >= 1"));
    }
    if !(a.grid_rel_change > 0.0 && a.grid_rel_change < 1.0) {
        bail!(usage("--grid-rel-change must lie in (0, 1)"));
    }
    let sampler = GibbsSampler::new(a.model.params()?, options);
    let records = sampler.run_many(a.n, a.reps, a.seed)?;
    let mut out = a.common.writer()?;
    for r in records {
        writeln!(out, "{}", serde_json::to_string(&r)?)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct EventLine<'a> {
    seed: u64,
    #[serde(flatten)]
    event: &'a nbpk::coalescent::AncestralEvent,
}

fn parse_times(s: &str) -> anyhow::Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            let t: f64 = p.trim().parse().map_err(|e| usage(format!("bad time {p:?}: {e}")))?;
            if !(t >= 0.0 && t.is_finite()) {
                return Err(usage(format!("times must be finite and >= 0, got {t}")));
            }
            Ok(t)
        })
        .collect()
}

fn cmd_coalescent(a: &CoalescentArgs) -> anyhow::Result<()> {
    if a.common.show_config {
        return show_config(a, serde_json::json!({ "h_solver": { "abs_tol": nbpk::coalescent::H_SOLVER_TOL, "max_n": nbpk::coalescent::H_SOLVER_MAX_N } }));
    }
    let phi = match a.phi {
        PhiArg::N => RateFunction::TotalN,
        PhiArg::NChoose2 => RateFunction::TotalNChoose2,
    };
    let configs = a.input.configs()?;
    let mut out = a.common.writer()?;
    if let Some(grid) = &a.t_grid {
        let ts = parse_times(grid)?;
        let h0: fn(&Configuration) -> f64 = match a.h0 {
            H0Arg::Terminal => terminal_indicator,
            H0Arg::Blocks => |c| c.k() as f64,
            H0Arg::Total => |c| c.total() as f64,
            H0Arg::One => |_| 1.0,
        };
        let mut t = Table::new(&["counts", "t", "H"]);
        for c in &configs {
            let hs = h_solver_exact(c, &phi, &h0, &ts)?;
            for (ti, h) in ts.iter().zip(hs) {
                t.push(vec![c.to_string(), ti.to_string(), fmt_num(h)]);
            }
        }
        t.write(&mut out, a.common.csv)?;
    } else {
        if a.reps == 0 {
            bail!(usage("--reps must be >= 1"));
        }
        for c in &configs {
            for j in 0..a.reps as u64 {
                let h = simulate_backward(c, &phi, a.seed.wrapping_add(j))?;
                if a.newick {
                    writeln!(out, "{}", to_newick(&h))?;
                } else {
                    for e in &h.events {
                        writeln!(out, "{}", serde_json::to_string(&EventLine { seed: h.seed, event: e })?)?;
                    }
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Returns whether every check passed.
fn cmd_validate(a: &ValidateArgs) -> anyhow::Result<bool> {
    if a.common.show_config {
        show_config(a, serde_json::json!({}))?;
        return Ok(true);
    }
    let suite: Suite = a.suite.parse().map_err(|e: nbpk::Error| usage(e.to_string()))?;
    if a.n_max == 0 || a.n_max > 12 {
        bail!(usage("--n-max must lie in 1..=12"));
    }
    let params = a.model.params()?;
    let checks = run_suite(suite, &params, a.n_max, a.seed)?;
    let mut t = Table::new(&["check", "value", "bound", "status"]);
    let mut all = true;
    for c in &checks {
        all &= c.passed();
        t.push(vec![
            c.name.clone(),
            format!("{:.3e}", c.value),
            format!("{}{:.0e}", if c.lower_bound { ">" } else { "<" }, c.bound),
            if c.passed() { "PASS" } else { "FAIL" }.into(),
        ]);
    }
    let mut out = a.common.writer()?;
    t.write(&mut out, a.common.csv)?;
    out.flush()?;
    Ok(all)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match &cli.command {
        Command::Eppf(a) => cmd_eppf(a).map(|_| true),
        Command::Predict(a) => cmd_predict(a).map(|_| true),
        Command::Gibbs(a) => cmd_gibbs(a).map(|_| true),
        Command::Coalescent(a) => cmd_coalescent(a).map(|_| true),
        Command::Validate(a) => cmd_validate(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}\n\nRun with --help for usage.");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {}", anyhow!(e));
            ExitCode::from(1)
        }
    }
}
