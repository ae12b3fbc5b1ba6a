//! Experiment configuration and orchestration behind the `mfg` binary.
//!
//! A run reads a TOML file, applies `--set section.key=value` overrides
//! and flags on top, fills in every default, writes the result to
//! `resolved_config.toml` in the output directory and dispatches to one
//! solver. Every run ends with `summary.json`.

mod compare;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use compare::{compare_grids, compare_runs, Comparison, FieldGrid, SliceComparison};

use crate::dgm_pde::{self, DgmConfig, DgmError, DgmNets, LossWeights, PdeProblem};
use crate::fbsde_shoot::{self, path_errors, systemic_oracle_paths, FbsdeConfig, FbsdeError, ShootingNets, SystemicRiskFbsde};
use crate::mfc_direct::{self, cost_with_stderr, policy_fit, MfcError, TrainConfig};
use crate::models::{CrowdedTradeParams, MeanFieldModel, MfgPde, ModelError, PriceImpactMfc, PriceImpactParams, SystemicRiskParams};
use crate::net::Architecture;
use crate::oracle::{
    grid_fixed_point, systemic_risk_price_of_anarchy, CrowdedTradeOracle, GridConfig, OracleError, PriceImpactOracle,
    SystemicRiskOracle, TimePath,
};
use crate::output::{write_json, OutputError, Table};
use crate::particle::{NetInputs, NetPolicy};
use crate::stats::{rel_err, variance};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("run diverged, partial artifacts kept: {0}")]
    Diverged(String),
    #[error("compare: {0}")]
    Compare(String),
    #[error(transparent)]
    Output(#[from] OutputError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mfc(#[from] MfcError),
    #[error(transparent)]
    Fbsde(#[from] FbsdeError),
    #[error(transparent)]
    Dgm(#[from] DgmError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

impl CliError {
    /// 2 for configuration errors, 3 for a diverged run, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Diverged(_) => 3,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    MfcDirect,
    FbsdeShoot,
    Dgm,
    Oracle,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::MfcDirect => "mfc-direct",
            Method::FbsdeShoot => "fbsde-shoot",
            Method::Dgm => "dgm",
            Method::Oracle => "oracle",
        }
    }

    pub fn trains(self) -> bool {
        self != Method::Oracle
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    PriceImpact,
    SystemicRisk,
    CrowdedTrade,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::PriceImpact => "price-impact",
            ModelKind::SystemicRisk => "systemic-risk",
            ModelKind::CrowdedTrade => "crowded-trade",
        }
    }

    /// Truncated state interval used when `[domain]` is absent.
    pub fn default_domain(self) -> Domain {
        let (lo, hi) = match self {
            ModelKind::PriceImpact => (-2.0, 4.0),
            ModelKind::SystemicRisk => (-3.0, 3.0),
            ModelKind::CrowdedTrade => (-2.0, 8.0),
        };
        Domain { lo, hi }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Domain {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSection {
    pub width: usize,
    /// Feed the population mean to the networks. Defaults to on for deep
    /// shooting and off otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_input: Option<bool>,
}

impl Default for NetSection {
    fn default() -> Self {
        Self {
            width: 64,
            mean_input: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleSolver {
    /// Riccati or ODE solution.
    Exact,
    /// Finite-difference fixed point of the PDE system.
    Grid,
}

/// [`GridConfig`] without the domain, which comes from `[domain]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridOptions {
    pub cells: usize,
    pub steps: usize,
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub policy_iter: usize,
}

impl Default for GridOptions {
    fn default() -> Self {
        let g = GridConfig::default();
        Self {
            cells: g.cells,
            steps: g.steps,
            damping: g.damping,
            tol: g.tol,
            max_iter: g.max_iter,
            policy_iter: g.policy_iter,
        }
    }
}

impl GridOptions {
    fn on(&self, d: Domain) -> GridConfig {
        GridConfig {
            lo: d.lo,
            hi: d.hi,
            cells: self.cells,
            steps: self.steps,
            damping: self.damping,
            tol: self.tol,
            max_iter: self.max_iter,
            policy_iter: self.policy_iter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub solver: OracleSolver,
    /// RK4 steps of the coefficient ODEs.
    pub ode_steps: usize,
    /// Time slices and state points of the written grids.
    pub snapshots: usize,
    pub points: usize,
    pub grid: GridOptions,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            solver: OracleSolver::Exact,
            ode_steps: 2000,
            snapshots: 20,
            points: 101,
            grid: GridOptions::default(),
        }
    }
}

/// Contents of a config file. Only `model` is required.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<Domain>,
    /// Model parameter overrides.
    #[serde(default)]
    pub params: toml::Table,
    #[serde(default)]
    pub net: NetSection,
    #[serde(default)]
    pub mfc: TrainConfig,
    #[serde(default)]
    pub fbsde: FbsdeConfig,
    #[serde(default)]
    pub dgm: DgmConfig,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub oracle: OracleSection,
}

/// Model parameters after overrides and validation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ModelParams {
    PriceImpact(PriceImpactParams),
    SystemicRisk(SystemicRiskParams),
    CrowdedTrade(CrowdedTradeParams),
}

impl ModelParams {
    fn parse(kind: ModelKind, table: &toml::Table) -> Result<Self, CliError> {
        fn read<T: serde::de::DeserializeOwned>(t: &toml::Table) -> Result<T, CliError> {
            toml::Value::Table(t.clone())
                .try_into()
                .map_err(|e| CliError::Config(format!("[params]: {}", e)))
        }
        let p = match kind {
            ModelKind::PriceImpact => {
                let p: PriceImpactParams = read(table)?;
                p.validate()?;
                ModelParams::PriceImpact(p)
            }
            ModelKind::SystemicRisk => {
                let p: SystemicRiskParams = read(table)?;
                p.validate()?;
                ModelParams::SystemicRisk(p)
            }
            ModelKind::CrowdedTrade => {
                let p: CrowdedTradeParams = read(table)?;
                p.validate()?;
                ModelParams::CrowdedTrade(p)
            }
        };
        Ok(p)
    }

    fn to_table(self) -> toml::Table {
        let v = match self {
            ModelParams::PriceImpact(p) => toml::Table::try_from(p),
            ModelParams::SystemicRisk(p) => toml::Table::try_from(p),
            ModelParams::CrowdedTrade(p) => toml::Table::try_from(p),
        };
        v.expect("parameter structs serialize to tables")
    }

    pub fn horizon(&self) -> f64 {
        match self {
            ModelParams::PriceImpact(p) => p.horizon,
            ModelParams::SystemicRisk(p) => p.horizon,
            ModelParams::CrowdedTrade(p) => p.horizon,
        }
    }
}

/// A config with every default filled in, ready to run.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub method: Method,
    pub config: ExperimentConfig,
    pub params: ModelParams,
    pub out: PathBuf,
    pub domain: Domain,
}

impl Resolved {
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.config).expect("resolved config serializes")
    }
}

/// Flags shared by the run subcommands.
#[derive(Args, Clone, Debug, Default, PartialEq)]
pub struct RunArgs {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed of every random stream; required for training runs.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Model name, overriding the file.
    #[arg(long)]
    pub model: Option<String>,
    /// `section.key=value` override, repeatable. Values are TOML, bare words
    /// are taken as strings.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Clone, Debug, PartialEq)]
pub struct CompareArgs {
    pub run_a: PathBuf,
    pub run_b: PathBuf,
    /// Grid to compare: `control`, `density` or `value`.
    #[arg(long, default_value = "control")]
    pub field: String,
    /// Where to write the comparison; defaults to `<run_a>/compare`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Debug, PartialEq)]
pub enum Command {
    /// Direct policy optimization of the control problem.
    RunMfc(RunArgs),
    /// Deep shooting on the forward-backward system.
    RunFbsde(RunArgs),
    /// Deep Galerkin training on the PDE system.
    RunDgm(RunArgs),
    /// Riccati/ODE or grid reference solution.
    RunOracle(RunArgs),
    /// Compare the grids of two run directories.
    Compare(CompareArgs),
}

#[derive(Parser, Clone, Debug, PartialEq)]
#[command(name = "mfg", version, about = "Solvers for mean field games and mean field control")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {}", raw))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Set `a.b.c = value`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{}` is not of the form key=value", assignment)))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override `{}` has an empty key", assignment)));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{}`: `{}` is not a section", assignment, p)))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Parse, override and resolve a config for `method`.
///
/// File errors carry the line and column; a missing `model` names the key.
pub fn load_config(method: Method, text: &str, args: &RunArgs) -> Result<Resolved, CliError> {
    // strict parse of the file alone for precise messages, unless the model
    // comes from the flags
    let mut table: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    if args.model.is_none() {
        toml::from_str::<ExperimentConfig>(text).map_err(|e| CliError::Config(e.to_string()))?;
    }
    for s in &args.set {
        apply_override(&mut table, s)?;
    }
    if let Some(m) = &args.model {
        table.insert("model".into(), toml::Value::String(m.clone()));
    }
    if let Some(seed) = args.seed {
        let v = i64::try_from(seed).map_err(|_| CliError::Config(format!("seed {} exceeds the TOML integer range", seed)))?;
        table.insert("seed".into(), toml::Value::Integer(v));
    }
    if let Some(out) = &args.out {
        table.insert("out".into(), toml::Value::String(out.display().to_string()));
    }
    let config: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| CliError::Config(format!("after overrides: {}", e)))?;
    if method.trains() && args.seed.is_none() {
        return Err(CliError::Config(format!("--seed is required for {}", method.name())));
    }
    resolve(method, config)
}

/// Fill defaults and check the sections the method uses.
pub fn resolve(method: Method, mut config: ExperimentConfig) -> Result<Resolved, CliError> {
    if let Some(m) = config.method {
        if m != method {
            return Err(CliError::Config(format!(
                "config declares method {} but the subcommand runs {}",
                m.name(),
                method.name()
            )));
        }
    }
    config.method = Some(method);
    let params = ModelParams::parse(config.model, &config.params)?;
    config.params = params.to_table();
    let domain = *config.domain.get_or_insert(config.model.default_domain());
    if !(domain.hi > domain.lo) {
        return Err(CliError::Config(format!("[domain] needs lo < hi, got [{}, {}]", domain.lo, domain.hi)));
    }
    let out = config
        .out
        .get_or_insert_with(|| PathBuf::from(format!("runs/{}-{}", method.name(), config.model.name())))
        .clone();
    if config.net.width == 0 {
        return Err(CliError::Config("[net] width must be at least 1".into()));
    }
    let seed = config.seed.unwrap_or(0);
    match method {
        Method::MfcDirect => {
            config.mfc.seed = seed;
            config.mfc.validate().map_err(|e| CliError::Config(format!("[mfc]: {}", e)))?;
        }
        Method::FbsdeShoot => {
            if config.model != ModelKind::SystemicRisk {
                return Err(CliError::Config(format!(
                    "fbsde-shoot is implemented for systemic-risk, not {}",
                    config.model.name()
                )));
            }
            config.fbsde.seed = seed;
            config.fbsde.validate().map_err(|e| CliError::Config(format!("[fbsde]: {}", e)))?;
        }
        Method::Dgm => {
            config.dgm.seed = seed;
            config.dgm.validate().map_err(|e| CliError::Config(format!("[dgm]: {}", e)))?;
        }
        Method::Oracle => {
            let o = &config.oracle;
            if o.ode_steps == 0 || o.snapshots == 0 || o.points < 2 {
                return Err(CliError::Config("[oracle] needs ode_steps, snapshots >= 1 and points >= 2".into()));
            }
        }
    }
    Ok(Resolved {
        method,
        config,
        params,
        out,
        domain,
    })
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub model: ModelKind,
    pub seed: Option<u64>,
    pub wall_time_s: f64,
    pub iterations_run: usize,
    pub final_loss: Option<f64>,
    pub aborted: Option<String>,
    /// Named gaps to the reference solution and other diagnostics.
    pub oracle_gaps: BTreeMap<String, f64>,
    /// Files in the output directory, sorted.
    pub artifacts: Vec<String>,
}

#[derive(Default)]
struct Outcome {
    iterations_run: usize,
    final_loss: Option<f64>,
    aborted: Option<String>,
    gaps: BTreeMap<String, f64>,
}

/// Reference feedback control and its slope in the state.
struct Exact {
    control: Box<dyn Fn(f64, f64) -> f64>,
    slope: Box<dyn Fn(f64) -> f64>,
    path: TimePath,
    names: &'static [&'static str],
}

fn exact_solution(params: ModelParams, steps: usize) -> Result<Exact, CliError> {
    Ok(match params {
        ModelParams::PriceImpact(p) => {
            let o = PriceImpactOracle::solve(p, steps)?;
            let path = o.path.clone();
            let o2 = o.clone();
            Exact {
                control: Box::new(move |t, x| o.control(t, x)),
                slope: Box::new(move |t| o2.slope(t)),
                path,
                names: &["P", "nu", "xbar"],
            }
        }
        ModelParams::SystemicRisk(p) => {
            let o = SystemicRiskOracle::solve(p, steps)?;
            let path = o.path.clone();
            let o2 = o.clone();
            let mbar = p.m0.mean;
            Exact {
                control: Box::new(move |t, x| o.control(t, x, mbar)),
                slope: Box::new(move |t| -(p.q + o2.eta(t))),
                path,
                names: &["eta", "mu"],
            }
        }
        ModelParams::CrowdedTrade(p) => {
            let o = CrowdedTradeOracle::solve(p, steps)?;
            let path = o.path.clone();
            let o2 = o.clone();
            Exact {
                control: Box::new(move |t, q| o.control(t, q)),
                slope: Box::new(move |t| o2.slope(t)),
                path,
                names: &["A2", "A1", "qbar"],
            }
        }
    })
}

fn time_label(t: f64) -> String {
    format!("t{}", t)
}

fn run_mfc<M: MeanFieldModel>(model: &M, r: &Resolved, exact: Option<Exact>) -> Result<Outcome, CliError> {
    let c = &r.config;
    let inputs = if c.net.mean_input.unwrap_or(false) {
        NetInputs::TimeStateMean
    } else {
        NetInputs::TimeState
    };
    let arch = Architecture::mlp(inputs.width(), c.net.width, 1);
    let report = mfc_direct::train(model, &arch, inputs, &c.mfc)?;
    report.write(&r.out)?;
    let mut o = Outcome {
        iterations_run: report.loss_history.len(),
        final_loss: report.loss_history.last().copied(),
        aborted: report.aborted.clone(),
        ..Outcome::default()
    };
    if o.aborted.is_some() {
        return Ok(o);
    }
    let ev = &report.evaluation;
    let (cost, se) = cost_with_stderr(ev);
    o.gaps.insert("eval_cost".into(), cost);
    o.gaps.insert("eval_cost_stderr".into(), se);
    o.gaps.insert("variance_initial".into(), variance(&ev.states[0]));
    o.gaps.insert("variance_terminal".into(), variance(ev.terminal()));
    // extremes of the ensemble mean control early and late in the horizon
    let means: Vec<f64> = ev.controls.iter().map(|a| crate::stats::mean(a)).collect();
    let steps = means.len();
    let early = &means[..steps.div_ceil(4)];
    let late = &means[steps - (steps / 10).max(1)..];
    o.gaps.insert("max_mean_control_first_quarter".into(), early.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)));
    o.gaps.insert("min_mean_control_last_tenth".into(), late.iter().fold(f64::INFINITY, |a, &b| a.min(b)));
    if let Some(e) = exact {
        let policy = NetPolicy {
            params: &report.params,
            inputs,
        };
        for t in [0.0, 0.5 * model.horizon()] {
            let fit = policy_fit(&policy, ev, t)?;
            o.gaps.insert(format!("slope_{}", time_label(t)), fit.slope);
            o.gaps.insert(format!("slope_rel_err_{}", time_label(t)), rel_err(fit.slope, (e.slope)(t)));
            o.gaps.insert(format!("r2_{}", time_label(t)), fit.r2);
        }
    }
    Ok(o)
}

fn run_fbsde(p: SystemicRiskParams, r: &Resolved) -> Result<Outcome, CliError> {
    let c = &r.config;
    let system = SystemicRiskFbsde(p);
    let nets = ShootingNets::new(c.net.width, c.net.mean_input.unwrap_or(true), c.fbsde.seed);
    let report = fbsde_shoot::train(&system, nets, &c.fbsde)?;
    let oracle = SystemicRiskOracle::solve(p, c.oracle.ode_steps)?;
    let exact = systemic_oracle_paths(&system, &oracle, &c.fbsde.evaluation_noise(&system))?;
    report.write(&r.out, &system, Some(&exact))?;
    let mut o = Outcome {
        iterations_run: report.loss_history.len(),
        final_loss: report.loss_history.last().copied(),
        aborted: report.aborted.clone(),
        ..Outcome::default()
    };
    if o.aborted.is_none() {
        let e = path_errors(&report.evaluation, &exact);
        o.gaps.insert("rmse_x".into(), e.rmse_x);
        o.gaps.insert("rmse_y".into(), e.rmse_y);
        o.gaps.insert("y_range".into(), e.y_range);
        o.gaps.insert("relative_y".into(), e.relative_y);
    }
    Ok(o)
}

fn run_dgm<P: MfgPde>(pde: P, r: &Resolved, exact: &Exact) -> Result<Outcome, CliError> {
    let c = &r.config;
    let horizon = pde.horizon();
    let problem = PdeProblem::new(pde, r.domain.lo, r.domain.hi, c.weights)?;
    let report = dgm_pde::train(&problem, DgmNets::new(c.net.width, c.dgm.seed), &c.dgm)?;
    report.write(&r.out)?;
    let mut o = Outcome {
        iterations_run: report.history.len(),
        final_loss: report.history.last().map(|l| l.total),
        aborted: report.aborted.clone(),
        ..Outcome::default()
    };
    if o.aborted.is_some() {
        return Ok(o);
    }
    let g = &report.grid;
    if let (Some(first), Some(last)) = (report.history.first(), report.snapshots.last()) {
        o.gaps.insert("loss_drop_factor".into(), first.total / last.eval.total);
    }
    for t in [0.0, 0.5 * horizon, horizon] {
        let fit = g.control_fit(t);
        o.gaps.insert(format!("slope_{}", time_label(t)), fit.slope);
        o.gaps.insert(format!("slope_rel_err_{}", time_label(t)), rel_err(fit.slope, (exact.slope)(t)));
        o.gaps.insert(format!("r2_{}", time_label(t)), fit.r2);
    }
    o.gaps.insert("variance_initial".into(), g.variance(0.0));
    o.gaps.insert("variance_terminal".into(), g.variance(horizon));
    o.gaps.insert("min_density".into(), g.m.iter().flatten().fold(f64::INFINITY, |a, &b| a.min(b)));
    Ok(o)
}

fn run_grid<P: MfgPde>(pde: &P, r: &Resolved, exact: &Exact) -> Result<Outcome, CliError> {
    let c = &r.config.oracle;
    let cfg = c.grid.on(r.domain);
    let sol = grid_fixed_point(pde, &cfg)?;
    sol.write(&r.out, pde.name(), &cfg, c.snapshots)?;
    let mut o = Outcome {
        iterations_run: sol.iterations,
        final_loss: sol.residuals.last().copied(),
        ..Outcome::default()
    };
    o.gaps.insert("converged".into(), if sol.converged { 1.0 } else { 0.0 });
    o.gaps.insert("consistency".into(), sol.consistency);
    o.gaps.insert("max_mass_drift".into(), sol.max_mass_drift);
    o.gaps.insert("control_gap_vs_exact".into(), sol.control_gap(0.05, &exact.control));
    let horizon = pde.horizon();
    for t in [0.0, 0.5 * horizon, horizon] {
        let fit = sol.control_fit(t, 0.05);
        o.gaps.insert(format!("slope_rel_err_{}", time_label(t)), rel_err(fit.slope, (exact.slope)(t)));
    }
    Ok(o)
}

fn run_exact(r: &Resolved, exact: &Exact) -> Result<Outcome, CliError> {
    let c = &r.config.oracle;
    let horizon = r.params.horizon();
    let mut tab = Table::new(&["t", "x", "alpha"]);
    for n in 0..=c.snapshots {
        let t = horizon * n as f64 / c.snapshots as f64;
        for j in 0..c.points {
            let x = r.domain.lo + (r.domain.hi - r.domain.lo) * j as f64 / (c.points - 1) as f64;
            tab.push(vec![t, x, (exact.control)(t, x)]);
        }
    }
    tab.write(&r.out.join("control_grid.csv"))?;
    exact.path.to_table(exact.names).write(&r.out.join("oracle_path.csv"))?;
    let mut o = Outcome::default();
    for t in [0.0, 0.5 * horizon, horizon] {
        o.gaps.insert(format!("slope_{}", time_label(t)), (exact.slope)(t));
    }
    if let ModelParams::SystemicRisk(p) = r.params {
        let poa = systemic_risk_price_of_anarchy(p, c.ode_steps)?;
        write_json(&r.out.join("poa.json"), &poa)?;
        o.gaps.insert("mfg_cost".into(), poa.mfg_cost);
        o.gaps.insert("mfc_cost".into(), poa.mfc_cost);
        o.gaps.insert("poa_margin".into(), poa.margin);
        o.gaps.insert("riccati_cost".into(), poa.riccati_cost);
    }
    Ok(o)
}

fn dispatch(r: &Resolved) -> Result<Outcome, CliError> {
    let steps = r.config.oracle.ode_steps;
    match r.method {
        Method::MfcDirect => match r.params {
            ModelParams::PriceImpact(p) => run_mfc(&p, r, Some(exact_solution(r.params, steps)?)),
            // the social optimum coincides with the equilibrium here
            ModelParams::SystemicRisk(p) => run_mfc(&p, r, Some(exact_solution(r.params, steps)?)),
            ModelParams::CrowdedTrade(p) => run_mfc(&p, r, None),
        },
        Method::FbsdeShoot => match r.params {
            ModelParams::SystemicRisk(p) => run_fbsde(p, r),
            _ => unreachable!("checked in resolve"),
        },
        Method::Dgm => {
            let exact = exact_solution(r.params, steps)?;
            match r.params {
                ModelParams::PriceImpact(p) => run_dgm(PriceImpactMfc(p), r, &exact),
                ModelParams::SystemicRisk(p) => run_dgm(p, r, &exact),
                ModelParams::CrowdedTrade(p) => run_dgm(p, r, &exact),
            }
        }
        Method::Oracle => {
            let exact = exact_solution(r.params, steps)?;
            match (r.config.oracle.solver, r.params) {
                (OracleSolver::Exact, _) => run_exact(r, &exact),
                (OracleSolver::Grid, ModelParams::PriceImpact(p)) => run_grid(&PriceImpactMfc(p), r, &exact),
                (OracleSolver::Grid, ModelParams::SystemicRisk(p)) => run_grid(&p, r, &exact),
                (OracleSolver::Grid, ModelParams::CrowdedTrade(p)) => run_grid(&p, r, &exact),
            }
        }
    }
}

fn list_files(dir: &Path) -> Result<Vec<String>, CliError> {
    let io = |e| CliError::Io(dir.display().to_string(), e);
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let entry = entry.map_err(io)?;
        if entry.path().is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// Run a resolved experiment: resolved config first, then the solver's
/// artifacts, then `summary.json`. A diverged run keeps what it wrote and
/// returns [`CliError::Diverged`].
pub fn run(r: &Resolved) -> Result<RunSummary, CliError> {
    std::fs::create_dir_all(&r.out).map_err(|e| CliError::Io(r.out.display().to_string(), e))?;
    let resolved = r.out.join("resolved_config.toml");
    std::fs::write(&resolved, r.to_toml()).map_err(|e| CliError::Io(resolved.display().to_string(), e))?;
    let start = Instant::now();
    let o = dispatch(r)?;
    let mut summary = RunSummary {
        method: r.method,
        model: r.config.model,
        seed: r.config.seed,
        wall_time_s: start.elapsed().as_secs_f64(),
        iterations_run: o.iterations_run,
        final_loss: o.final_loss,
        aborted: o.aborted,
        oracle_gaps: o.gaps,
        artifacts: Vec::new(),
    };
    let mut files = list_files(&r.out)?;
    if !files.iter().any(|f| f == "summary.json") {
        files.push("summary.json".into());
        files.sort();
    }
    summary.artifacts = files;
    write_json(&r.out.join("summary.json"), &summary)?;
    if let Some(reason) = &summary.aborted {
        return Err(CliError::Diverged(reason.clone()));
    }
    Ok(summary)
}

fn read_config(path: &Option<PathBuf>) -> Result<String, CliError> {
    match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Io(p.display().to_string(), e)),
        None => Ok(String::new()),
    }
}

/// Execute a parsed command line and return the text to print.
pub fn execute(cli: &Cli) -> Result<String, CliError> {
    let (method, args) = match &cli.command {
        Command::RunMfc(a) => (Method::MfcDirect, a),
        Command::RunFbsde(a) => (Method::FbsdeShoot, a),
        Command::RunDgm(a) => (Method::Dgm, a),
        Command::RunOracle(a) => (Method::Oracle, a),
        Command::Compare(c) => {
            let out = c.out.clone().unwrap_or_else(|| c.run_a.join("compare"));
            let cmp = compare_runs(&c.run_a, &c.run_b, &c.field, &out)?;
            let mut s = format!(
                "{} ({}): sup {:.6e}, l2 {:.6e}, max slope error {:.4}\n",
                c.field, cmp.field, cmp.sup, cmp.l2, cmp.max_slope_rel_err
            );
            for sl in &cmp.slices {
                s.push_str(&format!(
                    "  t = {:<8} points {:>5}  sup {:.3e}  l2 {:.3e}  slope {:.4} vs {:.4}  r2 {:.4} / {:.4}\n",
                    sl.t, sl.points, sl.sup, sl.l2, sl.slope_a, sl.slope_b, sl.r2_a, sl.r2_b
                ));
            }
            s.push_str(&format!("written to {}", out.display()));
            return Ok(s);
        }
    };
    let text = read_config(&args.config)?;
    let resolved = load_config(method, &text, args)?;
    let summary = run(&resolved)?;
    Ok(format!(
        "{} on {} finished in {:.1}s, artifacts in {}\n{}",
        method.name(),
        summary.model.name(),
        summary.wall_time_s,
        resolved.out.display(),
        serde_json::to_string_pretty(&summary.oracle_gaps).expect("gaps serialize")
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(seed: Option<u64>, set: &[&str]) -> RunArgs {
        RunArgs {
            seed,
            set: set.iter().map(|s| s.to_string()).collect(),
            ..RunArgs::default()
        }
    }

    #[test]
    fn missing_model_is_a_config_error_naming_the_key() {
        let e = load_config(Method::Oracle, "seed = 1\n", &args(None, &[])).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("model"), "{}", e);
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_line() {
        let text = "model = \"price-impact\"\n\n[mfc]\nparticlez = 10\n";
        let e = load_config(Method::MfcDirect, text, &args(Some(1), &[])).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("particlez") && msg.contains("line 4"), "{}", msg);
        let e = load_config(Method::Oracle, "model = \"price-impact\"\n[params]\ngama = 1\n", &args(None, &[])).unwrap_err();
        assert!(e.to_string().contains("gama"), "{}", e);
        let e = load_config(Method::Oracle, "model = \"price-impact\"\n", &args(None, &["mfc.bogus=1"])).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{}", e);
    }

    #[test]
    fn training_needs_a_seed_flag() {
        let text = "model = \"price-impact\"\nseed = 4\n";
        let e = load_config(Method::MfcDirect, text, &args(None, &[])).unwrap_err();
        assert!(e.to_string().contains("--seed"));
        assert!(load_config(Method::Oracle, text, &args(None, &[])).is_ok());
    }

    #[test]
    fn flags_override_file_keys() {
        let text = "model = \"price-impact\"\nseed = 4\nout = \"a\"\n[mfc]\niterations = 10\neval_every = 5\n[params]\ngamma = 0.5\n";
        let mut a = args(Some(9), &["mfc.iterations=20", "params.gamma=1", "net.width=8"]);
        a.out = Some("b".into());
        let r = load_config(Method::MfcDirect, text, &a).unwrap();
        assert_eq!(r.config.seed, Some(9));
        assert_eq!(r.config.mfc.seed, 9);
        assert_eq!(r.config.mfc.iterations, 20);
        assert_eq!(r.out, PathBuf::from("b"));
        assert_eq!(r.config.net.width, 8);
        match r.params {
            ModelParams::PriceImpact(p) => assert_eq!(p.gamma, 1.0),
            _ => panic!(),
        }
        a.model = Some("systemic-risk".into());
        a.set.clear();
        a.set.push("params.q=0.1".into());
        assert!(load_config(Method::MfcDirect, text, &a).is_err(), "gamma is not a systemic-risk parameter");
    }

    #[test]
    fn resolved_config_round_trips() {
        let text = "model = \"crowded-trade\"\n[dgm]\niterations = 10\neval_every = 5\n";
        let r = load_config(Method::Dgm, text, &args(Some(3), &[])).unwrap();
        let again = load_config(Method::Dgm, &r.to_toml(), &args(Some(3), &[])).unwrap();
        assert_eq!(r, again);
        assert_eq!(r.domain, Domain { lo: -2.0, hi: 8.0 });
        assert!(r.to_toml().contains("terminal_penalty"));
    }

    #[test]
    fn method_mismatch_and_unsupported_pairs() {
        let e = load_config(Method::Dgm, "model = \"price-impact\"\nmethod = \"oracle\"\n", &args(Some(1), &[])).unwrap_err();
        assert!(e.to_string().contains("declares method oracle"));
        let e = load_config(Method::FbsdeShoot, "model = \"price-impact\"\n", &args(Some(1), &[])).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn override_values_are_typed() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "a.b=3").unwrap();
        apply_override(&mut t, "a.c=0.5").unwrap();
        apply_override(&mut t, "d=price-impact").unwrap();
        apply_override(&mut t, "e=true").unwrap();
        assert_eq!(t["a"]["b"].as_integer(), Some(3));
        assert_eq!(t["a"]["c"].as_float(), Some(0.5));
        assert_eq!(t["d"].as_str(), Some("price-impact"));
        assert_eq!(t["e"].as_bool(), Some(true));
        assert!(apply_override(&mut t, "novalue").is_err());
        assert!(apply_override(&mut t, "a.b.c=1").is_err());
    }

    #[test]
    fn oracle_runs_write_summary_and_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = args(None, &["oracle.snapshots=4", "oracle.points=11"]);
        a.out = Some(dir.path().join("sr"));
        let r = load_config(Method::Oracle, "model = \"systemic-risk\"\n", &a).unwrap();
        let s = run(&r).unwrap();
        assert!(s.oracle_gaps["poa_margin"] >= 0.0);
        for f in ["resolved_config.toml", "control_grid.csv", "oracle_path.csv", "poa.json", "summary.json"] {
            assert!(s.artifacts.iter().any(|a| a == f), "{} missing from {:?}", f, s.artifacts);
        }
        assert_eq!(Table::read(&dir.path().join("sr/control_grid.csv")).unwrap().len(), 5 * 11);
        let cmp = compare_runs(&dir.path().join("sr"), &dir.path().join("sr"), "control", &dir.path().join("cmp")).unwrap();
        assert_eq!(cmp.sup, 0.0);
    }

    #[test]
    fn cli_parses_subcommands() {
        let c = Cli::try_parse_from(["mfg", "run-mfc", "--config", "a.toml", "--seed", "3", "--set", "mfc.iterations=5"]).unwrap();
        match c.command {
            Command::RunMfc(a) => {
                assert_eq!(a.seed, Some(3));
                assert_eq!(a.set, vec!["mfc.iterations=5".to_string()]);
            }
            _ => panic!(),
        }
        let c = Cli::try_parse_from(["mfg", "compare", "x", "y", "--field", "density"]).unwrap();
        assert!(matches!(c.command, Command::Compare(CompareArgs { ref field, .. }) if field == "density"));
        assert!(Cli::try_parse_from(["mfg", "run-everything"]).is_err());
    }
}
