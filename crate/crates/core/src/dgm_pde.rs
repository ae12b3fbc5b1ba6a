//! Deep Galerkin solver for the coupled KFP/HJB system.
//!
//! A positive network `m(t, x)` (exponential output) and a network
//! `u(t, x)` are trained to minimize root-mean-square residuals of
//!
//! * `d_t m - nu m_xx + d_x(m d_pH*(x, u_x, s))` on uniform interior points,
//! * `m(0, .) - m0` on uniform initial points,
//! * `d_t u + nu u_xx + H*(x, u_x, s)` on the interior points,
//! * `u(T, .) - g(., s_T)` on uniform terminal points,
//!
//! each weighted. Space and time derivatives come from network jets, so
//! they are graph nodes and the parameter gradient flows through them. The
//! population statistics `s(t)` (a mean state or mean control) are
//! re-estimated every iteration by self-normalized uniform quadrature on a
//! few time nodes and held fixed during the gradient step.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Block, Dual, Graph, Var};
use crate::mfc_direct::derive_seed;
use crate::models::{MeasureSummary, MfgPde, ModelError};
use crate::net::{init_params, Architecture, BoundNet, NetError, NetworkParameters, OutputActivation};
use crate::optim::{OptimConfig, OptimError, Optimizer};
use crate::output::{write_json, OutputError, Table};
use crate::stats::{linear_fit, LinearFit};

#[derive(Debug, Error)]
pub enum DgmError {
    #[error("invalid problem: {0}")]
    Problem(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("density estimate has zero mass at t = {t}")]
    ZeroNormalizer { t: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Output(#[from] OutputError),
}

/// Weights of the four loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub kfp: f64,
    pub kfp_initial: f64,
    pub hjb: f64,
    pub hjb_terminal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            kfp: 1.0,
            kfp_initial: 10.0,
            hjb: 1.0,
            hjb_terminal: 10.0,
        }
    }
}

/// PDE system on a truncated interval.
#[derive(Clone, Debug)]
pub struct PdeProblem<P> {
    pub pde: P,
    pub lo: f64,
    pub hi: f64,
    pub weights: LossWeights,
}

impl<P: MfgPde> PdeProblem<P> {
    pub fn new(pde: P, lo: f64, hi: f64, weights: LossWeights) -> Result<Self, DgmError> {
        if !(hi > lo) {
            return Err(DgmError::Problem(format!("need lo < hi, got [{}, {}]", lo, hi)));
        }
        let w = [weights.kfp, weights.kfp_initial, weights.hjb, weights.hjb_terminal];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(DgmError::Problem(format!("loss weights must be finite and non-negative, got {:?}", w)));
        }
        if pde.nu() < 0.0 {
            return Err(DgmError::Problem(format!("nu must be non-negative, got {}", pde.nu())));
        }
        Ok(Self { pde, lo, hi, weights })
    }

    pub fn horizon(&self) -> f64 {
        self.pde.horizon()
    }

    /// Affine map of `(t, x)` onto `[-1, 1]^2`, the network input scale.
    fn normalize(&self, t: f64, x: f64) -> (f64, f64) {
        (2.0 * t / self.horizon() - 1.0, 2.0 * (x - self.lo) / (self.hi - self.lo) - 1.0)
    }

    fn scale(&self) -> (f64, f64) {
        (2.0 / self.horizon(), 2.0 / (self.hi - self.lo))
    }
}

/// Interior points `(t, x)` and initial/terminal points `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub initial: Vec<f64>,
    pub terminal: Vec<f64>,
}

/// Uniform i.i.d. points, deterministic in `seed`.
pub fn sample_batch(lo: f64, hi: f64, horizon: f64, sizes: (usize, usize, usize), seed: u64) -> SampleBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, n0, nt) = sizes;
    let mut t = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    for _ in 0..n {
        t.push(rng.gen_range(0.0..=horizon));
        x.push(rng.gen_range(lo..=hi));
    }
    let initial = (0..n0).map(|_| rng.gen_range(lo..=hi)).collect();
    let terminal = (0..nt).map(|_| rng.gen_range(lo..=hi)).collect();
    SampleBatch { t, x, initial, terminal }
}

/// Statistics of the population from density values `m` and value
/// gradients `ux` at quadrature points `x`, self-normalized by the
/// quadrature mass.
pub fn nonlocal_summary<P: MfgPde>(pde: &P, t: f64, x: &[f64], m: &[f64], ux: &[f64]) -> Result<MeasureSummary<f64>, DgmError> {
    let mass: f64 = m.iter().sum();
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(DgmError::ZeroNormalizer { t });
    }
    let w: Vec<f64> = m.iter().map(|v| v / mass).collect();
    Ok(pde.statistics(x, &w, ux))
}

/// The density and value networks.
#[derive(Clone, Debug, PartialEq)]
pub struct DgmNets {
    pub m: NetworkParameters,
    pub u: NetworkParameters,
}

impl DgmNets {
    pub fn new(width: usize, seed: u64) -> Self {
        let arch = Architecture::mlp(2, width, 1);
        Self {
            m: init_params(&arch.clone().with_output(OutputActivation::Exponential), seed),
            u: init_params(&arch, derive_seed(seed, 1)),
        }
    }

    pub fn len(&self) -> usize {
        self.m.len() + self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn theta(&self) -> Vec<f64> {
        self.m.theta.iter().chain(&self.u.theta).copied().collect()
    }

    pub fn set_theta(&mut self, theta: &[f64]) {
        let k = self.m.len();
        self.m.theta.copy_from_slice(&theta[..k]);
        self.u.theta.copy_from_slice(&theta[k..]);
    }
}

/// A field and its derivatives at a set of points, `1 x n` each.
#[derive(Clone, Copy, Debug)]
pub struct FieldJet<'g> {
    pub value: Var<'g>,
    pub dt: Var<'g>,
    pub dx: Var<'g>,
    pub dxx: Var<'g>,
}

fn input_block<P: MfgPde>(problem: &PdeProblem<P>, t: &[f64], x: &[f64]) -> Block {
    let n = t.len();
    let mut data = vec![0.0; 2 * n];
    for i in 0..n {
        let (a, b) = problem.normalize(t[i], x[i]);
        data[i] = a;
        data[n + i] = b;
    }
    Block::new(2, n, data)
}

/// Jet of `net` in physical coordinates.
pub fn field_jet<'g, P: MfgPde>(
    problem: &PdeProblem<P>,
    net: &BoundNet<'g>,
    g: &'g Graph,
    t: &[f64],
    x: &[f64],
) -> Result<FieldJet<'g>, DgmError> {
    let z = g.constant(input_block(problem, t, x));
    let jet = net.forward_jet(z, &[0, 1], &[1])?;
    let (st, sx) = problem.scale();
    Ok(FieldJet {
        value: jet.value,
        dt: jet.d1[0] * st,
        dx: jet.d1[1] * sx,
        dxx: jet.d2[0] * (sx * sx),
    })
}

/// Everything the residuals need, evaluated at the batch points.
pub struct Evaluated<'g> {
    pub x: Var<'g>,
    pub m: FieldJet<'g>,
    pub u: FieldJet<'g>,
    /// Statistics at each interior point.
    pub stats: MeasureSummary<Var<'g>>,
    pub x_initial: &'g [f64],
    pub m_initial: Var<'g>,
    pub x_terminal: Var<'g>,
    pub u_terminal: Var<'g>,
    pub stats_terminal: MeasureSummary<Var<'g>>,
}

/// The four weighted loss terms and their sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossParts {
    pub total: f64,
    pub kfp: f64,
    pub kfp_initial: f64,
    pub hjb: f64,
    pub hjb_terminal: f64,
}

pub struct LossGraph<'g> {
    pub total: Var<'g>,
    /// `kfp, kfp_initial, hjb, hjb_terminal`, weighted.
    pub parts: [Var<'g>; 4],
    pub kfp_residual: Var<'g>,
    pub hjb_residual: Var<'g>,
}

impl LossGraph<'_> {
    pub fn values(&self) -> LossParts {
        LossParts {
            total: self.total.scalar_value(),
            kfp: self.parts[0].scalar_value(),
            kfp_initial: self.parts[1].scalar_value(),
            hjb: self.parts[2].scalar_value(),
            hjb_terminal: self.parts[3].scalar_value(),
        }
    }
}

fn rms(v: Var<'_>) -> Var<'_> {
    // the offset keeps the derivative finite at an exact zero
    (v.square().mean_lanes() + 1e-300).sqrt()
}

fn dual_summary<'g>(s: &MeasureSummary<Var<'g>>) -> MeasureSummary<Dual<Var<'g>>> {
    MeasureSummary {
        state_mean: s.state_mean.map(Dual::constant),
        control_mean: s.control_mean.map(Dual::constant),
    }
}

/// Assemble the residual losses from evaluated fields.
pub fn assemble<'g, P: MfgPde>(problem: &PdeProblem<P>, e: &Evaluated<'g>) -> Result<LossGraph<'g>, DgmError> {
    let pde = &problem.pde;
    let nu = pde.nu();
    let g = e.x.graph();
    // total x-derivative of the drift d_pH*(x, u_x(x)): dual tangent (1, u_xx)
    let xd = Dual::new(e.x, e.x.constant_like(1.0));
    let pd = Dual::new(e.u.dx, e.u.dxx);
    let h = pde.hamiltonian(xd, pd, &dual_summary(&e.stats))?;
    let (drift, ddrift) = (h.dp.v, h.dp.d);
    let kfp = e.m.dt - e.m.dxx * nu + e.m.dx * drift + e.m.value * ddrift;
    let hjb = e.u.dt + e.u.dxx * nu + h.value.v;
    let m0 = g.constant(Block::lanes(e.x_initial.iter().map(|&x| pde.initial_density(x)).collect()));
    let init = e.m_initial - m0;
    let term = e.u_terminal - pde.terminal_value(e.x_terminal, &e.stats_terminal)?;
    let w = problem.weights;
    let parts = [rms(kfp) * w.kfp, rms(init) * w.kfp_initial, rms(hjb) * w.hjb, rms(term) * w.hjb_terminal];
    let total = parts[0] + parts[1] + parts[2] + parts[3];
    Ok(LossGraph {
        total,
        parts,
        kfp_residual: kfp,
        hjb_residual: hjb,
    })
}

/// Piecewise-linear statistics on a time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct StatPath {
    pub times: Vec<f64>,
    pub stats: Vec<MeasureSummary<f64>>,
}

impl StatPath {
    pub fn at(&self, t: f64) -> MeasureSummary<f64> {
        let n = self.times.len();
        if n == 1 || t <= self.times[0] {
            return self.stats[0];
        }
        if t >= self.times[n - 1] {
            return self.stats[n - 1];
        }
        let k = self.times.partition_point(|&s| s <= t) - 1;
        let w = (t - self.times[k]) / (self.times[k + 1] - self.times[k]);
        let lerp = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => Some(a + w * (b - a)),
            _ => None,
        };
        MeasureSummary {
            state_mean: lerp(self.stats[k].state_mean, self.stats[k + 1].state_mean),
            control_mean: lerp(self.stats[k].control_mean, self.stats[k + 1].control_mean),
        }
    }

    /// Lane blocks of the statistics at each time in `t`.
    pub fn lanes<'g>(&self, g: &'g Graph, t: &[f64]) -> MeasureSummary<Var<'g>> {
        let at: Vec<MeasureSummary<f64>> = t.iter().map(|&s| self.at(s)).collect();
        let pick = |f: fn(&MeasureSummary<f64>) -> Option<f64>| -> Option<Var<'g>> {
            let vals: Option<Vec<f64>> = at.iter().map(f).collect();
            vals.map(|v| g.constant(Block::lanes(v)))
        };
        MeasureSummary {
            state_mean: pick(|s| s.state_mean),
            control_mean: pick(|s| s.control_mean),
        }
    }
}

/// Density, value and value gradient of frozen networks at points.
pub fn evaluate_fields<P: MfgPde>(
    problem: &PdeProblem<P>,
    nets: &DgmNets,
    t: &[f64],
    x: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), DgmError> {
    let g = Graph::new();
    let z = g.constant(input_block(problem, t, x));
    let m = nets.m.bind_constant(&g).forward(z)?.value().into_vec();
    let jet = nets.u.bind_constant(&g).forward_jet(z, &[1], &[])?;
    let (_, sx) = problem.scale();
    let u = jet.value.value().into_vec();
    let ux = jet.d1[0].value().as_slice().iter().map(|v| v * sx).collect();
    Ok((m, u, ux))
}

/// Statistics on `nodes` equispaced times, each from `points` uniform
/// quadrature points.
pub fn estimate_statistics<P: MfgPde>(
    problem: &PdeProblem<P>,
    nets: &DgmNets,
    nodes: usize,
    points: usize,
    seed: u64,
) -> Result<StatPath, DgmError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = problem.horizon();
    let times: Vec<f64> = (0..nodes)
        .map(|k| if nodes == 1 { 0.0 } else { horizon * k as f64 / (nodes - 1) as f64 })
        .collect();
    let mut ts = Vec::with_capacity(nodes * points);
    let mut xs = Vec::with_capacity(nodes * points);
    for &t in &times {
        for _ in 0..points {
            ts.push(t);
            xs.push(rng.gen_range(problem.lo..=problem.hi));
        }
    }
    let (m, _, ux) = evaluate_fields(problem, nets, &ts, &xs)?;
    let stats = times
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let r = k * points..(k + 1) * points;
            nonlocal_summary(&problem.pde, t, &xs[r.clone()], &m[r.clone()], &ux[r])
        })
        .collect::<Result<_, _>>()?;
    Ok(StatPath { times, stats })
}

/// Build the loss of bound networks on a batch.
pub fn residual_losses<'g, P: MfgPde>(
    problem: &PdeProblem<P>,
    g: &'g Graph,
    m_net: &BoundNet<'g>,
    u_net: &BoundNet<'g>,
    batch: &'g SampleBatch,
    stats: &StatPath,
) -> Result<LossGraph<'g>, DgmError> {
    let horizon = problem.horizon();
    let m = field_jet(problem, m_net, g, &batch.t, &batch.x)?;
    let u = field_jet(problem, u_net, g, &batch.t, &batch.x)?;
    let z0 = g.constant(input_block(problem, &vec![0.0; batch.initial.len()], &batch.initial));
    let zt = g.constant(input_block(problem, &vec![horizon; batch.terminal.len()], &batch.terminal));
    let e = Evaluated {
        x: g.constant(Block::lanes(batch.x.clone())),
        m,
        u,
        stats: stats.lanes(g, &batch.t),
        x_initial: &batch.initial,
        m_initial: m_net.forward(z0)?,
        x_terminal: g.constant(Block::lanes(batch.terminal.clone())),
        u_terminal: u_net.forward(zt)?,
        stats_terminal: stats.lanes(g, &vec![horizon; batch.terminal.len()]),
    };
    assemble(problem, &e)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DgmConfig {
    pub iterations: usize,
    pub interior: usize,
    pub initial: usize,
    pub terminal: usize,
    /// Time nodes and points per node for the non-local statistics.
    pub stat_nodes: usize,
    pub stat_points: usize,
    pub optim: OptimConfig,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for DgmConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            interior: 256,
            initial: 128,
            terminal: 128,
            stat_nodes: 11,
            stat_points: 256,
            optim: OptimConfig::default(),
            seed: 0,
            eval_every: 1000,
        }
    }
}

impl DgmConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.iterations == 0 {
            return Err("iterations must be at least 1".into());
        }
        if self.interior == 0 || self.initial == 0 || self.terminal == 0 {
            return Err("batch sizes must be at least 1".into());
        }
        if self.stat_nodes == 0 || self.stat_points == 0 {
            return Err("need at least one quadrature node and point".into());
        }
        if self.eval_every == 0 || self.iterations % self.eval_every != 0 {
            return Err(format!(
                "eval_every ({}) must divide iterations ({})",
                self.eval_every, self.iterations
            ));
        }
        Ok(())
    }

    fn sizes(&self) -> (usize, usize, usize) {
        (self.interior, self.initial, self.terminal)
    }
}

/// Fields of the networks on a fixed `(t, x)` grid, `m[n][j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DgmGrid {
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
    pub m: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
}

impl DgmGrid {
    /// `times` x `points` equispaced nodes over the horizon and the domain.
    pub fn evaluate<P: MfgPde>(
        problem: &PdeProblem<P>,
        nets: &DgmNets,
        stats: &StatPath,
        times: usize,
        points: usize,
    ) -> Result<Self, DgmError> {
        let ts: Vec<f64> = (0..times).map(|k| problem.horizon() * k as f64 / (times - 1) as f64).collect();
        let xs: Vec<f64> = (0..points)
            .map(|j| problem.lo + (problem.hi - problem.lo) * j as f64 / (points - 1) as f64)
            .collect();
        let mut out = Self {
            times: ts.clone(),
            xs: xs.clone(),
            m: Vec::new(),
            u: Vec::new(),
            alpha: Vec::new(),
        };
        for &t in &ts {
            let (m, u, ux) = evaluate_fields(problem, nets, &vec![t; points], &xs)?;
            let s = stats.at(t);
            let alpha = xs
                .iter()
                .zip(&ux)
                .map(|(&x, &p)| problem.pde.hamiltonian(x, p, &s).map(|h| h.control))
                .collect::<Result<Vec<_>, _>>()?;
            out.m.push(m);
            out.u.push(u);
            out.alpha.push(alpha);
        }
        Ok(out)
    }

    fn index(&self, t: f64) -> usize {
        self.times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .unwrap()
            .0
    }

    /// Quantile of the normalized density row at time `t`.
    pub fn quantile(&self, t: f64, p: f64) -> f64 {
        let row = &self.m[self.index(t)];
        let mass: f64 = row.iter().sum();
        let mut acc = 0.0;
        for (j, v) in row.iter().enumerate() {
            acc += v / mass;
            if acc >= p {
                return self.xs[j];
            }
        }
        *self.xs.last().unwrap()
    }

    pub fn mean(&self, t: f64) -> f64 {
        let row = &self.m[self.index(t)];
        let mass: f64 = row.iter().sum();
        row.iter().zip(&self.xs).map(|(m, x)| m * x).sum::<f64>() / mass
    }

    pub fn variance(&self, t: f64) -> f64 {
        let row = &self.m[self.index(t)];
        let mass: f64 = row.iter().sum();
        let mu = self.mean(t);
        row.iter().zip(&self.xs).map(|(m, x)| m * (x - mu).powi(2)).sum::<f64>() / mass
    }

    /// Linear fit of the control at time `t` between the 5% and 95%
    /// quantiles of the learned density.
    pub fn control_fit(&self, t: f64) -> LinearFit {
        let n = self.index(t);
        let (lo, hi) = (self.quantile(t, 0.05), self.quantile(t, 0.95));
        let (xs, ys): (Vec<f64>, Vec<f64>) = self
            .xs
            .iter()
            .zip(&self.alpha[n])
            .filter(|(x, _)| **x >= lo && **x <= hi)
            .map(|(x, a)| (*x, *a))
            .unzip();
        linear_fit(&xs, &ys)
    }

    pub fn write(&self, dir: &Path) -> Result<(), DgmError> {
        for (name, col, field) in [
            ("density_grid.csv", "m", &self.m),
            ("value_grid.csv", "u", &self.u),
            ("control_grid.csv", "alpha", &self.alpha),
        ] {
            let mut t = Table::new(&["t", "x", col]);
            for (n, &tn) in self.times.iter().enumerate() {
                for (j, &x) in self.xs.iter().enumerate() {
                    t.push(vec![tn, x, field[n][j]]);
                }
            }
            t.write(&dir.join(name))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DgmSnapshot {
    pub iteration: usize,
    /// Loss on the fixed evaluation batch.
    pub eval: LossParts,
}

#[derive(Clone, Debug)]
pub struct DgmReport {
    pub history: Vec<LossParts>,
    pub nets: DgmNets,
    pub snapshots: Vec<DgmSnapshot>,
    pub stats: StatPath,
    pub grid: DgmGrid,
    pub aborted: Option<String>,
}

#[derive(Serialize)]
struct DgmSummary<'a> {
    iterations_run: usize,
    initial_loss: Option<&'a LossParts>,
    final_loss: Option<&'a LossParts>,
    aborted: Option<&'a str>,
    snapshots: &'a [DgmSnapshot],
}

impl DgmReport {
    /// `loss_history.csv` (one column per term), the three field grids,
    /// `statistics.csv` and `dgm_summary.json`.
    pub fn write(&self, dir: &Path) -> Result<(), DgmError> {
        let mut t = Table::new(&["iteration", "total", "kfp", "kfp_initial", "hjb", "hjb_terminal"])
            .with_int_columns(&["iteration"]);
        for (k, l) in self.history.iter().enumerate() {
            t.push(vec![k as f64, l.total, l.kfp, l.kfp_initial, l.hjb, l.hjb_terminal]);
        }
        t.write(&dir.join("loss_history.csv"))?;
        self.grid.write(dir)?;
        let mut st = Table::new(&["t", "state_mean", "control_mean"]);
        for (t, s) in self.stats.times.iter().zip(&self.stats.stats) {
            st.push(vec![*t, s.state_mean.unwrap_or(f64::NAN), s.control_mean.unwrap_or(f64::NAN)]);
        }
        st.write(&dir.join("statistics.csv"))?;
        write_json(
            &dir.join("dgm_summary.json"),
            &DgmSummary {
                iterations_run: self.history.len(),
                initial_loss: self.history.first(),
                final_loss: self.history.last(),
                aborted: self.aborted.as_deref(),
                snapshots: &self.snapshots,
            },
        )?;
        Ok(())
    }
}

fn evaluate_loss<P: MfgPde>(
    problem: &PdeProblem<P>,
    nets: &DgmNets,
    batch: &SampleBatch,
    stats: &StatPath,
) -> Result<LossParts, DgmError> {
    let g = Graph::new();
    let (m, u) = (nets.m.bind_constant(&g), nets.u.bind_constant(&g));
    Ok(residual_losses(problem, &g, &m, &u, batch, stats)?.values())
}

pub fn train<P: MfgPde>(problem: &PdeProblem<P>, mut nets: DgmNets, config: &DgmConfig) -> Result<DgmReport, DgmError> {
    config.validate().map_err(DgmError::Config)?;
    let (lo, hi, horizon) = (problem.lo, problem.hi, problem.horizon());
    let eval_batch = sample_batch(lo, hi, horizon, config.sizes(), derive_seed(config.seed, u64::MAX));
    let mut opt = Optimizer::new(config.optim.clone(), nets.len());
    let mut theta = nets.theta();
    let mut history = Vec::with_capacity(config.iterations);
    let mut snapshots = Vec::new();
    let mut aborted = None;
    let mut stats = estimate_statistics(problem, &nets, config.stat_nodes, config.stat_points, config.seed)?;
    for k in 0..config.iterations {
        let seed = derive_seed(config.seed, k as u64);
        stats = match estimate_statistics(problem, &nets, config.stat_nodes, config.stat_points, derive_seed(seed, 2)) {
            Ok(s) => s,
            Err(e @ DgmError::ZeroNormalizer { .. }) => {
                aborted = Some(format!("{} in iteration {}", e, k));
                break;
            }
            Err(e) => return Err(e),
        };
        let batch = sample_batch(lo, hi, horizon, config.sizes(), seed);
        let g = Graph::new();
        let (m, u) = (nets.m.bind(&g), nets.u.bind(&g));
        let loss = residual_losses(problem, &g, &m, &u, &batch, &stats)?;
        let parts = loss.values();
        if !parts.total.is_finite() || parts.total > crate::mfc_direct::DIVERGENCE {
            aborted = Some(format!("loss {} at iteration {} exceeds divergence threshold", parts.total, k));
            break;
        }
        let mut leaves = m.leaves();
        leaves.extend(u.leaves());
        let grad = BoundNet::flatten(&g.gradients(loss.total.id(), &leaves)?);
        match opt.step(&mut theta, &grad) {
            Ok(_) => nets.set_theta(&theta),
            Err(e @ OptimError::NonFiniteGradient { .. }) => {
                aborted = Some(e.to_string());
                break;
            }
            Err(e) => return Err(DgmError::Config(e.to_string())),
        }
        history.push(parts);
        if (k + 1) % config.eval_every == 0 {
            snapshots.push(DgmSnapshot {
                iteration: k + 1,
                eval: evaluate_loss(problem, &nets, &eval_batch, &stats)?,
            });
        }
    }
    let grid = DgmGrid::evaluate(problem, &nets, &stats, 21, 101)?;
    Ok(DgmReport {
        history,
        nets,
        snapshots,
        stats,
        grid,
        aborted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Real;
    use crate::models::{CrowdedTradeParams, Hamiltonian};

    /// `H* = b p` with a constant drift `b`, no running cost, density `m0`
    /// uniform on `[0, 1]`-ish through a constant.
    struct Transport {
        nu: f64,
        b: f64,
        m0: f64,
    }

    impl MfgPde for Transport {
        fn name(&self) -> &'static str {
            "transport"
        }
        fn horizon(&self) -> f64 {
            1.0
        }
        fn nu(&self) -> f64 {
            self.nu
        }
        fn initial_density(&self, _x: f64) -> f64 {
            self.m0
        }
        fn terminal_value<R: Real>(&self, x: R, _s: &MeasureSummary<R>) -> Result<R, ModelError> {
            Ok(x.lift(0.0))
        }
        fn hamiltonian<R: Real>(&self, x: R, p: R, _s: &MeasureSummary<R>) -> Result<Hamiltonian<R>, ModelError> {
            Ok(Hamiltonian {
                value: p * self.b,
                control: x.lift(self.b),
                dp: x.lift(self.b),
            })
        }
        fn statistics(&self, _x: &[f64], _w: &[f64], _ux: &[f64]) -> MeasureSummary<f64> {
            MeasureSummary::default()
        }
    }

    /// Networks that output constants: zero weights, chosen last bias.
    fn constant_nets(m: f64, u: f64) -> DgmNets {
        let mut nets = DgmNets::new(4, 0);
        nets.m.theta.iter_mut().for_each(|v| *v = 0.0);
        nets.u.theta.iter_mut().for_each(|v| *v = 0.0);
        let last = nets.m.arch.layers() - 1;
        nets.m.layer_mut(last).0[0] = m.ln();
        nets.u.layer_mut(last).0[0] = u;
        nets
    }

    #[test]
    fn batches_are_in_bounds_and_seeded() {
        let b = sample_batch(-2.0, 8.0, 1.0, (1, 1, 1), 3);
        assert_eq!((b.t.len(), b.x.len(), b.initial.len(), b.terminal.len()), (1, 1, 1, 1));
        let b = sample_batch(0.0, 8.0, 1.0, (10_000, 5, 5), 4);
        assert!(b.t.iter().all(|t| (0.0..=1.0).contains(t)));
        assert!(b.x.iter().chain(&b.initial).all(|x| (0.0..=8.0).contains(x)));
        // uniform on [0, 8]: sd 8/sqrt(12), standard error sd/100
        let se = 8.0 / 12f64.sqrt() / 100.0;
        assert!((crate::stats::mean(&b.x) - 4.0).abs() < 3.0 * se);
        assert_eq!(b, sample_batch(0.0, 8.0, 1.0, (10_000, 5, 5), 4));
    }

    #[test]
    fn nonlocal_mean_cases() {
        let p = CrowdedTradeParams::default();
        // m concentrated at 4, v = -q^2: mubar = -4
        let s = nonlocal_summary(&p, 0.0, &[3.0, 4.0, 5.0], &[0.0, 1.0, 0.0], &[-6.0, -8.0, -10.0]).unwrap();
        assert_eq!(s.control_mean, Some(-4.0));
        let s = nonlocal_summary(&p, 0.0, &[3.0, 4.0], &[0.3, 0.7], &[0.0, 0.0]).unwrap();
        assert_eq!(s.control_mean, Some(0.0));
        assert!(matches!(
            nonlocal_summary(&p, 0.5, &[1.0], &[0.0], &[1.0]),
            Err(DgmError::ZeroNormalizer { .. })
        ));
        // v = q^2, m = N(4, 0.3) by uniform quadrature on [-2, 8]
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q: Vec<f64> = (0..10_000).map(|_| rng.gen_range(-2.0..8.0)).collect();
        let law = p.m0;
        let m: Vec<f64> = q.iter().map(|&x| law.density(x)).collect();
        let ux: Vec<f64> = q.iter().map(|&x| 2.0 * x).collect();
        let s = nonlocal_summary(&p, 0.0, &q, &m, &ux).unwrap();
        assert!((s.control_mean.unwrap() - 4.0).abs() < 1e-2, "{:?}", s);
    }

    #[test]
    fn constant_fields_on_a_transport_free_problem() {
        let problem = PdeProblem::new(Transport { nu: 0.0, b: 0.0, m0: 0.5 }, 0.0, 1.0, LossWeights::default()).unwrap();
        let nets = constant_nets(0.5, 0.0);
        let batch = sample_batch(0.0, 1.0, 1.0, (64, 16, 16), 1);
        let stats = estimate_statistics(&problem, &nets, 3, 16, 2).unwrap();
        let g = Graph::new();
        let (m, u) = (nets.m.bind(&g), nets.u.bind(&g));
        let l = residual_losses(&problem, &g, &m, &u, &batch, &stats).unwrap().values();
        assert!(l.kfp < 1e-12 && l.kfp_initial < 1e-12 && l.hjb < 1e-12 && l.hjb_terminal < 1e-12, "{:?}", l);
    }

    #[test]
    fn zero_boundary_weights_admit_trivial_solutions() {
        // with the initial and terminal penalties off, any constant pair is a
        // minimizer when nothing drives the system
        let w = LossWeights {
            kfp_initial: 0.0,
            hjb_terminal: 0.0,
            ..Default::default()
        };
        let problem = PdeProblem::new(Transport { nu: 0.2, b: 0.0, m0: 0.5 }, 0.0, 1.0, w).unwrap();
        let nets = constant_nets(3.0, -7.0);
        let batch = sample_batch(0.0, 1.0, 1.0, (64, 16, 16), 1);
        let stats = estimate_statistics(&problem, &nets, 3, 16, 2).unwrap();
        let l = evaluate_loss(&problem, &nets, &batch, &stats).unwrap();
        assert!(l.total < 1e-12, "{:?}", l);
        let weighted = evaluate_loss(&PdeProblem::new(problem.pde, 0.0, 1.0, LossWeights::default()).unwrap(), &nets, &batch, &stats).unwrap();
        assert!(weighted.total > 1.0);
    }

    #[test]
    fn heat_solution_has_small_hjb_residual() {
        // u(t, x) = x^2 + 2 nu (T - t) solves u_t + nu u_xx = 0; fit a network
        // to it by least squares on values, then check the residual
        let nu = 0.1;
        let problem = PdeProblem::new(Transport { nu, b: 0.0, m0: 1.0 }, -1.0, 1.0, LossWeights::default()).unwrap();
        let exact = |t: f64, x: f64| x * x + 2.0 * nu * (1.0 - t);
        let mut nets = DgmNets::new(16, 3);
        let mut opt = Optimizer::new(OptimConfig::adam(1e-2).with_clip(None), nets.u.len());
        let fit = sample_batch(-1.0, 1.0, 1.0, (400, 1, 1), 9);
        let target: Vec<f64> = fit.t.iter().zip(&fit.x).map(|(&t, &x)| exact(t, x)).collect();
        let mut fit_err = 0.0;
        for _ in 0..3000 {
            let g = Graph::new();
            let u = nets.u.bind(&g);
            let z = g.constant(input_block(&problem, &fit.t, &fit.x));
            let diff = u.forward(z).unwrap() - g.constant(Block::lanes(target.clone()));
            let loss = diff.square().mean_lanes();
            fit_err = loss.scalar_value().sqrt();
            let grad = BoundNet::flatten(&g.gradients(loss.id(), &u.leaves()).unwrap());
            opt.step(&mut nets.u.theta, &grad).unwrap();
        }
        assert!(fit_err < 5e-3, "fit {}", fit_err);
        let batch = sample_batch(-0.9, 0.9, 1.0, (256, 16, 16), 4);
        let g = Graph::new();
        let (m, u) = (nets.m.bind_constant(&g), nets.u.bind_constant(&g));
        let stats = estimate_statistics(&problem, &nets, 2, 16, 2).unwrap();
        let l = residual_losses(&problem, &g, &m, &u, &batch, &stats).unwrap();
        let hjb = l.values().hjb;
        // the initial fit error is on values; derivatives lose about an
        // order of magnitude, so compare with a constant multiple of it
        assert!(hjb < 20.0 * fit_err, "hjb residual {} fit {}", hjb, fit_err);
        let untrained = DgmNets::new(16, 3);
        let l0 = evaluate_loss(&problem, &untrained, &batch, &stats).unwrap().hjb;
        assert!(hjb < l0 / 5.0, "{} vs untrained {}", hjb, l0);
    }

    #[test]
    fn kfp_residual_matches_finite_differences() {
        // transport with drift and diffusion: compare the graph residual with
        // finite differences of the frozen networks
        let problem = PdeProblem::new(CrowdedTradeParams { nu: 0.05, ..Default::default() }, -2.0, 8.0, LossWeights::default()).unwrap();
        let nets = DgmNets::new(6, 12);
        let stats = estimate_statistics(&problem, &nets, 5, 64, 3).unwrap();
        let pts = [(0.2, 1.0), (0.5, 4.0), (0.9, -1.0)];
        let t: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let x: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let g = Graph::new();
        let (mn, un) = (nets.m.bind_constant(&g), nets.u.bind_constant(&g));
        let batch = SampleBatch {
            t: t.clone(),
            x: x.clone(),
            initial: vec![0.0],
            terminal: vec![0.0],
        };
        let l = residual_losses(&problem, &g, &mn, &un, &batch, &stats).unwrap();
        let kfp = l.kfp_residual.value().into_vec();
        let hjb = l.hjb_residual.value().into_vec();
        let h = 1e-4;
        let f = |t: f64, x: f64| evaluate_fields(&problem, &nets, &[t], &[x]).unwrap();
        let kappa = 1.0;
        for (k, &(t, x)) in pts.iter().enumerate() {
            let mu = stats.at(t).control_mean.unwrap();
            let flux = |t: f64, x: f64| {
                let (m, _, ux) = f(t, x);
                m[0] * ux[0] / (2.0 * kappa)
            };
            let m = |t: f64, x: f64| f(t, x).0[0];
            let u = |t: f64, x: f64| f(t, x).1[0];
            let m_t = (m(t + h, x) - m(t - h, x)) / (2.0 * h);
            let m_xx = (m(t, x + h) - 2.0 * m(t, x) + m(t, x - h)) / (h * h);
            let div = (flux(t, x + h) - flux(t, x - h)) / (2.0 * h);
            let want = m_t - 0.05 * m_xx + div;
            assert!((kfp[k] - want).abs() < 1e-4 * (1.0 + want.abs()), "kfp {} vs {}", kfp[k], want);
            let u_t = (u(t + h, x) - u(t - h, x)) / (2.0 * h);
            let u_xx = (u(t, x + h) - 2.0 * u(t, x) + u(t, x - h)) / (h * h);
            let p = f(t, x).2[0];
            let p0 = problem.pde;
            let ham = p * p / (4.0 * p0.kappa) - p0.phi * x * x + p0.gamma * mu * x;
            let want = u_t + 0.05 * u_xx + ham;
            assert!((hjb[k] - want).abs() < 1e-4 * (1.0 + want.abs()), "hjb {} vs {}", hjb[k], want);
        }
    }

    #[test]
    fn loss_is_the_sum_of_its_parts_and_density_is_positive() {
        let problem = PdeProblem::new(CrowdedTradeParams::default(), -2.0, 8.0, LossWeights::default()).unwrap();
        let cfg = DgmConfig {
            iterations: 20,
            interior: 32,
            initial: 16,
            terminal: 16,
            stat_nodes: 3,
            stat_points: 32,
            eval_every: 10,
            optim: OptimConfig::adam(1e-3),
            seed: 5,
        };
        let a = train(&problem, DgmNets::new(8, 5), &cfg).unwrap();
        let b = train(&problem, DgmNets::new(8, 5), &cfg).unwrap();
        assert_eq!(a.history, b.history);
        for l in &a.history {
            assert!((l.total - (l.kfp + l.kfp_initial + l.hjb + l.hjb_terminal)).abs() < 1e-12);
        }
        assert!(a.grid.m.iter().flatten().all(|&m| m > 0.0));
        let dir = tempfile::tempdir().unwrap();
        a.write(dir.path()).unwrap();
        let t = Table::read(&dir.path().join("loss_history.csv")).unwrap();
        assert_eq!(t.header, ["iteration", "total", "kfp", "kfp_initial", "hjb", "hjb_terminal"]);
        assert_eq!(Table::read(&dir.path().join("density_grid.csv")).unwrap().len(), 21 * 101);
    }

    #[test]
    fn bad_problems_are_rejected() {
        let p = CrowdedTradeParams::default();
        assert!(PdeProblem::new(p, 1.0, 1.0, LossWeights::default()).is_err());
        let w = LossWeights { hjb: -1.0, ..Default::default() };
        assert!(PdeProblem::new(p, 0.0, 1.0, w).is_err());
    }
}
