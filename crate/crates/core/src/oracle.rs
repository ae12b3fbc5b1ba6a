//! Ground-truth solvers.
//!
//! * [`solve_ode_rk4`]: fixed-step classical Runge–Kutta.
//! * Semi-explicit oracles for the three benchmarks, from their Riccati or
//!   linear ODE reductions ([`SystemicRiskOracle`], [`PriceImpactOracle`],
//!   [`CrowdedTradeOracle`]). The derivations are in `docs/derivations.md`.
//! * [`grid_fixed_point`]: a finite-difference fixed point for any
//!   one-dimensional [`MfgPde`], used to cross-check the reductions.

use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::models::{
    CrowdedTradeParams, MeasureSummary, MfgPde, ModelError, PriceImpactParams, SystemicRiskParams,
};
use crate::output::{write_json, OutputError, Table};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("solution blew up (|y| > 1e12) at t = {t}")]
    BlowUp { t: f64 },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Output(#[from] OutputError),
}

/// Which end of the interval carries the known value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Initial,
    Terminal,
}

/// A vector-valued function of time on an increasing grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TimePath {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl TimePath {
    /// Linear interpolation, clamped to the grid.
    pub fn at(&self, t: f64) -> Vec<f64> {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.values[0].clone();
        }
        if t >= self.times[n - 1] {
            return self.values[n - 1].clone();
        }
        let k = self.times.partition_point(|&s| s <= t) - 1;
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        let w = (t - t0) / (t1 - t0);
        self.values[k]
            .iter()
            .zip(&self.values[k + 1])
            .map(|(a, b)| a + w * (b - a))
            .collect()
    }

    pub fn component(&self, j: usize, t: f64) -> f64 {
        self.at(t)[j]
    }

    pub fn first(&self) -> &[f64] {
        &self.values[0]
    }

    pub fn last(&self) -> &[f64] {
        self.values.last().unwrap()
    }

    pub fn to_table(&self, names: &[&str]) -> Table {
        let mut header = vec!["t"];
        header.extend_from_slice(names);
        let mut tab = Table::new(&header);
        for (t, v) in self.times.iter().zip(&self.values) {
            let mut row = vec![*t];
            row.extend_from_slice(v);
            tab.push(row);
        }
        tab
    }
}

/// Classical RK4 with `steps` equal steps on `[t0, t1]`, started from `y`
/// at `t0` ([`Side::Initial`]) or at `t1` ([`Side::Terminal`]).
pub fn solve_ode_rk4<F>(rhs: F, y: &[f64], side: Side, t0: f64, t1: f64, steps: usize) -> Result<TimePath, OracleError>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
{
    assert!(steps > 0 && t1 > t0, "need a non-empty interval and at least one step");
    let h = match side {
        Side::Initial => (t1 - t0) / steps as f64,
        Side::Terminal => -(t1 - t0) / steps as f64,
    };
    let axpy = |y: &[f64], k: &[f64], s: f64| -> Vec<f64> { y.iter().zip(k).map(|(a, b)| a + s * b).collect() };
    let mut t = if side == Side::Initial { t0 } else { t1 };
    let mut cur = y.to_vec();
    let mut times = vec![t];
    let mut values = vec![cur.clone()];
    for k in 0..steps {
        let k1 = rhs(t, &cur);
        let k2 = rhs(t + h / 2.0, &axpy(&cur, &k1, h / 2.0));
        let k3 = rhs(t + h / 2.0, &axpy(&cur, &k2, h / 2.0));
        let k4 = rhs(t + h, &axpy(&cur, &k3, h));
        for i in 0..cur.len() {
            cur[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        // exact grid points, no accumulated drift in t
        t = match side {
            Side::Initial => t0 + (k + 1) as f64 * (t1 - t0) / steps as f64,
            Side::Terminal => t1 - (k + 1) as f64 * (t1 - t0) / steps as f64,
        };
        if cur.iter().any(|v| !v.is_finite() || v.abs() > 1e12) {
            return Err(OracleError::BlowUp { t });
        }
        times.push(t);
        values.push(cur.clone());
    }
    if side == Side::Terminal {
        times.reverse();
        values.reverse();
    }
    Ok(TimePath { times, values })
}

/// Systemic risk: value `eta(t) (mbar - x)^2 / 2 + mu(t)` with
/// `eta' = 2 (a + q) eta + eta^2 - (eps - q^2)`, `eta(T) = c`, and
/// `mu' = -sigma^2 (1 - rho^2) eta / 2`, `mu(T) = 0`.
#[derive(Clone, Debug)]
pub struct SystemicRiskOracle {
    pub params: SystemicRiskParams,
    /// Components `(eta, mu)`.
    pub path: TimePath,
}

impl SystemicRiskOracle {
    pub fn solve(params: SystemicRiskParams, steps: usize) -> Result<Self, OracleError> {
        params.validate()?;
        let p = params;
        let s2 = p.sigma * p.sigma * (1.0 - p.rho * p.rho);
        let path = solve_ode_rk4(
            |_t, y| {
                let eta = y[0];
                vec![2.0 * (p.a + p.q) * eta + eta * eta - (p.eps - p.q * p.q), -0.5 * s2 * eta]
            },
            &[p.c, 0.0],
            Side::Terminal,
            0.0,
            p.horizon,
            steps,
        )?;
        Ok(Self { params, path })
    }

    pub fn eta(&self, t: f64) -> f64 {
        self.path.component(0, t)
    }

    /// Equilibrium feedback `(q + eta)(mbar - x)`.
    pub fn control(&self, t: f64, x: f64, mbar: f64) -> f64 {
        (self.params.q + self.eta(t)) * (mbar - x)
    }

    pub fn value(&self, t: f64, x: f64, mbar: f64) -> f64 {
        let v = self.path.at(t);
        0.5 * v[0] * (mbar - x).powi(2) + v[1]
    }

    /// Adjoint `Y = d_x value = eta (x - mbar)`.
    pub fn y(&self, t: f64, x: f64, mbar: f64) -> f64 {
        self.eta(t) * (x - mbar)
    }

    /// Volatility of `Y` against the idiosyncratic noise; its common-noise
    /// volatility is zero.
    pub fn z(&self, t: f64) -> f64 {
        self.eta(t) * self.params.sigma * (1.0 - self.params.rho * self.params.rho).sqrt()
    }

    /// Expected equilibrium cost per agent at time zero, `E[value(0, X0)]`.
    pub fn equilibrium_cost(&self) -> f64 {
        let v = self.path.first();
        0.5 * v[0] * self.params.m0.variance + v[1]
    }
}

/// Costs in the systemic-risk model under feedback `kappa(t)(mbar - x)`,
/// from the exact moment dynamics on a uniform grid of `steps` Euler steps.
///
/// With `y = x - mbar` the running cost is `(kappa^2/2 - q kappa + eps/2) v`
/// where `v' = -2 (a + kappa) v + sigma^2 (1 - rho^2)` is the spread variance.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PriceOfAnarchy {
    /// Equilibrium feedback evaluated on the discrete moment scheme.
    pub mfg_cost: f64,
    /// Social optimum of the same discrete scheme over all time-varying
    /// feedback gains, by exact dynamic programming.
    pub mfc_cost: f64,
    /// `mfg_cost - mfc_cost`.
    pub margin: f64,
    /// Continuous-time equilibrium cost from the Riccati value function.
    pub riccati_cost: f64,
}

pub fn systemic_risk_price_of_anarchy(params: SystemicRiskParams, steps: usize) -> Result<PriceOfAnarchy, OracleError> {
    let oracle = SystemicRiskOracle::solve(params, 4 * steps)?;
    let p = params;
    let dt = p.horizon / steps as f64;
    let s2 = p.sigma * p.sigma * (1.0 - p.rho * p.rho);
    let stage = |k: f64| 0.5 * k * k - p.q * k + 0.5 * p.eps;
    // equilibrium gains forward
    let mut v = p.m0.variance;
    let mut mfg = 0.0;
    for n in 0..steps {
        let k = p.q + oracle.eta(n as f64 * dt);
        mfg += stage(k) * v * dt;
        v += (-2.0 * (p.a + k) * v + s2) * dt;
    }
    mfg += 0.5 * p.c * v;
    // The cost-to-go is affine in v: W_n(v) = lam_n v + off_n.
    let (mut lam, mut off) = (0.5 * p.c, 0.0);
    for _ in 0..steps {
        // min_k (k^2/2 - q k) dt - 2 lam k dt: k = q + 2 lam
        let k = p.q + 2.0 * lam;
        let new_lam = stage(k) * dt + lam * (1.0 - 2.0 * (p.a + k) * dt);
        off += lam * s2 * dt;
        lam = new_lam;
    }
    let mfc = lam * p.m0.variance + off;
    Ok(PriceOfAnarchy {
        mfg_cost: mfg,
        mfc_cost: mfc,
        margin: mfg - mfc,
        riccati_cost: oracle.equilibrium_cost(),
    })
}

/// Price impact social optimum.
///
/// `alpha(t, x) = -P x / c_alpha + (P - nu + gamma) xbar / c_alpha` with
/// `P' = P^2/c_alpha - c_x`, `nu' = (nu - gamma)^2/c_alpha - c_x`,
/// `P(T) = nu(T) = c_g`, and `xbar' = -(nu - gamma) xbar / c_alpha`.
#[derive(Clone, Debug)]
pub struct PriceImpactOracle {
    pub params: PriceImpactParams,
    /// Components `(P, nu, xbar)`.
    pub path: TimePath,
}

impl PriceImpactOracle {
    pub fn solve(params: PriceImpactParams, steps: usize) -> Result<Self, OracleError> {
        params.validate()?;
        let p = params;
        let riccati = move |_t: f64, y: &[f64]| {
            vec![
                y[0] * y[0] / p.c_alpha - p.c_x,
                (y[1] - p.gamma).powi(2) / p.c_alpha - p.c_x,
                -(y[1] - p.gamma) * y[2] / p.c_alpha,
            ]
        };
        let back = solve_ode_rk4(&riccati, &[p.c_g, p.c_g, 0.0], Side::Terminal, 0.0, p.horizon, steps)?;
        let start = back.first();
        // the coefficient ODEs are autonomous, so restarting them forward
        // together with the mean reproduces the backward solution
        let path = solve_ode_rk4(&riccati, &[start[0], start[1], p.m0.mean], Side::Initial, 0.0, p.horizon, steps)?;
        Ok(Self { params, path })
    }

    pub fn slope(&self, t: f64) -> f64 {
        -self.path.component(0, t) / self.params.c_alpha
    }

    pub fn intercept(&self, t: f64) -> f64 {
        let v = self.path.at(t);
        (v[0] - v[1] + self.params.gamma) * v[2] / self.params.c_alpha
    }

    pub fn control(&self, t: f64, x: f64) -> f64 {
        self.slope(t) * x + self.intercept(t)
    }

    pub fn mean_state(&self, t: f64) -> f64 {
        self.path.component(2, t)
    }

    pub fn mean_control(&self, t: f64) -> f64 {
        let v = self.path.at(t);
        -(v[1] - self.params.gamma) * v[2] / self.params.c_alpha
    }
}

/// Crowded trade with `v = A2 q^2 + A1 q + A0`:
/// `A2' = phi - A2^2/kappa`, `A2(T) = -A`,
/// `A1' = -A2 A1/kappa - gamma mubar`, `A1(T) = 0`,
/// `mubar = (2 A2 qbar + A1)/(2 kappa) = qbar'`, `qbar(0)` the initial mean.
///
/// The `(A1, qbar)` system is linear, so it is solved by shooting on `A1(0)`.
#[derive(Clone, Debug)]
pub struct CrowdedTradeOracle {
    pub params: CrowdedTradeParams,
    /// Components `(A2, A1, qbar)`.
    pub path: TimePath,
}

impl CrowdedTradeOracle {
    pub fn solve(params: CrowdedTradeParams, steps: usize) -> Result<Self, OracleError> {
        params.validate()?;
        let p = params;
        let a2 = solve_ode_rk4(
            |_t, y| vec![p.phi - y[0] * y[0] / p.kappa],
            &[-p.terminal_penalty],
            Side::Terminal,
            0.0,
            p.horizon,
            steps,
        )?;
        let rhs = move |_t: f64, y: &[f64]| {
            let mu = (2.0 * y[0] * y[2] + y[1]) / (2.0 * p.kappa);
            vec![p.phi - y[0] * y[0] / p.kappa, -y[0] * y[1] / p.kappa - p.gamma * mu, mu]
        };
        let shoot = |s: f64| solve_ode_rk4(&rhs, &[a2.first()[0], s, p.m0.mean], Side::Initial, 0.0, p.horizon, steps);
        let e0 = shoot(0.0)?.last()[1];
        let e1 = shoot(1.0)?.last()[1];
        let s = -e0 / (e1 - e0);
        let path = shoot(s)?;
        Ok(Self { params, path })
    }

    /// Optimal trading rate `d_q v / (2 kappa)`.
    pub fn control(&self, t: f64, q: f64) -> f64 {
        let v = self.path.at(t);
        (2.0 * v[0] * q + v[1]) / (2.0 * self.params.kappa)
    }

    pub fn slope(&self, t: f64) -> f64 {
        self.path.component(0, t) / self.params.kappa
    }

    pub fn mubar(&self, t: f64) -> f64 {
        let v = self.path.at(t);
        (2.0 * v[0] * v[2] + v[1]) / (2.0 * self.params.kappa)
    }

    pub fn mean_inventory(&self, t: f64) -> f64 {
        self.path.component(2, t)
    }
}

/// Resolution and iteration settings of the grid solver.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub lo: f64,
    pub hi: f64,
    pub cells: usize,
    /// Time steps of the HJB sweep; the KFP sweep sub-steps as the CFL
    /// condition requires.
    pub steps: usize,
    /// Weight of the new density in the damped update.
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub policy_iter: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            lo: -3.0,
            hi: 3.0,
            cells: 600,
            steps: 400,
            damping: 0.5,
            tol: 1e-7,
            max_iter: 300,
            policy_iter: 30,
        }
    }
}

impl GridConfig {
    pub fn on(lo: f64, hi: f64) -> Self {
        Self {
            lo,
            hi,
            ..Self::default()
        }
    }

    pub fn resolution(mut self, cells: usize, steps: usize) -> Self {
        self.cells = cells;
        self.steps = steps;
        self
    }
}

/// Output of [`grid_fixed_point`]: the last undamped sweep.
#[derive(Clone, Debug)]
pub struct GridSolution {
    pub times: Vec<f64>,
    /// Cell centres.
    pub xs: Vec<f64>,
    pub dx: f64,
    /// `m[n][i]`, normalized so that `sum m dx = 1`.
    pub m: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    /// Optimizing control at the cell centres.
    pub control: Vec<Vec<f64>>,
    /// Statistics of `(m, u)` at each time.
    pub stats: Vec<MeasureSummary<f64>>,
    pub converged: bool,
    pub iterations: usize,
    /// Sup distance between successive undamped outputs, per iteration.
    pub residuals: Vec<f64>,
    /// Largest `|sum m dx - 1|` before renormalization.
    pub max_mass_drift: f64,
    /// Largest gap between the statistics fed to the last HJB sweep and
    /// those recomputed from its output.
    pub consistency: f64,
}

#[derive(Serialize)]
struct GridMeta<'a> {
    scheme: &'a str,
    problem: &'a str,
    cells: usize,
    steps: usize,
    lo: f64,
    hi: f64,
    damping: f64,
    tol: f64,
    converged: bool,
    iterations: usize,
    final_residual: f64,
    max_mass_drift: f64,
    consistency: f64,
}

impl GridSolution {
    fn locate(grid: &[f64], v: f64) -> (usize, f64) {
        let n = grid.len();
        if v <= grid[0] {
            return (0, 0.0);
        }
        if v >= grid[n - 1] {
            return (n - 2, 1.0);
        }
        let k = (grid.partition_point(|&g| g <= v) - 1).min(n - 2);
        (k, (v - grid[k]) / (grid[k + 1] - grid[k]))
    }

    /// Bilinear interpolation of a `(t, x)` field.
    pub fn interpolate(&self, field: &[Vec<f64>], t: f64, x: f64) -> f64 {
        let (n, wt) = Self::locate(&self.times, t);
        let (i, wx) = Self::locate(&self.xs, x);
        let f = |n: usize| field[n][i] * (1.0 - wx) + field[n][i + 1] * wx;
        f(n) * (1.0 - wt) + f(n + 1) * wt
    }

    pub fn control_at(&self, t: f64, x: f64) -> f64 {
        self.interpolate(&self.control, t, x)
    }

    /// Time index nearest to `t`.
    pub fn index(&self, t: f64) -> usize {
        let dt = self.times[1] - self.times[0];
        ((t / dt).round() as usize).min(self.times.len() - 1)
    }

    /// Quantile of the density at time index `n`.
    pub fn quantile(&self, n: usize, p: f64) -> f64 {
        let mut acc = 0.0;
        for (i, &mi) in self.m[n].iter().enumerate() {
            let next = acc + mi * self.dx;
            if next >= p {
                let frac = if mi > 0.0 { (p - acc) / (mi * self.dx) } else { 0.0 };
                return self.xs[i] - 0.5 * self.dx + frac * self.dx;
            }
            acc = next;
        }
        *self.xs.last().unwrap()
    }

    pub fn mean(&self, n: usize) -> f64 {
        self.xs.iter().zip(&self.m[n]).map(|(x, m)| x * m * self.dx).sum()
    }

    pub fn variance(&self, n: usize) -> f64 {
        let mu = self.mean(n);
        self.xs.iter().zip(&self.m[n]).map(|(x, m)| (x - mu).powi(2) * m * self.dx).sum()
    }

    /// Linear fit of the control at the time nearest `t`, over cells between
    /// the `q` and `1 - q` quantiles of the density.
    pub fn control_fit(&self, t: f64, q: f64) -> crate::stats::LinearFit {
        let n = self.index(t);
        let (lo, hi) = (self.quantile(n, q), self.quantile(n, 1.0 - q));
        let (xs, ys): (Vec<f64>, Vec<f64>) = self
            .xs
            .iter()
            .zip(&self.control[n])
            .filter(|(x, _)| **x >= lo && **x <= hi)
            .map(|(x, a)| (*x, *a))
            .unzip();
        crate::stats::linear_fit(&xs, &ys)
    }

    /// Relative sup gap `max |a - exact| / max |exact|` over cells between
    /// the `q` and `1 - q` quantiles of the density at every time.
    pub fn control_gap(&self, q: f64, exact: impl Fn(f64, f64) -> f64) -> f64 {
        let (mut err, mut scale) = (0.0f64, 0.0f64);
        for (n, &t) in self.times.iter().enumerate() {
            let (lo, hi) = (self.quantile(n, q), self.quantile(n, 1.0 - q));
            for (i, &x) in self.xs.iter().enumerate() {
                if x < lo || x > hi {
                    continue;
                }
                let e = exact(t, x);
                err = err.max((self.control[n][i] - e).abs());
                scale = scale.max(e.abs());
            }
        }
        err / scale
    }

    fn field_table(&self, name: &str, field: &[Vec<f64>], every: usize) -> Table {
        let mut tab = Table::new(&["t", "x", name]);
        for (n, &t) in self.times.iter().enumerate() {
            if n % every != 0 && n + 1 != self.times.len() {
                continue;
            }
            for (i, &x) in self.xs.iter().enumerate() {
                tab.push(vec![t, x, field[n][i]]);
            }
        }
        tab
    }

    /// Write `density_grid.csv`, `value_grid.csv`, `control_grid.csv`,
    /// `statistics.csv` and `oracle_meta.json`, keeping about `snapshots`
    /// time slices.
    pub fn write(&self, dir: &Path, problem: &str, cfg: &GridConfig, snapshots: usize) -> Result<(), OracleError> {
        let every = ((self.times.len() - 1) / snapshots.max(1)).max(1);
        self.field_table("m", &self.m, every).write(&dir.join("density_grid.csv"))?;
        self.field_table("u", &self.u, every).write(&dir.join("value_grid.csv"))?;
        self.field_table("alpha", &self.control, every).write(&dir.join("control_grid.csv"))?;
        let mut st = Table::new(&["t", "state_mean", "control_mean"]);
        for (t, s) in self.times.iter().zip(&self.stats) {
            st.push(vec![*t, s.state_mean.unwrap_or(f64::NAN), s.control_mean.unwrap_or(f64::NAN)]);
        }
        st.write(&dir.join("statistics.csv"))?;
        write_json(
            &dir.join("oracle_meta.json"),
            &GridMeta {
                scheme: "implicit upwind HJB with policy iteration, explicit upwind KFP, damped fixed point",
                problem,
                cells: cfg.cells,
                steps: cfg.steps,
                lo: cfg.lo,
                hi: cfg.hi,
                damping: cfg.damping,
                tol: cfg.tol,
                converged: self.converged,
                iterations: self.iterations,
                final_residual: self.residuals.last().copied().unwrap_or(f64::NAN),
                max_mass_drift: self.max_mass_drift,
                consistency: self.consistency,
            },
        )?;
        Ok(())
    }
}

fn gradient(u: &[f64], dx: f64) -> Vec<f64> {
    let n = u.len();
    (0..n)
        .map(|i| {
            if i == 0 {
                (u[1] - u[0]) / dx
            } else if i == n - 1 {
                (u[n - 1] - u[n - 2]) / dx
            } else {
                (u[i + 1] - u[i - 1]) / (2.0 * dx)
            }
        })
        .collect()
}

/// Thomas algorithm for `lower[i] x[i-1] + diag[i] x[i] + upper[i] x[i+1] = rhs[i]`.
fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = upper[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let den = diag[i] - lower[i] * c[i - 1];
        c[i] = upper[i] / den;
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / den;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

struct Grid {
    xs: Vec<f64>,
    dx: f64,
    dt: f64,
    steps: usize,
}

fn stats_of<P: MfgPde>(pb: &P, g: &Grid, m: &[f64], u: &[f64]) -> MeasureSummary<f64> {
    let w: Vec<f64> = m.iter().map(|v| v * g.dx).collect();
    pb.statistics(&g.xs, &w, &gradient(u, g.dx))
}

/// Backward implicit sweep with the statistics frozen per time.
fn hjb_sweep<P: MfgPde>(
    pb: &P,
    g: &Grid,
    stats: &[MeasureSummary<f64>],
    policy_iter: usize,
) -> Result<Vec<Vec<f64>>, OracleError> {
    let nx = g.xs.len();
    let (dx, dt, nu) = (g.dx, g.dt, pb.nu());
    let mut u = vec![Vec::new(); g.steps + 1];
    u[g.steps] = g
        .xs
        .iter()
        .map(|&x| pb.terminal_value(x, &stats[g.steps]))
        .collect::<Result<_, _>>()?;
    let mut lower = vec![0.0; nx];
    let mut diag = vec![0.0; nx];
    let mut upper = vec![0.0; nx];
    let mut rhs = vec![0.0; nx];
    for n in (0..g.steps).rev() {
        let next = u[n + 1].clone();
        let mut cur = next.clone();
        for _ in 0..policy_iter.max(1) {
            let p = gradient(&cur, dx);
            for i in 0..nx {
                let h = pb.hamiltonian(g.xs[i], p[i], &stats[n])?;
                let b = h.dp;
                let running = h.value - h.dp * p[i];
                let interior = i > 0 && i + 1 < nx;
                let d2 = if interior { nu / (dx * dx) } else { 0.0 };
                lower[i] = -d2;
                upper[i] = -d2;
                diag[i] = 1.0 / dt + 2.0 * d2;
                rhs[i] = next[i] / dt + running;
                if b >= 0.0 {
                    if i + 1 < nx {
                        diag[i] += b / dx;
                        upper[i] -= b / dx;
                    } else {
                        rhs[i] += b * (next[i] - next[i - 1]) / dx;
                    }
                } else if i > 0 {
                    diag[i] -= b / dx;
                    lower[i] += b / dx;
                } else {
                    rhs[i] += b * (next[1] - next[0]) / dx;
                }
            }
            let new = solve_tridiagonal(&lower, &diag, &upper, &rhs);
            let change = new.iter().zip(&cur).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let size = new.iter().map(|v| v.abs()).fold(1.0, f64::max);
            cur = new;
            if change <= 1e-13 * size {
                break;
            }
        }
        u[n] = cur;
    }
    Ok(u)
}

/// Forward explicit sweep; returns the densities, the statistics seen at
/// each time and the largest mass drift.
#[allow(clippy::type_complexity)]
fn kfp_sweep<P: MfgPde>(
    pb: &P,
    g: &Grid,
    u: &[Vec<f64>],
    m0: &[f64],
) -> Result<(Vec<Vec<f64>>, Vec<MeasureSummary<f64>>, f64), OracleError> {
    let nx = g.xs.len();
    let (dx, nu) = (g.dx, pb.nu());
    let mut ms = Vec::with_capacity(g.steps + 1);
    ms.push(m0.to_vec());
    let mut stats = Vec::with_capacity(g.steps + 1);
    let mut drift_max = 0.0f64;
    let mut m = m0.to_vec();
    let mut bf = vec![0.0; nx - 1];
    let mut flux = vec![0.0; nx - 1];
    for n in 0..g.steps {
        let s = stats_of(pb, g, &m, &u[n]);
        for j in 0..nx - 1 {
            let xf = 0.5 * (g.xs[j] + g.xs[j + 1]);
            let pf = (u[n][j + 1] - u[n][j]) / dx;
            bf[j] = pb.hamiltonian(xf, pf, &s)?.dp;
        }
        let bmax = bf.iter().map(|b| b.abs()).fold(0.0, f64::max);
        let rate = bmax / dx + 2.0 * nu / (dx * dx);
        let sub = ((g.dt * rate / 0.9).ceil() as usize).max(1);
        let h = g.dt / sub as f64;
        for _ in 0..sub {
            for j in 0..nx - 1 {
                let adv = if bf[j] >= 0.0 { bf[j] * m[j] } else { bf[j] * m[j + 1] };
                flux[j] = adv - nu * (m[j + 1] - m[j]) / dx;
            }
            for i in 0..nx {
                let right = if i + 1 < nx { flux[i] } else { 0.0 };
                let left = if i > 0 { flux[i - 1] } else { 0.0 };
                m[i] -= h / dx * (right - left);
            }
        }
        let mass: f64 = m.iter().sum::<f64>() * dx;
        drift_max = drift_max.max((mass - 1.0).abs());
        m.iter_mut().for_each(|v| *v /= mass);
        stats.push(s);
        ms.push(m.clone());
    }
    Ok((ms, stats, drift_max))
}

/// Solve the PDE system by damped fixed-point iteration.
pub fn grid_fixed_point<P: MfgPde>(pb: &P, cfg: &GridConfig) -> Result<GridSolution, OracleError> {
    if cfg.cells < 3 || cfg.steps < 1 || cfg.hi <= cfg.lo {
        return Err(OracleError::InvalidGrid(format!(
            "need at least 3 cells, 1 step and lo < hi, got {:?}",
            cfg
        )));
    }
    if !(cfg.damping > 0.0 && cfg.damping <= 1.0) {
        return Err(OracleError::InvalidGrid(format!("damping must lie in (0, 1], got {}", cfg.damping)));
    }
    let dx = (cfg.hi - cfg.lo) / cfg.cells as f64;
    let xs: Vec<f64> = (0..cfg.cells).map(|i| cfg.lo + (i as f64 + 0.5) * dx).collect();
    let g = Grid {
        xs,
        dx,
        dt: pb.horizon() / cfg.steps as f64,
        steps: cfg.steps,
    };
    let times: Vec<f64> = (0..=cfg.steps).map(|n| n as f64 * g.dt).collect();
    let mut m0: Vec<f64> = g.xs.iter().map(|&x| pb.initial_density(x)).collect();
    let mass: f64 = m0.iter().sum::<f64>() * dx;
    m0.iter_mut().for_each(|v| *v /= mass);

    // initial guess: frozen density, terminal value at all times
    let mut m_iter = vec![m0.clone(); cfg.steps + 1];
    let s0 = stats_of(pb, &g, &m0, &vec![0.0; cfg.cells]);
    let u_term: Vec<f64> = g
        .xs
        .iter()
        .map(|&x| pb.terminal_value(x, &s0))
        .collect::<Result<_, _>>()?;
    let mut u_iter = vec![u_term; cfg.steps + 1];
    let mut prev: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = None;
    let mut residuals = Vec::new();
    let mut drift_max = 0.0f64;
    let mut converged = false;
    let mut last = None;
    for k in 0..cfg.max_iter {
        let stats: Vec<MeasureSummary<f64>> = (0..=cfg.steps)
            .map(|n| stats_of(pb, &g, &m_iter[n], &u_iter[n]))
            .collect();
        let u_new = hjb_sweep(pb, &g, &stats, cfg.policy_iter)?;
        let (m_new, mut seen, drift) = kfp_sweep(pb, &g, &u_new, &m0)?;
        seen.push(stats_of(pb, &g, &m_new[cfg.steps], &u_new[cfg.steps]));
        drift_max = drift_max.max(drift);
        let res = match &prev {
            Some((pm, pu)) => sup_dist(&m_new, pm).max(sup_dist(&u_new, pu)),
            None => f64::INFINITY,
        };
        residuals.push(res);
        let consistency = stats
            .iter()
            .zip(&seen)
            .map(|(a, b)| stat_gap(a, b))
            .fold(0.0, f64::max);
        last = Some((u_new.clone(), m_new.clone(), seen, consistency, k + 1));
        if res < cfg.tol {
            converged = true;
            break;
        }
        for n in 0..=cfg.steps {
            for i in 0..cfg.cells {
                m_iter[n][i] = (1.0 - cfg.damping) * m_iter[n][i] + cfg.damping * m_new[n][i];
            }
        }
        u_iter = u_new.clone();
        prev = Some((m_new, u_new));
    }
    let (u, m, stats, consistency, iterations) = last.expect("at least one iteration");
    let mut control = Vec::with_capacity(u.len());
    for n in 0..u.len() {
        let p = gradient(&u[n], dx);
        let row: Result<Vec<f64>, ModelError> = g
            .xs
            .iter()
            .zip(&p)
            .map(|(&x, &pi)| pb.hamiltonian(x, pi, &stats[n]).map(|h| h.control))
            .collect();
        control.push(row?);
    }
    Ok(GridSolution {
        times,
        xs: g.xs,
        dx,
        m,
        u,
        control,
        stats,
        converged,
        iterations,
        residuals,
        max_mass_drift: drift_max,
        consistency,
    })
}

fn sup_dist(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

fn stat_gap(a: &MeasureSummary<f64>, b: &MeasureSummary<f64>) -> f64 {
    let d = |x: Option<f64>, y: Option<f64>| match (x, y) {
        (Some(x), Some(y)) => (x - y).abs(),
        _ => 0.0,
    };
    d(a.state_mean, b.state_mean).max(d(a.control_mean, b.control_mean))
}
