//! Deep shooting for McKean–Vlasov forward-backward systems.
//!
//! The backward equation `dY = -F dt + Z dW`, `Y_T = G(X_T, law)` is run
//! forward from `Y_0 = y0(X_0)` with `Z_t = z(t, X_t)`, both networks, and
//! the squared terminal mismatch is minimized. The law enters through the
//! empirical mean of the particles, which under common noise is the
//! conditional mean and is also fed to both networks.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Block, Graph, Real, Var};
use crate::mfc_direct::{derive_seed, loss_table};
use crate::models::{InitialLaw, MeanFieldModel, MeasureSummary, ModelError, SystemicRiskParams};
use crate::net::{init_params, Architecture, BoundNet, NetError, NetworkParameters};
use crate::optim::{OptimConfig, OptimError, Optimizer};
use crate::oracle::SystemicRiskOracle;
use crate::output::{write_json, OutputError, Table};
use crate::particle::{sample_noise_with, NetInputs, NoiseSample};

#[derive(Debug, Error)]
pub enum FbsdeError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Output(#[from] OutputError),
}

/// A scalar forward-backward system whose law dependence is through the
/// state mean `mbar`.
///
/// `dX = B dt + sigma dW + sigma0 dW0`, `dY = -F dt + Z dW`, `Y_T = G(X_T)`.
pub trait FbsdeSystem {
    fn horizon(&self) -> f64;
    fn sigma(&self) -> f64;
    fn common_sigma(&self) -> f64 {
        0.0
    }
    fn initial_law(&self) -> InitialLaw;
    fn drift<R: Real>(&self, t: f64, x: R, mbar: R, y: R) -> Result<R, ModelError>;
    fn driver<R: Real>(&self, t: f64, x: R, mbar: R, y: R, z: R) -> Result<R, ModelError>;
    fn terminal<R: Real>(&self, x: R, mbar: R) -> Result<R, ModelError>;
    /// Control decoded from the adjoint, if the system comes from a game.
    fn control(&self, _t: f64, _x: f64, _mbar: f64, _y: f64) -> Option<f64> {
        None
    }

    fn sample_noise(&self, particles: usize, steps: usize, seed: u64) -> NoiseSample {
        sample_noise_with(
            self.initial_law(),
            self.horizon(),
            self.common_sigma() != 0.0,
            particles,
            steps,
            seed,
        )
    }
}

/// Pontryagin system of the systemic-risk game: `Y` is the adjoint of the
/// state, `alpha = q (mbar - x) - y`, `F = d_x H`, `G = d_x g`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SystemicRiskFbsde(pub SystemicRiskParams);

impl FbsdeSystem for SystemicRiskFbsde {
    fn horizon(&self) -> f64 {
        self.0.horizon
    }
    fn sigma(&self) -> f64 {
        self.0.idiosyncratic_vol()
    }
    fn common_sigma(&self) -> f64 {
        self.0.common_vol()
    }
    fn initial_law(&self) -> InitialLaw {
        self.0.m0
    }
    fn drift<R: Real>(&self, _t: f64, x: R, mbar: R, y: R) -> Result<R, ModelError> {
        let p = &self.0;
        let d = mbar - x;
        Ok(d * (p.a + p.q) - y)
    }
    fn driver<R: Real>(&self, _t: f64, x: R, mbar: R, y: R, _z: R) -> Result<R, ModelError> {
        let p = &self.0;
        Ok(-(y * (p.a + p.q)) - (mbar - x) * (p.eps - p.q * p.q))
    }
    fn terminal<R: Real>(&self, x: R, mbar: R) -> Result<R, ModelError> {
        Ok((x - mbar) * self.0.c)
    }
    fn control(&self, _t: f64, x: f64, mbar: f64, y: f64) -> Option<f64> {
        Some(self.0.q * (mbar - x) - y)
    }
}

/// The two networks: `y0(x[, mbar])` and `z(t, x[, mbar])`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShootingNets {
    pub y0: NetworkParameters,
    pub z: NetworkParameters,
    pub with_mean: bool,
}

impl ShootingNets {
    pub fn new(width: usize, with_mean: bool, seed: u64) -> Self {
        let extra = usize::from(with_mean);
        Self {
            y0: init_params(&Architecture::mlp(1 + extra, width, 1), seed),
            z: init_params(&Architecture::mlp(2 + extra, width, 1), derive_seed(seed, 1)),
            with_mean,
        }
    }

    pub fn from_parts(y0: NetworkParameters, z: NetworkParameters, with_mean: bool) -> Result<Self, NetError> {
        let extra = usize::from(with_mean);
        for (net, want) in [(&y0, 1 + extra), (&z, 2 + extra)] {
            if net.arch.input_dim() != want || net.arch.output_dim() != 1 {
                return Err(NetError::DimensionMismatch {
                    expected: want,
                    found: net.arch.input_dim(),
                });
            }
        }
        Ok(Self { y0, z, with_mean })
    }

    pub fn len(&self) -> usize {
        self.y0.len() + self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `y0` parameters followed by `z` parameters.
    pub fn theta(&self) -> Vec<f64> {
        self.y0.theta.iter().chain(&self.z.theta).copied().collect()
    }

    pub fn set_theta(&mut self, theta: &[f64]) {
        let k = self.y0.len();
        self.y0.theta.copy_from_slice(&theta[..k]);
        self.z.theta.copy_from_slice(&theta[k..]);
    }

    fn inputs(&self) -> NetInputs {
        if self.with_mean {
            NetInputs::TimeStateMean
        } else {
            NetInputs::TimeState
        }
    }
}

/// Networks bound into a graph.
pub struct BoundShooting<'g> {
    pub y0: BoundNet<'g>,
    pub z: BoundNet<'g>,
    inputs: NetInputs,
    with_mean: bool,
}

impl<'g> BoundShooting<'g> {
    pub fn new(nets: &ShootingNets, g: &'g Graph, trainable: bool) -> Self {
        let bind = |p: &NetworkParameters| if trainable { p.bind(g) } else { p.bind_constant(g) };
        Self {
            y0: bind(&nets.y0),
            z: bind(&nets.z),
            inputs: nets.inputs(),
            with_mean: nets.with_mean,
        }
    }

    pub fn leaves(&self) -> Vec<crate::autodiff::NodeId> {
        let mut l = self.y0.leaves();
        l.extend(self.z.leaves());
        l
    }

    pub fn y0(&self, x: Var<'g>, mbar: Var<'g>) -> Result<Var<'g>, FbsdeError> {
        let input = if self.with_mean { Var::stack(&[x, mbar]) } else { x };
        Ok(self.y0.forward(input)?)
    }

    pub fn z(&self, t: f64, x: Var<'g>, mbar: Var<'g>) -> Result<Var<'g>, FbsdeError> {
        Ok(self.z.forward(self.inputs.build(t, x, mbar))?)
    }
}

/// A simulated system inside a graph.
pub struct FbsdeRollout<'g> {
    /// `1 x N` lanes per time.
    pub xs: Vec<Var<'g>>,
    pub ys: Vec<Var<'g>>,
    pub means: Vec<Var<'g>>,
    /// `Y_T - G(X_T, mbar_T)` per particle.
    pub mismatch: Var<'g>,
    /// Mean squared mismatch.
    pub loss: Var<'g>,
}

/// Euler scheme for both equations with the given initial-value and
/// volatility maps.
pub fn simulate_fbsde<'g, S, Y0, Z>(
    g: &'g Graph,
    system: &S,
    y0: Y0,
    z: Z,
    noise: &NoiseSample,
) -> Result<FbsdeRollout<'g>, FbsdeError>
where
    S: FbsdeSystem,
    Y0: Fn(Var<'g>, Var<'g>) -> Result<Var<'g>, FbsdeError>,
    Z: Fn(f64, Var<'g>, Var<'g>) -> Result<Var<'g>, FbsdeError>,
{
    let dt = noise.dt;
    let (sig, sig0) = (system.sigma(), system.common_sigma());
    let finite = |v: &Var<'g>, step: usize| {
        if v.value().all_finite() {
            Ok(())
        } else {
            Err(FbsdeError::NonFinite { step })
        }
    };
    let mut x = g.constant(Block::lanes(noise.x0.clone()));
    let mut mbar = x.mean_lanes();
    let mut y = y0(x, mbar)?;
    finite(&x, 0)?;
    finite(&y, 0)?;
    let mut xs = vec![x];
    let mut ys = vec![y];
    let mut means = vec![mbar];
    for n in 0..noise.steps {
        let t = noise.time(n);
        let zn = z(t, x, mbar)?;
        let b = system.drift(t, x, mbar, y)?;
        let f = system.driver(t, x, mbar, y, zn)?;
        let dw = g.constant(Block::lanes(noise.step(n).to_vec()));
        let mut xn = x + b * dt + dw * sig;
        if sig0 != 0.0 {
            xn = xn + g.constant_scalar(sig0 * noise.common(n));
        }
        y = y - f * dt + zn * dw;
        x = xn;
        finite(&x, n + 1)?;
        finite(&y, n + 1)?;
        mbar = x.mean_lanes();
        xs.push(x);
        ys.push(y);
        means.push(mbar);
    }
    let mismatch = y - system.terminal(x, mbar)?;
    let loss = mismatch.square().mean_lanes();
    Ok(FbsdeRollout {
        xs,
        ys,
        means,
        mismatch,
        loss,
    })
}

/// `E |Y_T - G|^2` for networks bound in `g`.
pub fn penalty_loss<'g, S: FbsdeSystem>(
    g: &'g Graph,
    system: &S,
    nets: &BoundShooting<'g>,
    noise: &NoiseSample,
) -> Result<FbsdeRollout<'g>, FbsdeError> {
    simulate_fbsde(g, system, |x, m| nets.y0(x, m), |t, x, m| nets.z(t, x, m), noise)
}

/// Plain sample paths, `xs[n][i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FbsdePaths {
    pub dt: f64,
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<Vec<f64>>,
    pub means: Vec<f64>,
    pub mismatch: Vec<f64>,
}

impl FbsdePaths {
    fn from_rollout(r: &FbsdeRollout<'_>, dt: f64) -> Self {
        Self {
            dt,
            xs: r.xs.iter().map(|v| v.value().into_vec()).collect(),
            ys: r.ys.iter().map(|v| v.value().into_vec()).collect(),
            means: r.means.iter().map(|v| v.scalar_value()).collect(),
            mismatch: r.mismatch.value().into_vec(),
        }
    }

    pub fn loss(&self) -> f64 {
        self.mismatch.iter().map(|m| m * m).sum::<f64>() / self.mismatch.len() as f64
    }

    /// Control decoded along the paths, `alpha[n][i]`.
    pub fn controls<S: FbsdeSystem>(&self, system: &S) -> Option<Vec<Vec<f64>>> {
        (0..self.xs.len())
            .map(|n| {
                self.xs[n]
                    .iter()
                    .zip(&self.ys[n])
                    .map(|(&x, &y)| system.control(n as f64 * self.dt, x, self.means[n], y))
                    .collect()
            })
            .collect()
    }
}

/// Evaluate frozen networks on a sample.
pub fn simulate_nets<S: FbsdeSystem>(system: &S, nets: &ShootingNets, noise: &NoiseSample) -> Result<FbsdePaths, FbsdeError> {
    let g = Graph::new();
    let bound = BoundShooting::new(nets, &g, false);
    Ok(FbsdePaths::from_rollout(&penalty_loss(&g, system, &bound, noise)?, noise.dt))
}

/// Riccati solution on the same sample: `X` driven by the equilibrium
/// feedback through the same Euler scheme, `Y = eta(t) (X - mbar)`.
pub fn systemic_oracle_paths(
    system: &SystemicRiskFbsde,
    oracle: &SystemicRiskOracle,
    noise: &NoiseSample,
) -> Result<FbsdePaths, FbsdeError> {
    let g = Graph::new();
    let sig = system.sigma();
    let r = simulate_fbsde(
        &g,
        system,
        |x, m| Ok((x - m) * oracle.eta(0.0)),
        |t, x, _m| Ok(x.constant_like(oracle.eta(t) * sig)),
        noise,
    )?;
    let mut paths = FbsdePaths::from_rollout(&r, noise.dt);
    // X above already follows the equilibrium feedback, since
    // alpha = q (mbar - x) - eta (x - mbar) when Y is on the ansatz; pin Y
    // to the ansatz exactly rather than to its Euler approximation.
    for n in 0..paths.xs.len() {
        let t = n as f64 * noise.dt;
        let m = paths.means[n];
        paths.ys[n] = paths.xs[n].iter().map(|&x| oracle.y(t, x, m)).collect();
    }
    Ok(paths)
}

/// Same-noise path errors of `learned` against `exact`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PathErrors {
    pub rmse_x: f64,
    pub rmse_y: f64,
    /// `max Y - min Y` of the exact paths.
    pub y_range: f64,
    /// `rmse_y / y_range`.
    pub relative_y: f64,
    pub rmse_x_by_time: Vec<f64>,
    pub rmse_y_by_time: Vec<f64>,
}

pub fn path_errors(learned: &FbsdePaths, exact: &FbsdePaths) -> PathErrors {
    let rmse = |a: &[Vec<f64>], b: &[Vec<f64>]| -> (f64, Vec<f64>) {
        let by_time: Vec<f64> = a
            .iter()
            .zip(b)
            .map(|(u, v)| (u.iter().zip(v).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / u.len() as f64).sqrt())
            .collect();
        let total = (by_time.iter().map(|e| e * e).sum::<f64>() / by_time.len() as f64).sqrt();
        (total, by_time)
    };
    let (rmse_x, rmse_x_by_time) = rmse(&learned.xs, &exact.xs);
    let (rmse_y, rmse_y_by_time) = rmse(&learned.ys, &exact.ys);
    let all = exact.ys.iter().flatten();
    let hi = all.clone().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lo = all.fold(f64::INFINITY, |a, &b| a.min(b));
    PathErrors {
        rmse_x,
        rmse_y,
        y_range: hi - lo,
        relative_y: rmse_y / (hi - lo),
        rmse_x_by_time,
        rmse_y_by_time,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FbsdeConfig {
    pub particles: usize,
    pub steps: usize,
    pub iterations: usize,
    pub optim: OptimConfig,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_particles: usize,
}

impl Default for FbsdeConfig {
    fn default() -> Self {
        Self {
            particles: 1000,
            steps: 50,
            iterations: 20_000,
            optim: OptimConfig::default(),
            seed: 0,
            eval_every: 1000,
            eval_particles: 1000,
        }
    }
}

impl FbsdeConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.iterations == 0 || self.particles < 2 || self.steps == 0 || self.eval_particles < 2 {
            return Err("need iterations >= 1, particles >= 2 and steps >= 1".into());
        }
        if self.eval_every == 0 || self.iterations % self.eval_every != 0 {
            return Err(format!(
                "eval_every ({}) must divide iterations ({})",
                self.eval_every, self.iterations
            ));
        }
        Ok(())
    }

    pub fn evaluation_noise<S: FbsdeSystem>(&self, system: &S) -> NoiseSample {
        system.sample_noise(self.eval_particles, self.steps, derive_seed(self.seed, u64::MAX))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FbsdeSnapshot {
    pub iteration: usize,
    pub eval_loss: f64,
}

#[derive(Clone, Debug)]
pub struct FbsdeReport {
    pub loss_history: Vec<f64>,
    pub nets: ShootingNets,
    pub snapshots: Vec<FbsdeSnapshot>,
    /// Final networks on the evaluation sample.
    pub evaluation: FbsdePaths,
    pub aborted: Option<String>,
}

/// Particles whose paths go into `trajX.csv` and `trajY.csv`.
pub const TRACKED: [usize; 3] = [0, 1, 2];

#[derive(Serialize)]
struct FbsdeSummary<'a> {
    iterations_run: usize,
    final_loss: f64,
    eval_loss: f64,
    aborted: Option<&'a str>,
    errors: Option<&'a PathErrors>,
    snapshots: &'a [FbsdeSnapshot],
}

impl FbsdeReport {
    /// `loss_history.csv`, `trajX.csv`, `trajY.csv`, `trajAlpha.csv` (MFG
    /// systems only) and `fbsde_summary.json`. `exact` paths must come from
    /// the evaluation sample.
    pub fn write<S: FbsdeSystem>(&self, dir: &Path, system: &S, exact: Option<&FbsdePaths>) -> Result<(), FbsdeError> {
        loss_table(&self.loss_history).write(&dir.join("loss_history.csv"))?;
        let traj = |learned: &[Vec<f64>], exact: Option<&Vec<Vec<f64>>>| {
            let mut t = Table::new(&["particle", "step", "t", "learned", "exact"]).with_int_columns(&["particle", "step"]);
            for &i in TRACKED.iter().filter(|&&i| i < learned[0].len()) {
                for n in 0..learned.len() {
                    let e = exact.map_or(f64::NAN, |e| e[n][i]);
                    t.push(vec![i as f64, n as f64, n as f64 * self.evaluation.dt, learned[n][i], e]);
                }
            }
            t
        };
        let ev = &self.evaluation;
        traj(&ev.xs, exact.map(|e| &e.xs)).write(&dir.join("trajX.csv"))?;
        traj(&ev.ys, exact.map(|e| &e.ys)).write(&dir.join("trajY.csv"))?;
        if let Some(a) = ev.controls(system) {
            let ea = exact.and_then(|e| e.controls(system));
            traj(&a, ea.as_ref()).write(&dir.join("trajAlpha.csv"))?;
        }
        let errors = exact.map(|e| path_errors(ev, e));
        write_json(
            &dir.join("fbsde_summary.json"),
            &FbsdeSummary {
                iterations_run: self.loss_history.len(),
                final_loss: self.loss_history.last().copied().unwrap_or(f64::NAN),
                eval_loss: ev.loss(),
                aborted: self.aborted.as_deref(),
                errors: errors.as_ref(),
                snapshots: &self.snapshots,
            },
        )?;
        Ok(())
    }
}

/// Joint gradient steps on both networks with fresh noise each iteration.
pub fn train<S: FbsdeSystem>(system: &S, mut nets: ShootingNets, config: &FbsdeConfig) -> Result<FbsdeReport, FbsdeError> {
    config.validate().map_err(FbsdeError::Config)?;
    let eval_noise = config.evaluation_noise(system);
    let mut opt = Optimizer::new(config.optim.clone(), nets.len());
    let mut theta = nets.theta();
    let mut history = Vec::with_capacity(config.iterations);
    let mut snapshots = Vec::new();
    let mut aborted = None;
    for k in 0..config.iterations {
        let noise = system.sample_noise(config.particles, config.steps, derive_seed(config.seed, k as u64));
        let g = Graph::new();
        let bound = BoundShooting::new(&nets, &g, true);
        let loss = match penalty_loss(&g, system, &bound, &noise) {
            Ok(r) => r.loss,
            Err(FbsdeError::NonFinite { step }) => {
                aborted = Some(format!("non-finite state at step {} in iteration {}", step, k));
                break;
            }
            Err(e) => return Err(e),
        };
        let value = loss.scalar_value();
        if !value.is_finite() || value > crate::mfc_direct::DIVERGENCE {
            aborted = Some(format!("loss {} at iteration {} exceeds divergence threshold", value, k));
            break;
        }
        let grad = BoundNet::flatten(&g.gradients(loss.id(), &bound.leaves())?);
        match opt.step(&mut theta, &grad) {
            Ok(_) => nets.set_theta(&theta),
            Err(e @ OptimError::NonFiniteGradient { .. }) => {
                aborted = Some(e.to_string());
                break;
            }
            Err(e) => return Err(FbsdeError::Config(e.to_string())),
        }
        history.push(value);
        if (k + 1) % config.eval_every == 0 {
            snapshots.push(FbsdeSnapshot {
                iteration: k + 1,
                eval_loss: simulate_nets(system, &nets, &eval_noise)?.loss(),
            });
        }
    }
    let evaluation = simulate_nets(system, &nets, &eval_noise)?;
    Ok(FbsdeReport {
        loss_history: history,
        nets,
        snapshots,
        evaluation,
        aborted,
    })
}

/// `d_x [b(x, a) p + f(x, a)]` at fixed `a`, for checking drivers.
pub fn hamiltonian_dx<M: MeanFieldModel>(model: &M, t: f64, x: f64, mbar: f64, p: f64, a: f64) -> Result<f64, ModelError> {
    use crate::autodiff::Dual;
    let xd = Dual::variable(x);
    let m = MeasureSummary::default().with_state_mean(Dual::constant(mbar));
    let ad = Dual::constant(a);
    let h = model.drift(t, xd, &m, ad)? * Dual::constant(p) + model.running_cost(t, xd, &m, ad)?;
    Ok(h.d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `B = 0`, `F = -r Y`, `G = k x`.
    struct Toy {
        sigma: f64,
        rate: f64,
        slope: f64,
        offset: f64,
    }

    impl FbsdeSystem for Toy {
        fn horizon(&self) -> f64 {
            1.0
        }
        fn sigma(&self) -> f64 {
            self.sigma
        }
        fn initial_law(&self) -> InitialLaw {
            InitialLaw::new(1.0, 0.25)
        }
        fn drift<R: Real>(&self, _t: f64, x: R, _m: R, _y: R) -> Result<R, ModelError> {
            Ok(x.lift(0.0))
        }
        fn driver<R: Real>(&self, _t: f64, _x: R, _m: R, y: R, _z: R) -> Result<R, ModelError> {
            Ok(-(y * self.rate))
        }
        fn terminal<R: Real>(&self, x: R, _m: R) -> Result<R, ModelError> {
            Ok(x * self.slope + self.offset)
        }
    }

    fn toy(sigma: f64, rate: f64, slope: f64, offset: f64) -> Toy {
        Toy {
            sigma,
            rate,
            slope,
            offset,
        }
    }

    fn run(sys: &Toy, y0: f64, noise: &NoiseSample) -> FbsdePaths {
        let g = Graph::new();
        let r = simulate_fbsde(&g, sys, |x, _| Ok(x.constant_like(y0)), |_, x, _| Ok(x.constant_like(0.0)), noise).unwrap();
        FbsdePaths::from_rollout(&r, noise.dt)
    }

    #[test]
    fn trivial_systems() {
        let sys = toy(0.0, 0.0, 0.0, 0.0);
        let noise = sys.sample_noise(20, 10, 1);
        let p = run(&sys, 0.0, &noise);
        assert!(p.xs.iter().all(|x| x == &noise.x0));
        assert!(p.ys.iter().flatten().all(|&y| y == 0.0));
        assert_eq!(p.loss(), 0.0);
        let p = run(&sys, 0.7, &noise);
        assert!(p.mismatch.iter().all(|&m| (m - 0.7).abs() < 1e-15));
        assert!((p.loss() - 0.49).abs() < 1e-14);
    }

    #[test]
    fn decoupled_linear_bsde() {
        // Y_T = Y_0 e^{rT} hits G when y0 = e^{-rT} G(x); Euler leaves O(dt)
        let (r, k) = (0.8, 1.5);
        let sys = toy(0.0, r, k, 0.0);
        let err = |steps: usize| {
            let noise = sys.sample_noise(50, steps, 2);
            let g = Graph::new();
            let out = simulate_fbsde(
                &g,
                &sys,
                |x, _| Ok(x * (k * (-r).exp())),
                |_, x, _| Ok(x.constant_like(0.0)),
                &noise,
            )
            .unwrap();
            out.mismatch.value().as_slice().iter().map(|m| m.abs()).fold(0.0, f64::max)
        };
        let (e1, e2) = (err(100), err(200));
        assert!(e1 < 0.02, "{}", e1);
        assert!((e1 / e2 - 2.0).abs() < 0.1, "first order: {} {}", e1, e2);
    }

    #[test]
    fn driver_is_the_state_derivative_of_the_hamiltonian() {
        let p = SystemicRiskParams::default();
        let sys = SystemicRiskFbsde(p);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let (x, m, y): (f64, f64, f64) = (rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0), rng.gen_range(-2.0..2.0));
            let a = sys.control(0.0, x, m, y).unwrap();
            let want = hamiltonian_dx(&p, 0.0, x, m, y, a).unwrap();
            let got = sys.driver(0.0, x, m, y, 0.0).unwrap();
            assert!((got - want).abs() < 1e-12);
            let drift = p.drift(0.0, x, &MeasureSummary::default().with_state_mean(m), a).unwrap();
            assert!((sys.drift(0.0, x, m, y).unwrap() - drift).abs() < 1e-12);
            // G = d_x g
            let dual = crate::autodiff::Dual::variable(x);
            let g = p
                .terminal_cost(dual, &MeasureSummary::default().with_state_mean(crate::autodiff::Dual::constant(m)))
                .unwrap();
            assert!((sys.terminal(x, m).unwrap() - g.d).abs() < 1e-12);
        }
    }

    #[test]
    fn riccati_candidate_has_small_penalty() {
        let p = SystemicRiskParams::default();
        let sys = SystemicRiskFbsde(p);
        let o = SystemicRiskOracle::solve(p, 2000).unwrap();
        let noise = sys.sample_noise(1000, 100, 9);
        let g = Graph::new();
        let sig = sys.sigma();
        let r = simulate_fbsde(
            &g,
            &sys,
            |x, m| Ok((x - m) * o.eta(0.0)),
            |t, x, _| Ok(x.constant_like(o.eta(t) * sig)),
            &noise,
        )
        .unwrap();
        let loss = r.loss.scalar_value();
        assert!(loss < 1e-2, "{}", loss);
        let exact = systemic_oracle_paths(&sys, &o, &noise).unwrap();
        let euler = FbsdePaths::from_rollout(&r, noise.dt);
        assert_eq!(exact.xs, euler.xs);
        assert!(path_errors(&euler, &exact).relative_y < 0.02);
    }

    #[test]
    fn common_noise_only_shifts_the_ensemble() {
        let p = SystemicRiskParams { rho: 1.0, ..Default::default() };
        let sys = SystemicRiskFbsde(p);
        assert_eq!(sys.sigma(), 0.0);
        let noise = sys.sample_noise(200, 40, 3);
        let mut quiet = noise.clone();
        quiet.dw0 = Some(vec![0.0; noise.steps]);
        let eval = |n: &NoiseSample| {
            let g = Graph::new();
            let r = simulate_fbsde(&g, &sys, |x, m| Ok((x - m) * 0.7), |_, x, _| Ok(x.constant_like(0.1)), n).unwrap();
            FbsdePaths::from_rollout(&r, n.dt)
        };
        let (a, b) = (eval(&noise), eval(&quiet));
        for n in 0..=noise.steps {
            let va = crate::stats::variance(&a.xs[n]);
            let vb = crate::stats::variance(&b.xs[n]);
            assert!((va - vb).abs() < 1e-10 * vb, "step {}", n);
        }
        assert!((a.means[noise.steps] - b.means[noise.steps]).abs() > 1e-3);
    }

    #[test]
    fn matched_start_is_a_fixed_point() {
        // y0 outputs a constant that equals G, z outputs zero: loss and gradient vanish
        let sys = toy(0.4, 0.0, 0.0, 0.3);
        let mut nets = ShootingNets::new(4, false, 5);
        nets.z.theta.iter_mut().for_each(|v| *v = 0.0);
        nets.y0.theta.iter_mut().for_each(|v| *v = 0.0);
        let last = nets.y0.arch.layers() - 1;
        nets.y0.layer_mut(last).0[0] = 0.3;
        let before = nets.clone();
        let cfg = FbsdeConfig {
            particles: 32,
            steps: 10,
            iterations: 5,
            eval_every: 5,
            eval_particles: 32,
            ..Default::default()
        };
        let r = train(&sys, nets, &cfg).unwrap();
        assert!(r.loss_history.iter().all(|&l| l == 0.0));
        assert_eq!(r.nets, before);
    }

    #[test]
    fn trivial_system_trains_to_tiny_loss() {
        let sys = toy(0.4, 0.0, 0.0, 0.0);
        let cfg = FbsdeConfig {
            particles: 64,
            steps: 10,
            iterations: 2000,
            eval_every: 1000,
            eval_particles: 256,
            optim: OptimConfig::adam(2e-2).with_schedule(crate::optim::Schedule::StepDecay {
                rate: 2e-2,
                factor: 0.5,
                every: 500,
            }),
            seed: 1,
        };
        let r = train(&sys, ShootingNets::new(8, false, 2), &cfg).unwrap();
        let last = *r.loss_history.last().unwrap();
        assert!(last < 1e-6, "final loss {}", last);
        assert!(r.evaluation.loss() < 1e-6);
    }

    #[test]
    fn training_is_reproducible_and_writes_paths() {
        let p = SystemicRiskParams::default();
        let sys = SystemicRiskFbsde(p);
        let cfg = FbsdeConfig {
            particles: 64,
            steps: 10,
            iterations: 20,
            eval_every: 10,
            eval_particles: 64,
            seed: 8,
            ..Default::default()
        };
        let a = train(&sys, ShootingNets::new(4, true, 8), &cfg).unwrap();
        let b = train(&sys, ShootingNets::new(4, true, 8), &cfg).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        assert!(a.loss_history.iter().all(|&l| l >= 0.0));
        let o = SystemicRiskOracle::solve(p, 500).unwrap();
        let exact = systemic_oracle_paths(&sys, &o, &cfg.evaluation_noise(&sys)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        a.write(dir.path(), &sys, Some(&exact)).unwrap();
        let t = Table::read(&dir.path().join("trajY.csv")).unwrap();
        assert_eq!(t.len(), 3 * 11);
        assert!(dir.path().join("trajAlpha.csv").exists());
    }
}
