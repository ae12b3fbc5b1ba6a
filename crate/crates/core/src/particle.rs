//! Euler–Maruyama simulation of interacting particles.
//!
//! At every step the empirical statistics (state mean, then the mean of the
//! particles' controls) are computed from the current states before the
//! step and fed into the drift and running cost. The state mean doubles as
//! the conditional mean under common noise.
//!
//! Random numbers come from one ChaCha8 stream per particle (stream `i + 1`
//! for particle `i`) plus stream 0 for the common noise, so the sample does
//! not depend on evaluation order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::autodiff::{Block, Graph, Var};
use crate::models::{MeanFieldModel, MeasureSummary, ModelError};
use crate::net::{BoundNet, NetError, NetworkParameters};
use crate::output::{OutputError, Table};

#[derive(Debug, Error)]
pub enum ParticleError {
    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },
    #[error("need at least one particle and one time step")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Output(#[from] OutputError),
}

/// Initial states and Brownian increments for one rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSample {
    pub particles: usize,
    pub steps: usize,
    pub dt: f64,
    pub x0: Vec<f64>,
    /// Idiosyncratic increments, step-major: `dw[n * particles + i]`.
    pub dw: Vec<f64>,
    /// Common increments, one per step.
    pub dw0: Option<Vec<f64>>,
}

impl NoiseSample {
    pub fn step(&self, n: usize) -> &[f64] {
        &self.dw[n * self.particles..(n + 1) * self.particles]
    }

    pub fn common(&self, n: usize) -> f64 {
        self.dw0.as_ref().map_or(0.0, |w| w[n])
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }

    /// Reorder particles: particle `k` of the result is particle `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.particles);
        let mut out = self.clone();
        out.x0 = perm.iter().map(|&p| self.x0[p]).collect();
        for n in 0..self.steps {
            let src = self.step(n);
            for (k, &p) in perm.iter().enumerate() {
                out.dw[n * self.particles + k] = src[p];
            }
        }
        out
    }

    /// Combined shock `sigma dW^i + sigma0 dW0` at step `n`.
    pub fn shocks(&self, n: usize, sigma: f64, sigma0: f64) -> Vec<f64> {
        let c = sigma0 * self.common(n);
        self.step(n).iter().map(|w| sigma * w + c).collect()
    }
}

fn particle_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draw `x0 ~ m0` and `N(0, dt)` increments with `dt = T / steps`.
///
/// Common increments are drawn only when the model has common noise.
pub fn sample_noise<M: MeanFieldModel>(model: &M, particles: usize, steps: usize, seed: u64) -> NoiseSample {
    sample_noise_with(model.initial_law(), model.horizon(), model.common_vol() != 0.0, particles, steps, seed)
}

pub fn sample_noise_with(
    law: crate::models::InitialLaw,
    horizon: f64,
    common: bool,
    particles: usize,
    steps: usize,
    seed: u64,
) -> NoiseSample {
    let dt = horizon / steps as f64;
    let sd = dt.sqrt();
    let mut x0 = Vec::with_capacity(particles);
    let mut dw = vec![0.0; particles * steps];
    for i in 0..particles {
        let mut rng = particle_rng(seed, i as u64 + 1);
        x0.push(law.sample(&mut rng));
        for n in 0..steps {
            let z: f64 = StandardNormal.sample(&mut rng);
            dw[n * particles + i] = sd * z;
        }
    }
    let dw0 = common.then(|| {
        let mut rng = particle_rng(seed, 0);
        (0..steps)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                sd * z
            })
            .collect()
    });
    NoiseSample {
        particles,
        steps,
        dt,
        x0,
        dw,
        dw0,
    }
}

/// A feedback control evaluated for all particles at once.
///
/// The arguments are time, the particle states and the current state mean.
pub trait Policy {
    fn act(&self, t: f64, xs: &[f64], mbar: f64) -> Result<Vec<f64>, ParticleError>;
}

/// Closed-form policy `(t, x, mbar) -> a`.
pub struct Feedback<F>(pub F);

impl<F: Fn(f64, f64, f64) -> f64> Policy for Feedback<F> {
    fn act(&self, t: f64, xs: &[f64], mbar: f64) -> Result<Vec<f64>, ParticleError> {
        Ok(xs.iter().map(|&x| (self.0)(t, x, mbar)).collect())
    }
}

/// Which inputs a control network sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetInputs {
    /// `(t, x)`
    TimeState,
    /// `(t, x, mbar)`
    TimeStateMean,
}

impl NetInputs {
    pub fn width(self) -> usize {
        match self {
            NetInputs::TimeState => 2,
            NetInputs::TimeStateMean => 3,
        }
    }

    /// Stack the input rows for a lane block of states.
    pub fn build<'g>(self, t: f64, x: Var<'g>, mbar: Var<'g>) -> Var<'g> {
        let tt = x.constant_like(t);
        match self {
            NetInputs::TimeState => Var::stack(&[tt, x]),
            NetInputs::TimeStateMean => Var::stack(&[tt, x, mbar]),
        }
    }
}

/// A network policy with frozen parameters.
pub struct NetPolicy<'a> {
    pub params: &'a NetworkParameters,
    pub inputs: NetInputs,
}

impl Policy for NetPolicy<'_> {
    fn act(&self, t: f64, xs: &[f64], mbar: f64) -> Result<Vec<f64>, ParticleError> {
        let g = Graph::new();
        let net = self.params.bind_constant(&g);
        let x = g.constant(Block::lanes(xs.to_vec()));
        let input = self.inputs.build(t, x, g.constant_scalar(mbar));
        Ok(net.forward(input)?.value().into_vec())
    }
}

/// Result of a plain rollout.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub dt: f64,
    /// `states[n][i]`, `n = 0..=steps`.
    pub states: Vec<Vec<f64>>,
    /// `controls[n][i]`, `n = 0..steps`.
    pub controls: Vec<Vec<f64>>,
    /// Statistics seen at step `n`; the last entry has no control mean.
    pub summaries: Vec<MeasureSummary<f64>>,
    /// Accumulated `sum f dt + g` per particle.
    pub costs: Vec<f64>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.controls.len()
    }

    pub fn particles(&self) -> usize {
        self.states[0].len()
    }

    pub fn mean_cost(&self) -> f64 {
        crate::stats::mean(&self.costs)
    }

    pub fn terminal(&self) -> &[f64] {
        self.states.last().unwrap()
    }

    pub fn to_table(&self, particles: Option<&[usize]>) -> Table {
        let mut t = Table::new(&["particle", "step", "t", "x", "alpha"]).with_int_columns(&["particle", "step"]);
        let all: Vec<usize> = (0..self.particles()).collect();
        let which = particles.unwrap_or(&all);
        for &i in which {
            for n in 0..=self.steps() {
                let a = if n < self.steps() { self.controls[n][i] } else { f64::NAN };
                t.push(vec![i as f64, n as f64, n as f64 * self.dt, self.states[n][i], a]);
            }
        }
        t
    }

    pub fn write_csv(&self, path: &Path, particles: Option<&[usize]>) -> Result<(), ParticleError> {
        Ok(self.to_table(particles).write(path)?)
    }
}

fn check_finite(xs: &[f64], step: usize) -> Result<(), ParticleError> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ParticleError::NonFinite { step })
    }
}

/// Simulate with a frozen policy.
pub fn rollout<M: MeanFieldModel, P: Policy + ?Sized>(
    model: &M,
    policy: &P,
    noise: &NoiseSample,
) -> Result<Trajectory, ParticleError> {
    if noise.particles == 0 || noise.steps == 0 {
        return Err(ParticleError::Empty);
    }
    let dt = noise.dt;
    let (sig, sig0) = (model.idiosyncratic_vol(), model.common_vol());
    let mut x = noise.x0.clone();
    check_finite(&x, 0)?;
    let mut states = vec![x.clone()];
    let mut controls = Vec::with_capacity(noise.steps);
    let mut summaries = Vec::with_capacity(noise.steps + 1);
    let mut costs = vec![0.0; x.len()];
    for n in 0..noise.steps {
        let t = noise.time(n);
        let mbar = crate::stats::mean(&x);
        let a = policy.act(t, &x, mbar)?;
        let m = MeasureSummary::default()
            .with_state_mean(mbar)
            .with_control_mean(crate::stats::mean(&a));
        let shocks = noise.shocks(n, sig, sig0);
        for i in 0..x.len() {
            costs[i] += model.running_cost(t, x[i], &m, a[i])? * dt;
            x[i] = x[i] + model.drift(t, x[i], &m, a[i])? * dt + shocks[i];
        }
        check_finite(&x, n + 1)?;
        summaries.push(m);
        controls.push(a);
        states.push(x.clone());
    }
    let m = MeasureSummary::default().with_state_mean(crate::stats::mean(&x));
    for i in 0..x.len() {
        costs[i] += model.terminal_cost(x[i], &m)?;
    }
    summaries.push(m);
    Ok(Trajectory {
        dt,
        states,
        controls,
        summaries,
        costs,
    })
}

/// A differentiable rollout recorded in a graph.
pub struct GraphRollout<'g> {
    /// `1 x N` state lanes at each time.
    pub states: Vec<Var<'g>>,
    pub controls: Vec<Var<'g>>,
    /// `1 x N` accumulated cost per particle.
    pub costs: Var<'g>,
    /// Scalar mean cost.
    pub cost: Var<'g>,
}

/// Simulate inside `g`. `control(t, x, mbar)` maps a `1 x N` state block and
/// the `1 x 1` state mean to `1 x N` controls.
pub fn rollout_graph<'g, M, C>(
    g: &'g Graph,
    model: &M,
    control: C,
    noise: &NoiseSample,
) -> Result<GraphRollout<'g>, ParticleError>
where
    M: MeanFieldModel,
    C: Fn(f64, Var<'g>, Var<'g>) -> Result<Var<'g>, ParticleError>,
{
    if noise.particles == 0 || noise.steps == 0 {
        return Err(ParticleError::Empty);
    }
    let dt = noise.dt;
    let (sig, sig0) = (model.idiosyncratic_vol(), model.common_vol());
    let mut x = g.constant(Block::lanes(noise.x0.clone()));
    if !x.value().all_finite() {
        return Err(ParticleError::NonFinite { step: 0 });
    }
    let mut states = vec![x];
    let mut controls = Vec::with_capacity(noise.steps);
    let mut costs: Option<Var<'g>> = None;
    for n in 0..noise.steps {
        let t = noise.time(n);
        let mbar = x.mean_lanes();
        let a = control(t, x, mbar)?;
        let m = MeasureSummary::default()
            .with_state_mean(mbar)
            .with_control_mean(a.mean_lanes());
        let f = model.running_cost(t, x, &m, a)? * dt;
        costs = Some(match costs {
            Some(c) => c + f,
            None => f,
        });
        let shocks = g.constant(Block::lanes(noise.shocks(n, sig, sig0)));
        x = x + model.drift(t, x, &m, a)? * dt + shocks;
        if !x.value().all_finite() {
            return Err(ParticleError::NonFinite { step: n + 1 });
        }
        states.push(x);
        controls.push(a);
    }
    let m = MeasureSummary::default().with_state_mean(x.mean_lanes());
    let costs = costs.unwrap() + model.terminal_cost(x, &m)?;
    let cost = costs.mean_lanes();
    Ok(GraphRollout {
        states,
        controls,
        costs,
        cost,
    })
}

/// Control closure for a bound network.
pub fn net_control<'g, 'n>(
    net: &'n BoundNet<'g>,
    inputs: NetInputs,
) -> impl Fn(f64, Var<'g>, Var<'g>) -> Result<Var<'g>, ParticleError> + 'n {
    move |t, x, mbar| Ok(net.forward(inputs.build(t, x, mbar))?)
}
