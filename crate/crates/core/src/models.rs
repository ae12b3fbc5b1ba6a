//! Mean-field problem instances.
//!
//! A model supplies drift, running and terminal costs, noise coefficients
//! and an initial law. Every formula is generic over [`Real`] so one
//! definition serves plain evaluation, graph building and dual numbers.
//!
//! All benchmarks have a scalar state.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Real;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("model needs the {0} of the population but the summary does not carry it")]
    MissingStatistic(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unsupported model: {0}")]
    Unsupported(String),
}

/// Through which law the agents interact.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interaction {
    None,
    StateMean,
    ControlMean,
}

/// Population statistics a model may read.
///
/// With graph values these are `1 x 1` nodes broadcast over the particle
/// lanes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeasureSummary<R> {
    pub state_mean: Option<R>,
    pub control_mean: Option<R>,
}

impl<R> Default for MeasureSummary<R> {
    fn default() -> Self {
        Self {
            state_mean: None,
            control_mean: None,
        }
    }
}

impl<R: Copy> MeasureSummary<R> {
    pub fn with_state_mean(mut self, m: R) -> Self {
        self.state_mean = Some(m);
        self
    }

    pub fn with_control_mean(mut self, m: R) -> Self {
        self.control_mean = Some(m);
        self
    }

    pub fn state_mean(&self) -> Result<R, ModelError> {
        self.state_mean.ok_or(ModelError::MissingStatistic("state mean"))
    }

    pub fn control_mean(&self) -> Result<R, ModelError> {
        self.control_mean.ok_or(ModelError::MissingStatistic("control mean"))
    }
}

/// Gaussian initial distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialLaw {
    pub mean: f64,
    pub variance: f64,
}

impl InitialLaw {
    pub fn new(mean: f64, variance: f64) -> Self {
        Self { mean, variance }
    }

    pub fn sample<G: Rng + ?Sized>(&self, rng: &mut G) -> f64 {
        if self.variance == 0.0 {
            return self.mean;
        }
        Normal::new(self.mean, self.variance.sqrt())
            .expect("finite variance")
            .sample(rng)
    }

    pub fn density(&self, x: f64) -> f64 {
        let v = self.variance;
        (-(x - self.mean).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
    }
}

/// Optimized Hamiltonian at one point.
#[derive(Clone, Copy, Debug)]
pub struct Hamiltonian<R> {
    pub value: R,
    /// The optimizing control.
    pub control: R,
    /// Derivative of the optimized Hamiltonian in the costate, which is the
    /// drift of the optimally controlled state.
    pub dp: R,
}

/// A mean-field model with scalar state and control.
pub trait MeanFieldModel {
    fn name(&self) -> &'static str;
    fn horizon(&self) -> f64;
    /// Coefficient of the idiosyncratic Brownian increment.
    fn idiosyncratic_vol(&self) -> f64;
    /// Coefficient of the common Brownian increment.
    fn common_vol(&self) -> f64 {
        0.0
    }
    fn interaction(&self) -> Interaction;
    fn initial_law(&self) -> InitialLaw;
    fn drift<R: Real>(&self, t: f64, x: R, m: &MeasureSummary<R>, a: R) -> Result<R, ModelError>;
    fn running_cost<R: Real>(&self, t: f64, x: R, m: &MeasureSummary<R>, a: R) -> Result<R, ModelError>;
    fn terminal_cost<R: Real>(&self, x: R, m: &MeasureSummary<R>) -> Result<R, ModelError>;
    /// `min_a f + p b` in closed form, with the population frozen.
    fn optimized_hamiltonian<R: Real>(
        &self,
        t: f64,
        x: R,
        m: &MeasureSummary<R>,
        p: R,
    ) -> Result<Hamiltonian<R>, ModelError> {
        let _ = (t, x, m, p);
        Err(ModelError::Unsupported(format!(
            "{} has no closed-form minimizer",
            self.name()
        )))
    }
}

fn positive(name: &str, v: f64) -> Result<(), ModelError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ModelError::InvalidParameter(format!("{} must be positive, got {}", name, v)))
    }
}

/// Optimal execution with price impact through the mean trading rate.
///
/// `dX = a dt + sigma dW`,
/// `f = c_alpha a^2/2 + c_x x^2/2 - gamma x abar`, `g = c_g x^2/2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriceImpactParams {
    pub c_alpha: f64,
    pub c_x: f64,
    pub c_g: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub horizon: f64,
    pub m0: InitialLaw,
}

impl Default for PriceImpactParams {
    fn default() -> Self {
        Self {
            c_alpha: 1.0,
            c_x: 2.0,
            c_g: 0.3,
            gamma: 0.2,
            sigma: 0.5,
            horizon: 1.0,
            m0: InitialLaw::new(1.0, 0.25),
        }
    }
}

impl PriceImpactParams {
    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        positive("c_alpha", self.c_alpha)?;
        positive("c_x", self.c_x)?;
        positive("c_g", self.c_g)?;
        positive("sigma", self.sigma)?;
        positive("horizon", self.horizon)?;
        if self.gamma < 0.0 {
            return Err(ModelError::InvalidParameter(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        positive("m0.variance", self.m0.variance)
    }
}

impl MeanFieldModel for PriceImpactParams {
    fn name(&self) -> &'static str {
        "price-impact"
    }
    fn horizon(&self) -> f64 {
        self.horizon
    }
    fn idiosyncratic_vol(&self) -> f64 {
        self.sigma
    }
    fn interaction(&self) -> Interaction {
        Interaction::ControlMean
    }
    fn initial_law(&self) -> InitialLaw {
        self.m0
    }
    fn drift<R: Real>(&self, _t: f64, _x: R, _m: &MeasureSummary<R>, a: R) -> Result<R, ModelError> {
        Ok(a)
    }
    fn running_cost<R: Real>(&self, _t: f64, x: R, m: &MeasureSummary<R>, a: R) -> Result<R, ModelError> {
        let abar = m.control_mean()?;
        Ok(a.square() * (0.5 * self.c_alpha) + x.square() * (0.5 * self.c_x) - x * abar * self.gamma)
    }
    fn terminal_cost<R: Real>(&self, x: R, _m: &MeasureSummary<R>) -> Result<R, ModelError> {
        Ok(x.square() * (0.5 * self.c_g))
    }
    fn optimized_hamiltonian<R: Real>(
        &self,
        _t: f64,
        x: R,
        m: &MeasureSummary<R>,
        p: R,
    ) -> Result<Hamiltonian<R>, ModelError> {
        let abar = m.control_mean()?;
        let a = -p / self.c_alpha;
        let value = -p.square() / (2.0 * self.c_alpha) + x.square() * (0.5 * self.c_x) - x * abar * self.gamma;
        Ok(Hamiltonian { value, control: a, dp: a })
    }
}

/// Inter-bank lending with a common shock.
///
/// `dX = [a (mbar - x) + alpha] dt + sigma (rho dW0 + sqrt(1 - rho^2) dW)`,
/// `f = alpha^2/2 - q alpha (mbar - x) + eps (mbar - x)^2 / 2`,
/// `g = c (mbar - x)^2 / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemicRiskParams {
    pub a: f64,
    pub q: f64,
    pub eps: f64,
    pub c: f64,
    pub sigma: f64,
    pub rho: f64,
    pub horizon: f64,
    pub m0: InitialLaw,
}

impl Default for SystemicRiskParams {
    fn default() -> Self {
        Self {
            a: 1.0,
            q: 0.5,
            eps: 0.75,
            c: 1.0,
            sigma: 0.5,
            rho: 0.5,
            horizon: 0.5,
            m0: InitialLaw::new(0.0, 0.25),
        }
    }
}

impl SystemicRiskParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        positive("a", self.a)?;
        positive("sigma", self.sigma)?;
        positive("horizon", self.horizon)?;
        if self.q < 0.0 || self.eps < 0.0 || self.c < 0.0 {
            return Err(ModelError::InvalidParameter("q, eps and c must be non-negative".into()));
        }
        // the Hessian [[1, -q], [-q, eps]] of the running cost is PSD iff q^2 <= eps
        if self.q * self.q > self.eps {
            return Err(ModelError::InvalidParameter(format!(
                "need q^2 <= eps for a convex running cost, got q={} eps={}",
                self.q, self.eps
            )));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(ModelError::InvalidParameter(format!("rho must lie in [0,1], got {}", self.rho)));
        }
        if self.m0.variance < 0.0 {
            return Err(ModelError::InvalidParameter("m0.variance must be non-negative".into()));
        }
        Ok(())
    }
}

impl MeanFieldModel for SystemicRiskParams {
    fn name(&self) -> &'static str {
        "systemic-risk"
    }
    fn horizon(&self) -> f64 {
        self.horizon
    }
    fn idiosyncratic_vol(&self) -> f64 {
        self.sigma * (1.0 - self.rho * self.rho).sqrt()
    }
    fn common_vol(&self) -> f64 {
        self.sigma * self.rho
    }
    fn interaction(&self) -> Interaction {
        Interaction::StateMean
    }
    fn initial_law(&self) -> InitialLaw {
        self.m0
    }
    fn drift<R: Real>(&self, _t: f64, x: R, m: &MeasureSummary<R>, a: R) -> Result<R, ModelError> {
        let mbar = m.state_mean()?;
        Ok((mbar - x) * self.a + a)
    }
    fn running_cost<R: Real>(&self, _t: f64, x: R, m: &MeasureSummary<R>, a: R) -> Result<R, ModelError> {
        let d = m.state_mean()? - x;
        Ok(a.square() * 0.5 - a * d * self.q + d.square() * (0.5 * self.eps))
    }
    fn terminal_cost<R: Real>(&self, x: R, m: &MeasureSummary<R>) -> Result<R, ModelError> {
        let d = m.state_mean()? - x;
        Ok(d.square() * (0.5 * self.c))
    }
    fn optimized_hamiltonian<R: Real>(
        &self,
        _t: f64,
        x: R,
        m: &MeasureSummary<R>,
        p: R,
    ) -> Result<Hamiltonian<R>, ModelError> {
        let d = m.state_mean()? - x;
        // argmin of a^2/2 - q a d + p a
        let a = d * self.q - p;
        let value = -a.square() * 0.5 + d.square() * (0.5 * self.eps) + p * d * self.a;
        let dp = d * self.a + a;
        Ok(Hamiltonian { value, control: a, dp })
    }
}

/// Crowded liquidation, reduced to the inventory value `v(t, q)`.
///
/// The broker maximizes a reward. As a cost model the running cost is
/// `kappa a^2 + phi q^2 - gamma mubar q` and the terminal cost `A q^2`, with
/// inventory dynamics `dq = a dt + sqrt(2 nu) dW`. The optimized
/// Hamiltonian is returned in the reward convention of the value `v`:
/// `H* = p^2/(4 kappa) - phi q^2 + gamma mubar q`, maximized by
/// `a* = p / (2 kappa)`.
///
/// `sigma` is the price volatility. It drops out of the reduced system, so
/// the inventory diffusion `nu` is a separate parameter, zero by default.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrowdedTradeParams {
    pub kappa: f64,
    pub phi: f64,
    pub terminal_penalty: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub nu: f64,
    pub horizon: f64,
    pub m0: InitialLaw,
}

impl Default for CrowdedTradeParams {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            phi: 1.0,
            terminal_penalty: 1.0,
            gamma: 1.0,
            sigma: 0.3,
            nu: 0.0,
            horizon: 1.0,
            m0: InitialLaw::new(4.0, 0.3),
        }
    }
}

impl CrowdedTradeParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        positive("kappa", self.kappa)?;
        positive("phi", self.phi)?;
        positive("terminal_penalty", self.terminal_penalty)?;
        positive("sigma", self.sigma)?;
        positive("horizon", self.horizon)?;
        positive("m0.variance", self.m0.variance)?;
        if self.gamma < 0.0 {
            return Err(ModelError::InvalidParameter(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        if self.nu < 0.0 {
            return Err(ModelError::InvalidParameter(format!("nu must be non-negative, got {}", self.nu)));
        }
        Ok(())
    }

    /// Terminal value `v(T, q) = -A q^2`.
    pub fn terminal_value<R: Real>(&self, q: R) -> R {
        -q.square() * self.terminal_penalty
    }
}

impl MeanFieldModel for CrowdedTradeParams {
    fn name(&self) -> &'static str {
        "crowded-trade"
    }
    fn horizon(&self) -> f64 {
        self.horizon
    }
    fn idiosyncratic_vol(&self) -> f64 {
        (2.0 * self.nu).sqrt()
    }
    fn interaction(&self) -> Interaction {
        Interaction::ControlMean
    }
    fn initial_law(&self) -> InitialLaw {
        self.m0
    }
    fn drift<R: Real>(&self, _t: f64, _x: R, _m: &MeasureSummary<R>, a: R) -> Result<R, ModelError> {
        Ok(a)
    }
    fn running_cost<R: Real>(&self, _t: f64, x: R, m: &MeasureSummary<R>, a: R) -> Result<R, ModelError> {
        let mu = m.control_mean()?;
        Ok(a.square() * self.kappa + x.square() * self.phi - mu * x * self.gamma)
    }
    fn terminal_cost<R: Real>(&self, x: R, _m: &MeasureSummary<R>) -> Result<R, ModelError> {
        Ok(x.square() * self.terminal_penalty)
    }
    fn optimized_hamiltonian<R: Real>(
        &self,
        _t: f64,
        x: R,
        m: &MeasureSummary<R>,
        p: R,
    ) -> Result<Hamiltonian<R>, ModelError> {
        let mu = m.control_mean()?;
        let a = p / (2.0 * self.kappa);
        let value = p.square() / (4.0 * self.kappa) - x.square() * self.phi + mu * x * self.gamma;
        Ok(Hamiltonian { value, control: a, dp: a })
    }
}

/// Grid minimization of `f + p b` over `a in [lo, hi]`, for checking closed
/// forms. Returns `(min value, argmin)`.
pub fn brute_force_hamiltonian<M: MeanFieldModel>(
    model: &M,
    t: f64,
    x: f64,
    m: &MeasureSummary<f64>,
    p: f64,
    lo: f64,
    hi: f64,
    points: usize,
) -> Result<(f64, f64), ModelError> {
    let mut best = (f64::INFINITY, lo);
    for i in 0..points {
        let a = lo + (hi - lo) * i as f64 / (points - 1) as f64;
        let v = model.running_cost(t, x, m, a)? + p * model.drift(t, x, m, a)?;
        if v < best.0 {
            best = (v, a);
        }
    }
    Ok(best)
}

/// The forward-backward PDE form of a one-dimensional model:
///
/// `d_t u + nu u_xx + H*(x, u_x, s) = 0`, `u(T) = g`,
/// `d_t m - nu m_xx + d_x(m d_pH*(x, u_x, s)) = 0`, `m(0) = m0`,
///
/// where `s` collects the population statistics the Hamiltonian reads.
pub trait MfgPde {
    fn name(&self) -> &'static str;
    fn horizon(&self) -> f64;
    fn nu(&self) -> f64;
    fn initial_density(&self, x: f64) -> f64;
    fn terminal_value<R: Real>(&self, x: R, s: &MeasureSummary<R>) -> Result<R, ModelError>;
    fn hamiltonian<R: Real>(&self, x: R, p: R, s: &MeasureSummary<R>) -> Result<Hamiltonian<R>, ModelError>;
    /// Statistics of a discrete population: points `x` with weights `w`
    /// summing to one and value gradients `ux` at those points.
    fn statistics(&self, x: &[f64], w: &[f64], ux: &[f64]) -> MeasureSummary<f64>;
}

fn weighted_mean(x: &[f64], w: &[f64]) -> f64 {
    x.iter().zip(w).map(|(a, b)| a * b).sum()
}

impl MfgPde for SystemicRiskParams {
    fn name(&self) -> &'static str {
        "systemic-risk"
    }
    fn horizon(&self) -> f64 {
        self.horizon
    }
    /// Only the idiosyncratic noise diffuses the law relative to its mean.
    fn nu(&self) -> f64 {
        0.5 * self.idiosyncratic_vol().powi(2)
    }
    fn initial_density(&self, x: f64) -> f64 {
        self.m0.density(x)
    }
    fn terminal_value<R: Real>(&self, x: R, s: &MeasureSummary<R>) -> Result<R, ModelError> {
        self.terminal_cost(x, s)
    }
    fn hamiltonian<R: Real>(&self, x: R, p: R, s: &MeasureSummary<R>) -> Result<Hamiltonian<R>, ModelError> {
        self.optimized_hamiltonian(0.0, x, s, p)
    }
    fn statistics(&self, x: &[f64], w: &[f64], _ux: &[f64]) -> MeasureSummary<f64> {
        MeasureSummary::default().with_state_mean(weighted_mean(x, w))
    }
}

impl MfgPde for CrowdedTradeParams {
    fn name(&self) -> &'static str {
        "crowded-trade"
    }
    fn horizon(&self) -> f64 {
        self.horizon
    }
    fn nu(&self) -> f64 {
        self.nu
    }
    fn initial_density(&self, x: f64) -> f64 {
        self.m0.density(x)
    }
    fn terminal_value<R: Real>(&self, x: R, _s: &MeasureSummary<R>) -> Result<R, ModelError> {
        Ok(CrowdedTradeParams::terminal_value(self, x))
    }
    fn hamiltonian<R: Real>(&self, x: R, p: R, s: &MeasureSummary<R>) -> Result<Hamiltonian<R>, ModelError> {
        self.optimized_hamiltonian(0.0, x, s, p)
    }
    /// `mubar = int v_q / (2 kappa) dm`.
    fn statistics(&self, _x: &[f64], w: &[f64], ux: &[f64]) -> MeasureSummary<f64> {
        MeasureSummary::default().with_control_mean(weighted_mean(ux, w) / (2.0 * self.kappa))
    }
}

/// The price-impact model solved as a control (social optimum) problem.
///
/// The planner's value `U` satisfies the PDE system above with
/// `H*(x, p) = min_a [c_alpha a^2/2 + a (p - gamma xbar)] + c_x x^2/2 - gamma abar x`:
/// moving one agent's control shifts the mean control, and moving its state
/// shifts the mean state, which adds the `gamma xbar` and `gamma abar`
/// terms to the individual Hamiltonian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriceImpactMfc(pub PriceImpactParams);

impl MfgPde for PriceImpactMfc {
    fn name(&self) -> &'static str {
        "price-impact-mfc"
    }
    fn horizon(&self) -> f64 {
        self.0.horizon
    }
    fn nu(&self) -> f64 {
        0.5 * self.0.sigma * self.0.sigma
    }
    fn initial_density(&self, x: f64) -> f64 {
        self.0.m0.density(x)
    }
    fn terminal_value<R: Real>(&self, x: R, _s: &MeasureSummary<R>) -> Result<R, ModelError> {
        Ok(x.square() * (0.5 * self.0.c_g))
    }
    fn hamiltonian<R: Real>(&self, x: R, p: R, s: &MeasureSummary<R>) -> Result<Hamiltonian<R>, ModelError> {
        let xbar = s.state_mean()?;
        let abar = s.control_mean()?;
        let k = &self.0;
        let shifted = p - xbar * k.gamma;
        let a = -shifted / k.c_alpha;
        let value = -shifted.square() / (2.0 * k.c_alpha) + x.square() * (0.5 * k.c_x) - x * abar * k.gamma;
        Ok(Hamiltonian { value, control: a, dp: a })
    }
    fn statistics(&self, x: &[f64], w: &[f64], ux: &[f64]) -> MeasureSummary<f64> {
        let k = &self.0;
        let xbar = weighted_mean(x, w);
        let abar: f64 = ux
            .iter()
            .zip(w)
            .map(|(p, wi)| -(p - k.gamma * xbar) / k.c_alpha * wi)
            .sum();
        MeasureSummary::default().with_state_mean(xbar).with_control_mean(abar)
    }
}
