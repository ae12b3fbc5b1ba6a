//! Gradient steps: plain SGD and bias-corrected Adam.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient component {index} ({value}) at step {step}; step skipped")]
    NonFiniteGradient { index: usize, value: f64, step: u64 },
    #[error("gradient has length {found}, parameters have length {expected}")]
    LengthMismatch { expected: usize, found: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sgd,
    Adam,
}

/// Learning rate as a function of the step count `k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant { rate: f64 },
    /// `rate / (1 + decay k)`
    InverseTime { rate: f64, decay: f64 },
    /// Piecewise constant: `rate * factor^(k / every)`.
    StepDecay { rate: f64, factor: f64, every: u64 },
}

impl Schedule {
    pub fn rate(&self, k: u64) -> f64 {
        match *self {
            Schedule::Constant { rate } => rate,
            Schedule::InverseTime { rate, decay } => rate / (1.0 + decay * k as f64),
            Schedule::StepDecay { rate, factor, every } => rate * factor.powi((k / every.max(1)) as i32),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub method: Method,
    pub schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the gradient when its Euclidean norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            method: Method::Adam,
            schedule: Schedule::Constant { rate: 1e-3 },
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(10.0),
        }
    }
}

impl OptimConfig {
    pub fn sgd(rate: f64) -> Self {
        Self {
            method: Method::Sgd,
            schedule: Schedule::Constant { rate },
            clip_norm: None,
            ..Self::default()
        }
    }

    pub fn adam(rate: f64) -> Self {
        Self {
            schedule: Schedule::Constant { rate },
            ..Self::default()
        }
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn with_clip(mut self, clip: Option<f64>) -> Self {
        self.clip_norm = clip;
        self
    }
}

/// What happened during one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub rate: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimConfig,
    k: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(config: OptimConfig, len: usize) -> Self {
        let moments = if config.method == Method::Adam { len } else { 0 };
        Self {
            config,
            k: 0,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
        }
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.k
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// Update `theta` in place. A non-finite gradient leaves both `theta` and
    /// the optimizer state untouched.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<StepInfo, OptimError> {
        if grad.len() != theta.len() {
            return Err(OptimError::LengthMismatch {
                expected: theta.len(),
                found: grad.len(),
            });
        }
        if let Some((index, &value)) = grad.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(OptimError::NonFiniteGradient {
                index,
                value,
                step: self.k,
            });
        }
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = match self.config.clip_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        let rate = self.config.schedule.rate(self.k);
        match self.config.method {
            Method::Sgd => {
                for (t, g) in theta.iter_mut().zip(grad) {
                    *t -= rate * scale * g;
                }
            }
            Method::Adam => {
                let (b1, b2) = (self.config.beta1, self.config.beta2);
                let n = (self.k + 1) as i32;
                let c1 = 1.0 - b1.powi(n);
                let c2 = 1.0 - b2.powi(n);
                for i in 0..theta.len() {
                    let g = grad[i] * scale;
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    theta[i] -= rate * mh / (vh.sqrt() + self.config.eps);
                }
            }
        }
        self.k += 1;
        Ok(StepInfo {
            rate,
            grad_norm,
            clipped: scale < 1.0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sgd_on_square() {
        let mut o = Optimizer::new(OptimConfig::sgd(0.1), 1);
        let mut th = [1.0];
        let g = [2.0 * th[0]];
        o.step(&mut th, &g).unwrap();
        assert!((th[0] - 0.8).abs() < 1e-15);
        assert_eq!(o.steps(), 1);
    }

    #[test]
    fn adam_first_step_has_rate_magnitude() {
        for g in [1e-3, 0.5, -7.0, 1e4] {
            let mut o = Optimizer::new(OptimConfig::adam(1e-3).with_clip(None), 1);
            let mut th = [0.0];
            o.step(&mut th, &[g]).unwrap();
            assert!((th[0].abs() - 1e-3).abs() < 1e-8, "g {} step {}", g, th[0]);
            assert!(th[0] * g < 0.0);
        }
    }

    #[test]
    fn decaying_sgd_on_shifted_quadratic() {
        // With rate 0.1/(1+k) the error after K steps is prod (1 - 0.2/(1+k)),
        // roughly K^-0.2, so 1e-3 is out of reach in 1e4 steps.
        let cfg = OptimConfig::sgd(0.1).with_schedule(Schedule::InverseTime { rate: 0.1, decay: 1.0 });
        let mut o = Optimizer::new(cfg, 1);
        let mut th = [0.0];
        let mut err = -3.0;
        for k in 0..10_000 {
            let g = [2.0 * (th[0] - 3.0)];
            o.step(&mut th, &g).unwrap();
            err *= 1.0 - 0.2 / (1.0 + k as f64);
        }
        assert!((th[0] - 3.0 - err).abs() < 1e-12);
        assert!((th[0] - 3.0).abs() > 0.4);

        // A slower decay has a divergent rate sum that is large enough.
        let cfg = OptimConfig::sgd(0.1).with_schedule(Schedule::InverseTime { rate: 0.1, decay: 0.01 });
        let mut o = Optimizer::new(cfg, 1);
        let mut th = [0.0];
        let hit = (0..10_000).find(|_| {
            let g = [2.0 * (th[0] - 3.0)];
            o.step(&mut th, &g).unwrap();
            (th[0] - 3.0).abs() < 1e-3
        });
        assert!(hit.is_some(), "final {}", th[0]);
    }

    #[test]
    fn nan_gradient_aborts_without_changes() {
        let mut o = Optimizer::new(OptimConfig::default(), 3);
        let mut th = [1.0, 2.0, 3.0];
        let err = o.step(&mut th, &[0.1, f64::NAN, 0.2]).unwrap_err();
        assert!(matches!(err, OptimError::NonFiniteGradient { index: 1, step: 0, .. }));
        assert_eq!(th, [1.0, 2.0, 3.0]);
        assert_eq!(o.steps(), 0);
        assert!(o.moments().0.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut o = Optimizer::new(OptimConfig::sgd(1.0).with_clip(Some(10.0)), 2);
        let mut th = [0.0, 0.0];
        let info = o.step(&mut th, &[30.0, 40.0]).unwrap();
        assert!(info.clipped);
        assert!((info.grad_norm - 50.0).abs() < 1e-12);
        assert!((th[0] + 6.0).abs() < 1e-12 && (th[1] + 8.0).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch() {
        let mut o = Optimizer::new(OptimConfig::default(), 2);
        assert!(o.step(&mut [0.0, 0.0], &[1.0]).is_err());
    }

    #[test]
    fn schedules() {
        assert_eq!(Schedule::Constant { rate: 0.3 }.rate(99), 0.3);
        assert!((Schedule::InverseTime { rate: 0.1, decay: 1.0 }.rate(4) - 0.02).abs() < 1e-15);
        let s = Schedule::StepDecay { rate: 1.0, factor: 0.5, every: 10 };
        assert_eq!((s.rate(9), s.rate(10), s.rate(25)), (1.0, 0.5, 0.25));
    }

    proptest! {
        #[test]
        fn zero_gradient_is_a_fixed_point(theta in proptest::collection::vec(-5.0f64..5.0, 1..8), adam in any::<bool>()) {
            let cfg = if adam { OptimConfig::adam(1e-2) } else { OptimConfig::sgd(0.5) };
            let mut o = Optimizer::new(cfg, theta.len());
            let mut th = theta.clone();
            let zeros = vec![0.0; th.len()];
            for _ in 0..5 {
                o.step(&mut th, &zeros).unwrap();
            }
            for (a, b) in th.iter().zip(&theta) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
        }

        #[test]
        fn joint_equals_separate(
            a in proptest::collection::vec(-3.0f64..3.0, 1..5),
            b in proptest::collection::vec(-3.0f64..3.0, 1..5),
            adam in any::<bool>(),
        ) {
            // Per-coordinate updates are independent once clipping is off.
            let cfg = if adam { OptimConfig::adam(0.05).with_clip(None) } else { OptimConfig::sgd(0.05) };
            let grad = |x: &[f64]| x.iter().map(|v| 2.0 * v - 1.0 + v.powi(3)).collect::<Vec<_>>();
            let mut joint: Vec<f64> = a.iter().chain(&b).copied().collect();
            let (mut sa, mut sb) = (a.clone(), b.clone());
            let mut oj = Optimizer::new(cfg.clone(), joint.len());
            let mut oa = Optimizer::new(cfg.clone(), sa.len());
            let mut ob = Optimizer::new(cfg, sb.len());
            for _ in 0..20 {
                let gj = grad(&joint);
                oj.step(&mut joint, &gj).unwrap();
                let ga = grad(&sa);
                oa.step(&mut sa, &ga).unwrap();
                let gb = grad(&sb);
                ob.step(&mut sb, &gb).unwrap();
            }
            let sep: Vec<f64> = sa.iter().chain(&sb).copied().collect();
            prop_assert_eq!(joint, sep);
        }
    }
}
