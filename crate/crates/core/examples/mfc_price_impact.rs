//! Train a feedback network on the price impact model and compare it with
//! the ODE solution.
//!
//! cargo run --release --example mfc_price_impact -- [gamma] [iterations] [particles] [width] [lr stages]

use std::time::Instant;

use meanfield::mfc_direct::{cost_with_stderr, evaluation_noise, policy_fit, train, TrainConfig};
use meanfield::models::PriceImpactParams;
use meanfield::net::Architecture;
use meanfield::optim::{OptimConfig, Schedule};
use meanfield::oracle::PriceImpactOracle;
use meanfield::particle::{rollout, Feedback, NetInputs, NetPolicy};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let gamma: f64 = arg(1, 0.2);
    let iterations: usize = arg(2, 2000);
    let particles: usize = arg(3, 500);
    let width: usize = arg(4, 16);
    let stages: usize = arg(5, 4);
    let model = PriceImpactParams::default().with_gamma(gamma);
    let config = TrainConfig {
        particles,
        iterations,
        eval_every: iterations / 4,
        optim: OptimConfig::adam(1e-2).with_schedule(Schedule::StepDecay {
            rate: 1e-2,
            factor: 0.3,
            every: (iterations / stages).max(1) as u64,
        }),
        seed: 7,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let report = train(&model, &Architecture::mlp(2, width, 1), NetInputs::TimeState, &config)?;
    println!("trained {} iterations in {:.1}s", report.loss_history.len(), start.elapsed().as_secs_f64());
    for s in &report.snapshots {
        println!("iteration {:>6}: cost {:.5} +- {:.5}", s.iteration, s.eval_cost, s.eval_stderr);
    }
    let oracle = PriceImpactOracle::solve(model, 2000)?;
    let policy = NetPolicy {
        params: &report.params,
        inputs: NetInputs::TimeState,
    };
    for t in [0.0, 0.5] {
        let fit = policy_fit(&policy, &report.evaluation, t)?;
        println!(
            "t = {}: learned slope {:.4} (r2 {:.5}), oracle slope {:.4}; intercept {:.4} vs {:.4}",
            t,
            fit.slope,
            fit.r2,
            oracle.slope(t),
            fit.intercept,
            oracle.intercept(t)
        );
    }
    let noise = evaluation_noise(&model, &config);
    let exact = rollout(&model, &Feedback(|t, x, _m| oracle.control(t, x)), &noise)?;
    let (c, se) = cost_with_stderr(&exact);
    println!("oracle policy cost on the evaluation sample {:.5} +- {:.5}", c, se);
    let ev = &report.evaluation;
    let steps = ev.controls.len();
    for n in [0, steps / 4, steps * 9 / 10, steps - 1] {
        println!(
            "t = {:.2}: ensemble mean control {:.4}, oracle {:.4}",
            n as f64 * ev.dt,
            meanfield::stats::mean(&ev.controls[n]),
            oracle.mean_control(n as f64 * ev.dt)
        );
    }
    println!(
        "ensemble variance {:.4} -> {:.4}",
        meanfield::stats::variance(&ev.states[0]),
        meanfield::stats::variance(ev.terminal())
    );
    Ok(())
}
