//! Deep shooting on the systemic-risk game with common noise, compared with
//! the Riccati solution on the same noise.
//!
//! cargo run --release --example fbsde_systemic_risk -- [iterations] [particles] [width] [rate]

use std::time::Instant;

use meanfield::fbsde_shoot::{path_errors, systemic_oracle_paths, train, FbsdeConfig, ShootingNets, SystemicRiskFbsde};
use meanfield::models::SystemicRiskParams;
use meanfield::optim::{OptimConfig, Schedule};
use meanfield::oracle::SystemicRiskOracle;

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let iterations: usize = arg(1, 2000);
    let particles: usize = arg(2, 500);
    let width: usize = arg(3, 16);
    let rate: f64 = arg(4, 1e-2);
    let params = SystemicRiskParams::default();
    let system = SystemicRiskFbsde(params);
    let config = FbsdeConfig {
        particles,
        iterations,
        eval_every: iterations / 4,
        optim: OptimConfig::adam(rate).with_schedule(Schedule::StepDecay {
            rate,
            factor: 0.3,
            every: (iterations / 3).max(1) as u64,
        }),
        seed: 11,
        ..FbsdeConfig::default()
    };
    let start = Instant::now();
    let report = train(&system, ShootingNets::new(width, true, config.seed), &config)?;
    println!("trained {} iterations in {:.1}s", report.loss_history.len(), start.elapsed().as_secs_f64());
    for s in &report.snapshots {
        println!("iteration {:>6}: penalty {:.3e}", s.iteration, s.eval_loss);
    }
    let oracle = SystemicRiskOracle::solve(params, 2000)?;
    let exact = systemic_oracle_paths(&system, &oracle, &config.evaluation_noise(&system))?;
    let e = path_errors(&report.evaluation, &exact);
    println!(
        "rmse X {:.4}, rmse Y {:.4}, Y range {:.4}, relative Y error {:.4}",
        e.rmse_x, e.rmse_y, e.y_range, e.relative_y
    );
    let n = e.rmse_y_by_time.len();
    println!(
        "Y error at t=0 {:.4}, mid {:.4}, T {:.4}",
        e.rmse_y_by_time[0],
        e.rmse_y_by_time[n / 2],
        e.rmse_y_by_time[n - 1]
    );
    Ok(())
}
