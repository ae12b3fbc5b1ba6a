//! Deep Galerkin training on the crowded trade system, compared with the
//! semi-explicit control and the grid fixed point.
//!
//! cargo run --release --example dgm_crowded_trade -- [iterations] [width] [rate] [boundary weight] [out dir]

use std::time::Instant;

use meanfield::dgm_pde::{train, DgmConfig, DgmNets, LossWeights, PdeProblem};
use meanfield::models::CrowdedTradeParams;
use meanfield::optim::{OptimConfig, Schedule};
use meanfield::oracle::{grid_fixed_point, CrowdedTradeOracle, GridConfig};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let iterations: usize = arg(1, 2000);
    let width: usize = arg(2, 16);
    let rate: f64 = arg(3, 1e-3);
    let boundary: f64 = arg(4, 10.0);
    let out: Option<String> = std::env::args().nth(5);
    let params = CrowdedTradeParams::default();
    let weights = LossWeights {
        kfp_initial: boundary,
        hjb_terminal: boundary,
        ..LossWeights::default()
    };
    let problem = PdeProblem::new(params, -2.0, 8.0, weights)?;
    let config = DgmConfig {
        iterations,
        eval_every: (iterations / 10).max(1),
        optim: OptimConfig::adam(rate).with_schedule(Schedule::StepDecay {
            rate,
            factor: 0.3,
            every: (iterations / 3).max(1) as u64,
        }),
        seed: 13,
        ..DgmConfig::default()
    };
    let start = Instant::now();
    let report = train(&problem, DgmNets::new(width, config.seed), &config)?;
    println!("trained {} iterations in {:.1}s", report.history.len(), start.elapsed().as_secs_f64());
    if let Some(reason) = &report.aborted {
        println!("aborted: {}", reason);
    }
    for s in &report.snapshots {
        let e = &s.eval;
        println!(
            "iteration {:>6}: total {:.3e} (kfp {:.2e}, m0 {:.2e}, hjb {:.2e}, uT {:.2e})",
            s.iteration, e.total, e.kfp, e.kfp_initial, e.hjb, e.hjb_terminal
        );
    }
    let first = report.history.first().map(|l| l.total).unwrap_or(f64::NAN);
    let last = report.snapshots.last().map(|s| s.eval.total).unwrap_or(f64::NAN);
    println!("loss drop factor {:.1}", first / last);
    let oracle = CrowdedTradeOracle::solve(params, 2000)?;
    let grid = grid_fixed_point(&params, &GridConfig::on(-2.0, 8.0))?;
    for t in [0.0, 0.5, 1.0] {
        let fit = report.grid.control_fit(t);
        println!(
            "t = {}: learned slope {:.4} (r2 {:.4}), grid {:.4}, semi-explicit {:.4}",
            t,
            fit.slope,
            fit.r2,
            grid.control_fit(t, 0.05).slope,
            oracle.slope(t)
        );
    }
    println!(
        "density mean {:.3} -> {:.3}, variance {:.4} -> {:.4}",
        report.grid.mean(0.0),
        report.grid.mean(1.0),
        report.grid.variance(0.0),
        report.grid.variance(1.0)
    );
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)?;
        report.write(std::path::Path::new(&dir))?;
    }
    Ok(())
}
