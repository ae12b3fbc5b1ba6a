//! Riccati and ODE references against the finite-difference fixed point,
//! and the price of anarchy in the systemic-risk model.
//!
//! cargo run --release --example oracle_cross_validation

use std::time::Instant;

use meanfield::models::{CrowdedTradeParams, PriceImpactMfc, PriceImpactParams, SystemicRiskParams};
use meanfield::oracle::{
    grid_fixed_point, systemic_risk_price_of_anarchy, CrowdedTradeOracle, GridConfig, PriceImpactOracle, SystemicRiskOracle,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let start = Instant::now();
    let sr = SystemicRiskParams::default();
    let riccati = SystemicRiskOracle::solve(sr, 2000)?;
    let grid = grid_fixed_point(&sr, &GridConfig::on(-3.0, 3.0))?;
    let mbar = sr.m0.mean;
    println!(
        "systemic risk: eta(0) {:.5}, grid gap {:.4} ({} iterations, converged {})",
        riccati.eta(0.0),
        grid.control_gap(0.05, |t, x| riccati.control(t, x, mbar)),
        grid.iterations,
        grid.converged
    );
    let pi = PriceImpactParams::default();
    let ode = PriceImpactOracle::solve(pi, 2000)?;
    let grid = grid_fixed_point(&PriceImpactMfc(pi), &GridConfig::on(-2.0, 4.0))?;
    println!(
        "price impact: slope(0) {:.5}, grid gap {:.4}",
        ode.slope(0.0),
        grid.control_gap(0.05, |t, x| ode.control(t, x))
    );
    let ct = CrowdedTradeParams::default();
    let semi = CrowdedTradeOracle::solve(ct, 2000)?;
    let grid = grid_fixed_point(&ct, &GridConfig::on(-2.0, 8.0))?;
    println!(
        "crowded trade: mubar(0) {:.5} vs grid {:.5}, control gap {:.4}",
        semi.mubar(0.0),
        grid.stats[0].control_mean.unwrap_or(f64::NAN),
        grid.control_gap(0.05, |t, q| semi.control(t, q))
    );
    let poa = systemic_risk_price_of_anarchy(sr, 1000)?;
    println!(
        "price of anarchy: equilibrium cost {:.8}, social optimum {:.8}, margin {:.3e}",
        poa.mfg_cost, poa.mfc_cost, poa.margin
    );
    println!("done in {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
