//! Drive the experiment layer from code: an ODE reference and a grid
//! solution of the price impact model written to disk, then compared.
//!
//! cargo run --release --example run_and_compare -- [out dir]

use std::path::PathBuf;

use meanfield::cli::{compare_runs, load_config, run, Method, RunArgs};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/example".into()));
    let text = "model = \"price-impact\"\n\n[oracle]\nsnapshots = 10\n\n[oracle.grid]\ncells = 300\nsteps = 200\n";
    let mut dirs = Vec::new();
    for solver in ["exact", "grid"] {
        let args = RunArgs {
            out: Some(root.join(solver)),
            set: vec![format!("oracle.solver={}", solver)],
            ..RunArgs::default()
        };
        let resolved = load_config(Method::Oracle, text, &args)?;
        let summary = run(&resolved)?;
        println!("{} finished in {:.2}s: {:?}", solver, summary.wall_time_s, summary.oracle_gaps);
        dirs.push(resolved.out);
    }
    let cmp = compare_runs(&dirs[1], &dirs[0], "control", &root.join("compare"))?;
    for s in &cmp.slices {
        println!("t = {:.2}: sup {:.4}, slope {:.4} vs {:.4}", s.t, s.sup, s.slope_a, s.slope_b);
    }
    Ok(())
}
