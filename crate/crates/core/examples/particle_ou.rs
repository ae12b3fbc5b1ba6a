//! Euler-Maruyama particles under a linear feedback, against the
//! Ornstein-Uhlenbeck moments.
//!
//! cargo run --release --example particle_ou -- [particles] [steps]

use meanfield::models::PriceImpactParams;
use meanfield::particle::{rollout, sample_noise, Feedback};
use meanfield::stats::{mean, variance};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let n: usize = arg(1, 10_000);
    let steps: usize = arg(2, 200);
    // dX = a dt + sigma dW with a = -k x is an OU process
    let model = PriceImpactParams::default();
    let k = 1.5;
    let noise = sample_noise(&model, n, steps, 2024);
    let tr = rollout(&model, &Feedback(|_t, x, _m| -k * x), &noise)?;
    let (t, law, s) = (model.horizon, model.m0, model.sigma);
    let decay = (-k * t).exp();
    let want_mean = law.mean * decay;
    let want_var = law.variance * decay * decay + s * s * (1.0 - decay * decay) / (2.0 * k);
    let got = tr.terminal();
    let se_mean = (want_var / n as f64).sqrt();
    let se_var = want_var * (2.0 / (n - 1) as f64).sqrt();
    println!(
        "mean {:.5} vs {:.5} ({:.2} standard errors)",
        mean(got),
        want_mean,
        (mean(got) - want_mean) / se_mean
    );
    println!(
        "variance {:.5} vs {:.5} ({:.2} standard errors)",
        variance(got),
        want_var,
        (variance(got) - want_var) / se_var
    );
    Ok(())
}
