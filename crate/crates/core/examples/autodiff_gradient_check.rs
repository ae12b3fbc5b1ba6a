//! Reverse-mode gradients and network jets against central differences.
//!
//! cargo run --release --example autodiff_gradient_check

use meanfield::autodiff::{Block, Graph};
use meanfield::net::{init_params, Architecture};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // a scalar expression and its gradient
    let g = Graph::new();
    let x = g.scalar(0.3);
    let y = g.scalar(-1.2);
    let f = (x * y).tanh() + x.exp() * y.square();
    let r = g.backward(f.id(), &[x.id(), y.id()])?;
    let h = 1e-5;
    let fd = |dx: f64, dy: f64| {
        let g = Graph::new();
        let (x, y) = (g.scalar(0.3 + dx), g.scalar(-1.2 + dy));
        ((x * y).tanh() + x.exp() * y.square()).scalar_value()
    };
    println!("df/dx {:.10} vs {:.10}", r.partials[0], (fd(h, 0.0) - fd(-h, 0.0)) / (2.0 * h));
    println!("df/dy {:.10} vs {:.10}", r.partials[1], (fd(0.0, h) - fd(0.0, -h)) / (2.0 * h));

    // a tanh network on a batch of points: value, d/dx and d2/dx2 as graph
    // nodes, so the parameter gradient flows through the derivatives
    let params = init_params(&Architecture::mlp(2, 16, 1), 5);
    let pts = [(0.1, -0.5), (0.4, 0.2), (0.9, 1.1)];
    let g = Graph::new();
    let net = params.bind(&g);
    let z = g.constant(Block::new(2, 3, pts.iter().map(|p| p.0).chain(pts.iter().map(|p| p.1)).collect()));
    let jet = net.forward_jet(z, &[1], &[1])?;
    let eval = |t: f64, x: f64| params.eval(&[t, x]).map(|v| v[0]);
    for (k, &(t, x)) in pts.iter().enumerate() {
        let d1 = (eval(t, x + h)? - eval(t, x - h)?) / (2.0 * h);
        let hh = 1e-3;
        let d2 = (eval(t, x + hh)? - 2.0 * eval(t, x)? + eval(t, x - hh)?) / (hh * hh);
        println!(
            "point ({}, {}): u_x {:.8} vs {:.8}, u_xx {:.6} vs {:.6}",
            t,
            x,
            jet.d1[0].value().as_slice()[k],
            d1,
            jet.d2[0].value().as_slice()[k],
            d2
        );
    }
    // gradient of a residual-like loss through the jet
    let loss = (jet.d1[0] + jet.d2[0] * 0.5).square().mean_lanes();
    let grads = g.gradients(loss.id(), &net.leaves())?;
    let norm: f64 = grads.iter().flat_map(|b| b.as_slice()).map(|v| v * v).sum::<f64>().sqrt();
    println!("loss {:.6e}, parameter gradient norm {:.6e}", loss.scalar_value(), norm);
    Ok(())
}
