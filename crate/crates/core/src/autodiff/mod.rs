//! Reverse-mode automatic differentiation.
//!
//! A [`Graph`] records operations on small dense [`Block`]s. A `1 x 1` block
//! is a scalar; wider blocks evaluate the same scalar computation on many
//! lanes at once (one lane per particle or collocation point), which keeps
//! the tape short for batched rollouts. Feature rows only mix through
//! [`Var::matmul`], and lanes only mix through explicit reductions.
//!
//! First derivatives come from a single reverse sweep
//! ([`Graph::backward`]). Second spatial derivatives come from
//! forward-over-reverse ([`Graph::spatial_hessian_diag`]).

mod block;
mod graph;
mod ops;
mod real;

pub use block::Block;
pub use graph::{BinaryOp, GradientResult, Graph, NodeId, UnaryOp, Var};
pub use real::{Dual, Real};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("output node must be scalar, found a {rows}x{cols} block")]
    NonScalarOutput { rows: usize, cols: usize },
    #[error("unknown node id {0}")]
    UnknownNode(usize),
    #[error("node {0} is not a leaf")]
    NotALeaf(usize),
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn central_difference(g: &Graph, out: NodeId, leaf: NodeId, h: f64) -> f64 {
        let x0 = g.value(leaf).scalar_value();
        g.set_leaf(leaf, Block::scalar(x0 + h)).unwrap();
        g.reevaluate();
        let fp = g.value(out).scalar_value();
        g.set_leaf(leaf, Block::scalar(x0 - h)).unwrap();
        g.reevaluate();
        let fm = g.value(out).scalar_value();
        g.set_leaf(leaf, Block::scalar(x0)).unwrap();
        g.reevaluate();
        (fp - fm) / (2.0 * h)
    }

    fn second_difference(g: &Graph, out: NodeId, leaf: NodeId, h: f64) -> f64 {
        let x0 = g.value(leaf).scalar_value();
        let f0 = g.value(out).scalar_value();
        g.set_leaf(leaf, Block::scalar(x0 + h)).unwrap();
        g.reevaluate();
        let fp = g.value(out).scalar_value();
        g.set_leaf(leaf, Block::scalar(x0 - h)).unwrap();
        g.reevaluate();
        let fm = g.value(out).scalar_value();
        g.set_leaf(leaf, Block::scalar(x0)).unwrap();
        g.reevaluate();
        (fp - 2.0 * f0 + fm) / (h * h)
    }

    #[test]
    fn square_of_leaf() {
        let g = Graph::new();
        let x = g.scalar(3.0);
        let y = x * x;
        let r = g.backward(y.id(), &[x.id()]).unwrap();
        assert_eq!(r.value, 9.0);
        assert_eq!(r.partials, vec![6.0]);
    }

    #[test]
    fn sum_is_linear() {
        let g = Graph::new();
        let x = g.scalar(0.3);
        let y = g.scalar(-1.7);
        let f = x + y;
        let r = g.backward(f.id(), &[x.id(), y.id()]).unwrap();
        assert_eq!(r.partials, vec![1.0, 1.0]);
    }

    #[test]
    fn quadratic_hessian_diag() {
        let g = Graph::new();
        let x1 = g.scalar(0.7);
        let x2 = g.scalar(-1.1);
        let f = x1.square() + x2.square();
        let d = g.spatial_hessian_diag(f.id(), &[x1.id(), x2.id()]).unwrap();
        assert_eq!(d, vec![2.0, 2.0]);
        assert_eq!(d.iter().sum::<f64>(), 4.0);

        let g = Graph::new();
        let x1 = g.scalar(0.7);
        let x2 = g.scalar(-1.1);
        let f = x1 * x2;
        let d = g.spatial_hessian_diag(f.id(), &[x1.id(), x2.id()]).unwrap();
        assert_eq!(d, vec![0.0, 0.0]);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let g = Graph::new();
        let x = g.leaf(Block::lanes(vec![1.0, 2.0]));
        let y = x * 2.0;
        let err = g.backward(y.id(), &[x.id()]).unwrap_err();
        assert_eq!(err, AutodiffError::NonScalarOutput { rows: 1, cols: 2 });
        let err = g.backward(NodeId(99), &[x.id()]).unwrap_err();
        assert_eq!(err, AutodiffError::UnknownNode(99));
        let s = y.sum();
        let err = g.backward(s.id(), &[NodeId(42)]).unwrap_err();
        assert_eq!(err, AutodiffError::UnknownNode(42));
    }

    /// Two-hidden-layer tanh network built from scalar nodes only.
    struct ScalarNet {
        inputs: Vec<NodeId>,
        params: Vec<NodeId>,
        output: NodeId,
    }

    fn scalar_tanh_net(g: &Graph, rng: &mut ChaCha8Rng, widths: &[usize]) -> ScalarNet {
        let mut params = Vec::new();
        let inputs: Vec<Var> = (0..widths[0]).map(|_| g.scalar(rng.gen_range(-2.0..2.0))).collect();
        let mut h = inputs.clone();
        for (l, w) in widths.windows(2).enumerate() {
            let last = l == widths.len() - 2;
            let mut next = Vec::new();
            for _ in 0..w[1] {
                let b = g.scalar(rng.gen_range(-0.5..0.5));
                params.push(b.id());
                let mut z = b;
                for hj in &h {
                    let wij = g.scalar(rng.gen_range(-1.0..1.0));
                    params.push(wij.id());
                    z = z + wij * *hj;
                }
                next.push(if last { z } else { z.tanh() });
            }
            h = next;
        }
        ScalarNet {
            inputs: inputs.iter().map(|v| v.id()).collect(),
            params,
            output: h[0].id(),
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1.0)
    }

    #[test]
    fn tanh_network_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = Graph::new();
        let net = scalar_tanh_net(&g, &mut rng, &[2, 5, 4, 1]);
        let mut leaves = net.params.clone();
        leaves.extend(&net.inputs);
        let r = g.backward(net.output, &leaves).unwrap();
        for (leaf, ad) in leaves.iter().zip(&r.partials) {
            let fd = central_difference(&g, net.output, *leaf, 1e-5);
            assert!(rel_err(*ad, fd) <= 1e-6, "leaf {:?}: {} vs {}", leaf, ad, fd);
        }
        let diag = g.spatial_hessian_diag(net.output, &net.inputs).unwrap();
        for (leaf, hd) in net.inputs.iter().zip(&diag) {
            let fd = second_difference(&g, net.output, *leaf, 1e-3);
            assert!(rel_err(*hd, fd) <= 1e-4, "{} vs {}", hd, fd);
        }
    }

    #[test]
    fn lane_graph_matches_scalar_graphs() {
        // A 3-lane block evaluates the same thing as three scalar graphs.
        let xs = [0.2, -0.4, 1.3];
        let g = Graph::new();
        let w = g.leaf(Block::new(2, 1, vec![0.5, -1.5]));
        let b = g.leaf(Block::column(vec![0.1, 0.2]));
        let x = g.constant(Block::lanes(xs.to_vec()));
        let h = (w.matmul(x) + b).tanh();
        let loss = h.sum();
        let lane_grad = g.backward(loss.id(), &[w.id(), b.id()]).unwrap();

        let mut total = vec![0.0; 4];
        for &xi in &xs {
            let g = Graph::new();
            let w = g.leaf(Block::new(2, 1, vec![0.5, -1.5]));
            let b = g.leaf(Block::column(vec![0.1, 0.2]));
            let x = g.constant_scalar(xi);
            let h = (w.matmul(x) + b).tanh();
            let r = g.backward(h.sum().id(), &[w.id(), b.id()]).unwrap();
            for (t, p) in total.iter_mut().zip(&r.partials) {
                *t += p;
            }
        }
        for (a, b) in lane_grad.partials.iter().zip(&total) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn reevaluation_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Graph::new();
        let net = scalar_tanh_net(&g, &mut rng, &[2, 3, 3, 1]);
        let before: Vec<Block> = (0..g.len()).map(|i| g.value(NodeId(i)).clone()).collect();
        g.reevaluate();
        for (i, b) in before.iter().enumerate() {
            assert_eq!(b.as_slice(), g.value(NodeId(i)).as_slice());
        }
        let r1 = g.backward(net.output, &net.params).unwrap();
        let r2 = g.backward(net.output, &net.params).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn linear_combination_of_gradients() {
        let g = Graph::new();
        let x = g.scalar(0.4);
        let y = g.scalar(1.2);
        let f = (x * y).tanh() + x.exp();
        let h = (x / y).sigmoid() * y.square();
        let combo = f * 2.5 + h * -0.75;
        let rf = g.backward(f.id(), &[x.id(), y.id()]).unwrap();
        let rh = g.backward(h.id(), &[x.id(), y.id()]).unwrap();
        let rc = g.backward(combo.id(), &[x.id(), y.id()]).unwrap();
        for k in 0..2 {
            let expect = 2.5 * rf.partials[k] - 0.75 * rh.partials[k];
            assert!((rc.partials[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_second_derivative_is_zero_at_kink() {
        let g = Graph::new();
        let x = g.scalar(0.0);
        let f = x.relu();
        assert_eq!(g.backward(f.id(), &[x.id()]).unwrap().partials, vec![0.0]);
        assert_eq!(g.spatial_hessian_diag(f.id(), &[x.id()]).unwrap(), vec![0.0]);
    }

    #[test]
    fn dual_numbers_over_graph() {
        // d/dx tanh(x^2) on top of a graph Var, then differentiate that.
        let g = Graph::new();
        let x = g.scalar(0.8);
        let d = Dual::variable(x);
        let y = (d * d).tanh();
        let t = (0.64f64).tanh();
        assert!((y.d.scalar_value() - 2.0 * 0.8 * (1.0 - t * t)).abs() < 1e-14);
        let second = g.backward(y.d.id(), &[x.id()]).unwrap().partials[0];
        let fd = central_difference(&g, y.d.id(), x.id(), 1e-5);
        assert!(rel_err(second, fd) < 1e-6);
    }

    #[derive(Debug, Clone, Copy)]
    enum Kind {
        Add,
        Sub,
        Mul,
        Div,
        Max,
        Exp,
        Log,
        Tanh,
        Relu,
        Sigmoid,
        Square,
        Sqrt,
    }

    fn kind_strategy() -> impl Strategy<Value = Kind> {
        prop_oneof![
            Just(Kind::Add),
            Just(Kind::Sub),
            Just(Kind::Mul),
            Just(Kind::Div),
            Just(Kind::Max),
            Just(Kind::Exp),
            Just(Kind::Log),
            Just(Kind::Tanh),
            Just(Kind::Relu),
            Just(Kind::Sigmoid),
            Just(Kind::Square),
            Just(Kind::Sqrt),
        ]
    }

    proptest! {
        #[test]
        fn every_op_matches_central_difference(kind in kind_strategy(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let g = Graph::new();
            let x = g.scalar(a);
            let y = g.scalar(b);
            // Keep arguments away from singularities and kinks.
            let pos = x.square() + 0.5;
            let f = match kind {
                Kind::Add => x + y,
                Kind::Sub => x - y,
                Kind::Mul => x * y,
                Kind::Div => x / (y.square() + 0.5),
                Kind::Max => x.max(y * 0.3),
                Kind::Exp => x.exp(),
                Kind::Log => pos.ln(),
                Kind::Tanh => x.tanh(),
                Kind::Relu => x.relu(),
                Kind::Sigmoid => x.sigmoid(),
                Kind::Square => x.square(),
                Kind::Sqrt => pos.sqrt(),
            };
            // Skip points within h of a kink.
            if matches!(kind, Kind::Relu) { prop_assume!(a.abs() > 1e-4); }
            if matches!(kind, Kind::Max) { prop_assume!((a - 0.3 * b).abs() > 1e-4); }
            let r = g.backward(f.id(), &[x.id(), y.id()]).unwrap();
            for (leaf, ad) in [x.id(), y.id()].iter().zip(&r.partials) {
                let fd = central_difference(&g, f.id(), *leaf, 1e-5);
                prop_assert!((ad - fd).abs() <= f64::max(1e-6, 1e-4 * ad.abs()), "{:?}: {} vs {}", kind, ad, fd);
            }
            let d = g.spatial_hessian_diag(f.id(), &[x.id(), y.id()]).unwrap();
            for (leaf, hd) in [x.id(), y.id()].iter().zip(&d) {
                let fd = second_difference(&g, f.id(), *leaf, 1e-3);
                prop_assert!((hd - fd).abs() <= f64::max(1e-4, 1e-4 * hd.abs()), "{:?} second: {} vs {}", kind, hd, fd);
            }
        }
    }
}
