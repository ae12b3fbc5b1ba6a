use std::cell::{Ref, RefCell};

use super::block::{broadcast_shape, gemm_acc, reduce_to, zip3_with, zip_with, Block};
use super::AutodiffError;

/// Index of a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Tanh,
    Relu,
    Sigmoid,
    Square,
    Sqrt,
    /// Heaviside indicator of `x > 0`, with zero derivative.
    Step,
    /// `x + c`
    Shift(f64),
    /// `c * x`
    Scale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Const,
    Unary(UnaryOp, NodeId),
    Binary(BinaryOp, NodeId, NodeId),
    /// `W X` for `W: o x i`, `X: i x n`.
    MatMul(NodeId, NodeId),
    /// Sum over lanes (columns): `r x n -> r x 1`.
    SumLanes(NodeId),
    /// Sum over rows: `r x n -> 1 x n`.
    SumRows(NodeId),
    Row(NodeId, usize),
    /// Vertical concatenation of blocks with equal column counts.
    Stack(Vec<NodeId>),
    /// Repeat a single-column block across `n` lanes.
    Broadcast(NodeId, usize),
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Block,
}

/// Result of a reverse sweep.
///
/// `partials` holds one entry per element of each requested leaf, leaves in
/// request order and elements row-major. For scalar leaves this is one entry
/// per leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientResult {
    pub value: f64,
    pub partials: Vec<f64>,
}

/// Append-only computation graph.
///
/// Nodes are topologically ordered by construction: an operation can only
/// reference nodes that already exist. Interior mutability lets [`Var`]
/// handles build the graph through ordinary arithmetic operators.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: Block) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        nodes.push(Node { op, value });
        Var { graph: self, id }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Block) -> Var<'_> {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.leaf(Block::scalar(v))
    }

    pub fn constant(&self, value: Block) -> Var<'_> {
        self.push(Op::Const, value)
    }

    pub fn constant_scalar(&self, v: f64) -> Var<'_> {
        self.constant(Block::scalar(v))
    }

    pub fn var(&self, id: NodeId) -> Result<Var<'_>, AutodiffError> {
        self.check(id)?;
        Ok(Var { graph: self, id })
    }

    fn check(&self, id: NodeId) -> Result<(), AutodiffError> {
        if id.0 < self.len() {
            Ok(())
        } else {
            Err(AutodiffError::UnknownNode(id.0))
        }
    }

    pub fn value(&self, id: NodeId) -> Ref<'_, Block> {
        Ref::map(self.nodes.borrow(), |n| &n[id.0].value)
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes.borrow().get(id.0).map(|n| &n.op), Some(Op::Leaf))
    }

    /// Replace the value held by a leaf. Dependent nodes keep stale values
    /// until [`Graph::reevaluate`] is called.
    pub fn set_leaf(&self, id: NodeId, value: Block) -> Result<(), AutodiffError> {
        self.check(id)?;
        let mut nodes = self.nodes.borrow_mut();
        let node = &mut nodes[id.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(AutodiffError::NotALeaf(id.0));
        }
        if node.value.shape() != value.shape() {
            return Err(AutodiffError::ShapeMismatch {
                expected: node.value.shape(),
                found: value.shape(),
            });
        }
        node.value = value;
        Ok(())
    }

    /// Recompute every non-input node from the current leaf values.
    pub fn reevaluate(&self) {
        let mut nodes = self.nodes.borrow_mut();
        for i in 0..nodes.len() {
            if matches!(nodes[i].op, Op::Leaf | Op::Const) {
                continue;
            }
            let v = eval_op(&nodes[i].op, &nodes[..i]);
            nodes[i].value = v;
        }
    }

    /// Reverse sweep from a scalar output, returning partials for `leaves`.
    pub fn backward(&self, output: NodeId, leaves: &[NodeId]) -> Result<GradientResult, AutodiffError> {
        let nodes = self.nodes.borrow();
        let adj = reverse_sweep(&nodes, output, leaves)?;
        let mut partials = Vec::new();
        for &l in leaves {
            match &adj[l.0] {
                Some(b) => partials.extend_from_slice(b.as_slice()),
                None => partials.extend(std::iter::repeat(0.0).take(nodes[l.0].value.len())),
            }
        }
        Ok(GradientResult {
            value: nodes[output.0].value.scalar_value(),
            partials,
        })
    }

    /// Reverse sweep returning the adjoint block of each requested node.
    pub fn gradients(&self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<Block>, AutodiffError> {
        let nodes = self.nodes.borrow();
        let adj = reverse_sweep(&nodes, output, wrt)?;
        Ok(wrt
            .iter()
            .map(|&l| {
                adj[l.0].clone().unwrap_or_else(|| {
                    let (r, c) = nodes[l.0].value.shape();
                    Block::zeros(r, c)
                })
            })
            .collect())
    }

    /// Diagonal of the Hessian of a scalar output with respect to scalar
    /// input leaves, by forward-over-reverse: a tangent seeded on one input
    /// is pushed through the forward pass and then through the reverse sweep.
    pub fn spatial_hessian_diag(&self, output: NodeId, inputs: &[NodeId]) -> Result<Vec<f64>, AutodiffError> {
        let nodes = self.nodes.borrow();
        validate_output(&nodes, output, inputs)?;
        let mut diag = Vec::with_capacity(inputs.len());
        for &leaf in inputs {
            if !nodes[leaf.0].value.is_scalar() {
                return Err(AutodiffError::ShapeMismatch {
                    expected: (1, 1),
                    found: nodes[leaf.0].value.shape(),
                });
            }
            if leaf.0 > output.0 {
                diag.push(0.0);
                continue;
            }
            let tangents = tangent_sweep(&nodes, output, leaf);
            let adj_dot = second_order_reverse(&nodes, &tangents, output);
            diag.push(adj_dot[leaf.0].as_ref().map_or(0.0, |b| b.scalar_value()));
        }
        Ok(diag)
    }
}

/// Handle to a node, supporting operator overloading.
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl<'g> std::fmt::Debug for Var<'g> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id.0)
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Block {
        self.graph.value(self.id).clone()
    }

    pub fn scalar_value(&self) -> f64 {
        self.graph.value(self.id).scalar_value()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.graph.value(self.id).shape()
    }

    fn op(self, op: Op) -> Var<'g> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            eval_op(&op, &nodes)
        };
        self.graph.push(op, value)
    }

    pub fn unary(self, u: UnaryOp) -> Var<'g> {
        self.op(Op::Unary(u, self.id))
    }

    pub fn binary(self, b: BinaryOp, other: Var<'g>) -> Var<'g> {
        assert!(std::ptr::eq(self.graph, other.graph), "operands belong to different graphs");
        let (sa, sb) = (self.shape(), other.shape());
        assert!(
            broadcast_shape(sa, sb).is_some(),
            "incompatible shapes {:?} and {:?} in {:?}",
            sa,
            sb,
            b
        );
        self.op(Op::Binary(b, self.id, other.id))
    }

    pub fn exp(self) -> Self {
        self.unary(UnaryOp::Exp)
    }
    pub fn ln(self) -> Self {
        self.unary(UnaryOp::Log)
    }
    pub fn tanh(self) -> Self {
        self.unary(UnaryOp::Tanh)
    }
    pub fn relu(self) -> Self {
        self.unary(UnaryOp::Relu)
    }
    pub fn sigmoid(self) -> Self {
        self.unary(UnaryOp::Sigmoid)
    }
    pub fn square(self) -> Self {
        self.unary(UnaryOp::Square)
    }
    pub fn sqrt(self) -> Self {
        self.unary(UnaryOp::Sqrt)
    }
    pub fn step(self) -> Self {
        self.unary(UnaryOp::Step)
    }
    pub fn max(self, other: Var<'g>) -> Self {
        self.binary(BinaryOp::Max, other)
    }

    /// `self` is `o x i`, `x` is `i x n`.
    pub fn matmul(self, x: Var<'g>) -> Self {
        let (o, i) = self.shape();
        let (ix, _) = x.shape();
        assert_eq!(i, ix, "matmul inner dimension mismatch ({}x{} times {:?})", o, i, x.shape());
        self.op(Op::MatMul(self.id, x.id))
    }

    pub fn sum_lanes(self) -> Self {
        self.op(Op::SumLanes(self.id))
    }

    pub fn mean_lanes(self) -> Self {
        let n = self.shape().1 as f64;
        self.sum_lanes() * (1.0 / n)
    }

    pub fn sum_rows(self) -> Self {
        self.op(Op::SumRows(self.id))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(self) -> Self {
        self.sum_lanes().sum_rows()
    }

    pub fn mean(self) -> Self {
        let (r, c) = self.shape();
        self.sum() * (1.0 / (r * c) as f64)
    }

    pub fn row(self, r: usize) -> Self {
        assert!(r < self.shape().0, "row {} out of range", r);
        self.op(Op::Row(self.id, r))
    }

    pub fn broadcast_lanes(self, n: usize) -> Self {
        assert_eq!(self.shape().1, 1, "only single-column blocks can be broadcast");
        self.op(Op::Broadcast(self.id, n))
    }

    /// Stack blocks vertically. Single-column blocks are broadcast to the
    /// widest lane count first.
    pub fn stack(parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty(), "cannot stack zero blocks");
        let g = parts[0].graph;
        let cols = parts.iter().map(|p| p.shape().1).max().unwrap_or(1);
        let ids: Vec<NodeId> = parts
            .iter()
            .map(|p| {
                let c = p.shape().1;
                if c == cols {
                    p.id
                } else {
                    assert_eq!(c, 1, "stacked blocks must share lane count");
                    p.broadcast_lanes(cols).id
                }
            })
            .collect();
        parts[0].op_on(g, Op::Stack(ids))
    }

    fn op_on(self, _g: &'g Graph, op: Op) -> Var<'g> {
        self.op(op)
    }

    pub fn constant_like(&self, c: f64) -> Var<'g> {
        self.graph.constant_scalar(c)
    }
}

pub(crate) fn unary_eval(u: UnaryOp, x: f64) -> f64 {
    match u {
        UnaryOp::Neg => -x,
        UnaryOp::Exp => x.exp(),
        UnaryOp::Log => x.ln(),
        UnaryOp::Tanh => x.tanh(),
        UnaryOp::Relu => {
            if x > 0.0 {
                x
            } else {
                0.0
            }
        }
        UnaryOp::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        UnaryOp::Square => x * x,
        UnaryOp::Sqrt => x.sqrt(),
        UnaryOp::Step => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryOp::Shift(c) => x + c,
        UnaryOp::Scale(c) => c * x,
    }
}

/// First and second derivative of a unary op at input `x` with output `y`.
fn unary_derivs(u: UnaryOp, x: f64, y: f64) -> (f64, f64) {
    match u {
        UnaryOp::Neg => (-1.0, 0.0),
        UnaryOp::Exp => (y, y),
        UnaryOp::Log => (1.0 / x, -1.0 / (x * x)),
        UnaryOp::Tanh => {
            let d = 1.0 - y * y;
            (d, -2.0 * y * d)
        }
        // The kink has measure zero; the second derivative is zero everywhere.
        UnaryOp::Relu => (if x > 0.0 { 1.0 } else { 0.0 }, 0.0),
        UnaryOp::Sigmoid => {
            let d = y * (1.0 - y);
            (d, d * (1.0 - 2.0 * y))
        }
        UnaryOp::Square => (2.0 * x, 2.0),
        UnaryOp::Sqrt => (0.5 / y, -0.25 / (y * y * y)),
        UnaryOp::Step => (0.0, 0.0),
        UnaryOp::Shift(_) => (1.0, 0.0),
        UnaryOp::Scale(c) => (c, 0.0),
    }
}

fn binary_eval(b: BinaryOp, x: f64, y: f64) -> f64 {
    match b {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
        BinaryOp::Div => x / y,
        BinaryOp::Max => {
            if x >= y {
                x
            } else {
                y
            }
        }
    }
}

pub(crate) fn eval_op(op: &Op, nodes: &[Node]) -> Block {
    let v = |id: &NodeId| &nodes[id.0].value;
    match op {
        Op::Leaf | Op::Const => unreachable!("inputs are not evaluated"),
        Op::Unary(u, a) => {
            let u = *u;
            v(a).map(|x| unary_eval(u, x))
        }
        Op::Binary(b, x, y) => {
            let b = *b;
            zip_with(v(x), v(y), |p, q| binary_eval(b, p, q))
        }
        Op::MatMul(w, x) => {
            let (w, x) = (v(w), v(x));
            let mut out = Block::zeros(w.rows(), x.cols());
            gemm_acc(w, false, x, false, &mut out);
            out
        }
        Op::SumLanes(a) => {
            let a = v(a);
            Block::column((0..a.rows()).map(|r| a.row(r).iter().sum()).collect())
        }
        Op::SumRows(a) => {
            let a = v(a);
            let mut out = vec![0.0; a.cols()];
            for r in 0..a.rows() {
                for (o, x) in out.iter_mut().zip(a.row(r)) {
                    *o += *x;
                }
            }
            Block::lanes(out)
        }
        Op::Row(a, r) => Block::lanes(v(a).row(*r).to_vec()),
        Op::Stack(parts) => {
            let cols = v(&parts[0]).cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let b = v(p);
                assert_eq!(b.cols(), cols, "stacked blocks must share lane count");
                rows += b.rows();
                data.extend_from_slice(b.as_slice());
            }
            Block::new(rows, cols, data)
        }
        Op::Broadcast(a, n) => {
            let a = v(a);
            let mut data = Vec::with_capacity(a.rows() * n);
            for r in 0..a.rows() {
                data.extend(std::iter::repeat(a.get(r, 0)).take(*n));
            }
            Block::new(a.rows(), *n, data)
        }
    }
}

fn validate_output(nodes: &[Node], output: NodeId, leaves: &[NodeId]) -> Result<(), AutodiffError> {
    if output.0 >= nodes.len() {
        return Err(AutodiffError::UnknownNode(output.0));
    }
    let shape = nodes[output.0].value.shape();
    if shape != (1, 1) {
        return Err(AutodiffError::NonScalarOutput { rows: shape.0, cols: shape.1 });
    }
    for l in leaves {
        if l.0 >= nodes.len() {
            return Err(AutodiffError::UnknownNode(l.0));
        }
    }
    Ok(())
}

fn accumulate(adj: &mut [Option<Block>], id: NodeId, contrib: Block) {
    match &mut adj[id.0] {
        Some(b) => b.add_assign(&contrib),
        slot @ None => *slot = Some(contrib),
    }
}

fn reverse_sweep(nodes: &[Node], output: NodeId, leaves: &[NodeId]) -> Result<Vec<Option<Block>>, AutodiffError> {
    validate_output(nodes, output, leaves)?;
    let mut adj: Vec<Option<Block>> = vec![None; nodes.len()];
    let mut keep = vec![false; output.0 + 1];
    for l in leaves {
        if l.0 <= output.0 {
            keep[l.0] = true;
        }
    }
    adj[output.0] = Some(Block::scalar(1.0));
    for i in (0..=output.0).rev() {
        let g = if keep[i] { adj[i].clone() } else { adj[i].take() };
        let Some(g) = g else { continue };
        let node = &nodes[i];
        let val = |id: &NodeId| &nodes[id.0].value;
        match &node.op {
            Op::Leaf | Op::Const => continue,
            Op::Unary(u, a) => {
                let u = *u;
                let x = val(a);
                let ga = zip3_with(x.shape(), &g, x, &node.value, |gy, xa, y| gy * unary_derivs(u, xa, y).0);
                accumulate(&mut adj, *a, ga);
            }
            Op::Binary(b, x, y) => {
                let (xv, yv) = (val(x), val(y));
                let shape = node.value.shape();
                let (gx, gy) = match b {
                    BinaryOp::Add => (g.clone(), g),
                    BinaryOp::Sub => (g.clone(), g.map(|v| -v)),
                    BinaryOp::Mul => (
                        zip_with(&g, yv, |gg, q| gg * q),
                        zip_with(&g, xv, |gg, p| gg * p),
                    ),
                    BinaryOp::Div => (
                        zip_with(&g, yv, |gg, q| gg / q),
                        zip3_with(shape, &g, xv, yv, |gg, p, q| -gg * p / (q * q)),
                    ),
                    BinaryOp::Max => (
                        zip3_with(shape, &g, xv, yv, |gg, p, q| if p >= q { gg } else { 0.0 }),
                        zip3_with(shape, &g, xv, yv, |gg, p, q| if p >= q { 0.0 } else { gg }),
                    ),
                };
                accumulate(&mut adj, *x, reduce_to(gx, xv.shape()));
                accumulate(&mut adj, *y, reduce_to(gy, yv.shape()));
            }
            Op::MatMul(w, x) => {
                let (wv, xv) = (val(w), val(x));
                let mut gw = Block::zeros(wv.rows(), wv.cols());
                gemm_acc(&g, false, xv, true, &mut gw);
                let mut gx = Block::zeros(xv.rows(), xv.cols());
                gemm_acc(wv, true, &g, false, &mut gx);
                accumulate(&mut adj, *w, gw);
                accumulate(&mut adj, *x, gx);
            }
            Op::SumLanes(a) => {
                let (r, c) = val(a).shape();
                let mut ga = Block::zeros(r, c);
                for rr in 0..r {
                    let gr = g.get(rr, 0);
                    ga.as_mut_slice()[rr * c..(rr + 1) * c].iter_mut().for_each(|v| *v = gr);
                }
                accumulate(&mut adj, *a, ga);
            }
            Op::SumRows(a) => {
                let (r, c) = val(a).shape();
                let mut data = Vec::with_capacity(r * c);
                for _ in 0..r {
                    data.extend_from_slice(g.as_slice());
                }
                accumulate(&mut adj, *a, Block::new(r, c, data));
            }
            Op::Row(a, row) => {
                let (r, c) = val(a).shape();
                let mut ga = Block::zeros(r, c);
                ga.as_mut_slice()[row * c..(row + 1) * c].copy_from_slice(g.as_slice());
                accumulate(&mut adj, *a, ga);
            }
            Op::Stack(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for p in parts {
                    let r = val(p).rows();
                    let slice = g.as_slice()[offset * c..(offset + r) * c].to_vec();
                    accumulate(&mut adj, *p, Block::new(r, c, slice));
                    offset += r;
                }
            }
            Op::Broadcast(a, _) => {
                let r = val(a).rows();
                let ga = Block::column((0..r).map(|rr| g.row(rr).iter().sum()).collect());
                accumulate(&mut adj, *a, ga);
            }
        }
    }
    Ok(adj)
}

/// Forward tangents for every node up to `output`, seeded with 1 on `seed`.
fn tangent_sweep(nodes: &[Node], output: NodeId, seed: NodeId) -> Vec<Option<Block>> {
    let mut tan: Vec<Option<Block>> = vec![None; output.0 + 1];
    if seed.0 <= output.0 {
        let (r, c) = nodes[seed.0].value.shape();
        tan[seed.0] = Some(Block::filled(r, c, 1.0));
    }
    for i in 0..=output.0 {
        if i == seed.0 {
            continue;
        }
        let node = &nodes[i];
        let val = |id: &NodeId| &nodes[id.0].value;
        let t = match &node.op {
            Op::Leaf | Op::Const => None,
            Op::Unary(u, a) => tan[a.0].as_ref().map(|ta| {
                let u = *u;
                zip3_with(node.value.shape(), ta, val(a), &node.value, |d, x, y| d * unary_derivs(u, x, y).0)
            }),
            Op::Binary(b, x, y) => {
                let (tx, ty) = (tan[x.0].as_ref(), tan[y.0].as_ref());
                if tx.is_none() && ty.is_none() {
                    None
                } else {
                    let shape = node.value.shape();
                    let zx;
                    let zy;
                    let tx = match tx {
                        Some(t) => t,
                        None => {
                            zx = Block::zeros(val(x).rows(), val(x).cols());
                            &zx
                        }
                    };
                    let ty = match ty {
                        Some(t) => t,
                        None => {
                            zy = Block::zeros(val(y).rows(), val(y).cols());
                            &zy
                        }
                    };
                    let (xv, yv) = (val(x), val(y));
                    Some(match b {
                        BinaryOp::Add => zip_with(tx, ty, |p, q| p + q),
                        BinaryOp::Sub => zip_with(tx, ty, |p, q| p - q),
                        BinaryOp::Mul => {
                            let a1 = zip_with(tx, yv, |p, q| p * q);
                            let a2 = zip_with(xv, ty, |p, q| p * q);
                            zip_with(&a1, &a2, |p, q| p + q)
                        }
                        BinaryOp::Div => {
                            // (tx - y_out * ty) / y
                            let a1 = zip_with(&node.value, ty, |o, q| o * q);
                            let num = zip_with(tx, &a1, |p, q| p - q);
                            zip_with(&num, yv, |p, q| p / q)
                        }
                        BinaryOp::Max => {
                            let sel = zip3_with(shape, xv, yv, tx, |p, q, d| if p >= q { d } else { 0.0 });
                            let other = zip3_with(shape, xv, yv, ty, |p, q, d| if p >= q { 0.0 } else { d });
                            zip_with(&sel, &other, |p, q| p + q)
                        }
                    })
                }
            }
            Op::MatMul(w, x) => {
                let (tw, tx) = (tan[w.0].as_ref(), tan[x.0].as_ref());
                if tw.is_none() && tx.is_none() {
                    None
                } else {
                    let mut out = Block::zeros(node.value.rows(), node.value.cols());
                    if let Some(tw) = tw {
                        gemm_acc(tw, false, val(x), false, &mut out);
                    }
                    if let Some(tx) = tx {
                        gemm_acc(val(w), false, tx, false, &mut out);
                    }
                    Some(out)
                }
            }
            op @ (Op::SumLanes(a) | Op::SumRows(a) | Op::Row(a, _) | Op::Broadcast(a, _)) => {
                tan[a.0].as_ref().map(|ta| linear_apply(op, ta))
            }
            Op::Stack(parts) => {
                if parts.iter().all(|p| tan[p.0].is_none()) {
                    None
                } else {
                    let mut data = Vec::new();
                    let mut rows = 0;
                    for p in parts {
                        let (r, c) = val(p).shape();
                        rows += r;
                        match &tan[p.0] {
                            Some(t) => data.extend_from_slice(t.as_slice()),
                            None => data.extend(std::iter::repeat(0.0).take(r * c)),
                        }
                    }
                    Some(Block::new(rows, node.value.cols(), data))
                }
            }
        };
        tan[i] = t;
    }
    tan
}

/// Apply a single-input linear structural op to a block of matching shape.
fn linear_apply(op: &Op, input: &Block) -> Block {
    match op {
        Op::SumLanes(_) => Block::column((0..input.rows()).map(|r| input.row(r).iter().sum()).collect()),
        Op::SumRows(_) => {
            let mut out = vec![0.0; input.cols()];
            for r in 0..input.rows() {
                for (o, x) in out.iter_mut().zip(input.row(r)) {
                    *o += *x;
                }
            }
            Block::lanes(out)
        }
        Op::Row(_, r) => Block::lanes(input.row(*r).to_vec()),
        Op::Broadcast(_, n) => {
            let mut data = Vec::with_capacity(input.rows() * n);
            for r in 0..input.rows() {
                data.extend(std::iter::repeat(input.get(r, 0)).take(*n));
            }
            Block::new(input.rows(), *n, data)
        }
        _ => unreachable!("not a structural op"),
    }
}

/// Reverse sweep carrying (adjoint, adjoint tangent) pairs; returns the
/// adjoint tangents, i.e. the Hessian-vector product along the seeded tangent.
fn second_order_reverse(nodes: &[Node], tan: &[Option<Block>], output: NodeId) -> Vec<Option<Block>> {
    let n = output.0 + 1;
    let mut adj: Vec<Option<Block>> = vec![None; n];
    let mut dadj: Vec<Option<Block>> = vec![None; n];
    adj[output.0] = Some(Block::scalar(1.0));
    dadj[output.0] = Some(Block::scalar(0.0));
    let zero_of = |b: &Block| Block::zeros(b.rows(), b.cols());
    for i in (0..n).rev() {
        let Some(g) = adj[i].take() else { continue };
        let dg = dadj[i].take().unwrap_or_else(|| zero_of(&g));
        let node = &nodes[i];
        let val = |id: &NodeId| &nodes[id.0].value;
        let tan_or_zero = |id: &NodeId| tan[id.0].clone().unwrap_or_else(|| zero_of(&nodes[id.0].value));
        match &node.op {
            Op::Leaf | Op::Const => {
                adj[i] = Some(g);
                dadj[i] = Some(dg);
                continue;
            }
            Op::Unary(u, a) => {
                let u = *u;
                let x = val(a);
                let shape = x.shape();
                let ta = tan_or_zero(a);
                let d1 = zip_with(x, &node.value, |xa, y| unary_derivs(u, xa, y).0);
                let d2 = zip_with(x, &node.value, |xa, y| unary_derivs(u, xa, y).1);
                let ga = zip_with(&g, &d1, |p, q| p * q);
                let part1 = zip_with(&dg, &d1, |p, q| p * q);
                let part2 = zip3_with(shape, &g, &d2, &ta, |gg, s, t| gg * s * t);
                let dga = zip_with(&part1, &part2, |p, q| p + q);
                accumulate(&mut adj, *a, ga);
                accumulate(&mut dadj, *a, dga);
            }
            Op::Binary(b, x, y) => {
                let (xv, yv) = (val(x), val(y));
                let (tx, ty) = (tan_or_zero(x), tan_or_zero(y));
                let shape = node.value.shape();
                let (gx, gy, dgx, dgy) = match b {
                    BinaryOp::Add => (g.clone(), g.clone(), dg.clone(), dg.clone()),
                    BinaryOp::Sub => (g.clone(), g.map(|v| -v), dg.clone(), dg.map(|v| -v)),
                    BinaryOp::Mul => {
                        let gx = zip_with(&g, yv, |p, q| p * q);
                        let gy = zip_with(&g, xv, |p, q| p * q);
                        let dgx = zip_with(&zip_with(&dg, yv, |p, q| p * q), &zip_with(&g, &ty, |p, q| p * q), |p, q| p + q);
                        let dgy = zip_with(&zip_with(&dg, xv, |p, q| p * q), &zip_with(&g, &tx, |p, q| p * q), |p, q| p + q);
                        (gx, gy, dgx, dgy)
                    }
                    BinaryOp::Div => {
                        let gx = zip_with(&g, yv, |p, q| p / q);
                        let gy = zip3_with(shape, &g, xv, yv, |gg, p, q| -gg * p / (q * q));
                        // d(g/y) = dg/y - g*ty/y^2
                        let dgx = zip_with(
                            &zip_with(&dg, yv, |p, q| p / q),
                            &zip3_with(shape, &g, &ty, yv, |gg, t, q| gg * t / (q * q)),
                            |p, q| p - q,
                        );
                        // d(-g x / y^2) = -dg x/y^2 - g tx / y^2 + 2 g x ty / y^3
                        let a1 = zip3_with(shape, &dg, xv, yv, |d, p, q| -d * p / (q * q));
                        let a2 = zip3_with(shape, &g, &tx, yv, |gg, t, q| -gg * t / (q * q));
                        let xty = zip_with(xv, &ty, |p, t| p * t);
                        let a3 = zip3_with(shape, &g, &xty, yv, |gg, pt, q| 2.0 * gg * pt / (q * q * q));
                        let dgy = zip3_with(shape, &a1, &a2, &a3, |p, q, r| p + q + r);
                        (gx, gy, dgx, dgy)
                    }
                    BinaryOp::Max => {
                        let sel_x = |m: &Block| zip3_with(shape, m, xv, yv, |gg, p, q| if p >= q { gg } else { 0.0 });
                        let sel_y = |m: &Block| zip3_with(shape, m, xv, yv, |gg, p, q| if p >= q { 0.0 } else { gg });
                        (sel_x(&g), sel_y(&g), sel_x(&dg), sel_y(&dg))
                    }
                };
                accumulate(&mut adj, *x, reduce_to(gx, xv.shape()));
                accumulate(&mut adj, *y, reduce_to(gy, yv.shape()));
                accumulate(&mut dadj, *x, reduce_to(dgx, xv.shape()));
                accumulate(&mut dadj, *y, reduce_to(dgy, yv.shape()));
            }
            Op::MatMul(w, x) => {
                let (wv, xv) = (val(w), val(x));
                let (tw, tx) = (tan[w.0].as_ref(), tan[x.0].as_ref());
                let mut gw = zero_of(wv);
                gemm_acc(&g, false, xv, true, &mut gw);
                let mut gx = zero_of(xv);
                gemm_acc(wv, true, &g, false, &mut gx);
                let mut dgw = zero_of(wv);
                gemm_acc(&dg, false, xv, true, &mut dgw);
                if let Some(tx) = tx {
                    gemm_acc(&g, false, tx, true, &mut dgw);
                }
                let mut dgx = zero_of(xv);
                gemm_acc(wv, true, &dg, false, &mut dgx);
                if let Some(tw) = tw {
                    gemm_acc(tw, true, &g, false, &mut dgx);
                }
                accumulate(&mut adj, *w, gw);
                accumulate(&mut adj, *x, gx);
                accumulate(&mut dadj, *w, dgw);
                accumulate(&mut dadj, *x, dgx);
            }
            Op::SumLanes(a) | Op::SumRows(a) | Op::Row(a, _) | Op::Broadcast(a, _) => {
                let shape = val(a).shape();
                let ga = linear_transpose(&node.op, &g, shape);
                let dga = linear_transpose(&node.op, &dg, shape);
                accumulate(&mut adj, *a, ga);
                accumulate(&mut dadj, *a, dga);
            }
            Op::Stack(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for p in parts {
                    let r = val(p).rows();
                    let s = g.as_slice()[offset * c..(offset + r) * c].to_vec();
                    let ds = dg.as_slice()[offset * c..(offset + r) * c].to_vec();
                    accumulate(&mut adj, *p, Block::new(r, c, s));
                    accumulate(&mut dadj, *p, Block::new(r, c, ds));
                    offset += r;
                }
            }
        }
    }
    dadj
}

/// Transpose of a structural linear op applied to an output adjoint.
fn linear_transpose(op: &Op, g: &Block, input_shape: (usize, usize)) -> Block {
    let (r, c) = input_shape;
    match op {
        Op::SumLanes(_) => {
            let mut data = Vec::with_capacity(r * c);
            for rr in 0..r {
                data.extend(std::iter::repeat(g.get(rr, 0)).take(c));
            }
            Block::new(r, c, data)
        }
        Op::SumRows(_) => {
            let mut data = Vec::with_capacity(r * c);
            for _ in 0..r {
                data.extend_from_slice(g.as_slice());
            }
            Block::new(r, c, data)
        }
        Op::Row(_, row) => {
            let mut out = Block::zeros(r, c);
            out.as_mut_slice()[row * c..(row + 1) * c].copy_from_slice(g.as_slice());
            out
        }
        Op::Broadcast(_, _) => Block::column((0..r).map(|rr| g.row(rr).iter().sum()).collect()),
        _ => unreachable!("not a structural op"),
    }
}
