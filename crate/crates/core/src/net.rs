//! Feed-forward regression networks.
//!
//! A network with widths `(d0, ..., d_{l+1})` is the composition of `l`
//! hidden layer functions `x -> psi(beta + W x)` followed by an affine output
//! layer, optionally passed through `exp` when the network represents a
//! density.
//!
//! The flat parameter vector is laid out layer by layer, each layer storing
//! its bias first and then its weight matrix row-major (`W[i][j]` connects
//! input `j` to unit `i`).

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Block, Graph, NodeId, Var};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("input has {found} rows, network expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("parameter vector has length {found}, architecture needs {expected}")]
    ParameterCount { expected: usize, found: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Identity,
    /// Strictly positive output, used for densities.
    Exponential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: OutputActivation,
}

impl Architecture {
    pub fn new(widths: Vec<usize>, hidden: Activation, output: OutputActivation) -> Result<Self, NetError> {
        let arch = Self { widths, hidden, output };
        arch.validate()?;
        Ok(arch)
    }

    /// Two tanh hidden layers of the given width with identity output.
    pub fn mlp(input: usize, width: usize, output: usize) -> Self {
        Self {
            widths: vec![input, width, width, output],
            hidden: Activation::Tanh,
            output: OutputActivation::Identity,
        }
    }

    pub fn with_output(mut self, output: OutputActivation) -> Self {
        self.output = output;
        self
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.widths.len() < 3 {
            return Err(NetError::InvalidArchitecture(format!(
                "need at least one hidden layer, got widths {:?}",
                self.widths
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(NetError::InvalidArchitecture(format!(
                "all widths must be positive, got {:?}",
                self.widths
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Number of affine maps (hidden layers plus the output layer).
    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    /// Offset of layer `i` in the flat parameter vector.
    fn offset(&self, layer: usize) -> usize {
        self.widths[..=layer]
            .windows(2)
            .map(|w| w[1] * (w[0] + 1))
            .sum()
    }
}

fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Relu => x.max(0.0),
        Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        Activation::Tanh => x.tanh(),
    }
}

fn act_var(a: Activation, x: Var<'_>) -> Var<'_> {
    match a {
        Activation::Relu => x.relu(),
        Activation::Sigmoid => x.sigmoid(),
        Activation::Tanh => x.tanh(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParameters {
    pub theta: Vec<f64>,
    pub arch: Architecture,
}

/// Glorot-uniform weights and zero biases, deterministic in `seed`.
pub fn init_params(arch: &Architecture, seed: u64) -> NetworkParameters {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = Vec::with_capacity(arch.param_count());
    for w in arch.widths.windows(2) {
        let (din, dout) = (w[0], w[1]);
        let lim = (6.0 / (din + dout) as f64).sqrt();
        let u = Uniform::new_inclusive(-lim, lim);
        theta.extend(std::iter::repeat(0.0).take(dout));
        theta.extend((0..din * dout).map(|_| u.sample(&mut rng)));
    }
    NetworkParameters {
        theta,
        arch: arch.clone(),
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    arch: Architecture,
    len: usize,
}

impl NetworkParameters {
    pub fn new(arch: Architecture, theta: Vec<f64>) -> Result<Self, NetError> {
        arch.validate()?;
        if theta.len() != arch.param_count() {
            return Err(NetError::ParameterCount {
                expected: arch.param_count(),
                found: theta.len(),
            });
        }
        Ok(Self { theta, arch })
    }

    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            theta: vec![0.0; arch.param_count()],
            arch: arch.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// Bias and row-major weights of one layer.
    pub fn layer(&self, i: usize) -> (&[f64], &[f64]) {
        let (din, dout) = (self.arch.widths[i], self.arch.widths[i + 1]);
        let off = self.arch.offset(i);
        (
            &self.theta[off..off + dout],
            &self.theta[off + dout..off + dout + din * dout],
        )
    }

    pub fn layer_mut(&mut self, i: usize) -> (&mut [f64], &mut [f64]) {
        let (din, dout) = (self.arch.widths[i], self.arch.widths[i + 1]);
        let off = self.arch.offset(i);
        let (b, rest) = self.theta[off..off + dout * (din + 1)].split_at_mut(dout);
        (b, rest)
    }

    /// Plain evaluation at a single input point.
    pub fn eval(&self, input: &[f64]) -> Result<Vec<f64>, NetError> {
        if input.len() != self.arch.input_dim() {
            return Err(NetError::DimensionMismatch {
                expected: self.arch.input_dim(),
                found: input.len(),
            });
        }
        let mut h = input.to_vec();
        let last = self.arch.layers() - 1;
        for i in 0..=last {
            let (b, w) = self.layer(i);
            let din = h.len();
            let mut a: Vec<f64> = b
                .iter()
                .enumerate()
                .map(|(r, &bi)| bi + (0..din).map(|c| w[r * din + c] * h[c]).sum::<f64>())
                .collect();
            if i < last {
                a.iter_mut().for_each(|v| *v = act(self.arch.hidden, *v));
            } else if self.arch.output == OutputActivation::Exponential {
                a.iter_mut().for_each(|v| *v = v.exp());
            }
            h = a;
        }
        Ok(h)
    }

    /// Evaluation on a batch of lanes (`d0 x n` in, `d_out x n` out) through a
    /// throwaway graph, so the arithmetic is identical to the training path.
    pub fn eval_batch(&self, input: Block) -> Result<Block, NetError> {
        let g = Graph::new();
        let net = self.bind_constant(&g);
        let x = g.constant(input);
        Ok(net.forward(x)?.value())
    }

    /// Register every layer as graph leaves.
    pub fn bind<'g>(&self, g: &'g Graph) -> BoundNet<'g> {
        self.bind_with(g, true)
    }

    /// Register the parameters as constants (no gradient).
    pub fn bind_constant<'g>(&self, g: &'g Graph) -> BoundNet<'g> {
        self.bind_with(g, false)
    }

    fn bind_with<'g>(&self, g: &'g Graph, leaves: bool) -> BoundNet<'g> {
        let mk = |b: Block| if leaves { g.leaf(b) } else { g.constant(b) };
        let layers = (0..self.arch.layers())
            .map(|i| {
                let (din, dout) = (self.arch.widths[i], self.arch.widths[i + 1]);
                let (b, w) = self.layer(i);
                let bias = mk(Block::column(b.to_vec()));
                let weight = mk(Block::new(dout, din, w.to_vec()));
                (bias, weight)
            })
            .collect();
        BoundNet {
            arch: self.arch.clone(),
            layers,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header = CheckpointHeader {
            arch: self.arch.clone(),
            len: self.theta.len(),
        };
        let line = serde_json::to_string(&header).map_err(|e| NetError::Checkpoint(e.to_string()))?;
        writeln!(f, "{}", line)?;
        for v in &self.theta {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: CheckpointHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| NetError::Checkpoint(format!("bad header: {}", e)))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != header.len * 8 {
            return Err(NetError::Checkpoint(format!(
                "expected {} values, found {} bytes",
                header.len,
                bytes.len()
            )));
        }
        let theta = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(header.arch, theta)
    }
}

/// Network parameters living in a graph.
#[derive(Clone)]
pub struct BoundNet<'g> {
    pub arch: Architecture,
    /// `(bias: o x 1, weight: o x i)` per layer.
    pub layers: Vec<(Var<'g>, Var<'g>)>,
}

/// Value and input derivatives of a network output, all as graph nodes.
pub struct Jet<'g> {
    pub value: Var<'g>,
    /// First derivative along each requested input coordinate.
    pub d1: Vec<Var<'g>>,
    /// Pure second derivative along each coordinate in `second`.
    pub d2: Vec<Var<'g>>,
}

impl<'g> BoundNet<'g> {
    /// Leaf ids in the flat parameter order.
    pub fn leaves(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(|(b, w)| [b.id(), w.id()]).collect()
    }

    /// Flatten per-leaf gradient blocks (as returned for [`Self::leaves`]).
    pub fn flatten(blocks: &[Block]) -> Vec<f64> {
        blocks.iter().flat_map(|b| b.as_slice().iter().copied()).collect()
    }

    /// `x` is `d0 x n`; returns `d_out x n`.
    pub fn forward(&self, x: Var<'g>) -> Result<Var<'g>, NetError> {
        let d0 = self.arch.input_dim();
        if x.shape().0 != d0 {
            return Err(NetError::DimensionMismatch {
                expected: d0,
                found: x.shape().0,
            });
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(b, w)) in self.layers.iter().enumerate() {
            let a = w.matmul(h) + b;
            h = if i < last {
                act_var(self.arch.hidden, a)
            } else if self.arch.output == OutputActivation::Exponential {
                a.exp()
            } else {
                a
            };
        }
        Ok(h)
    }

    /// Forward pass carrying derivatives with respect to input coordinates.
    ///
    /// `first` lists the coordinates whose first derivatives are wanted and
    /// `second` (a subset of `first`) those whose pure second derivatives are
    /// wanted. The derivatives are ordinary graph nodes, so they can be
    /// differentiated again with respect to the parameters.
    pub fn forward_jet(&self, x: Var<'g>, first: &[usize], second: &[usize]) -> Result<Jet<'g>, NetError> {
        let d0 = self.arch.input_dim();
        if x.shape().0 != d0 {
            return Err(NetError::DimensionMismatch {
                expected: d0,
                found: x.shape().0,
            });
        }
        let g = x.graph();
        let pos: Vec<usize> = second
            .iter()
            .map(|s| first.iter().position(|f| f == s).expect("second-order coordinate must also be first-order"))
            .collect();
        let last = self.layers.len() - 1;
        let mut h = x;
        // Derivative of `h` along each coordinate; None for zero.
        let mut dh: Vec<Option<Var<'g>>> = vec![None; first.len()];
        let mut ddh: Vec<Option<Var<'g>>> = vec![None; second.len()];
        for (i, &(b, w)) in self.layers.iter().enumerate() {
            let a = w.matmul(h) + b;
            let da: Vec<Var<'g>> = if i == 0 {
                first
                    .iter()
                    .map(|&c| {
                        let mut e = vec![0.0; d0];
                        e[c] = 1.0;
                        w.matmul(g.constant(Block::column(e)))
                    })
                    .collect()
            } else {
                dh.iter().map(|d| w.matmul(d.unwrap())).collect()
            };
            let dda: Vec<Option<Var<'g>>> = ddh.iter().map(|d| d.map(|d| w.matmul(d))).collect();
            let (out, s1, s2) = if i < last {
                let (v, s1, s2) = activation_jet(self.arch.hidden, a);
                (v, Some(s1), s2)
            } else if self.arch.output == OutputActivation::Exponential {
                let e = a.exp();
                (e, Some(e), Some(e))
            } else {
                (a, None, None)
            };
            let scale = |v: Var<'g>| match s1 {
                Some(s) => s * v,
                None => v,
            };
            let mut new_ddh = Vec::with_capacity(second.len());
            for (k, &p) in pos.iter().enumerate() {
                let q = da[p];
                let lin = dda[k].map(scale);
                let quad = s2.map(|s| s * q.square());
                new_ddh.push(match (lin, quad) {
                    (Some(l), Some(c)) => Some(l + c),
                    (Some(l), None) => Some(l),
                    (None, Some(c)) => Some(c),
                    (None, None) => None,
                });
            }
            dh = da.into_iter().map(|d| Some(scale(d))).collect();
            ddh = new_ddh;
            h = out;
        }
        let n = h.shape();
        let fill = |v: Var<'g>| {
            if v.shape() == n {
                v
            } else {
                v + g.constant(Block::zeros(n.0, n.1))
            }
        };
        Ok(Jet {
            value: h,
            d1: dh.into_iter().map(|d| fill(d.unwrap())).collect(),
            d2: ddh
                .into_iter()
                .map(|d| fill(d.unwrap_or_else(|| g.constant(Block::zeros(n.0, n.1)))))
                .collect(),
        })
    }
}

/// Activation value with its first and (if nonzero) second derivative.
fn activation_jet(a: Activation, x: Var<'_>) -> (Var<'_>, Var<'_>, Option<Var<'_>>) {
    match a {
        Activation::Tanh => {
            let s = x.tanh();
            let d1 = 1.0 - s.square();
            let d2 = s * d1 * -2.0;
            (s, d1, Some(d2))
        }
        Activation::Sigmoid => {
            let s = x.sigmoid();
            let d1 = s * (1.0 - s);
            let d2 = d1 * (1.0 - s * 2.0);
            (s, d1, Some(d2))
        }
        Activation::Relu => (x.relu(), x.step(), None),
    }
}
