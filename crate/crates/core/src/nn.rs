//! Multilayer perceptrons over the autodiff graph, plus the Adam optimizer.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Tanh,
    Relu,
    Sigmoid,
}

/// Layer sizes and activations of one MLP. `dims` runs input first:
/// [d_in, h1, ..., d_out].
#[derive(Debug, Clone)]
pub struct MlpSpec {
    pub dims: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
    pub bias: bool,
}

impl MlpSpec {
    pub fn new(dims: Vec<usize>) -> Self {
        Self {
            dims,
            hidden: Activation::Tanh,
            output: Activation::Linear,
            bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn layer_count(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for l in 0..self.layer_count() {
            n += self.dims[l] * self.dims[l + 1];
            if self.bias {
                n += self.dims[l + 1];
            }
        }
        n
    }
}

/// Glorot uniform matrix of shape (rows, cols), limit sqrt(6/(rows+cols)).
pub fn glorot(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.uniform(-limit, limit))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("finite init")
}

/// Concrete MLP parameters. Weight l has shape (dims[l+1], dims[l]) so a
/// batch forward is X W' + b.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl Mlp {
    pub fn init(spec: MlpSpec, rng: &mut Rng) -> Result<Self> {
        if spec.dims.len() < 2 {
            return Err(Error::Config(format!(
                "mlp needs at least input and output dims, got {:?}",
                spec.dims
            )));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..spec.layer_count() {
            weights.push(glorot(rng, spec.dims[l + 1], spec.dims[l]));
            if spec.bias {
                biases.push(Tensor::zeros(&[spec.dims[l + 1]]));
            }
        }
        Ok(Self {
            spec,
            weights,
            biases,
        })
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }
}

/// Graph-side handle to one installed MLP: leaf ids for each parameter.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub spec: MlpSpec,
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

/// Create bound parameter leaves for the MLP. Leaf names are
/// "<prefix>.w<l>" and "<prefix>.b<l>".
pub fn install_mlp(g: &mut Graph, prefix: &str, mlp: &Mlp) -> MlpVars {
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for (l, w) in mlp.weights.iter().enumerate() {
        weights.push(g.constant(&format!("{prefix}.w{l}"), w.clone()));
    }
    for (l, b) in mlp.biases.iter().enumerate() {
        biases.push(g.constant(&format!("{prefix}.b{l}"), b.clone()));
    }
    MlpVars {
        spec: mlp.spec.clone(),
        weights,
        biases,
    }
}

fn activate(g: &mut Graph, act: Activation, x: NodeId) -> NodeId {
    match act {
        Activation::Linear => x,
        Activation::Tanh => g.tanh(x),
        Activation::Relu => g.relu(x),
        Activation::Sigmoid => g.sigmoid(x),
    }
}

/// Append the MLP's forward computation for a [n, d_in] input node.
pub fn forward_mlp(g: &mut Graph, vars: &MlpVars, x: NodeId) -> Result<NodeId> {
    let layers = vars.spec.layer_count();
    let mut h = x;
    for l in 0..layers {
        let wt = g.transpose(vars.weights[l])?;
        h = g.matmul(h, wt)?;
        if vars.spec.bias {
            h = g.add_row_broadcast(h, vars.biases[l])?;
        }
        let act = if l + 1 == layers {
            vars.spec.output
        } else {
            vars.spec.hidden
        };
        h = activate(g, act, h);
    }
    Ok(h)
}

/// Adam with optional L2 term folded into the gradient before the moment
/// updates: g' = g + weight_decay * theta.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64, shapes: &[Vec<usize>]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Arity(format!(
                "adam: {} slots, {} params, {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = if self.weight_decay > 0.0 {
                grads[i].zip(&params[i], |gv, pv| gv + self.weight_decay * pv)?
            } else {
                grads[i].clone()
            };
            self.m[i] = self.m[i].zip(&g, |mv, gv| self.beta1 * mv + (1.0 - self.beta1) * gv)?;
            self.v[i] =
                self.v[i].zip(&g, |vv, gv| self.beta2 * vv + (1.0 - self.beta2) * gv * gv)?;
            let mhat = self.m[i].scale(1.0 / bc1);
            let vhat = self.v[i].scale(1.0 / bc2);
            let update = mhat.zip(&vhat, |mv, vv| self.lr * mv / (vv.sqrt() + self.eps))?;
            params[i] = params[i].sub(&update)?;
        }
        Ok(())
    }
}
