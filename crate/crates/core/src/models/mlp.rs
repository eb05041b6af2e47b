use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Hidden-layer nonlinearity; the output layer is always linear.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Softplus,
}

impl Activation {
    fn apply(self, m: &Matrix) -> Matrix {
        match self {
            Activation::Tanh => m.map(f64::tanh),
            Activation::Relu => m.map(|v| if v > 0.0 { v } else { 0.0 }),
            Activation::Softplus => m.map(|v| v.max(0.0) + (-v.abs()).exp().ln_1p()),
        }
    }

    fn record(self, g: &mut Graph, v: Var) -> Var {
        match self {
            Activation::Tanh => g.tanh(v),
            Activation::Relu => g.relu(v),
            Activation::Softplus => g.softplus(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `fan_in x fan_out`.
    pub weight: Matrix,
    /// `1 x fan_out`.
    pub bias: Matrix,
}

/// Fully connected network `[D, h1, …, K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    dims: Vec<usize>,
    activation: Activation,
    layers: Vec<Layer>,
}

/// Output of a forward pass over a batch (one sample per row).
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logits: Matrix,
    /// Last hidden activation; the input itself for a model without hidden layers.
    pub features: Matrix,
}

/// Graph nodes produced by [`MlpModel::record`].
#[derive(Clone, Copy, Debug)]
pub struct RecordedForward {
    pub logits: Var,
    pub features: Var,
}

impl MlpModel {
    /// Weights and biases uniform in `±1/√fan_in`, drawn from `seed`.
    pub fn new(dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(dims, activation, |fan_in| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            rng.random_range(-bound..=bound)
        })
    }

    pub fn zeros(dims: &[usize], activation: Activation) -> Result<Self> {
        Self::build(dims, activation, |_| 0.0)
    }

    /// The default desk-scale classifier `D–64–32–K` with tanh hidden layers.
    pub fn classifier(input_dim: usize, classes: usize, seed: u64) -> Result<Self> {
        Self::new(&[input_dim, 64, 32, classes], Activation::Tanh, seed)
    }

    fn build(dims: &[usize], activation: Activation, mut draw: impl FnMut(usize) -> f64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Validation(format!("invalid layer dims {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weight = Matrix::from_vec(fan_in, fan_out, (0..fan_in * fan_out).map(|_| draw(fan_in)).collect())
                    .expect("sized above");
                let bias = Matrix::from_vec(1, fan_out, (0..fan_out).map(|_| draw(fan_in)).collect())
                    .expect("sized above");
                Layer { weight, bias }
            })
            .collect();
        Ok(MlpModel { dims: dims.to_vec(), activation, layers })
    }

    pub fn from_layers(activation: Activation, layers: Vec<Layer>) -> Result<Self> {
        let mut dims = Vec::with_capacity(layers.len() + 1);
        for (i, l) in layers.iter().enumerate() {
            if l.bias.shape() != (1, l.weight.cols()) {
                return Err(Error::Shape(format!("layer {i}: bias shape {:?}", l.bias.shape())));
            }
            if let Some(&prev) = dims.last() {
                if prev != l.weight.rows() {
                    return Err(Error::Shape(format!("layer {i}: expects {} inputs, previous gives {prev}", l.weight.rows())));
                }
            } else {
                dims.push(l.weight.rows());
            }
            dims.push(l.weight.cols());
        }
        if layers.is_empty() {
            return Err(Error::Validation("model needs at least one layer".into()));
        }
        Ok(MlpModel { dims, activation, layers })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Width of [`ForwardOutput::features`].
    pub fn feature_dim(&self) -> usize {
        self.dims[self.dims.len() - 2]
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Parameters in order `W0, b0, W1, b1, …`.
    pub fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.params().iter().map(|p| p.shape()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.as_slice().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!("{} values for {} parameters", flat.len(), self.param_count())));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape(format!("input width {} but model expects {}", x.cols(), self.input_dim())));
        }
        if !x.is_finite() {
            return Err(Error::Numeric("non-finite model input".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardOutput> {
        self.check_input(x)?;
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let z = h.matmul(&l.weight).add_row(&l.bias);
            if i == last {
                return Ok(ForwardOutput { logits: z, features: h });
            }
            h = self.activation.apply(&z);
        }
        unreachable!("model has at least one layer")
    }

    /// Adds every parameter to `g` as a differentiable input.
    pub fn param_inputs(&self, g: &mut Graph) -> Vec<Var> {
        self.params().into_iter().map(|p| g.input(p.clone())).collect()
    }

    /// Adds every parameter to `g` as a constant.
    pub fn param_constants(&self, g: &mut Graph) -> Vec<Var> {
        self.params().into_iter().map(|p| g.constant(p.clone())).collect()
    }

    /// Records the forward pass on `x` using parameter nodes `params`
    /// (from [`Self::param_inputs`] or [`Self::param_constants`]).
    pub fn record(&self, g: &mut Graph, x: Var, params: &[Var]) -> Result<RecordedForward> {
        if params.len() != 2 * self.layers.len() {
            return Err(Error::Shape(format!("{} parameter nodes for {} layers", params.len(), self.layers.len())));
        }
        if g.shape(x).1 != self.input_dim() {
            return Err(Error::Shape(format!("input width {} but model expects {}", g.shape(x).1, self.input_dim())));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for i in 0..self.layers.len() {
            let z = g.affine(h, params[2 * i], params[2 * i + 1]);
            if i == last {
                return Ok(RecordedForward { logits: z, features: h });
            }
            h = self.activation.record(g, z);
        }
        unreachable!("model has at least one layer")
    }

    /// Index of the largest logit per row, ties to the lowest index.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let out = self.forward(x)?;
        Ok((0..out.logits.rows()).map(|r| argmax(out.logits.row(r))).collect())
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
