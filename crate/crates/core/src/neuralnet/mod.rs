//! Dense layers, multilayer perceptrons, Adam, and the checkpoint container.

mod adam;
mod checkpoint;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::Checkpoint;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ndgrad::{DiffArray, GradError, Gradients, Matrix, Tape};

/// Negative-side slope of every leaky-relu in the crate.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("an MLP needs at least an input and an output width, got {0:?}")]
    BadDims(Vec<usize>),
    #[error("activation plan has {got} entries for {layers} layers")]
    BadPlan { layers: usize, got: usize },
    #[error("no gradient supplied for parameter {0}")]
    MissingGradient(String),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("parameter {name}: expected shape {expected:?}, got {got:?}")]
    ParamShape {
        name: String,
        expected: [usize; 2],
        got: [usize; 2],
    },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Linear,
    Sigmoid,
    Softplus,
}

impl Activation {
    pub fn apply(self, x: &DiffArray) -> Result<DiffArray, GradError> {
        match self {
            Activation::LeakyRelu => x.leaky_relu(LEAKY_SLOPE),
            Activation::Linear => Ok(x.clone()),
            Activation::Sigmoid => x.sigmoid(),
            Activation::Softplus => x.softplus(),
        }
    }
}

/// Named parameter tensors that an optimizer can read and replace.
pub trait Parameters {
    fn parameters(&self) -> Vec<(String, Matrix)>;
    fn set_parameter(&mut self, name: &str, value: Matrix) -> Result<(), NetError>;
}

pub type GradMap = BTreeMap<String, Matrix>;

/// `y = act(x W + b)` with `W` of shape `in × out` and `b` of shape `1 × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Matrix,
    pub activation: Activation,
}

impl DenseLayer {
    /// He-scaled uniform weights (variance `2 / fan_in`), zero bias.
    pub fn init(fan_in: usize, fan_out: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let scale = (2.0 / fan_in as f64).sqrt() * 3f64.sqrt();
        let weight = Matrix::from_fn([fan_in, fan_out], |_, _| rng.random_range(-scale..scale));
        Self {
            weight,
            bias: Matrix::zeros([1, fan_out]),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &DiffArray) -> Result<DiffArray, GradError> {
        BoundLayer::constant(self).forward(x)
    }

    pub(crate) fn set(&mut self, field: &str, name: &str, value: Matrix) -> Result<(), NetError> {
        let slot = match field {
            "weight" => &mut self.weight,
            "bias" => &mut self.bias,
            _ => return Err(NetError::UnknownParameter(name.to_string())),
        };
        if slot.shape() != value.shape() {
            return Err(NetError::ParamShape {
                name: name.to_string(),
                expected: slot.shape(),
                got: value.shape(),
            });
        }
        *slot = value;
        Ok(())
    }
}

/// A layer whose parameters are either tape leaves or constants.
#[derive(Clone)]
pub struct BoundLayer {
    pub weight: DiffArray,
    pub bias: DiffArray,
    pub activation: Activation,
}

impl BoundLayer {
    pub fn constant(layer: &DenseLayer) -> Self {
        Self {
            weight: DiffArray::constant(layer.weight.clone()),
            bias: DiffArray::constant(layer.bias.clone()),
            activation: layer.activation,
        }
    }

    pub fn on_tape(layer: &DenseLayer, tape: &Tape) -> Self {
        Self {
            weight: tape.var(&layer.weight),
            bias: tape.var(&layer.bias),
            activation: layer.activation,
        }
    }

    pub fn forward(&self, x: &DiffArray) -> Result<DiffArray, GradError> {
        let pre = x.matmul(&self.weight)?.add(&self.bias)?;
        self.activation.apply(&pre)
    }
}

/// Stack of dense layers with parameters named `"{index}.weight"` and
/// `"{index}.bias"`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

impl Mlp {
    /// Initializes an MLP deterministically from `seed`.
    pub fn init_params(dims: &[usize], plan: &[Activation], seed: u64) -> Result<Self, NetError> {
        Self::init(dims, plan, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn init(dims: &[usize], plan: &[Activation], rng: &mut impl Rng) -> Result<Self, NetError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(NetError::BadDims(dims.to_vec()));
        }
        if plan.len() != dims.len() - 1 {
            return Err(NetError::BadPlan {
                layers: dims.len() - 1,
                got: plan.len(),
            });
        }
        let layers = dims
            .windows(2)
            .zip(plan)
            .map(|(w, &act)| DenseLayer::init(w[0], w[1], act, rng))
            .collect();
        Ok(Self { layers })
    }

    /// Builds an MLP from explicit layers, checking that widths chain.
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self, NetError> {
        if layers.is_empty() {
            return Err(NetError::BadDims(Vec::new()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.shape() != [1, l.out_dim()] {
                return Err(NetError::ParamShape {
                    name: format!("{i}.bias"),
                    expected: [1, l.out_dim()],
                    got: l.bias.shape(),
                });
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(NetError::ParamShape {
                    name: format!("{}.weight", i + 1),
                    expected: [pair[0].out_dim(), pair[1].out_dim()],
                    got: pair[1].weight.shape(),
                });
            }
        }
        Ok(Self { layers })
    }

    /// Hidden layers use leaky-relu, the last layer uses `output`.
    pub fn hidden_plan(layers: usize, output: Activation) -> Vec<Activation> {
        let mut plan = vec![Activation::LeakyRelu; layers.saturating_sub(1)];
        plan.push(output);
        plan
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].in_dim()];
        dims.extend(self.layers.iter().map(DenseLayer::out_dim));
        dims
    }

    pub fn plan(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Evaluates with parameters held constant.
    pub fn forward(&self, x: &DiffArray) -> Result<DiffArray, GradError> {
        self.bind_constant().forward(x)
    }

    pub fn bind(&self, tape: &Tape) -> BoundMlp {
        BoundMlp {
            layers: self.layers.iter().map(|l| BoundLayer::on_tape(l, tape)).collect(),
        }
    }

    pub fn bind_constant(&self) -> BoundMlp {
        BoundMlp {
            layers: self.layers.iter().map(BoundLayer::constant).collect(),
        }
    }
}

impl Parameters for Mlp {
    fn parameters(&self) -> Vec<(String, Matrix)> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{i}.weight"), l.weight.clone()));
            out.push((format!("{i}.bias"), l.bias.clone()));
        }
        out
    }

    fn set_parameter(&mut self, name: &str, value: Matrix) -> Result<(), NetError> {
        let unknown = || NetError::UnknownParameter(name.to_string());
        let (idx, field) = name.split_once('.').ok_or_else(unknown)?;
        let idx: usize = idx.parse().map_err(|_| unknown())?;
        self.layers.get_mut(idx).ok_or_else(unknown)?.set(field, name, value)
    }
}

/// An [`Mlp`] with parameters bound either to a tape or as constants.
#[derive(Clone)]
pub struct BoundMlp {
    layers: Vec<BoundLayer>,
}

impl BoundMlp {
    pub fn forward(&self, x: &DiffArray) -> Result<DiffArray, GradError> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(&h)?;
        }
        Ok(h)
    }

    /// Bound parameters, named as in [`Mlp`]'s [`Parameters`] impl.
    pub fn leaves(&self) -> Vec<(String, DiffArray)> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{i}.weight"), l.weight.clone()));
            out.push((format!("{i}.bias"), l.bias.clone()));
        }
        out
    }

    /// Collects this network's gradients under `prefix`.
    pub fn collect_grads(&self, grads: &Gradients, prefix: &str, into: &mut GradMap) {
        for (name, leaf) in self.leaves() {
            into.insert(format!("{prefix}{name}"), grads.get(&leaf));
        }
    }
}
