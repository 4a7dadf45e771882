use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{Matrix, Tape, Var};

pub const MODEL_FORMAT: &str = "feddes-classifier";
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Hidden layer widths plus the activation between them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Architecture {
    pub fn mlp(hidden: &[usize], activation: Activation) -> Self {
        Self {
            hidden: hidden.to_vec(),
            activation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// A multilayer perceptron over the federation's full label set.
///
/// Temperatures are not stored here: each receiving client keeps its own
/// in its pool entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub format: String,
    pub version: u32,
    pub home_client: usize,
    pub local_index: usize,
    pub architecture: Architecture,
    pub n_features: usize,
    pub n_classes: usize,
    pub layers: Vec<DenseLayer>,
}

/// Glorot-uniform matrix.
pub(crate) fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Matrix::from_vec(rows, cols, data).expect("length matches shape")
}

impl ClassifierModel {
    pub fn init(
        architecture: &Architecture,
        n_features: usize,
        n_classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut widths = vec![n_features];
        widths.extend(&architecture.hidden);
        widths.push(n_classes);
        let layers = widths
            .windows(2)
            .map(|w| DenseLayer {
                weights: glorot(w[0], w[1], rng),
                bias: vec![0.0; w[1]],
            })
            .collect();
        Self {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            home_client: 0,
            local_index: 0,
            architecture: architecture.clone(),
            n_features,
            n_classes,
            layers,
        }
    }

    pub fn with_origin(mut self, home_client: usize, local_index: usize) -> Self {
        self.home_client = home_client;
        self.local_index = local_index;
        self
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data().len() + l.bias.len())
            .sum()
    }

    /// Raw class scores, one row per input row.
    pub fn logits(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.n_features {
            return Err(Error::Dimension {
                op: "classifier logits",
                left: features.shape(),
                right: (self.n_features, self.n_classes),
            });
        }
        let last = self.layers.len() - 1;
        let mut h = features.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.matmul(&layer.weights)?;
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            if i < last {
                z = match self.architecture.activation {
                    Activation::Relu => z.map(|v| v.max(0.0)),
                    Activation::Tanh => z.map(f64::tanh),
                };
            }
            h = z;
        }
        Ok(h)
    }

    /// `softmax(logits / temperature)` per row.
    pub fn predict_proba(&self, features: &Matrix, temperature: f64) -> Result<Matrix> {
        Ok(self.logits(features)?.scale(1.0 / temperature).softmax_rows())
    }

    pub fn predict(&self, features: &Matrix) -> Result<Vec<usize>> {
        Ok(self.logits(features)?.argmax_rows())
    }

    pub(crate) fn parameters(&self) -> Vec<Matrix> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.clone(), Matrix::row_vector(l.bias.clone())])
            .collect()
    }

    pub(crate) fn set_parameters(&mut self, params: &[Matrix]) {
        for (layer, pair) in self.layers.iter_mut().zip(params.chunks_exact(2)) {
            layer.weights = pair[0].clone();
            layer.bias = pair[1].data().to_vec();
        }
    }

    /// Records the forward pass on `tape` given parameter handles from [`Self::parameters`].
    pub(crate) fn forward_on_tape(&self, tape: &mut Tape, params: &[Var], input: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = input;
        for (i, pair) in params.chunks_exact(2).enumerate() {
            let z = tape.matmul(h, pair[0])?;
            let z = tape.add_row(z, pair[1])?;
            h = if i < last {
                match self.architecture.activation {
                    Activation::Relu => tape.relu(z),
                    Activation::Tanh => tape.tanh(z),
                }
            } else {
                z
            };
        }
        Ok(h)
    }

    /// Versioned JSON bytes; identical models give identical bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let model: ClassifierModel = serde_json::from_slice(bytes)?;
        if model.format != MODEL_FORMAT || model.version != MODEL_VERSION {
            return Err(Error::Validation(format!(
                "unsupported model encoding {} v{}",
                model.format, model.version
            )));
        }
        let mut width = model.n_features;
        for (i, layer) in model.layers.iter().enumerate() {
            if layer.weights.rows() != width || layer.bias.len() != layer.weights.cols() {
                return Err(Error::Validation(format!("layer {i} has inconsistent shape")));
            }
            width = layer.weights.cols();
        }
        if width != model.n_classes || model.layers.len() != model.architecture.hidden.len() + 1 {
            return Err(Error::Validation("model layers do not match architecture".into()));
        }
        Ok(model)
    }
}
