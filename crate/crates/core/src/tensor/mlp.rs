//! Multilayer perceptron with an explicit activation tape.
//!
//! Each layer computes `y = act(x · W + b)` with `W` stored as
//! `(in_dim, out_dim)`, so a batch is a row-major matrix of inputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{quick_hash, Matrix, Parameters};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// Shape `(in_dim, out_dim)`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<DenseLayer>", into = "Vec<DenseLayer>")]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

impl TryFrom<Vec<DenseLayer>> for Mlp {
    type Error = Error;

    fn try_from(layers: Vec<DenseLayer>) -> Result<Self> {
        Mlp::new(layers)
    }
}

impl From<Mlp> for Vec<DenseLayer> {
    fn from(m: Mlp) -> Self {
        m.layers
    }
}

/// Activations recorded by a forward pass, sufficient for exact gradients.
#[derive(Debug, Clone)]
pub struct MlpTape {
    weights_hash: u64,
    /// Input to each layer, then the final output.
    activations: Vec<Matrix>,
}

impl MlpTape {
    pub fn output(&self) -> &Matrix {
        self.activations.last().expect("tape holds at least the input")
    }

    pub fn input(&self) -> &Matrix {
        &self.activations[0]
    }
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Contract("an MLP needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::shape(
                    format!("layer {i} bias"),
                    layer.out_dim(),
                    layer.bias.len(),
                ));
            }
            if !layer.bias.iter().all(|b| b.is_finite()) || !layer.weight.is_finite() {
                return Err(Error::Validation(format!("layer {i} has non-finite parameters")));
            }
            if i > 0 && layers[i - 1].out_dim() != layer.in_dim() {
                return Err(Error::shape(
                    format!("layer {i} input"),
                    layers[i - 1].out_dim(),
                    layer.in_dim(),
                ));
            }
        }
        if layers.last().map(|l| l.activation) != Some(Activation::Identity) {
            return Err(Error::Contract(
                "final MLP layer must use the identity activation".into(),
            ));
        }
        Ok(Self { layers })
    }

    /// Glorot-initialized network through `dims`, with `hidden` between layers
    /// and identity on the output. Biases start at zero.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], hidden: Activation, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "need input and output dims");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| DenseLayer {
                weight: Matrix::glorot(dims[i], dims[i + 1], rng),
                bias: vec![0.0; dims[i + 1]],
                activation: if i + 1 == n { Activation::Identity } else { hidden },
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    fn weights_hash(&self) -> u64 {
        quick_hash(&self.slices())
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, MlpTape)> {
        let x = Matrix::from_vec(1, input.len(), input.to_vec())?;
        let (y, tape) = self.forward_batch(&x)?;
        Ok((y.into_data(), tape))
    }

    /// Forward pass over a batch whose rows are samples.
    pub fn forward_batch(&self, x: &Matrix) -> Result<(Matrix, MlpTape)> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("mlp layer 0 input", self.input_dim(), x.cols()));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.clone());
        for layer in &self.layers {
            let prev = activations.last().expect("non-empty");
            let mut z = prev.matmul(&layer.weight)?;
            z.add_row_vector(&layer.bias);
            if layer.activation != Activation::Identity {
                z.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = layer.activation.apply(*v));
            }
            activations.push(z);
        }
        let out = activations.last().expect("non-empty").clone();
        Ok((
            out,
            MlpTape {
                weights_hash: self.weights_hash(),
                activations,
            },
        ))
    }

    /// Output without recording a tape.
    pub fn apply_batch(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("mlp layer 0 input", self.input_dim(), x.cols()));
        }
        let mut cur = x.clone();
        for layer in &self.layers {
            let mut z = cur.matmul(&layer.weight)?;
            z.add_row_vector(&layer.bias);
            if layer.activation != Activation::Identity {
                z.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = layer.activation.apply(*v));
            }
            cur = z;
        }
        Ok(cur)
    }

    pub fn backward(&self, tape: &MlpTape, output_grad: &[f64]) -> Result<(Mlp, Vec<f64>)> {
        let g = Matrix::from_vec(1, output_grad.len(), output_grad.to_vec())?;
        let (grads, dx) = self.backward_batch(tape, &g)?;
        Ok((grads, dx.into_data()))
    }

    /// Parameter gradients (summed over the batch) and per-row input gradients.
    pub fn backward_batch(&self, tape: &MlpTape, output_grad: &Matrix) -> Result<(Mlp, Matrix)> {
        if tape.activations.len() != self.layers.len() + 1 {
            return Err(Error::Contract(format!(
                "tape records {} layers, network has {}",
                tape.activations.len().saturating_sub(1),
                self.layers.len()
            )));
        }
        if tape.weights_hash != self.weights_hash() {
            return Err(Error::Contract(
                "tape was recorded against different weights".into(),
            ));
        }
        let out = tape.output();
        if (output_grad.rows(), output_grad.cols()) != (out.rows(), out.cols()) {
            return Err(Error::shape(
                "mlp output gradient",
                format!("{}x{}", out.rows(), out.cols()),
                format!("{}x{}", output_grad.rows(), output_grad.cols()),
            ));
        }
        let mut grads = self.zeros_like();
        let mut delta = output_grad.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let y = &tape.activations[i + 1];
            if layer.activation != Activation::Identity {
                for (d, &yv) in delta.data_mut().iter_mut().zip(y.data()) {
                    *d *= layer.activation.derivative_from_output(yv);
                }
            }
            let x = &tape.activations[i];
            grads.layers[i].weight = x.t_matmul(&delta)?;
            grads.layers[i].bias = delta.column_sums();
            delta = delta.matmul_t(&layer.weight)?;
        }
        Ok((grads, delta))
    }
}

impl Parameters for Mlp {
    fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.as_slice()])
            .collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }

    fn names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("layers.{i}.weight"), format!("layers.{i}.bias")])
            .collect()
    }
}
