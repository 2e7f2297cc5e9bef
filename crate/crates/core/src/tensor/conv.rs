//! Square local-window convolution over channel-last images.
//!
//! Images are flattened as `(y * side + x) * channels + c`, so the output of
//! one convolution is directly the channel-last input of the next.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{quick_hash, Activation, Matrix, Parameters};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_side: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Shape `(in_channels * kernel * kernel, out_channels)`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct ConvTape {
    weights_hash: u64,
    batch: usize,
    patches: Matrix,
    output: Matrix,
}

impl Conv2d {
    pub fn init<R: Rng + ?Sized>(
        in_side: usize,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let conv = Self {
            in_side,
            in_channels,
            out_channels,
            kernel,
            stride,
            weight: Matrix::glorot(in_channels * kernel * kernel, out_channels, rng),
            bias: vec![0.0; out_channels],
            activation,
        };
        conv.validate()?;
        Ok(conv)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.kernel > self.in_side {
            return Err(Error::Config(format!(
                "convolution kernel {} / stride {} invalid for side {}",
                self.kernel, self.stride, self.in_side
            )));
        }
        if !(self.in_side - self.kernel).is_multiple_of(self.stride) {
            return Err(Error::Config(format!(
                "side {} not tiled by kernel {} with stride {}",
                self.in_side, self.kernel, self.stride
            )));
        }
        let fan = self.in_channels * self.kernel * self.kernel;
        if (self.weight.rows(), self.weight.cols()) != (fan, self.out_channels) {
            return Err(Error::shape(
                "convolution weight",
                format!("{fan}x{}", self.out_channels),
                format!("{}x{}", self.weight.rows(), self.weight.cols()),
            ));
        }
        if self.bias.len() != self.out_channels {
            return Err(Error::shape("convolution bias", self.out_channels, self.bias.len()));
        }
        Ok(())
    }

    pub fn out_side(&self) -> usize {
        (self.in_side - self.kernel) / self.stride + 1
    }

    pub fn input_len(&self) -> usize {
        self.in_side * self.in_side * self.in_channels
    }

    pub fn output_len(&self) -> usize {
        self.out_side() * self.out_side() * self.out_channels
    }

    fn im2col(&self, x: &Matrix) -> Matrix {
        let (os, k, c, s) = (self.out_side(), self.kernel, self.in_channels, self.stride);
        let positions = os * os;
        let mut patches = Matrix::zeros(x.rows() * positions, c * k * k);
        for b in 0..x.rows() {
            let img = x.row(b);
            for oy in 0..os {
                for ox in 0..os {
                    let row = patches.row_mut(b * positions + oy * os + ox);
                    let mut col = 0;
                    for ky in 0..k {
                        let base = ((oy * s + ky) * self.in_side + ox * s) * c;
                        row[col..col + k * c].copy_from_slice(&img[base..base + k * c]);
                        col += k * c;
                    }
                }
            }
        }
        patches
    }

    fn col2im(&self, dpatches: &Matrix, batch: usize) -> Matrix {
        let (os, k, c, s) = (self.out_side(), self.kernel, self.in_channels, self.stride);
        let positions = os * os;
        let mut dx = Matrix::zeros(batch, self.input_len());
        for b in 0..batch {
            let img = dx.row_mut(b);
            for oy in 0..os {
                for ox in 0..os {
                    let row = dpatches.row(b * positions + oy * os + ox);
                    let mut col = 0;
                    for ky in 0..k {
                        let base = ((oy * s + ky) * self.in_side + ox * s) * c;
                        for (d, g) in img[base..base + k * c].iter_mut().zip(&row[col..col + k * c]) {
                            *d += g;
                        }
                        col += k * c;
                    }
                }
            }
        }
        dx
    }

    pub fn forward_batch(&self, x: &Matrix) -> Result<(Matrix, ConvTape)> {
        if x.cols() != self.input_len() {
            return Err(Error::shape("convolution input", self.input_len(), x.cols()));
        }
        let patches = self.im2col(x);
        let mut z = patches.matmul(&self.weight)?;
        z.add_row_vector(&self.bias);
        if self.activation != Activation::Identity {
            z.data_mut()
                .iter_mut()
                .for_each(|v| *v = self.activation.apply(*v));
        }
        let batch = x.rows();
        let output = Matrix::from_vec(batch, self.output_len(), z.into_data())?;
        Ok((
            output.clone(),
            ConvTape {
                weights_hash: quick_hash(&self.slices()),
                batch,
                patches,
                output,
            },
        ))
    }

    /// Parameter gradients and, when `need_input_grad`, the input gradient.
    pub fn backward_batch(
        &self,
        tape: &ConvTape,
        output_grad: &Matrix,
        need_input_grad: bool,
    ) -> Result<(Conv2d, Option<Matrix>)> {
        if tape.weights_hash != quick_hash(&self.slices()) {
            return Err(Error::Contract(
                "convolution tape was recorded against different weights".into(),
            ));
        }
        if (output_grad.rows(), output_grad.cols()) != (tape.batch, self.output_len()) {
            return Err(Error::shape(
                "convolution output gradient",
                format!("{}x{}", tape.batch, self.output_len()),
                format!("{}x{}", output_grad.rows(), output_grad.cols()),
            ));
        }
        let mut dz = output_grad.clone();
        if self.activation != Activation::Identity {
            for (d, &y) in dz.data_mut().iter_mut().zip(tape.output.data()) {
                *d *= self.activation.derivative_from_output(y);
            }
        }
        let positions = self.out_side() * self.out_side();
        let dz = Matrix::from_vec(tape.batch * positions, self.out_channels, dz.into_data())?;
        let mut grads = self.clone();
        grads.weight = tape.patches.t_matmul(&dz)?;
        grads.bias = dz.column_sums();
        let dx = if need_input_grad {
            let dpatches = dz.matmul_t(&self.weight)?;
            Some(self.col2im(&dpatches, tape.batch))
        } else {
            None
        };
        Ok((grads, dx))
    }
}

impl Parameters for Conv2d {
    fn slices(&self) -> Vec<&[f64]> {
        vec![self.weight.data(), &self.bias]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weight.data_mut(), &mut self.bias]
    }

    fn names(&self) -> Vec<String> {
        vec!["weight".into(), "bias".into()]
    }
}
