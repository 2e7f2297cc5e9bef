use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Embedding, EmbeddingRole};
use crate::cohort::{BiomarkerVector, CohortSample, Modality, SyntheticScan, NUM_OCT, SCAN_SIDE};
use crate::error::{Error, Result};
use crate::tensor::{prefixed, Activation, Conv2d, ConvTape, Matrix, Mlp, MlpTape, Parameters};

/// Per-feature z-scoring with statistics from a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &Matrix) -> Result<Self> {
        if rows.rows() < 2 {
            return Err(Error::Degenerate("standardization needs at least 2 rows".into()));
        }
        let n = rows.rows() as f64;
        let mean: Vec<f64> = rows.column_sums().iter().map(|s| s / n).collect();
        let mut var = vec![0.0; rows.cols()];
        for r in 0..rows.rows() {
            for (c, v) in rows.row(r).iter().enumerate() {
                var[c] += (v - mean[c]).powi(2);
            }
        }
        let sd = var
            .iter()
            .map(|v| (v / (n - 1.0)).sqrt().max(1e-12))
            .collect();
        Ok(Self { mean, sd })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            sd: vec![1.0; dim],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.sd))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn apply_rows(&self, rows: &Matrix) -> Matrix {
        let mut out = rows.clone();
        for r in 0..out.rows() {
            let z = self.apply(rows.row(r));
            out.row_mut(r).copy_from_slice(&z);
        }
        out
    }
}

/// The biomarker slice a tabular encoder reads.
pub fn tabular_slice(b: &BiomarkerVector, modality: Modality) -> &[f64] {
    match modality {
        Modality::Oct => b.oct(),
        Modality::Cfp => b.cfp(),
    }
}

pub fn tabular_dim(modality: Modality) -> usize {
    match modality {
        Modality::Oct => NUM_OCT,
        Modality::Cfp => crate::cohort::NUM_CFP,
    }
}

fn image_role(m: Modality) -> EmbeddingRole {
    match m {
        Modality::Oct => EmbeddingRole::ZOct,
        Modality::Cfp => EmbeddingRole::ZCfp,
    }
}

/// Pixel value that maps to zero input; pixels are shifted by it before the
/// first convolution.
pub const PIXEL_CENTER: f64 = 0.5;

/// Two strided convolutions followed by an MLP head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoder {
    pub modality: Modality,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub head: Mlp,
}

#[derive(Debug, Clone)]
pub struct ImageTape {
    conv1: ConvTape,
    conv2: ConvTape,
    head: MlpTape,
}

impl ImageEncoder {
    pub fn init<R: Rng + ?Sized>(modality: Modality, embed_dim: usize, rng: &mut R) -> Result<Self> {
        let conv1 = Conv2d::init(SCAN_SIDE, 1, 8, 4, 4, Activation::Tanh, rng)?;
        let conv2 = Conv2d::init(conv1.out_side(), 8, 16, 2, 2, Activation::Tanh, rng)?;
        let head = Mlp::init(&[conv2.output_len(), 64, embed_dim], Activation::Tanh, rng);
        Ok(Self {
            modality,
            conv1,
            conv2,
            head,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.head.output_dim()
    }

    /// One row of centred pixels per scan.
    pub fn pixel_matrix<'a>(&self, scans: impl IntoIterator<Item = &'a SyntheticScan>) -> Result<Matrix> {
        let mut data = Vec::new();
        let mut rows = 0;
        for s in scans {
            if s.modality != self.modality {
                return Err(Error::Contract(format!(
                    "{:?} encoder given a {:?} scan",
                    self.modality, s.modality
                )));
            }
            if s.pixels.len() != self.conv1.input_len() {
                return Err(Error::shape("scan pixels", self.conv1.input_len(), s.pixels.len()));
            }
            data.extend(s.pixels.iter().map(|&p| f64::from(p) - PIXEL_CENTER));
            rows += 1;
        }
        Matrix::from_vec(rows, self.conv1.input_len(), data)
    }

    pub fn sample_pixels(&self, samples: &[CohortSample]) -> Result<Matrix> {
        self.pixel_matrix(samples.iter().map(|s| match self.modality {
            Modality::Oct => &s.oct,
            Modality::Cfp => &s.cfp,
        }))
    }

    pub fn forward_batch(&self, pixels: &Matrix) -> Result<(Matrix, ImageTape)> {
        let (h1, conv1) = self.conv1.forward_batch(pixels)?;
        let (h2, conv2) = self.conv2.forward_batch(&h1)?;
        let (out, head) = self.head.forward_batch(&h2)?;
        Ok((out, ImageTape { conv1, conv2, head }))
    }

    pub fn apply_batch(&self, pixels: &Matrix) -> Result<Matrix> {
        Ok(self.forward_batch(pixels)?.0)
    }

    /// Parameter gradients for `output_grad` (summed over the batch).
    pub fn backward_batch(&self, tape: &ImageTape, output_grad: &Matrix) -> Result<ImageEncoder> {
        let (head, d2) = self.head.backward_batch(&tape.head, output_grad)?;
        let (conv2, d1) = self.conv2.backward_batch(&tape.conv2, &d2, true)?;
        let d1 = d1.expect("input gradient requested");
        let (conv1, _) = self.conv1.backward_batch(&tape.conv1, &d1, false)?;
        Ok(ImageEncoder {
            modality: self.modality,
            conv1,
            conv2,
            head,
        })
    }

    pub fn encode(&self, scan: &SyntheticScan) -> Result<Embedding> {
        let x = self.pixel_matrix([scan])?;
        let out = self.apply_batch(&x)?;
        Embedding::new(image_role(self.modality), out.into_data())
    }
}

impl Parameters for ImageEncoder {
    fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.conv1.slices();
        v.extend(self.conv2.slices());
        v.extend(self.head.slices());
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.conv1.slices_mut();
        v.extend(self.conv2.slices_mut());
        v.extend(self.head.slices_mut());
        v
    }

    fn names(&self) -> Vec<String> {
        let mut v = prefixed("conv1", self.conv1.names());
        v.extend(prefixed("conv2", self.conv2.names()));
        v.extend(prefixed("head", self.head.names()));
        v
    }
}

/// MLP over standardized biomarkers of one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularEncoder {
    pub modality: Modality,
    pub standardizer: Standardizer,
    pub mlp: Mlp,
}

impl TabularEncoder {
    pub fn init<R: Rng + ?Sized>(
        modality: Modality,
        standardizer: Standardizer,
        embed_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let dim = tabular_dim(modality);
        if standardizer.mean.len() != dim || standardizer.sd.len() != dim {
            return Err(Error::shape("standardizer", dim, standardizer.mean.len()));
        }
        Ok(Self {
            modality,
            standardizer,
            mlp: Mlp::init(&[dim, 64, embed_dim], Activation::Tanh, rng),
        })
    }

    pub fn raw_matrix(modality: Modality, biomarkers: &[&BiomarkerVector]) -> Result<Matrix> {
        let dim = tabular_dim(modality);
        let data: Vec<f64> = biomarkers
            .iter()
            .flat_map(|b| tabular_slice(b, modality).iter().copied())
            .collect();
        Matrix::from_vec(biomarkers.len(), dim, data)
    }

    /// Standardized inputs, one row per sample.
    pub fn feature_matrix(&self, samples: &[CohortSample]) -> Result<Matrix> {
        let refs: Vec<&BiomarkerVector> = samples.iter().map(|s| &s.biomarkers).collect();
        Ok(self.standardizer.apply_rows(&Self::raw_matrix(self.modality, &refs)?))
    }

    pub fn encode(&self, b: &BiomarkerVector) -> Result<Embedding> {
        b.validate()?;
        let z = self.standardizer.apply(tabular_slice(b, self.modality));
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("standardized biomarkers are not finite".into()));
        }
        let (out, _) = self.mlp.forward(&z)?;
        Embedding::new(EmbeddingRole::ZTab, out)
    }
}

impl Parameters for TabularEncoder {
    fn slices(&self) -> Vec<&[f64]> {
        self.mlp.slices()
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.mlp.slices_mut()
    }

    fn names(&self) -> Vec<String> {
        prefixed("mlp", self.mlp.names())
    }
}
