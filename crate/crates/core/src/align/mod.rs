//! Contrastive image/biomarker alignment, retrieval and linear probing.

mod encoder;
mod loss;
mod probe;

pub use encoder::{
    tabular_dim, tabular_slice, ImageEncoder, ImageTape, Standardizer, TabularEncoder, PIXEL_CENTER,
};
pub use loss::{cosine_matrix, info_nce_i2t, total_contrastive_loss, ContrastiveLoss};
pub use probe::{linear_probe_regression, ridge_fit, ProbeMetrics, ProbeReport, RidgeModel};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cohort::{CohortSample, Modality};
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::tensor::{prefixed, AdamW, Matrix, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingRole {
    ZOct,
    ZCfp,
    ZTab,
    ZOctProjected,
    HOct,
    HCfp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    role: EmbeddingRole,
    values: Vec<f64>,
}

impl Embedding {
    pub fn new(role: EmbeddingRole, values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("{role:?} embedding is not finite")));
        }
        Ok(Self { role, values })
    }

    pub fn role(&self) -> EmbeddingRole {
        self.role
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub temperature: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub embed_dim: usize,
    pub include_positive_in_denominator: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            batch_size: 64,
            epochs: 50,
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            embed_dim: 32,
            include_positive_in_denominator: false,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("align temperature must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("align batch_size must be at least 2".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("align epochs must be at least 1".into()));
        }
        if self.embed_dim < 1 || !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("align embed_dim, learning_rate or weight_decay invalid".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss_i2t: f64,
    pub loss_t2i: f64,
    pub total: f64,
}

/// A trained image/tabular encoder pair for one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedEncoders {
    pub image: ImageEncoder,
    pub tabular: TabularEncoder,
}

impl AlignedEncoders {
    /// Fresh encoders; the tabular standardizer is fitted on `train`.
    pub fn init(train: &[CohortSample], modality: Modality, embed_dim: usize, seed: u64) -> Result<Self> {
        let refs: Vec<_> = train.iter().map(|s| &s.biomarkers).collect();
        let standardizer = Standardizer::fit(&TabularEncoder::raw_matrix(modality, &refs)?)?;
        let image = ImageEncoder::init(modality, embed_dim, &mut stream_rng(seed, "align-image-init", 0))?;
        let tabular = TabularEncoder::init(
            modality,
            standardizer,
            embed_dim,
            &mut stream_rng(seed, "align-tab-init", 0),
        )?;
        Ok(Self { image, tabular })
    }

    pub fn modality(&self) -> Modality {
        self.image.modality
    }

    /// Image and tabular embeddings for every sample, one row each.
    pub fn embed(&self, samples: &[CohortSample]) -> Result<(Matrix, Matrix)> {
        let img = self.image.apply_batch(&self.image.sample_pixels(samples)?)?;
        let tab = self.tabular.mlp.apply_batch(&self.tabular.feature_matrix(samples)?)?;
        Ok((img, tab))
    }
}

impl Parameters for AlignedEncoders {
    fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.image.slices();
        v.extend(self.tabular.slices());
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.image.slices_mut();
        v.extend(self.tabular.slices_mut());
        v
    }

    fn names(&self) -> Vec<String> {
        let mut v = prefixed("image", self.image.names());
        v.extend(prefixed("tabular", self.tabular.names()));
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentRun {
    pub encoders: AlignedEncoders,
    pub curve: Vec<EpochLoss>,
    /// Image then tabular optimizer state.
    pub optimizers: Vec<AdamW>,
}

/// Contrastive training of both encoders from the given starting point.
pub fn train_alignment_from(
    mut enc: AlignedEncoders,
    train: &[CohortSample],
    cfg: &AlignConfig,
    seed: u64,
) -> Result<AlignmentRun> {
    cfg.validate()?;
    if train.len() < 2 * cfg.batch_size {
        return Err(Error::Config(format!(
            "alignment needs at least {} training samples, got {}",
            2 * cfg.batch_size,
            train.len()
        )));
    }
    let pixels = enc.image.sample_pixels(train)?;
    let features = enc.tabular.feature_matrix(train)?;
    let mut opt_img = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut opt_tab = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut stream_rng(seed, "align-shuffle", epoch as u64));
        let (mut sum_it, mut sum_ti, mut sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let wrap = |e: Error| Error::Training {
                epoch,
                step,
                message: e.to_string(),
            };
            let x = gather_rows(&pixels, idx);
            let t = gather_rows(&features, idx);
            let (loss, grad) = contrastive_loss_grad(&enc, &x, &t, cfg.temperature, cfg.include_positive_in_denominator)
                .map_err(wrap)?;
            if !loss.total.is_finite() {
                return Err(Error::Training {
                    epoch,
                    step,
                    message: format!("loss is {}", loss.total),
                });
            }
            opt_img.step(&mut enc.image, &grad.image).map_err(wrap)?;
            opt_tab.step(&mut enc.tabular, &grad.tabular).map_err(wrap)?;
            sum_it += loss.image_to_tab;
            sum_ti += loss.tab_to_image;
            sum += loss.total;
            batches += 1;
        }
        let n = batches as f64;
        curve.push(EpochLoss {
            epoch,
            loss_i2t: sum_it / n,
            loss_t2i: sum_ti / n,
            total: sum / n,
        });
    }
    Ok(AlignmentRun {
        encoders: enc,
        curve,
        optimizers: vec![opt_img, opt_tab],
    })
}

/// Symmetric contrastive loss of one batch of pixel rows and standardized
/// tabular rows, with its gradient with respect to both encoders. The
/// gradient's tabular standardizer is a copy of the encoder's and is not a
/// trainable quantity.
pub fn contrastive_loss_grad(
    enc: &AlignedEncoders,
    pixels: &Matrix,
    features: &Matrix,
    tau: f64,
    include_positive: bool,
) -> Result<(ContrastiveLoss, AlignedEncoders)> {
    let (zi, tape_i) = enc.image.forward_batch(pixels)?;
    let (zt, tape_t) = enc.tabular.mlp.forward_batch(features)?;
    let loss = total_contrastive_loss(&zi, &zt, tau, include_positive)?;
    let image = enc.image.backward_batch(&tape_i, &loss.grad_image)?;
    let (g_mlp, _) = enc.tabular.mlp.backward_batch(&tape_t, &loss.grad_tab)?;
    let mut tabular = enc.tabular.clone();
    tabular.mlp = g_mlp;
    Ok((loss, AlignedEncoders { image, tabular }))
}

pub fn train_alignment(
    train: &[CohortSample],
    modality: Modality,
    cfg: &AlignConfig,
    seed: u64,
) -> Result<AlignmentRun> {
    cfg.validate()?;
    let enc = AlignedEncoders::init(train, modality, cfg.embed_dim, seed)?;
    train_alignment_from(enc, train, cfg, seed)
}

pub(crate) fn gather_rows(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(idx.len() * m.cols());
    for &i in idx {
        data.extend_from_slice(m.row(i));
    }
    Matrix::from_vec(idx.len(), m.cols(), data).expect("consistent row width")
}

/// Fraction of queries whose paired gallery item (same row index) ranks in
/// the top `k` by cosine similarity. Ties rank the lower index first.
pub fn retrieval_topk(queries: &Matrix, gallery: &Matrix, k: usize) -> Result<f64> {
    if queries.rows() == 0 {
        return Err(Error::Evaluation("retrieval needs a non-empty held-out set".into()));
    }
    if queries.rows() != gallery.rows() {
        return Err(Error::shape("retrieval gallery", queries.rows(), gallery.rows()));
    }
    if k == 0 {
        return Err(Error::Evaluation("retrieval k must be at least 1".into()));
    }
    let s = cosine_matrix(queries, gallery)?;
    let mut hits = 0usize;
    for i in 0..s.rows() {
        let row = s.row(i);
        let target = row[i];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > target || (v == target && j < i))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / s.rows() as f64)
}

/// Held-out image-to-biomarker retrieval for a trained pair.
pub fn evaluate_retrieval(enc: &AlignedEncoders, held_out: &[CohortSample], k: usize) -> Result<f64> {
    let (img, tab) = enc.embed(held_out)?;
    retrieval_topk(&img, &tab, k)
}

pub fn loss_curve_csv(curve: &[EpochLoss]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in curve {
        w.serialize(e)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
