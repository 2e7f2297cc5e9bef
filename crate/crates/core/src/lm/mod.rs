//! Report decoder conditioned on fused visual tokens, its supervised
//! fine-tuning with frozen image encoders, and greedy generation.

mod decoder;

pub use decoder::{Block, DecoderConfig, DecoderParams, DecoderTape, LayerNorm, SequenceInput};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::align::ImageEncoder;
use crate::cohort::{CohortSample, Modality};
use crate::error::{Error, Result};
use crate::fusion::{fuse_sequence, FusedSequence, ProjectorParams, VISUAL_TOKENS};
use crate::report::{prompt_text, InstructionPair, TokenId, Vocabulary};
use crate::rng::stream_rng;
use crate::tensor::{prefixed, AdamW, Matrix, Parameters};

/// `-sum_i log_probs[i, targets[i]]`.
pub fn nll_loss(log_probs: &Matrix, targets: &[TokenId]) -> Result<f64> {
    if log_probs.rows() != targets.len() {
        return Err(Error::shape("nll targets", log_probs.rows(), targets.len()));
    }
    let mut total = 0.0;
    for (r, t) in targets.iter().enumerate() {
        if t.index() >= log_probs.cols() {
            return Err(Error::Contract(format!(
                "target id {} outside vocabulary of {}",
                t.0,
                log_probs.cols()
            )));
        }
        total -= log_probs.get(r, t.index());
    }
    Ok(total)
}

/// Trainable parts of the report model plus the vocabulary they index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportModel {
    pub projectors: ProjectorParams,
    pub decoder: DecoderParams,
    pub vocabulary: Vocabulary,
}

impl Parameters for ReportModel {
    fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.projectors.slices();
        v.extend(self.decoder.slices());
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.projectors.slices_mut();
        v.extend(self.decoder.slices_mut());
        v
    }

    fn names(&self) -> Vec<String> {
        let mut v = prefixed("projectors", self.projectors.names());
        v.extend(prefixed("decoder", self.decoder.names()));
        v
    }
}

/// How the visual prefix is formed at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefixMode {
    Full,
    /// The CFP token is replaced by a zero vector.
    ZeroCfp,
}

/// Frozen-encoder features and tokenized text for one training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SftExample {
    pub eid: u64,
    pub z_oct: Vec<f64>,
    pub z_cfp: Vec<f64>,
    pub prompt: Vec<TokenId>,
    /// Report tokens followed by the end-of-report token.
    pub target: Vec<TokenId>,
}

impl ReportModel {
    pub fn init(
        vocabulary: Vocabulary,
        embed_dim: usize,
        mapper_dim: usize,
        decoder: DecoderConfig,
        seed: u64,
    ) -> Result<Self> {
        if decoder.vocab != vocabulary.len() {
            return Err(Error::Config(format!(
                "decoder vocab {} differs from vocabulary size {}",
                decoder.vocab,
                vocabulary.len()
            )));
        }
        let projectors = ProjectorParams::init(
            embed_dim,
            mapper_dim,
            decoder.d_model,
            &mut stream_rng(seed, "sft-projector-init", 0),
        );
        let decoder = DecoderParams::init(decoder, &mut stream_rng(seed, "sft-decoder-init", 0))?;
        Ok(Self {
            projectors,
            decoder,
            vocabulary,
        })
    }

    pub fn prompt_tokens(&self) -> Result<Vec<TokenId>> {
        self.vocabulary.tokenize(&prompt_text())
    }

    /// The fused decoder prefix for one sample's image embeddings.
    pub fn prefix(&self, z_oct: &[f64], z_cfp: &[f64], mode: PrefixMode) -> Result<FusedSequence> {
        let zo = Matrix::from_vec(1, z_oct.len(), z_oct.to_vec())?;
        let zc = Matrix::from_vec(1, z_cfp.len(), z_cfp.to_vec())?;
        let (mut h_cfp, h_oct, _) = self.projectors.forward_batch(&zo, &zc)?;
        if mode == PrefixMode::ZeroCfp {
            h_cfp.data_mut().fill(0.0);
        }
        let prompt = self.decoder.embed_tokens(&self.prompt_tokens()?)?;
        fuse_sequence(h_cfp.row(0), h_oct.row(0), &prompt)
    }

    /// Next-token log-probabilities for every target position.
    pub fn decoder_forward(&self, prefix: &FusedSequence, targets: &[TokenId]) -> Result<Matrix> {
        if targets.is_empty() {
            return Err(Error::Contract("decoder_forward needs at least one target".into()));
        }
        let seq = teacher_forced(&self.decoder, prefix.tokens().clone(), None, targets)?;
        Ok(self.decoder.forward(&[seq])?.log_probs().clone())
    }

    /// Greedy decoding until the end-of-report token, `max_len` tokens or
    /// the context window, whichever comes first. Ties pick the lower id.
    pub fn generate(&self, prefix: &FusedSequence, max_len: usize) -> Result<Vec<TokenId>> {
        let eos = self.vocabulary.eos();
        let mut out = Vec::new();
        let mut embeds = prefix.tokens().clone();
        let context = self.decoder.config.context;
        while out.len() < max_len && embeds.rows() <= context {
            let seq = SequenceInput {
                ids: vec![None; embeds.rows()],
                output_start: embeds.rows() - 1,
                embeds: embeds.clone(),
            };
            let tape = self.decoder.forward(&[seq])?;
            let row = tape.log_probs().row(0);
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            let next = TokenId(best as u32);
            out.push(next);
            if next == eos {
                break;
            }
            embeds = embeds.vstack(&self.decoder.embed_tokens(&[next])?)?;
        }
        Ok(out)
    }

    /// Generated report text with any trailing end-of-report token removed.
    pub fn generate_text(&self, prefix: &FusedSequence, max_len: usize) -> Result<String> {
        let mut tokens = self.generate(prefix, max_len)?;
        if tokens.last() == Some(&self.vocabulary.eos()) {
            tokens.pop();
        }
        self.vocabulary.detokenize(&tokens)
    }
}

/// Input rows `[prefix, embed(targets[..n - 1])]`, producing one output
/// per target. `prefix_ids` marks prefix rows drawn from the table.
fn teacher_forced(
    decoder: &DecoderParams,
    prefix: Matrix,
    prefix_ids: Option<&[Option<TokenId>]>,
    targets: &[TokenId],
) -> Result<SequenceInput> {
    let p = prefix.rows();
    if p == 0 {
        return Err(Error::Contract("decoder prefix must be non-empty".into()));
    }
    let shifted = &targets[..targets.len() - 1];
    let embeds = prefix.vstack(&decoder.embed_tokens(shifted)?)?;
    let mut ids = match prefix_ids {
        Some(ids) => ids.to_vec(),
        None => vec![None; p],
    };
    ids.extend(shifted.iter().copied().map(Some));
    Ok(SequenceInput {
        embeds,
        ids,
        output_start: p - 1,
    })
}

/// Embeds every sample with the frozen encoders and tokenizes its pair.
pub fn build_examples(
    samples: &[CohortSample],
    pairs: &[InstructionPair],
    oct: &ImageEncoder,
    cfp: &ImageEncoder,
    vocabulary: &Vocabulary,
) -> Result<Vec<SftExample>> {
    if oct.modality != Modality::Oct || cfp.modality != Modality::Cfp {
        return Err(Error::Contract("build_examples needs an OCT and a CFP encoder".into()));
    }
    let by_eid: std::collections::HashMap<u64, &InstructionPair> = pairs.iter().map(|p| (p.eid, p)).collect();
    let z_oct = oct.apply_batch(&oct.sample_pixels(samples)?)?;
    let z_cfp = cfp.apply_batch(&cfp.sample_pixels(samples)?)?;
    let eos = vocabulary.eos();
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let pair = by_eid
                .get(&s.eid)
                .ok_or_else(|| Error::Validation(format!("no instruction pair for sample {}", s.eid)))?;
            let mut target = vocabulary.tokenize(&pair.report)?;
            target.push(eos);
            Ok(SftExample {
                eid: s.eid,
                z_oct: z_oct.row(i).to_vec(),
                z_cfp: z_cfp.row(i).to_vec(),
                prompt: vocabulary.tokenize(&pair.prompt)?,
                target,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// The learning rate follows a cosine from `learning_rate` down to
    /// `learning_rate * final_lr_fraction` over all steps.
    pub final_lr_fraction: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub mapper_dim: usize,
    pub decoder: DecoderConfig,
    pub freeze_encoders: bool,
    pub train_projectors: bool,
    pub train_decoder: bool,
    pub max_report_tokens: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 3e-3,
            final_lr_fraction: 0.02,
            weight_decay: 1e-2,
            batch_size: 16,
            mapper_dim: 32,
            decoder: DecoderConfig::desk(Vocabulary::standard().len()),
            freeze_encoders: true,
            train_projectors: true,
            train_decoder: true,
            max_report_tokens: 240,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.freeze_encoders {
            return Err(Error::Config("image encoders must stay frozen during fine-tuning".into()));
        }
        if self.batch_size == 0
            || !(self.learning_rate >= 0.0)
            || !(self.weight_decay >= 0.0)
            || !(0.0..=1.0).contains(&self.final_lr_fraction)
        {
            return Err(Error::Config(
                "sft batch_size, learning_rate, final_lr_fraction or weight_decay invalid".into(),
            ));
        }
        self.decoder.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftEpoch {
    pub epoch: usize,
    pub total_nll: f64,
    pub mean_token_nll: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftRun {
    pub model: ReportModel,
    pub curve: Vec<SftEpoch>,
    /// Projector then decoder optimizer state.
    pub optimizers: Vec<AdamW>,
}

/// Sequences and targets for a minibatch, with the visual rows first.
fn batch_sequences(
    model: &ReportModel,
    batch: &[&SftExample],
    h_cfp: &Matrix,
    h_oct: &Matrix,
) -> Result<(Vec<SequenceInput>, Vec<TokenId>)> {
    let mut seqs = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    for (i, ex) in batch.iter().enumerate() {
        let prompt = model.decoder.embed_tokens(&ex.prompt)?;
        let prefix = fuse_sequence(h_cfp.row(i), h_oct.row(i), &prompt)?;
        let mut ids = vec![None; VISUAL_TOKENS];
        ids.extend(ex.prompt.iter().copied().map(Some));
        seqs.push(teacher_forced(&model.decoder, prefix.tokens().clone(), Some(&ids), &ex.target)?);
        targets.extend_from_slice(&ex.target);
    }
    Ok((seqs, targets))
}

fn visual_batch(batch: &[&SftExample]) -> Result<(Matrix, Matrix)> {
    let rows = |f: fn(&SftExample) -> &Vec<f64>| {
        Matrix::from_rows(&batch.iter().map(|e| f(e).clone()).collect::<Vec<_>>())
    };
    Ok((rows(|e| &e.z_oct)?, rows(|e| &e.z_cfp)?))
}

/// Summed NLL and its gradients for one minibatch.
fn batch_loss_grad(
    model: &ReportModel,
    batch: &[&SftExample],
) -> Result<(f64, usize, ProjectorParams, DecoderParams)> {
    let (zo, zc) = visual_batch(batch)?;
    let (h_cfp, h_oct, ptape) = model.projectors.forward_batch(&zo, &zc)?;
    let (seqs, targets) = batch_sequences(model, batch, &h_cfp, &h_oct)?;
    let tape = model.decoder.forward(&seqs)?;
    let loss = nll_loss(tape.log_probs(), &targets)?;
    let mut d_lp = Matrix::zeros(targets.len(), model.vocabulary.len());
    for (r, t) in targets.iter().enumerate() {
        d_lp.set(r, t.index(), -1.0);
    }
    let (g_dec, d_in) = model.decoder.backward(&tape, &d_lp)?;
    let d = model.decoder.config.d_model;
    let mut d_cfp = Matrix::zeros(batch.len(), d);
    let mut d_oct = Matrix::zeros(batch.len(), d);
    for (i, g) in d_in.iter().enumerate() {
        d_cfp.row_mut(i).copy_from_slice(g.row(0));
        d_oct.row_mut(i).copy_from_slice(g.row(1));
    }
    let g_proj = model.projectors.backward_batch(&ptape, &d_cfp, &d_oct)?;
    Ok((loss, targets.len(), g_proj, g_dec))
}

fn cosine_lr(cfg: &SftConfig, step: usize, total: usize) -> f64 {
    let floor = cfg.learning_rate * cfg.final_lr_fraction;
    let t = step as f64 / total as f64;
    floor + 0.5 * (cfg.learning_rate - floor) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Summed NLL over `examples` and its gradient with respect to the
/// projectors and decoder.
pub fn sft_loss_grad(model: &ReportModel, examples: &[SftExample]) -> Result<(f64, ReportModel)> {
    let batch: Vec<&SftExample> = examples.iter().collect();
    let (loss, _, projectors, decoder) = batch_loss_grad(model, &batch)?;
    Ok((
        loss,
        ReportModel {
            projectors,
            decoder,
            vocabulary: model.vocabulary.clone(),
        },
    ))
}

/// Joint training of projectors and decoder on precomputed embeddings from
/// frozen encoders. The encoders are only read, and their fingerprints are
/// checked before returning.
pub fn train_sft(
    examples: &[SftExample],
    oct: &ImageEncoder,
    cfp: &ImageEncoder,
    mut model: ReportModel,
    cfg: &SftConfig,
    seed: u64,
) -> Result<SftRun> {
    cfg.validate()?;
    let before = (oct.fingerprint(), cfp.fingerprint());
    let mut opt_proj = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut opt_dec = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch).max(1);
    let mut global_step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut stream_rng(seed, "sft-shuffle", epoch as u64));
        let (mut total, mut tokens) = (0.0, 0usize);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&SftExample> = idx.iter().map(|&i| &examples[i]).collect();
            let wrap = |e: Error| Error::Training {
                epoch,
                step,
                message: e.to_string(),
            };
            let (loss, n, g_proj, g_dec) = batch_loss_grad(&model, &batch).map_err(wrap)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    step,
                    message: format!("loss is {loss}"),
                });
            }
            let lr = cosine_lr(cfg, global_step, total_steps);
            opt_proj.learning_rate = lr;
            opt_dec.learning_rate = lr;
            global_step += 1;
            if cfg.train_projectors {
                opt_proj.step(&mut model.projectors, &g_proj).map_err(wrap)?;
            }
            if cfg.train_decoder {
                opt_dec.step(&mut model.decoder, &g_dec).map_err(wrap)?;
            }
            total += loss;
            tokens += n;
        }
        curve.push(SftEpoch {
            epoch,
            total_nll: total,
            mean_token_nll: if tokens > 0 { total / tokens as f64 } else { 0.0 },
        });
    }
    if (oct.fingerprint(), cfp.fingerprint()) != before {
        return Err(Error::Contract("frozen encoder parameters changed during fine-tuning".into()));
    }
    Ok(SftRun {
        model,
        curve,
        optimizers: vec![opt_proj, opt_dec],
    })
}

/// Teacher-forced held-out statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherForcedStats {
    pub mean_token_nll: f64,
    pub token_accuracy: f64,
    /// Accuracy over tokens that are not part of a number.
    pub structural_accuracy: f64,
    pub tokens: usize,
    pub structural_tokens: usize,
}

pub fn teacher_forced_stats(
    model: &ReportModel,
    examples: &[SftExample],
    mode: PrefixMode,
    batch_size: usize,
) -> Result<TeacherForcedStats> {
    if examples.is_empty() {
        return Err(Error::Evaluation("no examples to score".into()));
    }
    let (mut nll, mut n, mut hits, mut s_n, mut s_hits) = (0.0, 0usize, 0usize, 0usize, 0usize);
    let refs: Vec<&SftExample> = examples.iter().collect();
    for batch in refs.chunks(batch_size.max(1)) {
        let (zo, zc) = visual_batch(batch)?;
        let (mut h_cfp, h_oct, _) = model.projectors.forward_batch(&zo, &zc)?;
        if mode == PrefixMode::ZeroCfp {
            h_cfp.data_mut().fill(0.0);
        }
        let (seqs, targets) = batch_sequences(model, batch, &h_cfp, &h_oct)?;
        let tape = model.decoder.forward(&seqs)?;
        let lp = tape.log_probs();
        nll += nll_loss(lp, &targets)?;
        for (r, t) in targets.iter().enumerate() {
            let row = lp.row(r);
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            let hit = best == t.index();
            n += 1;
            hits += usize::from(hit);
            if !model.vocabulary.is_numeric(*t) {
                s_n += 1;
                s_hits += usize::from(hit);
            }
        }
    }
    Ok(TeacherForcedStats {
        mean_token_nll: nll / n as f64,
        token_accuracy: hits as f64 / n as f64,
        structural_accuracy: if s_n > 0 { s_hits as f64 / s_n as f64 } else { 0.0 },
        tokens: n,
        structural_tokens: s_n,
    })
}

/// Greedy reports for every example.
pub fn generate_reports(model: &ReportModel, examples: &[SftExample], mode: PrefixMode, max_len: usize) -> Result<Vec<String>> {
    examples
        .iter()
        .map(|ex| model.generate_text(&model.prefix(&ex.z_oct, &ex.z_cfp, mode)?, max_len))
        .collect()
}

pub fn sft_curve_csv(curve: &[SftEpoch]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in curve {
        w.serialize(e)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_decoder() -> DecoderConfig {
        DecoderConfig {
            vocab: Vocabulary::standard().len(),
            d_model: 8,
            n_heads: 2,
            n_blocks: 2,
            ffn_hidden: 12,
            context: 40,
        }
    }

    fn toy_model(seed: u64) -> ReportModel {
        ReportModel::init(Vocabulary::standard().clone(), 5, 6, toy_decoder(), seed).unwrap()
    }

    fn toy_examples(seed: u64, n: usize) -> Vec<SftExample> {
        let vocab = Vocabulary::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let mut target = vocab.tokenize("FINDING av_ratio 0.61 ratio low").unwrap();
                target.truncate(rng.random_range(2..target.len()));
                target.push(vocab.eos());
                SftExample {
                    eid: i as u64,
                    z_oct: (0..5).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    z_cfp: (0..5).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    prompt: vocab.tokenize(&prompt_text()).unwrap(),
                    target,
                }
            })
            .collect()
    }

    fn toy_encoders() -> (ImageEncoder, ImageEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        (
            ImageEncoder::init(Modality::Oct, 5, &mut rng).unwrap(),
            ImageEncoder::init(Modality::Cfp, 5, &mut rng).unwrap(),
        )
    }

    #[test]
    fn nll_of_uniform_and_point_masses() {
        let lp = Matrix::from_rows(&[vec![(0.25f64).ln(); 4], vec![0.0, -50.0, -50.0, -50.0]]).unwrap();
        let v = nll_loss(&lp, &[TokenId(2), TokenId(0)]).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        let v = nll_loss(&lp, &[TokenId(2), TokenId(3)]).unwrap();
        assert!((v - 4f64.ln() - 50.0).abs() < 1e-12);
        assert!(nll_loss(&lp, &[TokenId(0)]).is_err());
        assert!(nll_loss(&lp, &[TokenId(0), TokenId(4)]).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let model = toy_model(seed);
            let examples = toy_examples(seed, 3);
            let (_, grad) = sft_loss_grad(&model, &examples).unwrap();
            let report = finite_diff_check(|m: &ReportModel| sft_loss_grad(m, &examples).unwrap().0, &model, &grad, 1e-5, 1e-4);
            assert!(report.passed(), "seed {seed}: {:?}", report.failures);
        }
    }

    #[test]
    fn zero_epochs_leave_the_model_untouched() {
        let (oct, cfp) = toy_encoders();
        let model = toy_model(1);
        let cfg = SftConfig {
            epochs: 0,
            decoder: toy_decoder(),
            ..SftConfig::default()
        };
        let run = train_sft(&toy_examples(1, 4), &oct, &cfp, model.clone(), &cfg, 1).unwrap();
        assert_eq!(run.model, model);
        assert!(run.curve.is_empty());
    }

    #[test]
    fn training_lowers_loss_and_is_deterministic() {
        let (oct, cfp) = toy_encoders();
        let examples = toy_examples(2, 8);
        let cfg = SftConfig {
            epochs: 8,
            batch_size: 4,
            learning_rate: 1e-2,
            final_lr_fraction: 0.1,
            decoder: toy_decoder(),
            ..SftConfig::default()
        };
        let a = train_sft(&examples, &oct, &cfp, toy_model(2), &cfg, 5).unwrap();
        let b = train_sft(&examples, &oct, &cfp, toy_model(2), &cfg, 5).unwrap();
        assert_eq!(a.model.fingerprint(), b.model.fingerprint());
        assert_eq!(a.curve, b.curve);
        assert!(a.curve.last().unwrap().mean_token_nll < a.curve[0].mean_token_nll);
    }

    #[test]
    fn frozen_projectors_do_not_move() {
        let (oct, cfp) = toy_encoders();
        let cfg = SftConfig {
            epochs: 2,
            train_projectors: false,
            decoder: toy_decoder(),
            ..SftConfig::default()
        };
        let model = toy_model(3);
        let run = train_sft(&toy_examples(3, 4), &oct, &cfp, model.clone(), &cfg, 3).unwrap();
        assert_eq!(run.model.projectors, model.projectors);
        assert_ne!(run.model.decoder, model.decoder);
    }

    #[test]
    fn unfrozen_encoders_are_a_config_error() {
        let cfg = SftConfig {
            freeze_encoders: false,
            ..SftConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = SftConfig {
            learning_rate: 1.0,
            final_lr_fraction: 0.1,
            ..SftConfig::default()
        };
        assert_eq!(cosine_lr(&cfg, 0, 10), 1.0);
        assert!((cosine_lr(&cfg, 5, 10) - 0.55).abs() < 1e-12);
        assert!((cosine_lr(&cfg, 10, 10) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let model = toy_model(4);
        let ex = &toy_examples(4, 1)[0];
        let prefix = model.prefix(&ex.z_oct, &ex.z_cfp, PrefixMode::Full).unwrap();
        let a = model.generate(&prefix, 10).unwrap();
        assert_eq!(a, model.generate(&prefix, 10).unwrap());
        assert!(a.len() <= 10);
        assert_eq!(model.generate(&prefix, 1).unwrap().len(), 1);
        // the window caps output length
        let long = model.generate(&prefix, 1000).unwrap();
        assert!(prefix.total_length() + long.len() <= toy_decoder().context + 1);
    }

    #[test]
    fn zero_cfp_prefix_has_a_zero_first_row() {
        let model = toy_model(5);
        let ex = &toy_examples(5, 1)[0];
        let full = model.prefix(&ex.z_oct, &ex.z_cfp, PrefixMode::Full).unwrap();
        let zero = model.prefix(&ex.z_oct, &ex.z_cfp, PrefixMode::ZeroCfp).unwrap();
        assert!(zero.tokens().row(0).iter().all(|v| *v == 0.0));
        assert!(full.tokens().row(0).iter().any(|v| *v != 0.0));
        for r in 1..full.total_length() {
            assert_eq!(full.tokens().row(r), zero.tokens().row(r));
        }
    }

    #[test]
    fn teacher_forced_stats_cover_every_target() {
        let model = toy_model(6);
        let examples = toy_examples(6, 5);
        let stats = teacher_forced_stats(&model, &examples, PrefixMode::Full, 2).unwrap();
        let n: usize = examples.iter().map(|e| e.target.len()).sum();
        assert_eq!(stats.tokens, n);
        let (total, _) = sft_loss_grad(&model, &examples).unwrap();
        assert!((stats.mean_token_nll - total / n as f64).abs() < 1e-9);
        assert!(teacher_forced_stats(&model, &[], PrefixMode::Full, 2).is_err());
    }
}
