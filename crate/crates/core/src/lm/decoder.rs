//! Pre-norm causal transformer decoder with hand-written backward pass.
//!
//! Several sequences are packed row-wise into one matrix so the dense
//! projections run as a single GEMM; attention is computed per sequence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::TokenId;
use crate::tensor::{prefixed, Matrix, Parameters};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub ffn_hidden: usize,
    pub context: usize,
}

impl DecoderConfig {
    pub fn desk(vocab: usize) -> Self {
        Self {
            vocab,
            d_model: 64,
            n_heads: 2,
            n_blocks: 2,
            ffn_hidden: 128,
            context: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.d_model == 0 || self.n_heads == 0 || self.context == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        Self {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Matrix,
    pub bq: Vec<f64>,
    pub wk: Matrix,
    pub bk: Vec<f64>,
    pub wv: Matrix,
    pub bv: Vec<f64>,
    pub wo: Matrix,
    pub bo: Vec<f64>,
    pub ln2: LayerNorm,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl Block {
    fn init<R: Rng + ?Sized>(cfg: &DecoderConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let h = cfg.ffn_hidden;
        let residual_scale = 1.0 / ((2 * cfg.n_blocks.max(1)) as f64).sqrt();
        let mut wo = Matrix::glorot(d, d, rng);
        wo.scale(residual_scale);
        let mut w2 = Matrix::glorot(h, d, rng);
        w2.scale(residual_scale);
        Self {
            ln1: LayerNorm::new(d),
            wq: Matrix::glorot(d, d, rng),
            bq: vec![0.0; d],
            wk: Matrix::glorot(d, d, rng),
            bk: vec![0.0; d],
            wv: Matrix::glorot(d, d, rng),
            bv: vec![0.0; d],
            wo,
            bo: vec![0.0; d],
            ln2: LayerNorm::new(d),
            w1: Matrix::glorot(d, h, rng),
            b1: vec![0.0; h],
            w2,
            b2: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub config: DecoderConfig,
    /// `(vocab, d_model)`.
    pub token_embedding: Matrix,
    /// `(context, d_model)`.
    pub position_embedding: Matrix,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
    /// `(d_model, vocab)`.
    pub head: Matrix,
    pub head_bias: Vec<f64>,
}

/// One sequence of input rows. Rows with a token id take their embedding
/// from the table (and send gradient back to it); rows without one are
/// supplied directly, as for the visual prefix.
#[derive(Debug, Clone)]
pub struct SequenceInput {
    pub embeds: Matrix,
    pub ids: Vec<Option<TokenId>>,
    /// Rows whose next-token distribution is produced, `start..rows`.
    pub output_start: usize,
}

impl SequenceInput {
    fn len(&self) -> usize {
        self.embeds.rows()
    }
}

struct LnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

struct BlockCache {
    ln1: LnCache,
    a: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Attention probabilities per sequence, then per head.
    probs: Vec<Vec<Matrix>>,
    o: Matrix,
    ln2: LnCache,
    c: Matrix,
    f1: Matrix,
    g: Matrix,
}

/// Everything the backward pass needs from one forward pass.
pub struct DecoderTape {
    offsets: Vec<usize>,
    lens: Vec<usize>,
    output_rows: Vec<usize>,
    ids: Vec<Option<TokenId>>,
    blocks: Vec<BlockCache>,
    ln_final: LnCache,
    z_out: Matrix,
    log_probs: Matrix,
}

impl DecoderTape {
    /// Log-probabilities of every output row, sequences concatenated.
    pub fn log_probs(&self) -> &Matrix {
        &self.log_probs
    }

    /// Output row range of sequence `i` within `log_probs`.
    pub fn output_range(&self, i: usize) -> std::ops::Range<usize> {
        let start: usize = self.output_counts()[..i].iter().sum();
        start..start + self.output_counts()[i]
    }

    fn output_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.lens.len()];
        let mut seq = 0;
        for &r in &self.output_rows {
            while r >= self.offsets[seq] + self.lens[seq] {
                seq += 1;
            }
            counts[seq] += 1;
        }
        counts
    }
}

fn linear(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    let mut y = x.matmul(w)?;
    y.add_row_vector(b);
    Ok(y)
}

fn ln_forward(x: &Matrix, ln: &LayerNorm) -> (Matrix, LnCache) {
    let d = x.cols() as f64;
    let mut xhat = x.clone();
    let mut y = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        let xr = xhat.row_mut(r);
        for (h, v) in xr.iter_mut().zip(row) {
            *h = (v - mean) * is;
        }
        let xr = xhat.row(r).to_vec();
        for (c, out) in y.row_mut(r).iter_mut().enumerate() {
            *out = ln.gain[c] * xr[c] + ln.bias[c];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn ln_backward(dy: &Matrix, cache: &LnCache, ln: &LayerNorm, grad: &mut LayerNorm) -> Matrix {
    let d = dy.cols() as f64;
    let mut dx = Matrix::zeros(dy.rows(), dy.cols());
    for r in 0..dy.rows() {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut dxhat = vec![0.0; dyr.len()];
        for c in 0..dyr.len() {
            grad.gain[c] += dyr[c] * xh[c];
            grad.bias[c] += dyr[c];
            dxhat[c] = dyr[c] * ln.gain[c];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
        let is = cache.inv_std[r];
        for (c, out) in dx.row_mut(r).iter_mut().enumerate() {
            *out = is * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Rows `r0..r0 + n`, columns `c0..c0 + w` as a new matrix.
fn block_of(m: &Matrix, r0: usize, n: usize, c0: usize, w: usize) -> Matrix {
    let mut data = Vec::with_capacity(n * w);
    for r in r0..r0 + n {
        data.extend_from_slice(&m.row(r)[c0..c0 + w]);
    }
    Matrix::from_vec(n, w, data).expect("block dimensions")
}

fn add_block(dst: &mut Matrix, r0: usize, c0: usize, src: &Matrix) {
    for r in 0..src.rows() {
        for (d, s) in dst.row_mut(r0 + r)[c0..c0 + src.cols()].iter_mut().zip(src.row(r)) {
            *d += s;
        }
    }
}

fn log_softmax_rows(logits: &mut Matrix) {
    for r in 0..logits.rows() {
        let row = logits.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
}

impl DecoderParams {
    pub fn init<R: Rng + ?Sized>(config: DecoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let small = |rows: usize, rng: &mut R| {
            Matrix::from_vec(rows, d, (0..rows * d).map(|_| rng.random_range(-0.1..0.1)).collect())
                .expect("embedding dimensions")
        };
        let token_embedding = small(config.vocab, rng);
        let position_embedding = small(config.context, rng);
        let blocks = (0..config.n_blocks).map(|_| Block::init(&config, rng)).collect();
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            blocks,
            ln_final: LayerNorm::new(d),
            head: Matrix::glorot(d, config.vocab, rng),
            head_bias: vec![0.0; config.vocab],
        })
    }

    pub fn embed_tokens(&self, ids: &[TokenId]) -> Result<Matrix> {
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(ids.len() * d);
        for id in ids {
            self.check_id(*id)?;
            data.extend_from_slice(self.token_embedding.row(id.0 as usize));
        }
        Matrix::from_vec(ids.len(), d, data)
    }

    fn check_id(&self, id: TokenId) -> Result<()> {
        if (id.0 as usize) < self.config.vocab {
            Ok(())
        } else {
            Err(Error::Contract(format!("token id {} outside vocabulary of {}", id.0, self.config.vocab)))
        }
    }

    /// Forward pass over packed sequences.
    pub fn forward(&self, seqs: &[SequenceInput]) -> Result<DecoderTape> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let mut offsets = Vec::with_capacity(seqs.len());
        let mut lens = Vec::with_capacity(seqs.len());
        let mut output_rows = Vec::new();
        let mut ids = Vec::new();
        let mut data = Vec::new();
        let mut total = 0;
        for s in seqs {
            if s.embeds.cols() != d {
                return Err(Error::shape("decoder input", d, s.embeds.cols()));
            }
            if s.ids.len() != s.len() || s.output_start > s.len() {
                return Err(Error::Contract("sequence ids or output range inconsistent".into()));
            }
            if s.len() > cfg.context {
                return Err(Error::Context {
                    length: s.len(),
                    window: cfg.context,
                });
            }
            for (t, id) in s.ids.iter().enumerate() {
                if let Some(id) = id {
                    self.check_id(*id)?;
                }
                let pos = self.position_embedding.row(t);
                data.extend(s.embeds.row(t).iter().zip(pos).map(|(e, p)| e + p));
            }
            offsets.push(total);
            lens.push(s.len());
            output_rows.extend(total + s.output_start..total + s.len());
            ids.extend_from_slice(&s.ids);
            total += s.len();
        }
        let mut x = Matrix::from_vec(total, d, data)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, cache) = self.block_forward(block, &x, &offsets, &lens)?;
            x = out;
            caches.push(cache);
        }
        let (z, ln_final) = ln_forward(&x, &self.ln_final);
        let mut z_data = Vec::with_capacity(output_rows.len() * d);
        for &r in &output_rows {
            z_data.extend_from_slice(z.row(r));
        }
        let z_out = Matrix::from_vec(output_rows.len(), d, z_data)?;
        let mut log_probs = linear(&z_out, &self.head, &self.head_bias)?;
        log_softmax_rows(&mut log_probs);
        Ok(DecoderTape {
            offsets,
            lens,
            output_rows,
            ids,
            blocks: caches,
            ln_final,
            z_out,
            log_probs,
        })
    }

    fn block_forward(&self, b: &Block, x: &Matrix, offsets: &[usize], lens: &[usize]) -> Result<(Matrix, BlockCache)> {
        let cfg = &self.config;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let (a, ln1) = ln_forward(x, &b.ln1);
        let q = linear(&a, &b.wq, &b.bq)?;
        let k = linear(&a, &b.wk, &b.bk)?;
        let v = linear(&a, &b.wv, &b.bv)?;
        let mut o = Matrix::zeros(x.rows(), cfg.d_model);
        let mut probs = Vec::with_capacity(offsets.len());
        for (&off, &len) in offsets.iter().zip(lens) {
            let mut per_head = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let qh = block_of(&q, off, len, h * dh, dh);
                let kh = block_of(&k, off, len, h * dh, dh);
                let vh = block_of(&v, off, len, h * dh, dh);
                let mut s = qh.matmul_t(&kh)?;
                for i in 0..len {
                    let row = s.row_mut(i);
                    let max = row[..=i].iter().fold(f64::NEG_INFINITY, |m, v| m.max(v * scale));
                    let mut sum = 0.0;
                    for (j, val) in row.iter_mut().enumerate() {
                        if j <= i {
                            *val = (*val * scale - max).exp();
                            sum += *val;
                        } else {
                            *val = 0.0;
                        }
                    }
                    row[..=i].iter_mut().for_each(|v| *v /= sum);
                }
                let oh = s.matmul(&vh)?;
                add_block(&mut o, off, h * dh, &oh);
                per_head.push(s);
            }
            probs.push(per_head);
        }
        let mut x1 = linear(&o, &b.wo, &b.bo)?;
        x1.add_assign(x);
        let (c, ln2) = ln_forward(&x1, &b.ln2);
        let f1 = linear(&c, &b.w1, &b.b1)?;
        let mut g = f1.clone();
        g.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let mut x2 = linear(&g, &b.w2, &b.b2)?;
        x2.add_assign(&x1);
        Ok((
            x2,
            BlockCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                o,
                ln2,
                c,
                f1,
                g,
            },
        ))
    }

    /// Parameter gradients for upstream gradient `d_log_probs` on the output
    /// rows, plus the gradient on every sequence's input rows.
    pub fn backward(&self, tape: &DecoderTape, d_log_probs: &Matrix) -> Result<(DecoderParams, Vec<Matrix>)> {
        let cfg = &self.config;
        let d = cfg.d_model;
        if d_log_probs.rows() != tape.log_probs.rows() || d_log_probs.cols() != cfg.vocab {
            return Err(Error::shape("log-prob gradient", tape.log_probs.rows(), d_log_probs.rows()));
        }
        let mut grad = self.zeros_like();
        let mut d_logits = d_log_probs.clone();
        for r in 0..d_logits.rows() {
            let total: f64 = d_log_probs.row(r).iter().sum();
            let lp = tape.log_probs.row(r);
            for (g, l) in d_logits.row_mut(r).iter_mut().zip(lp) {
                *g -= l.exp() * total;
            }
        }
        grad.head = tape.z_out.t_matmul(&d_logits)?;
        grad.head_bias = d_logits.column_sums();
        let dz_out = d_logits.matmul_t(&self.head)?;
        let total_rows: usize = tape.lens.iter().sum();
        let mut dz = Matrix::zeros(total_rows, d);
        for (i, &r) in tape.output_rows.iter().enumerate() {
            dz.row_mut(r).copy_from_slice(dz_out.row(i));
        }
        let mut dx = ln_backward(&dz, &tape.ln_final, &self.ln_final, &mut grad.ln_final);
        for (bi, block) in self.blocks.iter().enumerate().rev() {
            dx = self.block_backward(block, &tape.blocks[bi], &dx, tape, &mut grad.blocks[bi])?;
        }
        let mut d_inputs = Vec::with_capacity(tape.lens.len());
        for (&off, &len) in tape.offsets.iter().zip(&tape.lens) {
            for t in 0..len {
                let row = dx.row(off + t);
                for (g, v) in grad.position_embedding.row_mut(t).iter_mut().zip(row) {
                    *g += v;
                }
                if let Some(id) = tape.ids[off + t] {
                    for (g, v) in grad.token_embedding.row_mut(id.0 as usize).iter_mut().zip(row) {
                        *g += v;
                    }
                }
            }
            d_inputs.push(dx.slice_rows(off, off + len));
        }
        Ok((grad, d_inputs))
    }

    fn block_backward(
        &self,
        b: &Block,
        cache: &BlockCache,
        dx2: &Matrix,
        tape: &DecoderTape,
        gb: &mut Block,
    ) -> Result<Matrix> {
        let cfg = &self.config;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        gb.w2 = cache.g.t_matmul(dx2)?;
        gb.b2 = dx2.column_sums();
        let mut df1 = dx2.matmul_t(&b.w2)?;
        for (g, f) in df1.data_mut().iter_mut().zip(cache.f1.data()) {
            *g *= gelu_grad(*f);
        }
        gb.w1 = cache.c.t_matmul(&df1)?;
        gb.b1 = df1.column_sums();
        let dc = df1.matmul_t(&b.w1)?;
        let mut dx1 = ln_backward(&dc, &cache.ln2, &b.ln2, &mut gb.ln2);
        dx1.add_assign(dx2);

        gb.wo = cache.o.t_matmul(&dx1)?;
        gb.bo = dx1.column_sums();
        let d_o = dx1.matmul_t(&b.wo)?;
        let rows = dx1.rows();
        let mut dq = Matrix::zeros(rows, cfg.d_model);
        let mut dk = Matrix::zeros(rows, cfg.d_model);
        let mut dv = Matrix::zeros(rows, cfg.d_model);
        for (si, (&off, &len)) in tape.offsets.iter().zip(&tape.lens).enumerate() {
            for h in 0..cfg.n_heads {
                let p = &cache.probs[si][h];
                let qh = block_of(&cache.q, off, len, h * dh, dh);
                let kh = block_of(&cache.k, off, len, h * dh, dh);
                let vh = block_of(&cache.v, off, len, h * dh, dh);
                let doh = block_of(&d_o, off, len, h * dh, dh);
                let dp = doh.matmul_t(&vh)?;
                add_block(&mut dv, off, h * dh, &p.t_matmul(&doh)?);
                let mut ds = dp;
                for i in 0..len {
                    let pr = p.row(i);
                    let dsr = ds.row_mut(i);
                    let dotp: f64 = pr[..=i].iter().zip(&dsr[..=i]).map(|(a, b)| a * b).sum();
                    for j in 0..len {
                        dsr[j] = if j <= i { pr[j] * (dsr[j] - dotp) * scale } else { 0.0 };
                    }
                }
                add_block(&mut dq, off, h * dh, &ds.matmul(&kh)?);
                add_block(&mut dk, off, h * dh, &ds.t_matmul(&qh)?);
            }
        }
        gb.wq = cache.a.t_matmul(&dq)?;
        gb.bq = dq.column_sums();
        gb.wk = cache.a.t_matmul(&dk)?;
        gb.bk = dk.column_sums();
        gb.wv = cache.a.t_matmul(&dv)?;
        gb.bv = dv.column_sums();
        let mut da = dq.matmul_t(&b.wq)?;
        da.add_assign(&dk.matmul_t(&b.wk)?);
        da.add_assign(&dv.matmul_t(&b.wv)?);
        let mut dx = ln_backward(&da, &cache.ln1, &b.ln1, &mut gb.ln1);
        dx.add_assign(&dx1);
        Ok(dx)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }
}

impl Parameters for LayerNorm {
    fn slices(&self) -> Vec<&[f64]> {
        vec![&self.gain, &self.bias]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.gain, &mut self.bias]
    }

    fn names(&self) -> Vec<String> {
        vec!["gain".into(), "bias".into()]
    }
}

impl Parameters for Block {
    fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.ln1.slices();
        v.extend([
            self.wq.data(),
            &self.bq,
            self.wk.data(),
            &self.bk,
            self.wv.data(),
            &self.bv,
            self.wo.data(),
            &self.bo,
        ]);
        v.extend(self.ln2.slices());
        v.extend([self.w1.data(), &self.b1, self.w2.data(), &self.b2]);
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.ln1.slices_mut();
        v.extend([
            self.wq.data_mut(),
            &mut self.bq,
            self.wk.data_mut(),
            &mut self.bk,
            self.wv.data_mut(),
            &mut self.bv,
            self.wo.data_mut(),
            &mut self.bo,
        ]);
        v.extend(self.ln2.slices_mut());
        v.extend([self.w1.data_mut(), &mut self.b1, self.w2.data_mut(), &mut self.b2]);
        v
    }

    fn names(&self) -> Vec<String> {
        let mut v = prefixed("ln1", self.ln1.names());
        v.extend(["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"].map(String::from));
        v.extend(prefixed("ln2", self.ln2.names()));
        v.extend(["w1", "b1", "w2", "b2"].map(String::from));
        v
    }
}

impl Parameters for DecoderParams {
    fn slices(&self) -> Vec<&[f64]> {
        let mut v = vec![self.token_embedding.data(), self.position_embedding.data()];
        for b in &self.blocks {
            v.extend(b.slices());
        }
        v.extend(self.ln_final.slices());
        v.extend([self.head.data(), &self.head_bias[..]]);
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = vec![self.token_embedding.data_mut(), self.position_embedding.data_mut()];
        for b in &mut self.blocks {
            v.extend(b.slices_mut());
        }
        v.extend(self.ln_final.slices_mut());
        v.extend([self.head.data_mut(), &mut self.head_bias[..]]);
        v
    }

    fn names(&self) -> Vec<String> {
        let mut v = vec!["token_embedding".to_string(), "position_embedding".to_string()];
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(prefixed(&format!("blocks.{i}"), b.names()));
        }
        v.extend(prefixed("ln_final", self.ln_final.names()));
        v.extend(["head".to_string(), "head_bias".to_string()]);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_config() -> DecoderConfig {
        DecoderConfig {
            vocab: 7,
            d_model: 4,
            n_heads: 2,
            n_blocks: 2,
            ffn_hidden: 6,
            context: 12,
        }
    }

    fn toy_sequence(rng: &mut ChaCha8Rng, params: &DecoderParams, tokens: &[u32]) -> SequenceInput {
        let visual = Matrix::glorot(2, params.config.d_model, rng);
        let ids: Vec<TokenId> = tokens.iter().map(|&t| TokenId(t)).collect();
        let embeds = visual.vstack(&params.embed_tokens(&ids).unwrap()).unwrap();
        let mut row_ids = vec![None, None];
        row_ids.extend(ids.iter().copied().map(Some));
        SequenceInput {
            embeds,
            ids: row_ids,
            output_start: 1,
        }
    }

    fn rebuild(p: &DecoderParams, s: &SequenceInput) -> SequenceInput {
        let mut s = s.clone();
        for (r, id) in s.ids.clone().iter().enumerate() {
            if let Some(id) = id {
                s.embeds.row_mut(r).copy_from_slice(p.token_embedding.row(id.0 as usize));
            }
        }
        s
    }

    #[test]
    fn outputs_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = DecoderParams::init(toy_config(), &mut rng).unwrap();
        let s = toy_sequence(&mut rng, &p, &[1, 2, 3]);
        let tape = p.forward(&[s]).unwrap();
        assert_eq!(tape.log_probs().rows(), 4);
        for r in 0..4 {
            let lse = tape.log_probs().row(r).iter().map(|v| v.exp()).sum::<f64>().ln();
            assert!(lse.abs() < 1e-9);
        }
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = DecoderParams::init(toy_config(), &mut rng).unwrap();
        p.head = Matrix::zeros(4, 7);
        let s = toy_sequence(&mut rng, &p, &[4, 5]);
        let tape = p.forward(&[s]).unwrap();
        for v in tape.log_probs().data() {
            assert!((v + 7f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn later_tokens_do_not_affect_earlier_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = DecoderParams::init(toy_config(), &mut rng).unwrap();
        let a = toy_sequence(&mut rng, &p, &[1, 2, 3, 4]);
        let mut b = a.clone();
        b.ids[4] = Some(TokenId(6));
        let b = rebuild(&p, &b);
        let la = p.forward(&[a]).unwrap();
        let lb = p.forward(&[b]).unwrap();
        // row 4 is the first input that differs; outputs start at row 1
        for r in 0..3 {
            assert_eq!(la.log_probs().row(r), lb.log_probs().row(r));
        }
        assert_ne!(la.log_probs().row(3), lb.log_probs().row(3));
    }

    #[test]
    fn packing_matches_separate_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = DecoderParams::init(toy_config(), &mut rng).unwrap();
        let a = toy_sequence(&mut rng, &p, &[1, 2, 3]);
        let b = toy_sequence(&mut rng, &p, &[5, 6]);
        let packed = p.forward(&[a.clone(), b.clone()]).unwrap();
        let sa = p.forward(&[a]).unwrap();
        let sb = p.forward(&[b]).unwrap();
        let lp = packed.log_probs();
        for (seq, single) in [(0, &sa), (1, &sb)] {
            let range = packed.output_range(seq);
            assert_eq!(range.len(), single.log_probs().rows());
            for (i, r) in range.enumerate() {
                for (x, y) in lp.row(r).iter().zip(single.log_probs().row(i)) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_token_attends_only_to_itself() {
        // with one row, attention output equals the value projection
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cfg = toy_config();
        cfg.n_blocks = 1;
        let p = DecoderParams::init(cfg, &mut rng).unwrap();
        let x = Matrix::glorot(1, 4, &mut rng);
        let b = &p.blocks[0];
        let (out, _) = p.block_forward(b, &x, &[0], &[1]).unwrap();
        let (a, _) = ln_forward(&x, &b.ln1);
        let v = linear(&a, &b.wv, &b.bv).unwrap();
        let mut x1 = linear(&v, &b.wo, &b.bo).unwrap();
        x1.add_assign(&x);
        let (c, _) = ln_forward(&x1, &b.ln2);
        let mut g = linear(&c, &b.w1, &b.b1).unwrap();
        g.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let mut expect = linear(&g, &b.w2, &b.b2).unwrap();
        expect.add_assign(&x1);
        for (a, e) in out.data().iter().zip(expect.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn two_token_attention_matches_hand_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut cfg = toy_config();
        cfg.n_blocks = 1;
        cfg.n_heads = 1;
        let p = DecoderParams::init(cfg, &mut rng).unwrap();
        let b = &p.blocks[0];
        let x = Matrix::glorot(2, 4, &mut rng);
        let (_, cache) = p.block_forward(b, &x, &[0], &[2]).unwrap();
        let (q, k, v) = (&cache.q, &cache.k, &cache.v);
        let dotqk = |i: usize, j: usize| crate::tensor::dot(q.row(i), k.row(j)) / 2.0;
        let (s0, s1) = (dotqk(1, 0), dotqk(1, 1));
        let w0 = s0.exp() / (s0.exp() + s1.exp());
        for c in 0..4 {
            assert!((cache.o.get(0, c) - v.get(0, c)).abs() < 1e-12);
            let expect = w0 * v.get(0, c) + (1.0 - w0) * v.get(1, c);
            assert!((cache.o.get(1, c) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let p = DecoderParams::init(toy_config(), &mut rng).unwrap();
            let s1 = toy_sequence(&mut rng, &p, &[1, 2, 3]);
            let s2 = toy_sequence(&mut rng, &p, &[4, 0]);
            let weights = Matrix::glorot(7, 7, &mut rng);
            let loss = |q: &DecoderParams| {
                let t = q.forward(&[rebuild(q, &s1), rebuild(q, &s2)]).unwrap();
                crate::tensor::dot(t.log_probs().data(), weights.data())
            };
            let tape = p.forward(&[s1.clone(), s2.clone()]).unwrap();
            let (g, d_in) = p.backward(&tape, &weights).unwrap();
            let report = finite_diff_check(loss, &p, &g, 1e-5, 1e-4);
            assert!(report.passed(), "seed {seed}: {:?}", report.failures);
            // input gradient on a visual row
            let h = 1e-6;
            for c in 0..4 {
                let bump = |delta: f64| {
                    let mut s = s1.clone();
                    s.embeds.row_mut(0)[c] += delta;
                    let t = p.forward(&[s, s2.clone()]).unwrap();
                    crate::tensor::dot(t.log_probs().data(), weights.data())
                };
                let num = (bump(h) - bump(-h)) / (2.0 * h);
                let an = d_in[0].get(0, c);
                assert!((num - an).abs() < 1e-6 * (1.0 + an.abs()), "{num} vs {an}");
            }
        }
    }

    #[test]
    fn context_and_vocab_are_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = DecoderParams::init(toy_config(), &mut rng).unwrap();
        let long = toy_sequence(&mut rng, &p, &[1; 11]);
        assert!(matches!(p.forward(&[long]), Err(Error::Context { length: 13, window: 12 })));
        assert!(matches!(p.embed_tokens(&[TokenId(7)]), Err(Error::Contract(_))));
        let mut bad = toy_config();
        bad.n_heads = 3;
        assert!(DecoderParams::init(bad, &mut rng).is_err());
    }
}
