//! Projection of frozen image embeddings into the decoder's token space.
//!
//! The OCT embedding first passes through its own projector into the CFP
//! embedding space; one shared mapper then carries either modality into the
//! text dimension. The decoder input is `[h_cfp, h_oct, prompt...]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::{Embedding, EmbeddingRole};
use crate::error::{Error, Result};
use crate::tensor::{prefixed, Activation, Matrix, Mlp, MlpTape, Parameters};

/// Number of visual tokens that precede the prompt.
pub const VISUAL_TOKENS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectorParams {
    pub oct_projector: Mlp,
    pub text_mapper: Mlp,
}

impl ProjectorParams {
    /// `d -> d_m` projector and `d_m -> d_t` mapper, both with one tanh
    /// hidden layer.
    pub fn init<R: Rng + ?Sized>(d: usize, d_m: usize, d_t: usize, rng: &mut R) -> Self {
        Self {
            oct_projector: Mlp::init(&[d, d_m, d], Activation::Tanh, rng),
            text_mapper: Mlp::init(&[d, d_m, d_t], Activation::Tanh, rng),
        }
    }

    pub fn new(oct_projector: Mlp, text_mapper: Mlp) -> Result<Self> {
        if oct_projector.output_dim() != text_mapper.input_dim() {
            return Err(Error::shape(
                "projector chain",
                text_mapper.input_dim(),
                oct_projector.output_dim(),
            ));
        }
        Ok(Self {
            oct_projector,
            text_mapper,
        })
    }

    pub fn oct_dim(&self) -> usize {
        self.oct_projector.input_dim()
    }

    pub fn cfp_dim(&self) -> usize {
        self.text_mapper.input_dim()
    }

    pub fn text_dim(&self) -> usize {
        self.text_mapper.output_dim()
    }

    pub fn project_oct(&self, z: &Embedding) -> Result<Embedding> {
        if z.role() != EmbeddingRole::ZOct {
            return Err(Error::Contract(format!("project_oct expects z_oct, got {:?}", z.role())));
        }
        let (out, _) = self.oct_projector.forward(z.values())?;
        Embedding::new(EmbeddingRole::ZOctProjected, out)
    }

    pub fn feature_to_text(&self, e: &Embedding) -> Result<Embedding> {
        let role = match e.role() {
            EmbeddingRole::ZOctProjected => EmbeddingRole::HOct,
            EmbeddingRole::ZCfp => EmbeddingRole::HCfp,
            other => {
                return Err(Error::Contract(format!(
                    "feature_to_text accepts z_oct_projected or z_cfp, got {other:?}"
                )))
            }
        };
        if e.dim() != self.cfp_dim() {
            return Err(Error::shape("feature_to_text input", self.cfp_dim(), e.dim()));
        }
        let (out, _) = self.text_mapper.forward(e.values())?;
        Embedding::new(role, out)
    }

    /// Visual tokens for a batch: row `i` of the results is `h_cfp` and
    /// `h_oct` of sample `i`.
    pub fn forward_batch(&self, z_oct: &Matrix, z_cfp: &Matrix) -> Result<(Matrix, Matrix, ProjectorTape)> {
        if z_oct.rows() != z_cfp.rows() {
            return Err(Error::shape("visual batch", z_oct.rows(), z_cfp.rows()));
        }
        let (proj, oct_tape) = self.oct_projector.forward_batch(z_oct)?;
        let (h_oct, oct_text) = self.text_mapper.forward_batch(&proj)?;
        let (h_cfp, cfp_text) = self.text_mapper.forward_batch(z_cfp)?;
        Ok((
            h_cfp,
            h_oct,
            ProjectorTape {
                oct_tape,
                oct_text,
                cfp_text,
            },
        ))
    }

    /// Gradients for upstream gradients on `h_cfp` and `h_oct`. The shared
    /// mapper collects contributions from both modalities.
    pub fn backward_batch(&self, tape: &ProjectorTape, d_cfp: &Matrix, d_oct: &Matrix) -> Result<ProjectorParams> {
        let (mut g_mapper, _) = self.text_mapper.backward_batch(&tape.cfp_text, d_cfp)?;
        let (g_mapper_oct, d_proj) = self.text_mapper.backward_batch(&tape.oct_text, d_oct)?;
        g_mapper.accumulate(&g_mapper_oct);
        let (g_proj, _) = self.oct_projector.backward_batch(&tape.oct_tape, &d_proj)?;
        Ok(ProjectorParams {
            oct_projector: g_proj,
            text_mapper: g_mapper,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ProjectorTape {
    oct_tape: MlpTape,
    oct_text: MlpTape,
    cfp_text: MlpTape,
}

impl Parameters for ProjectorParams {
    fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.oct_projector.slices();
        v.extend(self.text_mapper.slices());
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.oct_projector.slices_mut();
        v.extend(self.text_mapper.slices_mut());
        v
    }

    fn names(&self) -> Vec<String> {
        let mut v = prefixed("oct_projector", self.oct_projector.names());
        v.extend(prefixed("text_mapper", self.text_mapper.names()));
        v
    }
}

/// Decoder input prefix: CFP token, OCT token, then prompt embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedSequence {
    tokens: Matrix,
}

impl FusedSequence {
    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn total_length(&self) -> usize {
        self.tokens.rows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn visual(&self) -> Matrix {
        self.tokens.slice_rows(0, VISUAL_TOKENS)
    }

    pub fn prompt(&self) -> Matrix {
        self.tokens.slice_rows(VISUAL_TOKENS, self.tokens.rows())
    }
}

pub fn fuse_sequence(h_cfp: &[f64], h_oct: &[f64], prompt: &Matrix) -> Result<FusedSequence> {
    let d = h_cfp.len();
    if h_oct.len() != d {
        return Err(Error::shape("h_oct", d, h_oct.len()));
    }
    if prompt.rows() > 0 && prompt.cols() != d {
        return Err(Error::shape("prompt embedding", d, prompt.cols()));
    }
    let mut data = Vec::with_capacity((VISUAL_TOKENS + prompt.rows()) * d);
    data.extend_from_slice(h_cfp);
    data.extend_from_slice(h_oct);
    data.extend_from_slice(prompt.data());
    Ok(FusedSequence {
        tokens: Matrix::from_vec(VISUAL_TOKENS + prompt.rows(), d, data)?,
    })
}

/// Fuses already-typed embeddings, checking their roles.
pub fn fuse_embeddings(h_cfp: &Embedding, h_oct: &Embedding, prompt: &Matrix) -> Result<FusedSequence> {
    if h_cfp.role() != EmbeddingRole::HCfp || h_oct.role() != EmbeddingRole::HOct {
        return Err(Error::Contract(format!(
            "fuse expects (h_cfp, h_oct), got ({:?}, {:?})",
            h_cfp.role(),
            h_oct.role()
        )));
    }
    fuse_sequence(h_cfp.values(), h_oct.values(), prompt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, DenseLayer};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_mlp(d: usize) -> Mlp {
        let layer = || DenseLayer {
            weight: Matrix::identity(d),
            bias: vec![0.0; d],
            activation: Activation::Identity,
        };
        Mlp::new(vec![layer(), layer()]).unwrap()
    }

    #[test]
    fn identity_projector_passes_through() {
        let p = ProjectorParams::new(identity_mlp(3), identity_mlp(3)).unwrap();
        let z = Embedding::new(EmbeddingRole::ZOct, vec![1.0, -2.0, 0.5]).unwrap();
        let out = p.project_oct(&z).unwrap();
        assert_eq!(out.values(), z.values());
        assert_eq!(out.role(), EmbeddingRole::ZOctProjected);
    }

    #[test]
    fn shared_mapper_is_observable() {
        let p = ProjectorParams::init(4, 4, 6, &mut ChaCha8Rng::seed_from_u64(2));
        let v = vec![0.3, -0.1, 0.8, 0.0];
        let c = p.feature_to_text(&Embedding::new(EmbeddingRole::ZCfp, v.clone()).unwrap()).unwrap();
        let o = p.feature_to_text(&Embedding::new(EmbeddingRole::ZOctProjected, v).unwrap()).unwrap();
        assert_eq!(c.values(), o.values());
        assert_eq!((c.role(), o.role()), (EmbeddingRole::HCfp, EmbeddingRole::HOct));
    }

    #[test]
    fn zero_input_through_zero_bias_mapper_is_zero() {
        let p = ProjectorParams::init(4, 4, 6, &mut ChaCha8Rng::seed_from_u64(3));
        let h = p.feature_to_text(&Embedding::new(EmbeddingRole::ZCfp, vec![0.0; 4]).unwrap()).unwrap();
        assert!(h.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn roles_and_dims_are_checked() {
        let p = ProjectorParams::init(4, 3, 6, &mut ChaCha8Rng::seed_from_u64(4));
        let tab = Embedding::new(EmbeddingRole::ZTab, vec![0.0; 3]).unwrap();
        assert!(matches!(p.feature_to_text(&tab), Err(Error::Contract(_))));
        assert!(matches!(p.project_oct(&tab), Err(Error::Contract(_))));
        let wide = Embedding::new(EmbeddingRole::ZCfp, vec![0.0; 5]).unwrap();
        assert!(matches!(p.feature_to_text(&wide), Err(Error::Shape { .. })));
        assert!(ProjectorParams::new(identity_mlp(3), identity_mlp(4)).is_err());
    }

    #[test]
    fn batch_projection_preserves_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ProjectorParams::init(4, 4, 6, &mut rng);
        let z = Matrix::glorot(3, 4, &mut rng);
        let (_, h_oct, _) = p.forward_batch(&z, &z).unwrap();
        for r in 0..3 {
            let single = p
                .feature_to_text(&p.project_oct(&Embedding::new(EmbeddingRole::ZOct, z.row(r).to_vec()).unwrap()).unwrap())
                .unwrap();
            assert_eq!(single.values(), h_oct.row(r));
        }
    }

    #[test]
    fn fused_order_and_length() {
        let prompt = Matrix::from_rows(&[vec![3.0, 3.0], vec![4.0, 4.0], vec![5.0, 5.0]]).unwrap();
        let f = fuse_sequence(&[1.0, 1.0], &[2.0, 2.0], &prompt).unwrap();
        assert_eq!(f.total_length(), 5);
        let firsts: Vec<f64> = (0..5).map(|r| f.tokens().get(r, 0)).collect();
        assert_eq!(firsts, [1.0, 2.0, 3.0, 4.0, 5.0]);
        let empty = fuse_sequence(&[1.0, 1.0], &[2.0, 2.0], &Matrix::zeros(0, 2)).unwrap();
        assert_eq!(empty.total_length(), 2);
        assert!(fuse_sequence(&[1.0], &[2.0, 2.0], &prompt).is_err());
    }

    #[test]
    fn permuting_prompt_moves_only_prompt_positions() {
        let a = Matrix::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![4.0], vec![3.0]]).unwrap();
        let fa = fuse_sequence(&[1.0], &[2.0], &a).unwrap();
        let fb = fuse_sequence(&[1.0], &[2.0], &b).unwrap();
        assert_eq!(fa.visual(), fb.visual());
        assert_eq!(fa.prompt().get(0, 0), fb.prompt().get(1, 0));
    }

    #[test]
    fn projector_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = ProjectorParams::init(4, 3, 5, &mut rng);
            let zo = Matrix::glorot(2, 4, &mut rng);
            let zc = Matrix::glorot(2, 4, &mut rng);
            let wc = Matrix::glorot(2, 5, &mut rng);
            let wo = Matrix::glorot(2, 5, &mut rng);
            let loss = |q: &ProjectorParams| {
                let (c, o, _) = q.forward_batch(&zo, &zc).unwrap();
                let dot = |a: &Matrix, b: &Matrix| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
                dot(&c, &wc) + dot(&o, &wo)
            };
            let (_, _, tape) = p.forward_batch(&zo, &zc).unwrap();
            let g = p.backward_batch(&tape, &wc, &wo).unwrap();
            let report = finite_diff_check(loss, &p, &g, 1e-5, 1e-4);
            assert!(report.passed(), "seed {seed}: {:?}", report.worst);
        }
    }
}
