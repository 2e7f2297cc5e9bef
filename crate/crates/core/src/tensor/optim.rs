use serde::{Deserialize, Serialize};

use super::Parameters;
use crate::error::{Error, Result};

/// AdamW with decoupled weight decay.
///
/// Each step first shrinks every parameter by `1 - lr * weight_decay`, then
/// applies the bias-corrected adaptive update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step_count: u64,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self::with_betas(learning_rate, weight_decay, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(
        learning_rate: f64,
        weight_decay: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1,
            beta2,
            epsilon,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    fn validate(&self) -> Result<()> {
        let ok = self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0
            && self.learning_rate >= 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid AdamW hyperparameters: beta1={}, beta2={}, epsilon={}, lr={}, wd={}",
                self.beta1, self.beta2, self.epsilon, self.learning_rate, self.weight_decay
            )))
        }
    }

    /// Applies one update. Nothing is modified if any gradient is non-finite.
    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        self.validate()?;
        let grad_slices = grads.slices();
        for (si, g) in grad_slices.iter().enumerate() {
            if let Some(idx) = g.iter().position(|v| !v.is_finite()) {
                let name = grads.names().swap_remove(si);
                return Err(Error::NonFiniteGradient {
                    path: format!("{name}[{idx}]"),
                });
            }
        }
        let param_slices = params.slices_mut();
        if param_slices.len() != grad_slices.len()
            || param_slices.iter().zip(&grad_slices).any(|(p, g)| p.len() != g.len())
        {
            return Err(Error::shape(
                "adamw gradients",
                "one gradient per parameter",
                "mismatched layout",
            ));
        }
        if self.first_moment.is_empty() {
            self.first_moment = grad_slices.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second_moment = self.first_moment.clone();
        } else if self.first_moment.len() != grad_slices.len()
            || self.first_moment.iter().zip(&grad_slices).any(|(m, g)| m.len() != g.len())
        {
            return Err(Error::shape(
                "adamw moment buffers",
                "buffers matching parameter shapes",
                "mismatched layout",
            ));
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.learning_rate * self.weight_decay;
        let (b1, b2) = (self.beta1, self.beta2);

        for (((p, g), m), v) in param_slices
            .into_iter()
            .zip(grad_slices)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] *= decay;
                p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone)]
    struct Scalar(Vec<f64>);

    impl Parameters for Scalar {
        fn slices(&self) -> Vec<&[f64]> {
            vec![&self.0]
        }
        fn slices_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
        fn names(&self) -> Vec<String> {
            vec!["w".into()]
        }
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = Scalar(vec![1.5, -2.0, 0.25]);
        let before = p.0.clone();
        let mut opt = AdamW::new(1e-3, 0.0);
        for _ in 0..5 {
            opt.step(&mut p, &Scalar(vec![0.0; 3])).unwrap();
        }
        assert_eq!(p.0, before);
        assert_eq!(opt.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Scalar(vec![1.0]);
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut p, &Scalar(vec![1.0])).unwrap();
        // m_hat = 1, v_hat = 1 => w = 1 - 0.1 / (1 + 1e-8)
        assert!((p.0[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p.0[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay_with_zero_grad() {
        let mut p = Scalar(vec![3.0]);
        let mut opt = AdamW::new(1e-4, 0.01);
        opt.step(&mut p, &Scalar(vec![0.0])).unwrap();
        assert_eq!(p.0[0], 3.0 * (1.0 - 1e-6));
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_leaves_state() {
        let mut p = Scalar(vec![1.0, 2.0]);
        let mut opt = AdamW::new(0.1, 0.0);
        let err = opt.step(&mut p, &Scalar(vec![0.0, f64::NAN])).unwrap_err();
        assert_eq!(err.to_string(), "non-finite gradient at w[1]");
        assert_eq!(p.0, vec![1.0, 2.0]);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn rejects_invalid_betas() {
        let mut p = Scalar(vec![1.0]);
        let mut opt = AdamW::with_betas(0.1, 0.0, 1.0, 0.999, 1e-8);
        assert!(opt.step(&mut p, &Scalar(vec![1.0])).is_err());
    }
}
