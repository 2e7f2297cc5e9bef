//! Symmetric temperature-scaled contrastive loss over cosine similarities.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Directional and total losses together with gradients for both batches.
#[derive(Debug, Clone)]
pub struct ContrastiveLoss {
    pub image_to_tab: f64,
    pub tab_to_image: f64,
    pub total: f64,
    pub grad_image: Matrix,
    pub grad_tab: Matrix,
}

fn check_batches(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::shape(
            "contrastive batches",
            format!("{}x{}", a.rows(), a.cols()),
            format!("{}x{}", b.rows(), b.cols()),
        ));
    }
    if a.rows() < 2 {
        return Err(Error::Degenerate(format!(
            "contrastive batch needs at least 2 pairs, got {}",
            a.rows()
        )));
    }
    Ok(())
}

/// Unit-normalized rows and the original norms.
pub(crate) fn normalize_rows(x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut u = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = u.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Degenerate(format!("embedding row {r} has norm {n}")));
        }
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((u, norms))
}

/// Pairwise cosine similarities, anchors along rows.
pub fn cosine_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let (u, _) = normalize_rows(a)?;
    let (v, _) = normalize_rows(b)?;
    u.matmul_t(&v)
}

/// Mean over anchors `j` of `-log(exp(s_jj/tau) / sum_k exp(s_jk/tau))`,
/// where `k` ranges over all columns or, by default, all but `j`.
/// Returns the loss and its gradient with respect to `s`.
fn directional(s: &Matrix, tau: f64, include_positive: bool) -> (f64, Matrix) {
    let n = s.rows();
    let mut grad = Matrix::zeros(n, n);
    let mut total = 0.0;
    for j in 0..n {
        let row = s.row(j);
        let logits: Vec<f64> = row.iter().map(|v| v / tau).collect();
        let in_denominator = |k: usize| include_positive || k != j;
        let max = (0..n)
            .filter(|&k| in_denominator(k))
            .map(|k| logits[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..n)
            .filter(|&k| in_denominator(k))
            .map(|k| (logits[k] - max).exp())
            .sum();
        let lse = max + sum.ln();
        total += lse - logits[j];
        let g = grad.row_mut(j);
        for k in (0..n).filter(|&k| in_denominator(k)) {
            g[k] = (logits[k] - lse).exp();
        }
        g[j] -= 1.0;
    }
    grad.scale(1.0 / (tau * n as f64));
    (total / n as f64, grad)
}

/// Image-to-tabular loss alone.
pub fn info_nce_i2t(image: &Matrix, tab: &Matrix, tau: f64, include_positive: bool) -> Result<f64> {
    check_batches(image, tab)?;
    check_tau(tau)?;
    let s = cosine_matrix(image, tab)?;
    Ok(directional(&s, tau, include_positive).0)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive, got {tau}")))
    }
}

/// Mean of both directional losses with gradients through the cosine
/// normalization back to the raw embeddings.
pub fn total_contrastive_loss(
    image: &Matrix,
    tab: &Matrix,
    tau: f64,
    include_positive: bool,
) -> Result<ContrastiveLoss> {
    check_batches(image, tab)?;
    check_tau(tau)?;
    let (u, nu) = normalize_rows(image)?;
    let (v, nv) = normalize_rows(tab)?;
    let s = u.matmul_t(&v)?;
    let (l_it, g_it) = directional(&s, tau, include_positive);
    let (l_ti, g_ti) = directional(&s.transpose(), tau, include_positive);
    let mut ds = g_it;
    ds.add_assign(&g_ti.transpose());
    ds.scale(0.5);
    let du = ds.matmul(&v)?;
    let dv = ds.t_matmul(&u)?;
    Ok(ContrastiveLoss {
        image_to_tab: l_it,
        tab_to_image: l_ti,
        total: 0.5 * (l_it + l_ti),
        grad_image: unnormalize_grad(&u, &nu, &du),
        grad_tab: unnormalize_grad(&v, &nv, &dv),
    })
}

/// Chain rule through `u = x / |x|`.
fn unnormalize_grad(u: &Matrix, norms: &[f64], du: &Matrix) -> Matrix {
    let mut dx = du.clone();
    for (r, n) in norms.iter().enumerate() {
        let ur = u.row(r);
        let proj: f64 = ur.iter().zip(du.row(r)).map(|(a, b)| a * b).sum();
        for (d, uv) in dx.row_mut(r).iter_mut().zip(ur) {
            *d = (*d - proj * uv) / n;
        }
    }
    dx
}
