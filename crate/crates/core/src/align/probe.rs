//! Ridge linear probe from frozen image embeddings to standardized OCT
//! biomarkers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::encoder::{ImageEncoder, Standardizer, TabularEncoder};
use crate::cohort::{BiomarkerSchema, CohortSample, Modality};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    pub x_mean: Vec<f64>,
    pub y_mean: Vec<f64>,
    /// `(features, targets)`.
    pub coef: DMatrix<f64>,
}

fn to_dmatrix(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

/// Least squares with an L2 penalty `lambda` on the (centred) coefficients.
pub fn ridge_fit(x: &Matrix, y: &Matrix, lambda: f64) -> Result<RidgeModel> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("ridge lambda must be positive, got {lambda}")));
    }
    if x.rows() != y.rows() || x.rows() == 0 {
        return Err(Error::shape("ridge design", x.rows(), y.rows()));
    }
    let xd = to_dmatrix(x);
    let yd = to_dmatrix(y);
    let xm = column_means(&xd);
    let ym = column_means(&yd);
    let mut xc = xd;
    for mut row in xc.row_iter_mut() {
        row -= xm.transpose();
    }
    let mut yc = yd;
    for mut row in yc.row_iter_mut() {
        row -= ym.transpose();
    }
    let mut gram = xc.transpose() * &xc;
    for i in 0..gram.nrows() {
        gram[(i, i)] += lambda;
    }
    let rhs = xc.transpose() * yc;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Degenerate("ridge normal equations are not positive definite".into()))?;
    Ok(RidgeModel {
        x_mean: xm.iter().copied().collect(),
        y_mean: ym.iter().copied().collect(),
        coef: chol.solve(&rhs),
    })
}

impl RidgeModel {
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.x_mean.len() {
            return Err(Error::shape("ridge input", self.x_mean.len(), x.cols()));
        }
        let mut xd = to_dmatrix(x);
        let xm = DVector::from_vec(self.x_mean.clone());
        for mut row in xd.row_iter_mut() {
            row -= xm.transpose();
        }
        let mut p = xd * &self.coef;
        let ym = DVector::from_vec(self.y_mean.clone());
        for mut row in p.row_iter_mut() {
            row += ym.transpose();
        }
        let data: Vec<f64> = p.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect();
        Matrix::from_vec(p.nrows(), p.ncols(), data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub name: String,
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
}

impl ProbeMetrics {
    /// MAE, RMSE and R^2 of `pred` against `truth`.
    pub fn compute(name: impl Into<String>, pred: &[f64], truth: &[f64]) -> Result<Self> {
        if pred.len() != truth.len() || pred.is_empty() {
            return Err(Error::Evaluation("probe metrics need equal, non-empty columns".into()));
        }
        let n = truth.len() as f64;
        let mean = truth.iter().sum::<f64>() / n;
        let (mut abs, mut sq, mut tot) = (0.0, 0.0, 0.0);
        for (p, t) in pred.iter().zip(truth) {
            abs += (p - t).abs();
            sq += (p - t).powi(2);
            tot += (t - mean).powi(2);
        }
        let r2 = if tot > 0.0 {
            1.0 - sq / tot
        } else if sq == 0.0 {
            1.0
        } else {
            0.0
        };
        Ok(Self {
            name: name.into(),
            mae: abs / n,
            rmse: (sq / n).sqrt(),
            r2,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub per_biomarker: Vec<ProbeMetrics>,
    /// Means of the per-biomarker metrics.
    pub aggregate: ProbeMetrics,
}

/// Fits a ridge probe on `train` embeddings and scores it on `test`, with
/// OCT biomarker targets z-scored by training statistics.
pub fn linear_probe_regression(
    encoder: &ImageEncoder,
    train: &[CohortSample],
    test: &[CohortSample],
    lambda: f64,
) -> Result<ProbeReport> {
    if test.is_empty() || train.is_empty() {
        return Err(Error::Evaluation("linear probe needs train and test samples".into()));
    }
    let targets = |s: &[CohortSample]| {
        let refs: Vec<_> = s.iter().map(|x| &x.biomarkers).collect();
        TabularEncoder::raw_matrix(Modality::Oct, &refs)
    };
    let y_train_raw = targets(train)?;
    let stats = Standardizer::fit(&y_train_raw)?;
    let y_train = stats.apply_rows(&y_train_raw);
    let y_test = stats.apply_rows(&targets(test)?);
    let x_train = encoder.apply_batch(&encoder.sample_pixels(train)?)?;
    let x_test = encoder.apply_batch(&encoder.sample_pixels(test)?)?;
    let model = ridge_fit(&x_train, &y_train, lambda)?;
    let pred = model.predict(&x_test)?;
    let schema = BiomarkerSchema::standard();
    let mut per = Vec::with_capacity(y_test.cols());
    for c in 0..y_test.cols() {
        let p: Vec<f64> = (0..pred.rows()).map(|r| pred.get(r, c)).collect();
        let t: Vec<f64> = (0..y_test.rows()).map(|r| y_test.get(r, c)).collect();
        per.push(ProbeMetrics::compute(schema.get(c).name.clone(), &p, &t)?);
    }
    let k = per.len() as f64;
    let aggregate = ProbeMetrics {
        name: "aggregate".into(),
        mae: per.iter().map(|m| m.mae).sum::<f64>() / k,
        rmse: per.iter().map(|m| m.rmse).sum::<f64>() / k,
        r2: per.iter().map(|m| m.r2).sum::<f64>() / k,
    };
    Ok(ProbeReport {
        per_biomarker: per,
        aggregate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_constant_predictors() {
        let t = [1.0, 2.0, 4.0];
        let m = ProbeMetrics::compute("x", &t, &t).unwrap();
        assert_eq!((m.mae, m.rmse, m.r2), (0.0, 0.0, 1.0));
        let mean = 7.0 / 3.0;
        let m = ProbeMetrics::compute("x", &[mean; 3], &t).unwrap();
        assert!(m.r2.abs() < 1e-12);
    }

    #[test]
    fn ridge_recovers_a_linear_map() {
        let x = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
            vec![2.0, -1.0],
            vec![-1.0, 3.0],
        ])
        .unwrap();
        let y_rows: Vec<Vec<f64>> = x.to_rows().iter().map(|r| vec![3.0 * r[0] - r[1] + 0.5]).collect();
        let y = Matrix::from_rows(&y_rows).unwrap();
        let m = ridge_fit(&x, &y, 1e-9).unwrap();
        let p = m.predict(&x).unwrap();
        for (a, b) in p.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_ridge_is_rejected() {
        let x = Matrix::zeros(3, 2);
        assert!(ridge_fit(&x, &x, 0.0).is_err());
        // a rank-deficient design is still solvable with a positive ridge
        assert!(ridge_fit(&x, &x, 1e-3).is_ok());
    }
}
