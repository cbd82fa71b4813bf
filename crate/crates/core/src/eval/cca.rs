//! Canonical correlation analysis and the cosine pair score.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ridge added to each (standardized) covariance block.
pub const CCA_RIDGE: f64 = 1e-6;

/// Norm below which a centered projection counts as zero.
const ZERO_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcaProjection {
    /// `[n1, k]`, columns ordered by decreasing canonical correlation.
    pub w1: Tensor,
    /// `[n2, k]`.
    pub w2: Tensor,
    /// Mean of `W1ᵀx1` over the fitting data.
    pub proj_mean1: Vec<f64>,
    pub proj_mean2: Vec<f64>,
    pub correlations: Vec<f64>,
}

fn to_matrix(x: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(x.shape()[0], x.shape()[1], x.data())
}

fn from_matrix(m: &DMatrix<f64>) -> Tensor {
    let mut data = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            data.push(m[(r, c)]);
        }
    }
    Tensor::new(vec![m.nrows(), m.ncols()], data).expect("matrix shape")
}

/// Column means and standard deviations.
fn moments(x: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let n = x.nrows() as f64;
    let mean = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n));
    let sd = DVector::from_iterator(
        x.ncols(),
        x.column_iter()
            .zip(mean.iter())
            .map(|(c, m)| (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()),
    );
    (mean, sd)
}

/// `C^{-1/2}` of a symmetric positive-definite matrix.
fn inv_sqrt(c: DMatrix<f64>, which: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(c);
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::Numeric(format!("{which} covariance is singular even with the ridge")));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Classical CCA via the SVD of the whitened cross-covariance. Variables
/// are standardized before the ridge is applied, which keeps the
/// correlations invariant to rescaling either view.
pub fn fit_cca(x1: &Tensor, x2: &Tensor, k: usize) -> Result<CcaProjection> {
    if x1.rank() != 2 || x2.rank() != 2 || x1.shape()[0] != x2.shape()[0] {
        return Err(Error::Dimension(format!(
            "CCA views must be [N, n] with equal N, got {:?} and {:?}",
            x1.shape(),
            x2.shape()
        )));
    }
    let (n, n1, n2) = (x1.shape()[0], x1.shape()[1], x2.shape()[1]);
    if n <= n1.max(n2) {
        return Err(Error::Contract(format!("CCA needs N > max(n1, n2), got N={n}")));
    }
    if k == 0 || k > n1.min(n2) {
        return Err(Error::Contract(format!("k must be in 1..={}, got {k}", n1.min(n2))));
    }
    let (a, b) = (to_matrix(x1), to_matrix(x2));
    let (ma, sa) = moments(&a);
    let (mb, sb) = moments(&b);
    if sa.iter().chain(sb.iter()).any(|&s| !(s > 0.0)) {
        return Err(Error::Numeric("a CCA variable is constant".into()));
    }
    let za = DMatrix::from_fn(n, n1, |r, c| (a[(r, c)] - ma[c]) / sa[c]);
    let zb = DMatrix::from_fn(n, n2, |r, c| (b[(r, c)] - mb[c]) / sb[c]);
    let denom = (n - 1) as f64;
    let c11 = za.transpose() * &za / denom + DMatrix::identity(n1, n1) * CCA_RIDGE;
    let c22 = zb.transpose() * &zb / denom + DMatrix::identity(n2, n2) * CCA_RIDGE;
    let c12 = za.transpose() * &zb / denom;
    let (i1, i2) = (inv_sqrt(c11, "first view")?, inv_sqrt(c22, "second view")?);
    let t = &i1 * c12 * &i2;
    let svd = t.svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let order = &order[..k];
    let u_k = DMatrix::from_fn(n1, k, |r, c| u[(r, order[c])]);
    let v_k = DMatrix::from_fn(n2, k, |r, c| vt[(order[c], r)]);
    // back to raw-variable coordinates: W = diag(1/sd) C^{-1/2} U
    let mut w1 = i1 * u_k;
    let mut w2 = i2 * v_k;
    for r in 0..n1 {
        w1.row_mut(r).scale_mut(1.0 / sa[r]);
    }
    for r in 0..n2 {
        w2.row_mut(r).scale_mut(1.0 / sb[r]);
    }
    let pm1 = (ma.transpose() * &w1).iter().copied().collect();
    let pm2 = (mb.transpose() * &w2).iter().copied().collect();
    Ok(CcaProjection {
        w1: from_matrix(&w1),
        w2: from_matrix(&w2),
        proj_mean1: pm1,
        proj_mean2: pm2,
        correlations: order.iter().map(|&i| svd.singular_values[i].clamp(0.0, 1.0)).collect(),
    })
}

/// Cosine pair score for one row of each view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcaScore {
    pub value: f64,
    /// A centered projection had zero norm; the score is 0 by convention.
    pub degenerate: bool,
}

impl CcaProjection {
    pub fn k(&self) -> usize {
        self.correlations.len()
    }

    fn project(w: &Tensor, mean: &[f64], x: &[f64]) -> Vec<f64> {
        let k = w.shape()[1];
        (0..k)
            .map(|c| x.iter().enumerate().map(|(r, v)| v * w.data()[r * k + c]).sum::<f64>() - mean[c])
            .collect()
    }

    /// Cosine similarity of the mean-centered projections of `x1` and `x2`.
    pub fn score(&self, x1: &[f64], x2: &[f64]) -> Result<CcaScore> {
        if x1.len() != self.w1.shape()[0] || x2.len() != self.w2.shape()[0] {
            return Err(Error::Dimension(format!(
                "CCA inputs must have {} and {} entries, got {} and {}",
                self.w1.shape()[0],
                self.w2.shape()[0],
                x1.len(),
                x2.len()
            )));
        }
        let a = Self::project(&self.w1, &self.proj_mean1, x1);
        let b = Self::project(&self.w2, &self.proj_mean2, x2);
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na < ZERO_NORM || nb < ZERO_NORM {
            return Ok(CcaScore {
                value: 0.0,
                degenerate: true,
            });
        }
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        Ok(CcaScore {
            value: (dot / (na * nb)).clamp(-1.0, 1.0),
            degenerate: false,
        })
    }

    /// Mean score over aligned rows, with the count of degenerate rows.
    pub fn mean_score(&self, x1: &Tensor, x2: &Tensor) -> Result<(f64, usize)> {
        if x1.rank() != 2 || x2.rank() != 2 || x1.shape()[0] != x2.shape()[0] || x1.shape()[0] == 0 {
            return Err(Error::Dimension("CCA scoring needs aligned nonempty [N, n] views".into()));
        }
        let n = x1.shape()[0];
        let (mut total, mut degenerate) = (0.0, 0);
        for r in 0..n {
            let s = self.score(x1.row(r).data(), x2.row(r).data())?;
            total += s.value;
            degenerate += s.degenerate as usize;
        }
        Ok((total / n as f64, degenerate))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn projection() -> CcaProjection {
        CcaProjection {
            w1: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]),
            w2: Tensor::from_rows(&[vec![0.5, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]),
            proj_mean1: vec![1.0, 1.0],
            proj_mean2: vec![0.0, 0.0],
            correlations: vec![0.9, 0.3],
        }
    }

    #[test]
    fn training_mean_scores_zero() {
        let s = projection().score(&[1.0, 0.5], &[0.0, 0.0, 9.0]).unwrap();
        assert_eq!(s, CcaScore { value: 0.0, degenerate: true });
    }

    #[test]
    fn parallel_projections_score_one() {
        // φ1 = (2, 3) − (1, 1) = (1, 2); φ2 = (0.5·2, 2) = (1, 2)
        let s = projection().score(&[2.0, 1.5], &[2.0, 2.0, -3.0]).unwrap();
        assert!((s.value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn wrong_length_is_rejected() {
        assert!(matches!(projection().score(&[1.0], &[0.0; 3]), Err(Error::Dimension(_))));
    }

    #[test]
    fn too_few_rows_is_rejected() {
        let x = Tensor::zeros(&[3, 3]);
        assert!(matches!(fit_cca(&x, &x, 1), Err(Error::Contract(_))));
    }
}
