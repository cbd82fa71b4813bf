use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PROBE_MAX_ITERS: usize = 5000;
pub const PROBE_GRAD_TOL: f64 = 1e-5;

/// Multinomial logistic regression on standardized features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    /// `[D, C]`, acting on standardized features.
    pub weights: Tensor,
    pub bias: Vec<f64>,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    pub train_accuracy: f64,
}

fn check_labels(n: usize, labels: &[u16], n_classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Contract(format!("{n} rows but {} labels", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= n_classes) {
        return Err(Error::Contract(format!("label {l} outside {n_classes} classes")));
    }
    Ok(())
}

impl LinearProbe {
    /// Fits by gradient descent with step `1/L` for the smoothness bound
    /// `L = λ_max(XᵀX/N) / 2`, until the gradient norm falls below
    /// [`PROBE_GRAD_TOL`] or [`PROBE_MAX_ITERS`] iterations.
    pub fn fit(x: &Tensor, labels: &[u16], n_classes: usize) -> Result<LinearProbe> {
        if x.rank() != 2 {
            return Err(Error::Dimension(format!("probe inputs must be [N, D], got {:?}", x.shape())));
        }
        let (n, d) = (x.shape()[0], x.shape()[1]);
        check_labels(n, labels, n_classes)?;
        if n < n_classes {
            return Err(Error::Contract(format!("need N ≥ C, got N={n}, C={n_classes}")));
        }
        if labels.iter().all(|&l| l == labels[0]) {
            return Err(Error::Contract("labels contain a single class".into()));
        }
        let mut mean = vec![0.0; d];
        let mut scale = vec![0.0; d];
        for r in 0..n {
            for j in 0..d {
                mean[j] += x.data()[r * d + j] / n as f64;
            }
        }
        for r in 0..n {
            for j in 0..d {
                scale[j] += (x.data()[r * d + j] - mean[j]).powi(2) / n as f64;
            }
        }
        for s in &mut scale {
            *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
        }
        // standardized design with a trailing bias column
        let p = d + 1;
        let mut xs = vec![0.0; n * p];
        for r in 0..n {
            for j in 0..d {
                xs[r * p + j] = (x.data()[r * d + j] - mean[j]) / scale[j];
            }
            xs[r * p + d] = 1.0;
        }
        let design = Tensor::new(vec![n, p], xs)?;
        let gram = design.transpose()?.matmul(&design)?;
        let gm = DMatrix::from_row_slice(p, p, gram.data());
        let lmax = SymmetricEigen::new(gm).eigenvalues.max() / n as f64;
        let step = 1.0 / (0.5 * lmax.max(1e-12));

        let c = n_classes;
        let mut w = Tensor::zeros(&[p, c]);
        let design_t = design.transpose()?;
        let mut iterations = 0;
        let mut grad_norm = f64::INFINITY;
        while iterations < PROBE_MAX_ITERS {
            let logits = design.matmul(&w)?;
            let mut resid = softmax_rows(&logits);
            for (r, &l) in labels.iter().enumerate() {
                resid.data_mut()[r * c + l as usize] -= 1.0;
            }
            let g = design_t.matmul(&resid)?.map(|v| v / n as f64);
            grad_norm = g.norm();
            if grad_norm < PROBE_GRAD_TOL {
                break;
            }
            for (wi, gi) in w.data_mut().iter_mut().zip(g.data()) {
                *wi -= step * gi;
            }
            iterations += 1;
        }
        let weights = Tensor::new(vec![d, c], w.data()[..d * c].to_vec())?;
        let bias = w.data()[d * c..].to_vec();
        let mut probe = LinearProbe {
            weights,
            bias,
            feature_mean: mean,
            feature_scale: scale,
            iterations,
            grad_norm,
            train_accuracy: 0.0,
        };
        probe.train_accuracy = probe.accuracy(x, labels)?;
        Ok(probe)
    }

    pub fn input_dim(&self) -> usize {
        self.feature_mean.len()
    }

    pub fn scores(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.input_dim();
        if x.rank() != 2 || x.shape()[1] != d {
            return Err(Error::Dimension(format!("probe expects [N, {d}], got {:?}", x.shape())));
        }
        let z = Tensor::new(
            x.shape().to_vec(),
            x.data()
                .iter()
                .enumerate()
                .map(|(i, v)| (v - self.feature_mean[i % d]) / self.feature_scale[i % d])
                .collect(),
        )?;
        let mut s = z.matmul(&self.weights)?;
        let c = self.bias.len();
        for (i, v) in s.data_mut().iter_mut().enumerate() {
            *v += self.bias[i % c];
        }
        Ok(s)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<u16>> {
        Ok(argmax_rows(&self.scores(x)?))
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[u16]) -> Result<f64> {
        check_labels(x.shape()[0], labels, self.bias.len())?;
        Ok(accuracy(&self.predict(x)?, labels))
    }
}

pub(crate) fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows(scores: &Tensor) -> Vec<u16> {
    let c = scores.shape()[1];
    scores
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as u16
        })
        .collect()
}

pub fn accuracy(pred: &[u16], labels: &[u16]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Fits on one split and reports accuracy on another.
pub fn probe_accuracy(
    train_x: &Tensor,
    train_y: &[u16],
    test_x: &Tensor,
    test_y: &[u16],
    n_classes: usize,
) -> Result<f64> {
    LinearProbe::fit(train_x, train_y, n_classes)?.accuracy(test_x, test_y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn blobs(n: usize, sep: f64, seed: u64) -> (Tensor, Vec<u16>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let l = (i % 2) as u16;
            let c = if l == 0 { -sep } else { sep };
            data.push(c + rng.sample::<f64, _>(StandardNormal));
            data.push(rng.sample::<f64, _>(StandardNormal));
            labels.push(l);
        }
        (Tensor::new(vec![n, 2], data).unwrap(), labels)
    }

    #[test]
    fn separable_blobs_are_classified_perfectly() {
        let (x, y) = blobs(200, 8.0, 1);
        let (xt, yt) = blobs(100, 8.0, 2);
        assert_eq!(probe_accuracy(&x, &y, &xt, &yt, 2).unwrap(), 1.0);
    }

    #[test]
    fn single_class_is_rejected() {
        let x = Tensor::zeros(&[4, 2]);
        assert!(matches!(LinearProbe::fit(&x, &[1, 1, 1, 1], 2), Err(Error::Contract(_))));
    }

    #[test]
    fn wrong_input_dimension_is_rejected() {
        let (x, y) = blobs(20, 3.0, 3);
        let p = LinearProbe::fit(&x, &y, 2).unwrap();
        assert!(matches!(p.predict(&Tensor::zeros(&[2, 3])), Err(Error::Dimension(_))));
    }
}
