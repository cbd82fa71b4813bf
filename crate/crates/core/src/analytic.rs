//! Linear-Gaussian multimodal model with closed-form marginals.
//!
//! `z ~ N(0, I)`, `x_m = a_m ⊙ z + σ_m ⊙ ε_m`, all diagonal, so every
//! latent dimension is an independent scalar problem.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::distributions::{Family, LikelihoodFamily};
use crate::error::{Error, Result};
use crate::models::{Combination, ModalityConfig, ModelConfig, MultimodalModel, PriorConfig, ScaleMode};
use crate::tensor::{ParamStore, Tensor};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Inverse of `softplus` on `(0, ∞)`.
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussian {
    /// Per-modality loadings `a_m`, each of length D.
    pub loadings: Vec<Vec<f64>>,
    /// Per-modality noise standard deviations `σ_m`.
    pub noise: Vec<Vec<f64>>,
}

impl LinearGaussian {
    pub fn new(loadings: Vec<Vec<f64>>, noise: Vec<Vec<f64>>) -> Result<Self> {
        let d = loadings.first().map_or(0, Vec::len);
        if loadings.is_empty() || loadings.len() != noise.len() || d == 0 {
            return Err(Error::Config("need matching nonempty loadings and noise".into()));
        }
        if loadings.iter().chain(&noise).any(|v| v.len() != d) {
            return Err(Error::Config("all loading and noise vectors need length D".into()));
        }
        if noise.iter().flatten().any(|&s| !(s > 0.0)) {
            return Err(Error::Domain("noise scales must be positive".into()));
        }
        Ok(LinearGaussian { loadings, noise })
    }

    /// The two-modality, two-dimensional fixture used across the tests.
    pub fn reference() -> Self {
        LinearGaussian::new(
            vec![vec![0.4, 0.24], vec![0.32, 0.48]],
            vec![vec![0.7, 0.9], vec![1.0, 0.5]],
        )
        .expect("valid fixture")
    }

    pub fn latent_dim(&self) -> usize {
        self.loadings[0].len()
    }

    pub fn num_modalities(&self) -> usize {
        self.loadings.len()
    }

    pub fn config(&self) -> ModelConfig {
        let d = self.latent_dim();
        ModelConfig {
            modalities: (0..self.num_modalities())
                .map(|m| ModalityConfig::new(&format!("lin{m}"), d, vec![], LikelihoodFamily::Gaussian))
                .collect(),
            latent_dim: d,
            posterior_family: Family::Gaussian,
            scale_mode: ScaleMode::Free,
            prior: PriorConfig {
                family: Family::Gaussian,
                learn_scale: false,
                learn_loc: false,
            },
            combination: Combination::MoE,
        }
    }

    /// Exact single-modality posterior `p(z | x_m)`: per-dim precision
    /// `1 + a²/σ²` and mean `(a/σ²)·x / precision`.
    fn posterior_coefficients(&self, m: usize) -> (Vec<f64>, Vec<f64>) {
        let (a, s) = (&self.loadings[m], &self.noise[m]);
        let gain = a.iter().zip(s).map(|(a, s)| (a / (s * s)) / (1.0 + a * a / (s * s))).collect();
        let sd = a.iter().zip(s).map(|(a, s)| (1.0 + a * a / (s * s)).powf(-0.5)).collect();
        (gain, sd)
    }

    /// MoE model whose per-modality encoders are the exact single-modality
    /// posteriors and whose decoders are the true likelihoods.
    pub fn model(&self) -> Result<MultimodalModel> {
        let d = self.latent_dim();
        let diag = |v: &[f64]| {
            let mut t = Tensor::zeros(&[d, d]);
            for (i, x) in v.iter().enumerate() {
                t.data_mut()[i * d + i] = *x;
            }
            t
        };
        let mut p = ParamStore::new();
        for m in 0..self.num_modalities() {
            let (gain, sd) = self.posterior_coefficients(m);
            p.insert(format!("enc{m}.loc.w"), diag(&gain))?;
            p.insert(format!("enc{m}.loc.b"), Tensor::zeros(&[d]))?;
            p.insert(format!("enc{m}.scale.w"), Tensor::zeros(&[d, d]))?;
            p.insert(
                format!("enc{m}.scale.b"),
                Tensor::vector(sd.iter().map(|&s| softplus_inv(s)).collect()),
            )?;
            p.insert(format!("dec{m}.out.w"), diag(&self.loadings[m]))?;
            p.insert(format!("dec{m}.out.b"), Tensor::zeros(&[d]))?;
            p.insert(
                format!("dec{m}.log_scale"),
                Tensor::vector(self.noise[m].iter().map(|s| s.ln()).collect()),
            )?;
        }
        MultimodalModel::from_parts(self.config(), p)
    }

    /// Draws `n` joint observations; one `[n, D]` tensor per modality.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Tensor> {
        let d = self.latent_dim();
        let mut out: Vec<Vec<f64>> = vec![Vec::with_capacity(n * d); self.num_modalities()];
        for _ in 0..n {
            let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            for (m, buf) in out.iter_mut().enumerate() {
                for i in 0..d {
                    let e: f64 = rng.sample(StandardNormal);
                    buf.push(self.loadings[m][i] * z[i] + self.noise[m][i] * e);
                }
            }
        }
        out.into_iter()
            .map(|v| Tensor::new(vec![n, d], v).expect("consistent shape"))
            .collect()
    }

    /// `log p(x_S)` for the modalities in `subset`, given one observation
    /// row per modality in the same order. Each latent dimension is a
    /// Gaussian with covariance `diag(σ²) + a aᵀ`, evaluated with the
    /// determinant lemma and Sherman-Morrison.
    pub fn log_marginal(&self, subset: &[usize], xs: &[&[f64]]) -> f64 {
        let d = self.latent_dim();
        let mut total = 0.0;
        for i in 0..d {
            let mut log_det = 0.0;
            let mut quad = 0.0;
            let mut r = 0.0;
            let mut u = 0.0;
            for (&m, x) in subset.iter().zip(xs) {
                let (a, s2) = (self.loadings[m][i], self.noise[m][i].powi(2));
                log_det += s2.ln();
                quad += x[i] * x[i] / s2;
                r += a * a / s2;
                u += a * x[i] / s2;
            }
            log_det += (1.0 + r).ln();
            quad -= u * u / (1.0 + r);
            total += -0.5 * (subset.len() as f64 * LN_2PI + log_det + quad);
        }
        total
    }

    /// Mean of [`Self::log_marginal`] over the rows of a batch. `xs` holds
    /// every modality, indexed by modality; only those in `subset` are used.
    pub fn mean_log_marginal(&self, subset: &[usize], xs: &[Tensor]) -> f64 {
        let rows = xs[0].shape()[0];
        let total: f64 = (0..rows)
            .map(|r| {
                let rs: Vec<Tensor> = subset.iter().map(|&m| xs[m].row(r)).collect();
                let refs: Vec<&[f64]> = rs.iter().map(Tensor::data).collect();
                self.log_marginal(subset, &refs)
            })
            .sum();
        total / rows as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_round_trip() {
        for y in [1e-3, 0.5, 1.0, 7.0] {
            assert!((crate::tensor::softplus(softplus_inv(y)) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn subsets_pick_their_own_modalities() {
        let lg = LinearGaussian::reference();
        let xs = vec![Tensor::from_rows(&[vec![0.3, -0.2]]), Tensor::from_rows(&[vec![1.5, 0.8]])];
        let single = lg.mean_log_marginal(&[1], &xs);
        assert_eq!(single, lg.log_marginal(&[1], &[&[1.5, 0.8]]));
        assert_eq!(lg.mean_log_marginal(&[1, 0], &xs), lg.mean_log_marginal(&[0, 1], &xs));
        // one latent dimension at a time: x ~ N(0, a² + σ²)
        let var = 0.32f64.powi(2) + 1.0;
        let var2 = 0.48f64.powi(2) + 0.25;
        let want = -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + 1.5 * 1.5 / var)
            - 0.5 * ((2.0 * std::f64::consts::PI * var2).ln() + 0.8 * 0.8 / var2);
        assert!((single - want).abs() < 1e-12);
    }

    #[test]
    fn encoders_are_exact_posteriors() {
        let lg = LinearGaussian::reference();
        let model = lg.model().unwrap();
        let x = Tensor::from_rows(&[vec![0.4, -1.0]]);
        let q = model.encode(0, &x).unwrap();
        // scalar conjugate update, dimension 0: a=0.4, σ=0.7
        let prec = 1.0 + 0.16 / 0.49;
        assert!((q.loc.data()[0] - 0.4 * 0.4 / 0.49 / prec).abs() < 1e-12);
        assert!((q.scale.data()[0] - prec.powf(-0.5)).abs() < 1e-12);
    }
}
