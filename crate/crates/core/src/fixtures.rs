//! Hand-built models with known behaviour, used as test oracles.

use nalgebra::DMatrix;

use crate::analytic::softplus_inv;
use crate::distributions::{Family, LikelihoodFamily};
use crate::error::{Error, Result};
use crate::models::{Combination, ModalityConfig, ModelConfig, MultimodalModel, PriorConfig, ScaleMode};
use crate::tensor::{ParamStore, Tensor};

/// One-dimensional Gaussian toy: `p(z) = N(0, 1)`, `p(x | z) = N(z, 1)`,
/// `q(z | x) = N(mu, s²)` independent of `x`. The exact posterior is
/// `N(x/2, 1/2)`.
pub fn gaussian_toy_1d(mu: f64, s: f64) -> Result<MultimodalModel> {
    let config = ModelConfig {
        modalities: vec![ModalityConfig::new("x", 1, vec![], LikelihoodFamily::Gaussian)],
        latent_dim: 1,
        posterior_family: Family::Gaussian,
        scale_mode: ScaleMode::Free,
        prior: PriorConfig {
            family: Family::Gaussian,
            learn_scale: false,
            learn_loc: false,
        },
        combination: Combination::MoE,
    };
    let mut p = ParamStore::new();
    p.insert("enc0.loc.w", Tensor::zeros(&[1, 1]))?;
    p.insert("enc0.loc.b", Tensor::vector(vec![mu]))?;
    p.insert("enc0.scale.w", Tensor::zeros(&[1, 1]))?;
    p.insert("enc0.scale.b", Tensor::vector(vec![softplus_inv(s)]))?;
    p.insert("dec0.out.w", Tensor::ones(&[1, 1]))?;
    p.insert("dec0.out.b", Tensor::zeros(&[1]))?;
    p.insert("dec0.log_scale", Tensor::zeros(&[1]))?;
    MultimodalModel::from_parts(config, p)
}

/// Raw scale-head bias that pins dimension 0 to a vanishing scale under
/// the sum-to-D normalization while the others share the remaining mass.
fn pinned_scale_bias(d: usize) -> Tensor {
    let mut b = vec![30.0; d];
    b[0] = -30.0;
    Tensor::vector(b)
}

fn laplace_mmvae(dims: &[usize], hidden: usize, d: usize) -> ModelConfig {
    let mods = dims
        .iter()
        .enumerate()
        .map(|(m, &n)| {
            let h = if hidden == 0 { vec![] } else { vec![hidden] };
            ModalityConfig::new(&format!("m{m}"), n, h, LikelihoodFamily::Laplace)
        })
        .collect();
    ModelConfig::mmvae(mods, d)
}

/// Affine model whose decoders write `z_0` into every output coordinate of
/// every modality, with likelihood scale `noise`. Encoders place `z_0` at
/// the mean of the input coordinates with a vanishing scale.
pub fn copy_model(dims: &[usize], d: usize, noise: f64) -> Result<MultimodalModel> {
    if d < 2 {
        return Err(Error::Config("copy model needs D ≥ 2".into()));
    }
    let config = laplace_mmvae(dims, 0, d);
    let mut p = ParamStore::new();
    for (m, &n) in dims.iter().enumerate() {
        let mut w = Tensor::zeros(&[n, d]);
        for i in 0..n {
            w.data_mut()[i * d] = 1.0 / n as f64;
        }
        p.insert(format!("enc{m}.loc.w"), w)?;
        p.insert(format!("enc{m}.loc.b"), Tensor::zeros(&[d]))?;
        p.insert(format!("enc{m}.scale.w"), Tensor::zeros(&[n, d]))?;
        p.insert(format!("enc{m}.scale.b"), pinned_scale_bias(d))?;
        let mut w = Tensor::zeros(&[d, n]);
        for j in 0..n {
            w.data_mut()[j] = 1.0;
        }
        p.insert(format!("dec{m}.out.w"), w)?;
        p.insert(format!("dec{m}.out.b"), Tensor::zeros(&[n]))?;
        p.insert(format!("dec{m}.log_scale"), Tensor::full(&[n], noise.ln()))?;
    }
    p.insert("prior.scale_raw", Tensor::zeros(&[d]))?;
    MultimodalModel::from_parts(config, p)
}

/// Laplace(0, 1) quantile.
fn laplace_quantile(p: f64) -> f64 {
    if p < 0.5 {
        (2.0 * p).ln()
    } else {
        -(2.0 * (1.0 - p)).ln()
    }
}

/// Step sharpness of the rigged decoders: each step ramps over `1/κ`.
const STEP_SHARPNESS: f64 = 1e4;

/// Model that encodes each class to its own band of `z_0` and decodes
/// every band to that class's template in every modality.
///
/// `templates[m]` is the `[C, n_m]` matrix of class templates of modality
/// `m`. Bands are the `C` equal-probability intervals of the Laplace(0, 1)
/// prior on `z_0`. Encoders project the input on the dual basis of the
/// templates with one ReLU layer and place `z_0` at the band centre with a
/// vanishing scale; decoders realize the staircase with pairs of ReLU ramps.
pub fn rigged_model(templates: &[Tensor], d: usize, noise: f64) -> Result<MultimodalModel> {
    let c = templates
        .first()
        .map(|t| t.shape()[0])
        .ok_or_else(|| Error::Config("need at least one modality".into()))?;
    if c < 2 || d < 2 || templates.iter().any(|t| t.rank() != 2 || t.shape()[0] != c) {
        return Err(Error::Config("templates must all be [C, n] with C ≥ 2, and D ≥ 2".into()));
    }
    let h = 2 * (c - 1);
    let dims: Vec<usize> = templates.iter().map(|t| t.shape()[1]).collect();
    let config = laplace_mmvae(&dims, h, d);
    let centres: Vec<f64> = (0..c).map(|k| laplace_quantile((k as f64 + 0.5) / c as f64)).collect();
    let edges: Vec<f64> = (1..c).map(|k| laplace_quantile(k as f64 / c as f64)).collect();

    let mut p = ParamStore::new();
    for (m, t) in templates.iter().enumerate() {
        let n = dims[m];
        let tm = DMatrix::from_row_slice(c, n, t.data());
        let gram = &tm * tm.transpose();
        let inv = gram
            .try_inverse()
            .ok_or_else(|| Error::Numeric(format!("templates of modality {m} are linearly dependent")))?;
        // dual basis: columns u_k with <t_j, u_k> = δ_jk
        let dual = tm.transpose() * inv;

        let mut w = Tensor::zeros(&[n, h]);
        for i in 0..n {
            for k in 0..c {
                w.data_mut()[i * h + k] = dual[(i, k)];
            }
        }
        p.insert(format!("enc{m}.h0.w"), w)?;
        p.insert(format!("enc{m}.h0.b"), Tensor::zeros(&[h]))?;
        let mut w = Tensor::zeros(&[h, d]);
        for (k, &ck) in centres.iter().enumerate() {
            w.data_mut()[k * d] = ck;
        }
        p.insert(format!("enc{m}.loc.w"), w)?;
        p.insert(format!("enc{m}.loc.b"), Tensor::zeros(&[d]))?;
        p.insert(format!("enc{m}.scale.w"), Tensor::zeros(&[h, d]))?;
        p.insert(format!("enc{m}.scale.b"), pinned_scale_bias(d))?;

        // ramp pair k: relu(κ(z0 − e_k) + ½) − relu(κ(z0 − e_k) − ½)
        let mut w = Tensor::zeros(&[d, h]);
        let mut b = vec![0.0; h];
        for (k, &e) in edges.iter().enumerate() {
            w.data_mut()[2 * k] = STEP_SHARPNESS;
            w.data_mut()[2 * k + 1] = STEP_SHARPNESS;
            b[2 * k] = -STEP_SHARPNESS * e + 0.5;
            b[2 * k + 1] = -STEP_SHARPNESS * e - 0.5;
        }
        p.insert(format!("dec{m}.h0.w"), w)?;
        p.insert(format!("dec{m}.h0.b"), Tensor::vector(b))?;
        let mut w = Tensor::zeros(&[h, n]);
        for k in 0..c - 1 {
            for j in 0..n {
                let step = t.data()[(k + 1) * n + j] - t.data()[k * n + j];
                w.data_mut()[2 * k * n + j] = step;
                w.data_mut()[(2 * k + 1) * n + j] = -step;
            }
        }
        p.insert(format!("dec{m}.out.w"), w)?;
        p.insert(format!("dec{m}.out.b"), t.row(0))?;
        p.insert(format!("dec{m}.log_scale"), Tensor::full(&[n], noise.ln()))?;
    }
    p.insert("prior.scale_raw", Tensor::zeros(&[d]))?;
    MultimodalModel::from_parts(config, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::reconstruct_mean;

    fn templates() -> Vec<Tensor> {
        vec![
            Tensor::from_rows(&[
                vec![1.0, 0.0, 0.0, 0.2, 0.0],
                vec![0.0, 1.0, 0.0, 0.0, 0.3],
                vec![0.0, 0.0, 1.0, 0.1, 0.0],
                vec![0.5, 0.0, 0.0, 1.0, 1.0],
            ]),
            Tensor::from_rows(&[
                vec![2.0, 0.0, 0.0, 0.0],
                vec![0.0, 2.0, 0.0, 0.0],
                vec![0.0, 0.0, 2.0, 0.0],
                vec![1.0, 1.0, 1.0, 1.0],
            ]),
        ]
    }

    #[test]
    fn laplace_quantiles() {
        assert_eq!(laplace_quantile(0.5), 0.0);
        assert!((laplace_quantile(0.25) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!((laplace_quantile(0.875) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rigged_round_trip_recovers_templates() {
        let t = templates();
        let model = rigged_model(&t, 3, 0.01).unwrap();
        for (m, tm) in t.iter().enumerate() {
            for (n, tn) in t.iter().enumerate() {
                let out = reconstruct_mean(&model, m, tm, n).unwrap();
                for (a, b) in out.data().iter().zip(tn.data()) {
                    assert!((a - b).abs() < 1e-9, "{m}->{n}");
                }
            }
        }
    }

    #[test]
    fn copy_model_copies_mean() {
        let model = copy_model(&[4, 2], 3, 0.01).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 2.0]]);
        let out = reconstruct_mean(&model, 0, &x, 1).unwrap();
        assert!(out.data().iter().all(|v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn toy_posterior_parameters() {
        let model = gaussian_toy_1d(0.3, 0.8).unwrap();
        let q = model.encode(0, &Tensor::from_rows(&[vec![5.0]])).unwrap();
        assert!((q.loc.item() - 0.3).abs() < 1e-15);
        assert!((q.scale.item() - 0.8).abs() < 1e-12);
    }
}
