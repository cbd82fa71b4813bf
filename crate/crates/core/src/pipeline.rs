//! Glue shared by the command-line tool and the acceptance runs: dataset
//! preparation with its oracles, model presets and content hashes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_toy_multimodal, make_splits, PairedDataset, Splits, ToyDatasetConfig};
use crate::distributions::LikelihoodFamily;
use crate::error::{Error, Result};
use crate::eval::{OracleClassifier, OracleConfig};
use crate::models::{Activation, Combination, ModalityConfig, ModelConfig};
use crate::tensor::Tensor;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of a value's JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("config serializes"))
}

/// Distinct source instances of modality `m` in a paired split. Rows
/// repeat once per pairing; without pair indices every row is kept.
pub fn unique_instances(ds: &PairedDataset, m: usize) -> (Tensor, Vec<u16>) {
    let rows: Vec<usize> = match &ds.pair_indices {
        Some(p) => {
            let mut seen = std::collections::BTreeMap::new();
            for (row, pair) in p.iter().enumerate() {
                let src = if m == 0 { pair.0 } else { pair.1 };
                seen.entry(src).or_insert(row);
            }
            seen.into_values().collect()
        }
        None => (0..ds.len()).collect(),
    };
    (ds.xs[m].select_rows(&rows), rows.iter().map(|&r| ds.labels[r]).collect())
}

/// A generated dataset with its splits and one gated oracle per modality.
pub struct ToyArtifacts {
    pub config: ToyDatasetConfig,
    pub splits: Splits,
    pub oracles: Vec<OracleClassifier>,
    pub separability: [f64; 2],
}

impl ToyArtifacts {
    pub fn data_hash(&self) -> String {
        config_hash(&self.config)
    }

    pub fn likelihoods(&self) -> Vec<LikelihoodFamily> {
        self.config.likelihoods().to_vec()
    }
}

/// Generates, splits and pairs the toy dataset, then trains the oracles on
/// the training instances and gates them on the test instances.
pub fn prepare_toy(config: &ToyDatasetConfig, oracle: &OracleConfig) -> Result<ToyArtifacts> {
    let data = generate_toy_multimodal(config)?;
    let splits = make_splits(&data, config)?;
    let mut oracles = Vec::new();
    for m in 0..2 {
        let (x, y) = unique_instances(&splits.train, m);
        let (xt, yt) = unique_instances(&splits.test, m);
        oracles.push(OracleClassifier::train(&x, &y, &xt, &yt, config.n_classes, oracle, config.seed)?);
    }
    Ok(ToyArtifacts {
        config: config.clone(),
        splits,
        oracles,
        separability: data.separability,
    })
}

/// Architecture shared by every modality of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub combination: Combination,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            latent_dim: 8,
            hidden: vec![64],
            activation: Activation::Relu,
            combination: Combination::MoE,
        }
    }
}

impl ModelSpec {
    /// Model configuration for data with the given widths and likelihoods.
    /// MoE gets the Laplace sum-to-D preset, PoE the Gaussian one.
    pub fn model_config(&self, dims: &[usize], likelihoods: &[LikelihoodFamily]) -> Result<ModelConfig> {
        if dims.len() != likelihoods.len() {
            return Err(Error::Config(format!(
                "{} modality widths but {} likelihood families",
                dims.len(),
                likelihoods.len()
            )));
        }
        let modalities = dims
            .iter()
            .zip(likelihoods)
            .enumerate()
            .map(|(m, (&d, &lik))| {
                let mut c = ModalityConfig::new(&format!("m{m}"), d, self.hidden.clone(), lik);
                c.activation = self.activation;
                c
            })
            .collect();
        let config = match self.combination {
            Combination::MoE => ModelConfig::mmvae(modalities, self.latent_dim),
            Combination::PoE => ModelConfig::poe(modalities, self.latent_dim),
        };
        config.validate()?;
        Ok(config)
    }
}

/// Modality `m` alone, for single-modality baselines.
pub fn single_modality(ds: &PairedDataset, m: usize) -> PairedDataset {
    PairedDataset {
        n_classes: ds.n_classes,
        xs: vec![ds.xs[m].clone()],
        labels: ds.labels.clone(),
        pair_indices: None,
    }
}
