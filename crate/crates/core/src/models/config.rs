use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distributions::{Family, LikelihoodFamily};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

/// How encoder scale heads are squashed into positive scales.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleMode {
    /// `D · softmax(softplus(raw))`: scales sum to the latent dimension.
    SumToD,
    /// `softplus(raw)`.
    Free,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combination {
    /// Equal-weight mixture of the per-modality posteriors.
    MoE,
    /// Normalized product of Gaussian experts, with the prior as one expert.
    PoE,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityConfig {
    pub name: String,
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub likelihood: LikelihoodFamily,
    pub activation: Activation,
}

impl ModalityConfig {
    pub fn new(name: &str, input_dim: usize, hidden_dims: Vec<usize>, likelihood: LikelihoodFamily) -> Self {
        ModalityConfig {
            name: name.to_string(),
            input_dim,
            hidden_dims,
            likelihood,
            activation: Activation::Relu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub family: Family,
    /// Learn per-dimension scales (normalized to sum to D).
    pub learn_scale: bool,
    /// Learn the location; fixed at zero otherwise.
    pub learn_loc: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub modalities: Vec<ModalityConfig>,
    pub latent_dim: usize,
    pub posterior_family: Family,
    pub scale_mode: ScaleMode,
    pub prior: PriorConfig,
    pub combination: Combination,
}

impl ModelConfig {
    /// Laplace prior and posteriors with sum-to-D scales, MoE joint posterior.
    pub fn mmvae(modalities: Vec<ModalityConfig>, latent_dim: usize) -> Self {
        ModelConfig {
            modalities,
            latent_dim,
            posterior_family: Family::Laplace,
            scale_mode: ScaleMode::SumToD,
            prior: PriorConfig {
                family: Family::Laplace,
                learn_scale: true,
                learn_loc: false,
            },
            combination: Combination::MoE,
        }
    }

    /// Gaussian experts with free scales, a standard normal prior expert,
    /// PoE joint posterior.
    pub fn poe(modalities: Vec<ModalityConfig>, latent_dim: usize) -> Self {
        ModelConfig {
            modalities,
            latent_dim,
            posterior_family: Family::Gaussian,
            scale_mode: ScaleMode::Free,
            prior: PriorConfig {
                family: Family::Gaussian,
                learn_scale: false,
                learn_loc: false,
            },
            combination: Combination::PoE,
        }
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    /// Structural checks that do not depend on how the model is built.
    pub(crate) fn validate_structure(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Config("a model needs at least one modality".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        for m in &self.modalities {
            if m.input_dim == 0 {
                return Err(Error::Config(format!("modality '{}' has input_dim 0", m.name)));
            }
        }
        if self.combination == Combination::PoE
            && (self.posterior_family != Family::Gaussian || self.prior.family != Family::Gaussian)
        {
            return Err(Error::Family(
                "product-of-experts posteriors need Gaussian experts and prior".into(),
            ));
        }
        Ok(())
    }

    /// Full checks for user-supplied configurations: every modality must
    /// have at least one hidden layer.
    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        if let Some(m) = self.modalities.iter().find(|m| m.hidden_dims.is_empty()) {
            return Err(Error::Config(format!(
                "modality '{}' needs at least one hidden layer",
                m.name
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
