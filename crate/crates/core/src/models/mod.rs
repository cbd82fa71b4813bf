//! Per-modality encoders and decoders, the joint multimodal model, and the
//! generation procedures built on it.

mod config;
mod generate;

pub use config::{Activation, Combination, ModalityConfig, ModelConfig, PriorConfig, ScaleMode};
pub use generate::{cross_generate, generate_joint, reconstruct_mean, traverse, JointSamples};

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::distributions::{
    normalize_scale, poe_gaussian_product, Likelihood, LikelihoodFamily, LocScale,
    LocScaleParams, MoEPosterior, BERNOULLI_EPS,
};
use crate::error::{Error, Result};
use crate::tensor::{BoundParams, ParamStore, Tape, Tensor, Var};

/// Counts encoder and decoder invocations. One pass is one network
/// evaluation over a (possibly multi-particle) batch.
#[derive(Debug, Default)]
pub struct PassCounters {
    encoder: AtomicUsize,
    decoder: AtomicUsize,
}

impl PassCounters {
    pub fn encoder(&self) -> usize {
        self.encoder.load(Ordering::Relaxed)
    }

    pub fn decoder(&self) -> usize {
        self.decoder.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.encoder.store(0, Ordering::Relaxed);
        self.decoder.store(0, Ordering::Relaxed);
    }
}

/// `p(z) Π_m p(x_m | z)` with per-modality posteriors `q(z | x_m)`.
#[derive(Debug)]
pub struct MultimodalModel {
    config: ModelConfig,
    params: ParamStore,
    counters: PassCounters,
}

impl Clone for MultimodalModel {
    fn clone(&self) -> Self {
        MultimodalModel {
            config: self.config.clone(),
            params: self.params.clone(),
            counters: PassCounters::default(),
        }
    }
}

pub(crate) fn enc_prefix(m: usize) -> String {
    format!("enc{m}")
}

pub(crate) fn dec_prefix(m: usize) -> String {
    format!("dec{m}")
}

/// Encoder parameters (Φ) are exactly those under an `enc` prefix.
pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("enc")
}

fn layer_dims(input: usize, hidden: &[usize]) -> Vec<(usize, usize)> {
    let mut dims = Vec::new();
    let mut prev = input;
    for &h in hidden {
        dims.push((prev, h));
        prev = h;
    }
    dims
}

/// Expected parameter shapes for a configuration.
fn param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.latent_dim;
    let mut out = Vec::new();
    for (m, mc) in config.modalities.iter().enumerate() {
        let e = enc_prefix(m);
        for (i, (a, b)) in layer_dims(mc.input_dim, &mc.hidden_dims).into_iter().enumerate() {
            out.push((format!("{e}.h{i}.w"), vec![a, b]));
            out.push((format!("{e}.h{i}.b"), vec![b]));
        }
        let last = mc.hidden_dims.last().copied().unwrap_or(mc.input_dim);
        out.push((format!("{e}.loc.w"), vec![last, d]));
        out.push((format!("{e}.loc.b"), vec![d]));
        out.push((format!("{e}.scale.w"), vec![last, d]));
        out.push((format!("{e}.scale.b"), vec![d]));

        let p = dec_prefix(m);
        let dec_hidden: Vec<usize> = mc.hidden_dims.iter().rev().copied().collect();
        for (i, (a, b)) in layer_dims(d, &dec_hidden).into_iter().enumerate() {
            out.push((format!("{p}.h{i}.w"), vec![a, b]));
            out.push((format!("{p}.h{i}.b"), vec![b]));
        }
        let last = dec_hidden.last().copied().unwrap_or(d);
        out.push((format!("{p}.out.w"), vec![last, mc.input_dim]));
        out.push((format!("{p}.out.b"), vec![mc.input_dim]));
        if matches!(mc.likelihood, LikelihoodFamily::Laplace | LikelihoodFamily::Gaussian) {
            out.push((format!("{p}.log_scale"), vec![mc.input_dim]));
        }
    }
    if config.prior.learn_scale {
        out.push(("prior.scale_raw".into(), vec![d]));
    }
    if config.prior.learn_loc {
        out.push(("prior.loc".into(), vec![d]));
    }
    out
}

impl MultimodalModel {
    /// Fresh model: weights and biases uniform in `±1/sqrt(fan_in)`, decoder
    /// log-scales and prior parameters at zero.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape) in param_shapes(&config) {
            let t = if name.ends_with(".w") || name.ends_with(".b") {
                let fan_in = if name.ends_with(".w") {
                    shape[0]
                } else {
                    // bias shares the fan-in of its weight
                    let w = name.trim_end_matches(".b").to_string() + ".w";
                    param_shapes(&config)
                        .into_iter()
                        .find(|(n, _)| *n == w)
                        .map(|(_, s)| s[0])
                        .unwrap()
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect())?
            } else {
                Tensor::zeros(&shape)
            };
            params.insert(name, t)?;
        }
        Ok(MultimodalModel {
            config,
            params,
            counters: PassCounters::default(),
        })
    }

    /// Model from explicit parameters. Hidden layers may be empty here,
    /// which gives affine encoders and decoders.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate_structure()?;
        let expected = param_shapes(&config);
        if expected.len() != params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameters, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            let t = params
                .get(name)
                .ok_or_else(|| Error::Contract(format!("missing parameter '{name}'")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shapes(name, t.shape(), shape));
            }
        }
        Ok(MultimodalModel {
            config,
            params,
            counters: PassCounters::default(),
        })
    }

    /// Zero-initialized parameters with the shapes `config` expects.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        for (name, shape) in param_shapes(&config) {
            params.insert(name, Tensor::zeros(&shape))?;
        }
        Self::from_parts(config, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn counters(&self) -> &PassCounters {
        &self.counters
    }

    pub fn num_modalities(&self) -> usize {
        self.config.modalities.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Binds parameters as gradient-receiving leaves.
    pub fn bind<'m, 't>(&'m self, tape: &'t Tape) -> Result<BoundModel<'m, 't>> {
        Ok(BoundModel {
            model: self,
            tape,
            params: self.params.bind(tape)?,
        })
    }

    /// Binds parameters as constants, for evaluation without gradients.
    pub fn bind_frozen<'m, 't>(&'m self, tape: &'t Tape) -> BoundModel<'m, 't> {
        BoundModel {
            model: self,
            tape,
            params: self.params.bind_frozen(tape),
        }
    }

    /// Binds with externally supplied parameter variables.
    pub fn bind_with<'m, 't>(&'m self, tape: &'t Tape, params: BoundParams<'t>) -> BoundModel<'m, 't> {
        BoundModel {
            model: self,
            tape,
            params,
        }
    }

    /// Prior parameters after scale normalization.
    pub fn prior_params(&self) -> LocScaleParams {
        let tape = Tape::new();
        self.bind_frozen(&tape).prior().expect("prior").values()
    }

    /// Posterior of modality `m` for a batch of observations.
    pub fn encode(&self, m: usize, x: &Tensor) -> Result<LocScaleParams> {
        let tape = Tape::new();
        let bound = self.bind_frozen(&tape);
        Ok(bound.encode(m, tape.constant(x.clone()))?.values())
    }
}

/// Joint posterior of a multimodal observation.
#[derive(Clone, Debug)]
pub enum JointPosterior<'t> {
    MoE(MoEPosterior<LocScale<'t>>),
    PoE(LocScale<'t>),
}

impl<'t> JointPosterior<'t> {
    pub fn log_density(&self, z: Var<'t>) -> Result<Var<'t>> {
        match self {
            JointPosterior::MoE(m) => m.log_density(z),
            JointPosterior::PoE(p) => p.log_prob(z),
        }
    }

    /// Posterior mean.
    pub fn mean(&self) -> Result<Var<'t>> {
        match self {
            JointPosterior::PoE(p) => Ok(p.loc),
            JointPosterior::MoE(m) => {
                let mut acc = m.components[0].loc.scale(m.weights[0]);
                for (c, &w) in m.components.iter().zip(&m.weights).skip(1) {
                    acc = acc.add(c.loc.scale(w))?;
                }
                Ok(acc)
            }
        }
    }
}

/// A model whose parameters are bound to one tape.
pub struct BoundModel<'m, 't> {
    model: &'m MultimodalModel,
    tape: &'t Tape,
    params: BoundParams<'t>,
}

impl<'m, 't> BoundModel<'m, 't> {
    pub fn model(&self) -> &'m MultimodalModel {
        self.model
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn config(&self) -> &'m ModelConfig {
        &self.model.config
    }

    fn modality(&self, m: usize) -> Result<&'m ModalityConfig> {
        self.config().modalities.get(m).ok_or(Error::Index {
            index: m,
            count: self.config().modalities.len(),
        })
    }

    fn dense(&self, x: Var<'t>, prefix: &str) -> Result<Var<'t>> {
        x.matmul(self.params.get(&format!("{prefix}.w"))?)?
            .add(self.params.get(&format!("{prefix}.b"))?)
    }

    fn activate(x: Var<'t>, act: Activation) -> Var<'t> {
        match act {
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Runs the hidden stack on the last axis, flattening leading axes.
    fn trunk(&self, x: Var<'t>, prefix: &str, layers: usize, act: Activation) -> Result<(Var<'t>, Vec<usize>)> {
        let shape = x.shape();
        let lead: Vec<usize> = shape[..shape.len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let mut h = x.reshape(&[rows, *shape.last().unwrap()])?;
        for i in 0..layers {
            h = Self::activate(self.dense(h, &format!("{prefix}.h{i}"))?, act);
        }
        Ok((h, lead))
    }

    fn unflatten(v: Var<'t>, lead: &[usize]) -> Result<Var<'t>> {
        let mut shape = lead.to_vec();
        shape.push(*v.shape().last().unwrap());
        v.reshape(&shape)
    }

    /// `q(z | x_m)`: linear location head; scale head through softplus and,
    /// in sum-to-D mode, `normalize_scale`.
    pub fn encode(&self, m: usize, x: Var<'t>) -> Result<LocScale<'t>> {
        let mc = self.modality(m)?;
        let shape = x.shape();
        if shape.last() != Some(&mc.input_dim) {
            return Err(Error::Dimension(format!(
                "modality {m} expects input dim {}, got shape {shape:?}",
                mc.input_dim
            )));
        }
        self.model.counters.encoder.fetch_add(1, Ordering::Relaxed);
        let e = enc_prefix(m);
        let (h, lead) = self.trunk(x, &e, mc.hidden_dims.len(), mc.activation)?;
        let loc = Self::unflatten(self.dense(h, &format!("{e}.loc"))?, &lead)?;
        let raw = self.dense(h, &format!("{e}.scale"))?.softplus();
        let scale = match self.config().scale_mode {
            ScaleMode::SumToD => normalize_scale(raw)?,
            ScaleMode::Free => raw,
        };
        let scale = Self::unflatten(scale, &lead)?;
        LocScale::new(self.config().posterior_family, loc, scale)
    }

    /// `p(x_m | z)` for latents of shape `[..., D]`.
    pub fn decode(&self, m: usize, z: Var<'t>) -> Result<Likelihood<'t>> {
        let mc = self.modality(m)?;
        let shape = z.shape();
        if shape.last() != Some(&self.config().latent_dim) {
            return Err(Error::Dimension(format!(
                "decoder expects latent dim {}, got shape {shape:?}",
                self.config().latent_dim
            )));
        }
        self.model.counters.decoder.fetch_add(1, Ordering::Relaxed);
        let p = dec_prefix(m);
        let (h, lead) = self.trunk(z, &p, mc.hidden_dims.len(), mc.activation)?;
        let out = Self::unflatten(self.dense(h, &format!("{p}.out"))?, &lead)?;
        Ok(match mc.likelihood {
            LikelihoodFamily::Laplace => Likelihood::Laplace {
                loc: out,
                scale: self.params.get(&format!("{p}.log_scale"))?.exp(),
            },
            LikelihoodFamily::Gaussian => Likelihood::Gaussian {
                loc: out,
                scale: self.params.get(&format!("{p}.log_scale"))?.exp(),
            },
            LikelihoodFamily::Bernoulli => Likelihood::Bernoulli {
                probs: out.sigmoid().clamp(BERNOULLI_EPS, 1.0 - BERNOULLI_EPS),
            },
            LikelihoodFamily::Categorical => Likelihood::Categorical { logits: out },
        })
    }

    /// `p(z)`, with shape `[D]`.
    pub fn prior(&self) -> Result<LocScale<'t>> {
        let d = self.config().latent_dim;
        let pc = &self.config().prior;
        let loc = if pc.learn_loc {
            self.params.get("prior.loc")?
        } else {
            self.tape.constant(Tensor::zeros(&[d]))
        };
        let scale = if pc.learn_scale {
            normalize_scale(self.params.get("prior.scale_raw")?)?
        } else {
            self.tape.constant(Tensor::ones(&[d]))
        };
        LocScale::new(pc.family, loc, scale)
    }

    /// Posterior given the listed modalities: the equal-weight mixture of
    /// their components (MoE), or the product of the prior expert and
    /// their experts (PoE).
    pub fn posterior_given(&self, subset: &[usize], xs: &[Var<'t>]) -> Result<JointPosterior<'t>> {
        if subset.is_empty() || subset.len() != xs.len() {
            return Err(Error::Contract(format!(
                "{} modality indices for {} observations",
                subset.len(),
                xs.len()
            )));
        }
        let comps = subset
            .iter()
            .zip(xs)
            .map(|(&m, &x)| self.encode(m, x))
            .collect::<Result<Vec<_>>>()?;
        self.combine(comps)
    }

    /// Combines already-encoded per-modality posteriors.
    pub fn combine(&self, comps: Vec<LocScale<'t>>) -> Result<JointPosterior<'t>> {
        match self.config().combination {
            Combination::MoE => Ok(JointPosterior::MoE(MoEPosterior::uniform(comps)?)),
            Combination::PoE => {
                let mut experts = vec![self.prior()?];
                experts.extend(comps);
                Ok(JointPosterior::PoE(poe_gaussian_product(&experts)?))
            }
        }
    }

    /// Joint posterior over all modalities of a batch.
    pub fn joint_posterior(&self, xs: &[Var<'t>]) -> Result<JointPosterior<'t>> {
        let m = self.config().modalities.len();
        if xs.len() != m {
            return Err(Error::Contract(format!(
                "joint posterior needs all {m} modalities, got {}",
                xs.len()
            )));
        }
        let all: Vec<usize> = (0..m).collect();
        self.posterior_given(&all, xs)
    }
}
