//! Variational bounds and their gradient estimators.
//!
//! Particles are drawn per stratum: one stratum per modality for a mixture
//! posterior, a single stratum for a product posterior. Every estimator
//! takes its reparameterization noise from a [`SamplingPlan`], so estimates
//! are deterministic functions of parameters, batch and plan.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{draw_noise, LocScale, LocScaleParams, MoEPosterior};
use crate::error::{Error, Result};
use crate::models::{is_encoder_param, BoundModel, Combination, JointPosterior, ModelConfig, MultimodalModel};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Elbo,
    MoeIwaeLoose,
    MoeIwaeTight,
    MmisElbo,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 4] = [
        ObjectiveKind::Elbo,
        ObjectiveKind::MoeIwaeLoose,
        ObjectiveKind::MoeIwaeTight,
        ObjectiveKind::MmisElbo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Elbo => "elbo",
            ObjectiveKind::MoeIwaeLoose => "moe-iwae-loose",
            ObjectiveKind::MoeIwaeTight => "moe-iwae-tight",
            ObjectiveKind::MmisElbo => "mmis-elbo",
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectiveKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown objective '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Standard,
    Dreg,
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::Standard => "standard",
            Estimator::Dreg => "dreg",
        })
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Estimator::Standard),
            "dreg" => Ok(Estimator::Dreg),
            _ => Err(Error::Config(format!("unknown estimator '{s}'"))),
        }
    }
}

/// Number of sampling strata for a model: M for a mixture, 1 for a product.
pub fn num_strata(config: &ModelConfig) -> usize {
    match config.combination {
        Combination::MoE => config.num_modalities(),
        Combination::PoE => 1,
    }
}

/// Particle counts and pre-drawn noise, one `[L, B, D]` tensor per stratum.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingPlan {
    /// Particle count as requested: per stratum for the ELBO, loose and
    /// mmis bounds, in total for the tight bound.
    pub k: usize,
    /// Particles drawn from each stratum.
    pub per_stratum: usize,
    pub noise: Vec<Tensor>,
}

impl SamplingPlan {
    /// Particles per stratum implied by `kind` and `k`.
    pub fn particles_per_stratum(kind: ObjectiveKind, k: usize, strata: usize) -> Result<usize> {
        if k == 0 {
            return Err(Error::Plan("K must be at least 1".into()));
        }
        match kind {
            ObjectiveKind::MoeIwaeTight => {
                if k % strata != 0 {
                    return Err(Error::Plan(format!(
                        "tight bound needs K divisible by the {strata} strata, got K={k}"
                    )));
                }
                Ok(k / strata)
            }
            _ => Ok(k),
        }
    }

    pub fn draw<R: Rng + ?Sized>(
        config: &ModelConfig,
        kind: ObjectiveKind,
        k: usize,
        batch: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let s = num_strata(config);
        let l = Self::particles_per_stratum(kind, k, s)?;
        let noise = (0..s)
            .map(|_| draw_noise(config.posterior_family, &[l, batch, config.latent_dim], rng))
            .collect();
        Ok(SamplingPlan {
            k,
            per_stratum: l,
            noise,
        })
    }

    /// Plan from explicit noise tensors.
    pub fn from_noise(k: usize, noise: Vec<Tensor>) -> Result<Self> {
        let l = noise.first().map(|n| n.shape()[0]).unwrap_or(0);
        if noise.iter().any(|n| n.rank() != 3 || n.shape()[0] != l) || l == 0 {
            return Err(Error::Plan("noise tensors must all be [L, B, D] with L ≥ 1".into()));
        }
        Ok(SamplingPlan {
            k,
            per_stratum: l,
            noise,
        })
    }

    fn check(&self, kind: ObjectiveKind, strata: usize, batch: usize, d: usize) -> Result<()> {
        if self.noise.len() != strata {
            return Err(Error::Plan(format!(
                "plan has {} noise tensors for {strata} strata",
                self.noise.len()
            )));
        }
        if Self::particles_per_stratum(kind, self.k, strata)? != self.per_stratum {
            return Err(Error::Plan(format!(
                "K={} implies {} particles per stratum for {kind}, plan has {}",
                self.k,
                Self::particles_per_stratum(kind, self.k, strata)?,
                self.per_stratum
            )));
        }
        for n in &self.noise {
            if n.shape() != [self.per_stratum, batch, d] {
                return Err(Error::Plan(format!(
                    "noise shape {:?} does not match [{}, {batch}, {d}]",
                    n.shape(),
                    self.per_stratum
                )));
            }
        }
        Ok(())
    }
}

/// Value of a bound with its per-particle log-weights `[S, L, B]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundValue {
    pub kind: ObjectiveKind,
    pub value: f64,
    pub log_weights: Tensor,
    /// Share of the pooled normalized importance weight carried by each
    /// stratum's particles, averaged over the batch.
    pub weight_shares: Vec<f64>,
}

impl BoundValue {
    /// Recomputes the bound from its log-weights.
    pub fn aggregate(kind: ObjectiveKind, log_weights: &Tensor) -> Result<f64> {
        let tape = Tape::new();
        Ok(aggregate(kind, tape.constant(log_weights.clone()))?.item())
    }

    pub fn max_share(&self) -> f64 {
        self.weight_shares.iter().copied().fold(0.0, f64::max)
    }
}

fn aggregate<'t>(kind: ObjectiveKind, lw: Var<'t>) -> Result<Var<'t>> {
    let shape = lw.shape();
    let (s, l, b) = (shape[0], shape[1], shape[2]);
    match kind {
        ObjectiveKind::Elbo | ObjectiveKind::MmisElbo => Ok(lw.mean_all()),
        ObjectiveKind::MoeIwaeLoose => Ok(lw.logsumexp(1)?.add_scalar(-(l as f64).ln()).mean_all()),
        ObjectiveKind::MoeIwaeTight => Ok(lw
            .reshape(&[s * l, b])?
            .logsumexp(0)?
            .add_scalar(-((s * l) as f64).ln())
            .mean_all()),
    }
}

/// Normalized weights over all particles of each batch element, `[S, L, B]`.
fn pooled_weights(lw: &Tensor) -> Tensor {
    let (s, l, b) = (lw.shape()[0], lw.shape()[1], lw.shape()[2]);
    let mut out = vec![0.0; lw.len()];
    for j in 0..b {
        let col: Vec<f64> = (0..s * l).map(|i| lw.data()[i * b + j]).collect();
        let lse = crate::distributions::log_sum_exp(&col);
        for (i, v) in col.iter().enumerate() {
            out[i * b + j] = (v - lse).exp();
        }
    }
    Tensor::new(vec![s, l, b], out).expect("same shape")
}

/// Normalized weights within each stratum, `[S, L, B]`.
fn per_stratum_weights(lw: &Tensor) -> Tensor {
    let (s, l, b) = (lw.shape()[0], lw.shape()[1], lw.shape()[2]);
    let mut out = vec![0.0; lw.len()];
    for m in 0..s {
        for j in 0..b {
            let idx = |k: usize| (m * l + k) * b + j;
            let col: Vec<f64> = (0..l).map(|k| lw.data()[idx(k)]).collect();
            let lse = crate::distributions::log_sum_exp(&col);
            for (k, v) in col.iter().enumerate() {
                out[idx(k)] = (v - lse).exp();
            }
        }
    }
    Tensor::new(vec![s, l, b], out).expect("same shape")
}

/// Per-stratum share of the pooled normalized weights, batch-averaged.
pub fn weight_shares(lw: &Tensor) -> Vec<f64> {
    let (s, l, b) = (lw.shape()[0], lw.shape()[1], lw.shape()[2]);
    let w = pooled_weights(lw);
    (0..s)
        .map(|m| w.data()[m * l * b..(m + 1) * l * b].iter().sum::<f64>() / b as f64)
        .collect()
}

/// Encoders, strata and the posterior density used as proposal.
struct Proposal<'t> {
    strata: Vec<LocScale<'t>>,
    posterior: JointPosterior<'t>,
}

fn proposal<'t>(bound: &BoundModel<'_, 't>, xs: &[Var<'t>]) -> Result<Proposal<'t>> {
    let posterior = bound.joint_posterior(xs)?;
    let strata = match &posterior {
        JointPosterior::MoE(mix) => mix.components.clone(),
        JointPosterior::PoE(p) => vec![*p],
    };
    Ok(Proposal { strata, posterior })
}

fn posterior_from_strata<'t>(combination: Combination, strata: Vec<LocScale<'t>>) -> Result<JointPosterior<'t>> {
    match combination {
        Combination::MoE => Ok(JointPosterior::MoE(MoEPosterior::uniform(strata)?)),
        Combination::PoE => Ok(JointPosterior::PoE(strata[0])),
    }
}

fn check_batch(bound: &BoundModel<'_, '_>, xs: &[Var<'_>]) -> Result<usize> {
    let m = bound.model().num_modalities();
    if xs.len() != m {
        return Err(Error::Contract(format!("expected {m} modalities, got {}", xs.len())));
    }
    let b = xs[0].shape()[0];
    if xs.iter().any(|x| x.shape().len() != 2 || x.shape()[0] != b) {
        return Err(Error::Dimension("modalities must be [B, n_m] with a shared B".into()));
    }
    Ok(b)
}

/// `log p(z) + Σ_{n ∈ targets} log p(x_n | z)` for particles `[L, B, D]`.
fn log_joint<'t>(bound: &BoundModel<'_, 't>, xs: &[Var<'t>], targets: &[usize], z: Var<'t>) -> Result<Var<'t>> {
    let mut acc = bound.prior()?.log_prob(z)?;
    for &n in targets {
        acc = acc.add(bound.decode(n, z)?.log_prob(xs[n])?)?;
    }
    Ok(acc)
}

/// Log-weight parts for every stratum: the log joint and the proposal
/// log-density, each `[S, L, B]`.
struct WeightParts<'t> {
    z: Vec<Var<'t>>,
    log_joint: Var<'t>,
    log_q: Var<'t>,
}

fn weight_parts<'t>(
    bound: &BoundModel<'_, 't>,
    xs: &[Var<'t>],
    prop: &Proposal<'t>,
    noise: &[Tensor],
) -> Result<WeightParts<'t>> {
    let tape = bound.tape();
    let all: Vec<usize> = (0..xs.len()).collect();
    let mut zs = Vec::new();
    let mut lj = Vec::new();
    let mut lq = Vec::new();
    for (q, eps) in prop.strata.iter().zip(noise) {
        let z = q.rsample(eps)?;
        lj.push(log_joint(bound, xs, &all, z)?);
        lq.push(prop.posterior.log_density(z)?);
        zs.push(z);
    }
    Ok(WeightParts {
        z: zs,
        log_joint: tape.stack(&lj)?,
        log_q: tape.stack(&lq)?,
    })
}

/// A bound on a tape, with its log-weights.
pub struct BoundVar<'t> {
    pub kind: ObjectiveKind,
    pub value: Var<'t>,
    pub log_weights: Var<'t>,
}

impl BoundVar<'_> {
    pub fn to_value(&self) -> BoundValue {
        let lw = self.log_weights.value();
        let shares = match self.kind {
            ObjectiveKind::MmisElbo => Vec::new(),
            _ => weight_shares(&lw),
        };
        BoundValue {
            kind: self.kind,
            value: self.value.item(),
            log_weights: lw,
            weight_shares: shares,
        }
    }
}

/// Builds the bound `kind` on the bound model's tape.
pub fn bound_on_tape<'t>(
    bound: &BoundModel<'_, 't>,
    xs: &[Var<'t>],
    plan: &SamplingPlan,
    kind: ObjectiveKind,
) -> Result<BoundVar<'t>> {
    Ok(bound_parts(bound, xs, plan, kind)?.0)
}

fn bound_parts<'t>(
    bound: &BoundModel<'_, 't>,
    xs: &[Var<'t>],
    plan: &SamplingPlan,
    kind: ObjectiveKind,
) -> Result<(BoundVar<'t>, Option<(Proposal<'t>, WeightParts<'t>)>)> {
    let b = check_batch(bound, xs)?;
    let config = bound.model().config();
    plan.check(kind, num_strata(config), b, config.latent_dim)?;
    if kind == ObjectiveKind::MmisElbo {
        return Ok((mmis(bound, xs, plan, None)?, None));
    }
    let prop = proposal(bound, xs)?;
    let parts = weight_parts(bound, xs, &prop, &plan.noise)?;
    let lw = parts.log_joint.sub(parts.log_q)?;
    let value = aggregate(kind, lw)?;
    Ok((
        BoundVar {
            kind,
            value,
            log_weights: lw,
        },
        Some((prop, parts)),
    ))
}

/// Multi-modal importance-sampled ELBO. Each modality's likelihood is
/// evaluated only at that modality's own particles; other posteriors reuse
/// them through the ratio `q_i(z̄_j) / q̄_j(z̄_j)` with the denominator and
/// `z̄_j` cut from the gradient graph. One decoder pass per modality.
fn mmis<'t>(
    bound: &BoundModel<'_, 't>,
    xs: &[Var<'t>],
    plan: &SamplingPlan,
    anchor: Option<&MmisAnchor>,
) -> Result<BoundVar<'t>> {
    let tape = bound.tape();
    let prop = proposal(bound, xs)?;
    let mix = match &prop.posterior {
        JointPosterior::MoE(m) => m,
        JointPosterior::PoE(_) => {
            return Err(Error::Contract("mmis-ELBO needs a mixture posterior".into()));
        }
    };
    let m_count = xs.len();
    let prior = bound.prior()?;
    let mut own = Vec::with_capacity(m_count);
    let mut own_lik = Vec::with_capacity(m_count);
    let mut z_bar = Vec::with_capacity(m_count);
    let mut log_q_bar = Vec::with_capacity(m_count);
    let mut cross_lik = Vec::with_capacity(m_count);
    for (j, (q, eps)) in prop.strata.iter().zip(&plan.noise).enumerate() {
        let z = q.rsample(eps)?;
        let (zb, lqb) = match anchor {
            Some(a) => (tape.constant(a.z_bar[j].clone()), tape.constant(a.log_q_bar[j].clone())),
            None => {
                let zb = z.detach();
                (zb, q.log_prob(zb)?.detach())
            }
        };
        // one pass over decoder j for both the live and the detached particles
        let lik = bound.decode(j, tape.stack(&[z, zb])?)?.log_prob(xs[j])?;
        own_lik.push(lik.select(0)?);
        cross_lik.push(lik.select(1)?);
        own.push(prior.log_prob(z)?.sub(mix.log_density(z)?)?);
        z_bar.push(zb);
        log_q_bar.push(lqb);
    }
    let mut terms = Vec::with_capacity(m_count);
    for i in 0..m_count {
        let mut t = own[i].add(own_lik[i])?;
        for j in (0..m_count).filter(|&j| j != i) {
            let log_ratio = prop.strata[i].log_prob(z_bar[j])?.sub(log_q_bar[j])?;
            t = t.add(log_ratio.exp().mul(cross_lik[j])?)?;
        }
        terms.push(t);
    }
    let lw = tape.stack(&terms)?;
    Ok(BoundVar {
        kind: ObjectiveKind::MmisElbo,
        value: lw.mean_all(),
        log_weights: lw,
    })
}

/// Stop-gradient quantities of mmis-ELBO frozen as constants: the
/// detached particles `z̄_j` (`[L, B, D]`) and their log-densities under
/// their own stratum (`[L, B]`). With the anchor taken at the current
/// parameters, [`mmis_anchored`] has the same value and the same gradient
/// as the live objective, but is an ordinary function of the parameters,
/// so finite differences apply to it.
#[derive(Clone, Debug)]
pub struct MmisAnchor {
    pub z_bar: Vec<Tensor>,
    pub log_q_bar: Vec<Tensor>,
}

impl MmisAnchor {
    pub fn at(model: &MultimodalModel, xs: &[Tensor], plan: &SamplingPlan) -> Result<Self> {
        let tape = Tape::new();
        let bound = model.bind_frozen(&tape);
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let b = check_batch(&bound, &vars)?;
        plan.check(ObjectiveKind::MmisElbo, num_strata(model.config()), b, model.latent_dim())?;
        let prop = proposal(&bound, &vars)?;
        let mut z_bar = Vec::new();
        let mut log_q_bar = Vec::new();
        for (q, eps) in prop.strata.iter().zip(&plan.noise) {
            let z = q.rsample(eps)?;
            log_q_bar.push(q.log_prob(z)?.value());
            z_bar.push(z.value());
        }
        Ok(MmisAnchor { z_bar, log_q_bar })
    }
}

/// mmis-ELBO with its stop-gradient quantities taken from `anchor`.
pub fn mmis_anchored<'t>(
    bound: &BoundModel<'_, 't>,
    xs: &[Var<'t>],
    plan: &SamplingPlan,
    anchor: &MmisAnchor,
) -> Result<BoundVar<'t>> {
    let b = check_batch(bound, xs)?;
    let config = bound.model().config();
    plan.check(ObjectiveKind::MmisElbo, num_strata(config), b, config.latent_dim)?;
    if anchor.z_bar.len() != plan.noise.len() || anchor.log_q_bar.len() != plan.noise.len() {
        return Err(Error::Plan("mmis anchor does not match the plan's strata".into()));
    }
    mmis(bound, xs, plan, Some(anchor))
}

/// Evaluates a bound without tracking gradients.
pub fn evaluate(model: &MultimodalModel, xs: &[Tensor], plan: &SamplingPlan, kind: ObjectiveKind) -> Result<BoundValue> {
    let tape = Tape::new();
    let bound = model.bind_frozen(&tape);
    let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    Ok(bound_on_tape(&bound, &vars, plan, kind)?.to_value())
}

pub fn elbo(model: &MultimodalModel, xs: &[Tensor], plan: &SamplingPlan) -> Result<BoundValue> {
    evaluate(model, xs, plan, ObjectiveKind::Elbo)
}

pub fn moe_iwae_loose(model: &MultimodalModel, xs: &[Tensor], plan: &SamplingPlan) -> Result<BoundValue> {
    evaluate(model, xs, plan, ObjectiveKind::MoeIwaeLoose)
}

pub fn moe_iwae_tight(model: &MultimodalModel, xs: &[Tensor], plan: &SamplingPlan) -> Result<BoundValue> {
    evaluate(model, xs, plan, ObjectiveKind::MoeIwaeTight)
}

pub fn mmis_elbo(model: &MultimodalModel, xs: &[Tensor], plan: &SamplingPlan) -> Result<BoundValue> {
    evaluate(model, xs, plan, ObjectiveKind::MmisElbo)
}

/// Coefficients of the DReG surrogate `Σ c · log w̃`, shape `[S, L, B]`:
/// the mean for the ELBO (path derivative), squared weights normalized
/// within each stratum for the loose bound, squared pooled weights for the
/// tight bound. Scaled so that summing and averaging over the batch gives
/// the gradient of the batch-mean bound.
pub fn dreg_coefficients(kind: ObjectiveKind, log_weights: &Tensor) -> Result<Tensor> {
    let (s, l) = (log_weights.shape()[0], log_weights.shape()[1]);
    match kind {
        ObjectiveKind::Elbo => Ok(log_weights.map(|_| 1.0 / (s * l) as f64)),
        ObjectiveKind::MoeIwaeLoose => Ok(per_stratum_weights(log_weights).map(|w| w * w / s as f64)),
        ObjectiveKind::MoeIwaeTight => Ok(pooled_weights(log_weights).map(|w| w * w)),
        ObjectiveKind::MmisElbo => Err(Error::Contract(
            "DReG applies to importance-weighted bounds, not mmis-ELBO".into(),
        )),
    }
}

/// Frozen quantities of a DReG surrogate: the proposal parameters and the
/// squared-weight coefficients.
#[derive(Clone, Debug)]
pub struct DregAnchor {
    pub strata: Vec<LocScaleParams>,
    pub coefficients: Tensor,
}

impl DregAnchor {
    /// Anchor at the model's current parameters.
    pub fn at(model: &MultimodalModel, xs: &[Tensor], plan: &SamplingPlan, kind: ObjectiveKind) -> Result<Self> {
        let tape = Tape::new();
        let bound = model.bind_frozen(&tape);
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let (bv, parts) = bound_parts(&bound, &vars, plan, kind)?;
        let (prop, _) = parts.ok_or_else(|| Error::Contract("DReG needs an importance-weighted bound".into()))?;
        Ok(DregAnchor {
            strata: prop.strata.iter().map(LocScale::values).collect(),
            coefficients: dreg_coefficients(kind, &bv.log_weights.value())?,
        })
    }
}

/// DReG surrogate whose gradient with respect to the encoder parameters is
/// the doubly reparameterized estimate: particles follow the live encoders,
/// while the proposal density and the weights are fixed by `anchor`.
pub fn dreg_surrogate<'t>(
    bound: &BoundModel<'_, 't>,
    xs: &[Var<'t>],
    plan: &SamplingPlan,
    kind: ObjectiveKind,
    anchor: &DregAnchor,
) -> Result<Var<'t>> {
    let b = check_batch(bound, xs)?;
    let config = bound.model().config();
    plan.check(kind, num_strata(config), b, config.latent_dim)?;
    let tape = bound.tape();
    let prop = proposal(bound, xs)?;
    let fixed: Vec<LocScale> = anchor.strata.iter().map(|p| p.on(tape)).collect();
    let fixed_post = posterior_from_strata(config.combination, fixed)?;
    let all: Vec<usize> = (0..xs.len()).collect();
    let mut lw = Vec::new();
    for (q, eps) in prop.strata.iter().zip(&plan.noise) {
        let z = q.rsample(eps)?;
        lw.push(log_joint(bound, xs, &all, z)?.sub(fixed_post.log_density(z)?)?);
    }
    let c = tape.constant(anchor.coefficients.clone());
    Ok(tape.stack(&lw)?.mul(c)?.sum_all().scale(1.0 / b as f64))
}

/// One estimate of a bound and of its gradient (ascent direction) with
/// respect to every parameter.
#[derive(Clone, Debug)]
pub struct GradientEstimate {
    pub bound: BoundValue,
    pub grads: BTreeMap<String, Tensor>,
}

pub fn objective_gradients(
    model: &MultimodalModel,
    xs: &[Tensor],
    plan: &SamplingPlan,
    kind: ObjectiveKind,
    estimator: Estimator,
) -> Result<GradientEstimate> {
    let tape = Tape::new();
    let bound = model.bind(&tape)?;
    let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let (bv, parts) = bound_parts(&bound, &vars, plan, kind)?;
    let mut grads = tape.backward(bv.value)?.into_params();
    if estimator == Estimator::Dreg {
        let (prop, parts) = parts.ok_or_else(|| {
            Error::Contract("DReG applies to importance-weighted bounds, not mmis-ELBO".into())
        })?;
        let coeffs = dreg_coefficients(kind, &bv.log_weights.value())?;
        let detached: Vec<LocScale> = prop.strata.iter().map(LocScale::detach).collect();
        let post = posterior_from_strata(model.config().combination, detached)?;
        let mut lw = Vec::new();
        for (s, &z) in parts.z.iter().enumerate() {
            lw.push(parts.log_joint.select(s)?.sub(post.log_density(z)?)?);
        }
        let b = xs[0].shape()[0] as f64;
        let surrogate = tape
            .stack(&lw)?
            .mul(tape.constant(coeffs))?
            .sum_all()
            .scale(1.0 / b);
        let dreg = tape.backward(surrogate)?.into_params();
        for (name, g) in dreg {
            if is_encoder_param(&name) {
                grads.insert(name, g);
            }
        }
    }
    Ok(GradientEstimate {
        bound: bv.to_value(),
        grads,
    })
}

/// Importance-sampled estimate of `log p(x_targets)` with particles from
/// the given posterior, stratified over its mixture components. Returns
/// the batch mean.
fn iw_log_marginal<'t>(
    bound: &BoundModel<'_, 't>,
    xs: &[Var<'t>],
    posterior: &JointPosterior<'t>,
    targets: &[usize],
    k: usize,
    rng: &mut (impl Rng + ?Sized),
) -> Result<f64> {
    let tape = bound.tape();
    let strata = match posterior {
        JointPosterior::MoE(mix) => mix.components.clone(),
        JointPosterior::PoE(p) => vec![*p],
    };
    let l = SamplingPlan::particles_per_stratum(ObjectiveKind::MoeIwaeTight, k, strata.len())?;
    let b = xs[0].shape()[0];
    let d = bound.model().latent_dim();
    let mut lw = Vec::new();
    for q in &strata {
        let eps = draw_noise(q.family, &[l, b, d], rng);
        let z = q.rsample(&eps)?;
        lw.push(log_joint(bound, xs, targets, z)?.sub(posterior.log_density(z)?)?);
    }
    Ok(aggregate(ObjectiveKind::MoeIwaeTight, tape.stack(&lw)?)?.item())
}

/// The four importance-weighted likelihood estimates for an ordered
/// modality pair `(m, n)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodRecord {
    pub m: usize,
    pub n: usize,
    /// `log p(x_m, x_n)` with the joint posterior as proposal.
    pub joint: f64,
    /// `log p(x_m)` with the joint posterior `q(z | x_m, x_n)` as proposal.
    pub given_both: f64,
    /// `log p(x_m)` with `q(z | x_m)` as proposal.
    pub given_self: f64,
    /// `log p(x_m)` with `q(z | x_n)` as proposal.
    pub given_other: f64,
}

/// Likelihood estimates for the pair `(m, n)` over a batch of
/// two-or-more-modality observations, each with `k` particles.
pub fn log_marginal_estimate<R: Rng + ?Sized>(
    model: &MultimodalModel,
    xs: &[Tensor],
    m: usize,
    n: usize,
    k: usize,
    rng: &mut R,
) -> Result<LikelihoodRecord> {
    let count = model.num_modalities();
    if m >= count || n >= count {
        return Err(Error::Index {
            index: m.max(n),
            count,
        });
    }
    if m == n {
        return Err(Error::Contract("likelihood table needs two distinct modalities".into()));
    }
    let tape = Tape::new();
    let bound = model.bind_frozen(&tape);
    let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    check_batch(&bound, &vars)?;
    let pair = [m, n];
    let both = bound.posterior_given(&pair, &[vars[m], vars[n]])?;
    let own = bound.posterior_given(&[m], &[vars[m]])?;
    let other = bound.posterior_given(&[n], &[vars[n]])?;
    Ok(LikelihoodRecord {
        m,
        n,
        joint: iw_log_marginal(&bound, &vars, &both, &pair, k, rng)?,
        given_both: iw_log_marginal(&bound, &vars, &both, &[m], k, rng)?,
        given_self: iw_log_marginal(&bound, &vars, &own, &[m], k, rng)?,
        given_other: iw_log_marginal(&bound, &vars, &other, &[m], k, rng)?,
    })
}
