//! Laplace, Gaussian, Bernoulli and Categorical densities, reparameterized
//! sampling, and the mixture/product rules for combining per-modality
//! posteriors.
//!
//! Densities come in two forms: tape-level ([`LocScale`], [`Likelihood`]),
//! which participate in gradients, and value-level ([`LocScaleParams`]),
//! used by the Monte Carlo diagnostics.

use std::f64::consts::LN_2;

use rand::Rng;
use rand_distr::{Distribution, Open01, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Clamp applied to Bernoulli probabilities before taking logs.
pub const BERNOULLI_EPS: f64 = 1e-6;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Laplace,
    Gaussian,
}

/// Per-dimension log-density of a location-scale family.
pub fn log_pdf(family: Family, x: f64, loc: f64, scale: f64) -> f64 {
    match family {
        Family::Laplace => -(2.0 * scale).ln() - (x - loc).abs() / scale,
        Family::Gaussian => {
            let s = (x - loc) / scale;
            -HALF_LN_2PI - scale.ln() - 0.5 * s * s
        }
    }
}

/// Maps raw noise to the standardized variate `t` with `z = loc + scale·t`.
///
/// Laplace noise is uniform on (0, 1) and goes through the inverse CDF
/// `−sign(u−½)·ln(1−2|u−½|)`; Gaussian noise is already standard normal.
pub fn standardize_noise(family: Family, noise: &Tensor) -> Result<Tensor> {
    match family {
        Family::Gaussian => Ok(noise.clone()),
        Family::Laplace => {
            if let Some(u) = noise.data().iter().find(|&&u| !(u > 0.0 && u < 1.0)) {
                return Err(Error::Domain(format!(
                    "Laplace noise must lie in (0, 1), got {u}"
                )));
            }
            Ok(noise.map(laplace_icdf_std))
        }
    }
}

fn laplace_icdf_std(u: f64) -> f64 {
    let c = u - 0.5;
    if c == 0.0 {
        0.0
    } else {
        -c.signum() * (1.0 - 2.0 * c.abs()).ln()
    }
}

/// Raw noise of the kind [`standardize_noise`] expects for `family`.
pub fn draw_noise<R: Rng + ?Sized>(family: Family, shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data: Vec<f64> = match family {
        Family::Laplace => (0..n).map(|_| Open01.sample(rng)).collect(),
        Family::Gaussian => (0..n).map(|_| StandardNormal.sample(rng)).collect(),
    };
    Tensor::new(shape.to_vec(), data).expect("noise shape")
}

/// `D · softmax(raw)` over the last axis: positive entries summing to `D`.
pub fn normalize_scale(raw: Var<'_>) -> Result<Var<'_>> {
    let d = *raw
        .shape()
        .last()
        .ok_or_else(|| Error::Dimension("normalize_scale of a rank-0 tensor".into()))?;
    Ok(raw.log_softmax()?.exp().scale(d as f64))
}

pub fn normalize_scale_values(raw: &[f64]) -> Vec<f64> {
    let d = raw.len() as f64;
    let m = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = raw.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| d * x / s).collect()
}

/// A location-scale distribution whose parameters live on a tape. The last
/// axis is the event dimension.
#[derive(Clone, Copy, Debug)]
pub struct LocScale<'t> {
    pub family: Family,
    pub loc: Var<'t>,
    pub scale: Var<'t>,
}

impl<'t> LocScale<'t> {
    /// `scale` may be shared across leading axes of `loc` (trailing broadcast).
    pub fn new(family: Family, loc: Var<'t>, scale: Var<'t>) -> Result<Self> {
        if !loc.shape().ends_with(&scale.shape()) {
            return Err(Error::shapes("loc/scale", &loc.shape(), &scale.shape()));
        }
        Ok(LocScale { family, loc, scale })
    }

    pub fn log_prob_per_dim(&self, x: Var<'t>) -> Result<Var<'t>> {
        let diff = x.sub(self.loc)?;
        let log_scale = self.scale.log()?;
        match self.family {
            Family::Laplace => diff
                .abs()
                .div(self.scale)?
                .neg()
                .sub(log_scale.add_scalar(LN_2)),
            Family::Gaussian => {
                let s = diff.div(self.scale)?;
                s.mul(s)?
                    .scale(-0.5)
                    .sub(log_scale.add_scalar(HALF_LN_2PI))
            }
        }
    }

    /// Log-density summed over the event dimension.
    pub fn log_prob(&self, x: Var<'t>) -> Result<Var<'t>> {
        let lp = self.log_prob_per_dim(x)?;
        let last = lp.shape().len() - 1;
        lp.sum(last)
    }

    /// `z = loc + scale·t(noise)`, differentiable in `loc` and `scale`.
    pub fn rsample(&self, noise: &Tensor) -> Result<Var<'t>> {
        let shape = self.loc.shape();
        if !noise.shape().ends_with(&shape) {
            return Err(Error::shapes("rsample noise", noise.shape(), &shape));
        }
        let t = self.loc.tape().constant(standardize_noise(self.family, noise)?);
        self.scale.mul(t)?.add(self.loc)
    }

    /// Parameters cut off from the gradient graph.
    pub fn detach(&self) -> LocScale<'t> {
        LocScale {
            family: self.family,
            loc: self.loc.detach(),
            scale: self.scale.detach(),
        }
    }

    pub fn values(&self) -> LocScaleParams {
        LocScaleParams {
            family: self.family,
            loc: self.loc.value(),
            scale: self.scale.value(),
        }
    }
}

/// Value-level location-scale parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocScaleParams {
    pub family: Family,
    pub loc: Tensor,
    pub scale: Tensor,
}

impl LocScaleParams {
    pub fn new(family: Family, loc: Tensor, scale: Tensor) -> Result<Self> {
        if loc.shape() != scale.shape() {
            return Err(Error::shapes("loc/scale", loc.shape(), scale.shape()));
        }
        if let Some(s) = scale.data().iter().find(|&&s| !(s > 0.0)) {
            return Err(Error::Domain(format!("scale must be positive, got {s}")));
        }
        Ok(LocScaleParams { family, loc, scale })
    }

    pub fn on<'t>(&self, tape: &'t Tape) -> LocScale<'t> {
        LocScale {
            family: self.family,
            loc: tape.constant(self.loc.clone()),
            scale: tape.constant(self.scale.clone()),
        }
    }

    pub fn dim(&self) -> usize {
        self.loc.len()
    }

    /// Row `i` of batched parameters.
    pub fn row(&self, i: usize) -> LocScaleParams {
        LocScaleParams {
            family: self.family,
            loc: self.loc.row(i),
            scale: self.scale.row(i),
        }
    }

    pub fn log_prob(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(self.loc.data().iter().zip(self.scale.data()))
            .map(|(&x, (&l, &s))| log_pdf(self.family, x, l, s))
            .sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let noise = draw_noise(self.family, &[self.dim()], rng);
        let t = standardize_noise(self.family, &noise).expect("drawn noise is in range");
        self.loc
            .data()
            .iter()
            .zip(self.scale.data())
            .zip(t.data())
            .map(|((l, s), t)| l + s * t)
            .collect()
    }

    /// Standard deviation per dimension (`√2·b` for Laplace).
    pub fn std_dev(&self) -> Vec<f64> {
        let f = match self.family {
            Family::Laplace => 2f64.sqrt(),
            Family::Gaussian => 1.0,
        };
        self.scale.data().iter().map(|s| s * f).collect()
    }
}

/// `Σ_m α_m q_m(z)` over per-modality components.
#[derive(Clone, Debug)]
pub struct MoEPosterior<P> {
    pub components: Vec<P>,
    pub weights: Vec<f64>,
}

impl<P> MoEPosterior<P> {
    pub fn new(components: Vec<P>, weights: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Contract("mixture needs at least one component".into()));
        }
        if weights.len() != components.len() {
            return Err(Error::Contract(format!(
                "{} weights for {} components",
                weights.len(),
                components.len()
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 || weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Contract(format!(
                "mixture weights must be positive and sum to 1, got {weights:?}"
            )));
        }
        Ok(MoEPosterior {
            components,
            weights,
        })
    }

    /// Equal weights `α_m = 1/M`.
    pub fn uniform(components: Vec<P>) -> Result<Self> {
        let m = components.len().max(1);
        Self::new(components, vec![1.0 / m as f64; m])
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }
}

impl<'t> MoEPosterior<LocScale<'t>> {
    /// Per-component log-densities `log q_m(z)`, stacked on a new leading axis.
    pub fn component_log_probs(&self, z: Var<'t>) -> Result<Var<'t>> {
        let parts = self
            .components
            .iter()
            .map(|c| c.log_prob(z))
            .collect::<Result<Vec<_>>>()?;
        z.tape().stack(&parts)
    }

    pub fn log_density(&self, z: Var<'t>) -> Result<Var<'t>> {
        moe_log_density(self, z)
    }

    pub fn detach(&self) -> Self {
        MoEPosterior {
            components: self.components.iter().map(LocScale::detach).collect(),
            weights: self.weights.clone(),
        }
    }
}

/// `logsumexp_m (log α_m + log q_m(z))`.
pub fn moe_log_density<'t>(post: &MoEPosterior<LocScale<'t>>, z: Var<'t>) -> Result<Var<'t>> {
    if post.components.is_empty() {
        return Err(Error::Contract("mixture has no components".into()));
    }
    let tape = z.tape();
    let parts = post
        .components
        .iter()
        .zip(&post.weights)
        .map(|(c, &w)| Ok(c.log_prob(z)?.add_scalar(w.ln())))
        .collect::<Result<Vec<_>>>()?;
    if parts.len() == 1 && post.weights[0] == 1.0 {
        return Ok(parts[0]);
    }
    tape.stack(&parts)?.logsumexp(0)
}

impl MoEPosterior<LocScaleParams> {
    pub fn log_density(&self, z: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| w.ln() + c.log_prob(z))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = i;
                break;
            }
        }
        self.components[pick].sample(rng)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Normalized product of Gaussian experts: precisions add, and the mean is
/// the precision-weighted average of the expert means.
pub fn poe_gaussian_product<'t>(components: &[LocScale<'t>]) -> Result<LocScale<'t>> {
    let first = components
        .first()
        .ok_or_else(|| Error::Contract("product of zero experts".into()))?;
    if let Some(c) = components.iter().find(|c| c.family != Family::Gaussian) {
        return Err(Error::Family(format!(
            "product of experts needs Gaussian experts, got {:?}",
            c.family
        )));
    }
    if components.len() == 1 {
        return Ok(*first);
    }
    let mut precision_sum: Option<Var<'t>> = None;
    let mut weighted_mean: Option<Var<'t>> = None;
    for c in components {
        let precision = c.scale.log()?.scale(-2.0).exp();
        let pm = precision.mul(c.loc)?;
        precision_sum = Some(match precision_sum {
            None => precision,
            Some(acc) => acc.add(precision)?,
        });
        weighted_mean = Some(match weighted_mean {
            None => pm,
            Some(acc) => acc.add(pm)?,
        });
    }
    let t = precision_sum.unwrap();
    let loc = weighted_mean.unwrap().div(t)?;
    let scale = t.log()?.scale(-0.5).exp();
    LocScale::new(Family::Gaussian, loc, scale)
}

/// Value-level counterpart of [`poe_gaussian_product`].
pub fn poe_gaussian_product_values(components: &[LocScaleParams]) -> Result<LocScaleParams> {
    let tape = Tape::new();
    let on: Vec<_> = components.iter().map(|c| c.on(&tape)).collect();
    Ok(poe_gaussian_product(&on)?.values())
}

/// Observation model `p(x | z)` on a tape.
#[derive(Clone, Copy, Debug)]
pub enum Likelihood<'t> {
    Laplace { loc: Var<'t>, scale: Var<'t> },
    Gaussian { loc: Var<'t>, scale: Var<'t> },
    /// Probabilities already clamped to `[BERNOULLI_EPS, 1 − BERNOULLI_EPS]`.
    Bernoulli { probs: Var<'t> },
    Categorical { logits: Var<'t> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LikelihoodFamily {
    Laplace,
    Gaussian,
    Bernoulli,
    Categorical,
}

impl<'t> Likelihood<'t> {
    pub fn family(&self) -> LikelihoodFamily {
        match self {
            Likelihood::Laplace { .. } => LikelihoodFamily::Laplace,
            Likelihood::Gaussian { .. } => LikelihoodFamily::Gaussian,
            Likelihood::Bernoulli { .. } => LikelihoodFamily::Bernoulli,
            Likelihood::Categorical { .. } => LikelihoodFamily::Categorical,
        }
    }

    /// Log-likelihood of `x` summed over the last axis. `x` broadcasts
    /// against the parameters over leading (particle) axes.
    pub fn log_prob(&self, x: Var<'t>) -> Result<Var<'t>> {
        let per_dim = match *self {
            Likelihood::Laplace { loc, scale } => {
                LocScale::new(Family::Laplace, loc, scale)?.log_prob_per_dim(x)?
            }
            Likelihood::Gaussian { loc, scale } => {
                LocScale::new(Family::Gaussian, loc, scale)?.log_prob_per_dim(x)?
            }
            Likelihood::Bernoulli { probs } => {
                let one_minus_x = x.neg().add_scalar(1.0);
                let one_minus_p = probs.neg().add_scalar(1.0);
                probs
                    .log()?
                    .mul(x)?
                    .add(one_minus_p.log()?.mul(one_minus_x)?)?
            }
            Likelihood::Categorical { logits } => logits.log_softmax()?.mul(x)?,
        };
        let last = per_dim.shape().len() - 1;
        per_dim.sum(last)
    }

    /// Mean of the observation distribution (class probabilities for
    /// Categorical).
    pub fn mean(&self) -> Tensor {
        match *self {
            Likelihood::Laplace { loc, .. } | Likelihood::Gaussian { loc, .. } => loc.value(),
            Likelihood::Bernoulli { probs } => probs.value(),
            Likelihood::Categorical { logits } => logits
                .log_softmax()
                .expect("logits rank >= 1")
                .exp()
                .value(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        match *self {
            Likelihood::Laplace { loc, scale } | Likelihood::Gaussian { loc, scale } => {
                let family = if matches!(self, Likelihood::Laplace { .. }) {
                    Family::Laplace
                } else {
                    Family::Gaussian
                };
                let (l, s) = (loc.value(), scale.value());
                let noise = draw_noise(family, l.shape(), rng);
                let t = standardize_noise(family, &noise).expect("drawn noise is in range");
                let data = l
                    .data()
                    .iter()
                    .zip(s.data().iter().cycle())
                    .zip(t.data())
                    .map(|((l, s), t)| l + s * t)
                    .collect();
                Tensor::new(l.shape().to_vec(), data).unwrap()
            }
            Likelihood::Bernoulli { probs } => {
                let p = probs.value();
                let data = p
                    .data()
                    .iter()
                    .map(|&p| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
                    .collect();
                Tensor::new(p.shape().to_vec(), data).unwrap()
            }
            Likelihood::Categorical { .. } => {
                let p = self.mean();
                let n = *p.shape().last().unwrap();
                let mut out = vec![0.0; p.len()];
                for (row, dst) in p.data().chunks(n).zip(out.chunks_mut(n)) {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut pick = n - 1;
                    for (j, &pj) in row.iter().enumerate() {
                        acc += pj;
                        if u < acc {
                            pick = j;
                            break;
                        }
                    }
                    dst[pick] = 1.0;
                }
                Tensor::new(p.shape().to_vec(), out).unwrap()
            }
        }
    }
}

/// A Monte Carlo estimate with its standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
}

impl McEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        McEstimate {
            mean,
            std_err: (var / n).sqrt(),
        }
    }
}

/// Per-dimension Monte Carlo estimate of `KL(q ‖ p) = E_q[log q − log p]`.
pub fn per_dim_kl<R: Rng + ?Sized>(
    q: &LocScaleParams,
    p: &LocScaleParams,
    n_mc: usize,
    rng: &mut R,
) -> Result<Vec<McEstimate>> {
    if q.family != p.family {
        return Err(Error::Family(format!(
            "KL between {:?} and {:?}",
            q.family, p.family
        )));
    }
    if q.loc.shape() != p.loc.shape() {
        return Err(Error::shapes("per_dim_kl", q.loc.shape(), p.loc.shape()));
    }
    if n_mc == 0 {
        return Err(Error::Contract("n_mc must be at least 1".into()));
    }
    let d = q.dim();
    let mut samples = vec![Vec::with_capacity(n_mc); d];
    for _ in 0..n_mc {
        let z = q.sample(rng);
        for (k, zk) in z.iter().enumerate() {
            let lq = log_pdf(q.family, *zk, q.loc.data()[k], q.scale.data()[k]);
            let lp = log_pdf(p.family, *zk, p.loc.data()[k], p.scale.data()[k]);
            samples[k].push(lq - lp);
        }
    }
    Ok(samples.iter().map(|s| McEstimate::from_samples(s)).collect())
}

/// `KL(q‖p) + KL(p‖q)` per dimension.
pub fn symmetric_kl<R: Rng + ?Sized>(
    q: &LocScaleParams,
    p: &LocScaleParams,
    n_mc: usize,
    rng: &mut R,
) -> Result<Vec<McEstimate>> {
    let a = per_dim_kl(q, p, n_mc, rng)?;
    let b = per_dim_kl(p, q, n_mc, rng)?;
    Ok(a.iter()
        .zip(&b)
        .map(|(a, b)| McEstimate {
            mean: a.mean + b.mean,
            std_err: a.std_err.hypot(b.std_err),
        })
        .collect())
}

/// Monte Carlo entropy `−E_q[log q(z)]`, summed over dimensions.
pub fn entropy_mc<R: Rng + ?Sized>(q: &LocScaleParams, n_mc: usize, rng: &mut R) -> Result<McEstimate> {
    if n_mc == 0 {
        return Err(Error::Contract("n_mc must be at least 1".into()));
    }
    let xs: Vec<f64> = (0..n_mc)
        .map(|_| {
            let z = q.sample(rng);
            -q.log_prob(&z)
        })
        .collect();
    Ok(McEstimate::from_samples(&xs))
}

/// Monte Carlo entropy of a mixture, sampling components by weight.
pub fn entropy_mc_mixture<R: Rng + ?Sized>(
    q: &MoEPosterior<LocScaleParams>,
    n_mc: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    if n_mc == 0 {
        return Err(Error::Contract("n_mc must be at least 1".into()));
    }
    let xs: Vec<f64> = (0..n_mc)
        .map(|_| {
            let z = q.sample(rng);
            -q.log_density(&z)
        })
        .collect();
    Ok(McEstimate::from_samples(&xs))
}
