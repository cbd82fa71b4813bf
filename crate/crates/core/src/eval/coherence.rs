//! Oracle-scored agreement of generations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{cross_generate, generate_joint, MultimodalModel};
use crate::tensor::Tensor;

use super::oracle::OracleClassifier;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherenceResult {
    pub rate: f64,
    pub count: usize,
    /// Binomial standard error of `rate`.
    pub std_err: f64,
}

impl CoherenceResult {
    fn new(hits: usize, count: usize) -> Self {
        let rate = hits as f64 / count.max(1) as f64;
        CoherenceResult {
            rate,
            count,
            std_err: (rate * (1.0 - rate) / count.max(1) as f64).sqrt(),
        }
    }
}

fn check_oracles(model: &MultimodalModel, oracles: &[OracleClassifier]) -> Result<()> {
    if oracles.len() != model.num_modalities() {
        return Err(Error::Contract(format!(
            "{} oracles for {} modalities",
            oracles.len(),
            model.num_modalities()
        )));
    }
    for (o, m) in oracles.iter().zip(&model.config().modalities) {
        o.check_gate()?;
        if o.input_dim != m.input_dim {
            return Err(Error::Dimension(format!(
                "oracle for '{}' takes {} inputs, modality has {}",
                m.name, o.input_dim, m.input_dim
            )));
        }
    }
    Ok(())
}

/// Most frequent class; ties go to the smallest label.
pub fn modal_class(preds: &[u16]) -> u16 {
    let top = preds.iter().copied().max().unwrap_or(0) as usize;
    let mut counts = vec![0usize; top + 1];
    for &p in preds {
        counts[p as usize] += 1;
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    counts.iter().position(|&c| c == best).unwrap_or(0) as u16
}

/// Fraction of `r` prior latents whose `n` generations get the same modal
/// oracle class in every modality.
pub fn coherence_joint<R: Rng + ?Sized>(
    model: &MultimodalModel,
    oracles: &[OracleClassifier],
    r: usize,
    n: usize,
    rng: &mut R,
) -> Result<CoherenceResult> {
    check_oracles(model, oracles)?;
    let gen = generate_joint(model, r, n, rng)?;
    let modal: Vec<Vec<u16>> = gen
        .samples
        .iter()
        .zip(oracles)
        .map(|(x, o)| Ok(o.predict(x)?.chunks(n).map(modal_class).collect()))
        .collect::<Result<_>>()?;
    let hits = (0..r).filter(|&i| modal.iter().all(|p| p[i] == modal[0][i])).count();
    Ok(CoherenceResult::new(hits, r))
}

/// Fraction of source rows whose generation in `target` is classified as
/// the source row's true label.
pub fn coherence_cross<R: Rng + ?Sized>(
    model: &MultimodalModel,
    oracles: &[OracleClassifier],
    source: usize,
    target: usize,
    x_source: &Tensor,
    labels: &[u16],
    rng: &mut R,
) -> Result<CoherenceResult> {
    check_oracles(model, oracles)?;
    if x_source.shape()[0] != labels.len() {
        return Err(Error::Contract("one label per source row required".into()));
    }
    let target_oracle = oracles.get(target).ok_or(Error::Index {
        index: target,
        count: oracles.len(),
    })?;
    let mut hits = 0;
    let idx: Vec<usize> = (0..labels.len()).collect();
    for chunk in idx.chunks(256) {
        let gen = cross_generate(model, source, &x_source.select_rows(chunk), target, rng)?;
        let pred = target_oracle.predict(&gen)?;
        hits += chunk.iter().zip(&pred).filter(|(&i, &p)| labels[i] == p).count();
    }
    Ok(CoherenceResult::new(hits, labels.len()))
}
