use rand::Rng;

use super::MultimodalModel;
use crate::distributions::draw_noise;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Joint generations grouped by latent draw: row `r·N + j` of every
/// modality comes from latent `z[r]`.
#[derive(Clone, Debug)]
pub struct JointSamples {
    pub z: Tensor,
    pub z_group: Vec<usize>,
    pub samples: Vec<Tensor>,
}

/// Draws `r` latents from the prior and `n` likelihood samples per latent
/// and modality.
pub fn generate_joint<R: Rng + ?Sized>(
    model: &MultimodalModel,
    r: usize,
    n: usize,
    rng: &mut R,
) -> Result<JointSamples> {
    if r == 0 || n == 0 {
        return Err(Error::Contract(format!("R and N must be positive, got R={r}, N={n}")));
    }
    let tape = Tape::new();
    let bound = model.bind_frozen(&tape);
    let prior = bound.prior()?;
    let d = model.latent_dim();
    let noise = draw_noise(prior.family, &[r, d], rng);
    let z = prior.rsample(&noise)?;
    // repeat each latent n times so that one decoder pass covers all rows
    let rows: Vec<usize> = (0..r).flat_map(|i| std::iter::repeat(i).take(n)).collect();
    let z_rep = tape.constant(z.value().select_rows(&rows));
    let mut samples = Vec::with_capacity(model.num_modalities());
    for m in 0..model.num_modalities() {
        samples.push(bound.decode(m, z_rep)?.sample(rng));
    }
    Ok(JointSamples {
        z: z.value(),
        z_group: rows,
        samples,
    })
}

/// `z ~ q(z | x_source)` then `x_target ~ p(x_target | z)`, one sample
/// per input row.
pub fn cross_generate<R: Rng + ?Sized>(
    model: &MultimodalModel,
    source: usize,
    x: &Tensor,
    target: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = model.bind_frozen(&tape);
    let q = bound.encode(source, tape.constant(x.clone()))?;
    let noise = draw_noise(q.family, &q.loc.shape(), rng);
    let z = q.rsample(&noise)?;
    Ok(bound.decode(target, z)?.sample(rng))
}

/// Likelihood mean of `target` decoded at the posterior location of
/// `x_source`.
pub fn reconstruct_mean(model: &MultimodalModel, source: usize, x: &Tensor, target: usize) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = model.bind_frozen(&tape);
    let q = bound.encode(source, tape.constant(x.clone()))?;
    Ok(bound.decode(target, q.loc)?.mean())
}

/// Traversal of latent coordinate `dim` around the posterior location of a
/// single observation, over `loc ± 5·σ0` with σ0 the prior scale. Returns
/// the latents `[steps, D]` and decoded means per modality.
pub fn traverse(
    model: &MultimodalModel,
    source: usize,
    x: &Tensor,
    dim: usize,
    steps: usize,
) -> Result<(Tensor, Vec<Tensor>)> {
    let d = model.latent_dim();
    if dim >= d {
        return Err(Error::Index { index: dim, count: d });
    }
    if steps < 2 {
        return Err(Error::Contract(format!("traversal needs at least 2 steps, got {steps}")));
    }
    let x = if x.rank() == 1 { x.reshape(&[1, x.len()])? } else { x.clone() };
    if x.shape()[0] != 1 {
        return Err(Error::Contract("traversal takes a single observation".into()));
    }
    let q = model.encode(source, &x)?;
    let mu = q.loc.row(0);
    let sigma0 = model.prior_params().scale.data()[dim];
    let lo = mu.data()[dim] - 5.0 * sigma0;
    let hi = mu.data()[dim] + 5.0 * sigma0;
    let mut data = Vec::with_capacity(steps * d);
    for s in 0..steps {
        let mut row = mu.data().to_vec();
        row[dim] = if s == steps - 1 {
            hi
        } else {
            lo + (hi - lo) * s as f64 / (steps - 1) as f64
        };
        data.extend(row);
    }
    let zs = Tensor::new(vec![steps, d], data)?;
    let tape = Tape::new();
    let bound = model.bind_frozen(&tape);
    let z = tape.constant(zs.clone());
    let outs = (0..model.num_modalities())
        .map(|m| Ok(bound.decode(m, z)?.mean()))
        .collect::<Result<Vec<_>>>()?;
    Ok((zs, outs))
}
