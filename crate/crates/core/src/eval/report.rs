//! Full evaluation of a trained model into one JSON-serializable report.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PairedDataset;
use crate::distributions::McEstimate;
use crate::error::{Error, Result};
use crate::models::{cross_generate, generate_joint, MultimodalModel};
use crate::objectives::{log_marginal_estimate, LikelihoodRecord};
use crate::rng::substream;
use crate::tensor::{Tape, Tensor};

use super::cca::fit_cca;
use super::coherence::{coherence_cross, coherence_joint, CoherenceResult};
use super::diagnostics::{kl_diagnostics, posterior_entropy, DimDiagnostic, KlThresholds};
use super::oracle::OracleClassifier;
use super::probe::probe_accuracy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seed: u64,
    pub probe_rows: usize,
    pub coherence_r: usize,
    pub coherence_n: usize,
    pub cross_rows: usize,
    pub likelihood_k: usize,
    pub likelihood_rows: usize,
    pub likelihood_chunk: usize,
    pub cca_k: usize,
    pub cca_rows: usize,
    pub kl_rows: usize,
    pub n_mc: usize,
    pub kl: KlThresholds,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 0,
            probe_rows: 2000,
            coherence_r: 1000,
            coherence_n: 9,
            cross_rows: 2000,
            likelihood_k: 1000,
            likelihood_rows: 64,
            likelihood_chunk: 8,
            cca_k: 8,
            cca_rows: 4000,
            kl_rows: 64,
            n_mc: 100,
            kl: KlThresholds::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeEntry {
    /// `"x0"`, `"x1"`, ... for single-modality posteriors, `"joint"` for
    /// the joint posterior.
    pub latent: String,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossCoherence {
    pub source: usize,
    pub target: usize,
    pub result: CoherenceResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherenceTable {
    pub joint: CoherenceResult,
    pub cross: Vec<CrossCoherence>,
    pub oracle_accuracy: Vec<f64>,
    pub chance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcaTable {
    pub k: usize,
    pub correlations: Vec<f64>,
    /// Mean score of held-out ground-truth pairs.
    pub ground_truth: f64,
    /// Mean score of joint generations.
    pub joint: f64,
    /// Mean score of (input, cross generation) pairs, first to second
    /// modality and back.
    pub cross_0_to_1: f64,
    pub cross_1_to_0: f64,
    pub degenerate: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub kl: Option<Vec<DimDiagnostic>>,
    pub entropy: McEstimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub table1_latent_probe: Vec<ProbeEntry>,
    pub table2_coherence: Option<CoherenceTable>,
    pub table3_likelihood: Vec<LikelihoodRecord>,
    pub table4_cca: Option<CcaTable>,
    pub diagnostics: Diagnostics,
}

/// Up to `n` rows at an even stride.
pub fn strided(ds: &PairedDataset, n: usize) -> PairedDataset {
    let len = ds.len();
    let n = n.min(len);
    let idx: Vec<usize> = (0..n).map(|i| i * len / n).collect();
    ds.subset(&idx)
}

/// Posterior means: of `q(z | x_m)` for `Some(m)`, of the joint
/// posterior for `None`.
pub fn latent_means(model: &MultimodalModel, xs: &[Tensor], modality: Option<usize>) -> Result<Tensor> {
    match modality {
        Some(m) => Ok(model.encode(m, &xs[m])?.loc),
        None => {
            let tape = Tape::new();
            let bound = model.bind_frozen(&tape);
            let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
            Ok(bound.joint_posterior(&vars)?.mean()?.value())
        }
    }
}

/// Linear-probe accuracy of latent means: fit on `train`, score on `test`.
pub fn latent_probe(
    model: &MultimodalModel,
    train: &PairedDataset,
    test: &PairedDataset,
    modality: Option<usize>,
) -> Result<f64> {
    let a = latent_means(model, &train.xs, modality)?;
    let b = latent_means(model, &test.xs, modality)?;
    probe_accuracy(&a, &train.labels, &b, &test.labels, train.n_classes)
}

/// Likelihood records for every ordered modality pair, averaged over
/// chunks of `rows`. Each chunk draws from its own substream, so the
/// result does not depend on the worker count.
pub fn likelihood_table(model: &MultimodalModel, rows: &PairedDataset, k: usize, chunk: usize, seed: u64) -> Result<Vec<LikelihoodRecord>> {
    let m_count = model.num_modalities();
    let idx: Vec<usize> = (0..rows.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(chunk.max(1)).collect();
    let mut out = Vec::new();
    for m in 0..m_count {
        for n in (0..m_count).filter(|&n| n != m) {
            let parts = chunks
                .par_iter()
                .enumerate()
                .map(|(c, ix)| {
                    let mut rng = substream(seed, &format!("eval.likelihood.{m}.{n}.{c}"));
                    Ok((ix.len(), log_marginal_estimate(model, &rows.rows(ix), m, n, k, &mut rng)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let total = rows.len() as f64;
            let mut rec = LikelihoodRecord {
                m,
                n,
                joint: 0.0,
                given_both: 0.0,
                given_self: 0.0,
                given_other: 0.0,
            };
            for (len, r) in parts {
                let w = len as f64 / total;
                rec.joint += w * r.joint;
                rec.given_both += w * r.given_both;
                rec.given_self += w * r.given_self;
                rec.given_other += w * r.given_other;
            }
            out.push(rec);
        }
    }
    Ok(out)
}

fn cca_table(model: &MultimodalModel, train: &PairedDataset, test: &PairedDataset, config: &EvalConfig) -> Result<CcaTable> {
    let fit = strided(train, config.cca_rows);
    let k = config.cca_k.min(fit.dims()[0]).min(fit.dims()[1]);
    let proj = fit_cca(&fit.xs[0], &fit.xs[1], k)?;
    let (ground_truth, mut degenerate) = proj.mean_score(&test.xs[0], &test.xs[1])?;
    let mut rng = substream(config.seed, "eval.cca");
    let gen = generate_joint(model, test.len(), 1, &mut rng)?;
    let (joint, d) = proj.mean_score(&gen.samples[0], &gen.samples[1])?;
    degenerate += d;
    let to1 = cross_generate(model, 0, &test.xs[0], 1, &mut rng)?;
    let (cross_0_to_1, d) = proj.mean_score(&test.xs[0], &to1)?;
    degenerate += d;
    let to0 = cross_generate(model, 1, &test.xs[1], 0, &mut rng)?;
    let (cross_1_to_0, d) = proj.mean_score(&to0, &test.xs[1])?;
    degenerate += d;
    Ok(CcaTable {
        k,
        correlations: proj.correlations,
        ground_truth,
        joint,
        cross_0_to_1,
        cross_1_to_0,
        degenerate,
    })
}

/// Runs every protocol. Coherence is skipped when `oracles` is `None`;
/// CCA and KL diagnostics need two modalities.
pub fn evaluate_model(
    model: &MultimodalModel,
    oracles: Option<&[OracleClassifier]>,
    train: &PairedDataset,
    test: &PairedDataset,
    config: &EvalConfig,
) -> Result<EvalReport> {
    let dims: Vec<usize> = model.config().modalities.iter().map(|m| m.input_dim).collect();
    if train.dims() != dims || test.dims() != dims {
        return Err(Error::Dimension(format!(
            "datasets have dims {:?}/{:?}, model expects {dims:?}",
            train.dims(),
            test.dims()
        )));
    }
    let m_count = model.num_modalities();
    let probe_train = strided(train, config.probe_rows);
    let probe_test = strided(test, config.probe_rows);
    let mut table1 = Vec::new();
    for m in 0..m_count {
        table1.push(ProbeEntry {
            latent: format!("x{m}"),
            accuracy: latent_probe(model, &probe_train, &probe_test, Some(m))?,
        });
    }
    table1.push(ProbeEntry {
        latent: "joint".into(),
        accuracy: latent_probe(model, &probe_train, &probe_test, None)?,
    });

    let table2 = match oracles {
        Some(oracles) => {
            let mut rng = substream(config.seed, "eval.coherence");
            let joint = coherence_joint(model, oracles, config.coherence_r, config.coherence_n, &mut rng)?;
            let cross_rows = strided(test, config.cross_rows);
            let mut cross = Vec::new();
            for s in 0..m_count {
                for t in (0..m_count).filter(|&t| t != s) {
                    let result = coherence_cross(model, oracles, s, t, &cross_rows.xs[s], &cross_rows.labels, &mut rng)?;
                    cross.push(CrossCoherence { source: s, target: t, result });
                }
            }
            Some(CoherenceTable {
                joint,
                cross,
                oracle_accuracy: oracles.iter().map(|o| o.test_accuracy).collect(),
                chance: 1.0 / test.n_classes as f64,
            })
        }
        None => None,
    };

    let table3 = if m_count >= 2 {
        let rows = strided(test, config.likelihood_rows);
        likelihood_table(model, &rows, config.likelihood_k, config.likelihood_chunk, config.seed)?
    } else {
        Vec::new()
    };

    let table4 = if m_count == 2 {
        Some(cca_table(model, train, &strided(test, config.cross_rows), config)?)
    } else {
        None
    };

    let kl_rows = strided(test, config.kl_rows);
    let mut rng = substream(config.seed, "eval.diagnostics");
    let kl = if m_count == 2 {
        Some(kl_diagnostics(model, &kl_rows.xs, config.n_mc, &config.kl, &mut rng)?)
    } else {
        None
    };
    let entropy = posterior_entropy(model, &kl_rows.xs, config.n_mc, &mut rng)?;

    Ok(EvalReport {
        config: config.clone(),
        table1_latent_probe: table1,
        table2_coherence: table2,
        table3_likelihood: table3,
        table4_cca: table4,
        diagnostics: Diagnostics { kl, entropy },
    })
}
