//! Per-dimension KL diagnostics and posterior entropy.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{entropy_mc, per_dim_kl, symmetric_kl, McEstimate};
use crate::error::{Error, Result};
use crate::models::MultimodalModel;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KlThresholds {
    /// A dimension is active for a modality above this KL to the prior.
    pub active: f64,
    /// Active-for-both dimensions are shared when the symmetric KL between
    /// the posteriors is below this fraction of the smaller KL.
    pub shared_ratio: f64,
}

impl Default for KlThresholds {
    fn default() -> Self {
        KlThresholds {
            active: 0.1,
            shared_ratio: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DimClass {
    PrivateTo1,
    PrivateTo2,
    Shared,
    /// Active for both modalities with disagreeing posteriors.
    Divergent,
    Inactive,
}

impl DimClass {
    pub fn name(self) -> &'static str {
        match self {
            DimClass::PrivateTo1 => "private-to-1",
            DimClass::PrivateTo2 => "private-to-2",
            DimClass::Shared => "shared",
            DimClass::Divergent => "divergent",
            DimClass::Inactive => "inactive",
        }
    }
}

pub fn classify(kl1: f64, kl2: f64, sym_kl: f64, th: &KlThresholds) -> DimClass {
    match (kl1 > th.active, kl2 > th.active) {
        (false, false) => DimClass::Inactive,
        (true, false) => DimClass::PrivateTo1,
        (false, true) => DimClass::PrivateTo2,
        (true, true) if sym_kl < th.shared_ratio * kl1.min(kl2) => DimClass::Shared,
        (true, true) => DimClass::Divergent,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimDiagnostic {
    pub dim: usize,
    pub kl1: f64,
    pub kl2: f64,
    pub sym_kl: f64,
    pub class: DimClass,
}

/// Per-dimension `KL(q_1‖p)`, `KL(q_2‖p)` and the symmetric KL between
/// `q_1` and `q_2`, averaged over the rows of a paired batch.
pub fn kl_diagnostics<R: Rng + ?Sized>(
    model: &MultimodalModel,
    xs: &[Tensor],
    n_mc: usize,
    th: &KlThresholds,
    rng: &mut R,
) -> Result<Vec<DimDiagnostic>> {
    if model.num_modalities() != 2 || xs.len() != 2 {
        return Err(Error::Contract("KL diagnostics need a two-modality model and batch".into()));
    }
    let q1 = model.encode(0, &xs[0])?;
    let q2 = model.encode(1, &xs[1])?;
    let prior = model.prior_params();
    let rows = xs[0].shape()[0];
    let d = model.latent_dim();
    let mut acc = vec![[0.0; 3]; d];
    for i in 0..rows {
        let (a, b) = (q1.row(i), q2.row(i));
        let k1 = per_dim_kl(&a, &prior, n_mc, rng)?;
        let k2 = per_dim_kl(&b, &prior, n_mc, rng)?;
        let ks = symmetric_kl(&a, &b, n_mc, rng)?;
        for j in 0..d {
            acc[j][0] += k1[j].mean / rows as f64;
            acc[j][1] += k2[j].mean / rows as f64;
            acc[j][2] += ks[j].mean / rows as f64;
        }
    }
    Ok(acc
        .iter()
        .enumerate()
        .map(|(dim, &[kl1, kl2, sym_kl])| DimDiagnostic {
            dim,
            kl1,
            kl2,
            sym_kl,
            class: classify(kl1, kl2, sym_kl, th),
        })
        .collect())
}

pub fn kl_csv(diags: &[DimDiagnostic]) -> String {
    let mut out = String::from("dim,kl1,kl2,sym_kl,class\n");
    for d in diags {
        writeln!(out, "{},{},{},{},{}", d.dim, d.kl1, d.kl2, d.sym_kl, d.class.name()).unwrap();
    }
    out
}

/// Monte Carlo entropy of the single-modality posteriors, averaged over
/// modalities; the standard error is across rows.
pub fn posterior_entropy<R: Rng + ?Sized>(
    model: &MultimodalModel,
    xs: &[Tensor],
    n_mc: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    let rows = xs[0].shape()[0];
    let mut per_row = vec![0.0; rows];
    for (m, x) in xs.iter().enumerate() {
        let q = model.encode(m, x)?;
        for (i, slot) in per_row.iter_mut().enumerate() {
            *slot += entropy_mc(&q.row(i), n_mc, rng)?.mean / xs.len() as f64;
        }
    }
    Ok(McEstimate::from_samples(&per_row))
}
