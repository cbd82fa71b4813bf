//! Synthetic two-modality data with a shared class factor and
//! modality-private style, and class-matched pairing across modalities.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::distributions::LikelihoodFamily;
use crate::error::{Error, Result};
use crate::eval::probe::probe_accuracy;
use crate::rng::{substream, DATA};
use crate::tensor::Tensor;

/// Accuracy a linear classifier must reach on held-out raw data of each
/// generated modality.
pub const SEPARABILITY_GATE: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDatasetConfig {
    pub n_classes: usize,
    /// Instances per class in each modality.
    pub per_class: usize,
    /// Modality A: templates plus a smooth low-frequency deformation.
    pub dim_a: usize,
    /// Modality B: templates plus independent per-dimension noise.
    pub dim_b: usize,
    /// Number of cosine components in modality A's deformation.
    pub style_dims: usize,
    /// Per-coordinate RMS of A's deformation; pixel noise is a tenth of it.
    pub noise_a: f64,
    /// Per-coordinate standard deviation of B's noise.
    pub noise_b: f64,
    /// Partners drawn per source instance when pairing.
    pub pairs_per_instance: usize,
    /// Threshold modality A at zero into a binary bitmap.
    pub bitmap: bool,
    pub seed: u64,
}

impl Default for ToyDatasetConfig {
    fn default() -> Self {
        ToyDatasetConfig {
            n_classes: 4,
            per_class: 200,
            dim_a: 64,
            dim_b: 16,
            style_dims: 8,
            noise_a: 3.0,
            noise_b: 0.5,
            pairs_per_instance: 20,
            bitmap: false,
            seed: 0,
        }
    }
}

impl ToyDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_classes < 2 || self.n_classes > u16::MAX as usize {
            return bad(format!("n_classes must be in [2, 65535], got {}", self.n_classes));
        }
        if self.dim_a < self.n_classes || self.dim_b < self.n_classes {
            return bad("modality dims must be at least n_classes".into());
        }
        if self.dim_a < self.n_classes + self.style_dims {
            return bad("dim_a must hold the class templates and the style subspace".into());
        }
        if self.per_class < 10 {
            return bad("per_class must be at least 10 for the 80/10/10 split".into());
        }
        if self.pairs_per_instance == 0 {
            return bad("pairs_per_instance must be at least 1".into());
        }
        if !(self.noise_a >= 0.0 && self.noise_b >= 0.0) {
            return bad("noise scales must be non-negative".into());
        }
        Ok(())
    }

    pub fn likelihoods(&self) -> [LikelihoodFamily; 2] {
        let a = if self.bitmap {
            LikelihoodFamily::Bernoulli
        } else {
            LikelihoodFamily::Laplace
        };
        [a, LikelihoodFamily::Laplace]
    }
}

/// Labeled observations of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySet {
    pub x: Tensor,
    pub labels: Vec<u16>,
}

impl ModalitySet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> ModalitySet {
        ModalitySet {
            x: self.x.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyData {
    pub a: ModalitySet,
    pub b: ModalitySet,
    /// `[C, n]` class templates of each modality.
    pub templates: Vec<Tensor>,
    /// Held-out linear-probe accuracy per modality.
    pub separability: [f64; 2],
    /// Mean squared standardized cross-correlation between private
    /// components of A and B over class-matched instances, and the bound
    /// it was checked against. `None` when a modality is noiseless.
    pub independence: Option<(f64, f64)>,
}

/// Orthonormal DCT-II vectors `k = 1..=s` of length `n`.
fn cosine_basis(n: usize, s: usize) -> Vec<Vec<f64>> {
    (1..=s)
        .map(|k| {
            let v: Vec<f64> = (0..n)
                .map(|i| (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / n as f64).cos())
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// `c` random directions orthogonal to `avoid` and to each other, each with
/// norm `sqrt(n)`.
fn templates<R: Rng + ?Sized>(n: usize, c: usize, avoid: &[Vec<f64>], rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let mut basis: Vec<Vec<f64>> = avoid.to_vec();
    let mut out = Vec::with_capacity(c);
    while out.len() < c {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            return Err(Error::Numeric("could not draw orthogonal templates".into()));
        }
        let unit: Vec<f64> = v.iter().map(|x| x / norm).collect();
        out.push(unit.iter().map(|x| x * (n as f64).sqrt()).collect());
        basis.push(unit);
    }
    Ok(out)
}

fn flatten(rows: Vec<Vec<f64>>, n: usize) -> Tensor {
    let r = rows.len();
    Tensor::new(vec![r, n], rows.into_iter().flatten().collect()).expect("rows of length n")
}

/// Pearson correlation.
fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

/// Generates the two unpaired modalities. Instances of class `c` are
/// `template_m(c)` plus private variation; every fourth instance is held
/// out to check linear recoverability of the class, and the private
/// components of class-matched instances are checked for correlation.
pub fn generate_toy_multimodal(config: &ToyDatasetConfig) -> Result<ToyData> {
    config.validate()?;
    let mut rng = substream(config.seed, DATA);
    let (c, na, nb, s) = (config.n_classes, config.dim_a, config.dim_b, config.style_dims);
    let style = cosine_basis(na, s);
    let ta = templates(na, c, &style, &mut rng)?;
    let tb = templates(nb, c, &[], &mut rng)?;
    let coeff_sd = if s > 0 { config.noise_a * (na as f64 / s as f64).sqrt() } else { 0.0 };

    let total = c * config.per_class;
    let mut xa = Vec::with_capacity(total);
    let mut style_coeffs = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for class in 0..c {
        for _ in 0..config.per_class {
            let g: Vec<f64> = (0..s).map(|_| coeff_sd * rng.sample::<f64, _>(StandardNormal)).collect();
            let mut x = ta[class].clone();
            for (gk, bk) in g.iter().zip(&style) {
                for (xi, bi) in x.iter_mut().zip(bk) {
                    *xi += gk * bi;
                }
            }
            for xi in x.iter_mut() {
                *xi += 0.1 * config.noise_a * rng.sample::<f64, _>(StandardNormal);
            }
            if config.bitmap {
                for xi in x.iter_mut() {
                    *xi = if *xi > 0.0 { 1.0 } else { 0.0 };
                }
            }
            xa.push(x);
            style_coeffs.push(g);
            labels.push(class as u16);
        }
    }
    let mut xb = Vec::with_capacity(total);
    let mut noise_b = Vec::with_capacity(total);
    for class in 0..c {
        for _ in 0..config.per_class {
            let e: Vec<f64> = (0..nb).map(|_| config.noise_b * rng.sample::<f64, _>(StandardNormal)).collect();
            xb.push(tb[class].iter().zip(&e).map(|(t, e)| t + e).collect::<Vec<f64>>());
            noise_b.push(e);
        }
    }

    let a = ModalitySet {
        x: flatten(xa, na),
        labels: labels.clone(),
    };
    let b = ModalitySet {
        x: flatten(xb, nb),
        labels,
    };

    let (fit_idx, held_idx): (Vec<usize>, Vec<usize>) = (0..total).partition(|i| i % 4 != 3);
    let mut separability = [0.0; 2];
    for (slot, set) in separability.iter_mut().zip([&a, &b]) {
        let fit = set.subset(&fit_idx);
        let held = set.subset(&held_idx);
        *slot = probe_accuracy(&fit.x, &fit.labels, &held.x, &held.labels, c)?;
        if *slot < SEPARABILITY_GATE {
            return Err(Error::Gate {
                measured: *slot,
                required: SEPARABILITY_GATE,
            });
        }
    }

    // instance i of each class in A is matched with instance i of the same
    // class in B; under independence each √N·r is approximately N(0, 1)
    let independence = if coeff_sd > 0.0 && config.noise_b > 0.0 {
        let (ka, kb) = (s.min(4), nb.min(4));
        let mut z2 = 0.0;
        for i in 0..ka {
            for j in 0..kb {
                let ga: Vec<f64> = style_coeffs.iter().map(|g| g[i]).collect();
                let eb: Vec<f64> = noise_b.iter().map(|e| e[j]).collect();
                z2 += correlation(&ga, &eb).powi(2) * total as f64;
            }
        }
        let stat = z2 / (ka * kb) as f64;
        let bound = 1.0 + 3.0 * (2.0 / (ka * kb) as f64).sqrt();
        if stat > bound {
            return Err(Error::Numeric(format!(
                "private components look correlated across modalities: mean z² {stat:.3} > {bound:.3}"
            )));
        }
        Some((stat, bound))
    } else {
        None
    };

    Ok(ToyData {
        a,
        b,
        templates: vec![flatten(ta, na), flatten(tb, nb)],
        separability,
        independence,
    })
}

/// Class-matched pairs: each instance of A draws `p` partners of its class
/// from B uniformly with replacement, then each instance of B does the same
/// in A. Returns `(index in A, index in B)`.
pub fn pair_by_class<R: Rng + ?Sized>(
    labels_a: &[u16],
    labels_b: &[u16],
    p: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    if p == 0 {
        return Err(Error::Config("pairing multiplicity must be at least 1".into()));
    }
    let classes_a: BTreeSet<u16> = labels_a.iter().copied().collect();
    let classes_b: BTreeSet<u16> = labels_b.iter().copied().collect();
    if let Some(&class) = classes_a.symmetric_difference(&classes_b).next() {
        return Err(Error::Pairing { class });
    }
    let by_class = |labels: &[u16]| {
        let top = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
        let mut groups = vec![Vec::new(); top];
        for (i, &l) in labels.iter().enumerate() {
            groups[l as usize].push(i);
        }
        groups
    };
    let (ga, gb) = (by_class(labels_a), by_class(labels_b));
    let mut pairs = Vec::with_capacity(p * (labels_a.len() + labels_b.len()));
    for (i, &l) in labels_a.iter().enumerate() {
        let pool = &gb[l as usize];
        for _ in 0..p {
            pairs.push((i, pool[rng.random_range(0..pool.len())]));
        }
    }
    for (j, &l) in labels_b.iter().enumerate() {
        let pool = &ga[l as usize];
        for _ in 0..p {
            pairs.push((pool[rng.random_range(0..pool.len())], j));
        }
    }
    Ok(pairs)
}

/// Row-aligned multimodal observations with shared labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub n_classes: usize,
    pub xs: Vec<Tensor>,
    pub labels: Vec<u16>,
    /// Source-instance indices of each row, when known.
    pub pair_indices: Option<Vec<(u32, u32)>>,
}

impl PairedDataset {
    pub fn new(n_classes: usize, xs: Vec<Tensor>, labels: Vec<u16>) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::Contract("dataset needs at least one modality".into()));
        }
        if xs.iter().any(|x| x.rank() != 2 || x.shape()[0] != labels.len()) {
            return Err(Error::Dimension("every modality must be [rows, dim] with one label per row".into()));
        }
        Ok(PairedDataset {
            n_classes,
            xs,
            labels,
            pair_indices: None,
        })
    }

    pub fn from_pairs(a: &ModalitySet, b: &ModalitySet, pairs: &[(usize, usize)], n_classes: usize) -> Self {
        let ia: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let ib: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        PairedDataset {
            n_classes,
            xs: vec![a.x.select_rows(&ia), b.x.select_rows(&ib)],
            labels: ia.iter().map(|&i| a.labels[i]).collect(),
            pair_indices: Some(pairs.iter().map(|&(i, j)| (i as u32, j as u32)).collect()),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.xs.iter().map(|x| x.shape()[1]).collect()
    }

    pub fn num_modalities(&self) -> usize {
        self.xs.len()
    }

    pub fn rows(&self, idx: &[usize]) -> Vec<Tensor> {
        self.xs.iter().map(|x| x.select_rows(idx)).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> PairedDataset {
        PairedDataset {
            n_classes: self.n_classes,
            xs: self.rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            pair_indices: self
                .pair_indices
                .as_ref()
                .map(|p| idx.iter().map(|&i| p[i]).collect()),
        }
    }

    pub fn head(&self, n: usize) -> PairedDataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: PairedDataset,
    pub val: PairedDataset,
    pub test: PairedDataset,
}

/// Splits each modality 80/10/10 by source instance within every class,
/// then pairs within each split.
pub fn make_splits(data: &ToyData, config: &ToyDatasetConfig) -> Result<Splits> {
    let mut rng = substream(config.seed, "data.split");
    let mut split_idx = |set: &ModalitySet| -> [Vec<usize>; 3] {
        let mut out: [Vec<usize>; 3] = Default::default();
        for class in 0..config.n_classes as u16 {
            let mut idx: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] == class).collect();
            idx.shuffle(&mut rng);
            let n_train = idx.len() * 8 / 10;
            let n_val = idx.len() / 10;
            out[0].extend_from_slice(&idx[..n_train]);
            out[1].extend_from_slice(&idx[n_train..n_train + n_val]);
            out[2].extend_from_slice(&idx[n_train + n_val..]);
        }
        out
    };
    let sa = split_idx(&data.a);
    let sb = split_idx(&data.b);
    let mut pair_rng = substream(config.seed, "data.pair");
    let mut build = |k: usize| -> Result<PairedDataset> {
        let a = data.a.subset(&sa[k]);
        let b = data.b.subset(&sb[k]);
        let pairs = pair_by_class(&a.labels, &b.labels, config.pairs_per_instance, &mut pair_rng)?;
        Ok(PairedDataset::from_pairs(&a, &b, &pairs, config.n_classes))
    };
    Ok(Splits {
        train: build(0)?,
        val: build(1)?,
        test: build(2)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_basis_is_orthonormal() {
        let b = cosine_basis(16, 5);
        for i in 0..5 {
            for j in 0..5 {
                let dot: f64 = b[i].iter().zip(&b[j]).map(|(x, y)| x * y).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pairing_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pairs = pair_by_class(&[0; 5], &[0; 7], 20, &mut rng).unwrap();
        assert_eq!(pairs.len(), 240);
        let pairs = pair_by_class(&[3], &[3], 1, &mut rng).unwrap();
        assert_eq!(pairs, vec![(0, 0), (0, 0)]);
    }

    #[test]
    fn pairing_names_missing_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = pair_by_class(&[0, 1, 2], &[0, 1], 2, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Pairing { class: 2 }));
    }

    #[test]
    fn noiseless_instances_equal_templates() {
        let cfg = ToyDatasetConfig {
            noise_a: 0.0,
            noise_b: 0.0,
            per_class: 10,
            ..Default::default()
        };
        let d = generate_toy_multimodal(&cfg).unwrap();
        for (set, t) in [(&d.a, &d.templates[0]), (&d.b, &d.templates[1])] {
            for i in 0..set.len() {
                assert_eq!(set.x.row(i), t.row(set.labels[i] as usize));
            }
        }
        assert!(d.independence.is_none());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = ToyDatasetConfig {
            n_classes: 1,
            ..Default::default()
        };
        assert!(matches!(generate_toy_multimodal(&cfg), Err(Error::Config(_))));
    }
}
