//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run everything with `cargo test --release -p mmvl-cli --test acceptance`,
//! or pass criterion numbers after `--` to run a subset.

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use mmvl_core::analytic::LinearGaussian;
use mmvl_core::checkpoint::{load_checkpoint, Checkpoint};
use mmvl_core::data::{PairedDataset, ToyDatasetConfig};
use mmvl_core::dataset_io::{dataset_to_bytes, load_dataset};
use mmvl_core::eval::{
    coherence_cross, coherence_joint, fit_cca, latent_probe, likelihood_table, posterior_entropy, strided,
    CcaProjection,
};
use mmvl_core::models::{Combination, MultimodalModel};
use mmvl_core::objectives::{Estimator, ObjectiveKind};
use mmvl_core::pipeline::{prepare_toy, single_modality, ModelSpec, ToyArtifacts};
use mmvl_core::rng::substream;
use mmvl_core::train::{TrainConfig, Trainer};
use mmvl_core::verify::{check_dreg_variance, check_identities, check_objectives, check_primitives, check_sandwich, CheckResult};
use mmvl_core::{Error, Tensor};
use rand::Rng;

/// Desk-scale budget shared by every trained model: the default toy
/// dataset with five partners per instance and this many epochs.
const PAIRS_PER_INSTANCE: usize = 5;
const EPOCHS: usize = 30;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

type Outcome = Result<(bool, String), Error>;

struct Run {
    model: MultimodalModel,
    shares: Vec<f64>,
}

/// Trained models, built on first use and shared between criteria.
struct Desk {
    data: OnceCell<ToyArtifacts>,
    groups: BTreeMap<&'static str, OnceCell<(Vec<Run>, f64)>>,
}

impl Desk {
    fn new() -> Self {
        let groups = ["mmvae", "poe", "vae0", "vae1", "tight", "elbo", "iwae20"]
            .into_iter()
            .map(|g| (g, OnceCell::new()))
            .collect();
        Desk { data: OnceCell::new(), groups }
    }

    fn data(&self) -> &ToyArtifacts {
        self.data.get_or_init(|| {
            let config = ToyDatasetConfig {
                pairs_per_instance: PAIRS_PER_INSTANCE,
                ..Default::default()
            };
            prepare_toy(&config, &Default::default()).expect("toy data")
        })
    }

    /// Five seeds of one configuration with the seconds spent training.
    fn group(&self, name: &'static str) -> &(Vec<Run>, f64) {
        self.groups[name].get_or_init(|| {
            let start = Instant::now();
            let data = self.data();
            let (objective, estimator, k, combination, modality) = match name {
                "mmvae" => (ObjectiveKind::MoeIwaeLoose, Estimator::Dreg, 10, Combination::MoE, None),
                "poe" => (ObjectiveKind::MoeIwaeLoose, Estimator::Dreg, 10, Combination::PoE, None),
                "vae0" => (ObjectiveKind::MoeIwaeLoose, Estimator::Dreg, 10, Combination::MoE, Some(0)),
                "vae1" => (ObjectiveKind::MoeIwaeLoose, Estimator::Dreg, 10, Combination::MoE, Some(1)),
                "tight" => (ObjectiveKind::MoeIwaeTight, Estimator::Dreg, 10, Combination::MoE, None),
                "elbo" => (ObjectiveKind::Elbo, Estimator::Standard, 1, Combination::MoE, None),
                "iwae20" => (ObjectiveKind::MoeIwaeLoose, Estimator::Dreg, 20, Combination::MoE, None),
                _ => unreachable!(),
            };
            let train = match modality {
                Some(m) => single_modality(&data.splits.train, m),
                None => data.splits.train.clone(),
            };
            let likelihoods = data.likelihoods();
            let likelihoods = match modality {
                Some(m) => vec![likelihoods[m]],
                None => likelihoods,
            };
            let spec = ModelSpec {
                combination,
                ..Default::default()
            };
            let model_config = spec.model_config(&train.dims(), &likelihoods).expect("model config");
            let runs = SEEDS
                .iter()
                .map(|&seed| {
                    let config = TrainConfig {
                        objective,
                        estimator,
                        k,
                        epochs: EPOCHS,
                        seed,
                        ..Default::default()
                    };
                    let mut t = Trainer::new(model_config.clone(), config).expect("trainer");
                    t.train(&train, None, &mut |_| {}).expect("training stays finite");
                    assert!(t.model.params().all_finite());
                    let shares = t.history.last().map(|h| h.weight_shares.clone()).unwrap_or_default();
                    Run { model: t.model, shares }
                })
                .collect();
            (runs, start.elapsed().as_secs_f64())
        })
    }
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (var / n).sqrt())
}

fn fmt_all(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

fn checks(results: Vec<CheckResult>, secs: f64, budget: f64) -> Outcome {
    let failed: Vec<String> = results
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{} ({:.3e} vs {:.3e}: {})", c.name, c.measured, c.tolerance, c.detail))
        .collect();
    let ok = failed.is_empty() && secs < budget;
    let detail = if failed.is_empty() {
        format!("{} checks passed in {secs:.1}s (budget {budget:.0}s)", results.len())
    } else {
        format!("failed: {}; {secs:.1}s", failed.join("; "))
    };
    Ok((ok, detail))
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

fn gradients() -> Outcome {
    let (r, secs) = timed(|| -> Result<Vec<CheckResult>, Error> {
        let mut v = check_primitives(0)?;
        v.extend(check_objectives(0)?);
        Ok(v)
    });
    let r = r?;
    let worst = r.iter().map(|c| c.measured).fold(0.0, f64::max);
    let (ok, detail) = checks(r, secs, 60.0)?;
    Ok((ok, format!("{detail}; worst error-to-tolerance ratio {worst:.2e}")))
}

fn sandwich() -> Outcome {
    let (r, secs) = timed(|| check_sandwich(0, 500));
    let r = r?;
    let detail: Vec<String> = r.iter().map(|c| format!("{}: {}", c.name, c.detail)).collect();
    let (ok, summary) = checks(r, secs, 300.0)?;
    Ok((ok, format!("{summary}; {}", detail.join("; "))))
}

fn identities() -> Outcome {
    let (r, secs) = timed(|| check_identities(0));
    checks(r?, secs, 60.0)
}

fn dreg_variance() -> Outcome {
    let (r, secs) = timed(|| check_dreg_variance(0, 1000));
    let r = r?;
    let detail = r[0].detail.clone();
    let (ok, summary) = checks(r, secs, 60.0)?;
    Ok((ok, format!("{summary}; {detail}")))
}

/// Joint and both cross coherences of each run.
fn coherences(desk: &Desk, runs: &[Run]) -> Result<Vec<[(f64, usize); 3]>, Error> {
    let data = desk.data();
    let test = &data.splits.test;
    runs.iter()
        .enumerate()
        .map(|(i, r)| {
            let mut rng = substream(SEEDS[i], "acceptance.coherence");
            let j = coherence_joint(&r.model, &data.oracles, 1000, 9, &mut rng)?;
            let c01 = coherence_cross(&r.model, &data.oracles, 0, 1, &test.xs[0], &test.labels, &mut rng)?;
            let c10 = coherence_cross(&r.model, &data.oracles, 1, 0, &test.xs[1], &test.labels, &mut rng)?;
            Ok([(j.rate, j.count), (c01.rate, c01.count), (c10.rate, c10.count)])
        })
        .collect()
}

fn coherence_table(desk: &Desk) -> Outcome {
    let start = Instant::now();
    let (mmvae, t1) = desk.group("mmvae");
    let (poe, t2) = desk.group("poe");
    let (m, p) = (coherences(desk, mmvae)?, coherences(desk, poe)?);
    let chance = 1.0 / desk.data().config.n_classes as f64;
    let mut ok = true;
    let mut parts = Vec::new();
    for (c, label) in ["joint", "cross 0->1", "cross 1->0"].iter().enumerate() {
        let rates: Vec<f64> = m.iter().map(|r| r[c].0).collect();
        let count: usize = m.iter().map(|r| r[c].1).sum();
        let mean = rates.iter().sum::<f64>() / rates.len() as f64;
        let se = (chance * (1.0 - chance) / count as f64).sqrt();
        ok &= mean - chance >= 3.0 * se;
        parts.push(format!("mmvae {label} {mean:.3} (chance + {:.1} SE)", (mean - chance) / se));
    }
    let mj: Vec<f64> = m.iter().map(|r| r[0].0).collect();
    let pj: Vec<f64> = p.iter().map(|r| r[0].0).collect();
    let (mm, pm) = (mean_se(&mj).0, mean_se(&pj).0);
    ok &= mm > pm;
    parts.push(format!("joint mmvae [{}] mean {mm:.3} vs poe [{}] mean {pm:.3}", fmt_all(&mj), fmt_all(&pj)));
    // the budget covers the probe baselines too; see `latent_probes`
    parts.push(format!("training {:.0}s, total so far {:.0}s", t1 + t2, start.elapsed().as_secs_f64()));
    Ok((ok, parts.join("; ")))
}

fn latent_probes(desk: &Desk, c5_seconds: f64) -> Outcome {
    let start = Instant::now();
    let data = desk.data();
    let (train, test) = (strided(&data.splits.train, 2000), strided(&data.splits.test, 2000));
    let (mmvae, _) = desk.group("mmvae");
    let mut rows = Vec::new();
    for m in 0..2 {
        let (vaes, _) = desk.group(if m == 0 { "vae0" } else { "vae1" });
        let joint: Vec<f64> = mmvae
            .iter()
            .map(|r| latent_probe(&r.model, &train, &test, Some(m)))
            .collect::<Result<_, _>>()?;
        let (st, se) = (single_modality(&train, m), single_modality(&test, m));
        let single: Vec<f64> = vaes
            .iter()
            .map(|r| latent_probe(&r.model, &st, &se, Some(0)))
            .collect::<Result<_, _>>()?;
        rows.push((m, mean_se(&joint).0, mean_se(&single).0, joint, single));
    }
    // the weaker modality is the one a single-modality model represents worse
    let weak = if rows[0].2 <= rows[1].2 { 0 } else { 1 };
    let (_, mm, vm, ref j, ref s) = rows[weak];
    let gap = 100.0 * (mm - vm);
    let total = c5_seconds + start.elapsed().as_secs_f64();
    let ok = gap >= 5.0 && total < 1800.0;
    let others: Vec<String> = rows
        .iter()
        .map(|(m, a, b, _, _)| format!("x{m}: mmvae {:.1}% vs vae {:.1}%", 100.0 * a, 100.0 * b))
        .collect();
    Ok((
        ok,
        format!(
            "weaker modality x{weak}: gap {gap:.1} points (mmvae [{}], vae [{}]); {}; criteria 5+6 took {total:.0}s of 1800s",
            fmt_all(j),
            fmt_all(s),
            others.join(", ")
        ),
    ))
}

fn synergy(desk: &Desk) -> Outcome {
    let start = Instant::now();
    let (mmvae, _) = desk.group("mmvae");
    let rows = strided(&desk.data().splits.test, 64);
    let table = likelihood_table(&mmvae[0].model, &rows, 1000, 8, 0)?;
    let mut ok = true;
    let mut parts = Vec::new();
    for r in &table {
        ok &= r.given_both >= r.given_other;
        parts.push(format!("m={}: given both {:.2} vs given other {:.2}", r.m, r.given_both, r.given_other));
    }

    let lg = LinearGaussian::reference();
    let model = lg.model()?;
    let xs = lg.sample(64, &mut substream(0, "acceptance.analytic"));
    let rows = PairedDataset::new(1, xs.clone(), vec![0; 64])?;
    let table = likelihood_table(&model, &rows, 1000, 8, 0)?;
    let mut worst: f64 = 0.0;
    let mut entries = Vec::new();
    for r in &table {
        let pair = lg.mean_log_marginal(&[r.m, r.n], &xs);
        let single = lg.mean_log_marginal(&[r.m], &xs);
        let devs = [r.joint - pair, r.given_both - single, r.given_self - single, r.given_other - single];
        worst = devs.iter().fold(worst, |w, d| w.max(d.abs()));
        entries.push(format!("m={} [{}]", r.m, devs.iter().map(|d| format!("{d:+.3}")).collect::<Vec<_>>().join(" ")));
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= worst <= 0.05 && secs < 300.0;
    parts.push(format!(
        "analytic deviations joint/both/self/other {}; worst {worst:.4} nats (tol 0.05); {secs:.0}s",
        entries.join(" ")
    ));
    Ok((ok, parts.join("; ")))
}

fn max_shares(runs: &[Run]) -> Vec<f64> {
    runs.iter().map(|r| r.shares.iter().copied().fold(0.0, f64::max)).collect()
}

fn collapse(desk: &Desk) -> Outcome {
    let tight = max_shares(&desk.group("tight").0);
    let loose = max_shares(&desk.group("mmvae").0);
    let ((mt, st), (ml, sl)) = (mean_se(&tight), mean_se(&loose));
    let se = (st * st + sl * sl).sqrt();
    let ok = ml - mt <= 3.0 * se;
    Ok((
        ok,
        format!(
            "max weight-share tight [{}] mean {mt:.3} vs loose [{}] mean {ml:.3}; difference {:.3}, 3·SE {:.3}",
            fmt_all(&tight),
            fmt_all(&loose),
            mt - ml,
            3.0 * se
        ),
    ))
}

fn entropies(desk: &Desk, group: &'static str) -> Result<Vec<f64>, Error> {
    let rows = strided(&desk.data().splits.test, 64);
    desk.group(group)
        .0
        .iter()
        .enumerate()
        .map(|(i, r)| Ok(posterior_entropy(&r.model, &rows.xs, 100, &mut substream(SEEDS[i], "acceptance.entropy"))?.mean))
        .collect()
}

fn entropy(desk: &Desk) -> Outcome {
    let (iw, el) = (entropies(desk, "iwae20")?, entropies(desk, "elbo")?);
    let ((mi, si), (me, se)) = (mean_se(&iw), mean_se(&el));
    let se = (si * si + se * se).sqrt();
    let ok = me - mi <= 3.0 * se;
    Ok((
        ok,
        format!(
            "posterior entropy IWAE K=20 [{}] mean {mi:.3} vs ELBO [{}] mean {me:.3}; difference {:.3}, 3·SE {:.3}",
            fmt_all(&iw),
            fmt_all(&el),
            mi - me,
            3.0 * se
        ),
    ))
}

fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn cca() -> Outcome {
    let start = Instant::now();
    let mut rng = substream(0, "acceptance.cca");
    let x1 = random(500, 4, &mut rng);
    let x2 = x1.matmul(&random(4, 3, &mut rng))?.map(|v| v + 0.25);
    let linear = fit_cca(&x1, &x2, 3)?.correlations[0];
    let independent = fit_cca(&random(5000, 4, &mut rng), &random(5000, 3, &mut rng), 3)?.correlations[0];

    let fixture = |w1: Vec<Vec<f64>>, w2: Vec<Vec<f64>>, m1: Vec<f64>, m2: Vec<f64>| CcaProjection {
        correlations: vec![0.5; m1.len()],
        w1: Tensor::from_rows(&w1),
        w2: Tensor::from_rows(&w2),
        proj_mean1: m1,
        proj_mean2: m2,
    };
    let eye2 = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let eye3 = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
    let cases = [
        // (1, 0) against (1, 1)
        (fixture(eye2.clone(), eye2, vec![0.0; 2], vec![0.0; 2]), vec![1.0, 0.0], vec![1.0, 1.0], 0.7071067811865476),
        // φ1 = (2, 1) − (1, 1) = (1, 0), φ2 = (−1, 3)
        (
            fixture(
                vec![vec![1.0, 0.0], vec![0.0, 2.0]],
                vec![vec![0.5, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]],
                vec![1.0, 1.0],
                vec![0.0, 0.0],
            ),
            vec![2.0, 0.5],
            vec![-2.0, 3.0, 5.0],
            -0.31622776601683794,
        ),
        // (1, 2, 3) against (4, 5, 6): 32 / √(14·77)
        (fixture(eye3.clone(), eye3, vec![0.0; 3], vec![0.0; 3]), vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], 0.9746318461970762),
    ];
    let mut worst: f64 = 0.0;
    for (p, a, b, want) in &cases {
        worst = worst.max((p.score(a, b)?.value - want).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = (linear - 1.0).abs() <= 1e-6 && independent < 0.1 && worst <= 1e-9 && secs < 60.0;
    Ok((
        ok,
        format!(
            "linear top correlation 1 - {:.2e}; independent {independent:.4}; scorer worst error {worst:.1e}; {secs:.1}s",
            1.0 - linear
        ),
    ))
}

fn mmvl(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mmvl"))
        .args(args)
        .env_remove("MMVL_THREADS")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("mmvl {args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in fs::read_dir(dir).unwrap() {
        let sub = sub.unwrap().path();
        for f in fs::read_dir(&sub).unwrap() {
            let f = f.unwrap().path();
            let name = f.strip_prefix(dir).unwrap().display().to_string();
            out.insert(name, fs::read(&f).unwrap());
        }
    }
    out
}

fn pipeline_once(root: &Path) -> Result<(), String> {
    let p = |s: &str| root.join(s).display().to_string();
    let (data, run, eval, verify) = (p("data"), p("run"), p("eval"), p("verify"));
    mmvl(&["verify", "--out", &verify])?;
    mmvl(&["gen-data", "--out", &data, "--seed", "7", "--set", "per_class=40", "--set", "pairs_per_instance=3"])?;
    mmvl(&["train", "--data", &data, "--out", &run, "--seed", "7", "--epochs", "2", "--set", "validation_rows=128"])?;
    let ck = root.join("run/checkpoint.mmvl").display().to_string();
    mmvl(&[
        "eval", "--checkpoint", &ck, "--data", &data, "--out", &eval,
        "--set", "likelihood_k=100", "--set", "likelihood_rows=16", "--set", "coherence_r=200",
    ])
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::TempDir::new().map_err(Error::from)?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for root in [&a, &b] {
        if let Err(e) = pipeline_once(root) {
            return Ok((false, e));
        }
    }
    let (fa, fb) = (files(&a), files(&b));
    let differing: Vec<&String> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
    let mut ok = differing.is_empty() && fa.keys().eq(fb.keys());

    // bit-exact round trips and checksum validation
    let ck_path = a.join("run/checkpoint.mmvl");
    let ck_bytes = &fa["run/checkpoint.mmvl"];
    ok &= load_checkpoint(&ck_path)?.to_bytes()? == *ck_bytes;
    let ds_bytes = &fa["data/train.mmds"];
    ok &= dataset_to_bytes(&load_dataset(&a.join("data/train.mmds"))?)? == *ds_bytes;
    let mut flips = 0;
    for (bytes, is_ck) in [(ck_bytes, true), (ds_bytes, false)] {
        for at in [bytes.len() / 3, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[at] ^= 0x10;
            let rejected = if is_ck {
                Checkpoint::from_bytes(&bad).is_err()
            } else {
                mmvl_core::dataset_io::dataset_from_bytes(&bad).is_err()
            };
            flips += rejected as usize;
        }
    }
    ok &= flips == 6;
    Ok((
        ok,
        format!(
            "{} artifacts compared, {} differ{}; round trips exact; {flips}/6 corrupted files rejected",
            fa.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(" ({differing:?})") }
        ),
    ))
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let desk = Desk::new();
    let names = [
        "gradient correctness",
        "bound sandwich",
        "estimator identities",
        "DReG variance reduction",
        "coherence vs chance and PoE",
        "latent probe vs single-modality VAE",
        "likelihood synergy",
        "tight-bound expert dominance",
        "posterior entropy IWAE vs ELBO",
        "CCA machinery",
        "reproducibility",
    ];
    let mut c5_seconds = 0.0;
    let mut failures = 0;
    for (i, name) in names.iter().enumerate() {
        let n = i + 1;
        if !run(n) {
            continue;
        }
        let start = Instant::now();
        let outcome = match n {
            1 => gradients(),
            2 => sandwich(),
            3 => identities(),
            4 => dreg_variance(),
            5 => coherence_table(&desk),
            6 => latent_probes(&desk, c5_seconds),
            7 => synergy(&desk),
            8 => collapse(&desk),
            9 => entropy(&desk),
            10 => cca(),
            _ => reproducibility(),
        };
        let secs = start.elapsed().as_secs_f64();
        if n == 5 {
            c5_seconds = secs;
        }
        let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        failures += !passed as usize;
        println!("criterion {n:>2} {} {name} [{secs:.0}s]: {detail}", if passed { "PASS" } else { "FAIL" });
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
