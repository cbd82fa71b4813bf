//! Self-check suite: finite-difference gradients, bound orderings on the
//! analytic model and estimator identities. Each check reports a measured
//! value against a tolerance.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytic::LinearGaussian;
use crate::distributions::LikelihoodFamily;
use crate::error::Result;
use crate::fixtures::gaussian_toy_1d;
use crate::models::{ModalityConfig, ModelConfig, MultimodalModel};
use crate::objectives::{
    bound_on_tape, dreg_surrogate, evaluate, mmis_anchored, objective_gradients, DregAnchor, Estimator, MmisAnchor,
    ObjectiveKind, SamplingPlan,
};
use crate::rng::substream;
use crate::tensor::{fault, finite_diff_check, BoundParams, OpKind, ParamStore, Tape, Tensor, Var, KINK_TOLERANCE, SMOOTH_TOLERANCE};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    /// How `measured` is compared with `tolerance`.
    pub comparison: Comparison,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Comparison {
    LessThan,
    AtMost,
}

impl Comparison {
    pub fn symbol(self) -> &'static str {
        match self {
            Comparison::LessThan => "<",
            Comparison::AtMost => "<=",
        }
    }
}

impl CheckResult {
    fn new(name: impl Into<String>, measured: f64, tolerance: f64, comparison: Comparison, detail: String) -> Self {
        let passed = match comparison {
            Comparison::LessThan => measured < tolerance,
            Comparison::AtMost => measured <= tolerance,
        };
        CheckResult {
            name: name.into(),
            measured,
            tolerance,
            comparison,
            passed,
            detail,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Replicates for the bound-ordering checks.
    pub sandwich_replicates: usize,
    /// Replicates for the gradient-variance comparison.
    pub variance_replicates: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 0,
            sandwich_replicates: 500,
            variance_replicates: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
    pub passed: bool,
    /// Wall time; left out of the JSON so that reports compare bit-exactly.
    #[serde(skip)]
    pub seconds: f64,
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values in `±[lo, hi]` with random signs, away from zero.
fn signed_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = random_tensor(shape, lo, hi, rng);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

type Primitive = for<'t> fn(&'t Tape, &BoundParams<'t>) -> Result<Var<'t>>;

fn weighted<'t>(tape: &'t Tape, v: Var<'t>) -> Result<Var<'t>> {
    // fixed, non-uniform weights so that every output coordinate matters
    let n: usize = v.shape().iter().product();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.17 * i as f64).collect();
    Ok(v.mul(tape.constant(Tensor::new(v.shape(), w)?))?.sum_all())
}

fn primitives() -> Vec<(OpKind, Primitive)> {
    fn p<'t>(b: &BoundParams<'t>, n: &str) -> Var<'t> {
        b.get(n).expect("primitive parameter")
    }
    vec![
        (OpKind::Add, |t, b| weighted(t, p(b, "a").add(p(b, "bias"))?)),
        (OpKind::Sub, |t, b| weighted(t, p(b, "a").sub(p(b, "pos"))?)),
        (OpKind::Mul, |t, b| weighted(t, p(b, "a").mul(p(b, "pos"))?)),
        (OpKind::Div, |t, b| weighted(t, p(b, "a").div(p(b, "pos"))?)),
        (OpKind::Neg, |t, b| weighted(t, p(b, "a").neg())),
        (OpKind::Exp, |t, b| weighted(t, p(b, "a").exp())),
        (OpKind::Log, |t, b| weighted(t, p(b, "pos").log()?)),
        (OpKind::Abs, |t, b| weighted(t, p(b, "a").abs())),
        (OpKind::Relu, |t, b| weighted(t, p(b, "a").relu())),
        (OpKind::Sigmoid, |t, b| weighted(t, p(b, "a").sigmoid())),
        (OpKind::Tanh, |t, b| weighted(t, p(b, "a").tanh())),
        (OpKind::Softplus, |t, b| weighted(t, p(b, "a").softplus())),
        (OpKind::Scale, |t, b| weighted(t, p(b, "a").scale(-2.5))),
        (OpKind::Shift, |t, b| weighted(t, p(b, "a").add_scalar(0.7).mul(p(b, "a"))?)),
        (OpKind::Clamp, |t, b| weighted(t, p(b, "a").clamp(-0.9, 0.85))),
        (OpKind::MatMul, |t, b| weighted(t, p(b, "a").matmul(p(b, "m"))?)),
        (OpKind::Sum, |t, b| weighted(t, p(b, "a").sum(1)?.exp())),
        (OpKind::LogSumExp, |t, b| weighted(t, p(b, "a").logsumexp(0)?)),
        (OpKind::LogSoftmax, |t, b| weighted(t, p(b, "a").log_softmax()?)),
        (OpKind::Reshape, |t, b| weighted(t, p(b, "a").reshape(&[3, 2])?.exp())),
        (OpKind::Stack, |t, b| weighted(t, t.stack(&[p(b, "a"), p(b, "pos")])?.exp())),
        (OpKind::Select, |t, b| weighted(t, t.stack(&[p(b, "a"), p(b, "pos")])?.select(1)?.exp())),
    ]
}

fn primitive_params(seed: u64) -> ParamStore {
    let mut rng = substream(seed, "verify.primitives");
    let mut p = ParamStore::new();
    // clamp bounds are ±0.9/0.85 and kinks sit at 0; keep values clear of both
    let a = signed_tensor(&[2, 3], 0.2, 1.5, &mut rng).map(|v| if (v.abs() - 0.87).abs() < 0.05 { v * 1.2 } else { v });
    p.insert("a", a).unwrap();
    p.insert("bias", random_tensor(&[3], -1.0, 1.0, &mut rng)).unwrap();
    p.insert("pos", random_tensor(&[2, 3], 0.5, 2.0, &mut rng)).unwrap();
    p.insert("m", random_tensor(&[3, 2], -1.0, 1.0, &mut rng)).unwrap();
    p
}

fn fd_check(name: String, report: crate::tensor::GradCheckReport) -> CheckResult {
    let measured = (report.max_smooth_error / SMOOTH_TOLERANCE).max(report.max_kink_error / KINK_TOLERANCE);
    let worst = report
        .worst
        .as_ref()
        .map(|(n, i)| format!("{n}[{i}] (ad {:.6e}, fd {:.6e})", report.worst_values.0, report.worst_values.1))
        .unwrap_or_default();
    CheckResult::new(
        name,
        measured,
        1.0,
        Comparison::LessThan,
        format!(
            "max rel error {:.2e} on smooth coordinates (tol {SMOOTH_TOLERANCE:.0e}), {:.2e} on {} kink-adjacent (tol {KINK_TOLERANCE:.0e}); worst {worst}; measured is the larger error/tolerance ratio",
            report.max_smooth_error, report.max_kink_error, report.kink_coordinates
        ),
    )
}

/// Reverse-mode against central differences for every primitive.
pub fn check_primitives(seed: u64) -> Result<Vec<CheckResult>> {
    let params = primitive_params(seed);
    primitives()
        .into_iter()
        .map(|(kind, f)| Ok(fd_check(format!("fd.primitive.{kind}"), finite_diff_check(f, &params, FD_STEP)?)))
        .collect()
}

/// The two-modality model used by the composite gradient checks.
pub fn composite_model(seed: u64, combination_poe: bool) -> Result<(MultimodalModel, Vec<Tensor>)> {
    let mods = vec![
        ModalityConfig::new("a", 3, vec![5], LikelihoodFamily::Laplace),
        ModalityConfig::new("b", 2, vec![5], LikelihoodFamily::Laplace),
    ];
    let config = if combination_poe {
        ModelConfig::poe(mods, 4)
    } else {
        ModelConfig::mmvae(mods, 4)
    };
    let model = MultimodalModel::new(config, &mut substream(seed, "verify.model"))?;
    let mut rng = substream(seed, "verify.data");
    let xs = vec![
        random_tensor(&[3, 3], -1.5, 1.5, &mut rng),
        random_tensor(&[3, 2], -1.5, 1.5, &mut rng),
    ];
    Ok((model, xs))
}

/// Gradient of each bound, and of the DReG surrogate, under frozen noise.
pub fn check_objectives(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let cases = [
        ("elbo", ObjectiveKind::Elbo, 1, false),
        ("moe-iwae-loose", ObjectiveKind::MoeIwaeLoose, 3, false),
        ("moe-iwae-tight", ObjectiveKind::MoeIwaeTight, 4, false),
        ("elbo-poe", ObjectiveKind::Elbo, 2, true),
        ("moe-iwae-loose-poe", ObjectiveKind::MoeIwaeLoose, 3, true),
    ];
    for (name, kind, k, poe) in cases {
        let (model, xs) = composite_model(seed, poe)?;
        let plan = SamplingPlan::draw(model.config(), kind, k, 3, &mut substream(seed, &format!("verify.noise.{name}")))?;
        let report = finite_diff_check(
            |tape, params| {
                let bound = model.bind_with(tape, params.clone());
                let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
                Ok(bound_on_tape(&bound, &vars, &plan, kind)?.value)
            },
            model.params(),
            FD_STEP,
        )?;
        out.push(fd_check(format!("fd.objective.{name}"), report));
    }
    // mmis-ELBO stops gradients through its detached particles, so its value
    // is differentiated with those quantities held at the anchor
    {
        let (model, xs) = composite_model(seed, false)?;
        let plan = SamplingPlan::draw(model.config(), ObjectiveKind::MmisElbo, 2, 3, &mut substream(seed, "verify.noise.mmis-elbo"))?;
        let anchor = MmisAnchor::at(&model, &xs, &plan)?;
        let report = finite_diff_check(
            |tape, params| {
                let bound = model.bind_with(tape, params.clone());
                let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
                Ok(mmis_anchored(&bound, &vars, &plan, &anchor)?.value)
            },
            model.params(),
            FD_STEP,
        )?;
        out.push(fd_check("fd.objective.mmis-elbo".into(), report));
    }
    for (name, kind, k) in [("dreg-loose", ObjectiveKind::MoeIwaeLoose, 3), ("dreg-tight", ObjectiveKind::MoeIwaeTight, 4)] {
        let (model, xs) = composite_model(seed, false)?;
        let plan = SamplingPlan::draw(model.config(), kind, k, 3, &mut substream(seed, &format!("verify.noise.{name}")))?;
        let anchor = DregAnchor::at(&model, &xs, &plan, kind)?;
        let report = finite_diff_check(
            |tape, params| {
                let bound = model.bind_with(tape, params.clone());
                let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
                dreg_surrogate(&bound, &vars, &plan, kind, &anchor)
            },
            model.params(),
            FD_STEP,
        )?;
        out.push(fd_check(format!("fd.objective.{name}"), report));
    }
    Ok(out)
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

/// Bound ordering and tightness on the analytic linear-Gaussian model.
pub fn check_sandwich(seed: u64, replicates: usize) -> Result<Vec<CheckResult>> {
    let lg = LinearGaussian::reference();
    let model = lg.model()?;
    let xs = lg.sample(8, &mut substream(seed, "verify.sandwich.data"));
    let logp = lg.mean_log_marginal(&[0, 1], &xs);
    let mut rng = substream(seed, "verify.sandwich");
    let (mut e, mut lo, mut ti) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..replicates {
        let mut run = |kind, k| -> Result<f64> {
            let plan = SamplingPlan::draw(model.config(), kind, k, 8, &mut rng)?;
            Ok(evaluate(&model, &xs, &plan, kind)?.value)
        };
        e.push(run(ObjectiveKind::Elbo, 1)?);
        lo.push(run(ObjectiveKind::MoeIwaeLoose, 10)?);
        ti.push(run(ObjectiveKind::MoeIwaeTight, 10)?);
    }
    let diff = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x - y).collect() };
    let mut out = Vec::new();
    let logp_vec = vec![logp; replicates];
    for (name, a, b) in [
        ("order.elbo-le-loose", &e, &lo),
        ("order.loose-le-tight", &lo, &ti),
        ("order.tight-le-logp", &ti, &logp_vec),
    ] {
        let (m, se) = mean_se(&diff(a, b));
        out.push(CheckResult::new(
            name,
            m,
            3.0 * se,
            Comparison::AtMost,
            format!("mean difference {m:.5} vs 3·SE {:.5}; strictly resolved: {}", 3.0 * se, m + 3.0 * se < 0.0),
        ));
    }
    let plan = SamplingPlan::draw(model.config(), ObjectiveKind::MoeIwaeTight, 10_000, 8, &mut rng)?;
    let big = evaluate(&model, &xs, &plan, ObjectiveKind::MoeIwaeTight)?.value;
    out.push(CheckResult::new(
        "order.tight-k10000-vs-closed-form",
        (big - logp).abs(),
        0.01,
        Comparison::LessThan,
        format!("tight {big:.5}, closed form {logp:.5}"),
    ));
    Ok(out)
}

fn max_abs_diff(a: &std::collections::BTreeMap<String, Tensor>, b: &std::collections::BTreeMap<String, Tensor>, filter: impl Fn(&str) -> bool) -> f64 {
    a.iter()
        .filter(|(n, _)| filter(n))
        .map(|(n, t)| {
            let u = &b[n];
            t.data().iter().zip(u.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

/// Exact identities between estimators on shared noise.
pub fn check_identities(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let (model, xs) = composite_model(seed, false)?;
    let plan = SamplingPlan::draw(model.config(), ObjectiveKind::Elbo, 1, 3, &mut substream(seed, "verify.identity"))?;
    let e = evaluate(&model, &xs, &plan, ObjectiveKind::Elbo)?.value;
    let l = evaluate(&model, &xs, &plan, ObjectiveKind::MoeIwaeLoose)?.value;
    out.push(CheckResult::new(
        "identity.loose-k1-equals-elbo",
        (e - l).abs(),
        0.0,
        Comparison::AtMost,
        format!("elbo {e:?}, loose {l:?}"),
    ));

    let plan = SamplingPlan::draw(model.config(), ObjectiveKind::MoeIwaeLoose, 4, 3, &mut substream(seed, "verify.identity.dreg"))?;
    let std = objective_gradients(&model, &xs, &plan, ObjectiveKind::MoeIwaeLoose, Estimator::Standard)?;
    let dreg = objective_gradients(&model, &xs, &plan, ObjectiveKind::MoeIwaeLoose, Estimator::Dreg)?;
    let theta = |n: &str| !crate::models::is_encoder_param(n);
    out.push(CheckResult::new(
        "identity.dreg-theta-gradients",
        max_abs_diff(&std.grads, &dreg.grads, theta),
        0.0,
        Comparison::AtMost,
        "max |Δ| over decoder and prior gradients".into(),
    ));

    // the anchored mmis-ELBO is what the finite-difference check sees; at the
    // anchor its gradient must be the live objective's
    let plan = SamplingPlan::draw(model.config(), ObjectiveKind::MmisElbo, 2, 3, &mut substream(seed, "verify.identity.mmis"))?;
    let live = objective_gradients(&model, &xs, &plan, ObjectiveKind::MmisElbo, Estimator::Standard)?;
    let anchor = MmisAnchor::at(&model, &xs, &plan)?;
    let tape = Tape::new();
    let bound = model.bind(&tape)?;
    let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let anchored = mmis_anchored(&bound, &vars, &plan, &anchor)?;
    let value_gap = (anchored.value.item() - live.bound.value).abs();
    let anchored = tape.backward(anchored.value)?.into_params();
    out.push(CheckResult::new(
        "identity.mmis-anchored-gradients",
        max_abs_diff(&live.grads, &anchored, |_| true).max(value_gap),
        1e-12,
        Comparison::AtMost,
        format!("value gap {value_gap:.2e}; max |Δ| over all gradients"),
    ));

    // identical encoders: copy encoder 0 into encoder 1 on equal-width inputs
    let mods = vec![
        ModalityConfig::new("a", 3, vec![5], LikelihoodFamily::Laplace),
        ModalityConfig::new("b", 3, vec![5], LikelihoodFamily::Laplace),
    ];
    let mut twin = MultimodalModel::new(ModelConfig::mmvae(mods, 4), &mut substream(seed, "verify.twin"))?;
    let names: Vec<String> = twin.params().names().filter(|n| n.starts_with("enc0.")).cloned().collect();
    for n in names {
        let v = twin.params().get(&n).unwrap().clone();
        twin.params_mut().set(&n.replacen("enc0.", "enc1.", 1), v)?;
    }
    let x = random_tensor(&[3, 3], -1.0, 1.0, &mut substream(seed, "verify.twin.data"));
    let twin_xs = vec![x.clone(), x];
    // both strata reuse one noise draw, so every stratum proposes the same particles
    let drawn = SamplingPlan::draw(twin.config(), ObjectiveKind::Elbo, 2, 3, &mut substream(seed, "verify.twin.noise"))?;
    let plan = SamplingPlan::from_noise(2, vec![drawn.noise[0].clone(), drawn.noise[0].clone()])?;
    let e = evaluate(&twin, &twin_xs, &plan, ObjectiveKind::Elbo)?.value;
    let m = evaluate(&twin, &twin_xs, &plan, ObjectiveKind::MmisElbo)?.value;
    out.push(CheckResult::new(
        "identity.mmis-equals-elbo-identical-encoders",
        (e - m).abs(),
        1e-10,
        Comparison::AtMost,
        format!("elbo {e:.12}, mmis {m:.12}"),
    ));

    let mcount = model.num_modalities();
    for (kind, expected, name) in [
        (ObjectiveKind::MmisElbo, mcount, "identity.mmis-decoder-passes"),
        (ObjectiveKind::MoeIwaeLoose, mcount * mcount, "identity.loose-decoder-passes"),
    ] {
        let plan = SamplingPlan::draw(model.config(), kind, 2, 3, &mut substream(seed, name))?;
        model.counters().reset();
        evaluate(&model, &xs, &plan, kind)?;
        let passes = model.counters().decoder();
        out.push(CheckResult::new(
            name,
            (passes as f64 - expected as f64).abs(),
            0.0,
            Comparison::AtMost,
            format!("{passes} decoder passes, expected {expected}"),
        ));
    }
    Ok(out)
}

/// Variance of the encoder gradient under DReG and the standard
/// estimator on the one-dimensional Gaussian toy near its posterior.
pub fn check_dreg_variance(seed: u64, replicates: usize) -> Result<Vec<CheckResult>> {
    let x = 1.0;
    // exact posterior N(x/2, 1/2)
    let model = gaussian_toy_1d(0.5 * x + 0.05, 0.5f64.sqrt() * 1.05)?;
    let xs = vec![Tensor::from_rows(&[vec![x]])];
    let mut rng = substream(seed, "verify.dreg.variance");
    let mut var = |est: Estimator| -> Result<Vec<f64>> {
        let mut gs = Vec::with_capacity(replicates);
        for _ in 0..replicates {
            let plan = SamplingPlan::draw(model.config(), ObjectiveKind::MoeIwaeLoose, 10, 1, &mut rng)?;
            let g = objective_gradients(&model, &xs, &plan, ObjectiveKind::MoeIwaeLoose, est)?;
            gs.push(g.grads["enc0.loc.b"].item());
        }
        Ok(gs)
    };
    let variance = |g: &[f64]| {
        let (m, _) = mean_se(g);
        g.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (g.len() - 1) as f64
    };
    let vs = variance(&var(Estimator::Standard)?);
    let vd = variance(&var(Estimator::Dreg)?);
    Ok(vec![CheckResult::new(
        "variance.dreg-below-standard",
        vd / vs,
        1.0,
        Comparison::LessThan,
        format!("location-gradient variance: DReG {vd:.3e}, standard {vs:.3e}"),
    )])
}

/// Runs every check. With `fault` set, that op's backward rule is
/// corrupted for the gradient checks.
pub fn run_verify(config: &VerifyConfig, fault_op: Option<OpKind>) -> Result<VerifyReport> {
    let start = Instant::now();
    let mut checks = Vec::new();
    {
        let _guard = fault_op.map(fault::inject);
        checks.extend(check_primitives(config.seed)?);
        checks.extend(check_objectives(config.seed)?);
    }
    checks.extend(check_sandwich(config.seed, config.sandwich_replicates)?);
    checks.extend(check_identities(config.seed)?);
    checks.extend(check_dreg_variance(config.seed, config.variance_replicates)?);
    Ok(VerifyReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}
