use std::fmt::Write as _;
use std::path::Path;

use mmvl_core::checkpoint::{load_checkpoint, Checkpoint};
use mmvl_core::data::ToyDatasetConfig;
use mmvl_core::dataset_io::dataset_to_bytes;
use mmvl_core::eval::{evaluate_model, kl_csv, EvalConfig, OracleConfig};
use mmvl_core::models::{cross_generate, generate_joint, traverse, Activation, Combination, MultimodalModel};
use mmvl_core::objectives::{Estimator, ObjectiveKind};
use mmvl_core::optim::AdamConfig;
use mmvl_core::pipeline::{prepare_toy, ModelSpec};
use mmvl_core::rng::substream;
use mmvl_core::tensor::OpKind;
use mmvl_core::train::{StepRecord, TrainConfig, Trainer};
use mmvl_core::verify::{run_verify, VerifyConfig};
use mmvl_core::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::artifacts::{oracle_file, DataBundle, OutDir, SPLITS};
use crate::config;
use crate::error::CliError;
use crate::{Common, GenerateArgs};

fn out_dir(common: &Common) -> Result<&Path, CliError> {
    common
        .out
        .as_deref()
        .ok_or_else(|| CliError::usage("--out is required for this command"))
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| CliError::new(1, format!("thread pool: {e}")))
}

pub fn gen_data(common: &Common) -> Result<u8, CliError> {
    let cfg: ToyDatasetConfig = config::load(common.config.as_deref(), &common.overrides(vec![]))?;
    cfg.validate()?;
    let planned: Vec<String> = SPLITS.iter().map(|s| s.to_string()).chain((0..2).map(oracle_file)).collect();
    let mut out = OutDir::create(out_dir(common)?, common.force, &planned)?;
    let art = prepare_toy(&cfg, &OracleConfig::default())?;
    for (name, ds) in SPLITS.iter().zip([&art.splits.train, &art.splits.val, &art.splits.test]) {
        out.write(name, &dataset_to_bytes(ds)?)?;
    }
    for (m, o) in art.oracles.iter().enumerate() {
        out.write(&oracle_file(m), &serde_json::to_vec_pretty(o).expect("oracle serializes"))?;
    }
    let summary = json!({
        "rows": {
            "train": art.splits.train.len(),
            "val": art.splits.val.len(),
            "test": art.splits.test.len(),
        },
        "separability": art.separability,
        "oracle_accuracy": art.oracles.iter().map(|o| o.test_accuracy).collect::<Vec<_>>(),
    });
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    let hash = art.data_hash();
    out.finish("dataset", &cfg, Some(hash), common.threads, summary)?;
    Ok(0)
}

/// Flat configuration of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub combination: Combination,
    pub objective: ObjectiveKind,
    pub estimator: Estimator,
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_batches_per_epoch: Option<usize>,
    pub lr: f64,
    pub seed: u64,
    pub validation_k: usize,
    pub validation_rows: usize,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        let (m, t) = (ModelSpec::default(), TrainConfig::default());
        TrainRunConfig {
            latent_dim: m.latent_dim,
            hidden: m.hidden,
            activation: m.activation,
            combination: m.combination,
            objective: t.objective,
            estimator: t.estimator,
            k: t.k,
            epochs: t.epochs,
            batch_size: t.batch_size,
            max_batches_per_epoch: t.max_batches_per_epoch,
            lr: t.adam.lr,
            seed: t.seed,
            validation_k: t.validation_k,
            validation_rows: t.validation_rows,
        }
    }
}

impl TrainRunConfig {
    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            latent_dim: self.latent_dim,
            hidden: self.hidden.clone(),
            activation: self.activation,
            combination: self.combination,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            objective: self.objective,
            estimator: self.estimator,
            k: self.k,
            epochs: self.epochs,
            batch_size: self.batch_size,
            max_batches_per_epoch: self.max_batches_per_epoch,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            seed: self.seed,
            validation_k: self.validation_k,
            validation_rows: self.validation_rows,
        }
    }
}

fn step_line(r: &StepRecord) -> String {
    serde_json::to_string(&json!({
        "kind": "step",
        "step": r.step,
        "epoch": r.epoch,
        "batch": r.batch,
        "objective": r.objective,
        "weight_shares": r.weight_shares,
    }))
    .expect("record serializes")
}

pub const CHECKPOINT: &str = "checkpoint.mmvl";
pub const TRAIN_LOG: &str = "train_log.jsonl";

pub fn train(
    common: &Common,
    data: &Path,
    resume: Option<&Path>,
    objective: Option<String>,
    estimator: Option<String>,
    k: Option<usize>,
    epochs: Option<usize>,
) -> Result<u8, CliError> {
    let overrides = common.overrides(vec![
        ("objective", objective),
        ("estimator", estimator),
        ("k", k.map(|v| v.to_string())),
        ("epochs", epochs.map(|v| v.to_string())),
    ]);
    let cfg: TrainRunConfig = config::load(common.config.as_deref(), &overrides)?;
    let bundle = DataBundle::open(data)?;
    let train_set = bundle.split("train")?;
    let val_set = bundle.split("val")?;
    let model_config = cfg.spec().model_config(&train_set.dims(), &bundle.config.likelihoods())?;
    let train_cfg = cfg.train_config();
    train_cfg.validate(&model_config)?;

    let mut trainer = match resume {
        Some(path) => {
            let c = load_checkpoint(path)?;
            if c.model_config != model_config {
                return Err(CliError::mismatch("checkpoint model configuration differs from the run configuration"));
            }
            if c.data_hash.as_deref() != Some(bundle.data_hash.as_str()) {
                return Err(CliError::mismatch("checkpoint was trained on a different dataset"));
            }
            c.into_trainer(Some(train_cfg))?
        }
        None => Trainer::new(model_config, train_cfg)?,
    };
    trainer.set_threads(common.threads)?;

    let mut out = OutDir::create(out_dir(common)?, common.force, &[CHECKPOINT.into(), TRAIN_LOG.into()])?;
    let mut log = String::new();
    let result = trainer.train(&train_set, Some(&val_set), &mut |r| {
        log.push_str(&step_line(r));
        log.push('\n');
    });
    for e in &trainer.history {
        let line = json!({
            "kind": "epoch",
            "epoch": e.epoch,
            "steps": e.steps,
            "train_bound": e.train_bound,
            "validation": e.validation,
            "weight_shares": e.weight_shares,
        });
        writeln!(log, "{line}").expect("string write");
    }
    out.write(TRAIN_LOG, log.as_bytes())?;
    result?;

    let ckpt = Checkpoint::from_trainer(&trainer, Some(bundle.data_hash.clone()));
    out.write(CHECKPOINT, &ckpt.to_bytes()?)?;
    let last = trainer.history.last();
    let summary = json!({
        "step": trainer.step,
        "epoch": trainer.epoch,
        "initial_validation": trainer.history.first().and_then(|e| e.validation),
        "final_validation": last.and_then(|e| e.validation),
        "model_config_hash": trainer.model.config().hash(),
    });
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    out.finish("run", &cfg, Some(bundle.data_hash), common.threads, summary)?;
    Ok(0)
}

fn checkpoint_for(path: &Path, bundle: &DataBundle) -> Result<MultimodalModel, CliError> {
    let c = load_checkpoint(path)?;
    if c.data_hash.as_deref() != Some(bundle.data_hash.as_str()) {
        return Err(CliError::mismatch(format!(
            "checkpoint data hash {} does not match dataset {}",
            c.data_hash.as_deref().unwrap_or("(none)"),
            bundle.data_hash
        )));
    }
    Ok(c.model()?)
}

pub const REPORT: &str = "report.json";
pub const KL_CSV: &str = "kl.csv";

pub fn eval(common: &Common, checkpoint: &Path, data: &Path) -> Result<u8, CliError> {
    let cfg: EvalConfig = config::load(common.config.as_deref(), &common.overrides(vec![]))?;
    let bundle = DataBundle::open(data)?;
    let model = checkpoint_for(checkpoint, &bundle)?;
    let train_set = bundle.split("train")?;
    let test_set = bundle.split("test")?;
    let oracles = bundle.oracles()?;
    let mut out = OutDir::create(out_dir(common)?, common.force, &[REPORT.into(), KL_CSV.into()])?;
    let pool = thread_pool(common.threads)?;
    let report = pool.install(|| evaluate_model(&model, Some(&oracles), &train_set, &test_set, &cfg))?;
    out.write(REPORT, &serde_json::to_vec_pretty(&report).expect("report serializes"))?;
    if let Some(kl) = &report.diagnostics.kl {
        out.write(KL_CSV, kl_csv(kl).as_bytes())?;
    }
    let summary = json!({
        "latent_probe": report.table1_latent_probe,
        "coherence": report.table2_coherence.as_ref().map(|c| json!({
            "joint": c.joint.rate,
            "cross": c.cross.iter().map(|x| json!({"source": x.source, "target": x.target, "rate": x.result.rate})).collect::<Vec<_>>(),
        })),
    });
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    out.finish("eval", &cfg, Some(bundle.data_hash), common.threads, summary)?;
    Ok(0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Joint,
    Cross,
    Traverse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub mode: Mode,
    pub r: usize,
    pub n: usize,
    pub source: usize,
    pub target: usize,
    pub dim: usize,
    pub steps: usize,
    pub rows: usize,
    pub index: usize,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            mode: Mode::Joint,
            r: 64,
            n: 9,
            source: 0,
            target: 1,
            dim: 0,
            steps: 11,
            rows: 16,
            index: 0,
            seed: 0,
        }
    }
}

/// One row per sample: `z_group`, optional extra columns, then `x0..`.
fn samples_csv(extra: &[(&str, Vec<String>)], z_group: &[usize], x: &Tensor) -> String {
    let d = x.shape()[1];
    let mut s = String::from("z_group");
    for (name, _) in extra {
        write!(s, ",{name}").unwrap();
    }
    for j in 0..d {
        write!(s, ",x{j}").unwrap();
    }
    s.push('\n');
    for (r, g) in z_group.iter().enumerate() {
        write!(s, "{g}").unwrap();
        for (_, col) in extra {
            write!(s, ",{}", col[r]).unwrap();
        }
        for v in &x.data()[r * d..(r + 1) * d] {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn generate(common: &Common, args: &GenerateArgs, forced_mode: Option<&str>) -> Result<u8, CliError> {
    let s = |v: Option<usize>| v.map(|x| x.to_string());
    let mode = forced_mode.map(String::from).or_else(|| args.mode.clone());
    if forced_mode.is_some() && args.mode.as_deref().is_some_and(|m| m != "traverse") {
        return Err(CliError::usage("traverse does not take a different --mode"));
    }
    let overrides = common.overrides(vec![
        ("mode", mode),
        ("r", s(args.r)),
        ("n", s(args.n)),
        ("source", s(args.source)),
        ("target", s(args.target)),
        ("dim", s(args.dim)),
        ("steps", s(args.steps)),
        ("rows", s(args.rows)),
        ("index", s(args.index)),
    ]);
    let cfg: GenerateConfig = config::load(common.config.as_deref(), &overrides)?;
    let (model, bundle) = match &args.data {
        Some(d) => {
            let bundle = DataBundle::open(d)?;
            (checkpoint_for(&args.checkpoint, &bundle)?, Some(bundle))
        }
        None => (load_checkpoint(&args.checkpoint)?.model()?, None),
    };
    let m_count = model.num_modalities();
    for (name, v) in [("source", cfg.source), ("target", cfg.target)] {
        if v >= m_count {
            return Err(CliError::usage(format!("--{name} {v} is out of range for {m_count} modalities")));
        }
    }
    let test = |bundle: &Option<DataBundle>| -> Result<_, CliError> {
        let b = bundle
            .as_ref()
            .ok_or_else(|| CliError::usage("cross and traverse need --data for their inputs"))?;
        b.split("test")
    };
    let mut rng = substream(cfg.seed, "generate");
    let mut files: Vec<(String, String)> = Vec::new();
    match cfg.mode {
        Mode::Joint => {
            if cfg.r == 0 || cfg.n == 0 {
                return Err(CliError::usage("joint generation needs r >= 1 and n >= 1"));
            }
            let g = generate_joint(&model, cfg.r, cfg.n, &mut rng)?;
            for (m, x) in g.samples.iter().enumerate() {
                files.push((format!("joint_m{m}.csv"), samples_csv(&[], &g.z_group, x)));
            }
        }
        Mode::Cross => {
            let ds = test(&bundle)?;
            if cfg.rows == 0 {
                return Err(CliError::usage("cross generation needs rows >= 1"));
            }
            let rows = mmvl_core::eval::strided(&ds, cfg.rows);
            let x = cross_generate(&model, cfg.source, &rows.xs[cfg.source], cfg.target, &mut rng)?;
            let groups: Vec<usize> = (0..rows.len()).collect();
            let labels = rows.labels.iter().map(u16::to_string).collect();
            files.push((
                format!("cross_{}_to_{}.csv", cfg.source, cfg.target),
                samples_csv(&[("label", labels)], &groups, &x),
            ));
        }
        Mode::Traverse => {
            let ds = test(&bundle)?;
            if cfg.index >= ds.len() {
                return Err(CliError::usage(format!("--index {} is out of range for {} test rows", cfg.index, ds.len())));
            }
            if cfg.dim >= model.latent_dim() {
                return Err(CliError::usage(format!("--dim {} is out of range for D={}", cfg.dim, model.latent_dim())));
            }
            if cfg.steps < 2 {
                return Err(CliError::usage("traversal needs steps >= 2"));
            }
            let x = ds.xs[cfg.source].select_rows(&[cfg.index]);
            let (zs, outs) = traverse(&model, cfg.source, &x, cfg.dim, cfg.steps)?;
            let d = model.latent_dim();
            let zcol: Vec<String> = (0..cfg.steps).map(|s| zs.data()[s * d + cfg.dim].to_string()).collect();
            let groups: Vec<usize> = (0..cfg.steps).collect();
            for (m, x) in outs.iter().enumerate() {
                files.push((
                    format!("traverse_m{m}.csv"),
                    samples_csv(&[("z_value", zcol.clone())], &groups, x),
                ));
            }
        }
    }
    let planned: Vec<String> = files.iter().map(|(n, _)| n.clone()).collect();
    let mut out = OutDir::create(out_dir(common)?, common.force, &planned)?;
    for (name, body) in &files {
        out.write(name, body.as_bytes())?;
    }
    println!("{}", json!({ "files": planned }));
    out.finish("generate", &cfg, bundle.map(|b| b.data_hash), common.threads, json!({}))?;
    Ok(0)
}

pub const VERIFY_REPORT: &str = "verify.json";

pub fn verify(common: &Common, fault: Option<&str>) -> Result<u8, CliError> {
    let cfg: VerifyConfig = config::load(common.config.as_deref(), &common.overrides(vec![]))?;
    let fault: Option<OpKind> = fault.map(str::parse).transpose()?;
    let mut out = match &common.out {
        Some(p) => Some(OutDir::create(p, common.force, &[VERIFY_REPORT.into()])?),
        None => None,
    };
    let report = run_verify(&cfg, fault)?;
    for c in &report.checks {
        println!(
            "{:<48} {} measured {:.3e} {} {:.3e}  {}",
            c.name,
            if c.passed { "PASS" } else { "FAIL" },
            c.measured,
            c.comparison.symbol(),
            c.tolerance,
            c.detail
        );
    }
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    println!(
        "{} checks, {failed} failed, {:.1}s",
        report.checks.len(),
        report.seconds
    );
    if let Some(out) = out.as_mut() {
        out.write(VERIFY_REPORT, &serde_json::to_vec_pretty(&report).expect("report serializes"))?;
    }
    if let Some(out) = out {
        out.finish("verify", &cfg, None, common.threads, json!({ "passed": report.passed }))?;
    }
    Ok(if report.passed { 0 } else { 1 })
}
