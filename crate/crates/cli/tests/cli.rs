//! End-to-end runs of the `mmvl` binary on a small dataset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mmvl_core::checkpoint::{load_checkpoint, Checkpoint};
use mmvl_core::data::{generate_toy_multimodal, ToyDatasetConfig};
use mmvl_core::fixtures::rigged_model;
use mmvl_core::models::MultimodalModel;
use mmvl_core::optim::{AdamConfig, OptimizerState};
use mmvl_core::pipeline::config_hash;
use mmvl_core::rng::{substream, RngState, INIT};
use mmvl_core::train::TrainConfig;
use serde_json::Value;
use tempfile::TempDir;

const SMALL: &[&str] = &[
    "--set", "per_class=40",
    "--set", "dim_a=24",
    "--set", "dim_b=8",
    "--set", "style_dims=4",
    "--set", "pairs_per_instance=3",
];

const QUICK_TRAIN: &[&str] = &[
    "--set", "latent_dim=4",
    "--set", "hidden=16",
    "--set", "batch_size=32",
    "--set", "validation_rows=64",
];

fn mmvl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmvl"))
        .args(args)
        .env_remove("MMVL_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mmvl(args);
    assert!(
        out.status.success(),
        "mmvl {args:?} failed with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> (i32, String) {
    let out = mmvl(args);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, seed: u64) -> PathBuf {
    let out = dir.join(format!("data{seed}"));
    let seed = seed.to_string();
    let mut args = vec!["gen-data", "--out", s(&out), "--seed", &seed];
    args.extend_from_slice(SMALL);
    ok(&args);
    out
}

fn train(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--data", s(data), "--out", s(out)];
    args.extend_from_slice(QUICK_TRAIN);
    args.extend_from_slice(extra);
    ok(&args);
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn gen_data_writes_the_inventory_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let a = gen(tmp.path(), 3);
    let mut names: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["effective.conf", "manifest.json", "oracle_0.json", "oracle_1.json", "test.mmds", "train.mmds", "val.mmds"]
    );
    let m = manifest(&a);
    assert_eq!(m["kind"], "dataset");
    assert_eq!(m["config"]["seed"], 3);
    let cfg: ToyDatasetConfig = serde_json::from_value(m["config"].clone()).unwrap();
    assert_eq!(m["config_hash"], config_hash(&cfg));

    let b = tmp.path().join("again");
    let mut args = vec!["gen-data", "--out", s(&b), "--seed", "3"];
    args.extend_from_slice(SMALL);
    ok(&args);
    for name in &names {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name} differs");
    }

    // no silent overwrite
    let (c, err) = code(&args);
    assert_eq!(c, 2);
    assert!(err.contains("--force"), "{err}");
    args.push("--force");
    ok(&args);
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("d");
    let (c, err) = code(&["gen-data", "--out", s(&out), "--set", "n_clases=3"]);
    assert_eq!(c, 2);
    assert!(err.contains("n_clases"), "{err}");

    let conf = tmp.path().join("bad.conf");
    fs::write(&conf, "seed=1\nwidth=3\n").unwrap();
    let (c, err) = code(&["gen-data", "--out", s(&out), "--config", s(&conf)]);
    assert_eq!(c, 2);
    assert!(err.contains("width"), "{err}");

    let (c, _) = code(&["gen-data", "--out", s(&out), "--set", "n_classes=1"]);
    assert_eq!(c, 2);
    let (c, _) = code(&["frobnicate"]);
    assert_eq!(c, 2);
}

#[test]
fn config_file_and_json_alternative_agree() {
    let tmp = TempDir::new().unwrap();
    let kv = tmp.path().join("a.conf");
    let js = tmp.path().join("b.json");
    fs::write(&kv, "per_class=40\ndim_a=24\ndim_b=8\nstyle_dims=4\npairs_per_instance=2\nseed=5\n").unwrap();
    fs::write(&js, r#"{"per_class": 40, "dim_a": 24, "dim_b": 8, "style_dims": 4, "pairs_per_instance": 2, "seed": 5}"#).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["gen-data", "--out", s(&a), "--config", s(&kv)]);
    ok(&["gen-data", "--out", s(&b), "--config", s(&js)]);
    assert_eq!(fs::read(a.join("train.mmds")).unwrap(), fs::read(b.join("train.mmds")).unwrap());
    // the echoed configuration feeds back in
    let c = tmp.path().join("c");
    ok(&["gen-data", "--out", s(&c), "--config", s(&a.join("effective.conf"))]);
    assert_eq!(manifest(&a)["config_hash"], manifest(&c)["config_hash"]);
    // flags override the file
    let d = tmp.path().join("d");
    ok(&["gen-data", "--out", s(&d), "--config", s(&kv), "--seed", "6"]);
    assert_eq!(manifest(&d)["config"]["seed"], 6);
}

#[test]
fn zero_epochs_checkpoints_the_initialization() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 0);
    let run = tmp.path().join("run");
    train(&data, &run, &["--epochs", "0", "--seed", "4"]);
    let c = load_checkpoint(&run.join("checkpoint.mmvl")).unwrap();
    let fresh = MultimodalModel::new(c.model_config.clone(), &mut substream(4, INIT)).unwrap();
    assert_eq!(&c.params, fresh.params());
    assert_eq!(c.step, 0);
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1, "only the initial epoch record: {log}");
}

#[test]
fn training_is_deterministic_and_logs_monotone_steps() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 0);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train(&data, &a, &["--epochs", "2", "--k", "4"]);
    train(&data, &b, &["--epochs", "2", "--k", "4"]);
    for f in ["checkpoint.mmvl", "train_log.jsonl", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let log = fs::read_to_string(a.join("train_log.jsonl")).unwrap();
    let steps: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|v| v["kind"] == "step")
        .map(|v| v["step"].as_u64().unwrap())
        .collect();
    assert!(!steps.is_empty());
    assert!(steps.windows(2).all(|w| w[1] == w[0] + 1));
    assert_eq!(steps[0], 1);
}

#[test]
fn tight_bound_logs_weight_shares() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 0);
    let run = tmp.path().join("run");
    train(&data, &run, &["--epochs", "1", "--objective", "moe-iwae-tight", "--k", "4"]);
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let mut seen = 0;
    for v in log.lines().map(|l| serde_json::from_str::<Value>(l).unwrap()) {
        if v["kind"] != "step" {
            continue;
        }
        let shares: Vec<f64> = v["weight_shares"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert_eq!(shares.len(), 2);
        assert!(shares.iter().all(|&s| (0.0..=1.0).contains(&s)), "{shares:?}");
        assert!((shares.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        seen += 1;
    }
    assert!(seen > 0);
}

#[test]
fn invalid_training_configs_exit_2() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 0);
    let run = tmp.path().join("run");
    let base = ["train", "--data", s(&data), "--out", s(&run)];
    let with = |extra: &[&str]| {
        let mut a = base.to_vec();
        a.extend_from_slice(extra);
        code(&a).0
    };
    assert_eq!(with(&["--objective", "mmis-elbo"]), 2, "mmis with the default dreg estimator");
    assert_eq!(with(&["--objective", "moe-iwae-tight", "--k", "5"]), 2, "K not divisible by M");
    assert_eq!(with(&["--objective", "iwae"]), 2);
    assert_eq!(with(&["--set", "hidden=[]"]), 2);
}

#[test]
fn numeric_blowup_exits_3() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 0);
    let run = tmp.path().join("run");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&run), "--epochs", "1", "--set", "lr=1e300"];
    args.extend_from_slice(QUICK_TRAIN);
    let (c, err) = code(&args);
    assert_eq!(c, 3, "{err}");
    assert!(err.contains("epoch") && err.contains("batch") && err.contains("norms"), "{err}");
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 0);
    let (full, half, rest) = (tmp.path().join("full"), tmp.path().join("half"), tmp.path().join("rest"));
    train(&data, &full, &["--epochs", "2", "--k", "4"]);
    train(&data, &half, &["--epochs", "1", "--k", "4"]);
    let ck = half.join("checkpoint.mmvl");
    train(&data, &rest, &["--epochs", "2", "--k", "4", "--resume", s(&ck)]);
    assert_eq!(
        fs::read(full.join("checkpoint.mmvl")).unwrap(),
        fs::read(rest.join("checkpoint.mmvl")).unwrap()
    );
}

#[test]
fn eval_report_is_complete_deterministic_and_hash_checked() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 0);
    let run = tmp.path().join("run");
    train(&data, &run, &["--epochs", "1", "--k", "4"]);
    let ck = run.join("checkpoint.mmvl");
    let quick = [
        "--set", "likelihood_k=50",
        "--set", "likelihood_rows=8",
        "--set", "coherence_r=100",
        "--set", "n_mc=20",
        "--set", "kl_rows=8",
    ];
    fn eval_args<'a>(ck: &'a Path, data: &'a Path, out: &'a Path, quick: &[&'a str]) -> Vec<&'a str> {
        let mut a = vec!["eval", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(out)];
        a.extend_from_slice(quick);
        a
    }
    let (a, b) = (tmp.path().join("ea"), tmp.path().join("eb"));
    ok(&eval_args(&ck, &data, &a, &quick));
    ok(&eval_args(&ck, &data, &b, &quick));
    for f in ["report.json", "kl.csv", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let r: Value = serde_json::from_slice(&fs::read(a.join("report.json")).unwrap()).unwrap();
    for key in ["table1_latent_probe", "table2_coherence", "table3_likelihood", "table4_cca", "diagnostics"] {
        assert!(!r[key].is_null(), "missing {key}");
    }
    assert_eq!(r["table3_likelihood"].as_array().unwrap().len(), 2);
    assert!(r["diagnostics"]["kl"].is_array());
    let kl = fs::read_to_string(a.join("kl.csv")).unwrap();
    assert!(kl.starts_with("dim,kl1,kl2,sym_kl,class\n"));
    assert_eq!(kl.lines().count(), 1 + 4);

    // the thread count does not change the report
    let c = tmp.path().join("ec");
    let mut args = eval_args(&ck, &data, &c, &quick);
    args.extend_from_slice(&["--threads", "3"]);
    ok(&args);
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(c.join("report.json")).unwrap());

    // a checkpoint trained on other data is refused
    let other = gen(tmp.path(), 1);
    let (c, err) = code(&["eval", "--checkpoint", s(&ck), "--data", s(&other), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(c, 4, "{err}");

    // a tampered split is refused
    let mut bytes = fs::read(data.join("test.mmds")).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 1;
    fs::write(data.join("test.mmds"), bytes).unwrap();
    let (c, _) = code(&eval_args(&ck, &data, &tmp.path().join("y"), &quick));
    assert_eq!(c, 4);
}

#[test]
fn rigged_model_scores_full_joint_coherence() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 0);
    let cfg: ToyDatasetConfig = serde_json::from_value(manifest(&data)["config"].clone()).unwrap();
    let toy = generate_toy_multimodal(&cfg).unwrap();
    let model = rigged_model(&toy.templates, 4, 0.05).unwrap();
    let c = Checkpoint {
        model_config: model.config().clone(),
        train_config: TrainConfig::default(),
        params: model.params().clone(),
        optimizer: OptimizerState::new(AdamConfig::default(), model.params()),
        rng: RngState::capture(&substream(0, "training")),
        step: 0,
        epoch: 0,
        history: Vec::new(),
        data_hash: Some(config_hash(&cfg)),
    };
    let ck = tmp.path().join("rigged.mmvl");
    fs::write(&ck, c.to_bytes().unwrap()).unwrap();
    let out = tmp.path().join("eval");
    ok(&[
        "eval", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&out),
        "--set", "likelihood_k=20", "--set", "likelihood_rows=4", "--set", "n_mc=10", "--set", "kl_rows=4",
    ]);
    let r: Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    let joint = r["table2_coherence"]["joint"]["rate"].as_f64().unwrap();
    assert!(joint >= 0.99, "rigged joint coherence {joint}");
}

#[test]
fn generate_modes_emit_aligned_csv() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 0);
    let run = tmp.path().join("run");
    train(&data, &run, &["--epochs", "0"]);
    let ck = run.join("checkpoint.mmvl");

    let j = tmp.path().join("joint");
    ok(&["generate", "--checkpoint", s(&ck), "--out", s(&j), "--mode", "joint", "-R", "2", "-N", "3"]);
    for (m, width) in [(0, 24), (1, 8)] {
        let rows = csv_rows(&j.join(format!("joint_m{m}.csv")));
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.len() == 1 + width));
        let groups: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
        assert_eq!(groups, ["0", "0", "0", "1", "1", "1"]);
    }

    let t = tmp.path().join("trav");
    ok(&["traverse", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&t), "--dim", "0", "--steps", "11"]);
    for m in 0..2 {
        assert_eq!(csv_rows(&t.join(format!("traverse_m{m}.csv"))).len(), 11);
    }

    let c = tmp.path().join("cross");
    ok(&[
        "generate", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&c),
        "--mode", "cross", "--source", "1", "--target", "0", "--rows", "5",
    ]);
    let rows = csv_rows(&c.join("cross_1_to_0.csv"));
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.len() == 2 + 24));

    let bad = |extra: &[&str]| {
        let mut a = vec!["generate", "--checkpoint", s(&ck), "--data", s(&data), "--out"];
        let o = tmp.path().join("bad");
        let o = o.to_str().unwrap().to_string();
        a.push(Box::leak(o.into_boxed_str()));
        a.extend_from_slice(extra);
        code(&a).0
    };
    assert_eq!(bad(&["--mode", "sideways"]), 2);
    assert_eq!(bad(&["--mode", "traverse", "--dim", "9"]), 2);
    assert_eq!(bad(&["--mode", "traverse", "--steps", "1"]), 2);
    assert_eq!(bad(&["--mode", "cross", "--target", "2"]), 2);
    assert_eq!(bad(&["--mode", "joint", "-R", "0"]), 2);
}

#[test]
fn verify_passes_lists_checks_and_catches_a_fault() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("va");
    let stdout = ok(&["verify", "--out", s(&a)]);
    assert!(stdout.contains("fd.primitive.matmul") && stdout.contains("order.loose-le-tight"), "{stdout}");
    assert!(stdout.lines().filter(|l| l.contains(" PASS ")).count() >= 30);
    let b = tmp.path().join("vb");
    ok(&["verify", "--out", s(&b)]);
    assert_eq!(fs::read(a.join("verify.json")).unwrap(), fs::read(b.join("verify.json")).unwrap());

    let out = mmvl(&["verify", "--inject-fault", "exp", "--set", "sandwich_replicates=20", "--set", "variance_replicates=20"]);
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().any(|l| l.starts_with("fd.primitive.exp") && l.contains("FAIL")), "{text}");
}
