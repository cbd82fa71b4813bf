//! Per-modality classifiers used to score generations.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{AdamConfig, OptimizerState};
use crate::rng::substream;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

use super::probe::{accuracy, argmax_rows};

pub const ORACLE_GATE: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            hidden: 64,
            epochs: 30,
            batch_size: 64,
            lr: 3e-3,
        }
    }
}

/// One-hidden-layer ReLU classifier on standardized inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleClassifier {
    pub input_dim: usize,
    pub n_classes: usize,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub params: ParamStore,
    pub test_accuracy: f64,
}

fn standardize(x: &Tensor, mean: &[f64], scale: &[f64]) -> Tensor {
    let d = mean.len();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let j = i % d;
        *v = (*v - mean[j]) / scale[j];
    }
    out
}

fn logits<'t>(tape: &'t Tape, p: &ParamStore, x: Tensor, train: bool) -> Result<Var<'t>> {
    let get = |name: &str| -> Result<Var<'t>> {
        let t = p.get(name).expect("oracle parameter").clone();
        if train {
            tape.param(name, t)
        } else {
            Ok(tape.constant(t))
        }
    };
    let h = tape.constant(x).matmul(get("h.w")?)?.add(get("h.b")?)?.relu();
    h.matmul(get("out.w")?)?.add(get("out.b")?)
}

fn one_hot(labels: &[u16], c: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), c]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * c + l as usize] = 1.0;
    }
    t
}

impl OracleClassifier {
    /// Trains on `(x, labels)`, scores `(test_x, test_labels)` and refuses
    /// to return a classifier below [`ORACLE_GATE`].
    pub fn train(
        x: &Tensor,
        labels: &[u16],
        test_x: &Tensor,
        test_labels: &[u16],
        n_classes: usize,
        config: &OracleConfig,
        seed: u64,
    ) -> Result<Self> {
        if x.rank() != 2 || x.shape()[0] != labels.len() || x.shape()[0] == 0 {
            return Err(Error::Dimension("oracle training data must be [N, n] with N labels".into()));
        }
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for r in 0..n {
            for j in 0..d {
                mean[j] += x.data()[r * d + j] / n as f64;
            }
        }
        for r in 0..n {
            for j in 0..d {
                var[j] += (x.data()[r * d + j] - mean[j]).powi(2) / n as f64;
            }
        }
        let scale: Vec<f64> = var.iter().map(|v| if *v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
        let xs = standardize(x, &mean, &scale);

        let mut rng = substream(seed, "oracle");
        let h = config.hidden;
        let mut params = ParamStore::new();
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let b = 1.0 / (fan_in as f64).sqrt();
            let len = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-b..b)).collect()).unwrap()
        };
        params.insert("h.w", uniform(&[d, h], d))?;
        params.insert("h.b", uniform(&[h], d))?;
        params.insert("out.w", uniform(&[h, n_classes], h))?;
        params.insert("out.b", uniform(&[n_classes], h))?;
        let mut opt = OptimizerState::new(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            &params,
        );
        let mut order: Vec<usize> = (0..n).collect();
        for epoch in 0..config.epochs {
            order.shuffle(&mut substream(seed, &format!("oracle.shuffle.{epoch}")));
            for idx in order.chunks(config.batch_size.max(1)) {
                let tape = Tape::new();
                let y: Vec<u16> = idx.iter().map(|&i| labels[i]).collect();
                let out = logits(&tape, &params, xs.select_rows(idx), true)?;
                let nll = out
                    .log_softmax()?
                    .mul(tape.constant(one_hot(&y, n_classes)))?
                    .sum_all()
                    .scale(-1.0 / idx.len() as f64);
                let grads = tape.backward(nll)?.into_params();
                opt.step(&mut params, &grads)?;
            }
        }
        let mut oracle = OracleClassifier {
            input_dim: d,
            n_classes,
            feature_mean: mean,
            feature_scale: scale,
            params,
            test_accuracy: 0.0,
        };
        oracle.test_accuracy = accuracy(&oracle.predict(test_x)?, test_labels);
        if oracle.test_accuracy < ORACLE_GATE {
            return Err(Error::Gate {
                measured: oracle.test_accuracy,
                required: ORACLE_GATE,
            });
        }
        Ok(oracle)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<u16>> {
        if x.rank() != 2 || x.shape()[1] != self.input_dim {
            return Err(Error::Dimension(format!(
                "oracle expects [N, {}] inputs, got {:?}",
                self.input_dim,
                x.shape()
            )));
        }
        let tape = Tape::new();
        let xs = standardize(x, &self.feature_mean, &self.feature_scale);
        Ok(argmax_rows(&logits(&tape, &self.params, xs, false)?.value()))
    }

    /// Refuses use when the recorded test accuracy is below the gate.
    pub fn check_gate(&self) -> Result<()> {
        if self.test_accuracy < ORACLE_GATE {
            return Err(Error::Gate {
                measured: self.test_accuracy,
                required: ORACLE_GATE,
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
