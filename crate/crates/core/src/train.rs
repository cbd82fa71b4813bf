//! Mini-batch training loop.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PairedDataset;
use crate::error::{Error, Result};
use crate::models::{ModelConfig, MultimodalModel};
use crate::objectives::{evaluate, num_strata, objective_gradients, Estimator, ObjectiveKind, SamplingPlan};
use crate::optim::{AdamConfig, OptimizerState};
use crate::rng::{substream, INIT, TRAINING};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    pub estimator: Estimator,
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop each epoch after this many batches.
    pub max_batches_per_epoch: Option<usize>,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Particles for the validation bound, which uses the training objective.
    pub validation_k: usize,
    /// Validation rows scored per evaluation, taken at a fixed stride.
    pub validation_rows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: ObjectiveKind::MoeIwaeLoose,
            estimator: Estimator::Dreg,
            k: 10,
            epochs: 30,
            batch_size: 64,
            max_batches_per_epoch: None,
            adam: AdamConfig::default(),
            seed: 0,
            validation_k: 10,
            validation_rows: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.objective == ObjectiveKind::MmisElbo && self.estimator == Estimator::Dreg {
            return Err(Error::Config("the dreg estimator does not apply to mmis-elbo".into()));
        }
        let s = num_strata(model);
        SamplingPlan::particles_per_stratum(self.objective, self.k, s)?;
        SamplingPlan::particles_per_stratum(self.objective, self.validation_k, s)?;
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("adam.lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub batch: usize,
    pub objective: f64,
    /// Per-modality share of the pooled importance weight; empty for mmis.
    pub weight_shares: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the untrained initialization.
    pub epoch: usize,
    pub steps: u64,
    /// Mean training objective over the epoch's batches.
    pub train_bound: Option<f64>,
    pub validation: Option<f64>,
    pub weight_shares: Vec<f64>,
}

pub struct Trainer {
    pub model: MultimodalModel,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pool: Option<Arc<rayon::ThreadPool>>,
}

/// Rows `[lo, hi)` along axis 1 of an `[L, B, D]` tensor.
fn slice_batch(t: &Tensor, lo: usize, hi: usize) -> Tensor {
    let (l, b, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut out = Vec::with_capacity(l * (hi - lo) * d);
    for i in 0..l {
        out.extend_from_slice(&t.data()[(i * b + lo) * d..(i * b + hi) * d]);
    }
    Tensor::new(vec![l, hi - lo, d], out).expect("consistent slice")
}

fn slice_rows(t: &Tensor, lo: usize, hi: usize) -> Tensor {
    let idx: Vec<usize> = (lo..hi).collect();
    t.select_rows(&idx)
}

impl Trainer {
    /// Fresh model initialized from the seed's init substream.
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        model_config.validate()?;
        config.validate(&model_config)?;
        let model = MultimodalModel::new(model_config, &mut substream(config.seed, INIT))?;
        Self::with_model(model, config)
    }

    /// Starts training from the given parameters.
    pub fn with_model(model: MultimodalModel, config: TrainConfig) -> Result<Self> {
        config.validate(model.config())?;
        let optimizer = OptimizerState::new(config.adam, model.params());
        Ok(Trainer {
            rng: substream(config.seed, TRAINING),
            model,
            optimizer,
            config,
            step: 0,
            epoch: 0,
            history: Vec::new(),
            pool: None,
        })
    }

    /// Shards each batch across `threads` workers. Results are
    /// deterministic for a fixed thread count; 1 reproduces the serial
    /// computation exactly.
    pub fn set_threads(&mut self, threads: usize) -> Result<()> {
        self.pool = if threads > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Some(Arc::new(pool))
        } else {
            None
        };
        Ok(())
    }

    fn threads(&self) -> usize {
        self.pool.as_ref().map_or(1, |p| p.current_num_threads())
    }

    fn check_dataset(&self, data: &PairedDataset) -> Result<()> {
        let expected: Vec<usize> = self.model.config().modalities.iter().map(|m| m.input_dim).collect();
        if data.dims() != expected {
            return Err(Error::Dimension(format!(
                "dataset modality dims {:?} do not match model dims {expected:?}",
                data.dims()
            )));
        }
        Ok(())
    }

    /// Bound value, weight shares and ascent gradients for one batch.
    fn batch_gradients(&self, xs: &[Tensor], plan: &SamplingPlan) -> Result<(f64, Vec<f64>, BTreeMap<String, Tensor>)> {
        let (kind, est) = (self.config.objective, self.config.estimator);
        let b = xs[0].shape()[0];
        let shards = self.threads().min(b);
        if shards <= 1 {
            let g = objective_gradients(&self.model, xs, plan, kind, est)?;
            return Ok((g.bound.value, g.bound.weight_shares, g.grads));
        }
        let bounds: Vec<(usize, usize)> = (0..shards).map(|s| (s * b / shards, (s + 1) * b / shards)).collect();
        let run = |&(lo, hi): &(usize, usize)| {
            let xs_s: Vec<Tensor> = xs.iter().map(|x| slice_rows(x, lo, hi)).collect();
            let noise = plan.noise.iter().map(|n| slice_batch(n, lo, hi)).collect();
            let plan_s = SamplingPlan::from_noise(plan.k, noise)?;
            objective_gradients(&self.model, &xs_s, &plan_s, kind, est)
        };
        let pool = self.pool.as_ref().expect("more than one shard implies a pool");
        let parts: Vec<_> = pool.install(|| bounds.par_iter().map(run).collect::<Vec<_>>());
        let mut value = 0.0;
        let mut shares: Vec<f64> = Vec::new();
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for (part, &(lo, hi)) in parts.into_iter().zip(&bounds) {
            let part = part?;
            let w = (hi - lo) as f64 / b as f64;
            value += w * part.bound.value;
            shares.resize(part.bound.weight_shares.len(), 0.0);
            for (a, s) in shares.iter_mut().zip(&part.bound.weight_shares) {
                *a += w * s;
            }
            for (name, g) in part.grads {
                let entry = grads.entry(name).or_insert_with(|| Tensor::zeros(g.shape()));
                for (a, v) in entry.data_mut().iter_mut().zip(g.data()) {
                    *a += w * v;
                }
            }
        }
        Ok((value, shares, grads))
    }

    fn abort(&self, batch: usize) -> Error {
        let norms = self
            .model
            .params()
            .l2_norms()
            .iter()
            .map(|(n, v)| format!("{n}={v:.4e}"))
            .collect::<Vec<_>>()
            .join(", ");
        Error::NumericAbort {
            epoch: self.epoch + 1,
            batch,
            norms,
        }
    }

    /// One optimizer step on the rows of `xs`.
    pub fn step_on(&mut self, xs: &[Tensor], batch: usize) -> Result<StepRecord> {
        let b = xs[0].shape()[0];
        let plan = SamplingPlan::draw(self.model.config(), self.config.objective, self.config.k, b, &mut self.rng)?;
        // a domain failure mid-training means the parameters have left the
        // representable range, the same condition as a non-finite gradient
        let (value, shares, mut grads) = match self.batch_gradients(xs, &plan) {
            Err(Error::Domain(_)) => return Err(self.abort(batch)),
            r => r?,
        };
        if !value.is_finite() || grads.values().any(|g| !g.is_finite()) {
            return Err(self.abort(batch));
        }
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v = -*v;
            }
        }
        self.optimizer.step(self.model.params_mut(), &grads)?;
        if !self.model.params().all_finite() {
            return Err(self.abort(batch));
        }
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            epoch: self.epoch + 1,
            batch,
            objective: value,
            weight_shares: shares,
        })
    }

    /// Trains one epoch over `train` in a per-epoch shuffled order.
    pub fn run_epoch(
        &mut self,
        train: &PairedDataset,
        val: Option<&PairedDataset>,
        on_step: &mut dyn FnMut(&StepRecord),
    ) -> Result<EpochRecord> {
        self.check_dataset(train)?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut substream(self.config.seed, &format!("shuffle.{}", self.epoch + 1)));
        let mut batches: Vec<&[usize]> = order.chunks(self.config.batch_size).collect();
        if let Some(cap) = self.config.max_batches_per_epoch {
            batches.truncate(cap);
        }
        let (mut total, mut count) = (0.0, 0usize);
        let mut shares: Vec<f64> = Vec::new();
        for (i, idx) in batches.iter().enumerate() {
            let rec = self.step_on(&train.rows(idx), i)?;
            total += rec.objective;
            count += 1;
            shares.resize(rec.weight_shares.len(), 0.0);
            for (a, s) in shares.iter_mut().zip(&rec.weight_shares) {
                *a += s;
            }
            on_step(&rec);
        }
        self.epoch += 1;
        for s in shares.iter_mut() {
            *s /= count.max(1) as f64;
        }
        let rec = EpochRecord {
            epoch: self.epoch,
            steps: self.step,
            train_bound: (count > 0).then(|| total / count as f64),
            validation: val.map(|v| self.validation_bound(v)).transpose()?,
            weight_shares: shares,
        };
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Trains until `config.epochs` epochs are complete, recording the
    /// initialization's validation bound first when starting fresh.
    pub fn train(
        &mut self,
        train: &PairedDataset,
        val: Option<&PairedDataset>,
        on_step: &mut dyn FnMut(&StepRecord),
    ) -> Result<()> {
        self.check_dataset(train)?;
        if self.history.is_empty() {
            self.history.push(EpochRecord {
                epoch: 0,
                steps: 0,
                train_bound: None,
                validation: val.map(|v| self.validation_bound(v)).transpose()?,
                weight_shares: Vec::new(),
            });
        }
        while self.epoch < self.config.epochs {
            self.run_epoch(train, val, on_step)?;
        }
        Ok(())
    }

    /// Training objective at `validation_k` on a fixed subset of `val`,
    /// with noise from a fixed substream so that successive evaluations
    /// are comparable.
    pub fn validation_bound(&self, val: &PairedDataset) -> Result<f64> {
        validation_bound(&self.model, &self.config, val)
    }
}

/// See [`Trainer::validation_bound`].
pub fn validation_bound(model: &MultimodalModel, config: &TrainConfig, val: &PairedDataset) -> Result<f64> {
    const CHUNK: usize = 128;
    if val.is_empty() {
        return Err(Error::Contract("validation set is empty".into()));
    }
    let n = val.len().min(config.validation_rows.max(1));
    let idx: Vec<usize> = (0..n).map(|i| i * val.len() / n).collect();
    let mut rng = substream(config.seed, "validation");
    let mut total = 0.0;
    for chunk in idx.chunks(CHUNK) {
        let xs = val.rows(chunk);
        let plan = SamplingPlan::draw(model.config(), config.objective, config.validation_k, chunk.len(), &mut rng)?;
        total += evaluate(model, &xs, &plan, config.objective)?.value * chunk.len() as f64;
    }
    Ok(total / n as f64)
}
