//! The optimization loop.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint;
use super::config::RunConfig;
use super::schedule::lr_at;
use crate::error::{Error, Result};
use crate::loss::si_loss;
use crate::model::Model;
use crate::nn::Ctx;
use crate::scenegen::{Dataset, DepthSample, Split};
use crate::substrate::{clip_global_norm, rng, OptimizerState, ParamUpdate, Tape, Tensor};

/// A training or evaluation sample in model layout.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub seed: u64,
    pub image: Tensor<f32>,
    pub depth: Tensor<f32>,
    pub valid: Vec<bool>,
}

impl From<DepthSample> for Prepared {
    fn from(s: DepthSample) -> Self {
        Self {
            seed: s.seed,
            image: s.rgb,
            depth: s.depth,
            valid: s.valid,
        }
    }
}

pub fn load_split(data: &Path, split: Split) -> Result<Vec<Prepared>> {
    let ds = Dataset::open(data)?;
    Ok(ds.load(split)?.into_iter().map(Prepared::from).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub first_loss: f64,
    pub final_loss: f64,
    pub frozen_checksum: String,
    pub checkpoint: PathBuf,
}

/// Loss and gradients (trainable order) of one sample, scaled by `weight`.
fn sample_grads(model: &Model<f32>, s: &Prepared, lambda: f64, weight: f32) -> Result<(f64, Vec<Tensor<f32>>)> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.store);
    let x = tape.constant(s.image.clone());
    let pred = model.forward(&ctx, x)?;
    let loss = si_loss(&tape, pred, &s.depth, &s.valid, lambda)?;
    let value = tape.value(loss).item() as f64;
    let scaled = tape.scale(loss, weight)?;
    tape.backward(scaled)?;
    let mut grads = ctx.param_grads();
    let out = model
        .store
        .trainable()
        .map(|id| {
            grads
                .remove(&id)
                .unwrap_or_else(|| Tensor::zeros(model.store.get(id).shape()))
        })
        .collect();
    Ok((value, out))
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model<f32>,
    pub state: OptimizerState<f32>,
    samples: Vec<Prepared>,
    initial_checksum: u64,
    steps_per_epoch: u64,
    total_steps: u64,
    warmup_steps: u64,
}

impl Trainer {
    pub fn new(cfg: RunConfig, samples: Vec<Prepared>) -> Result<Self> {
        cfg.validate()?;
        let model = Model::<f32>::new(&cfg.model, cfg.seed)?;
        let state = OptimizerState::new(
            model
                .store
                .trainable()
                .map(|id| (model.store.name(id), model.store.get(id).shape())),
        );
        Self::assemble(cfg, model, state, samples)
    }

    /// Continues from a checkpoint. The model part of `cfg` and the seed
    /// must match the checkpoint; optimizer and schedule may differ.
    pub fn resume(cfg: RunConfig, samples: Vec<Prepared>, dir: &Path) -> Result<Self> {
        cfg.validate()?;
        let loaded = checkpoint::load(dir)?;
        let old = &loaded.manifest.config;
        if old.model != cfg.model || old.seed != cfg.seed {
            return Err(Error::Config(
                "model configuration or seed differs from the checkpoint".into(),
            ));
        }
        Self::assemble(cfg, loaded.model, loaded.state, samples)
    }

    fn assemble(cfg: RunConfig, model: Model<f32>, state: OptimizerState<f32>, samples: Vec<Prepared>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Usage("training split is empty".into()));
        }
        let [h, w] = cfg.model.resolution;
        for s in &samples {
            if s.image.shape() != [3, h, w] {
                return Err(Error::Config(format!(
                    "sample {} has shape {:?}, model expects [3, {h}, {w}]",
                    s.seed,
                    s.image.shape()
                )));
            }
        }
        let sc = &cfg.schedule;
        let steps_per_epoch = samples.len().div_ceil(sc.batch_size) as u64;
        let mut total_steps = sc.epochs * steps_per_epoch;
        if let Some(m) = sc.max_steps {
            total_steps = total_steps.min(m);
        }
        let warmup_steps = sc.warmup_epochs * steps_per_epoch;
        if warmup_steps >= total_steps {
            return Err(Error::Config(format!(
                "warmup of {warmup_steps} steps does not fit in {total_steps} total steps"
            )));
        }
        let initial_checksum = model.store.frozen_checksum();
        Ok(Self {
            cfg,
            model,
            state,
            samples,
            initial_checksum,
            steps_per_epoch,
            total_steps,
            warmup_steps,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn initial_checksum(&self) -> u64 {
        self.initial_checksum
    }

    /// Sample indices of step `step`: a seeded shuffle per epoch, cut into
    /// consecutive batches (the last one may be short).
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let epoch = step / self.steps_per_epoch;
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut rng::stream(
            self.cfg.seed,
            rng::label("shuffle").wrapping_add(epoch),
        ));
        let b = self.cfg.schedule.batch_size;
        let start = (step % self.steps_per_epoch) as usize * b;
        order[start..(start + b).min(order.len())].to_vec()
    }

    fn batch_grads(&self, batch: &[usize]) -> Vec<Result<(f64, Vec<Tensor<f32>>)>> {
        let weight = 1.0 / batch.len() as f32;
        let lambda = self.cfg.loss_lambda;
        let one = |&i: &usize| sample_grads(&self.model, &self.samples[i], lambda, weight);
        let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
        if self.cfg.deterministic || workers < 2 || batch.len() < 2 {
            return batch.iter().map(one).collect();
        }
        let chunk = batch.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|c| s.spawn(move || c.iter().map(one).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("worker panicked"))
                .collect()
        })
    }

    fn non_finite(&self, step: u64, seeds: Vec<u64>, detail: &str) -> Error {
        let dump = serde_json::json!({ "step": step, "seeds": seeds, "error": detail });
        let _ = fs::create_dir_all(&self.cfg.output);
        let _ = fs::write(
            self.cfg.output.join(format!("nonfinite-step{step}.json")),
            dump.to_string(),
        );
        Error::NonFiniteLoss {
            step: step as usize,
            seeds,
        }
    }

    pub fn step(&mut self) -> Result<StepLog> {
        let step = self.state.step;
        if step >= self.total_steps {
            return Err(Error::Usage(format!("training already finished at step {step}")));
        }
        let batch = self.batch_indices(step);
        let seeds: Vec<u64> = batch.iter().map(|&i| self.samples[i].seed).collect();
        let mut loss = 0.0;
        let mut sum: Option<Vec<Tensor<f32>>> = None;
        for r in self.batch_grads(&batch) {
            let (l, g) = match r {
                Ok(v) => v,
                Err(e @ (Error::NonFinite { .. } | Error::Numeric(_))) => {
                    return Err(self.non_finite(step, seeds, &e.to_string()))
                }
                Err(e) => return Err(e),
            };
            if !l.is_finite() {
                return Err(self.non_finite(step, seeds, "loss is not finite"));
            }
            loss += l;
            match sum.as_mut() {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        a.add_assign(b)?;
                    }
                }
                None => sum = Some(g),
            }
        }
        let mut grads = sum.expect("non-empty batch");
        let grad_norm = if self.cfg.optim.clip_norm > 0.0 {
            clip_global_norm(&mut grads, self.cfg.optim.clip_norm)
        } else {
            grads.iter().map(|g| g.sum_sq()).sum::<f64>().sqrt()
        };
        if !grad_norm.is_finite() {
            return Err(self.non_finite(step, seeds, "gradient norm is not finite"));
        }
        let lr = lr_at(step, self.total_steps, self.warmup_steps, self.cfg.optim.lr)?;
        let updates = self
            .model
            .store
            .trainable_mut()
            .zip(&grads)
            .map(|((name, param), grad)| ParamUpdate { name, param, grad })
            .collect();
        self.cfg.optim.adamw().step(&mut self.state, lr, updates)?;
        Ok(StepLog {
            step,
            epoch: step / self.steps_per_epoch,
            lr,
            loss: loss / batch.len() as f64,
            grad_norm,
        })
    }

    /// Mean training-objective value over `samples` with current weights.
    pub fn mean_loss(&self, samples: &[Prepared]) -> Result<f64> {
        let mut total = 0.0;
        for s in samples {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &self.model.store);
            let x = tape.constant(s.image.clone());
            let pred = self.model.forward(&ctx, x)?;
            let l = si_loss(&tape, pred, &s.depth, &s.valid, self.cfg.loss_lambda)?;
            total += tape.value(l).item() as f64;
        }
        Ok(total / samples.len() as f64)
    }

    pub fn samples(&self) -> &[Prepared] {
        &self.samples
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(dir, &self.cfg, &self.model, &self.state)
    }

    fn check_frozen(&self) -> Result<()> {
        let now = self.model.store.frozen_checksum();
        if now != self.initial_checksum {
            return Err(Error::Harness(format!(
                "frozen weights changed: {} -> {}",
                checkpoint::checksum_hex(self.initial_checksum),
                checkpoint::checksum_hex(now)
            )));
        }
        Ok(())
    }

    /// Trains to the end of the schedule, appending one JSON line per step
    /// to `train_log.jsonl` and writing `checkpoint/` (plus periodic
    /// `checkpoint-<step>/` directories) under the output directory.
    pub fn run(&mut self) -> Result<TrainSummary> {
        let out = self.cfg.output.clone();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let log_path = out.join("train_log.jsonl");
        let mut log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let mut first = None;
        let mut last = f64::NAN;
        while self.state.step < self.total_steps {
            let rec = self.step()?;
            first.get_or_insert(rec.loss);
            last = rec.loss;
            let line = serde_json::to_string(&rec).expect("log serializes");
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
            let k = self.cfg.schedule.checkpoint_every;
            if k > 0 && self.state.step % k == 0 && self.state.step < self.total_steps {
                self.save(&out.join(format!("checkpoint-{:06}", self.state.step)))?;
            }
        }
        self.check_frozen()?;
        let ckpt = out.join("checkpoint");
        self.save(&ckpt)?;
        Ok(TrainSummary {
            steps: self.state.step,
            first_loss: first.unwrap_or(f64::NAN),
            final_loss: last,
            frozen_checksum: checkpoint::checksum_hex(self.initial_checksum),
            checkpoint: ckpt,
        })
    }
}
