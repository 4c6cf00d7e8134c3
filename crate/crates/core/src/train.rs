//! Adam optimisation, the epoch loop with validation and checkpoints, and
//! split evaluation.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{splitmix64, LabeledScene};
use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::metrics::{Aggregation, IoUAccumulator, IoUReport};
use crate::model::{loss, ModelConfig, TeethSeg};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Stop after this many optimiser steps in total (0: no limit).
    pub max_steps: u64,
    /// Stop once validation mIoU reaches this value (0: never).
    pub stop_at_miou: f64,
    /// Also checkpoint every this many steps (0: only at epoch ends).
    pub checkpoint_every: u64,
    pub th_over_all_pixels: bool,
    pub aggregation: Aggregation,
    /// `f32` or `f64`.
    pub precision: String,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_steps: 0,
            stop_at_miou: 0.0,
            checkpoint_every: 0,
            th_over_all_pixels: false,
            aggregation: Aggregation::Dataset,
            precision: "f32".into(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("Adam needs betas in [0, 1) and eps > 0".into()));
        }
        if !matches!(self.precision.as_str(), "f32" | "f64") {
            return Err(Error::Config(format!("precision must be f32 or f64, got {:?}", self.precision)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<S>> = store.tensors().iter().map(|t| vec![S::zero(); t.numel()]).collect();
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the accumulated `grad` of each parameter.
    pub fn step(&mut self, store: &mut ParamStore<S>) {
        self.t += 1;
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let (one_b1, one_b2) = (S::one() - b1, S::one() - b2);
        let c1 = S::of(1.0 - self.beta1.powi(self.t as i32));
        let c2 = S::of(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (S::of(self.lr), S::of(self.eps));
        for (i, t) in store.tensors_mut().iter_mut().enumerate() {
            let Some(g) = t.grad.take() else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in t.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *x = *x - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub th: f64,
    pub fb: f64,
    pub total: f64,
}

/// Model, optimiser and position in the sample stream.
#[derive(Clone, Debug)]
pub struct Trainer<S: Scalar> {
    pub model: TeethSeg<S>,
    pub opt: Adam<S>,
    pub cfg: TrainConfig,
    pub step: u64,
    pub epoch: usize,
    /// Index into the current epoch's sample order.
    pub cursor: usize,
    pub best_miou: Option<f64>,
}

/// One line of the step log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: StepLoss,
    pub lr: f64,
    pub wall_ms: u128,
}

pub const TRAIN_LOG_HEADER: &str = "step,L_th,L_fb,L_total,lr,wall_ms";

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.8},{:.8},{:.8},{},{}",
            self.step, self.loss.th, self.loss.fb, self.loss.total, self.lr, self.wall_ms
        )
    }
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = TeethSeg::new(model_cfg)?;
        let opt = Adam::new(&model.store, &cfg);
        Ok(Trainer {
            model,
            opt,
            cfg,
            step: 0,
            epoch: 0,
            cursor: 0,
            best_miou: None,
        })
    }

    /// Sample order for `epoch`, fixed by the training seed.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.cfg.seed ^ splitmix64(epoch as u64)));
        order.shuffle(&mut rng);
        order
    }

    /// Mean loss over `batch` and one Adam update.
    pub fn train_step(&mut self, batch: &[&LabeledScene]) -> Result<StepLoss> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        self.model.store.zero_grad();
        let scale = S::of(1.0 / batch.len() as f64);
        let mut sum = StepLoss { th: 0.0, fb: 0.0, total: 0.0 };
        let mut tape = Tape::new();
        for scene in batch {
            tape.reset();
            let p = self.model.store.bind(&tape);
            let image: Tensor<S> = scene.image.cast();
            let scores = self.model.forward(&p, &tape, &image)?;
            let l = loss(&scores, &scene.labels, self.cfg.th_over_all_pixels)?;
            let total = l.total.value().item()?.f64();
            if !total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {total} at step {} (L_th {}, L_fb {})",
                    self.step + 1,
                    l.th.value().item()?.f64(),
                    l.fb.value().item()?.f64()
                )));
            }
            sum.th += l.th.value().item()?.f64();
            sum.fb += l.fb.value().item()?.f64();
            sum.total += total;
            let mut grads = tape.backward(l.total)?;
            self.model.store.accumulate(&p, &mut grads, scale);
        }
        if let Some((name, _)) = self
            .model
            .store
            .iter()
            .find(|(_, t)| t.grad.as_ref().is_some_and(|g| g.iter().any(|x| !x.is_finite())))
        {
            return Err(Error::Numeric(format!("non-finite gradient for {name} at step {}", self.step + 1)));
        }
        self.opt.step(&mut self.model.store);
        self.step += 1;
        let n = batch.len() as f64;
        Ok(StepLoss {
            th: sum.th / n,
            fb: sum.fb / n,
            total: sum.total / n,
        })
    }

    /// Next batch indices, advancing the cursor; `None` at the end of the epoch.
    pub fn next_batch(&mut self, n: usize) -> Option<Vec<usize>> {
        if self.cursor >= n {
            return None;
        }
        let order = self.epoch_order(n, self.epoch);
        let end = (self.cursor + self.cfg.batch_size).min(n);
        let batch = order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(batch)
    }

    pub fn finish_epoch(&mut self) {
        self.epoch += 1;
        self.cursor = 0;
    }

    pub fn budget_exhausted(&self) -> bool {
        self.cfg.max_steps > 0 && self.step >= self.cfg.max_steps
    }

    pub fn evaluate(&self, scenes: &[LabeledScene]) -> Result<IoUReport> {
        evaluate(&self.model, scenes, self.cfg.aggregation)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint<S>> {
        let mut tensors = self.model.store.to_checkpoint();
        for (i, name) in self.model.store.names().iter().enumerate() {
            let shape = self.model.store.tensors()[i].shape().to_vec();
            tensors.push((format!("adam_m.{name}"), Tensor::new(shape.clone(), self.opt.m[i].clone())?));
            tensors.push((format!("adam_v.{name}"), Tensor::new(shape, self.opt.v[i].clone())?));
        }
        let meta = vec![
            ("step".into(), self.step.to_string()),
            ("epoch".into(), self.epoch.to_string()),
            ("cursor".into(), self.cursor.to_string()),
            ("adam_t".into(), self.opt.t.to_string()),
            ("best_miou".into(), self.best_miou.map_or("none".into(), |v| format!("{v:?}"))),
            ("precision".into(), S::DTYPE.name().into()),
        ];
        Ok(Checkpoint { tensors, meta })
    }

    /// Writes tensors and counters plus `model.toml` and `train.toml`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.to_checkpoint()?.save(dir)?;
        write_toml(&dir.join(MODEL_TOML), &self.model.cfg)?;
        write_toml(&dir.join(TRAIN_TOML), &self.cfg)
    }

    /// Restores a trainer. `cfg` replaces the stored training settings when given.
    pub fn load(dir: &Path, cfg: Option<TrainConfig>) -> Result<Self> {
        let ck = Checkpoint::<S>::load(dir)?;
        let model_cfg: ModelConfig = read_toml(&dir.join(MODEL_TOML))?;
        let cfg = match cfg {
            Some(c) => c,
            None => read_toml(&dir.join(TRAIN_TOML))?,
        };
        let mut t = Trainer::new(model_cfg, cfg)?;
        t.model.store.load_from(&ck, "")?;
        for (i, name) in t.model.store.names().to_vec().iter().enumerate() {
            for (prefix, slot) in [("adam_m.", &mut t.opt.m[i]), ("adam_v.", &mut t.opt.v[i])] {
                let src = ck
                    .tensor(&format!("{prefix}{name}"))
                    .ok_or_else(|| Error::Config(format!("checkpoint lacks optimiser state for {name}")))?;
                if src.numel() != slot.len() {
                    return Err(Error::Config(format!("optimiser state for {name} has the wrong size")));
                }
                slot.copy_from_slice(src.data());
            }
        }
        let num = |key: &str| -> Result<u64> {
            ck.meta(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Config(format!("checkpoint meta {key} missing or malformed")))
        };
        t.step = num("step")?;
        t.epoch = num("epoch")? as usize;
        t.cursor = num("cursor")? as usize;
        t.opt.t = num("adam_t")?;
        t.best_miou = ck.meta("best_miou").and_then(|v| v.parse().ok());
        Ok(t)
    }
}

/// Loads only the model from a checkpoint directory.
pub fn load_model<S: Scalar>(dir: &Path) -> Result<TeethSeg<S>> {
    let ck = Checkpoint::<S>::load(dir)?;
    let cfg: ModelConfig = read_toml(&dir.join(MODEL_TOML))?;
    let mut model = TeethSeg::new(cfg)?;
    model.store.load_from(&ck, "")?;
    Ok(model)
}

pub fn evaluate<S: Scalar>(model: &TeethSeg<S>, scenes: &[LabeledScene], mode: Aggregation) -> Result<IoUReport> {
    let mut acc = IoUAccumulator::new(mode);
    for s in scenes {
        if s.image.shape() != model.image_shape() {
            return Err(Error::Config(format!(
                "scene image {:?} does not match model input {:?}",
                s.image.shape(),
                model.image_shape()
            )));
        }
        let pred = model.predict(&s.image.cast())?;
        acc.add(&pred, &s.labels)?;
    }
    Ok(acc.report())
}

/// What `fit` did.
#[derive(Clone, Debug)]
pub struct FitSummary {
    pub steps: u64,
    pub epochs: usize,
    pub best_val_miou: Option<f64>,
    pub wall_ms: u128,
}

/// Output files written by [`fit`] under its output directory.
pub const TRAIN_LOG: &str = "train_log.csv";
pub const VAL_LOG: &str = "val_log.csv";
pub const LAST_CHECKPOINT: &str = "checkpoint_last";
pub const BEST_CHECKPOINT: &str = "checkpoint_best";

fn append(path: &Path, line: &str, header: &str) -> Result<()> {
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if fresh {
        writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    }
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Runs epochs until the epoch count, step budget or target mIoU is reached.
/// Logs every step, validates and checkpoints after every epoch, and keeps
/// the best-validation checkpoint.
pub fn fit<S: Scalar>(
    trainer: &mut Trainer<S>,
    train: &[LabeledScene],
    val: &[LabeledScene],
    out: &Path,
    method: &str,
) -> Result<FitSummary> {
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let started = Instant::now();
    let log = out.join(TRAIN_LOG);
    let val_log = out.join(VAL_LOG);
    let mut stop = false;
    while trainer.epoch < trainer.cfg.epochs && !stop {
        while let Some(idx) = trainer.next_batch(train.len()) {
            let batch: Vec<&LabeledScene> = idx.iter().map(|&i| &train[i]).collect();
            let loss = match trainer.train_step(&batch) {
                Ok(l) => l,
                Err(e @ Error::Numeric(_)) => {
                    dump_diagnostics(trainer, &out.join("nan_dump.txt"), &e)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let row = LogRow {
                step: trainer.step,
                loss,
                lr: trainer.opt.lr,
                wall_ms: started.elapsed().as_millis(),
            };
            append(&log, &row.csv(), TRAIN_LOG_HEADER)?;
            if trainer.cfg.checkpoint_every > 0 && trainer.step % trainer.cfg.checkpoint_every == 0 {
                trainer.save(&out.join(LAST_CHECKPOINT))?;
            }
            if trainer.budget_exhausted() {
                stop = true;
                break;
            }
        }
        if !stop {
            trainer.finish_epoch();
        }
        let epoch_label = if stop {
            format!("{}+{}", trainer.epoch, trainer.cursor)
        } else {
            trainer.epoch.to_string()
        };
        if !val.is_empty() {
            let report = trainer.evaluate(val)?;
            append(&val_log, &report.csv_row(method, &epoch_label), IoUReport::CSV_HEADER)?;
            if let Some(m) = report.miou {
                if trainer.best_miou.is_none_or(|b| m > b) {
                    trainer.best_miou = Some(m);
                    trainer.save(&out.join(BEST_CHECKPOINT))?;
                }
                if trainer.cfg.stop_at_miou > 0.0 && m >= trainer.cfg.stop_at_miou {
                    stop = true;
                }
            }
        }
        trainer.save(&out.join(LAST_CHECKPOINT))?;
    }
    Ok(FitSummary {
        steps: trainer.step,
        epochs: trainer.epoch,
        best_val_miou: trainer.best_miou,
        wall_ms: started.elapsed().as_millis(),
    })
}

fn dump_diagnostics<S: Scalar>(trainer: &Trainer<S>, path: &Path, err: &Error) -> Result<()> {
    let mut text = format!("error: {err}\nstep: {}\nepoch: {}\n", trainer.step, trainer.epoch);
    text.push_str("parameter,max_abs_value,max_abs_grad,finite\n");
    for (name, t) in trainer.model.store.iter() {
        let max_v = t.data().iter().map(|x| x.f64().abs()).fold(0.0, f64::max);
        let (max_g, finite) = t.grad.as_ref().map_or((0.0, true), |g| {
            (
                g.iter().map(|x| x.f64().abs()).fold(0.0, f64::max),
                g.iter().all(|x| x.is_finite()),
            )
        });
        text.push_str(&format!("{name},{max_v:e},{max_g:e},{finite}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub const MODEL_TOML: &str = "model.toml";
pub const TRAIN_TOML: &str = "train.toml";

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
}
