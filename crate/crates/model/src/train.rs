//! Mini-batch training with Adam on the multi-resolution STFT objective.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use vah_core::context::{read_cfm, ContextFeatureMatrix, ContextStream};
use vah_core::corpus::{ClipRecord, Manifest, Split};
use vah_core::seed::rng_for;
use vah_fabric::{AdamConfig, Tape};

use crate::checkpoint::save_checkpoint;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::net::{build_model, Model};

/// One training pair held in memory.
#[derive(Debug, Clone)]
pub struct Example {
    pub clip_id: String,
    pub input: Vec<f32>,
    pub target: Vec<f32>,
    /// In the order the model config lists its context streams.
    pub contexts: Vec<ContextFeatureMatrix>,
}

impl Example {
    pub fn context_refs(&self) -> Vec<&ContextFeatureMatrix> {
        self.contexts.iter().collect()
    }

    pub fn load(record: &ClipRecord, root: &Path, config: &ModelConfig) -> Result<Self> {
        let input = record.load_input(root)?;
        let target = record.load_gt(root)?;
        if input.sample_rate() != config.sample_rate {
            return Err(Error::Input(format!(
                "clip {} is at {} Hz, model expects {} Hz",
                record.clip_id,
                input.sample_rate(),
                config.sample_rate
            )));
        }
        let contexts = config
            .contexts
            .iter()
            .map(|c| {
                let rel = match c.stream {
                    ContextStream::Vision => &record.paths.context_vid,
                    ContextStream::Text => &record.paths.context_text,
                };
                read_cfm(root.join(rel))
            })
            .collect::<vah_core::Result<_>>()?;
        let to_f32 = |s: &[f64]| s.iter().map(|v| *v as f32).collect();
        Ok(Self {
            clip_id: record.clip_id.clone(),
            input: to_f32(input.samples()),
            target: to_f32(target.samples()),
            contexts,
        })
    }
}

pub fn load_examples(manifest: &Manifest, split: Split, config: &ModelConfig) -> Result<Vec<Example>> {
    manifest.split(split).map(|r| Example::load(r, &manifest.root, config)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Stops early after this many optimiser steps.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-4, batch: 4, epochs: 50, seed: 0, max_steps: None }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and nonnegative", self.lr)));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("batch and epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Owns a model and its optimiser state.
pub struct Trainer {
    pub model: Model<f32>,
    adam: AdamConfig,
}

impl Trainer {
    pub fn new(model: Model<f32>, lr: f64) -> Self {
        Self { model, adam: AdamConfig { lr, ..AdamConfig::default() } }
    }

    pub fn step_count(&self) -> u64 {
        self.model.store.step()
    }

    /// One Adam step on the mean loss of `batch`; returns that mean loss.
    pub fn step(&mut self, batch: &[&Example]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let step = self.step_count() + 1;
        self.model.store.zero_grad();
        let mut total = 0.0;
        for ex in batch {
            let mut tape = Tape::new();
            let loss = self.model.loss_on_tape(&mut tape, &ex.input, &ex.target, &ex.context_refs())?;
            let value = f64::from(tape.value(loss).item());
            if !value.is_finite() {
                let detail = tape.first_non_finite().unwrap_or_else(|| "loss".into());
                return Err(Error::NonFinite { step, detail });
            }
            total += value;
            let grads = tape.backward(loss)?;
            grads.accumulate_into(&tape, &mut self.model.store);
        }
        if !self.model.store.grad_norm().is_finite() {
            return Err(Error::NonFinite { step, detail: "parameter gradients".into() });
        }
        self.model.store.scale_grads(1.0 / batch.len() as f32);
        self.model.store.adam_step(&self.adam);
        Ok(total / batch.len() as f64)
    }

    /// Mean loss over `examples` without updating anything.
    pub fn eval_loss(&self, examples: &[Example]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Input("no examples to evaluate".into()));
        }
        let mut total = 0.0;
        for ex in examples {
            let mut tape = Tape::new();
            let loss = self.model.loss_on_tape(&mut tape, &ex.input, &ex.target, &ex.context_refs())?;
            total += f64::from(tape.value(loss).item());
        }
        Ok(total / examples.len() as f64)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: u64,
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub best_val: f64,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// Trains on in-memory examples, writing a JSONL log and checkpoints into `out_dir`.
pub fn train_examples(
    model: Model<f32>,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<(Model<f32>, TrainSummary)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("the training split is empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(TRAIN_LOG);
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut write_log = |rec: &LogRecord| -> Result<()> {
        let line = serde_json::to_string(rec).expect("log record serialises");
        writeln!(log, "{line}").and_then(|_| log.flush()).map_err(|e| Error::io(&log_path, e))
    };
    let started = Instant::now();
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let mut trainer = Trainer::new(model, cfg.lr);
    let mut train_losses = Vec::new();
    let mut val_losses = Vec::new();
    let mut best = f64::INFINITY;
    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_for(cfg.seed, &format!("shuffle/{epoch}")));
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch) {
            if cfg.max_steps.is_some_and(|m| trainer.step_count() >= m) {
                break;
            }
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let loss = trainer.step(&batch)?;
            train_losses.push(loss);
            epoch_loss += loss;
            batches += 1;
            write_log(&LogRecord {
                step: trainer.step_count(),
                epoch,
                split: "train".into(),
                loss,
                wall_time_s: started.elapsed().as_secs_f64(),
            })?;
        }
        if batches == 0 {
            break 'epochs;
        }
        let val_loss = if val.is_empty() { epoch_loss / batches as f64 } else { trainer.eval_loss(val)? };
        val_losses.push(val_loss);
        write_log(&LogRecord {
            step: trainer.step_count(),
            epoch,
            split: if val.is_empty() { "train_epoch".into() } else { "val".into() },
            loss: val_loss,
            wall_time_s: started.elapsed().as_secs_f64(),
        })?;
        log::info!("epoch {epoch}: step {} val loss {val_loss:.5}", trainer.step_count());
        if val_loss < best {
            best = val_loss;
            save_checkpoint(&best_path, &trainer.model)?;
        }
    }
    save_checkpoint(&last_path, &trainer.model)?;
    if !best_path.exists() {
        save_checkpoint(&best_path, &trainer.model)?;
    }
    let summary = TrainSummary {
        steps: trainer.step_count(),
        train_losses,
        val_losses,
        best_val: best,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
    };
    Ok((trainer.model, summary))
}

/// Builds a model from `model_cfg` and trains it on a manifest's train split,
/// selecting on the validation split.
pub fn train(
    manifest: &Manifest,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<(Model<f32>, TrainSummary)> {
    cfg.validate()?;
    let model = build_model::<f32>(model_cfg, cfg.seed)?;
    let train = load_examples(manifest, Split::Train, model_cfg)?;
    let val = load_examples(manifest, Split::Val, model_cfg)?;
    log::info!("training on {} clips, validating on {}", train.len(), val.len());
    train_examples(model, &train, &val, cfg, out_dir)
}
