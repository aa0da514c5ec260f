//! Adam optimization, the epoch loop and checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::tensor_io::{read_archive, write_archive};
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossConfig};
use crate::model::{Model, ModelConfig, PrsaNet, Sample};
use crate::nn::{ParamKind, Params, ParamsExt};
use crate::prslot::Mode;
use crate::rng::substream;

/// Piecewise-constant learning rate: `(lr, epochs)` stages in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub stages: Vec<(f64, usize)>,
}

impl LrSchedule {
    /// 2e-4 for 10 epochs.
    pub fn thumos() -> Self {
        Self {
            stages: vec![(2e-4, 10)],
        }
    }

    /// 1e-3 for 7 epochs, then 1e-4 for 3.
    pub fn anet() -> Self {
        Self {
            stages: vec![(1e-3, 7), (1e-4, 3)],
        }
    }

    pub fn constant(lr: f64, epochs: usize) -> Self {
        Self {
            stages: vec![(lr, epochs)],
        }
    }

    pub fn epochs(&self) -> usize {
        self.stages.iter().map(|s| s.1).sum()
    }

    /// Rate for zero-based `epoch`; the last stage extends past the end.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut acc = 0;
        for &(lr, n) in &self.stages {
            acc += n;
            if epoch < acc {
                return lr;
            }
        }
        self.stages.last().map_or(0.0, |s| s.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty()
            || self
                .stages
                .iter()
                .any(|&(lr, _)| !(lr >= 0.0 && lr.is_finite()))
        {
            return Err(Error::invalid(
                "learning-rate schedule needs non-negative finite rates",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub losses: LossConfig,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            losses: LossConfig::default(),
            schedule: LrSchedule::thumos(),
            batch_size: 8,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        let l = &self.losses;
        if !(l.lambda >= 0.0 && l.lambda_c >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        self.schedule.validate()
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam over the flattened trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
}

/// Progress to resume from.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub adam: Adam,
}

impl TrainState {
    pub fn fresh(model: &Model) -> Self {
        Self {
            epoch: 0,
            step: 0,
            adam: Adam::new(model.net.num_trainable()),
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_b")]
    pub boundary: f64,
    #[serde(rename = "L_cls")]
    pub cls: f64,
    #[serde(rename = "L_com")]
    pub com: f64,
    #[serde(rename = "L_norm")]
    pub norm: f64,
    pub total: f64,
    pub wall_time_s: f64,
}

/// Sample order for a zero-based epoch; depends only on seed and epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, &format!("shuffle/epoch{epoch}")));
    order
}

/// One optimizer step on a batch; returns the pre-step training loss.
pub fn train_step(
    model: &mut Model,
    state: &mut TrainState,
    batch: &[Sample],
    losses: &LossConfig,
    lr: f64,
) -> Result<LossBreakdown> {
    let out = model.loss_and_grad(batch, losses, Mode::Train)?;
    let step = state.step + 1;
    let grads = out.grad.flat_trainable();
    if !out.loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged { step });
    }
    let mut theta = model.net.flat_trainable();
    state.adam.step(&mut theta, &grads, lr);
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged { step });
    }
    model.net.set_flat_trainable(&theta);
    model.net.prslot.commit_stats(&out.cache);
    state.step = step;
    Ok(out.loss)
}

/// Runs one epoch and returns its mean losses (weighted by batch size).
pub fn train_epoch(
    model: &mut Model,
    state: &mut TrainState,
    samples: &[Sample],
    config: &TrainConfig,
) -> Result<EpochRecord> {
    let started = Instant::now();
    let epoch = state.epoch;
    let lr = config.schedule.lr_at(epoch);
    let order = epoch_order(config.seed, epoch, samples.len());
    let mut acc = [0.0f64; 5];
    for chunk in order.chunks(config.batch_size) {
        let batch: Vec<Sample> = chunk.iter().map(|&i| samples[i].clone()).collect();
        let l = train_step(model, state, &batch, &config.losses, lr)?;
        let w = chunk.len() as f64 / samples.len() as f64;
        for (a, v) in acc
            .iter_mut()
            .zip([l.boundary, l.cls, l.com, l.norm, l.total])
        {
            *a += w * v;
        }
    }
    state.epoch += 1;
    Ok(EpochRecord {
        epoch: state.epoch,
        boundary: acc[0],
        cls: acc[1],
        com: acc[2],
        norm: acc[3],
        total: acc[4],
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// Trains until the schedule is exhausted, calling `on_epoch` after each
/// epoch (for logging or checkpointing).
pub fn train(
    model: &mut Model,
    samples: &[Sample],
    config: &TrainConfig,
    state: &mut TrainState,
    on_epoch: &mut dyn FnMut(&Model, &TrainState, &EpochRecord) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut log = Vec::new();
    while state.epoch < config.schedule.epochs() {
        let rec = train_epoch(model, state, samples, config)?;
        on_epoch(model, state, &rec)?;
        log.push(rec);
    }
    Ok(log)
}

/// Appends one JSON line per epoch.
pub struct JsonLog {
    path: PathBuf,
    file: std::fs::File,
}

impl JsonLog {
    pub fn create(path: &Path, append: bool) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn write(&mut self, rec: &EpochRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("epoch record serializes");
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub epoch: usize,
    pub step: usize,
    pub seed: u64,
    pub adam_t: u64,
}

/// `<stem>.bin` holds tensors, `<stem>.json` the metadata.
pub fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("bin"), path.with_extension("json"))
}

pub fn save_checkpoint(path: &Path, model: &Model, state: &TrainState, seed: u64) -> Result<()> {
    let (bin, meta_path) = checkpoint_paths(path);
    let mut tensors: Vec<(String, Array2<f64>)> = Vec::new();
    model.net.visit("", &mut |name, v, _| {
        tensors.push((name.to_string(), v.to_owned()))
    });
    tensors.push((
        "adam.m".into(),
        Array2::from_shape_vec((1, state.adam.m.len()), state.adam.m.clone()).unwrap(),
    ));
    tensors.push((
        "adam.v".into(),
        Array2::from_shape_vec((1, state.adam.v.len()), state.adam.v.clone()).unwrap(),
    ));
    write_archive(&bin, tensors.iter().map(|(n, m)| (n.as_str(), m)))?;
    let meta = CheckpointMeta {
        model: model.config.clone(),
        epoch: state.epoch,
        step: state.step,
        seed,
        adam_t: state.adam.t,
    };
    crate::data::annotations::write_json(&meta_path, &meta)
}

pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let (_, meta_path) = checkpoint_paths(path);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: meta_path,
        source,
    })
}

/// Loads tensors into a network built from `config`. Every parameter must be
/// present with the expected shape; the first mismatch is reported by name.
pub fn load_weights(path: &Path, config: &ModelConfig) -> Result<(Model, Option<Adam>)> {
    let (bin, _) = checkpoint_paths(path);
    let tensors = read_archive(&bin)?;
    let lookup: std::collections::HashMap<&str, &Array2<f64>> =
        tensors.iter().map(|(n, m)| (n.as_str(), m)).collect();
    let mut net = PrsaNet::init(config, 0);
    let mut failure: Option<Error> = None;
    net.visit_mut("", &mut |name, mut v, _| {
        if failure.is_some() {
            return;
        }
        match lookup.get(name) {
            None => {
                failure = Some(Error::CheckpointMismatch {
                    name: name.to_string(),
                    reason: "is missing from the checkpoint".into(),
                })
            }
            Some(m) if m.dim() != v.dim() => {
                failure = Some(Error::CheckpointMismatch {
                    name: name.to_string(),
                    reason: format!(
                        "has shape {:?} in the checkpoint but {:?} in the model",
                        m.dim(),
                        v.dim()
                    ),
                })
            }
            Some(m) => v.assign(m),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let mut names = std::collections::HashSet::new();
    net.visit("", &mut |n, _, _| {
        names.insert(n.to_string());
    });
    if let Some((extra, _)) = tensors
        .iter()
        .find(|(n, _)| !names.contains(n) && !n.starts_with("adam."))
    {
        return Err(Error::CheckpointMismatch {
            name: extra.clone(),
            reason: "is not a parameter of the configured model".into(),
        });
    }
    let n = net.num_trainable();
    let adam = match (lookup.get("adam.m"), lookup.get("adam.v")) {
        (Some(m), Some(v)) if m.len() == n && v.len() == n => Some(Adam {
            m: m.iter().copied().collect(),
            v: v.iter().copied().collect(),
            t: 0,
        }),
        _ => None,
    };
    Ok((Model::from_parts(config.clone(), net), adam))
}

/// Restores model and optimizer state for resuming training.
pub fn load_checkpoint(path: &Path) -> Result<(Model, TrainState, CheckpointMeta)> {
    let meta = read_checkpoint_meta(path)?;
    let (model, adam) = load_weights(path, &meta.model)?;
    let mut adam = adam.ok_or_else(|| Error::format(path, "checkpoint lacks optimizer state"))?;
    adam.t = meta.adam_t;
    let state = TrainState {
        epoch: meta.epoch,
        step: meta.step,
        adam,
    };
    Ok((model, state, meta))
}

/// Number of trainable scalars, split by kind, for reporting.
pub fn parameter_count(net: &PrsaNet) -> (usize, usize) {
    let (mut t, mut b) = (0, 0);
    net.visit("", &mut |_, v, k| match k {
        ParamKind::Trainable => t += v.len(),
        ParamKind::Buffer => b += v.len(),
    });
    (t, b)
}
