//! Training loop, optimizers, configuration and checkpoints.
//!
//! Mini-batch order is a pure function of `train.seed` and the epoch number;
//! the loop itself is single-threaded, so identical configurations give
//! identical histories and checkpoints.

use std::fmt::Write as _;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;
use sha2::{Digest, Sha256};

use crate::camera_geometry::CropRect;
use crate::config::KvConfig;
use crate::data_pipeline::{
    load_manifest, parse_ratios, split_dataset, window_sequences, DatasetSplit, FrameStore, ModelInputs,
    SequenceWindow,
};
use crate::error::{invalid, Error, Result};
use crate::evaluation;
use crate::losses::{loss_gradient, loss_value, LossConfig, LossFamily};
use crate::network::{build_model, FrameInput, ModelConfig, Parameters, SteeringModel, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Adaptive moments; weight decay is added to the gradient.
    Adam,
    /// Adaptive moments with decoupled weight decay.
    AdamW,
    Sgd,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::Sgd => "sgd",
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "adamw" => Ok(OptimizerKind::AdamW),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(invalid(format!("unknown optimizer {other:?} (expected adam, adamw, sgd)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Where and how to read a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub stride: usize,
    /// `None` keeps each drive's full frame.
    pub crop: Option<CropRect>,
    pub split: Vec<f64>,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            stride: 1,
            crop: None,
            split: vec![0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig<f64>,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    /// Global gradient norm bound; infinity disables clipping.
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Stop after the first evaluation whose validation loss is below this.
    pub early_stop_loss: Option<f64>,
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    /// Threads for loading and evaluation; training itself is sequential.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 16,
            max_steps: 1000,
            eval_every: 100,
            grad_clip_norm: 1.0,
            seed: 0,
            early_stop_loss: None,
            output_dir: None,
            data: DataConfig::default(),
            workers: 1,
        }
    }
}

/// Every key [`TrainConfig::from_kv`] understands. Keys under
/// [`IGNORED_PREFIXES`] are accepted and skipped.
pub const CONFIG_KEYS: &[&str] = &[
    "model.in_channels",
    "model.seq_len",
    "model.lstm_hidden",
    "model.lstm_layers",
    "model.inject_at",
    "model.fc_dim",
    "loss.family",
    "loss.alpha",
    "loss.gamma",
    "loss.delta",
    "optim.name",
    "optim.learning_rate",
    "optim.weight_decay",
    "optim.beta1",
    "optim.beta2",
    "optim.eps",
    "train.batch_size",
    "train.max_steps",
    "train.eval_every",
    "train.grad_clip_norm",
    "train.seed",
    "train.early_stop_loss",
    "train.output_dir",
    "train.workers",
    "data.manifest",
    "data.seq_len",
    "data.stride",
    "data.crop",
    "data.split",
    "data.seed",
];

/// Dataset recipes, run locks and checkpoint metadata share the configuration format.
pub const IGNORED_PREFIXES: &[&str] = &["synth.", "lock.", "args.", "checkpoint."];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        LossConfig::new(self.loss.family, self.loss.alpha, self.loss.gamma, self.loss.delta)?;
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err(invalid(format!("optim.learning_rate must be positive (got {})", o.learning_rate)));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return Err(invalid("optim.weight_decay must be non-negative"));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(invalid("optim.beta1/beta2 must lie in [0, 1) and optim.eps must be positive"));
        }
        if self.batch_size == 0 || self.max_steps == 0 || self.eval_every == 0 {
            return Err(invalid("train.batch_size, train.max_steps and train.eval_every must be at least 1"));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(invalid("train.grad_clip_norm must be positive"));
        }
        if self.data.stride == 0 {
            return Err(invalid("data.stride must be at least 1"));
        }
        Ok(())
    }

    /// Reads a configuration over the defaults. `data.seq_len` is an alias of
    /// `model.seq_len`; giving both with different values is an error.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        for (k, _) in kv.iter() {
            if !CONFIG_KEYS.contains(&k) && !IGNORED_PREFIXES.iter().any(|p| k.starts_with(p)) {
                return Err(Error::Config(format!("unknown configuration key {k:?}")));
            }
        }
        let d = Self::default();
        let mut model = ModelConfig::from_kv(kv)?;
        let data_seq: Option<usize> = kv.parsed("data.seq_len")?;
        match (kv.contains("model.seq_len"), data_seq) {
            (true, Some(s)) if s != model.seq_len => {
                return Err(Error::Config(format!(
                    "data.seq_len={s} disagrees with model.seq_len={}",
                    model.seq_len
                )))
            }
            (false, Some(s)) => model.seq_len = s,
            _ => {}
        }
        model.validate()?;
        let family = kv.parsed::<LossFamily>("loss.family")?.unwrap_or(d.loss.family);
        let loss = LossConfig::new(
            family,
            kv.parsed("loss.alpha")?.unwrap_or(1.0),
            kv.parsed("loss.gamma")?.unwrap_or(1.0),
            kv.parsed("loss.delta")?,
        )?;
        let od = OptimizerConfig::default();
        let optimizer = OptimizerConfig {
            kind: kv.parsed("optim.name")?.unwrap_or(od.kind),
            learning_rate: kv.parsed("optim.learning_rate")?.unwrap_or(od.learning_rate),
            weight_decay: kv.parsed("optim.weight_decay")?.unwrap_or(od.weight_decay),
            beta1: kv.parsed("optim.beta1")?.unwrap_or(od.beta1),
            beta2: kv.parsed("optim.beta2")?.unwrap_or(od.beta2),
            eps: kv.parsed("optim.eps")?.unwrap_or(od.eps),
        };
        let dd = DataConfig::default();
        let data = DataConfig {
            manifest: kv.get("data.manifest").filter(|s| !s.is_empty()).map(PathBuf::from),
            stride: kv.parsed("data.stride")?.unwrap_or(dd.stride),
            crop: kv.get("data.crop").filter(|s| !s.is_empty()).map(CropRect::parse).transpose()?,
            split: kv.get("data.split").map(parse_ratios).transpose()?.unwrap_or(dd.split),
            seed: kv.parsed("data.seed")?.unwrap_or(dd.seed),
        };
        let cfg = Self {
            model,
            loss,
            optimizer,
            batch_size: kv.parsed("train.batch_size")?.unwrap_or(d.batch_size),
            max_steps: kv.parsed("train.max_steps")?.unwrap_or(d.max_steps),
            eval_every: kv.parsed("train.eval_every")?.unwrap_or(d.eval_every),
            grad_clip_norm: kv.parsed("train.grad_clip_norm")?.unwrap_or(d.grad_clip_norm),
            seed: kv.parsed("train.seed")?.unwrap_or(d.seed),
            early_stop_loss: kv.parsed("train.early_stop_loss")?,
            output_dir: kv.get("train.output_dir").filter(|s| !s.is_empty()).map(PathBuf::from),
            data,
            workers: kv.parsed("train.workers")?.unwrap_or(d.workers),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fully resolved configuration; `from_kv(to_kv())` is the identity.
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        self.model.write_kv(&mut kv);
        kv.set("data.seq_len", self.model.seq_len);
        kv.set("loss.family", self.loss.family);
        kv.set("loss.alpha", fmt_f64(self.loss.alpha));
        kv.set("loss.gamma", fmt_f64(self.loss.gamma));
        if let Some(delta) = self.loss.delta {
            kv.set("loss.delta", fmt_f64(delta));
        }
        let o = &self.optimizer;
        kv.set("optim.name", o.kind);
        kv.set("optim.learning_rate", fmt_f64(o.learning_rate));
        kv.set("optim.weight_decay", fmt_f64(o.weight_decay));
        kv.set("optim.beta1", fmt_f64(o.beta1));
        kv.set("optim.beta2", fmt_f64(o.beta2));
        kv.set("optim.eps", fmt_f64(o.eps));
        kv.set("train.batch_size", self.batch_size);
        kv.set("train.max_steps", self.max_steps);
        kv.set("train.eval_every", self.eval_every);
        kv.set("train.grad_clip_norm", fmt_f64(self.grad_clip_norm));
        kv.set("train.seed", self.seed);
        if let Some(l) = self.early_stop_loss {
            kv.set("train.early_stop_loss", fmt_f64(l));
        }
        kv.set("train.workers", self.workers);
        if let Some(dir) = &self.output_dir {
            kv.set("train.output_dir", dir.display());
        }
        if let Some(m) = &self.data.manifest {
            kv.set("data.manifest", m.display());
        }
        kv.set("data.stride", self.data.stride);
        if let Some(c) = &self.data.crop {
            kv.set("data.crop", c);
        }
        let split: Vec<String> = self.data.split.iter().map(|r| fmt_f64(*r)).collect();
        kv.set("data.split", split.join(","));
        kv.set("data.seed", self.data.seed);
        kv
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// A loaded dataset with its drive split and windows per split.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub store: FrameStore,
    pub split: DatasetSplit,
    pub fingerprint: String,
    pub train: Vec<SequenceWindow>,
    pub val: Vec<SequenceWindow>,
    pub test: Vec<SequenceWindow>,
}

impl PreparedData {
    /// Windows every split from `store` with the given drive partition.
    pub fn from_store(store: FrameStore, split: DatasetSplit, seq_len: usize, stride: usize) -> Result<Self> {
        let all = window_sequences(&store.drives, seq_len, stride)?;
        let pick = |part: &[usize]| -> Vec<SequenceWindow> {
            all.iter().filter(|w| part.contains(&w.drive)).cloned().collect()
        };
        let (train, val, test) = (pick(&split.train), pick(&split.val), pick(&split.test));
        let fingerprint = split.fingerprint(&store.drives);
        Ok(Self {
            store,
            split,
            fingerprint,
            train,
            val,
            test,
        })
    }

    /// Loads `cfg.data.manifest`, splits drives with `data.seed` and windows them.
    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        let manifest = cfg
            .data
            .manifest
            .as_ref()
            .ok_or_else(|| Error::Config("data.manifest is not set".into()))?;
        let drives = load_manifest(manifest)?;
        let split = split_dataset(&drives, &cfg.data.split, cfg.data.seed)?;
        let store = FrameStore::load(&drives, cfg.data.crop.as_ref(), cfg.workers)?;
        Self::from_store(store, split, cfg.model.seq_len, cfg.data.stride)
    }

    /// Test windows when the test split is non-empty, otherwise validation windows.
    pub fn held_out(&self) -> &[SequenceWindow] {
        if self.test.is_empty() {
            &self.val
        } else {
            &self.test
        }
    }
}

/// Distinct frames of a group of windows, converted to network input.
pub struct WindowBatch<T> {
    pixels: Vec<Vec<T>>,
    drives: Vec<usize>,
    pub windows: Vec<Vec<usize>>,
}

impl<T: Scalar> WindowBatch<T> {
    pub fn assemble(store: &FrameStore, inputs: &ModelInputs<T>, windows: &[&SequenceWindow]) -> Self {
        let mut index = std::collections::HashMap::new();
        let mut pixels = Vec::new();
        let mut drives = Vec::new();
        let mut local = Vec::with_capacity(windows.len());
        for w in windows {
            let mut idx = Vec::with_capacity(w.seq_len);
            for f in w.frame_range() {
                let slot = *index.entry((w.drive, f)).or_insert_with(|| {
                    pixels.push(store.frame_pixels(inputs, w.drive, f));
                    drives.push(w.drive);
                    pixels.len() - 1
                });
                idx.push(slot);
            }
            local.push(idx);
        }
        Self {
            pixels,
            drives,
            windows: local,
        }
    }

    pub fn frames<'a>(&'a self, inputs: &'a ModelInputs<T>) -> Vec<FrameInput<'a, T>> {
        self.pixels
            .iter()
            .zip(&self.drives)
            .map(|(p, &d)| match &inputs.fusion[d] {
                Some(maps) => FrameInput::with_fusion(p, maps),
                None => FrameInput::new(p),
            })
            .collect()
    }
}

/// First-order optimizer state over a parameter set.
pub struct Optimizer<T> {
    cfg: OptimizerConfig,
    step: i32,
    m: Parameters<T>,
    v: Parameters<T>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig, params: &Parameters<T>) -> Self {
        Self {
            cfg,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut Parameters<T>, grads: &Parameters<T>) {
        self.step += 1;
        let c = &self.cfg;
        let lr = T::from_f64_lossy(c.learning_rate);
        let wd = T::from_f64_lossy(c.weight_decay);
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let eps = T::from_f64_lossy(c.eps);
        let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(self.step));
        let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(self.step));
        let one = T::one();
        for (((p, g), m), v) in params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(&mut self.m.tensors)
            .zip(&mut self.v.tensors)
        {
            for i in 0..p.data.len() {
                let mut gi = g.data[i];
                let pi = p.data[i];
                match c.kind {
                    OptimizerKind::Sgd => {
                        p.data[i] = pi - lr * (gi + wd * pi);
                        continue;
                    }
                    OptimizerKind::Adam => gi += wd * pi,
                    OptimizerKind::AdamW => p.data[i] = pi - lr * wd * pi,
                }
                m.data[i] = b1 * m.data[i] + (one - b1) * gi;
                v.data[i] = b2 * v.data[i] + (one - b2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut Parameters<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm().as_f64();
    if norm > max_norm && max_norm.is_finite() {
        grads.scale(T::from_f64_lossy(max_norm / norm));
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Before clipping.
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub sd: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainHistory {
    /// `step,split,metric,value` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,split,metric,value\n");
        let mut e = self.evals.iter().peekable();
        for r in &self.steps {
            let _ = writeln!(s, "{},train,loss,{:?}", r.step, r.loss);
            let _ = writeln!(s, "{},train,grad_norm,{:?}", r.step, r.grad_norm);
            let _ = writeln!(s, "{},train,seconds,{:?}", r.step, r.seconds);
            while let Some(ev) = e.next_if(|ev| ev.step == r.step) {
                let _ = writeln!(s, "{},val,loss,{:?}", ev.step, ev.loss);
                let _ = writeln!(s, "{},val,accuracy,{:?}", ev.step, ev.accuracy);
                let _ = writeln!(s, "{},val,sd,{:?}", ev.step, ev.sd);
                let _ = writeln!(s, "{},val,mae,{:?}", ev.step, ev.mae);
            }
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut h = TrainHistory::default();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: &str| Error::Format {
                line: n + 1,
                message: format!("{m}: {line:?}"),
            };
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(bad("expected step,split,metric,value"));
            }
            let step: usize = parts[0].parse().map_err(|_| bad("bad step"))?;
            let value: f64 = parts[3].parse().map_err(|_| bad("bad value"))?;
            match parts[1] {
                "train" => {
                    if h.steps.last().is_none_or(|r| r.step != step) {
                        h.steps.push(StepRecord {
                            step,
                            loss: f64::NAN,
                            grad_norm: f64::NAN,
                            seconds: f64::NAN,
                        });
                    }
                    let r = h.steps.last_mut().unwrap();
                    match parts[2] {
                        "loss" => r.loss = value,
                        "grad_norm" => r.grad_norm = value,
                        "seconds" => r.seconds = value,
                        _ => return Err(bad("unknown train metric")),
                    }
                }
                "val" => {
                    if h.evals.last().is_none_or(|r| r.step != step) {
                        h.evals.push(EvalRecord {
                            step,
                            loss: f64::NAN,
                            accuracy: f64::NAN,
                            sd: f64::NAN,
                            mae: f64::NAN,
                        });
                    }
                    let r = h.evals.last_mut().unwrap();
                    match parts[2] {
                        "loss" => r.loss = value,
                        "accuracy" => r.accuracy = value,
                        "sd" => r.sd = value,
                        "mae" => r.mae = value,
                        _ => return Err(bad("unknown val metric")),
                    }
                }
                _ => return Err(bad("unknown split")),
            }
        }
        Ok(h)
    }
}

pub struct TrainOutcome<T> {
    pub model: SteeringModel<T>,
    /// Highest validation accuracy, ties broken by lower validation loss.
    pub best: SteeringModel<T>,
    pub best_step: usize,
    pub history: TrainHistory,
}

impl<T> TrainOutcome<T> {
    pub fn steps_run(&self) -> usize {
        self.history.steps.len()
    }
}

/// Batch order of one epoch over `n` windows.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mix = seed ^ epoch.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03);
    order.shuffle(&mut SplitMix64::seed_from_u64(mix));
    order
}

fn check_windows(windows: &[SequenceWindow], seq_len: usize, what: &str) -> Result<()> {
    if windows.is_empty() {
        return Err(Error::Validation(format!("{what} set has no windows")));
    }
    if let Some(w) = windows.iter().find(|w| w.seq_len != seq_len) {
        return Err(Error::Config(format!(
            "{what} window of length {} does not match model.seq_len={seq_len}",
            w.seq_len
        )));
    }
    Ok(())
}

/// Trains a freshly initialized model (seeded by `train.seed`). With an
/// output directory, writes `best.ckpt`, `final.ckpt` and `history.csv` there.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    store: &FrameStore,
    train_set: &[SequenceWindow],
    val_set: &[SequenceWindow],
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let model = build_model::<T>(&cfg.model, cfg.seed)?;
    train_from(cfg, model, store, train_set, val_set)
}

/// Continues training `model` under `cfg`.
pub fn train_from<T: Scalar>(
    cfg: &TrainConfig,
    mut model: SteeringModel<T>,
    store: &FrameStore,
    train_set: &[SequenceWindow],
    val_set: &[SequenceWindow],
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if model.config() != &cfg.model {
        return Err(Error::Config("model does not match the training configuration".into()));
    }
    check_windows(train_set, cfg.model.seq_len, "training")?;
    check_windows(val_set, cfg.model.seq_len, "validation")?;
    let inputs = store.model_inputs::<T>(&cfg.model)?;
    let loss_cfg = LossConfig::<T>::new(
        cfg.loss.family,
        T::from_f64_lossy(cfg.loss.alpha),
        T::from_f64_lossy(cfg.loss.gamma),
        cfg.loss.delta.map(T::from_f64_lossy),
    )?;
    let mut opt = Optimizer::new(cfg.optimizer, model.parameters());
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, f64, usize, SteeringModel<T>)> = None;
    let mut epoch = 0u64;
    let mut order = epoch_order(cfg.seed, epoch, train_set.len());
    let mut cursor = 0;
    for step in 1..=cfg.max_steps {
        let started = Instant::now();
        if cursor >= order.len() {
            epoch += 1;
            order = epoch_order(cfg.seed, epoch, train_set.len());
            cursor = 0;
        }
        let ids: Vec<usize> = order[cursor..(cursor + cfg.batch_size).min(order.len())].to_vec();
        cursor += cfg.batch_size;
        let chosen: Vec<&SequenceWindow> = ids.iter().map(|&i| &train_set[i]).collect();
        let batch = WindowBatch::assemble(store, &inputs, &chosen);
        let frames = batch.frames(&inputs);
        let (preds, tape) = model.forward_train(&frames, &batch.windows)?;
        let truths: Vec<T> = chosen.iter().map(|w| T::from_f64_lossy(w.target)).collect();
        let non_finite = |loss: f64| {
            let err = Error::NonFinite {
                step,
                batch: ids.clone(),
                loss,
            };
            if let Some(dir) = &cfg.output_dir {
                let _ = std::fs::create_dir_all(dir);
                let _ = std::fs::write(dir.join("nonfinite.txt"), format!("{err}\n"));
            }
            err
        };
        if preds.iter().any(|p| !p.is_finite()) {
            return Err(non_finite(f64::NAN));
        }
        let loss = loss_value(&preds, &truths, &loss_cfg)?.as_f64();
        if !loss.is_finite() {
            return Err(non_finite(loss));
        }
        let grad_pred = loss_gradient(&preds, &truths, &loss_cfg)?;
        let mut grads = model.backward(tape, &grad_pred)?;
        if !grads.all_finite() {
            return Err(non_finite(loss));
        }
        let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip_norm);
        opt.step(model.parameters_mut(), &grads);
        history.steps.push(StepRecord {
            step,
            loss,
            grad_norm,
            seconds: started.elapsed().as_secs_f64(),
        });
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let report = evaluation::evaluate(&model, store, val_set, evaluation::DEFAULT_TOLERANCE_DEG, cfg.workers)?;
            let preds: Vec<T> = report.trace.iter().map(|t| T::from_f64_lossy(t.prediction)).collect();
            let truths: Vec<T> = report.trace.iter().map(|t| T::from_f64_lossy(t.truth)).collect();
            let val_loss = loss_value(&preds, &truths, &loss_cfg)?.as_f64();
            history.evals.push(EvalRecord {
                step,
                loss: val_loss,
                accuracy: report.accuracy,
                sd: report.sd,
                mae: report.mae,
            });
            let better = match &best {
                None => true,
                Some((acc, l, _, _)) => report.accuracy > *acc || (report.accuracy == *acc && val_loss < *l),
            };
            if better {
                best = Some((report.accuracy, val_loss, step, model.clone()));
            }
            if cfg.early_stop_loss.is_some_and(|l| val_loss < l) {
                break;
            }
        }
    }
    let last_step = history.steps.len();
    let (_, _, best_step, best_model) = best.expect("final step always evaluates");
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut meta = cfg.to_kv();
        meta.set("checkpoint.step", best_step);
        save_checkpoint_with_meta(&best_model, &meta, &dir.join("best.ckpt"))?;
        meta.set("checkpoint.step", last_step);
        save_checkpoint_with_meta(&model, &meta, &dir.join("final.ckpt"))?;
        let path = dir.join("history.csv");
        std::fs::write(&path, history.to_csv()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(TrainOutcome {
        model,
        best: best_model,
        best_step,
        history,
    })
}

const MAGIC: &[u8; 8] = b"OSTRCKPT";
const VERSION: u32 = 1;

/// Binary layout, little-endian: magic, `u32` version, `u64`-length-prefixed
/// configuration text (`model.*` plus metadata), `u32` dtype width (4 or 8),
/// `u32` tensor count, then per tensor a `u32`-length-prefixed name, `u32`
/// rank, `u64` dims and raw values; finally the SHA-256 of everything before it.
pub fn save_checkpoint<T: Scalar>(model: &SteeringModel<T>, path: &Path) -> Result<()> {
    save_checkpoint_with_meta(model, &KvConfig::new(), path)
}

pub fn save_checkpoint_with_meta<T: Scalar>(model: &SteeringModel<T>, meta: &KvConfig, path: &Path) -> Result<()> {
    let mut kv = meta.clone();
    model.config().write_kv(&mut kv);
    let text = kv.to_text();
    let width = std::mem::size_of::<T>() as u32;
    let mut buf = Vec::with_capacity(model.parameters().count() * width as usize + 4096);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(text.len() as u64).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&width.to_le_bytes());
    buf.extend_from_slice(&(model.parameters().tensors.len() as u32).to_le_bytes());
    for t in &model.parameters().tensors {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            if width == 4 {
                buf.extend_from_slice(&v.to_f32_bits().to_le_bytes());
            } else {
                buf.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or_else(|| {
            Error::Corrupt(format!("checkpoint truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self, v: u64) -> Result<usize> {
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.data.len())
            .ok_or_else(|| Error::Corrupt(format!("implausible length {v} in checkpoint")))
    }
}

/// A model together with the configuration text stored beside it.
pub struct Checkpoint<T> {
    pub model: SteeringModel<T>,
    pub meta: KvConfig,
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<SteeringModel<T>> {
    Ok(load_checkpoint_with_meta(path)?.model)
}

pub fn load_checkpoint_with_meta<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Corrupt(m) => Error::Corrupt(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Corrupt("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let mut r = Reader { data: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Corrupt(format!("checkpoint version {version}, expected {VERSION}")));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Corrupt("checkpoint checksum mismatch (truncated or damaged)".into()));
    }
    let n = r.u64()?;
    let n = r.len(n)?;
    let text = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Corrupt("configuration is not UTF-8".into()))?;
    let meta = KvConfig::parse(text)?;
    let cfg = ModelConfig::from_kv(&meta)?;
    let width = r.u32()?;
    if width != 4 && width != 8 {
        return Err(Error::Corrupt(format!("unsupported value width {width}")));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let n = r.u32()? as u64;
        let n = r.len(n)?;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            let d = r.u64()?;
            shape.push(r.len(d)?);
        }
        let elems: usize = shape.iter().product();
        let raw = r.take(elems * width as usize)?;
        let data = if width == 4 {
            raw.chunks_exact(4).map(|c| <T as Scalar>::from_f32(f32::from_le_bytes(c.try_into().unwrap()))).collect()
        } else {
            raw.chunks_exact(8)
                .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())))
                .collect()
        };
        tensors.push(Tensor { name, shape, data });
    }
    if r.pos != body.len() {
        return Err(Error::Corrupt("trailing bytes after the last tensor".into()));
    }
    let mut model = build_model::<T>(&cfg, 0)?;
    model.set_parameters(Parameters { tensors })?;
    Ok(Checkpoint { model, meta })
}

/// Rejects a checkpointed model whose input layout differs from what a run expects.
pub fn ensure_compatible(checkpoint: &ModelConfig, expected: &ModelConfig) -> Result<()> {
    if checkpoint != expected {
        return Err(Error::Config(format!(
            "checkpoint model (in_channels={}, inject_at={}, seq_len={}) does not match the requested \
             configuration (in_channels={}, inject_at={}, seq_len={})",
            checkpoint.in_channels,
            checkpoint.inject_at,
            checkpoint.seq_len,
            expected.in_channels,
            expected.inject_at,
            expected.seq_len
        )));
    }
    Ok(())
}
