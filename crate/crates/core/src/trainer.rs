//! Minibatch SGD with momentum, per-layer weight decay and a step learning
//! rate schedule, plus the data pipeline feeding it.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::align::GrayImage;
use crate::error::{Error, Result};
use crate::layers::{softmax_loss_batch, DecayGroup, Pass};
use crate::model_io::SolverState;
use crate::rng::Rng;
use crate::tensor::{self, Scalar, Tensor};
use crate::zoo::{ArchConfig, NetworkModel, INPUT_SIZE};
use crate::layers::Activation;

/// Border the random crop can move within: 144 − 128.
pub const CROP_SLACK: usize = 16;
/// Side of stored training images.
pub const TRAIN_IMAGE_SIZE: usize = INPUT_SIZE + CROP_SLACK;

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub momentum: f64,
    pub base_lr: f64,
    /// Floor of the schedule.
    pub final_lr: f64,
    /// Multiplicative decay applied every `step_iters` iterations.
    pub gamma: f64,
    /// `None` means `max_iters / 10`.
    pub step_iters: Option<usize>,
    pub weight_decay: f64,
    pub fc2_weight_decay: f64,
    pub dropout_ratio: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub seed: u64,
    /// Random 128×128 crops from 144×144 images with mirroring. When off,
    /// images must already be 128×128 and are used as they are.
    pub augment: bool,
    /// Validate every this many iterations (0 = only after the last one).
    pub val_interval: usize,
    /// Checkpoint every this many iterations (0 = only after the last one).
    pub checkpoint_interval: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            base_lr: 1e-3,
            final_lr: 5e-5,
            gamma: 0.457,
            step_iters: None,
            weight_decay: 5e-4,
            fc2_weight_decay: 5e-3,
            dropout_ratio: 0.7,
            batch_size: 64,
            max_iters: 100_000,
            seed: 42,
            augment: true,
            val_interval: 1000,
            checkpoint_interval: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("solver config", msg));
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.base_lr > 0.0 && self.final_lr >= 0.0 && self.final_lr <= self.base_lr) {
            return bad(format!("need 0 <= final_lr ({}) <= base_lr ({}), base_lr > 0", self.final_lr, self.base_lr));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if self.weight_decay < 0.0 || self.fc2_weight_decay < 0.0 {
            return bad("weight decays must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.dropout_ratio) {
            return bad(format!("dropout_ratio {} outside [0, 1)", self.dropout_ratio));
        }
        if self.batch_size == 0 || self.max_iters == 0 {
            return bad("batch_size and max_iters must be positive".into());
        }
        if self.step_iters == Some(0) {
            return bad("step_iters must be positive".into());
        }
        Ok(())
    }

    pub fn resolved_step_iters(&self) -> usize {
        self.step_iters.unwrap_or((self.max_iters / 10).max(1))
    }

    /// `max(base_lr · gamma^⌊iter / step⌋, final_lr)`.
    pub fn lr(&self, iter: usize) -> f64 {
        let steps = (iter / self.resolved_step_iters()) as i32;
        (self.base_lr * self.gamma.powi(steps)).max(self.final_lr)
    }

    pub fn decay_for(&self, group: DecayGroup) -> f64 {
        match group {
            DecayGroup::Standard => self.weight_decay,
            DecayGroup::Classifier => self.fc2_weight_decay,
        }
    }
}

/// Architecture overrides that may appear in a training config file.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchOverrides {
    pub width: f64,
    /// `None`: one class per identity in the data.
    pub num_classes: Option<usize>,
    pub nin_mfm: bool,
    pub activation: Activation,
}

impl Default for ArchOverrides {
    fn default() -> Self {
        Self {
            width: 1.0,
            num_classes: None,
            nin_mfm: false,
            activation: Activation::Mfm,
        }
    }
}

impl ArchOverrides {
    pub fn apply(&self, mut config: ArchConfig, data_classes: usize) -> ArchConfig {
        config.width = self.width;
        config.num_classes = self.num_classes.unwrap_or(data_classes);
        config.nin_mfm = self.nin_mfm;
        config.activation = self.activation;
        config
    }
}

/// Parses `key = value` lines (`#` starts a comment). Unknown keys are errors.
pub fn parse_config(text: &str, source: &str) -> Result<(SolverConfig, ArchOverrides)> {
    let mut solver = SolverConfig::default();
    let mut arch = ArchOverrides::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            msg,
        };
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
        fn num<T: std::str::FromStr>(value: &str) -> Option<T> {
            value.parse().ok()
        }
        let bad = || err(format!("bad value {value:?} for {key}"));
        match key {
            "momentum" => solver.momentum = num(value).ok_or_else(bad)?,
            "base_lr" => solver.base_lr = num(value).ok_or_else(bad)?,
            "final_lr" => solver.final_lr = num(value).ok_or_else(bad)?,
            "gamma" => solver.gamma = num(value).ok_or_else(bad)?,
            "step_iters" => solver.step_iters = Some(num(value).ok_or_else(bad)?),
            "weight_decay" => solver.weight_decay = num(value).ok_or_else(bad)?,
            "fc2_weight_decay" => solver.fc2_weight_decay = num(value).ok_or_else(bad)?,
            "dropout_ratio" => solver.dropout_ratio = num(value).ok_or_else(bad)?,
            "batch_size" => solver.batch_size = num(value).ok_or_else(bad)?,
            "max_iters" => solver.max_iters = num(value).ok_or_else(bad)?,
            "seed" => solver.seed = num(value).ok_or_else(bad)?,
            "augment" => solver.augment = num(value).ok_or_else(bad)?,
            "val_interval" => solver.val_interval = num(value).ok_or_else(bad)?,
            "checkpoint_interval" => solver.checkpoint_interval = num(value).ok_or_else(bad)?,
            "width" => arch.width = num(value).ok_or_else(bad)?,
            "num_classes" => arch.num_classes = Some(num(value).ok_or_else(bad)?),
            "nin_mfm" => arch.nin_mfm = num(value).ok_or_else(bad)?,
            "activation" => {
                arch.activation = match value {
                    "mfm" => Activation::Mfm,
                    "relu" => Activation::Relu,
                    _ => return Err(bad()),
                }
            }
            _ => return Err(err(format!("unknown key {key:?}"))),
        }
    }
    solver.validate()?;
    Ok((solver, arch))
}

/// Renders the resolved configuration in the same `key = value` form.
pub fn format_config(solver: &SolverConfig, arch: &ArchOverrides) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    kv("momentum", solver.momentum.to_string());
    kv("base_lr", solver.base_lr.to_string());
    kv("final_lr", solver.final_lr.to_string());
    kv("gamma", solver.gamma.to_string());
    kv("step_iters", solver.resolved_step_iters().to_string());
    kv("weight_decay", solver.weight_decay.to_string());
    kv("fc2_weight_decay", solver.fc2_weight_decay.to_string());
    kv("dropout_ratio", solver.dropout_ratio.to_string());
    kv("batch_size", solver.batch_size.to_string());
    kv("max_iters", solver.max_iters.to_string());
    kv("seed", solver.seed.to_string());
    kv("augment", solver.augment.to_string());
    kv("val_interval", solver.val_interval.to_string());
    kv("checkpoint_interval", solver.checkpoint_interval.to_string());
    kv("width", arch.width.to_string());
    if let Some(k) = arch.num_classes {
        kv("num_classes", k.to_string());
    }
    kv("nin_mfm", arch.nin_mfm.to_string());
    kv(
        "activation",
        match arch.activation {
            Activation::Relu => "relu".into(),
            _ => "mfm".into(),
        },
    );
    s
}

/// A normalized grayscale face (raw 0–255 intensities) and its identity.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: GrayImage,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<TrainSample>,
    pub num_classes: usize,
}

impl Dataset {
    /// Class count is one past the largest label.
    pub fn new(samples: Vec<TrainSample>) -> Self {
        let num_classes = samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
        Self { samples, num_classes }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

/// Indices of the training and validation images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Holds out one randomly chosen image per identity for validation.
pub fn split_train_val(labels: &[usize], num_classes: usize, rng: &mut Rng) -> Result<Split> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::invalid("split", format!("label {l} of image {i} exceeds class count {num_classes}")));
        }
        by_class[l].push(i);
    }
    let mut val = Vec::with_capacity(num_classes);
    for (class, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::invalid("split", format!("identity {class} has no images")));
        }
        if members.len() == 1 {
            log::info!("identity {class} has a single image; it contributes nothing to training");
        }
        val.push(members[rng.below(members.len())]);
    }
    let mut held = vec![false; labels.len()];
    val.iter().for_each(|&i| held[i] = true);
    let train = (0..labels.len()).filter(|&i| !held[i]).collect();
    Ok(Split { train, val })
}

/// Random crop offset and mirror flag for one training image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentDraw {
    pub top: usize,
    pub left: usize,
    pub mirror: bool,
}

impl AugmentDraw {
    pub fn sample(rng: &mut Rng) -> Self {
        let top = rng.below(CROP_SLACK + 1);
        let left = rng.below(CROP_SLACK + 1);
        let mirror = rng.bernoulli(0.5);
        Self { top, left, mirror }
    }

    pub const CENTER: AugmentDraw = AugmentDraw {
        top: CROP_SLACK / 2,
        left: CROP_SLACK / 2,
        mirror: false,
    };
}

fn check_train_size(image: &GrayImage) -> Result<()> {
    if image.width != TRAIN_IMAGE_SIZE || image.height != TRAIN_IMAGE_SIZE {
        return Err(Error::invalid(
            "augment",
            format!("expected {TRAIN_IMAGE_SIZE}×{TRAIN_IMAGE_SIZE} input, got {}×{}", image.width, image.height),
        ));
    }
    Ok(())
}

/// Crops, optionally mirrors and scales a 144×144 image to a `1×1×128×128` tensor.
pub fn apply_augment(image: &GrayImage, draw: AugmentDraw, pixel_scale: f32) -> Result<Tensor<f32>> {
    check_train_size(image)?;
    let cropped = tensor::crop(&image.to_tensor(pixel_scale), draw.top, draw.left, INPUT_SIZE, INPUT_SIZE)?;
    Ok(if draw.mirror { tensor::mirror(&cropped) } else { cropped })
}

pub fn augment(sample: &TrainSample, rng: &mut Rng, pixel_scale: f32) -> Result<Tensor<f32>> {
    apply_augment(&sample.image, AugmentDraw::sample(rng), pixel_scale)
}

/// Evaluation input: center crop of a 144×144 image, or a 128×128 image as is.
pub fn eval_input(image: &GrayImage, pixel_scale: f32) -> Result<Tensor<f32>> {
    match (image.width, image.height) {
        (TRAIN_IMAGE_SIZE, TRAIN_IMAGE_SIZE) => apply_augment(image, AugmentDraw::CENTER, pixel_scale),
        (INPUT_SIZE, INPUT_SIZE) => Ok(image.to_tensor(pixel_scale)),
        (w, h) => Err(Error::invalid(
            "eval input",
            format!("expected {INPUT_SIZE}×{INPUT_SIZE} or {TRAIN_IMAGE_SIZE}×{TRAIN_IMAGE_SIZE} image, got {w}×{h}"),
        )),
    }
}

/// One momentum SGD update of every parameter block:
/// `v ← μ·v − lr·lr_mult·(g + decay·w)`, `w ← w + v`.
pub fn sgd_step<T: Scalar>(model: &mut NetworkModel<T>, config: &SolverConfig, iter: usize) {
    let lr = config.lr(iter);
    let momentum = T::from_f64_lossy(config.momentum);
    for p in model.params_mut() {
        let step = T::from_f64_lossy(lr * p.lr_mult);
        let decay = T::from_f64_lossy(config.decay_for(p.decay));
        let param = p.param;
        let values = param.value.data_mut();
        let grads = param.grad.data();
        let velocity = param.momentum.data_mut();
        for ((w, &g), v) in values.iter_mut().zip(grads).zip(velocity.iter_mut()) {
            *v = momentum * *v - step * (g + decay * *w);
            *w += *v;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,lr,loss,val_accuracy\n");
        for r in &self.rows {
            let val = r.val_accuracy.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{}", r.iter, r.lr, r.loss, val);
        }
        s
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }

    /// Mean loss over the final `n` iterations.
    pub fn tail_mean_loss(&self, n: usize) -> Option<f64> {
        let tail = &self.rows[self.rows.len().saturating_sub(n)..];
        (!tail.is_empty()).then(|| tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64)
    }
}

/// Called with the model and the state to resume from.
pub type CheckpointFn<'a> = dyn FnMut(&NetworkModel<f32>, &SolverState) -> Result<()> + 'a;

/// Options for [`train_loop`] beyond the solver configuration.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Iteration to start from (non-zero when resuming).
    pub start_iter: usize,
    pub pixel_scale: Option<f32>,
    pub checkpoint: Option<&'a mut CheckpointFn<'a>>,
}

// Stream ids: 0 for the split, 1 for epoch orderings, 2.. per iteration.
const SPLIT_STREAM: u64 = 0;
const ORDER_STREAM_SEED_MIX: u64 = 0x9e37_79b9_7f4a_7c15;

/// Training order for one epoch; a pure function of seed and epoch.
fn epoch_order(train: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut order = train.to_vec();
    Rng::with_stream(seed ^ ORDER_STREAM_SEED_MIX, epoch as u64).shuffle(&mut order);
    order
}

/// Top-1 classification accuracy over `indices`.
pub fn classification_accuracy(
    model: &NetworkModel<f32>,
    data: &Dataset,
    indices: &[usize],
    pixel_scale: f32,
    batch_size: usize,
) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let inputs = chunk
            .iter()
            .map(|&i| eval_input(&data.samples[i].image, pixel_scale))
            .collect::<Result<Vec<_>>>()?;
        let logits = model.infer(&Tensor::stack(&inputs)?)?;
        for (j, &i) in chunk.iter().enumerate() {
            let row = logits.item(j);
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (k, &v)| if v > row[b] { k } else { b });
            correct += (best == data.samples[i].label) as usize;
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Runs SGD from `options.start_iter` to `config.max_iters`.
///
/// Every draw is a function of the seed and the iteration number, so a run
/// resumed from a checkpoint continues exactly as the uninterrupted run.
pub fn train_loop(
    model: &mut NetworkModel<f32>,
    data: &Dataset,
    config: &SolverConfig,
    options: TrainOptions<'_>,
) -> Result<TrainLog> {
    config.validate()?;
    if data.samples.is_empty() {
        return Err(Error::invalid("train", "dataset is empty"));
    }
    if data.num_classes > model.num_classes() {
        return Err(Error::invalid(
            "train",
            format!("data has {} identities but the classifier has {} outputs", data.num_classes, model.num_classes()),
        ));
    }
    let pixel_scale = options.pixel_scale.unwrap_or(1.0 / 255.0);
    let split = split_train_val(&data.labels(), data.num_classes, &mut Rng::with_stream(config.seed, SPLIT_STREAM))?;
    if split.train.is_empty() {
        return Err(Error::invalid("train", "no training images remain after holding out validation"));
    }
    model.set_dropout_ratio(config.dropout_ratio);
    model.zero_grad();
    let mut checkpoint = options.checkpoint;

    let n_train = split.train.len();
    let mut orders: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut log = TrainLog::default();
    for iter in options.start_iter..config.max_iters {
        let mut rng = Rng::with_stream(config.seed, iter as u64 + 2);
        let mut inputs = Vec::with_capacity(config.batch_size);
        let mut labels = Vec::with_capacity(config.batch_size);
        for j in 0..config.batch_size {
            let global = iter * config.batch_size + j;
            let epoch = global / n_train;
            let order = orders
                .entry(epoch)
                .or_insert_with(|| epoch_order(&split.train, config.seed, epoch));
            let sample = &data.samples[order[global % n_train]];
            inputs.push(if config.augment {
                augment(sample, &mut rng, pixel_scale)?
            } else {
                eval_input(&sample.image, pixel_scale)?
            });
            labels.push(sample.label);
        }
        let current_epoch = (iter * config.batch_size) / n_train;
        orders.retain(|&e, _| e >= current_epoch);

        let batch = Tensor::stack(&inputs)?;
        let logits = model.forward(&batch, &mut Pass::Train(&mut rng))?;
        let (loss, grad) = softmax_loss_batch(&logits, &labels)?;
        let lr = config.lr(iter);
        if !loss.is_finite() {
            model.clear_caches();
            return Err(Error::NonFiniteLoss { iter, loss, lr, labels });
        }
        model.backward(&grad)?;
        sgd_step(model, config, iter);
        model.zero_grad();

        let last = iter + 1 == config.max_iters;
        let validate = last || (config.val_interval > 0 && (iter + 1) % config.val_interval == 0);
        let val_accuracy = if validate {
            Some(classification_accuracy(model, data, &split.val, pixel_scale, config.batch_size)?)
        } else {
            None
        };
        if iter % 50 == 0 || validate {
            log::info!(
                "iter {iter} lr {lr:.3e} loss {loss:.5}{}",
                val_accuracy.map(|a| format!(" val_acc {a:.4}")).unwrap_or_default()
            );
        }
        log.rows.push(LogRow {
            iter,
            lr,
            loss,
            val_accuracy,
        });

        let save = last || (config.checkpoint_interval > 0 && (iter + 1) % config.checkpoint_interval == 0);
        if let (true, Some(cb)) = (save, checkpoint.as_mut()) {
            let state = SolverState {
                iteration: iter as u64 + 1,
                seed: config.seed,
            };
            cb(model, &state)?;
        }
    }
    Ok(log)
}

/// Faces-like synthetic images: every identity is a fixed random blob
/// pattern and each image adds its own noise and brightness jitter.
pub fn synthetic_dataset(identities: usize, per_identity: usize, size: usize, seed: u64) -> Dataset {
    let mut rng = Rng::new(seed);
    let mut samples = Vec::with_capacity(identities * per_identity);
    for label in 0..identities {
        let blobs: Vec<(f64, f64, f64, f64)> = (0..6)
            .map(|_| {
                (
                    rng.uniform_range(0.15, 0.85) * size as f64,
                    rng.uniform_range(0.15, 0.85) * size as f64,
                    rng.uniform_range(0.05, 0.2) * size as f64,
                    rng.uniform_range(-90.0, 90.0),
                )
            })
            .collect();
        for _ in 0..per_identity {
            let gain = rng.uniform_range(0.9, 1.1);
            let noise: Vec<f64> = (0..size * size).map(|_| rng.gaussian(0.0, 12.0)).collect();
            let image = GrayImage::from_fn(size, size, |x, y| {
                let mut v = 128.0;
                for &(cx, cy, r, amp) in &blobs {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    v += amp * (-d2 / (2.0 * r * r)).exp();
                }
                (v * gain + noise[y * size + x]).clamp(0.0, 255.0) as f32
            });
            samples.push(TrainSample { image, label });
        }
    }
    Dataset { samples, num_classes: identities }
}
