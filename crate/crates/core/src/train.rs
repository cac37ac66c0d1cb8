//! Loss, optimizer, learning-rate schedule, augmentation and the epoch loop.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use gpmseg_tensor::ops::sigmoid;
use gpmseg_tensor::{Module, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::SegModel;
use crate::checkpoint;
use crate::dataset::{make_batch, Batch, Sample};
use crate::error::{invalid, io_err, GpmError, Result};
use crate::metrics::{binarize, dice_iou_slices, ImageScore, SegScores, DEFAULT_THRESHOLD};
use crate::nn::{apply_batch_stats, Ctx};

/// Smoothing term of the soft Dice.
pub const DICE_EPS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    DiceBce,
    Dice,
    Bce,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::DiceBce => "dice_bce",
            LossKind::Dice => "dice",
            LossKind::Bce => "bce",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dice_bce" => Ok(LossKind::DiceBce),
            "dice" => Ok(LossKind::Dice),
            "bce" => Ok(LossKind::Bce),
            _ => Err(format!("expected dice_bce, dice or bce, got `{s}`")),
        }
    }
}

/// Binary cross-entropy on logits (mean over pixels) plus `1 - soft Dice`
/// (Dice per sample, averaged over the batch), as selected by `kind`.
pub fn seg_loss<'t>(logits: &Var<'t>, target: &Tensor, kind: LossKind) -> Result<Var<'t>> {
    if logits.shape() != target.shape() || logits.shape().is_empty() {
        return Err(invalid(format!(
            "loss inputs differ in shape: logits {:?}, target {:?}",
            logits.shape(),
            target.shape()
        )));
    }
    let (use_bce, use_dice) = match kind {
        LossKind::DiceBce => (true, true),
        LossKind::Dice => (false, true),
        LossKind::Bce => (true, false),
    };
    let x = logits.value_rc();
    let y = target.clone();
    let b = logits.shape()[0].max(1);
    let per = x.numel() / b;
    let n = x.numel() as f64;
    let p: Vec<f64> = x.data().iter().map(|&v| sigmoid(v)).collect();

    let mut total = 0.0;
    if use_bce {
        let bce: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&l, &t)| l.max(0.0) - l * t + (-l.abs()).exp().ln_1p())
            .sum();
        total += bce / n;
    }
    // per-sample (intersection, sum of p + sum of y)
    let sums: Vec<(f64, f64)> = (0..b)
        .map(|bi| {
            let r = bi * per..(bi + 1) * per;
            p[r.clone()].iter().zip(&y.data()[r]).fold((0.0, 0.0), |(i, s), (&pv, &yv)| {
                (i + pv * yv, s + pv + yv)
            })
        })
        .collect();
    if use_dice {
        let mean_dice: f64 = sums
            .iter()
            .map(|&(i, s)| (2.0 * i + DICE_EPS) / (s + DICE_EPS))
            .sum::<f64>()
            / b as f64;
        total += 1.0 - mean_dice;
    }

    let shape = x.shape().to_vec();
    Ok(logits.tape().record(Tensor::scalar(total), &[logits], move |g, _| {
        let go = g.data()[0];
        let mut dx = vec![0.0; p.len()];
        for (i, d) in dx.iter_mut().enumerate() {
            let (pv, yv) = (p[i], y.data()[i]);
            let mut v = 0.0;
            if use_bce {
                v += (pv - yv) / n;
            }
            if use_dice {
                let (inter, s) = sums[i / per];
                let den = s + DICE_EPS;
                let ddice_dp = (2.0 * yv * den - (2.0 * inter + DICE_EPS)) / (den * den);
                v -= ddice_dp * pv * (1.0 - pv) / b as f64;
            }
            *d = go * v;
        }
        vec![Some(Tensor::new(&shape, dx).unwrap())]
    }))
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter that has a gradient.
    pub fn step(&mut self, model: &mut dyn Module, grads: &HashMap<String, Tensor>, lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (eps, wd) = (self.eps, self.weight_decay);
        let moments = &mut self.moments;
        model.visit_params_mut(&mut |p| {
            if !p.is_trainable() {
                return;
            }
            let Some(g) = grads.get(p.name()) else { return };
            let (m, v) = moments
                .entry(p.name().to_string())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let w = p.value_mut().data_mut();
            let moments = m.data_mut().iter_mut().zip(v.data_mut());
            for ((wi, &gi), (mi, vi)) in w.iter_mut().zip(g.data()).zip(moments) {
                *wi *= 1.0 - lr * wd;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *wi -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
            }
        });
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `lr_min + (lr - lr_min)(1 + cos(pi t / T_max)) / 2` for all t.
    Cosine,
    /// Same curve restarted every `T_max` epochs.
    CosineRestart,
}

impl Schedule {
    pub fn as_str(self) -> &'static str {
        match self {
            Schedule::Cosine => "cosine",
            Schedule::CosineRestart => "cosine_restart",
        }
    }
}

impl std::str::FromStr for Schedule {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cosine" => Ok(Schedule::Cosine),
            "cosine_restart" => Ok(Schedule::CosineRestart),
            _ => Err(format!("expected cosine or cosine_restart, got `{s}`")),
        }
    }
}

/// Learning rate at `epoch` (0-based).
pub fn lr_at(epoch: usize, lr: f64, lr_min: f64, t_max: usize, schedule: Schedule) -> f64 {
    let t_max = t_max.max(1);
    let t = match schedule {
        Schedule::Cosine => epoch,
        Schedule::CosineRestart => epoch % t_max,
    } as f64;
    lr_min + (lr - lr_min) * (1.0 + (std::f64::consts::PI * t / t_max as f64).cos()) / 2.0
}

/// Flips and right-angle rotation shared by image, mask and depth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Geometric {
    pub flip_h: bool,
    pub flip_v: bool,
    /// Counter-clockwise quarter turns, 0..4. Odd values need square planes.
    pub quarter_turns: u8,
}

impl Geometric {
    pub fn random(rng: &mut impl Rng, square: bool) -> Self {
        Self {
            flip_h: rng.random(),
            flip_v: rng.random(),
            quarter_turns: if square {
                rng.random_range(0..4)
            } else {
                2 * rng.random_range(0..2)
            },
        }
    }

    /// Applies to every plane of a rank-4 tensor.
    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = t.dims4()?;
        if self.quarter_turns % 2 == 1 && h != w {
            return Err(invalid("odd quarter turns need square planes"));
        }
        let mut out = t.clone();
        let src = t.data();
        let dst = out.data_mut();
        for plane in 0..b * c {
            let base = plane * h * w;
            for i in 0..h {
                for j in 0..w {
                    let (mut y, mut x) = (i, j);
                    // map destination (i, j) back to its source pixel
                    for _ in 0..self.quarter_turns % 4 {
                        (y, x) = (x, w - 1 - y);
                    }
                    if self.flip_v {
                        y = h - 1 - y;
                    }
                    if self.flip_h {
                        x = w - 1 - x;
                    }
                    dst[base + i * w + j] = src[base + y * w + x];
                }
            }
        }
        Ok(out)
    }
}

/// Brightness and contrast jitter for the image only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Photometric {
    pub brightness: f64,
    pub contrast: f64,
}

impl Photometric {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            brightness: rng.random_range(-0.05..0.05),
            contrast: rng.random_range(0.9..1.1),
        }
    }

    pub fn apply(&self, t: &Tensor) -> Tensor {
        t.map(|v| ((v - 0.5) * self.contrast + 0.5 + self.brightness).clamp(0.0, 1.0))
    }
}

/// Random flips/rotations applied identically to all three maps, then
/// photometric jitter on the image.
pub fn augment(sample: &Sample, rng: &mut impl Rng) -> Result<Sample> {
    let (h, w) = sample.size();
    let geo = Geometric::random(rng, h == w);
    let photo = Photometric::random(rng);
    Ok(Sample {
        id: sample.id.clone(),
        image: photo.apply(&geo.apply(&sample.image)?),
        mask: geo.apply(&sample.mask)?,
        depth: geo.apply(&sample.depth)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub t_max: usize,
    pub lr_min: f64,
    pub schedule: Schedule,
    pub image_size: usize,
    pub seeds: Vec<u64>,
    pub loss: LossKind,
    pub early_stop_patience: Option<usize>,
    pub augment: bool,
    /// Fraction of ids routed to validation by hash.
    pub val_fraction: f64,
    /// Stop once validation DSC reaches this value.
    pub target_dsc: Option<f64>,
    /// Validate every this many epochs (and after the final one).
    #[serde(default = "one")]
    pub eval_every: usize,
}

fn one() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 5e-3,
            batch_size: 10,
            epochs: 350,
            t_max: 50,
            lr_min: 1e-5,
            schedule: Schedule::Cosine,
            image_size: 256,
            seeds: vec![0, 1, 2, 3, 4],
            loss: LossKind::DiceBce,
            early_stop_patience: None,
            augment: true,
            val_fraction: 0.1,
            target_dsc: None,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.lr_min >= self.lr || self.lr_min.is_nan() || self.lr.is_nan() {
            return Err(("lr_min", format!("must be below lr ({} >= {})", self.lr_min, self.lr)));
        }
        if self.t_max == 0 || self.t_max > self.epochs {
            return Err(("t_max", format!("must be in 1..={} (epochs)", self.epochs)));
        }
        if self.batch_size == 0 {
            return Err(("batch_size", "must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(("eval_every", "must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(("seeds", "at least one seed is required".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(("val_fraction", "must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(epoch, self.lr, self.lr_min, self.t_max, self.schedule)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_dsc: Option<f64>,
}

pub fn log_csv(history: &[EpochLog]) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_dsc\n");
    for e in history {
        let val = e.val_dsc.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(s, "{},{:.6e},{:.8},{}", e.epoch, e.lr, e.train_loss, val).unwrap();
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    pub best_val_dsc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub data_seed: u64,
    pub augment_seed: u64,
    /// Path of the checkpoint holding the best weights, when written.
    pub best_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<EpochLog>,
    /// Final checkpoint file, when an output directory was given.
    pub last_checkpoint: Option<PathBuf>,
}

/// Where and how a run reports.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    /// Extra manifest entries stored in checkpoints.
    pub manifest: serde_json::Value,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

/// Mean loss of one optimization step on `batch`; updates `model` in place.
pub fn train_step(
    model: &mut SegModel,
    opt: &mut AdamW,
    batch: &Batch,
    loss: LossKind,
    lr: f64,
) -> Result<f64> {
    let (value, grads, stats) = {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, true);
        let x = tape.constant(batch.image.clone());
        let d = model.uses_depth().then(|| tape.constant(batch.depth.clone()));
        let logits = model.forward(&ctx, &x, d.as_ref())?;
        let l = seg_loss(&logits, &batch.mask, loss)?;
        let value = l.value().data()[0];
        if !value.is_finite() {
            return Ok(value);
        }
        let grads = tape.backward(&l)?.into_param_map();
        (value, grads, ctx.take_stats())
    };
    apply_batch_stats(model, &stats);
    opt.step(model, &grads, lr);
    Ok(value)
}

/// Per-image scores in eval mode.
pub fn evaluate(model: &SegModel, samples: &[Sample], batch_size: usize) -> Result<SegScores> {
    let mut per_image = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = make_batch(&refs)?;
        let depth = model.uses_depth().then_some(&batch.depth);
        let logits = model.predict(&batch.image, depth)?;
        let pred = binarize(&logits, DEFAULT_THRESHOLD);
        let per = pred.numel() / chunk.len();
        for (i, s) in chunk.iter().enumerate() {
            let r = i * per..(i + 1) * per;
            let (dsc, iou) = dice_iou_slices(&pred.data()[r.clone()], &batch.mask.data()[r])?;
            per_image.push(ImageScore {
                image_id: s.id.clone(),
                dsc,
                iou,
            });
        }
    }
    SegScores::from_images(per_image)
}

fn checkpoint_manifest(model: &SegModel, cfg: &TrainConfig, seed: u64, epoch: usize, val: Option<f64>, extra: &serde_json::Value) -> serde_json::Value {
    let mut m = serde_json::json!({
        "model": model.config,
        "train": cfg,
        "seed": seed,
        "epoch": epoch,
        "val_dsc": val,
        "init": "kaiming_normal",
        "batch_norm": true,
    });
    if let (Some(obj), Some(extra)) = (m.as_object_mut(), extra.as_object()) {
        for (k, v) in extra {
            obj.insert(k.clone(), v.clone());
        }
    }
    m
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

/// Runs the epoch loop on `train`, validating on `val` after each epoch.
///
/// The data order and augmentation streams are seeded from `seed`; model
/// initialization is the caller's responsibility.
pub fn train_run(
    cfg: &TrainConfig,
    model: &mut SegModel,
    train: &[Sample],
    val: &[Sample],
    seed: u64,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(invalid("training set is empty"));
    }
    cfg.validate()
        .map_err(|(key, reason)| GpmError::Config { key: key.into(), reason })?;
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let data_seed = seed.wrapping_mul(2).wrapping_add(0x5eed);
    let augment_seed = seed.wrapping_mul(2).wrapping_add(0xa06);
    let mut order_rng = ChaCha8Rng::seed_from_u64(data_seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(augment_seed);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut state = TrainState {
        epoch: 0,
        best_val_dsc: None,
        best_epoch: None,
        data_seed,
        augment_seed,
        best_checkpoint: None,
    };
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut since_best = 0;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<Sample> = if cfg.augment {
                idx.iter()
                    .map(|&i| augment(&train[i], &mut aug_rng))
                    .collect::<Result<_>>()?
            } else {
                idx.iter().map(|&i| train[i].clone()).collect()
            };
            let batch = make_batch(&samples.iter().collect::<Vec<_>>())?;
            let l = train_step(model, &mut opt, &batch, cfg.loss, lr)?;
            if !l.is_finite() {
                return Err(GpmError::NonFiniteLoss { epoch, batch: bi, lr });
            }
            loss_sum += l * idx.len() as f64;
            count += idx.len();
        }
        let due = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        let val_dsc = if val.is_empty() || !due {
            None
        } else {
            Some(evaluate(model, val, cfg.batch_size)?.dsc)
        };
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / count as f64,
            val_dsc,
        };
        if opts.verbose {
            eprintln!(
                "epoch {epoch:>4}  lr {lr:.3e}  loss {:.5}  val_dsc {}",
                entry.train_loss,
                val_dsc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
            );
        }
        history.push(entry);
        state.epoch = epoch + 1;

        let improved = match (val_dsc, state.best_val_dsc) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            state.best_val_dsc = val_dsc;
            state.best_epoch = Some(epoch);
            since_best = 0;
            if let Some(dir) = &opts.out_dir {
                let path = dir.join("best.ckpt");
                let m = checkpoint_manifest(model, cfg, seed, epoch, val_dsc, &opts.manifest);
                checkpoint::save(&path, &m, model)?;
                state.best_checkpoint = Some(path);
            }
        } else if val_dsc.is_some() {
            since_best += 1;
        }
        if let Some(dir) = &opts.out_dir {
            write_file(&dir.join("train_log.csv"), &log_csv(&history))?;
        }
        if cfg.target_dsc.is_some_and(|t| val_dsc.is_some_and(|v| v >= t)) {
            break;
        }
        if cfg.early_stop_patience.is_some_and(|p| since_best >= p) {
            break;
        }
    }

    let last_checkpoint = match &opts.out_dir {
        Some(dir) => {
            let path = dir.join("last.ckpt");
            let last_val = history.last().and_then(|e| e.val_dsc);
            let m = checkpoint_manifest(model, cfg, seed, state.epoch.saturating_sub(1), last_val, &opts.manifest);
            checkpoint::save(&path, &m, model)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome {
        state,
        history,
        last_checkpoint,
    })
}

/// Moving average over `window` consecutive entries.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    values
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}
