//! Dataset splitting, the training loop and evaluation.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rfp_nn::module::Module;
use rfp_nn::{softmax_cross_entropy, AdamState};
use serde::{Deserialize, Serialize};

use crate::dsp::{build_bundle, ReprConfig};
use crate::error::{Result, RfpError};
use crate::mcaff::{InputBatch, Model, Representation};
use crate::radio::dataset::{Extents, FrameArray};
use crate::radio::impair::apply_awgn;
use crate::radio::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum SplitScheme {
    /// A fraction of each device's frames (all days) trains; the rest tests.
    Fraction { fraction: f64 },
    /// Only day `day` (zero-based) is used, split by fraction per device.
    SameDay { day: usize, fraction: f64 },
    /// Whole days train or test.
    DayPartition { train_days: Vec<usize>, test_days: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub scheme: SplitScheme,
    /// Share of the training pool held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl SplitPlan {
    pub fn new(scheme: SplitScheme, seed: u64) -> Self {
        Self {
            scheme,
            val_fraction: 0.1,
            seed,
        }
    }
}

/// Flat frame indices `(device * n_d + day) * n_f + frame` of each split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn device_of(extents: &Extents, flat: usize) -> usize {
    flat / extents.frames_per_device()
}

pub fn day_of(extents: &Extents, flat: usize) -> usize {
    (flat / extents.n_f) % extents.n_d
}

fn check_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f <= 1.0 {
        Ok(())
    } else {
        Err(RfpError::Usage(format!("fraction must lie in (0, 1], got {f}")))
    }
}

/// Deterministic, per-device stratified split.
pub fn split_dataset(extents: &Extents, plan: &SplitPlan) -> Result<Splits> {
    if !(0.0..1.0).contains(&plan.val_fraction) {
        return Err(RfpError::Usage(format!("val_fraction {} outside [0, 1)", plan.val_fraction)));
    }
    let (n_d, n_f) = (extents.n_d, extents.n_f);
    let mut out = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for dev in 0..extents.n_n {
        let base = dev * n_d * n_f;
        let day_frames = |d: usize| (0..n_f).map(move |f| base + d * n_f + f);
        let mut rng = stream_rng(plan.seed, Stream::Split, dev as u64);
        let (mut pool, test): (Vec<usize>, Vec<usize>) = match &plan.scheme {
            SplitScheme::Fraction { fraction } => {
                check_fraction(*fraction)?;
                let mut all: Vec<usize> = (base..base + n_d * n_f).collect();
                all.shuffle(&mut rng);
                let k = (fraction * all.len() as f64).round() as usize;
                let test = all.split_off(k);
                (all, test)
            }
            SplitScheme::SameDay { day, fraction } => {
                check_fraction(*fraction)?;
                if *day >= n_d {
                    return Err(RfpError::Usage(format!("day {day} out of range (n_d = {n_d})")));
                }
                let mut all: Vec<usize> = day_frames(*day).collect();
                all.shuffle(&mut rng);
                let k = (fraction * all.len() as f64).round() as usize;
                let test = all.split_off(k);
                (all, test)
            }
            SplitScheme::DayPartition { train_days, test_days } => {
                if let Some(d) = train_days.iter().chain(test_days).find(|&&d| d >= n_d) {
                    return Err(RfpError::Usage(format!("day {d} out of range (n_d = {n_d})")));
                }
                if train_days.iter().any(|d| test_days.contains(d)) {
                    return Err(RfpError::Usage("train and test days overlap".into()));
                }
                let mut pool: Vec<usize> = train_days.iter().flat_map(|&d| day_frames(d)).collect();
                pool.shuffle(&mut rng);
                (pool, test_days.iter().flat_map(|&d| day_frames(d)).collect())
            }
        };
        let mut n_val = (plan.val_fraction * pool.len() as f64).round() as usize;
        if plan.val_fraction > 0.0 && pool.len() >= 2 {
            n_val = n_val.max(1);
        }
        let train = pool.split_off(n_val);
        out.val.extend(pool);
        out.train.extend(train);
        out.test.extend(test);
    }
    for (name, s) in [("train", &out.train), ("test", &out.test)] {
        if s.is_empty() {
            return Err(RfpError::Usage(format!("{name} split is empty")));
        }
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// Additive noise applied when frames are materialised. The noise of a frame
/// depends only on `(seed, frame index, snr)`, so every model sees the same draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub snr_db: f64,
    pub seed: u64,
}

impl NoiseSpec {
    fn stream_index(&self, flat: usize) -> u64 {
        let code = ((self.snr_db * 100.0).round() as i64 + (1 << 15)) as u64 & 0xffff;
        ((flat as u64) << 16) | code
    }
}

/// Model inputs and device labels for a set of frames.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledBatch {
    pub input: InputBatch,
    pub labels: Vec<usize>,
}

impl LabelledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            input: self.input.select(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Builds the representations in `reprs` for frames `indices`, optionally noised.
pub fn materialize(
    frames: &FrameArray,
    sample_rate: f64,
    indices: &[usize],
    reprs: &[Representation],
    noise: Option<NoiseSpec>,
    repr_cfg: &ReprConfig,
) -> Result<LabelledBatch> {
    let e = frames.extents;
    let mut bundles = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for &flat in indices {
        let (dev, day, f) = (device_of(&e, flat), day_of(&e, flat), flat % e.n_f);
        let mut x = frames.frame(dev, day, f, sample_rate);
        if let Some(n) = noise {
            let mut rng = stream_rng(n.seed, Stream::Noise, n.stream_index(flat));
            x = apply_awgn(&x, n.snr_db, &mut rng);
        }
        bundles.push(build_bundle(&x, repr_cfg)?);
        labels.push(dev);
    }
    let refs: Vec<_> = bundles.iter().collect();
    Ok(LabelledBatch {
        input: InputBatch::from_bundles(&refs, reprs)?,
        labels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub plateau_decay: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    /// Validation loss must fall by more than this to count as an improvement.
    pub min_delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            lr: 1e-3,
            plateau_decay: 0.1,
            plateau_patience: 10,
            early_stop_patience: 15,
            max_epochs: 200,
            min_delta: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || !(self.lr > 0.0) || self.early_stop_patience == 0 || self.max_epochs == 0 {
            return Err(RfpError::Usage(format!("invalid training configuration {self:?}")));
        }
        if !(self.plateau_decay > 0.0 && self.plateau_decay <= 1.0) {
            return Err(RfpError::Usage(format!("plateau_decay {} outside (0, 1]", self.plateau_decay)));
        }
        Ok(())
    }
}

/// Plateau learning-rate decay and early stopping driven by validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    decay: f64,
    plateau_patience: usize,
    early_stop_patience: usize,
    min_delta: f64,
    best: f64,
    since_best: usize,
    since_decay: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Step {
    pub improved: bool,
    pub decayed: bool,
    pub stop: bool,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            decay: cfg.plateau_decay,
            plateau_patience: cfg.plateau_patience,
            early_stop_patience: cfg.early_stop_patience,
            min_delta: cfg.min_delta,
            best: f64::INFINITY,
            since_best: 0,
            since_decay: 0,
        }
    }

    /// Records the validation loss of the epoch just finished.
    pub fn observe(&mut self, val_loss: f64) -> Step {
        let improved = val_loss < self.best - self.min_delta;
        if improved {
            self.best = val_loss;
            self.since_best = 0;
            self.since_decay = 0;
        } else {
            self.since_best += 1;
            self.since_decay += 1;
        }
        let decayed = self.plateau_patience > 0 && self.since_decay >= self.plateau_patience;
        if decayed {
            self.lr *= self.decay;
            self.since_decay = 0;
        }
        Step {
            improved,
            decayed,
            stop: self.since_best >= self.early_stop_patience,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr,wall_seconds\n");
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.3}",
                r.epoch, r.train_loss, r.val_loss, r.lr, r.wall_seconds
            );
        }
        s
    }

    /// Loss and learning-rate trajectory with wall time left out.
    pub fn trajectory(&self) -> Vec<(usize, u64, u64, u64)> {
        self.epochs
            .iter()
            .map(|r| (r.epoch, r.train_loss.to_bits(), r.val_loss.to_bits(), r.lr.to_bits()))
            .collect()
    }
}

/// Mean cross-entropy of `data` in inference mode.
pub fn mean_loss(model: &mut Model, data: &LabelledBatch, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let b = data.select(chunk);
        let logits = model.predict(&b.input)?;
        total += softmax_cross_entropy(&logits, &b.labels)?.0 * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Trains `model` in place and leaves it holding the parameters of the epoch
/// with the lowest validation loss. Without validation data the training
/// loss drives the schedule.
pub fn train(model: &mut Model, train_set: &LabelledBatch, val_set: &LabelledBatch, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    if train_set.len() < 2 {
        return Err(RfpError::Usage("training needs at least two frames".into()));
    }
    let mut adam = AdamState::new(&model.params().iter().map(|p| &**p).collect::<Vec<_>>(), cfg.lr);
    let mut schedule = Schedule::new(cfg);
    let mut history = History::default();
    let mut best: Option<Model> = None;
    let start = Instant::now();
    for epoch in 1..=cfg.max_epochs {
        adam.lr = schedule.lr;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, Stream::Shuffle, epoch as u64));
        let mut sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            // batch statistics of a single frame are degenerate
            if chunk.len() < 2 {
                continue;
            }
            let b = train_set.select(chunk);
            model.zero_grad();
            let loss = model.loss_and_backward(&b.input, &b.labels)?;
            if !loss.is_finite() {
                return Err(RfpError::Training {
                    epoch,
                    reason: format!("training loss {loss}"),
                });
            }
            adam.step(&mut model.params())?;
            sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = sum / seen as f64;
        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            mean_loss(model, val_set, cfg.batch_size)?
        };
        if !val_loss.is_finite() {
            return Err(RfpError::Training {
                epoch,
                reason: format!("validation loss {val_loss}"),
            });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: adam.lr,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        let step = schedule.observe(val_loss);
        if step.improved {
            history.best_epoch = epoch;
            best = Some(model.clone());
        }
        if step.stop {
            break;
        }
    }
    if let Some(b) = best {
        *model = b;
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

pub fn score(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<Evaluation> {
    if labels.is_empty() || predictions.len() != labels.len() {
        return Err(RfpError::Usage("evaluation needs matching, non-empty predictions".into()));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &t) in predictions.iter().zip(labels) {
        if p >= n_classes || t >= n_classes {
            return Err(RfpError::Usage(format!("class id out of range ({t} -> {p})")));
        }
        confusion[t][p] += 1;
    }
    let correct: usize = (0..n_classes).map(|i| confusion[i][i]).sum();
    Ok(Evaluation {
        accuracy: correct as f64 / labels.len() as f64,
        confusion,
    })
}

pub fn predict_classes(model: &mut Model, data: &LabelledBatch, batch_size: usize) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let logits = model.predict(&data.input.select(chunk))?;
        let n = logits.shape()[1];
        preds.extend(logits.data().chunks(n).map(argmax));
    }
    Ok(preds)
}

pub fn evaluate(model: &mut Model, data: &LabelledBatch, batch_size: usize) -> Result<Evaluation> {
    let preds = predict_classes(model, data, batch_size)?;
    score(&preds, &data.labels, model.config.n_classes)
}
