//! Losses, optimizers, schedules and the epoch loop.

mod optim;
mod schedule;

pub use optim::{adam_step, adamw_step, AdamParams, AdamState, Optimizer, OptimizerKind};
pub use schedule::{lr_at, restart_cycle, Schedule, Scheduler};

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use rand::seq::SliceRandom;

use crate::datasets::{LabeledDataset, IMAGE_SIZE};
use crate::engine::{Real, Tape, Tensor};
use crate::error::{Error, Result};
use crate::models::{self, Checkpoint, Model, Variant};
use crate::regularization::{augment, normalize, AugmentConfig};
use crate::rng::{self, StreamRng};

/// Per-class loss weights looked up by class name; unlisted classes get
/// `default`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeightTable {
    pub default: f64,
    pub overrides: BTreeMap<String, f64>,
}

impl ClassWeightTable {
    pub fn uniform() -> Self {
        ClassWeightTable {
            default: 1.0,
            overrides: BTreeMap::new(),
        }
    }

    /// Up-weights the classes most often confused with each other and
    /// down-weights the easy ones.
    pub fn eurosat() -> Self {
        let mut overrides = BTreeMap::new();
        for c in ["HerbaceousVegetation", "PermanentCrop", "Industrial"] {
            overrides.insert(c.to_string(), 1.3);
        }
        for c in ["Forest", "SeaLake", "Residential"] {
            overrides.insert(c.to_string(), 0.8);
        }
        ClassWeightTable { default: 1.0, overrides }
    }

    pub fn weight(&self, class: &str) -> f64 {
        self.overrides.get(class).copied().unwrap_or(self.default)
    }

    pub fn resolve(&self, class_names: &[String]) -> Result<Vec<f64>> {
        let w: Vec<f64> = class_names.iter().map(|c| self.weight(c)).collect();
        if let Some((c, v)) = class_names.iter().zip(&w).find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("class weight for {c} must be positive, got {v}")));
        }
        Ok(w)
    }

    /// Parses `uniform`, `eurosat`, or `Name:w,Name:w` (others 1.0).
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "uniform" => return Ok(Self::uniform()),
            "eurosat" => return Ok(Self::eurosat()),
            _ => {}
        }
        let mut table = Self::uniform();
        for item in s.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            let (name, w) = item
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("class weight entry {item:?} is not Name:weight")))?;
            let w: f64 = w
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("class weight {w:?} is not a number")))?;
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("class weight for {name} must be positive, got {w}")));
            }
            table.overrides.insert(name.trim().to_string(), w);
        }
        Ok(table)
    }
}

impl fmt::Display for ClassWeightTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == Self::uniform() {
            return f.write_str("uniform");
        }
        if *self == Self::eurosat() {
            return f.write_str("eurosat");
        }
        let items: Vec<String> = self.overrides.iter().map(|(k, v)| format!("{k}:{v}")).collect();
        f.write_str(&items.join(","))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop once validation accuracy has not improved for this many epochs.
    pub early_stop_patience: Option<usize>,
    pub seed: u64,
    pub class_weights: ClassWeightTable,
    pub augment: AugmentConfig,
}

pub const DEFAULT_BATCH_SIZE: usize = 64;
/// Epoch cap for the `balanced12` preset, which normally ends by early
/// stopping.
pub const BALANCED12_MAX_EPOCHS: usize = 100;

impl TrainConfig {
    /// The training recipe each architecture was published with.
    pub fn preset(variant: Variant, seed: u64) -> Self {
        let base = TrainConfig {
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            weight_decay: 0.0,
            schedule: Schedule::Constant,
            epochs: 30,
            batch_size: DEFAULT_BATCH_SIZE,
            early_stop_patience: None,
            seed,
            class_weights: ClassWeightTable::uniform(),
            augment: AugmentConfig::default(),
        };
        match variant {
            Variant::Baseline => TrainConfig {
                schedule: Schedule::Plateau {
                    patience: 3,
                    factor: 0.5,
                },
                ..base
            },
            Variant::Cbam7 => TrainConfig {
                schedule: Schedule::Cosine { t_max: 40 },
                epochs: 40,
                ..base
            },
            Variant::Balanced12 => TrainConfig {
                optimizer: OptimizerKind::AdamW,
                weight_decay: 0.05,
                schedule: Schedule::WarmRestarts { t0: 15, t_mult: 2 },
                epochs: BALANCED12_MAX_EPOCHS,
                early_stop_patience: Some(15),
                class_weights: ClassWeightTable::eurosat(),
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.early_stop_patience == Some(0) {
            return Err(Error::Config("early_stop_patience must be >= 1".into()));
        }
        self.schedule.validate()?;
        self.augment.validate()
    }

    fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            batch_size: self.batch_size,
            class_weights: self.class_weights.clone(),
            normalize_mean: self.augment.normalize_mean,
            normalize_std: self.augment.normalize_std,
        }
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub alpha_mean: Option<f64>,
    /// `σ(α)` per residual block at the end of the epoch.
    pub alpha_per_block: Vec<f64>,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,lr,alpha_mean,alpha_per_block";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in history {
        let alphas: Vec<String> = r.alpha_per_block.iter().map(f64::to_string).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch,
            r.train_loss,
            r.train_acc,
            r.val_loss,
            r.val_acc,
            r.lr,
            r.alpha_mean.map(|a| a.to_string()).unwrap_or_default(),
            alphas.join(";")
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Weights from the epoch with the highest validation accuracy.
    pub best: Checkpoint<f32>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub batch_size: usize,
    pub class_weights: ClassWeightTable,
    pub normalize_mean: [f64; 3],
    pub normalize_std: [f64; 3],
}

impl Default for EvalSettings {
    fn default() -> Self {
        TrainConfig::preset(Variant::Baseline, 0).eval_settings()
    }
}

/// Eval-mode outputs over a list of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub loss: f64,
    pub accuracy: f64,
    /// Softmax rows, one per sample.
    pub probs: Vec<Vec<f64>>,
    pub preds: Vec<usize>,
    pub labels: Vec<usize>,
}

fn stack(images: Vec<Tensor<f32>>) -> Result<Tensor<f32>> {
    let b = images.len();
    let mut data = Vec::with_capacity(b * 3 * IMAGE_SIZE * IMAGE_SIZE);
    for img in images {
        data.extend_from_slice(img.data());
    }
    Tensor::new(&[b, 3, IMAGE_SIZE, IMAGE_SIZE], data)
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

pub fn evaluate(model: &mut Model<f32>, ds: &LabeledDataset, indices: &[usize], settings: &EvalSettings) -> Result<Predictions> {
    if indices.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let weights: Vec<f32> = settings
        .class_weights
        .resolve(&ds.class_names)?
        .into_iter()
        .map(|w| w as f32)
        .collect();
    let k = ds.num_classes();
    let mut out = Predictions {
        loss: 0.0,
        accuracy: 0.0,
        probs: Vec::with_capacity(indices.len()),
        preds: Vec::with_capacity(indices.len()),
        labels: Vec::with_capacity(indices.len()),
    };
    let mut rng = rng::stream(0, rng::DROPBLOCK);
    for chunk in indices.chunks(settings.batch_size.max(1)) {
        let images = chunk
            .iter()
            .map(|&i| normalize(&ds.samples[i].image, settings.normalize_mean, settings.normalize_std))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = chunk.iter().map(|&i| ds.samples[i].label).collect();
        let mut tape = Tape::new();
        let x = tape.constant(stack(images)?);
        let logits = model.forward(&mut tape, x, false, &mut rng)?;
        let loss = tape.weighted_cross_entropy(logits, &labels, &weights)?;
        out.loss += tape.value(loss).item()? as f64 * chunk.len() as f64;
        let probs = tape.softmax(logits)?;
        let logit_rows = tape.value(logits).data().chunks(k);
        for (row, p) in logit_rows.zip(tape.value(probs).data().chunks(k)) {
            out.preds.push(argmax(row));
            out.probs.push(p.iter().map(|&v| v as f64).collect());
        }
        out.labels.extend(labels);
    }
    let n = indices.len() as f64;
    out.loss /= n;
    out.accuracy = out.preds.iter().zip(&out.labels).filter(|(p, y)| p == y).count() as f64 / n;
    Ok(out)
}

fn describe<T: Real>(label: &str, t: &Tensor<T>) -> String {
    let vals: Vec<f64> = t.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let finite: Vec<f64> = vals.iter().copied().filter(|v| v.is_finite()).collect();
    let non_finite = vals.len() - finite.len();
    let (lo, hi) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mean = finite.iter().sum::<f64>() / finite.len().max(1) as f64;
    format!("{label}: shape {:?}, min {lo:.4e}, max {hi:.4e}, mean {mean:.4e}, non-finite {non_finite}", t.shape())
}

/// Trains `model` in place. The returned checkpoint holds the weights of
/// the best validation epoch; `model` itself ends at the last epoch.
pub fn train(
    model: &mut Model<f32>,
    ds: &LabeledDataset,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Data(format!(
            "training needs non-empty train and validation sets (got {} and {})",
            train_idx.len(),
            val_idx.len()
        )));
    }
    if model.spec().num_classes != ds.num_classes() {
        return Err(Error::Config(format!(
            "model has {} outputs but the dataset has {} classes",
            model.spec().num_classes,
            ds.num_classes()
        )));
    }
    let weights: Vec<f32> = cfg.class_weights.resolve(&ds.class_names)?.into_iter().map(|w| w as f32).collect();
    let eval = cfg.eval_settings();
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.weight_decay);
    let mut scheduler = Scheduler::new(cfg.schedule, cfg.lr)?;
    let mut mask_rng = rng::stream(cfg.seed, rng::DROPBLOCK);
    let k = ds.num_classes();

    let mut history = Vec::new();
    let mut best: Option<(Checkpoint<f32>, usize)> = None;
    let mut best_acc = f64::NEG_INFINITY;
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs {
        let lr = scheduler.lr(epoch - 1);
        let mut order = train_idx.to_vec();
        order.shuffle(&mut rng::substream(cfg.seed, rng::SHUFFLE, epoch as u64));
        let mut aug_rng = rng::substream(cfg.seed, rng::AUGMENT, epoch as u64);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, hits) = train_step(model, ds, chunk, cfg, &weights, lr, &mut optimizer, &mut aug_rng, &mut mask_rng, k)
                .map_err(|e| match e {
                    Error::NonFinite { diagnostics, .. } => Error::NonFinite {
                        epoch,
                        batch: b,
                        diagnostics,
                    },
                    other => other,
                })?;
            loss_sum += loss * chunk.len() as f64;
            correct += hits;
        }
        let val = evaluate(model, ds, val_idx, &eval)?;
        if !val.loss.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                batch: 0,
                diagnostics: format!("validation loss is {}", val.loss),
            });
        }
        scheduler.observe(val.loss);
        let alphas = model.alphas().unwrap_or_default();
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            train_acc: correct as f64 / train_idx.len() as f64,
            val_loss: val.loss,
            val_acc: val.accuracy,
            lr,
            alpha_mean: models::mean(&alphas),
            alpha_per_block: alphas,
        };
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.4}, val loss {:.4} acc {:.4}, lr {:.2e}",
            record.train_loss,
            record.train_acc,
            record.val_loss,
            record.val_acc,
            lr
        );
        history.push(record);
        if val.accuracy > best_acc {
            best_acc = val.accuracy;
            best = Some((Checkpoint::from_model(model, epoch, best_acc), epoch));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        if cfg.early_stop_patience.is_some_and(|p| epoch - best_epoch >= p) {
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    let (best, best_epoch) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        history,
        best,
        best_epoch,
        stopped_early,
    })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut Model<f32>,
    ds: &LabeledDataset,
    chunk: &[usize],
    cfg: &TrainConfig,
    weights: &[f32],
    lr: f64,
    optimizer: &mut Optimizer<f32>,
    aug_rng: &mut StreamRng,
    mask_rng: &mut StreamRng,
    k: usize,
) -> Result<(f64, usize)> {
    let images = chunk
        .iter()
        .map(|&i| augment(&ds.samples[i].image, &cfg.augment, aug_rng))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = chunk.iter().map(|&i| ds.samples[i].label).collect();
    let batch = stack(images)?;
    let grads = {
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let logits = model.forward(&mut tape, x, true, mask_rng)?;
        let loss = tape.weighted_cross_entropy(logits, &labels, weights)?;
        let lv = tape.value(loss).item()? as f64;
        if !lv.is_finite() {
            return Err(Error::NonFinite {
                epoch: 0,
                batch: 0,
                diagnostics: format!(
                    "loss {lv}; {}; {}; labels {labels:?}; lr {lr:e}",
                    describe("input", tape.value(x)),
                    describe("logits", tape.value(logits))
                ),
            });
        }
        let hits = tape
            .value(logits)
            .data()
            .chunks(k)
            .zip(&labels)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
        (tape.backward(loss)?, lv, hits)
    };
    let (grads, lv, hits) = grads;
    // the tape is gone, so parameter tensors are uniquely owned again and
    // the update below does not copy them
    model.store_mut().load_grads(&grads);
    drop(grads);
    optimizer.step(model.store_mut(), lr)?;
    model.store_mut().zero_grad();
    Ok((lv, hits))
}
