use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Classifier, ImageSubmodel, Mode, ModelInput, Sample};
use crate::error::{Error, Result};
use crate::tensor::sgd_update;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Pretrain,
    #[default]
    Finetune,
}

/// Optimizer and protocol settings, loadable from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub splits: usize,
    pub seed: u64,
    pub mode: Phase,
    /// Parameter-name prefixes held fixed during the main epochs.
    pub frozen_components: BTreeSet<String>,
    /// Epochs run before the main ones, at `warmup_learning_rate`, with
    /// `warmup_frozen` held fixed. Not recorded in the history.
    pub warmup_epochs: usize,
    pub warmup_learning_rate: f64,
    pub warmup_frozen: BTreeSet<String>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self::low_rate()
    }
}

impl TrainingConfig {
    /// 1e-5 for 50 epochs after a 10-epoch decoder warm-up on frozen
    /// transferred encoders.
    pub fn low_rate() -> Self {
        Self {
            learning_rate: 1e-5,
            epochs: 50,
            batch_size: 16,
            splits: 3,
            seed: 0,
            mode: Phase::Finetune,
            frozen_components: BTreeSet::new(),
            warmup_epochs: 10,
            warmup_learning_rate: 1e-2,
            warmup_frozen: ["text.embedding".to_string(), "image.".to_string()].into(),
        }
    }

    /// 1e-2 for 10 epochs, everything trainable from the start.
    pub fn high_rate() -> Self {
        Self {
            learning_rate: 1e-2,
            epochs: 10,
            warmup_epochs: 0,
            ..Self::low_rate()
        }
    }

    pub fn pretrain() -> Self {
        Self {
            learning_rate: 1e-2,
            epochs: 20,
            mode: Phase::Pretrain,
            warmup_epochs: 0,
            ..Self::low_rate()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::usage(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::usage("batch size must be positive"));
        }
        if self.warmup_epochs > 0 && !(self.warmup_learning_rate > 0.0) {
            return Err(Error::usage("warm-up learning rate must be positive"));
        }
        Ok(())
    }
}

/// Index lists into one dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

const VALIDATION_FRACTION: f64 = 0.15;
const TEST_FRACTION: f64 = 0.15;

/// Class-stratified splits.
///
/// With `k > 1` each class is shuffled and dealt round-robin into `k` folds;
/// fold `i` is split `i`'s test set, so the test sets partition the data.
/// From the remaining cases of each class, the first 15% (of that class's
/// total) form the validation set. With `k = 1` each class is cut 70/15/15.
pub fn stratified_split(labels: &[u8], k: usize, seed: u64) -> Result<Vec<Split>> {
    if k == 0 {
        return Err(Error::usage("split count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<Vec<usize>> = Vec::new();
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < k.max(1) {
            return Err(Error::usage(format!(
                "class {class} has {} cases, fewer than {k} splits",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        classes.push(members);
    }
    let mut splits = Vec::with_capacity(k);
    for fold in 0..k {
        let mut split = Split {
            train: Vec::new(),
            validation: Vec::new(),
            test: Vec::new(),
        };
        for members in &classes {
            let n = members.len();
            let n_val = (n as f64 * VALIDATION_FRACTION).round() as usize;
            let (test, rest): (Vec<usize>, Vec<usize>) = if k == 1 {
                let n_test = (n as f64 * TEST_FRACTION).round() as usize;
                (members[..n_test].to_vec(), members[n_test..].to_vec())
            } else {
                let (t, r): (Vec<_>, Vec<_>) =
                    members.iter().enumerate().partition(|(pos, _)| pos % k == fold);
                (t.into_iter().map(|(_, &i)| i).collect(), r.into_iter().map(|(_, &i)| i).collect())
            };
            let n_val = n_val.min(rest.len().saturating_sub(1));
            split.test.extend(test);
            split.validation.extend(&rest[..n_val]);
            split.train.extend(&rest[n_val..]);
        }
        for v in [&mut split.train, &mut split.validation, &mut split.test] {
            v.sort_unstable();
        }
        splits.push(split);
    }
    Ok(splits)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub probabilities: Vec<f64>,
}

/// Inference-mode accuracy at threshold 0.5. Never mutates the model.
pub fn evaluate(model: &Classifier, cases: &[&Sample]) -> Result<Evaluation> {
    if cases.is_empty() {
        return Err(Error::usage("cannot evaluate on an empty case set"));
    }
    let mut probabilities = Vec::with_capacity(cases.len());
    let (mut correct, mut loss) = (0usize, 0.0);
    for s in cases {
        let p = model.predict(ModelInput::from(*s))?;
        correct += usize::from((p >= 0.5) == (s.label == 1));
        let pc = p.clamp(crate::tensor::BCE_EPSILON, 1.0 - crate::tensor::BCE_EPSILON);
        loss -= if s.label == 1 { pc.ln() } else { (1.0 - pc).ln() };
        probabilities.push(p);
    }
    Ok(Evaluation {
        accuracy: correct as f64 / cases.len() as f64,
        mean_loss: loss / cases.len() as f64,
        probabilities,
    })
}

/// Chunks `order` into batches of `size`; a trailing singleton joins the
/// previous batch so batch statistics are never computed from one example.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        let last = out.len() - 1;
        out[last] = &order[start..];
    }
    out
}

/// One pass of mini-batch SGD over `indices` in a seeded shuffled order,
/// followed by re-estimating the batch-norm running statistics over the
/// same cases (skipped when batch norm is frozen). Returns the mean batch
/// loss.
pub fn train_epoch(
    model: &mut Classifier,
    samples: &[Sample],
    indices: &[usize],
    learning_rate: f64,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::usage("cannot train on an empty case set"));
    }
    let mut order = indices.to_vec();
    order.shuffle(rng);
    let mut total = 0.0;
    let groups = batches(&order, batch_size);
    for group in &groups {
        let batch: Vec<&Sample> = group.iter().map(|&i| &samples[i]).collect();
        let (loss, _) = model.train_batch(&batch)?;
        sgd_update(&mut model.store, learning_rate)?;
        total += loss;
    }
    if model.batch_norm_trainable() {
        model.recalibrate_batch_norm(&pick(samples, indices))?;
    }
    Ok(total / groups.len() as f64)
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

fn apply_frozen(model: &mut Classifier, prefixes: &BTreeSet<String>) {
    model.set_frozen("", false);
    for p in prefixes {
        model.set_frozen(p, true);
    }
}

fn pick<'a>(samples: &'a [Sample], idx: &[usize]) -> Vec<&'a Sample> {
    idx.iter().map(|&i| &samples[i]).collect()
}

fn record(
    model: &Classifier,
    samples: &[Sample],
    split: &Split,
    split_index: usize,
    epoch: usize,
) -> Result<EpochRecord> {
    let train = evaluate(model, &pick(samples, &split.train))?;
    let val_acc = if split.validation.is_empty() {
        f64::NAN
    } else {
        evaluate(model, &pick(samples, &split.validation))?.accuracy
    };
    Ok(EpochRecord {
        epoch,
        split: split_index,
        train_loss: train.mean_loss,
        train_acc: train.accuracy,
        val_acc,
    })
}

/// Trains `model` on the split's training cases.
///
/// Row 0 of the returned history is the model before any main-phase update;
/// row `e` follows epoch `e`. Losses and accuracies are recomputed over the
/// whole training set in inference mode. `on_epoch` is called after every
/// main epoch (test-set tracking, progress output).
pub fn finetune_target(
    model: &mut Classifier,
    samples: &[Sample],
    split: &Split,
    split_index: usize,
    config: &TrainingConfig,
    on_epoch: &mut dyn FnMut(usize, &Classifier) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(Error::usage("training split is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (split_index as u64).wrapping_mul(0x9e37_79b9));
    if config.warmup_epochs > 0 {
        apply_frozen(model, &config.warmup_frozen);
        for _ in 0..config.warmup_epochs {
            train_epoch(
                model,
                samples,
                &split.train,
                config.warmup_learning_rate,
                config.batch_size,
                &mut rng,
            )?;
        }
    }
    apply_frozen(model, &config.frozen_components);
    let mut history = vec![record(model, samples, split, split_index, 0)?];
    for epoch in 1..=config.epochs {
        train_epoch(model, samples, &split.train, config.learning_rate, config.batch_size, &mut rng)?;
        history.push(record(model, samples, split, split_index, epoch)?);
        on_epoch(epoch, model)?;
    }
    model.set_frozen("", false);
    Ok(history)
}

/// Trains the image encoder under a temporary decoder head on source
/// labels, returning the trained encoder and per-epoch training accuracy.
pub fn pretrain_source(
    image: ImageSubmodel,
    samples: &[Sample],
    config: &TrainingConfig,
    hidden: usize,
) -> Result<(ImageSubmodel, Vec<EpochRecord>)> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::usage("cannot pretrain on an empty dataset"));
    }
    let mut model = Classifier::new(Mode::ImageOnly, None, Some(image), hidden, config.seed)?;
    let all: Vec<usize> = (0..samples.len()).collect();
    let split = Split {
        train: all.clone(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    apply_frozen(&mut model, &config.frozen_components);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        train_epoch(&mut model, samples, &all, config.learning_rate, config.batch_size, &mut rng)?;
        history.push(record(&model, samples, &split, 0, epoch)?);
    }
    model.set_frozen("", false);
    let encoder = model.image_submodel().expect("image-only model");
    Ok((encoder, history))
}

/// CSV with columns `epoch,split,train_loss,train_acc,val_acc`.
pub fn write_history_csv(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_err(path, e)))
        .collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!("checked io kind"),
        }
    } else {
        Error::Malformed(format!("{}: {e}", path.display()))
    }
}
