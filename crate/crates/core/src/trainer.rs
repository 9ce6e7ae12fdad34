//! Pretraining, fine-tuning with frozen groups, checkpoints, cross-validation
//! and evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging_io::{SlicePrediction, PATCH_SIZE};
use crate::metrics::{aggregate_report, case_metrics, pool_reports, Aggregation, MetricsReport, PooledSummary};
use crate::network::{Mode, Model, ModelConfig, ParamKind};
use crate::objectives::{total_loss, LossValues, LossWeights};
use crate::roi_pipeline::{augment_flip, SlicePatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Constant learning rate.
    Pretrain,
    /// Step decay of the learning rate.
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_period_epochs: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub std_enabled: bool,
    pub loss_weights: LossWeights,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            phase: Phase::Pretrain,
            epochs: 200,
            batch_size: 10,
            lr0: 1e-3,
            decay_factor: 1.0,
            decay_period_epochs: 5,
            weight_decay: 1e-8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            std_enabled: false,
            loss_weights: LossWeights::default(),
        }
    }

    pub fn finetune() -> Self {
        Self {
            phase: Phase::Finetune,
            epochs: 50,
            decay_factor: 0.75,
            std_enabled: true,
            ..Self::pretrain()
        }
    }

    /// `epochs = 0` is only meaningful when resuming from a checkpoint.
    pub fn validate(&self, resuming: bool) -> Result<()> {
        if self.epochs == 0 && !resuming {
            return Err(Error::Config("train.epochs must be > 0 unless resuming from a checkpoint".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be > 0".into()));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::Config(format!("train.lr0 must be > 0, got {}", self.lr0)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("train.decay_factor must lie in (0,1], got {}", self.decay_factor)));
        }
        if self.decay_period_epochs == 0 {
            return Err(Error::Config("train.decay_period_epochs must be > 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("train.weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        self.loss_weights.validate()
    }
}

/// Learning rate for a zero-based epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    match cfg.phase {
        Phase::Pretrain => cfg.lr0,
        Phase::Finetune => {
            let k = (epoch / cfg.decay_period_epochs.max(1)) as i32;
            cfg.lr0 * cfg.decay_factor.powi(k)
        }
    }
}

/// Parameter groups excluded from optimization.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeSpec {
    pub frozen_groups: BTreeSet<String>,
}

impl FreezeSpec {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(groups: I) -> Self {
        Self {
            frozen_groups: groups.into_iter().map(Into::into).collect(),
        }
    }
}

/// Marks groups as frozen: no optimizer updates, no weight decay, and
/// batch-norm statistics held fixed.
pub fn apply_freeze(model: &mut Model, spec: &FreezeSpec) -> Result<()> {
    model.store_mut().set_frozen(spec.frozen_groups.clone())
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_dice: f64,
    pub loss_bce_seg: f64,
    pub loss_bce_cls: f64,
    /// Dice of thresholded training predictions, pooled over the epoch.
    pub train_dice: f64,
}

pub fn write_epoch_log(rows: &[EpochLog], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A batch as model-ready tensors.
pub struct Batch {
    pub images: Tensor,
    pub masks: Tensor,
    pub labels: Tensor,
}

pub fn make_batch(patches: &[&SlicePatch], dtype: DType) -> Result<Batch> {
    let n = patches.len();
    let hw = PATCH_SIZE * PATCH_SIZE;
    let mut images = Vec::with_capacity(n * hw);
    let mut masks = Vec::with_capacity(n * hw);
    let mut labels = Vec::with_capacity(n);
    for p in patches {
        if p.image.dim() != (PATCH_SIZE, PATCH_SIZE) {
            return Err(Error::Shape(format!("patch {}:{} is {:?}", p.lesion_id, p.slice_index, p.image.dim())));
        }
        images.extend(p.image.iter().copied());
        masks.extend(p.mask.iter().map(|&m| m as f32));
        labels.push(p.class_label as f32);
    }
    let shape = (n, 1, PATCH_SIZE, PATCH_SIZE);
    Ok(Batch {
        images: Tensor::from_vec(images, shape, &Device::Cpu)?.to_dtype(dtype)?,
        masks: Tensor::from_vec(masks, shape, &Device::Cpu)?.to_dtype(dtype)?,
        labels: Tensor::from_vec(labels, n, &Device::Cpu)?.to_dtype(dtype)?,
    })
}

fn confusion(x: &Tensor, g: &Tensor, threshold: f64) -> Result<(u64, u64, u64)> {
    let p = x.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let t = g.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&pv, &tv) in p.iter().zip(&t) {
        match (pv >= threshold, tv > 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Ok((tp, fp, fn_))
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Loss components of every optimizer step, in order.
    pub steps: Vec<LossValues>,
}

/// Trains `model` in place.
///
/// Each epoch shuffles the dataset with a generator seeded from `cfg.seed`,
/// applies random flips, and takes one AdamW step per mini-batch. When
/// `resume` is given its weights are loaded first. When `out_dir` is given
/// the final checkpoint and `train_log.csv` are written there.
pub fn train(
    model: &mut Model,
    dataset: &[SlicePatch],
    cfg: &TrainConfig,
    freeze: &FreezeSpec,
    resume: Option<&Path>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate(resume.is_some())?;
    if dataset.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Some(dir) = resume {
        load_checkpoint(model, dir)?;
    }
    apply_freeze(model, freeze)?;

    let mut opt = AdamW::new(
        model.store().optimizable(),
        ParamsAdamW {
            lr: cfg.lr0,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        },
    )?;
    let dtype = model.store().dtype();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut outcome = TrainOutcome {
        log: Vec::with_capacity(cfg.epochs),
        steps: Vec::new(),
    };

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        opt.set_learning_rate(lr);
        order.shuffle(&mut rng);
        let mut sums = LossValues::default();
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let augmented: Vec<SlicePatch> = chunk.iter().map(|&i| augment_flip(&dataset[i], &mut rng)).collect();
            let refs: Vec<&SlicePatch> = augmented.iter().collect();
            let batch = make_batch(&refs, dtype)?;
            let out = model.forward(&batch.images, Mode::Train, cfg.std_enabled)?;
            let terms = total_loss(&out.x, &batch.masks, &out.c, &batch.labels, cfg.loss_weights)?;
            let v = terms.values()?;
            if ![v.total, v.dice, v.bce_seg, v.bce_cls].iter().all(|x| x.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: format!(
                        "dice {} bce_seg {} bce_cls {}",
                        v.dice, v.bce_seg, v.bce_cls
                    ),
                });
            }
            let grads = terms.total.backward()?;
            opt.step(&grads)?;

            let (a, p, n) = confusion(&out.x, &batch.masks, 0.5)?;
            tp += a;
            fp += p;
            fn_ += n;
            sums.total += v.total;
            sums.dice += v.dice;
            sums.bce_seg += v.bce_seg;
            sums.bce_cls += v.bce_cls;
            batches += 1;
            outcome.steps.push(v);
        }
        let k = batches as f64;
        let denom = 2 * tp + fp + fn_;
        let row = EpochLog {
            epoch,
            lr,
            loss_total: sums.total / k,
            loss_dice: sums.dice / k,
            loss_bce_seg: sums.bce_seg / k,
            loss_bce_cls: sums.bce_cls / k,
            train_dice: if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 },
        };
        log::info!(
            "epoch {epoch}: lr {lr:.3e} loss {:.5} (dice {:.5}, bce_seg {:.5}, bce_cls {:.5}) train dice {:.4}",
            row.loss_total,
            row.loss_dice,
            row.loss_bce_seg,
            row.loss_bce_cls,
            row.train_dice
        );
        outcome.log.push(row);
    }

    if let Some(dir) = out_dir {
        save_checkpoint(model, &dir.join("checkpoint"), cfg.epochs, cfg.phase)?;
        write_epoch_log(&outcome.log, &dir.join("train_log.csv"))?;
    }
    Ok(outcome)
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const CHECKPOINT_METADATA: &str = "metadata.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub group: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub format_version: u32,
    pub epoch: usize,
    pub phase: Phase,
    pub config_hash: String,
    pub groups: Vec<String>,
    pub tensors: Vec<TensorRecord>,
}

/// Writes metadata plus one little-endian `f32` blob per tensor.
pub fn save_checkpoint(model: &Model, dir: &Path, epoch: usize, phase: Phase) -> Result<CheckpointMetadata> {
    let blobs = dir.join("tensors");
    fs::create_dir_all(&blobs).map_err(|e| Error::io(&blobs, e))?;
    let values = model.store().snapshot()?;
    let mut tensors = Vec::new();
    for (name, entry) in model.store().entries() {
        let file = format!("tensors/{name}.bin");
        let bytes: Vec<u8> = values[name].iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        tensors.push(TensorRecord {
            name: name.clone(),
            group: entry.group.clone(),
            kind: entry.kind,
            shape: entry.var.dims().to_vec(),
            file,
        });
    }
    let meta = CheckpointMetadata {
        format_version: CHECKPOINT_FORMAT_VERSION,
        epoch,
        phase,
        config_hash: model.config().hash(),
        groups: model.store().groups(),
        tensors,
    };
    let path = dir.join(CHECKPOINT_METADATA);
    fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
    Ok(meta)
}

pub fn read_checkpoint_metadata(dir: &Path) -> Result<CheckpointMetadata> {
    let path = dir.join(CHECKPOINT_METADATA);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMetadata =
        serde_json::from_slice(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if meta.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {} (expected {CHECKPOINT_FORMAT_VERSION})",
            meta.format_version
        )));
    }
    Ok(meta)
}

/// Loads every tensor of `model` from `dir`. The checkpoint must hold
/// exactly the model's tensors with identical shapes.
pub fn load_checkpoint(model: &Model, dir: &Path) -> Result<CheckpointMetadata> {
    let meta = read_checkpoint_metadata(dir)?;
    if meta.config_hash != model.config().hash() {
        log::warn!("checkpoint {} was written by a different model configuration", dir.display());
    }
    let records: BTreeMap<&str, &TensorRecord> = meta.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let store = model.store();
    if let Some(extra) = records.keys().find(|k| store.get(k).is_none()) {
        return Err(Error::Checkpoint(format!("checkpoint tensor {extra} does not exist in the model")));
    }
    for (name, entry) in store.entries() {
        let rec = records
            .get(name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks tensor {name}")))?;
        if rec.shape != entry.var.dims() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                rec.shape,
                entry.var.dims()
            )));
        }
        let path = dir.join(&rec.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let expected = 4 * rec.shape.iter().product::<usize>();
        if bytes.len() != expected {
            return Err(Error::Truncation {
                path,
                expected: expected as u64,
                found: bytes.len() as u64,
            });
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        store.assign(name, &rec.shape, &values)?;
    }
    Ok(meta)
}

/// A named subset of the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    /// Every slice with an assigned fold.
    Train,
    /// Fold 0.
    Val,
    /// Slices held out from every fold.
    Test,
    Fold(usize),
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => s
                .strip_prefix("fold")
                .and_then(|k| k.parse().ok())
                .map(Split::Fold)
                .ok_or_else(|| Error::Config(format!("unknown split {s:?}; expected train, val, test or foldN"))),
        }
    }
}

pub fn select_split(dataset: &[SlicePatch], split: Split) -> Vec<SlicePatch> {
    dataset
        .iter()
        .filter(|p| match split {
            Split::Train => p.fold.is_some(),
            Split::Val => p.fold == Some(0),
            Split::Test => p.fold.is_none(),
            Split::Fold(k) => p.fold == Some(k),
        })
        .cloned()
        .collect()
}

/// Settings for [`evaluate_model`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threshold: f64,
    pub aggregation: Aggregation,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            aggregation: Aggregation::PerLesion,
            batch_size: 10,
        }
    }
}

/// Model probabilities per slice, in dataset order.
pub fn predict(model: &Model, dataset: &[SlicePatch], std_enabled: bool, batch_size: usize) -> Result<Vec<Array2<f32>>> {
    let mut out = Vec::with_capacity(dataset.len());
    let refs: Vec<&SlicePatch> = dataset.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let batch = make_batch(chunk, model.store().dtype())?;
        let x = model.forward(&batch.images, Mode::Eval, std_enabled)?.x;
        let v = x.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        for item in v.chunks(PATCH_SIZE * PATCH_SIZE) {
            out.push(Array2::from_shape_vec((PATCH_SIZE, PATCH_SIZE), item.to_vec()).expect("patch size"));
        }
    }
    Ok(out)
}

/// Scores binary predictions against the dataset masks.
pub fn evaluate_predictions(predictions: &[Array2<bool>], dataset: &[SlicePatch], aggregation: Aggregation) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    if predictions.len() != dataset.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} slices",
            predictions.len(),
            dataset.len()
        )));
    }
    let cases = predictions
        .iter()
        .zip(dataset)
        .map(|(pred, p)| {
            let gt = p.mask.mapv(|m| m > 0);
            case_metrics(pred, &gt, p.spacing_yx, &p.lesion_id, p.slice_index)
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate_report(cases, aggregation)
}

/// Scores stored predictions, matched to dataset slices by lesion and slice
/// index. Every dataset slice needs a prediction; extra predictions are ignored.
pub fn evaluate_stored(predictions: &[SlicePrediction], dataset: &[SlicePatch], aggregation: Aggregation) -> Result<MetricsReport> {
    let by_key: BTreeMap<(&str, i32), &SlicePrediction> = predictions
        .iter()
        .map(|p| ((p.lesion_id.as_str(), p.slice_index), p))
        .collect();
    let masks = dataset
        .iter()
        .map(|p| {
            by_key
                .get(&(p.lesion_id.as_str(), p.slice_index))
                .map(|pred| pred.mask.clone())
                .ok_or_else(|| Error::Integrity(format!("no prediction for slice {}:{}", p.lesion_id, p.slice_index)))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(&masks, dataset, aggregation)
}

/// Runs the model in evaluation mode, thresholds `x`, and aggregates metrics.
pub fn evaluate_model(model: &Model, dataset: &[SlicePatch], std_enabled: bool, eval: &EvalConfig) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let probs = predict(model, dataset, std_enabled, eval.batch_size)?;
    let masks: Vec<Array2<bool>> = probs.iter().map(|p| p.mapv(|v| v as f64 >= eval.threshold)).collect();
    evaluate_predictions(&masks, dataset, eval.aggregation)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossValidation {
    pub folds: Vec<MetricsReport>,
    pub pooled: PooledSummary,
}

/// Trains one model per fold on the other folds and evaluates it on the
/// held-out fold. Slices without a fold are ignored.
pub fn crossvalidate(
    dataset: &[SlicePatch],
    model_cfg: &ModelConfig,
    model_seed: u64,
    cfg: &TrainConfig,
    freeze: &FreezeSpec,
    resume: Option<&Path>,
    eval: &EvalConfig,
) -> Result<CrossValidation> {
    let folds: BTreeSet<usize> = dataset.iter().filter_map(|p| p.fold).collect();
    if folds.len() < 2 {
        return Err(Error::Config(format!(
            "cross-validation needs at least two assigned folds, found {}",
            folds.len()
        )));
    }
    let k = folds.iter().max().expect("nonempty") + 1;
    if folds.len() != k {
        return Err(Error::Config(format!("folds are not contiguous: {folds:?}")));
    }
    let mut reports = Vec::with_capacity(k);
    for fold in 0..k {
        let train_set: Vec<SlicePatch> = dataset.iter().filter(|p| p.fold.is_some_and(|f| f != fold)).cloned().collect();
        let held_out = select_split(dataset, Split::Fold(fold));
        let mut model = Model::new(model_cfg, model_seed)?;
        train(&mut model, &train_set, cfg, freeze, resume, None)?;
        let report = evaluate_model(&model, &held_out, cfg.std_enabled, eval)?;
        log::info!("fold {fold}: dice {:?}", report.summary.dice);
        reports.push(report);
    }
    let pooled = pool_reports(&reports);
    Ok(CrossValidation { folds: reports, pooled })
}
