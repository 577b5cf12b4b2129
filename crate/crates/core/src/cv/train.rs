use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{class_weights, stratified_holdout, stratified_kfold, weighted_sample, ExperimentError};
use crate::metrics::{self, argmax, AggregateReport, MetricsReport};
use crate::model::{one_hot, Model, ModelSpec};
use crate::optim::{best_epoch, cosine_lr, early_stop, AdamState, ScheduleConfig};
use crate::patch::{AugmentPolicy, Augmentation};
use crate::tensor::{Graph, ParamStore, Tensor, DEFAULT_LOG_EPSILON};
use crate::{par, seed};

type Result<T, E = ExperimentError> = std::result::Result<T, E>;

const SAMPLER_STREAM: u64 = 0x7361_6d70;
const AUGMENT_STREAM: u64 = 0x6175_676d;
const INIT_STREAM: u64 = 0x696e_6974;
const EVAL_BATCH: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub schedule: ScheduleConfig,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub patience: usize,
    pub seed: u64,
    pub augment: AugmentPolicy,
    /// Share of every class held out for testing.
    pub test_fraction: f64,
    pub k: usize,
    /// Upper bound on memory spent caching frozen-prefix activations.
    pub cache_budget_mb: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            schedule: ScheduleConfig::default(),
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            patience: 10,
            seed: 0,
            augment: AugmentPolicy::default(),
            test_fraction: 0.1,
            k: 5,
            cache_budget_mb: 1024,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ExperimentError::Config(msg));
        if !(1..=4096).contains(&self.batch_size) {
            return bad(format!("batch_size {} outside 1..=4096", self.batch_size));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} outside [0, 1)"));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return bad(format!("adam_epsilon {} must be positive", self.adam_epsilon));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(0.0..0.5).contains(&self.test_fraction) {
            return bad(format!("test_fraction {} outside [0, 0.5)", self.test_fraction));
        }
        self.schedule.validate()?;
        Ok(())
    }
}

/// One completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub fold: usize,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "fold,epoch,lr,train_loss,train_acc,val_loss,val_acc";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{},{},{},{}",
            self.fold, self.epoch, self.lr, self.train_loss, self.train_acc, self.val_loss, self.val_acc
        )
    }
}

pub fn epoch_logs_csv(logs: &[EpochLog]) -> String {
    let mut s = String::from(EpochLog::CSV_HEADER);
    s.push('\n');
    for l in logs {
        s.push_str(&l.csv_row());
        s.push('\n');
    }
    s
}

/// Labelled square images stored planar (`[C, H, W]` per sample) in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    shape: [usize; 3],
    data: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl SampleSet {
    pub fn new(shape: [usize; 3], data: Vec<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let per: usize = shape.iter().product();
        if shape[1] != shape[2] {
            return Err(ExperimentError::DataUnavailable(format!("samples must be square, got {shape:?}")));
        }
        if per == 0 || data.len() != per * labels.len() {
            return Err(ExperimentError::DataUnavailable(format!(
                "{} values for {} samples of shape {shape:?}",
                data.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(ExperimentError::DataUnavailable(format!("label {l} with {num_classes} classes")));
        }
        Ok(Self { shape, data, labels, num_classes })
    }

    pub fn from_images(images: &[RgbImage], labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let Some(first) = images.first() else {
            return Err(ExperimentError::DataUnavailable("no images".into()));
        };
        let (w, h) = first.dimensions();
        if let Some(i) = images.iter().position(|im| im.dimensions() != (w, h)) {
            return Err(ExperimentError::DataUnavailable(format!(
                "image {i} is {:?}, expected {w}x{h}",
                images[i].dimensions()
            )));
        }
        let planes = par::map(images, |im| {
            let n = (w * h) as usize;
            let mut v = vec![0.0; 3 * n];
            for (i, p) in im.pixels().enumerate() {
                for c in 0..3 {
                    v[c * n + i] = f64::from(p[c]) / 255.0;
                }
            }
            v
        });
        Self::new([3, h as usize, w as usize], planes.concat(), labels, num_classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let per: usize = self.shape.iter().product();
        &self.data[i * per..(i + 1) * per]
    }

    fn augmented(&self, i: usize, aug: Augmentation) -> Vec<f64> {
        aug.apply_planar(self.sample(i), self.shape[0], self.shape[1])
    }

    fn check_indices(&self, idx: &[usize]) -> Result<()> {
        match idx.iter().find(|&&i| i >= self.len()) {
            Some(i) => Err(ExperimentError::DataUnavailable(format!("sample {i} of {}", self.len()))),
            None => Ok(()),
        }
    }
}

/// Activations after the frozen prefix of a model, keyed by sample and
/// dihedral transform. Frozen layers never change during training, so these
/// are exact, and every sample goes through the same per-sample kernels, so a
/// cached value is bit-identical to a recomputed one.
#[derive(Debug, Default)]
pub struct PrefixCache {
    key: Option<(usize, Vec<Vec<f64>>)>,
    slots: Vec<Option<Arc<[f64]>>>,
    /// Per-sample activation shape.
    shape: Vec<usize>,
    budget_bytes: usize,
}

impl PrefixCache {
    pub fn new(budget_mb: usize) -> Self {
        Self { key: None, slots: Vec::new(), shape: Vec::new(), budget_bytes: budget_mb << 20 }
    }

    /// Drops entries computed with a different prefix. Returns whether caching is on.
    fn prepare(&mut self, model: &Model, data: &SampleSet, variants: usize) -> Result<bool> {
        let boundary = model.frozen_prefix();
        if boundary == 0 {
            return Ok(false);
        }
        let probe = Tensor::new(vec![1, data.shape[0], data.shape[1], data.shape[2]], data.sample(0).to_vec())?;
        let shape = model.features(&probe, boundary)?.shape()[1..].to_vec();
        let width: usize = shape.iter().product();
        if width * 8 * data.len() * variants > self.budget_bytes {
            log::info!("prefix cache would exceed budget, computing activations on the fly");
            return Ok(false);
        }
        let frozen: Vec<Vec<f64>> =
            model.params().iter().filter(|p| p.frozen()).map(|p| p.tensor().values().to_vec()).collect();
        let key = Some((boundary, frozen));
        if self.key != key || self.slots.len() != data.len() * 8 {
            self.key = key;
            self.slots = vec![None; data.len() * 8];
            self.shape = shape;
        }
        Ok(true)
    }
}

/// Builds the network input for a batch, either raw pixels or cached prefix
/// activations. Returns the tensor and the layer index it feeds.
fn batch_input(
    model: &Model,
    data: &SampleSet,
    items: &[(usize, Augmentation)],
    cache: Option<&mut PrefixCache>,
) -> Result<(Tensor, usize)> {
    let [c, h, w] = data.shape;
    let raw = |items: &[(usize, Augmentation)]| -> Result<Tensor> {
        let rows = par::map(items, |&(i, a)| data.augmented(i, a));
        Ok(Tensor::new(vec![items.len(), c, h, w], rows.concat())?)
    };
    let Some(cache) = cache else {
        return Ok((raw(items)?, 0));
    };
    let boundary = model.frozen_prefix();
    let slot = |&(i, a): &(usize, Augmentation)| i * 8 + a.canonical_index();
    let mut missing: Vec<(usize, Augmentation)> = Vec::new();
    for it in items {
        if cache.slots[slot(it)].is_none() && !missing.iter().any(|m| slot(m) == slot(it)) {
            missing.push(*it);
        }
    }
    for chunk in missing.chunks(EVAL_BATCH) {
        let feats = model.features(&raw(chunk)?, boundary)?;
        let width = feats.numel() / chunk.len();
        for (it, row) in chunk.iter().zip(feats.values().chunks(width)) {
            cache.slots[slot(it)] = Some(Arc::from(row));
        }
    }
    let rows: Vec<Arc<[f64]>> = items.iter().map(|it| cache.slots[slot(it)].clone().expect("filled above")).collect();
    let mut shape = vec![items.len()];
    shape.extend_from_slice(&cache.shape);
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok((Tensor::new(shape, flat)?, boundary))
}

/// Class probabilities for the given samples, untransformed.
pub fn predict(model: &Model, data: &SampleSet, idx: &[usize], mut cache: Option<&mut PrefixCache>) -> Result<Vec<Vec<f64>>> {
    data.check_indices(idx)?;
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let items: Vec<_> = chunk.iter().map(|&i| (i, Augmentation::IDENTITY)).collect();
        let (x, from) = batch_input(model, data, &items, cache.as_deref_mut())?;
        let mut g = Graph::new();
        let xn = g.input(x);
        let p = model.forward_range(&mut g, xn, from, model.depth())?;
        out.extend(g.value(p).values().chunks(data.num_classes).map(<[f64]>::to_vec));
    }
    Ok(out)
}

fn loss_and_accuracy(probs: &[Vec<f64>], labels: &[usize]) -> (f64, f64) {
    let n = labels.len().max(1) as f64;
    let loss = probs.iter().zip(labels).map(|(p, &l)| -p[l].max(DEFAULT_LOG_EPSILON).ln()).sum::<f64>() / n;
    let correct = probs.iter().zip(labels).filter(|(p, &l)| argmax(p) == l).count();
    (loss, 100.0 * correct as f64 / n)
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    /// Model restored to its best-validation epoch.
    pub model: Model,
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
}

fn index_by_class(labels: &[usize], idx: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut by = vec![Vec::new(); num_classes];
    for &i in idx {
        by[labels[i]].push(i);
    }
    by
}

/// Trains `model` on `train`, validating on `val` after each epoch, and
/// restores the parameters of the best validation epoch.
pub fn run_fold(
    mut model: Model,
    train: &[usize],
    val: &[usize],
    data: &SampleSet,
    cfg: &TrainConfig,
    fold: usize,
    cache: &mut PrefixCache,
) -> Result<FoldOutcome> {
    cfg.validate()?;
    data.check_indices(train)?;
    data.check_indices(val)?;
    if train.is_empty() || val.is_empty() {
        return Err(ExperimentError::DataUnavailable("empty training or validation subset".into()));
    }
    let nc = data.num_classes;
    let by_class = index_by_class(&data.labels, train, nc);
    let present: Vec<usize> = by_class.iter().map(Vec::len).filter(|&c| c > 0).collect();
    let mut present_w = class_weights(&present)?.into_iter();
    let weights: Vec<f64> = by_class.iter().map(|m| if m.is_empty() { 0.0 } else { present_w.next().unwrap_or(0.0) }).collect();

    let variants = if cfg.augment.is_active() { 8 } else { 1 };
    let use_cache = cache.prepare(&model, data, variants)?;
    let val_labels: Vec<usize> = val.iter().map(|&i| data.labels[i]).collect();
    let mut adam = AdamState::new(cfg.beta1, cfg.beta2, cfg.adam_epsilon);
    let mut logs: Vec<EpochLog> = Vec::new();
    let mut val_losses = Vec::new();
    let mut best: Option<(f64, ParamStore)> = None;

    for epoch in 0..cfg.schedule.total_epochs {
        let lr = cosine_lr(epoch, &cfg.schedule);
        let draws = weighted_sample(&weights, &by_class, train.len(), seed::derive(cfg.seed, &[SAMPLER_STREAM, fold as u64, epoch as u64]));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in draws.chunks(cfg.batch_size) {
            let items: Vec<(usize, Augmentation)> = batch
                .iter()
                .map(|&i| {
                    let mut rng = seed::rng(cfg.seed, &[AUGMENT_STREAM, cfg.augment.seed, i as u64, epoch as u64]);
                    (i, cfg.augment.draw(&mut rng))
                })
                .collect();
            let (x, from) = batch_input(&model, data, &items, use_cache.then_some(&mut *cache))?;
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let y = one_hot(&labels, nc);
            let mut g = Graph::new();
            let xn = g.input(x);
            let p = model.forward_range(&mut g, xn, from, model.depth())?;
            let loss = g.cross_entropy(p, &y, DEFAULT_LOG_EPSILON)?;
            let probs = g.value(p).values();
            correct += probs.chunks(nc).zip(&labels).filter(|(r, &l)| argmax(r) == l).count();
            loss_sum += g.value(loss).values()[0] * batch.len() as f64;
            let grads = g.backward(loss)?;
            adam.step(model.params_mut(), &grads, lr)?;
        }
        let n = draws.len().max(1) as f64;
        let probs = predict(&model, data, val, use_cache.then_some(&mut *cache))?;
        let (val_loss, val_acc) = loss_and_accuracy(&probs, &val_labels);
        let train_loss = loss_sum / n;
        if !val_loss.is_finite() || !train_loss.is_finite() {
            return Err(ExperimentError::NonFinite { fold, epoch });
        }
        logs.push(EpochLog { fold, epoch, lr, train_loss, train_acc: 100.0 * correct as f64 / n, val_loss, val_acc });
        log::debug!("fold {fold} epoch {epoch}: train {train_loss:.4} val {val_loss:.4} acc {val_acc:.2}");
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, model.params().clone()));
        }
        val_losses.push(val_loss);
        if early_stop(&val_losses, cfg.patience) {
            break;
        }
    }
    if let Some((_, params)) = best {
        *model.params_mut() = params;
    }
    Ok(FoldOutcome { model, logs, best_epoch: best_epoch(&val_losses).unwrap_or(0) })
}

/// Result of a full cross-validated run.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub test: Vec<usize>,
    pub folds: Vec<FoldOutcome>,
    /// Per-fold test-set scores, rows aligned with `test`.
    pub test_scores: Vec<Vec<Vec<f64>>>,
    pub reports: Vec<MetricsReport>,
    pub aggregate: AggregateReport,
}

impl ExperimentOutcome {
    pub fn logs(&self) -> Vec<EpochLog> {
        self.folds.iter().flat_map(|f| f.logs.iter().cloned()).collect()
    }
}

/// Fresh model for one fold: head initialized under the fold seed, extractor
/// taken from `pretrained` where names and shapes match.
pub fn fold_model(spec: &ModelSpec, pretrained: Option<&ParamStore>, cfg: &TrainConfig, fold: usize) -> Result<Model> {
    let mut model = Model::new(spec.clone(), seed::derive(cfg.seed, &[INIT_STREAM, fold as u64]))?;
    if let Some(src) = pretrained {
        let copied = model.load_extractor(src);
        log::debug!("fold {fold}: loaded {copied} pretrained extractor tensors");
    }
    Ok(model)
}

/// Held-out test indices plus per-fold validation indices, all into the full
/// sample set. Training indices of a fold are the other folds, ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentSplit {
    pub test: Vec<usize>,
    pub folds: Vec<Vec<usize>>,
}

impl ExperimentSplit {
    /// Stratified holdout of `cfg.test_fraction`, then stratified `cfg.k`-fold
    /// on the remainder.
    pub fn plan(labels: &[usize], cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (pool, test) = stratified_holdout(labels, cfg.test_fraction, cfg.seed);
        if test.is_empty() {
            return Err(ExperimentError::DataUnavailable("test split is empty".into()));
        }
        let pool_labels: Vec<usize> = pool.iter().map(|&i| labels[i]).collect();
        let split = stratified_kfold(&pool_labels, cfg.k, cfg.seed)?;
        let folds = split.folds().iter().map(|f| f.iter().map(|&j| pool[j]).collect()).collect();
        Ok(Self { test, folds })
    }

    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn validation(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    pub fn train(&self, fold: usize) -> Vec<usize> {
        let mut train: Vec<usize> =
            self.folds.iter().enumerate().filter(|&(i, _)| i != fold).flat_map(|(_, f)| f.iter().copied()).collect();
        train.sort_unstable();
        train
    }

    /// Checks that the test split and folds are disjoint, non-empty and inside `0..len`.
    pub fn check(&self, len: usize) -> Result<()> {
        if self.test.is_empty() || self.folds.len() < 2 || self.folds.iter().any(Vec::is_empty) {
            return Err(ExperimentError::DataUnavailable("split has an empty part".into()));
        }
        let mut seen = vec![false; len];
        for &i in self.test.iter().chain(self.folds.iter().flatten()) {
            match seen.get_mut(i) {
                None => return Err(ExperimentError::DataUnavailable(format!("index {i} outside {len} samples"))),
                Some(true) => return Err(ExperimentError::DataUnavailable(format!("index {i} appears twice"))),
                Some(s) => *s = true,
            }
        }
        Ok(())
    }
}

/// Holds out a stratified test split, runs stratified k-fold on the rest and
/// scores every fold's best model on the test split.
pub fn run_experiment(
    spec: &ModelSpec,
    pretrained: Option<&ParamStore>,
    data: &SampleSet,
    cfg: &TrainConfig,
) -> Result<ExperimentOutcome> {
    let split = ExperimentSplit::plan(&data.labels, cfg)?;
    run_experiment_on(spec, pretrained, data, cfg, &split)
}

/// [`run_experiment`] with a precomputed split.
pub fn run_experiment_on(
    spec: &ModelSpec,
    pretrained: Option<&ParamStore>,
    data: &SampleSet,
    cfg: &TrainConfig,
    split: &ExperimentSplit,
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    spec.validate()?;
    if spec.num_classes != data.num_classes {
        return Err(ExperimentError::Config(format!(
            "model has {} classes, data has {}",
            spec.num_classes, data.num_classes
        )));
    }
    split.check(data.len())?;
    let test = split.test.clone();
    let test_labels: Vec<usize> = test.iter().map(|&i| data.labels[i]).collect();
    let mut cache = PrefixCache::new(cfg.cache_budget_mb);
    let mut folds = Vec::with_capacity(split.k());
    let mut test_scores = Vec::with_capacity(split.k());
    let mut reports = Vec::with_capacity(split.k());
    for fold in 0..split.k() {
        let model = fold_model(spec, pretrained, cfg, fold)?;
        let outcome = run_fold(model, &split.train(fold), split.validation(fold), data, cfg, fold, &mut cache)?;
        let scores = predict(&outcome.model, data, &test, Some(&mut cache))?;
        let report = MetricsReport::evaluate(&scores, &test_labels, data.num_classes)?;
        log::info!("fold {fold}: {} epochs, test accuracy {:.2}", outcome.logs.len(), report.classes.accuracy);
        folds.push(outcome);
        test_scores.push(scores);
        reports.push(report);
    }
    let aggregate = metrics::aggregate(&reports)?;
    Ok(ExperimentOutcome { test, folds, test_scores, reports, aggregate })
}

/// Trains every layer of a model on a source task, for later transfer.
/// Uses a stratified tenth of `source` for validation and early stopping.
pub fn pretrain(spec: &ModelSpec, source: &SampleSet, cfg: &TrainConfig) -> Result<FoldOutcome> {
    let mut spec = spec.clone();
    spec.freeze_boundary = 0;
    let (train, val) = stratified_holdout(&source.labels, 0.1, seed::derive(cfg.seed, &[0x7072_6574]));
    let model = Model::new(spec, seed::derive(cfg.seed, &[INIT_STREAM, u64::MAX]))?;
    run_fold(model, &train, &val, source, cfg, 0, &mut PrefixCache::new(0))
}
