//! Fold training, experiments and checkpoints on tiny image sets.

use histoclass::cv::checkpoint::{read_checkpoint, restore, write_checkpoint, CheckpointError};
use histoclass::cv::{
    epoch_logs_csv, fold_model, pretrain, ExperimentSplit, run_experiment, run_fold, CvError, EpochLog, ExperimentError, PrefixCache,
    SampleSet, TrainConfig,
};
use histoclass::model::{build_base, build_hybrid, compact_extractor, default_head, Model, COMPACT_HYBRID_BOUNDARY};
use histoclass::optim::ScheduleConfig;
use histoclass::patch::AugmentPolicy;
use histoclass::seed;
use histoclass::synth;
use rand::Rng;

const SIDE: usize = 16;

/// Class 0 is bright with a dark stripe on top, class 1 dark with a bright
/// stripe; any reasonable classifier separates them.
fn separable(n: usize, seed: u64) -> SampleSet {
    let mut rng = seed::rng(seed, &[]);
    let per = 3 * SIDE * SIDE;
    let mut data = Vec::with_capacity(n * per);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    for &l in &labels {
        for _channel in 0..3 {
            for y in 0..SIDE {
                for _x in 0..SIDE {
                    let base: f64 = if l == 0 { 0.8 } else { 0.2 };
                    let stripe = if y < 4 { 1.0 - base } else { base };
                    data.push((stripe + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0));
                }
            }
        }
    }
    SampleSet::new([3, SIDE, SIDE], data, labels, 2).unwrap()
}

fn quick_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        schedule: ScheduleConfig { eta_max: 0.01, eta_min: 0.0, restart_period: 12, total_epochs: epochs },
        patience: 50,
        seed: 3,
        augment: AugmentPolicy::tcga_like(0),
        ..TrainConfig::default()
    }
}

fn hybrid(num_classes: usize) -> histoclass::model::ModelSpec {
    let ex = compact_extractor(SIDE);
    let head = default_head(ex.feature_dim().unwrap(), num_classes).unwrap();
    build_hybrid(&ex, COMPACT_HYBRID_BOUNDARY, &head, num_classes).unwrap()
}

fn split(n: usize) -> (Vec<usize>, Vec<usize>) {
    ((0..n).filter(|i| i % 5 != 0).collect(), (0..n).filter(|i| i % 5 == 0).collect())
}

#[test]
fn separable_set_is_learned() {
    let data = separable(80, 1);
    let (train, val) = split(80);
    let spec = build_hybrid(&compact_extractor(SIDE), 0, &[2], 2).unwrap();
    let model = Model::new(spec, 5).unwrap();
    let out = run_fold(model, &train, &val, &data, &quick_cfg(15), 0, &mut PrefixCache::new(64)).unwrap();
    let last = out.logs.last().unwrap();
    assert!(last.train_acc >= 99.0, "{last:?}");
    let idx: Vec<usize> = out.logs.iter().map(|l| l.epoch).collect();
    assert_eq!(idx, (0..out.logs.len()).collect::<Vec<_>>());
    assert!(out.logs.iter().all(|l| l.val_loss.is_finite()));
}

#[test]
fn reruns_are_bit_identical_and_frozen_layers_stay_put() {
    let data = separable(40, 2);
    let (train, val) = split(40);
    let cfg = quick_cfg(4);
    let run = || {
        let model = fold_model(&hybrid(2), None, &cfg, 0).unwrap();
        run_fold(model, &train, &val, &data, &cfg, 0, &mut PrefixCache::new(64)).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(epoch_logs_csv(&a.logs), epoch_logs_csv(&b.logs));
    assert_eq!(a.model.params(), b.model.params());

    let init = fold_model(&hybrid(2), None, &cfg, 0).unwrap();
    let mut changed = 0;
    for (p0, p1) in init.params().iter().zip(a.model.params().iter()) {
        if p0.frozen() {
            let bits = |p: &histoclass::tensor::Parameter| p.tensor().values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(p0), bits(p1), "{}", p0.name);
        } else if p0.tensor().values() != p1.tensor().values() {
            changed += 1;
        }
    }
    assert!(changed > 0);
}

#[test]
fn prefix_cache_does_not_change_results() {
    let data = separable(30, 4);
    let (train, val) = split(30);
    let cfg = quick_cfg(3);
    for spec in [hybrid(2), build_base(&compact_extractor(SIDE), 2).unwrap()] {
        let run = |budget| {
            let model = fold_model(&spec, None, &cfg, 1).unwrap();
            run_fold(model, &train, &val, &data, &cfg, 1, &mut PrefixCache::new(budget)).unwrap()
        };
        let (cached, direct) = (run(64), run(0));
        assert_eq!(epoch_logs_csv(&cached.logs), epoch_logs_csv(&direct.logs));
        assert_eq!(cached.model.params(), direct.model.params());
    }
}

#[test]
fn early_stopping_truncates_logs() {
    let data = separable(40, 5);
    let (train, val) = split(40);
    let cfg = TrainConfig { patience: 1, ..quick_cfg(30) };
    let out = run_fold(fold_model(&hybrid(2), None, &cfg, 0).unwrap(), &train, &val, &data, &cfg, 0, &mut PrefixCache::new(0)).unwrap();
    assert!(out.logs.len() < 30);
    assert_eq!(out.best_epoch + 2, out.logs.len());
}

#[test]
fn experiment_on_separable_data_is_perfect() {
    let data = separable(100, 6);
    let cfg = quick_cfg(12);
    let out = run_experiment(&hybrid(2), None, &data, &cfg).unwrap();
    assert_eq!(out.folds.len(), 5);
    assert_eq!(out.test.len(), 10);
    assert_eq!(out.aggregate.row("Accuracy", "").unwrap().render(), "100.00±0.00");
    for f in &out.folds {
        assert!(f.logs.iter().enumerate().all(|(i, l)| l.epoch == i));
    }
    assert_eq!(out.logs().len(), out.folds.iter().map(|f| f.logs.len()).sum::<usize>());
}

#[test]
fn bad_k_propagates() {
    let data = separable(20, 7);
    let cfg = TrainConfig { k: 1, ..quick_cfg(1) };
    assert!(matches!(run_experiment(&hybrid(2), None, &data, &cfg), Err(ExperimentError::Cv(CvError::BadK(1)))));
}

#[test]
fn out_of_range_indices_are_unavailable() {
    let data = separable(10, 8);
    let model = fold_model(&hybrid(2), None, &quick_cfg(1), 0).unwrap();
    let err = run_fold(model, &[0, 1, 99], &[2], &data, &quick_cfg(1), 0, &mut PrefixCache::new(0)).unwrap_err();
    assert!(matches!(err, ExperimentError::DataUnavailable(_)));
}

#[test]
fn pretrained_extractor_transfers() {
    let source = synth::texture_dataset(6, SIDE, 1);
    let source = SampleSet::from_images(&source.images, source.labels, source.num_classes).unwrap();
    let ex = compact_extractor(SIDE);
    let src_spec = build_hybrid(&ex, 0, &[4], 4).unwrap();
    let trained = pretrain(&src_spec, &source, &quick_cfg(2)).unwrap();
    let model = fold_model(&hybrid(2), Some(trained.model.params()), &quick_cfg(1), 0).unwrap();
    for p in model.params().iter().filter(|p| p.name.starts_with("extractor.")) {
        assert_eq!(p.tensor().values(), trained.model.params().by_name(&p.name).unwrap().tensor().values());
    }
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let model = Model::new(hybrid(2), 9).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model.params()).unwrap();
    assert_eq!(&buf[..4], b"HCKP");
    let entries = read_checkpoint(&buf[..]).unwrap();
    let mut fresh = Model::new(hybrid(2), 10).unwrap();
    restore(&mut fresh, &entries).unwrap();
    assert_eq!(fresh.params(), model.params());

    let mut other = Model::new(hybrid(3), 0).unwrap();
    assert!(matches!(restore(&mut other, &entries), Err(CheckpointError::Mismatch(_))));
    assert!(matches!(read_checkpoint(&buf[..buf.len() - 3]), Err(CheckpointError::Format(_))));
    assert!(matches!(read_checkpoint(&b"nope"[..]), Err(CheckpointError::Format(_))));
}

#[test]
fn epoch_log_csv_shape() {
    let log = EpochLog { fold: 1, epoch: 2, lr: 0.001, train_loss: 0.5, train_acc: 90.0, val_loss: 0.6, val_acc: 85.0 };
    let csv = epoch_logs_csv(&[log]);
    assert_eq!(csv.lines().next().unwrap(), "fold,epoch,lr,train_loss,train_acc,val_loss,val_acc");
    assert_eq!(csv.lines().nth(1).unwrap().split(',').count(), 7);
}

#[test]
fn planned_split_covers_every_sample_once() {
    let labels: Vec<usize> = (0..90).map(|i| i % 3).collect();
    let cfg = TrainConfig { k: 5, test_fraction: 0.2, ..TrainConfig::default() };
    let split = ExperimentSplit::plan(&labels, &cfg).unwrap();
    split.check(labels.len()).unwrap();
    assert_eq!(split.k(), 5);
    assert_eq!(split.test.len(), 18);
    for k in 0..5 {
        let mut all: Vec<usize> = split.train(k).into_iter().chain(split.validation(k).iter().copied()).collect();
        all.sort_unstable();
        let mut pool: Vec<usize> = split.folds.iter().flatten().copied().collect();
        pool.sort_unstable();
        assert_eq!(all, pool);
    }
    assert_eq!(split, ExperimentSplit::plan(&labels, &cfg).unwrap());

    let mut dup = split.clone();
    dup.folds[1].push(dup.test[0]);
    assert!(matches!(dup.check(90), Err(ExperimentError::DataUnavailable(_))));
    assert!(matches!(split.check(80), Err(ExperimentError::DataUnavailable(_))));
    let mut empty = split.clone();
    empty.test.clear();
    assert!(matches!(empty.check(90), Err(ExperimentError::DataUnavailable(_))));
}
