use std::fmt::Write as _;
use std::path::PathBuf;

use histoclass::cv::checkpoint::{self, to_store};
use histoclass::cv::{epoch_logs_csv, predict, pretrain, run_experiment_on, ExperimentSplit, SampleSet};
use histoclass::metrics::{self, MetricsReport};
use histoclass::model::{build_hybrid, Model, ModelSpec};
use histoclass::synth;
use histoclass::tensor::ParamStore;
use serde::Serialize;

use crate::artifacts::{self, Layout, SplitFile};
use crate::config::Config;
use crate::error::{CliError, Result};

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

pub fn split(cfg: &Config) -> Result<()> {
    let layout = Layout::new(&cfg.out);
    let (_, rows) = artifacts::dataset_rows(cfg, &layout)?;
    let labels: Vec<usize> = rows.iter().map(|r| r.label).collect();
    let split = ExperimentSplit::plan(&labels, &cfg.train_config()).map_err(failed)?;
    for (k, f) in split.folds.iter().enumerate() {
        println!("fold {k}\tvalidation {}\ttrain {}", f.len(), split.train(k).len());
    }
    println!("test\t{}", split.test.len());
    let file = SplitFile {
        manifest: artifacts::manifest_key(cfg, &layout),
        samples: labels.len(),
        rows_sha256: artifacts::rows_digest(&rows),
        split,
    };
    let json = serde_json::to_string_pretty(&file).map_err(failed)?;
    artifacts::write_file(&layout.split_file(), json + "\n")
}

/// Pretrains the configured extractor on a source task and saves every parameter.
pub fn pretrain_command(cfg: &Config) -> Result<()> {
    let layout = Layout::new(&cfg.out);
    let side = cfg.model.input_side;
    let source = match &cfg.pretrain.source {
        Some(dir) => {
            let found = artifacts::discover(dir, usize::MAX)?;
            let num_classes = found.iter().map(|f| f.label + 1).max().unwrap_or(0);
            if num_classes < 2 {
                return Err(CliError::Failed(format!("{} needs at least two type<k> classes", dir.display())));
            }
            let paths: Vec<PathBuf> = found.iter().map(|f| f.path.clone()).collect();
            let images = artifacts::load_images(&paths, side)?;
            SampleSet::from_images(&images, found.iter().map(|f| f.label).collect(), num_classes).map_err(failed)?
        }
        None => {
            let d = synth::texture_dataset(cfg.pretrain.per_class, side, cfg.seed);
            SampleSet::from_images(&d.images, d.labels, d.num_classes).map_err(failed)?
        }
    };
    let nc = source.num_classes();
    let spec = build_hybrid(&cfg.extractor(), 0, &[nc], nc).map_err(|e| CliError::Config(e.to_string()))?;
    let out = pretrain(&spec, &source, &cfg.pretrain_config()).map_err(failed)?;
    if let Some(last) = out.logs.last() {
        println!("pretrained {} epochs\tbest {}\tval acc {:.2}", out.logs.len(), out.best_epoch, last.val_acc);
    }
    let dir = layout.pretrain_dir();
    artifacts::reset_dir(&dir)?;
    artifacts::write_file(&dir.join("epochs.csv"), epoch_logs_csv(&out.logs))?;
    save_checkpoint(out.model.params(), &layout.pretrain_checkpoint())
}

fn save_checkpoint(params: &ParamStore, path: &std::path::Path) -> Result<()> {
    let mut buf = Vec::new();
    checkpoint::write_checkpoint(&mut buf, params).map_err(failed)?;
    artifacts::write_file(path, buf)
}

/// Pretrained store, checked to cover every extractor parameter of `spec`.
fn pretrained(cfg: &Config, layout: &Layout, spec: &ModelSpec) -> Result<Option<ParamStore>> {
    let path = match (&cfg.model.pretrained_path, cfg.model.use_pretrained) {
        (Some(p), _) => p.clone(),
        (None, true) => layout.pretrain_checkpoint(),
        (None, false) => return Ok(None),
    };
    let entries = artifacts::read_checkpoint(&path)?;
    let store = to_store(&entries).map_err(|e| artifacts::checkpoint_error(&path, e))?;
    let probe = Model::new(spec.clone(), 0).map_err(failed)?;
    for p in probe.params().iter().filter(|p| p.name.starts_with("extractor.")) {
        match store.by_name(&p.name) {
            Some(src) if src.tensor().shape() == p.tensor().shape() => {}
            _ => {
                return Err(CliError::Mismatch(format!(
                    "{}: no {} of shape {:?}",
                    path.display(),
                    p.name,
                    p.tensor().shape()
                )))
            }
        }
    }
    Ok(Some(store))
}

#[derive(Serialize)]
struct FoldSummary {
    fold: usize,
    epochs: usize,
    best_epoch: usize,
    best_val_loss: f64,
    best_val_acc: f64,
}

pub fn train(cfg: &Config) -> Result<()> {
    let layout = Layout::new(&cfg.out);
    let spec = cfg.model_spec()?;
    let (rows, data) = artifacts::load_dataset(cfg, &layout)?;
    let split = artifacts::read_split(&layout, &artifacts::manifest_key(cfg, &layout), &rows)?;
    let pre = pretrained(cfg, &layout, &spec)?;
    let outcome = run_experiment_on(&spec, pre.as_ref(), &data, &cfg.train_config(), &split).map_err(failed)?;

    let dir = layout.train_dir();
    artifacts::reset_dir(&dir)?;
    let mut summary = Vec::new();
    for (k, fold) in outcome.folds.iter().enumerate() {
        save_checkpoint(fold.model.params(), &layout.fold_checkpoint(k))?;
        let best = &fold.logs[fold.best_epoch];
        println!("fold {k}\tepochs {}\tbest epoch {}\tval acc {:.2}", fold.logs.len(), fold.best_epoch, best.val_acc);
        summary.push(FoldSummary {
            fold: k,
            epochs: fold.logs.len(),
            best_epoch: fold.best_epoch,
            best_val_loss: best.val_loss,
            best_val_acc: best.val_acc,
        });
    }
    artifacts::write_file(&layout.epoch_log(), epoch_logs_csv(&outcome.logs()))?;
    let json = serde_json::to_string_pretty(&summary).map_err(failed)?;
    artifacts::write_file(&dir.join("summary.json"), json + "\n")?;
    artifacts::write_file(&dir.join("model.txt"), describe(&spec))
}

/// Plain-text model description, one `key = value` per line.
fn describe(spec: &ModelSpec) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "input_shape = {:?}", spec.input_shape);
    for (i, l) in spec.extractor_layers.iter().enumerate() {
        let _ = writeln!(s, "extractor.{i} = {l}");
    }
    let _ = writeln!(s, "freeze_boundary = {}", spec.freeze_boundary);
    let _ = writeln!(s, "head_widths = {:?}", spec.head_widths);
    let _ = writeln!(s, "num_classes = {}", spec.num_classes);
    s
}

#[derive(Serialize)]
struct MetricsDocument<'a> {
    folds: &'a [MetricsReport],
    aggregate: &'a metrics::AggregateReport,
}

pub fn scores_csv(test: &[usize], labels: &[usize], scores: &[Vec<f64>], num_classes: usize) -> String {
    let mut s = String::from("sample,label");
    for c in 0..num_classes {
        let _ = write!(s, ",{}", metrics::class_name(c));
    }
    s.push('\n');
    for ((&i, &l), row) in test.iter().zip(labels).zip(scores) {
        let _ = write!(s, "{i},{l}");
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn confusion_csv(report: &MetricsReport) -> String {
    let n = report.num_classes;
    let mut s = String::from("true\\pred");
    for c in 0..n {
        let _ = write!(s, ",{}", metrics::class_name(c));
    }
    s.push('\n');
    for (t, row) in report.confusion.rows().iter().enumerate() {
        s.push_str(&metrics::class_name(t));
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn roc_csv(report: &MetricsReport) -> String {
    let mut s = String::from("class,threshold,fpr,tpr\n");
    for line in report.roc_csv_rows() {
        s.push_str(&line);
        s.push('\n');
    }
    s
}

/// Scores every fold checkpoint on the held-out test split.
pub fn evaluate(cfg: &Config) -> Result<()> {
    let layout = Layout::new(&cfg.out);
    let spec = cfg.model_spec()?;
    let (rows, data) = artifacts::load_dataset(cfg, &layout)?;
    let split = artifacts::read_split(&layout, &artifacts::manifest_key(cfg, &layout), &rows)?;
    let mut models = Vec::with_capacity(split.k());
    for k in 0..split.k() {
        let path = layout.fold_checkpoint(k);
        let entries = artifacts::read_checkpoint(&path)?;
        let mut model = Model::new(spec.clone(), 0).map_err(failed)?;
        checkpoint::restore(&mut model, &entries).map_err(|e| artifacts::checkpoint_error(&path, e))?;
        models.push(model);
    }

    let nc = data.num_classes();
    let labels: Vec<usize> = split.test.iter().map(|&i| data.labels()[i]).collect();
    let dir = layout.evaluate_dir();
    artifacts::reset_dir(&dir)?;
    let mut reports = Vec::with_capacity(models.len());
    for (k, model) in models.iter().enumerate() {
        let scores = predict(model, &data, &split.test, None).map_err(failed)?;
        let report = MetricsReport::evaluate(&scores, &labels, nc).map_err(failed)?;
        artifacts::write_file(&layout.scores(k), scores_csv(&split.test, &labels, &scores, nc))?;
        artifacts::write_file(&dir.join(format!("confusion_fold{k}.csv")), confusion_csv(&report))?;
        artifacts::write_file(&dir.join(format!("roc_fold{k}.csv")), roc_csv(&report))?;
        reports.push(report);
    }
    let aggregate = metrics::aggregate(&reports).map_err(failed)?;
    let table = aggregate.render_table(&format!("{}-fold test metrics ({} test patches)", reports.len(), labels.len()));
    print!("{table}");
    artifacts::write_file(&dir.join("report.txt"), &table)?;
    let doc = MetricsDocument { folds: &reports, aggregate: &aggregate };
    let json = serde_json::to_string_pretty(&doc).map_err(failed)?;
    artifacts::write_file(&dir.join("metrics.json"), json + "\n")
}
