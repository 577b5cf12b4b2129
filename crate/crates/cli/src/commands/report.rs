use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use histoclass::cv::EpochLog;
use histoclass::metrics::{self, macro_roc, MetricsReport};

use super::train::{confusion_csv, roc_csv};
use crate::artifacts::{self, Layout};
use crate::config::Config;
use crate::error::{CliError, IoContext, Result};
use crate::svg::{self, Chart, Series, PALETTE};

const CSV_HEADER: &str = EpochLog::CSV_HEADER;

fn mismatch(path: &Path, what: impl std::fmt::Display) -> CliError {
    CliError::Mismatch(format!("{}: {what}", path.display()))
}

fn read(path: &Path) -> Result<String> {
    artifacts::require(path)?;
    fs::read_to_string(path).at(path)
}

fn parse_epochs(path: &Path) -> Result<Vec<EpochLog>> {
    let text = read(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(mismatch(path, "unexpected header"));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(mismatch(path, format!("bad row `{line}`")));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| mismatch(path, format!("bad row `{line}`")));
            let num = |s: &str| s.parse::<f64>().map_err(|_| mismatch(path, format!("bad row `{line}`")));
            Ok(EpochLog {
                fold: int(f[0])?,
                epoch: int(f[1])?,
                lr: num(f[2])?,
                train_loss: num(f[3])?,
                train_acc: num(f[4])?,
                val_loss: num(f[5])?,
                val_acc: num(f[6])?,
            })
        })
        .collect()
}

/// Labels and score rows from a `scores_fold<k>.csv`.
fn parse_scores(path: &Path, num_classes: usize) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let text = read(path)?;
    let mut labels = Vec::new();
    let mut scores = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != num_classes + 2 {
            return Err(mismatch(path, format!("row has {} fields, expected {}", f.len(), num_classes + 2)));
        }
        labels.push(f[1].parse().map_err(|_| mismatch(path, format!("bad label in `{line}`")))?);
        let row = f[2..].iter().map(|v| v.parse::<f64>()).collect::<Result<Vec<_>, _>>();
        scores.push(row.map_err(|_| mismatch(path, format!("bad score in `{line}`")))?);
    }
    Ok((labels, scores))
}

fn curves_csv(logs: &[&EpochLog]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for l in logs {
        s.push_str(&l.csv_row());
        s.push('\n');
    }
    s
}

fn curve_chart(title: String, y_label: &str, logs: &[&EpochLog], pick: fn(&EpochLog) -> (f64, f64)) -> String {
    let pts = |which: usize| logs.iter().map(|l| (l.epoch as f64, if which == 0 { pick(l).0 } else { pick(l).1 })).collect();
    svg::line_chart(&Chart {
        title,
        x_label: "Epoch".into(),
        y_label: y_label.into(),
        x_range: None,
        y_range: None,
        series: vec![Series::new("train", pts(0), PALETTE[0]), Series::new("validation", pts(1), PALETTE[1])],
    })
}

fn roc_chart(fold: usize, report: &MetricsReport, macro_curve: &[(f64, f64)]) -> String {
    let mut series: Vec<Series> = report
        .roc
        .iter()
        .map(|c| {
            Series::new(
                format!("{} ({:.3})", metrics::class_name(c.class), c.auc),
                c.points.iter().map(|p| (p.fpr, p.tpr)).collect(),
                PALETTE[c.class % PALETTE.len()],
            )
        })
        .collect();
    let macro_name = match report.macro_auc {
        Some(a) => format!("macro ({a:.3})"),
        None => "macro".into(),
    };
    series.push(Series::new(macro_name, macro_curve.to_vec(), "#000000").dashed());
    series.push(Series::new("chance", vec![(0.0, 0.0), (1.0, 1.0)], "#999999").dashed());
    svg::line_chart(&Chart {
        title: format!("ROC, fold {fold}"),
        x_label: "False positive rate".into(),
        y_label: "True positive rate".into(),
        x_range: Some((0.0, 1.0)),
        y_range: Some((0.0, 1.0)),
        series,
    })
}

/// Renders training curves, confusion matrices and ROC curves per fold.
pub fn run(cfg: &Config) -> Result<()> {
    let layout = Layout::new(&cfg.out);
    let epoch_path = layout.epoch_log();
    let logs = parse_epochs(&epoch_path)?;
    let mut by_fold: BTreeMap<usize, Vec<&EpochLog>> = BTreeMap::new();
    for l in &logs {
        by_fold.entry(l.fold).or_default().push(l);
    }
    if by_fold.is_empty() {
        return Err(mismatch(&epoch_path, "no epochs"));
    }
    let nc = cfg.data.num_classes;
    let mut reports = Vec::new();
    for &k in by_fold.keys() {
        let path = layout.scores(k);
        let (labels, scores) = parse_scores(&path, nc)?;
        reports.push(MetricsReport::evaluate(&scores, &labels, nc).map_err(|e| mismatch(&path, e))?);
    }

    let dir = layout.report_dir();
    artifacts::reset_dir(&dir)?;
    for ((&k, fold_logs), report) in by_fold.iter().zip(&reports) {
        artifacts::write_file(&dir.join(format!("curves_fold{k}.csv")), curves_csv(fold_logs))?;
        let loss = curve_chart(format!("Loss, fold {k}"), "Cross-entropy", fold_logs, |l| (l.train_loss, l.val_loss));
        artifacts::write_file(&dir.join(format!("loss_fold{k}.svg")), loss)?;
        let acc = curve_chart(format!("Accuracy, fold {k}"), "Accuracy (%)", fold_logs, |l| (l.train_acc, l.val_acc));
        artifacts::write_file(&dir.join(format!("accuracy_fold{k}.svg")), acc)?;

        let classes: Vec<String> = (0..nc).map(metrics::class_name).collect();
        let cm = svg::heatmap(&format!("Confusion matrix, fold {k}"), &classes, &report.confusion.rows());
        artifacts::write_file(&dir.join(format!("confusion_fold{k}.svg")), cm)?;
        artifacts::write_file(&dir.join(format!("confusion_fold{k}.csv")), confusion_csv(report))?;

        let macro_curve = macro_roc(&report.roc);
        let mut roc = roc_csv(report);
        for (fpr, tpr) in &macro_curve {
            let _ = writeln!(roc, "macro,,{fpr},{tpr}");
        }
        artifacts::write_file(&dir.join(format!("roc_fold{k}.csv")), roc)?;
        artifacts::write_file(&dir.join(format!("roc_fold{k}.svg")), roc_chart(k, report, &macro_curve))?;
    }
    println!("{} folds rendered to {}", reports.len(), dir.display());
    Ok(())
}
