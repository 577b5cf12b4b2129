//! Confusion matrices, one-vs-rest rates, ROC/AUC and across-fold aggregation.
//!
//! Rates are reported in percent with classes named `Type0`, `Type1`, ...
//! AUC stays in `[0, 1]`.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{predictions} predictions for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("class {class} outside 0..{num_classes}")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("class {0} has no positives or no negatives")]
    SingleClassOnly(usize),
    #[error("score row {row} has {got} entries, expected {want}")]
    BadScores { row: usize, got: usize, want: usize },
    #[error("fold reports disagree: {0}")]
    InconsistentReports(String),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

pub fn class_name(c: usize) -> String {
    format!("Type{c}")
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, counts: vec![0; n * n] }
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.n.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn support(&self, c: usize) -> u64 {
        (0..self.n).map(|p| self.get(c, p)).sum()
    }

    fn predicted(&self, c: usize) -> u64 {
        (0..self.n).map(|t| self.get(t, c)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n).map(|c| self.get(c, c)).sum()
    }
}

pub fn confusion(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { predictions: predictions.len(), labels: labels.len() });
    }
    let mut cm = ConfusionMatrix::zeros(num_classes);
    for (&p, &t) in predictions.iter().zip(labels) {
        for c in [p, t] {
            if c >= num_classes {
                return Err(MetricsError::ClassOutOfRange { class: c, num_classes });
            }
        }
        cm.counts[t * num_classes + p] += 1;
    }
    Ok(cm)
}

/// A percentage that may be undefined (zero denominator, reported as 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Rate {
    pub value: f64,
    pub defined: bool,
}

impl Rate {
    fn ratio(num: u64, den: u64) -> Self {
        if den == 0 {
            Self { value: 0.0, defined: false }
        } else {
            Self { value: 100.0 * num as f64 / den as f64, defined: true }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub support: u64,
    pub sensitivity: Rate,
    pub specificity: Rate,
    pub precision: Rate,
    pub f1: Rate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Averages {
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub f1: f64,
}

/// Everything derived from one confusion matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: Averages,
    pub weighted_avg: Averages,
}

pub fn per_class_metrics(cm: &ConfusionMatrix) -> Result<ClassReport> {
    let total = cm.total();
    if cm.n == 0 || total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let per_class: Vec<ClassMetrics> = (0..cm.n)
        .map(|c| {
            let tp = cm.get(c, c);
            let fn_ = cm.support(c) - tp;
            let fp = cm.predicted(c) - tp;
            let tn = total - tp - fn_ - fp;
            let sensitivity = Rate::ratio(tp, tp + fn_);
            let precision = Rate::ratio(tp, tp + fp);
            let f1 = if sensitivity.defined && precision.defined && sensitivity.value + precision.value > 0.0 {
                Rate {
                    value: 2.0 * precision.value * sensitivity.value / (precision.value + sensitivity.value),
                    defined: true,
                }
            } else {
                Rate { value: 0.0, defined: sensitivity.defined && precision.defined }
            };
            ClassMetrics { support: tp + fn_, sensitivity, specificity: Rate::ratio(tn, tn + fp), precision, f1 }
        })
        .collect();

    let avg = |weights: &dyn Fn(&ClassMetrics) -> f64| {
        let wsum: f64 = per_class.iter().map(weights).sum();
        let mean = |f: fn(&ClassMetrics) -> f64| {
            if wsum == 0.0 {
                0.0
            } else {
                per_class.iter().map(|m| weights(m) * f(m)).sum::<f64>() / wsum
            }
        };
        Averages {
            sensitivity: mean(|m| m.sensitivity.value),
            specificity: mean(|m| m.specificity.value),
            precision: mean(|m| m.precision.value),
            f1: mean(|m| m.f1.value),
        }
    };
    Ok(ClassReport {
        accuracy: 100.0 * cm.trace() as f64 / total as f64,
        macro_avg: avg(&|_| 1.0),
        weighted_avg: avg(&|m| m.support as f64),
        per_class,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    /// Scores at or above this are called positive; `+inf` for the origin.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RocCurve {
    pub class: usize,
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// One-vs-rest ROC for `class`, thresholds at every distinct score, area by
/// the trapezoidal rule. Tied scores form a single step.
pub fn roc_auc(scores: &[Vec<f64>], labels: &[usize], class: usize) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { predictions: scores.len(), labels: labels.len() });
    }
    let mut pairs = Vec::with_capacity(scores.len());
    for (row, (s, &l)) in scores.iter().zip(labels).enumerate() {
        let v = *s.get(class).ok_or(MetricsError::BadScores { row, got: s.len(), want: class + 1 })?;
        pairs.push((v, l == class));
    }
    let pos = pairs.iter().filter(|p| p.1).count() as u64;
    let neg = pairs.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClassOnly(class));
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0u64, 0u64);
    // twice the area, in units of one positive-negative pair
    let mut area2 = 0u64;
    let mut i = 0;
    while i < pairs.len() {
        let threshold = pairs[i].0;
        let (tp0, fp0) = (tp, fp);
        while i < pairs.len() && pairs[i].0 == threshold {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - fp0) * (tp + tp0);
        points.push(RocPoint { threshold, fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64 });
    }
    Ok(RocCurve { class, points, auc: area2 as f64 / (2 * pos * neg) as f64 })
}

/// Macro-averaged ROC: every curve's TPR sampled at the union of all FPR
/// values and averaged. At a vertical step the upper TPR is taken, so each
/// input curve is reproduced exactly at its own points.
pub fn macro_roc(curves: &[RocCurve]) -> Vec<(f64, f64)> {
    if curves.is_empty() {
        return Vec::new();
    }
    let mut grid: Vec<f64> = curves.iter().flat_map(|c| c.points.iter().map(|p| p.fpr)).collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let tpr_at = |curve: &RocCurve, x: f64| {
        let pts = &curve.points;
        let after = pts.partition_point(|p| p.fpr <= x);
        if after == 0 {
            return 0.0;
        }
        let left = &pts[after - 1];
        if left.fpr == x || after == pts.len() {
            return left.tpr;
        }
        let right = &pts[after];
        left.tpr + (right.tpr - left.tpr) * (x - left.fpr) / (right.fpr - left.fpr)
    };
    grid.iter()
        .map(|&x| (x, curves.iter().map(|c| tpr_at(c, x)).sum::<f64>() / curves.len() as f64))
        .collect()
}

/// Index of the largest entry, first on ties.
pub fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

/// Full evaluation of one fold on its test split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub num_classes: usize,
    pub confusion: ConfusionMatrix,
    #[serde(flatten)]
    pub classes: ClassReport,
    /// Per-class AUC, `None` when the class is absent or alone in the split.
    pub auc: Vec<Option<f64>>,
    pub macro_auc: Option<f64>,
    pub weighted_auc: Option<f64>,
    #[serde(skip)]
    pub roc: Vec<RocCurve>,
}

impl MetricsReport {
    pub fn evaluate(scores: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<Self> {
        for (row, s) in scores.iter().enumerate() {
            if s.len() != num_classes {
                return Err(MetricsError::BadScores { row, got: s.len(), want: num_classes });
            }
        }
        let preds: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
        let confusion = confusion(&preds, labels, num_classes)?;
        let classes = per_class_metrics(&confusion)?;
        let mut roc = Vec::new();
        let mut auc = Vec::new();
        for c in 0..num_classes {
            match roc_auc(scores, labels, c) {
                Ok(curve) => {
                    auc.push(Some(curve.auc));
                    roc.push(curve);
                }
                Err(MetricsError::SingleClassOnly(_)) => auc.push(None),
                Err(e) => return Err(e),
            }
        }
        let defined: Vec<(usize, f64)> = auc.iter().enumerate().filter_map(|(c, a)| a.map(|v| (c, v))).collect();
        let macro_auc = (!defined.is_empty()).then(|| defined.iter().map(|d| d.1).sum::<f64>() / defined.len() as f64);
        let wsum: f64 = defined.iter().map(|&(c, _)| confusion.support(c) as f64).sum();
        let weighted_auc = (wsum > 0.0)
            .then(|| defined.iter().map(|&(c, v)| confusion.support(c) as f64 * v).sum::<f64>() / wsum);
        Ok(Self { num_classes, confusion, classes, auc, macro_auc, weighted_auc, roc })
    }

    /// Flat `(metric, group, value)` rows in table order.
    pub fn rows(&self) -> Vec<(String, String, Option<f64>)> {
        let c = &self.classes;
        let mut rows = vec![("Accuracy".to_string(), String::new(), Some(c.accuracy))];
        let sections: [(&str, fn(&ClassMetrics) -> Rate, fn(&Averages) -> f64); 3] = [
            ("F1-score", |m| m.f1, |a| a.f1),
            ("Specificity", |m| m.specificity, |a| a.specificity),
            ("Sensitivity", |m| m.sensitivity, |a| a.sensitivity),
        ];
        for (name, per, avg) in sections {
            for (k, m) in c.per_class.iter().enumerate() {
                let r = per(m);
                rows.push((name.to_string(), class_name(k), r.defined.then_some(r.value)));
            }
            rows.push((name.to_string(), "macro avg".into(), Some(avg(&c.macro_avg))));
            rows.push((name.to_string(), "weighted avg".into(), Some(avg(&c.weighted_avg))));
        }
        for (k, a) in self.auc.iter().enumerate() {
            rows.push(("AUC".into(), class_name(k), *a));
        }
        rows.push(("AUC".into(), "macro avg".into(), self.macro_auc));
        rows.push(("AUC".into(), "weighted avg".into(), self.weighted_auc));
        rows
    }

    /// `class,threshold,fpr,tpr` lines without header.
    pub fn roc_csv_rows(&self) -> Vec<String> {
        self.roc
            .iter()
            .flat_map(|curve| {
                curve.points.iter().map(move |p| format!("{},{},{},{}", curve.class, p.threshold, p.fpr, p.tpr))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub metric: String,
    pub group: String,
    pub mean: f64,
    /// Population standard deviation across the folds where the value is defined.
    pub std: f64,
    pub folds: Vec<Option<f64>>,
}

impl AggregateRow {
    /// `MM.MM±SS.SS`
    pub fn render(&self) -> String {
        format!("{:.2}±{:.2}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateReport {
    pub num_folds: usize,
    pub num_classes: usize,
    pub rows: Vec<AggregateRow>,
}

/// Arithmetic mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn aggregate(reports: &[MetricsReport]) -> Result<AggregateReport> {
    let first = reports.first().ok_or_else(|| MetricsError::InconsistentReports("no fold reports".into()))?;
    if let Some(r) = reports.iter().find(|r| r.num_classes != first.num_classes) {
        return Err(MetricsError::InconsistentReports(format!(
            "{} classes vs {} classes",
            first.num_classes, r.num_classes
        )));
    }
    let per_fold: Vec<_> = reports.iter().map(MetricsReport::rows).collect();
    let rows = first
        .rows()
        .iter()
        .enumerate()
        .map(|(i, (metric, group, _))| {
            let folds: Vec<Option<f64>> = per_fold.iter().map(|r| r[i].2).collect();
            let defined: Vec<f64> = folds.iter().flatten().copied().collect();
            let (mean, std) = mean_std(&defined);
            AggregateRow { metric: metric.clone(), group: group.clone(), mean, std, folds }
        })
        .collect();
    Ok(AggregateReport { num_folds: reports.len(), num_classes: first.num_classes, rows })
}

impl AggregateReport {
    pub fn row(&self, metric: &str, group: &str) -> Option<&AggregateRow> {
        self.rows.iter().find(|r| r.metric == metric && r.group == group)
    }

    /// Plain-text table: metric, type, mean±std.
    pub fn render_table(&self, title: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{title}");
        let _ = writeln!(out, "{:<12} {:<13} {:>15}", "Metric", "Type", "Mean±Std");
        let _ = writeln!(out, "{}", "-".repeat(42));
        let mut last = "";
        for r in &self.rows {
            let name = if r.metric == last { "" } else { r.metric.as_str() };
            last = &r.metric;
            let _ = writeln!(out, "{:<12} {:<13} {:>15}", name, r.group, r.render());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(rows: &[&[u64]]) -> ConfusionMatrix {
        let n = rows.len();
        ConfusionMatrix { n, counts: rows.concat() }
    }

    #[test]
    fn confusion_examples() {
        let d = confusion(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(d.rows(), vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
        let m = confusion(&[1, 1, 1, 0, 0, 0, 0, 1], &[1, 1, 1, 1, 0, 0, 0, 0], 2).unwrap();
        assert_eq!(m.rows(), vec![vec![3, 1], vec![1, 3]]);
        assert_eq!(confusion(&[], &[], 3).unwrap().total(), 0);
        assert!(matches!(confusion(&[0], &[], 2), Err(MetricsError::LengthMismatch { .. })));
        assert!(matches!(confusion(&[2], &[0], 2), Err(MetricsError::ClassOutOfRange { class: 2, .. })));
    }

    #[test]
    fn perfect_and_binary_metrics() {
        let r = per_class_metrics(&cm(&[&[5, 0], &[0, 7]])).unwrap();
        assert_eq!(r.accuracy, 100.0);
        for m in &r.per_class {
            assert_eq!((m.sensitivity.value, m.specificity.value, m.f1.value), (100.0, 100.0, 100.0));
        }
        let r = per_class_metrics(&cm(&[&[8, 2], &[2, 8]])).unwrap();
        for m in &r.per_class {
            assert!((m.sensitivity.value - 80.0).abs() < 1e-12);
            assert!((m.specificity.value - 80.0).abs() < 1e-12);
            assert!((m.f1.value - 80.0).abs() < 1e-12);
        }
        assert!(matches!(per_class_metrics(&ConfusionMatrix::zeros(3)), Err(MetricsError::EmptyMatrix)));
    }

    #[test]
    fn zero_support_class_is_flagged() {
        let r = per_class_metrics(&cm(&[&[4, 1, 0], &[0, 5, 0], &[0, 0, 0]])).unwrap();
        let z = &r.per_class[2];
        assert!(!z.sensitivity.defined && z.sensitivity.value == 0.0);
        assert!(!z.precision.defined);
        assert!(z.specificity.defined);
        // weighted average ignores the empty class
        let want = (5.0 * 80.0 + 5.0 * 100.0) / 10.0;
        assert!((r.weighted_avg.sensitivity - want).abs() < 1e-12);
    }

    #[test]
    fn auc_examples() {
        let s = |v: &[f64]| v.iter().map(|&x| vec![1.0 - x, x]).collect::<Vec<_>>();
        let scores = s(&[0.9, 0.8, 0.4, 0.3]);
        assert_eq!(roc_auc(&scores, &[1, 0, 1, 0], 1).unwrap().auc, 0.75);
        assert_eq!(roc_auc(&scores, &[0, 1, 0, 1], 1).unwrap().auc, 0.25);
        assert_eq!(roc_auc(&s(&[0.9, 0.8, 0.2, 0.1]), &[1, 1, 0, 0], 1).unwrap().auc, 1.0);
        assert_eq!(roc_auc(&scores, &[1, 1, 1, 1], 1), Err(MetricsError::SingleClassOnly(1)));
        let curve = roc_auc(&scores, &[1, 0, 1, 0], 1).unwrap();
        assert_eq!(curve.points.first().map(|p| (p.fpr, p.tpr)), Some((0.0, 0.0)));
        assert_eq!(curve.points.last().map(|p| (p.fpr, p.tpr)), Some((1.0, 1.0)));
    }

    #[test]
    fn tied_scores_count_half() {
        let scores = vec![vec![0.5, 0.5]; 4];
        assert_eq!(roc_auc(&scores, &[1, 0, 1, 0], 1).unwrap().auc, 0.5);
    }

    #[test]
    fn aggregate_examples() {
        let perfect = MetricsReport::evaluate(&[vec![0.9, 0.1], vec![0.2, 0.8]], &[0, 1], 2).unwrap();
        let agg = aggregate(&vec![perfect; 5]).unwrap();
        assert_eq!(agg.row("Accuracy", "").unwrap().render(), "100.00±0.00");
        assert_eq!(agg.row("AUC", "macro avg").unwrap().render(), "1.00±0.00");

        let (m, s) = mean_std(&[96.0, 97.0, 98.0, 96.0, 97.0]);
        assert!((m - 96.8).abs() < 1e-12);
        assert!((s - 0.56f64.sqrt()).abs() < 1e-12);
        assert_eq!(format!("{m:.2}±{s:.2}"), "96.80±0.75");
        assert_eq!(mean_std(&[42.0]), (42.0, 0.0));
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn macro_roc_of_identical_curves_is_that_curve() {
        let curve = roc_auc(&[vec![0.9], vec![0.8], vec![0.4], vec![0.3]], &[1, 0, 1, 0], 0).unwrap();
        let avg = macro_roc(&[curve.clone(), curve.clone()]);
        let own: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.fpr, p.tpr)).collect();
        let mut expected = own.clone();
        expected.dedup_by(|b, a| a.0 == b.0 && {
            a.1 = a.1.max(b.1);
            true
        });
        assert_eq!(avg, expected);
        assert!(macro_roc(&[]).is_empty());
    }
}
