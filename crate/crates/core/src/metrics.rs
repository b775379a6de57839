//! Late fusion, confusion matrices, UAR / UF1 and report files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::CoarseEmotion;
use crate::error::{Error, Result};
use crate::heads::N_CLASSES;

/// Elementwise mean of two score vectors.
pub fn late_fuse(o1: &[f64], o2: &[f64]) -> Result<Vec<f64>> {
    if o1.len() != o2.len() {
        return Err(Error::invalid(format!(
            "cannot fuse score vectors of length {} and {}",
            o1.len(),
            o2.len()
        )));
    }
    Ok(o1.iter().zip(o2).map(|(a, b)| (a + b) / 2.0).collect())
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Index of the largest score; the first one wins ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Rows are true classes, columns predictions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: [[u64; N_CLASSES]; N_CLASSES],
}

/// Per-class tallies read off a confusion matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassStats {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub n: u64,
}

impl Confusion {
    pub fn from_counts(counts: [[u64; N_CLASSES]; N_CLASSES]) -> Self {
        Confusion { counts }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (CoarseEmotion, CoarseEmotion)>) -> Self {
        let mut c = Confusion::default();
        for (t, p) in pairs {
            c.record(t, p);
        }
        c
    }

    pub fn record(&mut self, truth: CoarseEmotion, predicted: CoarseEmotion) {
        self.counts[truth.index()][predicted.index()] += 1;
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (r, o) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in r.iter_mut().zip(o) {
                *a += b;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn class_stats(&self, c: usize) -> ClassStats {
        let tp = self.counts[c][c];
        let n: u64 = self.counts[c].iter().sum();
        let predicted: u64 = self.counts.iter().map(|r| r[c]).sum();
        ClassStats {
            tp,
            fp: predicted - tp,
            fn_: n - tp,
            n,
        }
    }
}

/// Mean per-class recall over classes present in the ground truth.
pub fn compute_uar(confusion: &Confusion) -> f64 {
    let mut sum = 0.0;
    let mut present = 0;
    for c in 0..N_CLASSES {
        let s = confusion.class_stats(c);
        if s.n == 0 {
            log::warn!("class {} absent from ground truth; left out of UAR", CoarseEmotion::ALL[c]);
            continue;
        }
        sum += s.tp as f64 / s.n as f64;
        present += 1;
    }
    if present == 0 {
        0.0
    } else {
        sum / present as f64
    }
}

/// Mean per-class F1 over classes present in the ground truth. A class with
/// no true positives, false positives or false negatives scores 0.
pub fn compute_uf1(confusion: &Confusion) -> f64 {
    let mut sum = 0.0;
    let mut present = 0;
    for c in 0..N_CLASSES {
        let s = confusion.class_stats(c);
        if s.n == 0 {
            log::warn!("class {} absent from ground truth; left out of UF1", CoarseEmotion::ALL[c]);
            continue;
        }
        let denom = 2 * s.tp + s.fp + s.fn_;
        if denom == 0 {
            log::warn!("class {} has no TP, FP or FN; F1 taken as 0", CoarseEmotion::ALL[c]);
        } else {
            sum += 2.0 * s.tp as f64 / denom as f64;
        }
        present += 1;
    }
    if present == 0 {
        0.0
    } else {
        sum / present as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: Confusion,
    pub per_class: Vec<ClassStats>,
    pub uar: f64,
    pub uf1: f64,
}

impl MetricsReport {
    pub fn from_confusion(confusion: Confusion) -> Self {
        MetricsReport {
            per_class: (0..N_CLASSES).map(|c| confusion.class_stats(c)).collect(),
            uar: compute_uar(&confusion),
            uf1: compute_uf1(&confusion),
            confusion,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub subject: String,
    /// Epoch whose metrics were kept, counted from 1.
    pub epoch: usize,
    pub report: MetricsReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub uar: f64,
    pub uf1: f64,
}

/// Aggregate over leave-one-subject-out folds: metrics of the pooled
/// confusion matrix, with the per-fold mean alongside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    pub config_hash: String,
    pub label: String,
    pub folds: Vec<FoldMetrics>,
    pub pooled: MetricsReport,
    pub per_fold_mean: MeanMetrics,
}

impl RunReport {
    pub fn new(dataset: &str, config_hash: &str, label: &str, folds: Vec<FoldMetrics>) -> Self {
        let mut pooled = Confusion::default();
        for f in &folds {
            pooled.merge(&f.report.confusion);
        }
        let n = folds.len().max(1) as f64;
        let per_fold_mean = MeanMetrics {
            uar: folds.iter().map(|f| f.report.uar).sum::<f64>() / n,
            uf1: folds.iter().map(|f| f.report.uf1).sum::<f64>() / n,
        };
        RunReport {
            dataset: dataset.to_string(),
            config_hash: config_hash.to_string(),
            label: label.to_string(),
            folds,
            pooled: MetricsReport::from_confusion(pooled),
            per_fold_mean,
        }
    }

    pub fn uar(&self) -> f64 {
        self.pooled.uar
    }

    pub fn uf1(&self) -> f64 {
        self.pooled.uf1
    }
}

pub fn confusion_markdown(confusion: &Confusion) -> String {
    let names: Vec<&str> = CoarseEmotion::ALL.iter().map(|c| c.name()).collect();
    let mut s = format!("| true \\ predicted | {} |\n|---|{}\n", names.join(" | "), "---|".repeat(N_CLASSES));
    for (r, name) in names.iter().enumerate() {
        let cells: Vec<String> = confusion.counts[r].iter().map(u64::to_string).collect();
        s.push_str(&format!("| {name} | {} |\n", cells.join(" | ")));
    }
    s
}

/// Paths written by [`emit_report`].
#[derive(Clone, Debug)]
pub struct ReportFiles {
    pub metrics: PathBuf,
    pub table: PathBuf,
    pub heatmap: PathBuf,
}

/// Writes `metrics.json`, `confusion.md` and `confusion.png` into `dir`.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<ReportFiles> {
    if report.pooled.confusion.total() == 0 {
        return Err(Error::invalid("refusing to emit a report with no evaluated samples"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ReportFiles {
        metrics: dir.join("metrics.json"),
        table: dir.join("confusion.md"),
        heatmap: dir.join("confusion.png"),
    };
    let json = serde_json::to_string_pretty(report).expect("report serialises");
    fs::write(&files.metrics, json + "\n").map_err(|e| Error::io(&files.metrics, e))?;
    let md = format!(
        "# {} ({})\n\nUAR {:.4}, UF1 {:.4} (per-fold mean UAR {:.4}, UF1 {:.4})\n\n{}",
        report.label,
        report.dataset,
        report.uar(),
        report.uf1(),
        report.per_fold_mean.uar,
        report.per_fold_mean.uf1,
        confusion_markdown(&report.pooled.confusion)
    );
    fs::write(&files.table, md).map_err(|e| Error::io(&files.table, e))?;
    crate::heatmap::render(&report.pooled.confusion)
        .save(&files.heatmap)
        .map_err(|source| Error::Image {
            path: files.heatmap.clone(),
            source,
        })?;
    Ok(files)
}
