//! Multiclass evaluation: confusion matrices, precision/recall/F1, weighted
//! average precision, and clip-level prediction by segment-logit averaging.
//!
//! Conventions: single-label argmax prediction (lowest index wins ties);
//! any metric whose denominator is zero is reported as 0.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::{MelConfig, MelFrontend, MelSpectrogram};
use crate::io::AudioClip;
use crate::model::{bind, mels_to_tensor, ModelParams, TrainableSet};
use crate::tensor::Tape;
use crate::{Error, Result};

/// Row-major counts indexed `[true_class][predicted_class]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self { n_classes, counts: vec![0; n_classes * n_classes] }
    }

    /// Tallies parallel prediction/label slices.
    pub fn from_pairs(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::LengthMismatch(preds.len(), labels.len()));
        }
        let mut cm = Self::new(n_classes);
        for (&pred, &label) in preds.iter().zip(labels) {
            cm.record(label, pred)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, label: usize, pred: usize) -> Result<()> {
        for value in [label, pred] {
            if value >= self.n_classes {
                return Err(Error::OutOfRangeLabel { label: value, n_classes: self.n_classes });
            }
        }
        self.counts[label * self.n_classes + pred] += 1;
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn count(&self, label: usize, pred: usize) -> u64 {
        self.counts[label * self.n_classes + pred]
    }

    /// Number of true instances of class `k` (row sum).
    pub fn support(&self, k: usize) -> u64 {
        self.counts[k * self.n_classes..(k + 1) * self.n_classes].iter().sum()
    }

    /// Number of predictions of class `k` (column sum).
    pub fn predicted(&self, k: usize) -> u64 {
        (0..self.n_classes).map(|t| self.count(t, k)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn precision(&self, k: usize) -> f64 {
        ratio(self.count(k, k), self.predicted(k))
    }

    pub fn recall(&self, k: usize) -> f64 {
        ratio(self.count(k, k), self.support(k))
    }

    pub fn f1(&self, k: usize) -> f64 {
        let (p, r) = (self.precision(k), self.recall(k));
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    /// Unweighted mean of per-class F1.
    pub fn macro_f1(&self) -> f64 {
        if self.n_classes == 0 {
            return 0.0;
        }
        (0..self.n_classes).map(|k| self.f1(k)).sum::<f64>() / self.n_classes as f64
    }

    /// Per-class F1 weighted by true-instance counts.
    pub fn weighted_f1(&self) -> Result<f64> {
        self.support_weighted(Self::f1)
    }

    /// Per-class precision weighted by true-instance counts (wAP).
    pub fn weighted_avg_precision(&self) -> Result<f64> {
        self.support_weighted(Self::precision)
    }

    fn support_weighted(&self, score: impl Fn(&Self, usize) -> f64) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyMatrix);
        }
        let weighted: f64 =
            (0..self.n_classes).map(|k| self.support(k) as f64 * score(self, k)).sum();
        Ok(weighted / total as f64)
    }

    /// Each row divided by its row sum; all-zero rows stay all-zero.
    pub fn normalized(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.counts.len()];
        for t in 0..self.n_classes {
            let row_sum = self.support(t);
            if row_sum == 0 {
                continue;
            }
            for p in 0..self.n_classes {
                out[t * self.n_classes + p] = self.count(t, p) as f64 / row_sum as f64;
            }
        }
        out
    }

    pub fn report(&self) -> Result<MetricsReport> {
        let per_class = (0..self.n_classes)
            .map(|k| PerClassMetrics {
                class: k,
                precision: self.precision(k),
                recall: self.recall(k),
                f1: self.f1(k),
                support: self.support(k),
            })
            .collect();
        Ok(MetricsReport {
            per_class,
            macro_f1: self.macro_f1(),
            weighted_f1: self.weighted_f1()?,
            wap: self.weighted_avg_precision()?,
            n_eval: self.total(),
        })
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// The metrics JSON payload. Macro-F1 is the headline score; weighted F1
/// and wAP cover the support-weighted views.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<PerClassMetrics>,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub wap: f64,
    pub n_eval: u64,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}

/// Raw-count CSV: rows are true classes, columns predicted classes.
pub fn write_confusion_csv(path: &Path, cm: &ConfusionMatrix) -> Result<()> {
    fs::write(path, confusion_csv(cm, |t, p| cm.count(t, p).to_string()))?;
    Ok(())
}

/// Row-normalized CSV with the same layout as the raw-count CSV.
pub fn write_normalized_csv(path: &Path, cm: &ConfusionMatrix) -> Result<()> {
    let rows = cm.normalized();
    let n = cm.n_classes();
    fs::write(path, confusion_csv(cm, |t, p| rows[t * n + p].to_string()))?;
    Ok(())
}

fn confusion_csv(cm: &ConfusionMatrix, cell: impl Fn(usize, usize) -> String) -> String {
    let n = cm.n_classes();
    let mut out = String::from("true\\pred");
    for p in 0..n {
        out.push_str(&format!(",{p}"));
    }
    out.push('\n');
    for t in 0..n {
        out.push_str(&t.to_string());
        for p in 0..n {
            out.push(',');
            out.push_str(&cell(t, p));
        }
        out.push('\n');
    }
    out
}

/// Clip-level class prediction: mean of the classifier logits over all
/// non-overlapping 1 s segments, argmax with lowest-index tie-breaking.
pub fn predict_clip(
    params: &ModelParams<f32>,
    clip: &AudioClip,
    frontend: &MelFrontend,
) -> Result<usize> {
    let seg_len = clip.sample_rate() as usize;
    let n_segments = clip.len() / seg_len;
    if n_segments == 0 {
        return Err(Error::ClipTooShort(format!(
            "{} samples, evaluation needs at least one full {seg_len}-sample segment",
            clip.len()
        )));
    }
    let mels: Vec<MelSpectrogram> = (0..n_segments)
        .map(|i| frontend.log_mel(&clip.segment(i * seg_len, seg_len)?))
        .collect::<Result<_>>()?;

    let mut tape: Tape<f32> = Tape::new();
    let bound = bind(&mut tape, params, TrainableSet::None);
    let x = tape.constant(mels_to_tensor(&mels)?);
    let h = bound.encoder_forward(&mut tape, x)?;
    let logits = bound.classifier_forward(&mut tape, h)?;
    let data = tape.data(logits);

    let n_classes = params.config.n_classes;
    let mut mean = vec![0.0f64; n_classes];
    for seg in 0..n_segments {
        for (k, m) in mean.iter_mut().enumerate() {
            *m += data[seg * n_classes + k] as f64;
        }
    }
    let mut best = 0usize;
    for k in 1..n_classes {
        if mean[k] > mean[best] {
            best = k;
        }
    }
    Ok(best)
}

/// Runs the model over a labeled test split and tallies clip-level
/// predictions. Deterministic: no randomness enters evaluation.
pub fn evaluate(
    params: &ModelParams<f32>,
    items: &[(AudioClip, usize)],
) -> Result<(MetricsReport, ConfusionMatrix)> {
    if items.is_empty() {
        return Err(Error::MissingLabels("no labeled clips in the test split".into()));
    }
    let n_classes = params.config.n_classes;
    for (_, label) in items {
        if *label >= n_classes {
            return Err(Error::OutOfRangeLabel { label: *label, n_classes });
        }
    }
    let mel = MelConfig {
        n_mels: params.config.input_mels,
        frames: params.config.input_frames,
        ..MelConfig::default()
    };
    let frontend = MelFrontend::new(mel, items[0].0.sample_rate())?;

    let mut cm = ConfusionMatrix::new(n_classes);
    for (clip, label) in items {
        cm.record(*label, predict_clip(params, clip, &frontend)?)?;
    }
    Ok((cm.report()?, cm))
}
