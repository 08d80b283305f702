//! Segmentation quality and spiking activity metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::ClassMap;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("class maps differ in shape: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("class {class} outside 0..{classes}")]
    ClassOutOfRange { class: u8, classes: usize },
    #[error("confusion matrix is empty")]
    Empty,
    #[error("no class has a non-zero IoU denominator")]
    NoValidClass,
}

/// `counts[a * classes + b]` = pixels of true class `a` predicted as `b`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Build directly from a row-major `classes x classes` table.
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Option<Self> {
        (counts.len() == classes * classes).then_some(Self { classes, counts })
    }

    pub fn from_maps(pred: &ClassMap, truth: &ClassMap, classes: usize, ignore: Option<u8>) -> Result<Self, MetricsError> {
        let mut m = Self::new(classes);
        m.add_maps(pred, truth, ignore)?;
        Ok(m)
    }

    /// Count every pixel whose truth is not `ignore`.
    pub fn add_maps(&mut self, pred: &ClassMap, truth: &ClassMap, ignore: Option<u8>) -> Result<(), MetricsError> {
        if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
            return Err(MetricsError::ShapeMismatch(pred.height(), pred.width(), truth.height(), truth.width()));
        }
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            if Some(t) == ignore {
                continue;
            }
            for c in [p, t] {
                if c as usize >= self.classes {
                    return Err(MetricsError::ClassOutOfRange {
                        class: c,
                        classes: self.classes,
                    });
                }
            }
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        assert_eq!(self.classes, other.classes, "merging confusion matrices of different size");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.classes).map(|p| self.get(truth, p)).sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, pred)).sum()
    }

    pub fn is_diagonal(&self) -> bool {
        (0..self.classes).all(|a| (0..self.classes).all(|b| a == b || self.get(a, b) == 0))
    }
}

/// Fraction of scored pixels predicted correctly.
pub fn pixel_accuracy(m: &ConfusionMatrix) -> Result<f64, MetricsError> {
    match m.total() {
        0 => Err(MetricsError::Empty),
        total => Ok(m.trace() as f64 / total as f64),
    }
}

/// How classes absent from both prediction and truth enter the mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiouMode {
    /// Left out of the mean.
    #[default]
    ExcludeAbsent,
    /// Averaged in with IoU 0.
    CountAbsentAsZero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouSummary {
    pub miou: f64,
    /// `None` where the class has a zero denominator.
    pub per_class: Vec<Option<f64>>,
}

/// Per-class `TP / (TP + FP + FN)` and their mean.
pub fn mean_iou(m: &ConfusionMatrix, mode: MiouMode) -> Result<IouSummary, MetricsError> {
    if m.total() == 0 {
        return Err(MetricsError::Empty);
    }
    let per_class: Vec<Option<f64>> = (0..m.classes())
        .map(|c| {
            let tp = m.get(c, c);
            let denom = m.row_sum(c) + m.col_sum(c) - tp;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let mut valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(MetricsError::NoValidClass);
    }
    // summing in ascending order makes the mean independent of class numbering
    valid.sort_by(f64::total_cmp);
    let sum: f64 = valid.iter().sum();
    let miou = match mode {
        MiouMode::ExcludeAbsent => sum / valid.len() as f64,
        MiouMode::CountAbsentAsZero => sum / m.classes() as f64,
    };
    Ok(IouSummary { miou, per_class })
}

/// Mean fraction of a layer's neurons that spike per timestep.
///
/// `counts` holds one spike count per (sample, timestep); `neurons` is the
/// number of neurons the layer has per sample (`C * H * W`).
pub fn layer_firing_rate(counts: &[u64], neurons: usize, samples: usize, timesteps: usize) -> f64 {
    let steps = samples * timesteps;
    if steps == 0 || neurons == 0 {
        return 0.0;
    }
    let spikes: u64 = counts.iter().sum();
    spikes as f64 / (neurons * steps) as f64
}

/// Neuron-weighted model firing rate `(1/L) * sum_l N_l * FR_l`; its unit is neurons.
pub fn model_firing_rate(layers: &[(usize, f64)]) -> f64 {
    if layers.is_empty() {
        return 0.0;
    }
    layers.iter().map(|&(n, fr)| n as f64 * fr).sum::<f64>() / layers.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub name: String,
    /// 0 when `valid` is false.
    pub iou: f64,
    pub valid: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRate {
    pub name: String,
    pub neurons: usize,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub accuracy: f64,
    pub miou: f64,
    pub miou_mode: MiouMode,
    pub per_class_iou: Vec<ClassIou>,
    pub layer_firing_rates: Vec<LayerRate>,
    pub model_firing_rate: f64,
    pub param_count: usize,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    /// Aligned plain-text rendering: one column per class, then activity.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let width = self.per_class_iou.iter().map(|c| c.name.len()).max().unwrap_or(0).max(8);
        let _ = writeln!(out, "samples {}  params {}", self.samples, self.param_count);
        let mut head = format!("{:>10}", "accuracy");
        let mut row = format!("{:>10.4}", self.accuracy);
        for c in &self.per_class_iou {
            let _ = write!(head, " {:>width$}", c.name);
            if c.valid {
                let _ = write!(row, " {:>width$.4}", c.iou);
            } else {
                let _ = write!(row, " {:>width$}", "-");
            }
        }
        let _ = write!(head, " {:>width$}", "MIoU");
        let _ = write!(row, " {:>width$.4}", self.miou);
        let _ = writeln!(out, "{head}\n{row}");
        if !self.layer_firing_rates.is_empty() {
            let name_w = self.layer_firing_rates.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
            let _ = writeln!(out, "{:<name_w$} {:>10} {:>10}", "layer", "neurons", "rate");
            for l in &self.layer_firing_rates {
                let _ = writeln!(out, "{:<name_w$} {:>10} {:>10.6}", l.name, l.neurons, l.rate);
            }
            let _ = writeln!(out, "model firing rate {:.4}", self.model_firing_rate);
        }
        out
    }
}
