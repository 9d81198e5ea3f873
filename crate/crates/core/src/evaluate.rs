//! Confusion matrices, per-class scores, coverage, weighted cross-entropy
//! and BEV map comparison.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::annotate::{AnnotationImage, SurfaceClass};
use crate::error::{check_dims, Error, Result};
use crate::fuse::{PredictionImage, BELIEF_K};
use crate::grid::ClassGrid;

const N: usize = SurfaceClass::ALL.len();

/// Counts indexed `[ground truth][prediction]` by class index. Pixels with
/// Unknown ground truth are never counted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; N]; N],
}

impl ConfusionMatrix {
    pub fn record(&mut self, gt: SurfaceClass, pred: SurfaceClass) {
        if gt != SurfaceClass::Unknown {
            self.counts[gt.index() as usize][pred.index() as usize] += 1;
        }
    }

    pub fn from_labels(pred: &[SurfaceClass], gt: &[SurfaceClass]) -> Result<Self> {
        check_dims((gt.len(), 1), (pred.len(), 1))?;
        let mut cm = Self::default();
        for (&p, &g) in pred.iter().zip(gt) {
            cm.record(g, p);
        }
        Ok(cm)
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(orow) {
                *c += o;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn true_positives(&self, c: SurfaceClass) -> u64 {
        let k = c.index() as usize;
        self.counts[k][k]
    }

    pub fn false_positives(&self, c: SurfaceClass) -> u64 {
        let k = c.index() as usize;
        (0..N).filter(|&g| g != k).map(|g| self.counts[g][k]).sum()
    }

    /// Includes pixels predicted Unknown.
    pub fn false_negatives(&self, c: SurfaceClass) -> u64 {
        let k = c.index() as usize;
        (0..N).filter(|&p| p != k).map(|p| self.counts[k][p]).sum()
    }
}

pub fn confusion(pred: &AnnotationImage, gt: &AnnotationImage) -> Result<ConfusionMatrix> {
    check_dims(gt.size(), pred.size())?;
    ConfusionMatrix::from_labels(&pred.data, &gt.data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: SurfaceClass,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// The class occurs in the ground truth.
    pub supported: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    /// One entry per surface class other than Unknown.
    pub classes: Vec<ClassScore>,
    /// Mean IoU over supported classes; 0 when none is supported.
    pub mean_iou: f64,
    pub evaluated: u64,
}

impl ClassMetrics {
    pub fn score(&self, class: SurfaceClass) -> Option<&ClassScore> {
        self.classes.iter().find(|s| s.class == class)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn class_metrics(cm: &ConfusionMatrix) -> ClassMetrics {
    let classes: Vec<ClassScore> = SurfaceClass::BELIEF
        .iter()
        .map(|&class| {
            let tp = cm.true_positives(class);
            let fp = cm.false_positives(class);
            let fn_ = cm.false_negatives(class);
            ClassScore {
                class,
                iou: ratio(tp, tp + fp + fn_),
                precision: ratio(tp, tp + fp),
                recall: ratio(tp, tp + fn_),
                tp,
                fp,
                fn_,
                supported: tp + fn_ > 0,
            }
        })
        .collect();
    let supported: Vec<f64> = classes.iter().filter(|s| s.supported).map(|s| s.iou).collect();
    let mean_iou = if supported.is_empty() {
        0.0
    } else {
        supported.iter().sum::<f64>() / supported.len() as f64
    };
    ClassMetrics {
        classes,
        mean_iou,
        evaluated: cm.total(),
    }
}

/// Fraction of labeled (non-Unknown) pixels; 0 for an empty image.
pub fn coverage_fraction(ann: &AnnotationImage) -> f64 {
    ratio(ann.labeled_count() as u64, ann.data.len() as u64)
}

/// Per-class loss weights. Unknown always weighs 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub road: f64,
    pub pedestrian: f64,
    pub crossing: f64,
    pub obstacle: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            road: 1.0,
            pedestrian: 1.0,
            crossing: 5.0,
            obstacle: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.road, self.pedestrian, self.crossing, self.obstacle];
        if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!("loss weights must be finite and non-negative: {w:?}")));
        }
        Ok(())
    }

    pub fn weight(&self, class: SurfaceClass) -> f64 {
        match class {
            SurfaceClass::Road => self.road,
            SurfaceClass::Pedestrian => self.pedestrian,
            SurfaceClass::Crossing => self.crossing,
            SurfaceClass::Obstacle => self.obstacle,
            SurfaceClass::Unknown => 0.0,
        }
    }
}

pub const PROB_FLOOR: f64 = 1e-12;

/// `Σ_px -α_gt · log p̂_gt` with p̂ clamped to `[1e-12, 1]`. Unknown ground
/// truth contributes nothing.
pub fn weighted_cross_entropy(pred: &PredictionImage, gt: &AnnotationImage, w: &LossWeights) -> Result<f64> {
    check_dims(gt.size(), pred.size())?;
    w.validate()?;
    let mut loss = 0.0;
    for (px, &c) in gt.data.iter().enumerate() {
        let Some(k) = c.belief_index() else { continue };
        let alpha = w.weight(c);
        if alpha == 0.0 {
            continue;
        }
        let p = (pred.probs[px * BELIEF_K + k] as f64).clamp(PROB_FLOOR, 1.0);
        loss -= alpha * p.ln();
    }
    Ok(loss)
}

/// BEV comparison over all ground-truth cells and over cells the
/// predicted map observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BevComparison {
    pub full: ClassMetrics,
    pub observed: ClassMetrics,
    pub observed_cells: u64,
}

/// Compares a finalised map with a ground-truth map. The ground truth is
/// resampled (nearest neighbour) onto the map's grid when the grids differ.
pub fn compare_bev(map: &ClassGrid, truth: &ClassGrid) -> Result<BevComparison> {
    let a = &map.spec;
    let b = &truth.spec;
    let disjoint = a.max_x() <= b.origin_x || b.max_x() <= a.origin_x || a.max_y() <= b.origin_y || b.max_y() <= a.origin_y;
    if disjoint {
        return Err(Error::GridMismatch);
    }
    let resampled;
    let gt = if a == b {
        truth
    } else {
        resampled = truth.resample_onto(a);
        &resampled
    };
    let mut full = ConfusionMatrix::default();
    let mut observed = ConfusionMatrix::default();
    let mut observed_cells = 0;
    for (&p, &g) in map.classes.iter().zip(&gt.classes) {
        full.record(g, p);
        if p != SurfaceClass::Unknown {
            observed.record(g, p);
            observed_cells += 1;
        }
    }
    Ok(BevComparison {
        full: class_metrics(&full),
        observed: class_metrics(&observed),
        observed_cells,
    })
}

/// Metrics document written by the `eval` command. Label sources that
/// were not supplied are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frames: usize,
    /// Arg-max of the per-frame predictions against per-pixel ground truth.
    pub prediction: Option<ClassMetrics>,
    /// Tracklet annotations against per-pixel ground truth.
    pub d0: Option<ClassMetrics>,
    /// Dense mesh renderings against per-pixel ground truth.
    pub d1: Option<ClassMetrics>,
    /// Mean per-frame fraction of labeled pixels.
    pub coverage_d0: Option<f64>,
    pub coverage_d1: Option<f64>,
    /// Mean per-frame weighted cross-entropy of the predictions with the
    /// D1 renderings as targets.
    pub loss_d1: Option<f64>,
    pub bev: Option<BevComparison>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "frames: {}", self.frames);
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.1}%", 100.0 * v));
        let _ = writeln!(s, "coverage D0: {}  D1: {}", pct(self.coverage_d0), pct(self.coverage_d1));
        if let Some(l) = self.loss_d1 {
            let _ = writeln!(s, "weighted cross-entropy vs D1: {l:.4}");
        }
        let mut section = |title: &str, m: &ClassMetrics| {
            let _ = writeln!(s, "\n{title} (mean IoU {:.1}%)", 100.0 * m.mean_iou);
            let _ = writeln!(s, "{:<12}{:>8}{:>11}{:>8}", "class", "IoU", "precision", "recall");
            for c in &m.classes {
                let flag = if c.supported { "" } else { "  (unsupported)" };
                let _ = writeln!(
                    s,
                    "{:<12}{:>8.1}{:>11.1}{:>8.1}{flag}",
                    c.class.name(),
                    100.0 * c.iou,
                    100.0 * c.precision,
                    100.0 * c.recall
                );
            }
        };
        let sections = [
            ("Per-frame predictions", &self.prediction),
            ("D0 tracklet annotations", &self.d0),
            ("D1 mesh renderings", &self.d1),
        ];
        for (title, m) in sections {
            if let Some(m) = m {
                section(title, m);
            }
        }
        if let Some(b) = &self.bev {
            section("BEV map, all cells", &b.full);
            section("BEV map, observed cells", &b.observed);
        }
        s
    }
}
