//! RBC-level and image-level evaluation: confusion counts, the greedy
//! verdict-to-truth matching, and the derived metrics.

pub mod matrix;

use serde::{Deserialize, Serialize};

use crate::core::{iou, Annotation, BoundingBox, CellClass};
use crate::detector::CellVerdict;
use crate::error::{Error, Result};

pub use matrix::{
    average_performance, backward_transfer, build_matrix, evaluate_grid, evaluate_pipeline,
    forward_transfer, random_baseline, EvalConfig, EvalGrid, Level, Metric, PerformanceMatrix,
    RandomBaseline, TransferValue,
};

/// Plain 2x2 counts; positive means infected.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_pos: u64,
    pub false_pos: u64,
    pub true_neg: u64,
    pub false_neg: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.true_neg += other.true_neg;
        self.false_neg += other.false_neg;
    }

    /// (tp + tn) / total, `None` when no counts exist.
    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        if total == 0 {
            None
        } else {
            Some((self.true_pos + self.true_neg) as f64 / total as f64)
        }
    }

    /// tp / (tp + fn), `None` when there are no actual positives.
    pub fn sensitivity(&self) -> Option<f64> {
        let denom = self.true_pos + self.false_neg;
        if denom == 0 {
            None
        } else {
            Some(self.true_pos as f64 / denom as f64)
        }
    }

    /// tn / (tn + fp), `None` when there are no actual negatives.
    pub fn specificity(&self) -> Option<f64> {
        let denom = self.true_neg + self.false_pos;
        if denom == 0 {
            None
        } else {
            Some(self.true_neg as f64 / denom as f64)
        }
    }
}

/// A ground-truth cell: the RBC box plus its infection status.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthCell {
    pub bbox: BoundingBox,
    pub infected: bool,
}

/// Derive per-cell ground truth from an annotation list. RBC boxes are the
/// cells; a cell is infected when an infected annotation overlaps it at
/// IoU >= tau (the generator emits identical boxes, IoU 1). An infected
/// annotation matching no RBC box becomes its own infected cell so partial
/// labels cannot hide parasites.
pub fn truth_cells(annotations: &[Annotation], tau: f64) -> Vec<TruthCell> {
    let rbc: Vec<&Annotation> = annotations
        .iter()
        .filter(|a| a.cls == CellClass::Rbc)
        .collect();
    let infected: Vec<&Annotation> = annotations
        .iter()
        .filter(|a| a.cls == CellClass::Infected)
        .collect();
    let mut cells: Vec<TruthCell> = rbc
        .iter()
        .map(|r| TruthCell {
            bbox: r.bbox,
            infected: infected.iter().any(|i| iou(&r.bbox, &i.bbox) >= tau),
        })
        .collect();
    for inf in &infected {
        if !rbc.iter().any(|r| iou(&r.bbox, &inf.bbox) >= tau) {
            cells.push(TruthCell {
                bbox: inf.bbox,
                infected: true,
            });
        }
    }
    cells
}

/// Greedy matching of pipeline verdicts to ground-truth cells.
///
/// Verdicts are processed in descending confidence (stable on ties); each
/// one claims the unclaimed truth cell with the highest IoU at or above
/// `tau`, lowest cell index on IoU ties. A matched pair contributes TP / TN /
/// FP / FN according to (predicted infected, truth infected). Unmatched
/// truth cells count as FN when infected and are ignored otherwise (a missed
/// healthy cell is a detection miss, not a classification error); unmatched
/// infected verdicts count as FP, unmatched negative verdicts are ignored.
pub fn match_rbc(verdicts: &[CellVerdict], truth: &[Annotation], tau: f64) -> Confusion {
    let cells = truth_cells(truth, tau);
    let mut order: Vec<usize> = (0..verdicts.len()).collect();
    order.sort_by(|&a, &b| {
        verdicts[b]
            .confidence
            .partial_cmp(&verdicts[a].confidence)
            .unwrap()
    });

    let mut claimed = vec![false; cells.len()];
    let mut confusion = Confusion::default();
    for v_idx in order {
        let verdict = &verdicts[v_idx];
        let mut best: Option<(usize, f64)> = None;
        for (c_idx, cell) in cells.iter().enumerate() {
            if claimed[c_idx] {
                continue;
            }
            let overlap = iou(&verdict.bbox, &cell.bbox);
            if overlap < tau {
                continue;
            }
            if best.map_or(true, |(_, b)| overlap > b) {
                best = Some((c_idx, overlap));
            }
        }
        match best {
            Some((c_idx, _)) => {
                claimed[c_idx] = true;
                match (verdict.infected, cells[c_idx].infected) {
                    (true, true) => confusion.true_pos += 1,
                    (false, false) => confusion.true_neg += 1,
                    (true, false) => confusion.false_pos += 1,
                    (false, true) => confusion.false_neg += 1,
                }
            }
            None => {
                if verdict.infected {
                    confusion.false_pos += 1;
                }
            }
        }
    }
    for (c_idx, cell) in cells.iter().enumerate() {
        if !claimed[c_idx] && cell.infected {
            confusion.false_neg += 1;
        }
    }
    confusion
}

/// Standard 2x2 counts over aligned per-image booleans.
pub fn image_confusion(predictions: &[bool], truth: &[bool]) -> Result<Confusion> {
    if predictions.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            got: predictions.len(),
        });
    }
    let mut confusion = Confusion::default();
    for (&p, &t) in predictions.iter().zip(truth) {
        match (p, t) {
            (true, true) => confusion.true_pos += 1,
            (true, false) => confusion.false_pos += 1,
            (false, true) => confusion.false_neg += 1,
            (false, false) => confusion.true_neg += 1,
        }
    }
    Ok(confusion)
}
