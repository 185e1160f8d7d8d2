//! Trainable single-stage detector and the dual-model predict-and-merge
//! pipeline: one model detects all red blood cells, a second detects infected
//! ones, and [`merge_detections`] combines the two into per-cell verdicts.

pub mod loss;
pub mod net;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::core::{BoundingBox, CellClass, Detection, Pixels};
use crate::core::iou;
use crate::parallel;

pub use net::{Architecture, OutputMap, Tensor3};
pub use train::{train, AuxLoss, TrainConfig, TrainLog};

/// IoU threshold used by non-maximum suppression.
pub const NMS_IOU: f64 = 0.45;

/// Smallest box side a decoded detection may have.
const MIN_BOX_SIDE: f64 = 1e-6;

/// A detector with a flat, per-parameter-addressable weight vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub arch: Architecture,
    pub target: CellClass,
    pub params: Vec<f64>,
    pub init_seed: u64,
}

impl DetectorModel {
    /// Build the randomly initialized reference detector. Identical seeds
    /// give identical parameter vectors; the architecture does not depend on
    /// the target class.
    pub fn build_reference(target: CellClass, seed: u64) -> Self {
        let arch = Architecture::reference();
        let params = net::init_params(&arch, seed);
        Self {
            arch,
            target,
            params,
            init_seed: seed,
        }
    }

    /// Forward pass in inference mode.
    pub fn forward_map(&self, pixels: &Pixels) -> OutputMap {
        let input = net::image_to_tensor(pixels);
        net::forward(&self.arch, &self.params, &input, None)
    }
}

fn decode(map: &OutputMap, cls: CellClass, threshold: f64) -> Vec<Detection> {
    let g = map.grid;
    let gf = g as f64;
    let mut out = Vec::new();
    for gy in 0..g {
        for gx in 0..g {
            let conf = net::sigmoid(map.at(net::CH_OBJ, gy, gx)).min(net::CONFIDENCE_CAP);
            if conf < threshold {
                continue;
            }
            let cx = (gx as f64 + net::sigmoid(map.at(net::CH_TX, gy, gx))) / gf;
            let cy = (gy as f64 + net::sigmoid(map.at(net::CH_TY, gy, gx))) / gf;
            let w = (net::sigmoid(map.at(net::CH_TW, gy, gx)) * loss::SIZE_SCALE).max(MIN_BOX_SIDE);
            let h = (net::sigmoid(map.at(net::CH_TH, gy, gx)) * loss::SIZE_SCALE).max(MIN_BOX_SIDE);
            out.push(Detection {
                bbox: BoundingBox::new_unchecked(cx, cy, w, h),
                cls,
                confidence: conf,
            });
        }
    }
    out
}

/// Greedy non-maximum suppression: keep the highest-confidence box, drop
/// remaining boxes overlapping it with IoU above `iou_thr`, repeat. Ties in
/// confidence keep decode order.
pub fn nms(mut dets: Vec<Detection>, iou_thr: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_thr) {
            kept.push(d);
        }
    }
    kept
}

/// Decode the model output on one image, apply NMS and the confidence
/// threshold. Deterministic for a fixed model and image.
pub fn detect(model: &DetectorModel, pixels: &Pixels, threshold: f64) -> Vec<Detection> {
    let map = model.forward_map(pixels);
    nms(decode(&map, model.target, threshold), NMS_IOU)
}

/// Batch inference over many images.
pub fn detect_many(model: &DetectorModel, images: &[&Pixels], threshold: f64) -> Vec<Vec<Detection>> {
    parallel::map_slice(images, |px| detect(model, px, threshold))
}

/// Final per-cell call of the merged pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellVerdict {
    pub bbox: BoundingBox,
    pub infected: bool,
    pub confidence: f64,
}

/// Merge the two detectors' outputs on one image.
///
/// Infected detections are processed in descending confidence; each one
/// claims the still-unclaimed RBC box with the highest IoU at or above
/// `tau`. Claimed RBC boxes become infected verdicts carrying the infected
/// detection's confidence, unclaimed RBC boxes become negative verdicts, and
/// an infected detection with no RBC match at `tau` is emitted as a
/// standalone infected verdict so an RBC-detector miss cannot suppress a
/// parasite finding.
pub fn merge_detections(
    all_rbc: &[Detection],
    infected: &[Detection],
    tau: f64,
) -> Vec<CellVerdict> {
    let mut order: Vec<usize> = (0..infected.len()).collect();
    order.sort_by(|&a, &b| {
        infected[b]
            .confidence
            .partial_cmp(&infected[a].confidence)
            .unwrap()
    });

    let mut claimed_by: Vec<Option<usize>> = vec![None; all_rbc.len()];
    let mut standalone: Vec<usize> = Vec::new();
    for inf_idx in order {
        let mut best: Option<(usize, f64)> = None;
        for (rbc_idx, rbc) in all_rbc.iter().enumerate() {
            if claimed_by[rbc_idx].is_some() {
                continue;
            }
            let overlap = iou(&rbc.bbox, &infected[inf_idx].bbox);
            if overlap < tau {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, best_iou)) => overlap > best_iou,
            };
            if better {
                best = Some((rbc_idx, overlap));
            }
        }
        match best {
            Some((rbc_idx, _)) => claimed_by[rbc_idx] = Some(inf_idx),
            None => standalone.push(inf_idx),
        }
    }

    let mut verdicts: Vec<CellVerdict> = all_rbc
        .iter()
        .enumerate()
        .map(|(rbc_idx, rbc)| match claimed_by[rbc_idx] {
            Some(inf_idx) => CellVerdict {
                bbox: rbc.bbox,
                infected: true,
                confidence: infected[inf_idx].confidence,
            },
            None => CellVerdict {
                bbox: rbc.bbox,
                infected: false,
                confidence: rbc.confidence,
            },
        })
        .collect();
    for inf_idx in standalone {
        verdicts.push(CellVerdict {
            bbox: infected[inf_idx].bbox,
            infected: true,
            confidence: infected[inf_idx].confidence,
        });
    }
    verdicts
}

/// Image positivity rule: positive iff at least one cell verdict is infected.
pub fn classify_image(verdicts: &[CellVerdict]) -> bool {
    verdicts.iter().any(|v| v.infected)
}

/// Minimum confidence among this model's detections on the image, or `None`
/// when it detects nothing at the threshold. Images scoring `None` are
/// ineligible for confidence-based replay selection.
pub fn image_confidence_score(model: &DetectorModel, pixels: &Pixels, threshold: f64) -> Option<f64> {
    detect(model, pixels, threshold)
        .iter()
        .map(|d| d.confidence)
        .min_by(|a, b| a.partial_cmp(b).unwrap())
}
