//! Detection loss: per-cell objectness cross-entropy plus box regression on
//! object cells. One box per grid cell; a cell is positive when a
//! ground-truth box center of the model's target class falls inside it.

use crate::core::{Annotation, CellClass};
use crate::detector::net::{
    sigmoid, OutputMap, CH_OBJ, CH_TH, CH_TW, CH_TX, CH_TY,
};

/// Cross-entropy weight on object cells (background cells weigh 1). Object
/// cells are rare on a 16x16 grid, so they get extra pull.
const POS_WEIGHT: f64 = 4.0;
/// Weight of the box regression term.
const BOX_WEIGHT: f64 = 5.0;
/// Box sizes are regressed as sigmoid(raw) * SIZE_SCALE. Cells span roughly
/// 5-12% of the image side; the scale keeps their targets in the responsive
/// mid-range of the sigmoid instead of its flat tail.
pub const SIZE_SCALE: f64 = 0.25;

/// Per-cell training targets for one image and one target class.
#[derive(Debug, Clone)]
pub struct GridTarget {
    pub grid: usize,
    /// 1.0 where a target-class box center falls, else 0.0.
    pub obj: Vec<f64>,
    /// (tx, ty, tw, th) per cell; meaningful only on object cells.
    pub boxes: Vec<[f64; 4]>,
    pub n_pos: usize,
}

/// Assign ground-truth boxes of `cls` to grid cells. When two boxes land in
/// the same cell the one whose center is nearest the cell center wins.
pub fn assign_targets(annotations: &[Annotation], cls: CellClass, grid: usize) -> GridTarget {
    let g = grid as f64;
    let mut obj = vec![0.0; grid * grid];
    let mut boxes = vec![[0.0; 4]; grid * grid];
    let mut dist = vec![f64::INFINITY; grid * grid];
    for ann in annotations.iter().filter(|a| a.cls == cls) {
        let gx = ((ann.bbox.cx * g) as usize).min(grid - 1);
        let gy = ((ann.bbox.cy * g) as usize).min(grid - 1);
        let cell = gy * grid + gx;
        let dx = ann.bbox.cx * g - (gx as f64 + 0.5);
        let dy = ann.bbox.cy * g - (gy as f64 + 0.5);
        let d = dx * dx + dy * dy;
        if d < dist[cell] {
            dist[cell] = d;
            obj[cell] = 1.0;
            boxes[cell] = [
                ann.bbox.cx * g - gx as f64,
                ann.bbox.cy * g - gy as f64,
                (ann.bbox.w / SIZE_SCALE).min(1.0),
                (ann.bbox.h / SIZE_SCALE).min(1.0),
            ];
        }
    }
    let n_pos = obj.iter().filter(|&&o| o > 0.0).count();
    GridTarget {
        grid,
        obj,
        boxes,
        n_pos,
    }
}

/// Stable binary cross-entropy with logits.
fn bce(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Loss for one image plus its gradient with respect to the output map.
pub fn detection_loss_and_dmap(map: &OutputMap, target: &GridTarget) -> (f64, OutputMap) {
    assert_eq!(map.grid, target.grid, "map/target grid mismatch");
    let grid = map.grid;
    let cells = grid * grid;
    let mut dmap = OutputMap::zeros(grid);
    let norm_pos = target.n_pos.max(1) as f64;

    let mut obj_loss = 0.0;
    let mut box_loss = 0.0;
    for cell in 0..cells {
        let o = target.obj[cell];
        let w = if o > 0.0 { POS_WEIGHT } else { 1.0 };
        let z = map.data[CH_OBJ * cells + cell];
        obj_loss += w * bce(z, o);
        dmap.data[CH_OBJ * cells + cell] = w * (sigmoid(z) - o) / cells as f64;
        if o > 0.0 {
            let t = target.boxes[cell];
            for (k, ch) in [CH_TX, CH_TY, CH_TW, CH_TH].into_iter().enumerate() {
                let raw = map.data[ch * cells + cell];
                let p = sigmoid(raw);
                let diff = p - t[k];
                box_loss += diff * diff;
                dmap.data[ch * cells + cell] =
                    BOX_WEIGHT * 2.0 * diff * p * (1.0 - p) / norm_pos;
            }
        }
    }
    let loss = obj_loss / cells as f64 + BOX_WEIGHT * box_loss / norm_pos;
    (loss, dmap)
}

/// Loss only (used for validation and finite-difference probes).
pub fn detection_loss(map: &OutputMap, target: &GridTarget) -> f64 {
    let grid = map.grid;
    let cells = grid * grid;
    let norm_pos = target.n_pos.max(1) as f64;
    let mut obj_loss = 0.0;
    let mut box_loss = 0.0;
    for cell in 0..cells {
        let o = target.obj[cell];
        let w = if o > 0.0 { POS_WEIGHT } else { 1.0 };
        obj_loss += w * bce(map.data[CH_OBJ * cells + cell], o);
        if o > 0.0 {
            let t = target.boxes[cell];
            for (k, ch) in [CH_TX, CH_TY, CH_TW, CH_TH].into_iter().enumerate() {
                let diff = sigmoid(map.data[ch * cells + cell]) - t[k];
                box_loss += diff * diff;
            }
        }
    }
    obj_loss / cells as f64 + BOX_WEIGHT * box_loss / norm_pos
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::BoundingBox;

    fn ann(cx: f64, cy: f64, cls: CellClass) -> Annotation {
        Annotation {
            bbox: BoundingBox::new(cx, cy, 0.08, 0.08).unwrap(),
            cls,
        }
    }

    #[test]
    fn assignment_places_center_cell() {
        let t = assign_targets(&[ann(0.53, 0.28, CellClass::Rbc)], CellClass::Rbc, 16);
        // cx*16 = 8.48 -> gx 8; cy*16 = 4.48 -> gy 4
        assert_eq!(t.n_pos, 1);
        assert_eq!(t.obj[4 * 16 + 8], 1.0);
        let b = t.boxes[4 * 16 + 8];
        assert!((b[0] - 0.48).abs() < 1e-12);
        assert!((b[1] - 0.48).abs() < 1e-12);
    }

    #[test]
    fn assignment_filters_by_class() {
        let anns = [
            ann(0.5, 0.5, CellClass::Rbc),
            ann(0.2, 0.2, CellClass::Infected),
        ];
        assert_eq!(assign_targets(&anns, CellClass::Rbc, 16).n_pos, 1);
        assert_eq!(assign_targets(&anns, CellClass::Infected, 16).n_pos, 1);
    }

    #[test]
    fn colliding_boxes_keep_nearest_center() {
        // Both centers land in cell (8, 8) of a 16-grid; the second one is
        // closer to the cell center (0.53125, 0.53125).
        let anns = [
            ann(0.505, 0.505, CellClass::Rbc),
            ann(0.53, 0.53, CellClass::Rbc),
        ];
        let t = assign_targets(&anns, CellClass::Rbc, 16);
        assert_eq!(t.n_pos, 1);
        let b = t.boxes[8 * 16 + 8];
        assert!((b[0] - (0.53 * 16.0 - 8.0)).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences_on_map() {
        let anns = [
            ann(0.5, 0.5, CellClass::Rbc),
            ann(0.12, 0.82, CellClass::Rbc),
        ];
        let target = assign_targets(&anns, CellClass::Rbc, 8);
        let mut map = OutputMap::zeros(8);
        for (i, v) in map.data.iter_mut().enumerate() {
            *v = ((i * 37 % 101) as f64) / 50.0 - 1.0;
        }
        let (_, dmap) = detection_loss_and_dmap(&map, &target);
        let h = 1e-6;
        for probe in [0usize, 7, 64, 100, 200, 319] {
            let orig = map.data[probe];
            map.data[probe] = orig + h;
            let up = detection_loss(&map, &target);
            map.data[probe] = orig - h;
            let down = detection_loss(&map, &target);
            map.data[probe] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = dmap.data[probe];
            assert!(
                (fd - an).abs() <= 1e-6 * fd.abs().max(an.abs()).max(1e-3),
                "probe {probe}: fd {fd} vs analytic {an}"
            );
        }
    }
}
