//! Domain types and geometric primitives shared by all modules.
//!
//! Boxes are stored in normalized center/size form (`cx cy w h`, fractions of
//! the image side) to match the on-disk annotation format; corner form is a
//! private detail of the geometry helpers. All types here are immutable value
//! types after construction and safe to share across workers.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Axis-aligned box in normalized center/size form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    /// Validating constructor. Degenerate boxes (non-positive width or
    /// height) and boxes that do not intersect the unit square with positive
    /// area are rejected rather than clamped.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub(crate) fn new_unchecked(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        debug_assert!(Self::new(cx, cy, w, h).is_ok());
        Self { cx, cy, w, h }
    }

    fn validate(&self) -> Result<()> {
        let fields = [self.cx, self.cy, self.w, self.h];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite field in {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.cx) || !(0.0..=1.0).contains(&self.cy) {
            return Err(Error::InvalidBox(format!(
                "center ({}, {}) outside unit square",
                self.cx, self.cy
            )));
        }
        if self.w <= 0.0 || self.h <= 0.0 || self.w > 1.0 || self.h > 1.0 {
            return Err(Error::InvalidBox(format!(
                "size ({}, {}) outside (0, 1]",
                self.w, self.h
            )));
        }
        let (x0, y0, x1, y1) = self.corners();
        if x1.min(1.0) <= x0.max(0.0) || y1.min(1.0) <= y0.max(0.0) {
            return Err(Error::InvalidBox(format!(
                "box {self:?} does not intersect the unit square with positive area"
            )));
        }
        Ok(())
    }

    /// Corner form `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// True when all four corners lie inside `[0, 1]^2`.
    pub fn inside_unit_square(&self) -> bool {
        let (x0, y0, x1, y1) = self.corners();
        x0 >= 0.0 && y0 >= 0.0 && x1 <= 1.0 && y1 <= 1.0
    }

}

/// Intersection over union of two valid boxes. Symmetric, 1 iff identical.
///
/// Areas and intersection are all computed from corner form so that
/// `iou(a, a)` is exactly 1 despite center/size round-off.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = ax1.min(bx1) - ax0.max(bx0);
    let ih = ay1.min(by1) - ay0.max(by0);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    inter / union
}

/// The two detection targets of the dual-model pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CellClass {
    /// Any red blood cell; target of the first detector.
    Rbc,
    /// Parasite-bearing red blood cell; target of the second detector.
    Infected,
}

impl CellClass {
    /// Class id used in label files: 0 = all RBC, 1 = infected RBC.
    pub fn label_id(self) -> u8 {
        match self {
            CellClass::Rbc => 0,
            CellClass::Infected => 1,
        }
    }

    pub fn from_label_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(CellClass::Rbc),
            1 => Ok(CellClass::Infected),
            other => Err(Error::InvalidRecord(format!("unknown class id {other}"))),
        }
    }
}

/// A scored model output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub cls: CellClass,
    pub confidence: f64,
}

impl Detection {
    pub fn new(bbox: BoundingBox, cls: CellClass, confidence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::InvalidDetection(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(Self {
            bbox,
            cls,
            confidence,
        })
    }
}

/// Ground truth; carries no confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BoundingBox,
    pub cls: CellClass,
}

/// True iff at least one annotation marks an infected cell.
pub fn image_is_positive(annotations: &[Annotation]) -> bool {
    annotations.iter().any(|a| a.cls == CellClass::Infected)
}

/// 8-bit RGB raster, row-major interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pixels {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl Pixels {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for _ in 0..width as usize * height as usize {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// Stable content fingerprint for determinism checks.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &b in &self.data {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^ (u64::from(self.width) << 32 | u64::from(self.height))
    }
}

/// One field-of-view image with its ground truth.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub image_id: String,
    pub patient_id: String,
    pub site_id: String,
    pub pixels: Pixels,
    pub annotations: Vec<Annotation>,
}

impl ImageRecord {
    pub fn new(
        image_id: String,
        patient_id: String,
        site_id: String,
        pixels: Pixels,
        annotations: Vec<Annotation>,
    ) -> Result<Self> {
        if patient_id.is_empty() {
            return Err(Error::InvalidRecord(format!(
                "image {image_id} has an empty patient id"
            )));
        }
        for ann in &annotations {
            if !ann.bbox.inside_unit_square() {
                return Err(Error::InvalidRecord(format!(
                    "annotation {ann:?} extends outside image {image_id}"
                )));
            }
        }
        Ok(Self {
            image_id,
            patient_id,
            site_id,
            pixels,
            annotations,
        })
    }

    /// An image is positive iff it contains at least one infected-cell annotation.
    pub fn is_positive(&self) -> bool {
        image_is_positive(&self.annotations)
    }
}

/// Images of one acquisition site, split into train/val/test by patient.
#[derive(Debug, Clone, Default)]
pub struct SiteDataset {
    pub site_id: String,
    pub train: Vec<ImageRecord>,
    pub val: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
}

impl SiteDataset {
    /// Check the leakage rule: no patient may appear in more than one split.
    pub fn validate_patient_disjoint(&self) -> Result<()> {
        let train = patient_set(&self.train);
        let val = patient_set(&self.val);
        let test = patient_set(&self.test);
        for (a, b, names) in [
            (&train, &val, "train/val"),
            (&train, &test, "train/test"),
            (&val, &test, "val/test"),
        ] {
            if let Some(p) = a.intersection(b).next() {
                return Err(Error::InvalidDataset(format!(
                    "site {}: patient {p} appears in both {names}",
                    self.site_id
                )));
            }
        }
        Ok(())
    }

    pub fn all_images(&self) -> impl Iterator<Item = &ImageRecord> {
        self.train.iter().chain(self.val.iter()).chain(self.test.iter())
    }
}

/// Set of patient ids in a split.
pub fn patient_set(images: &[ImageRecord]) -> BTreeSet<String> {
    images.iter().map(|r| r.patient_id.clone()).collect()
}

/// The ordered sequence of site datasets the strategies train over.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub tasks: Vec<SiteDataset>,
}

impl TaskStream {
    pub fn new(tasks: Vec<SiteDataset>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::InvalidDataset("task stream must not be empty".into()));
        }
        let ids: BTreeSet<&str> = tasks.iter().map(|t| t.site_id.as_str()).collect();
        if ids.len() != tasks.len() {
            return Err(Error::InvalidDataset(
                "task stream contains duplicate site ids".into(),
            ));
        }
        Ok(Self { tasks })
    }

    /// Number of tasks T.
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn bb(cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn iou_identity_is_one() {
        let a = bb(0.3, 0.4, 0.2, 0.1);
        assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let a = bb(0.1, 0.1, 0.1, 0.1);
        let b = bb(0.9, 0.9, 0.1, 0.1);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_partial_overlap_matches_area_arithmetic() {
        // [0, 0.2]^2 and [0.1, 0.3]^2: areas 0.04 each, intersection 0.01.
        let a = bb(0.1, 0.1, 0.2, 0.2);
        let b = bb(0.2, 0.2, 0.2, 0.2);
        assert_relative_eq!(iou(&a, &b), 0.01 / 0.07, max_relative = 1e-12);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BoundingBox::new(0.5, 0.5, 0.0, 0.1).is_err());
        assert!(BoundingBox::new(0.5, 0.5, 0.1, -0.2).is_err());
        assert!(BoundingBox::new(1.5, 0.5, 0.1, 0.1).is_err());
        // Center on the edge with the whole area outside.
        assert!(BoundingBox::new(0.0, 0.5, f64::MIN_POSITIVE, 0.1).is_ok());
    }

    #[test]
    fn image_positivity_rule() {
        assert!(!image_is_positive(&[]));
        let rbc = Annotation {
            bbox: bb(0.5, 0.5, 0.1, 0.1),
            cls: CellClass::Rbc,
        };
        let inf = Annotation {
            bbox: bb(0.5, 0.5, 0.1, 0.1),
            cls: CellClass::Infected,
        };
        assert!(image_is_positive(&[rbc, inf]));
        assert!(!image_is_positive(&[rbc; 5]));
    }

    #[test]
    fn patient_disjointness_checked() {
        let rec = |img: &str, patient: &str| {
            ImageRecord::new(
                img.into(),
                patient.into(),
                "s".into(),
                Pixels::filled(4, 4, [0, 0, 0]),
                vec![],
            )
            .unwrap()
        };
        let ok = SiteDataset {
            site_id: "s".into(),
            train: vec![rec("a", "p1")],
            val: vec![rec("b", "p2")],
            test: vec![rec("c", "p3")],
        };
        ok.validate_patient_disjoint().unwrap();
        let leaky = SiteDataset {
            site_id: "s".into(),
            train: vec![rec("a", "p1")],
            val: vec![],
            test: vec![rec("c", "p1")],
        };
        assert!(leaky.validate_patient_disjoint().is_err());
    }

    #[test]
    fn task_stream_rejects_duplicates() {
        let site = |id: &str| SiteDataset {
            site_id: id.into(),
            ..Default::default()
        };
        assert!(TaskStream::new(vec![site("a"), site("a")]).is_err());
        assert!(TaskStream::new(vec![]).is_err());
        assert_eq!(TaskStream::new(vec![site("a"), site("b")]).unwrap().len(), 2);
    }

    prop_compose! {
        fn arb_box()(cx in 0.05f64..0.95, cy in 0.05f64..0.95, w in 0.01f64..0.4, h in 0.01f64..0.4) -> BoundingBox {
            BoundingBox::new(cx, cy, w, h).unwrap()
        }
    }

    proptest! {
        #[test]
        fn iou_symmetric(a in arb_box(), b in arb_box()) {
            prop_assert_eq!(iou(&a, &b), iou(&b, &a));
        }

        #[test]
        fn iou_self_is_one(a in arb_box()) {
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn iou_in_unit_interval(a in arb_box(), b in arb_box()) {
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
        }

        // Scaling both boxes by the same axis-aligned affine map of the unit
        // square preserves IoU.
        #[test]
        fn iou_scale_invariant(a in arb_box(), b in arb_box(), s in 0.2f64..1.0) {
            let scale = |x: &BoundingBox| BoundingBox::new(x.cx * s, x.cy * s, x.w * s, x.h * s).unwrap();
            let before = iou(&a, &b);
            let after = iou(&scale(&a), &scale(&b));
            prop_assert!((before - after).abs() < 1e-9);
        }
    }
}
