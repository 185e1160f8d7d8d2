//! Learning without forgetting: distill the previous task's frozen model
//! into the student by penalizing the mean squared difference between their
//! output maps on current-task images.

use crate::detector::net::{forward, OutputMap, Tensor3};
use crate::detector::train::AuxLoss;
use crate::detector::DetectorModel;
use crate::error::{Error, Result};

/// `lambda * MSE` over all map elements (objectness logits, box offsets and
/// the confidence channel alike).
pub fn lwf_loss(student: &OutputMap, teacher: &OutputMap, lambda: f64) -> Result<f64> {
    if !student.same_geometry(teacher) {
        return Err(Error::GridMismatch(format!(
            "student grid {} vs teacher grid {}",
            student.grid, teacher.grid
        )));
    }
    let n = student.data.len() as f64;
    let mse: f64 = student
        .data
        .iter()
        .zip(&teacher.data)
        .map(|(s, t)| (s - t) * (s - t))
        .sum::<f64>()
        / n;
    Ok(lambda * mse)
}

/// Loss plus gradient with respect to the student map, accumulated into
/// `dmap`.
pub fn lwf_loss_and_dmap(
    student: &OutputMap,
    teacher: &OutputMap,
    lambda: f64,
    dmap: &mut OutputMap,
) -> Result<f64> {
    if !student.same_geometry(teacher) || !student.same_geometry(dmap) {
        return Err(Error::GridMismatch(format!(
            "student grid {} vs teacher grid {} vs dmap grid {}",
            student.grid, teacher.grid, dmap.grid
        )));
    }
    let n = student.data.len() as f64;
    let mut acc = 0.0;
    for ((d, &s), &t) in dmap.data.iter_mut().zip(&student.data).zip(&teacher.data) {
        let diff = s - t;
        acc += diff * diff;
        *d += lambda * 2.0 * diff / n;
    }
    Ok(lambda * acc / n)
}

/// Frozen copy of the previous task's model used as distillation target.
#[derive(Debug, Clone)]
pub struct TeacherSnapshot {
    pub model: DetectorModel,
    pub lambda: f64,
}

/// The per-image hook plugged into training for LWF runs. Runs the teacher
/// forward on each training image and pulls the student's map toward it.
pub struct LwfAux<'a> {
    teacher: &'a DetectorModel,
    lambda: f64,
}

impl<'a> LwfAux<'a> {
    pub fn new(teacher: &'a DetectorModel, lambda: f64) -> Self {
        Self { teacher, lambda }
    }

    /// Mean squared student/teacher map difference over a set of inputs;
    /// used to measure how strongly distillation held.
    pub fn output_mse(student: &DetectorModel, teacher: &DetectorModel, inputs: &[Tensor3]) -> f64 {
        let mut acc = 0.0;
        for input in inputs {
            let s = forward(&student.arch, &student.params, input, None);
            let t = forward(&teacher.arch, &teacher.params, input, None);
            acc += lwf_loss(&s, &t, 1.0).expect("same architecture");
        }
        acc / inputs.len() as f64
    }
}

impl AuxLoss for LwfAux<'_> {
    fn active(&self) -> bool {
        self.lambda != 0.0
    }

    fn map_loss(&self, input: &Tensor3, student: &OutputMap, dmap: &mut OutputMap) -> f64 {
        let teacher_map = forward(&self.teacher.arch, &self.teacher.params, input, None);
        lwf_loss_and_dmap(student, &teacher_map, self.lambda, dmap)
            .expect("teacher shares the student's architecture")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_with(grid: usize, f: impl Fn(usize) -> f64) -> OutputMap {
        let mut m = OutputMap::zeros(grid);
        for (i, v) in m.data.iter_mut().enumerate() {
            *v = f(i);
        }
        m
    }

    #[test]
    fn identical_maps_give_zero() {
        let s = map_with(4, |i| i as f64 * 0.1);
        assert_eq!(lwf_loss(&s, &s.clone(), 1.0).unwrap(), 0.0);
    }

    #[test]
    fn zero_lambda_gives_zero() {
        let s = map_with(4, |i| i as f64);
        let t = map_with(4, |i| -(i as f64));
        assert_eq!(lwf_loss(&s, &t, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_gives_one() {
        let s = map_with(4, |i| i as f64 * 0.25);
        let t = map_with(4, |i| i as f64 * 0.25 + 1.0);
        let loss = lwf_loss(&s, &t, 1.0).unwrap();
        assert!((loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn geometry_mismatch_is_an_error() {
        let s = map_with(4, |_| 0.0);
        let t = map_with(8, |_| 0.0);
        assert!(matches!(lwf_loss(&s, &t, 1.0), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut s = map_with(4, |i| (i as f64 * 31.0 % 17.0) / 7.0 - 1.0);
        let t = map_with(4, |i| (i as f64 * 13.0 % 11.0) / 5.0 - 1.0);
        let lambda = 2.5;
        let mut dmap = OutputMap::zeros(4);
        lwf_loss_and_dmap(&s, &t, lambda, &mut dmap).unwrap();
        let h = 1e-6;
        for probe in [0usize, 13, 40, 79] {
            let orig = s.data[probe];
            s.data[probe] = orig + h;
            let up = lwf_loss(&s, &t, lambda).unwrap();
            s.data[probe] = orig - h;
            let down = lwf_loss(&s, &t, lambda).unwrap();
            s.data[probe] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - dmap.data[probe]).abs() < 1e-8,
                "probe {probe}: {fd} vs {}",
                dmap.data[probe]
            );
        }
    }

    #[test]
    fn aux_active_only_with_nonzero_lambda() {
        let teacher = DetectorModel::build_reference(crate::core::CellClass::Rbc, 1);
        assert!(!LwfAux::new(&teacher, 0.0).active());
        assert!(LwfAux::new(&teacher, 1.0).active());
    }
}
