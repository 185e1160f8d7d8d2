//! Adam training loop with early stopping and the auxiliary-loss hook used
//! by the regularization strategies.
//!
//! Per-image gradients are computed independently (optionally in parallel)
//! and summed in input order, so a training run is bit-reproducible for a
//! fixed seed regardless of thread count.

use rand::seq::SliceRandom;

use crate::core::ImageRecord;
use crate::detector::loss::{assign_targets, detection_loss, detection_loss_and_dmap, GridTarget};
use crate::detector::net::{self, OutputMap, Tensor3};
use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::rng_for;

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Confidence threshold for inference and validation fitness.
    pub conf_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            patience: 12,
            learning_rate: 5e-3,
            batch_size: 4,
            conf_threshold: 0.25,
            seed: 0,
        }
    }
}

/// Extra loss added to the detection loss; the hook both EWC and LWF use.
///
/// `map_loss` is called once per image after the forward pass and may add a
/// gradient contribution with respect to the output map (distillation-style
/// penalties). `param_loss` is called once per optimization step on the
/// current parameter vector (weight-anchoring penalties). An inactive hook
/// leaves the training trajectory bit-identical to plain fine-tuning.
pub trait AuxLoss: Sync {
    fn active(&self) -> bool {
        true
    }

    fn map_loss(&self, _input: &Tensor3, _student: &OutputMap, _dmap: &mut OutputMap) -> f64 {
        0.0
    }

    fn param_loss(&self, _params: &[f64], _grad: &mut [f64]) -> f64 {
        0.0
    }
}

/// What training did; persisted with each checkpoint.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainLog {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_f1: Option<f64>,
    pub best_val_loss: f64,
    pub final_train_loss: f64,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + Self::EPS);
        }
    }
}

/// Gradient of the detection loss on a single image at the given parameters.
/// Used by Fisher estimation and the finite-difference checks.
pub fn image_gradient(model: &DetectorModel, record: &ImageRecord) -> (f64, Vec<f64>) {
    let target = assign_targets(&record.annotations, model.target, model.arch.grid());
    image_pass(model, record, &target, None)
}

/// Detection loss on a single image (no gradient).
pub fn image_loss(model: &DetectorModel, record: &ImageRecord) -> f64 {
    let target = assign_targets(&record.annotations, model.target, model.arch.grid());
    let map = model.forward_map(&record.pixels);
    detection_loss(&map, &target)
}

fn image_pass(
    model: &DetectorModel,
    record: &ImageRecord,
    target: &GridTarget,
    aux: Option<&dyn AuxLoss>,
) -> (f64, Vec<f64>) {
    let input = net::image_to_tensor(&record.pixels);
    let mut cache = net::empty_cache();
    let map = net::forward(&model.arch, &model.params, &input, Some(&mut cache));
    let (mut loss, mut dmap) = detection_loss_and_dmap(&map, target);
    if let Some(hook) = aux {
        if hook.active() {
            loss += hook.map_loss(&input, &map, &mut dmap);
        }
    }
    let grad = net::backward(&model.arch, &model.params, &input, &cache, &dmap);
    (loss, grad)
}

/// Mean loss and gradient over a batch, plus any parameter-space penalty.
pub fn batch_loss_and_grad(
    model: &DetectorModel,
    records: &[&ImageRecord],
    targets: &[GridTarget],
    batch: &[usize],
    aux: Option<&dyn AuxLoss>,
) -> (f64, Vec<f64>) {
    let passes = parallel::map_slice(batch, |&i| image_pass(model, records[i], &targets[i], aux));
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.params.len()];
    for (l, g) in &passes {
        loss += l;
        for (acc, gi) in grad.iter_mut().zip(g) {
            *acc += gi;
        }
    }
    loss *= scale;
    for g in &mut grad {
        *g *= scale;
    }
    if let Some(hook) = aux {
        if hook.active() {
            loss += hook.param_loss(&model.params, &mut grad);
        }
    }
    (loss, grad)
}

/// Validation fitness: image-level F1 at the configured threshold, with the
/// negated validation loss as tie-breaker, falling back to loss alone when
/// the validation set has no positive images for this model's class.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Fitness {
    f1: Option<f64>,
    neg_loss: f64,
}

impl Fitness {
    fn better_than(&self, other: &Fitness) -> bool {
        match (self.f1, other.f1) {
            (Some(a), Some(b)) if a != b => a > b,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            _ => self.neg_loss > other.neg_loss,
        }
    }
}

fn val_fitness(model: &DetectorModel, val: &[&ImageRecord], fallback_loss: f64, threshold: f64) -> Fitness {
    if val.is_empty() {
        return Fitness {
            f1: None,
            neg_loss: -fallback_loss,
        };
    }
    let stats = parallel::map_slice(val, |rec| {
        let target = assign_targets(&rec.annotations, model.target, model.arch.grid());
        let map = model.forward_map(&rec.pixels);
        let loss = detection_loss(&map, &target);
        let truth = target.n_pos > 0;
        let cells = map.grid * map.grid;
        let predicted = map.data[..cells]
            .iter()
            .any(|&z| net::sigmoid(z).min(net::CONFIDENCE_CAP) >= threshold);
        (loss, truth, predicted)
    });
    let mut loss_sum = 0.0;
    let (mut tp, mut fp, mut fn_count) = (0u64, 0u64, 0u64);
    let mut positives = 0u64;
    for (loss, truth, predicted) in &stats {
        loss_sum += loss;
        match (truth, predicted) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_count += 1,
            (false, false) => {}
        }
        if *truth {
            positives += 1;
        }
    }
    let val_loss = loss_sum / val.len() as f64;
    let f1 = if positives == 0 {
        None
    } else {
        Some(2.0 * tp as f64 / (2 * tp + fp + fn_count) as f64)
    };
    Fitness {
        f1,
        neg_loss: -val_loss,
    }
}

/// Train a detector, returning the best-validation-fitness model and a log.
///
/// Loss per step is the detection loss plus whatever the aux hook adds.
/// Negative images participate as background-only samples. Training stops
/// after `patience` epochs without fitness improvement.
pub fn train(
    model: &DetectorModel,
    train_set: &[&ImageRecord],
    val_set: &[&ImageRecord],
    cfg: &TrainConfig,
    aux: Option<&dyn AuxLoss>,
) -> Result<(DetectorModel, TrainLog)> {
    if train_set.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let grid = model.arch.grid();
    let targets: Vec<GridTarget> = train_set
        .iter()
        .map(|rec| assign_targets(&rec.annotations, model.target, grid))
        .collect();

    let mut current = model.clone();
    let mut adam = Adam::new(current.params.len(), cfg.learning_rate);
    let mut rng = rng_for(cfg.seed, &["train-shuffle"], &[]);

    let mut best_params = current.params.clone();
    let mut best_fitness = Fitness {
        f1: None,
        neg_loss: f64::NEG_INFINITY,
    };
    let mut best_epoch = 0;
    let mut stale = 0usize;
    let mut epochs_run = 0;
    let mut epoch_train_loss = f64::NAN;
    let mut best_log = (None, f64::NAN);

    for epoch in 1..=cfg.epochs {
        epochs_run = epoch;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let (loss, grad) = batch_loss_and_grad(&current, train_set, &targets, batch, aux);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            adam.step(&mut current.params, &grad);
            loss_sum += loss;
            batches += 1;
        }
        epoch_train_loss = loss_sum / batches as f64;
        let fitness = val_fitness(&current, val_set, epoch_train_loss, cfg.conf_threshold);
        if fitness.better_than(&best_fitness) {
            best_fitness = fitness;
            best_params.copy_from_slice(&current.params);
            best_epoch = epoch;
            best_log = (fitness.f1, -fitness.neg_loss);
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                break;
            }
        }
        log::debug!(
            "epoch {epoch}: train_loss {epoch_train_loss:.6} val_f1 {:?} val_loss {:.6}",
            fitness.f1,
            -fitness.neg_loss
        );
    }

    current.params = best_params;
    Ok((
        current,
        TrainLog {
            epochs_run,
            best_epoch,
            best_val_f1: best_log.0,
            best_val_loss: best_log.1,
            final_train_loss: epoch_train_loss,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{Annotation, BoundingBox, CellClass, Pixels};

    fn flat_record(id: &str, shade: u8) -> ImageRecord {
        ImageRecord::new(
            id.into(),
            "p1".into(),
            "s1".into(),
            Pixels::filled(256, 256, [shade, shade / 2, shade]),
            vec![Annotation {
                bbox: BoundingBox::new(0.5, 0.5, 0.1, 0.1).unwrap(),
                cls: CellClass::Rbc,
            }],
        )
        .unwrap()
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let model = DetectorModel::build_reference(CellClass::Rbc, 1);
        let cfg = TrainConfig::default();
        assert!(matches!(
            train(&model, &[], &[], &cfg, None),
            Err(Error::EmptyTrainingSet)
        ));
    }

    #[test]
    fn training_is_bit_reproducible() {
        let model = DetectorModel::build_reference(CellClass::Rbc, 1);
        let recs: Vec<ImageRecord> = (0..4).map(|i| flat_record(&format!("i{i}"), 60 + i * 30)).collect();
        let refs: Vec<&ImageRecord> = recs.iter().collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        let (a, _) = train(&model, &refs, &refs[..1], &cfg, None).unwrap();
        let (b, _) = train(&model, &refs, &refs[..1], &cfg, None).unwrap();
        assert_eq!(a.params, b.params);
    }

    struct NoopAux;
    impl AuxLoss for NoopAux {
        fn active(&self) -> bool {
            false
        }
    }

    #[test]
    fn inactive_aux_is_bit_identical_to_none() {
        let model = DetectorModel::build_reference(CellClass::Rbc, 2);
        let recs: Vec<ImageRecord> = (0..3).map(|i| flat_record(&format!("i{i}"), 50 + i * 40)).collect();
        let refs: Vec<&ImageRecord> = recs.iter().collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            seed: 9,
            ..TrainConfig::default()
        };
        let (plain, _) = train(&model, &refs, &[], &cfg, None).unwrap();
        let (hooked, _) = train(&model, &refs, &[], &cfg, Some(&NoopAux)).unwrap();
        assert_eq!(plain.params, hooked.params);
    }

    #[test]
    fn patience_zero_stops_at_first_non_improvement() {
        let model = DetectorModel::build_reference(CellClass::Rbc, 3);
        let recs: Vec<ImageRecord> = (0..3).map(|i| flat_record(&format!("i{i}"), 70 + i * 20)).collect();
        let refs: Vec<&ImageRecord> = recs.iter().collect();
        let cfg = TrainConfig {
            epochs: 40,
            patience: 0,
            batch_size: 4,
            seed: 4,
            ..TrainConfig::default()
        };
        let (_, log) = train(&model, &refs, &refs[..1], &cfg, None).unwrap();
        // ran until the first epoch that failed to improve, and not further
        assert_eq!(log.epochs_run, log.best_epoch + 1);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // small architecture keeps the FD loop fast; same code path as the
        // reference model
        let arch = crate::detector::Architecture {
            input_size: 32,
            channels: vec![4, 6],
        };
        let params = net::init_params(&arch, 7);
        let model = DetectorModel {
            arch,
            target: CellClass::Rbc,
            params,
            init_seed: 7,
        };
        let mut px = Pixels::filled(32, 32, [0, 0, 0]);
        for (i, v) in px.data.iter_mut().enumerate() {
            *v = ((i * 131) % 251) as u8;
        }
        let rec = ImageRecord::new(
            "g".into(),
            "p".into(),
            "s".into(),
            px,
            vec![
                Annotation {
                    bbox: BoundingBox::new(0.4, 0.4, 0.2, 0.3).unwrap(),
                    cls: CellClass::Rbc,
                },
                Annotation {
                    bbox: BoundingBox::new(0.8, 0.2, 0.15, 0.15).unwrap(),
                    cls: CellClass::Rbc,
                },
            ],
        )
        .unwrap();
        let (_, grad) = image_gradient(&model, &rec);
        let mut probe_model = model.clone();
        let mut rng = rng_for(13, &["fd-probe"], &[]);
        use rand::Rng;
        for _ in 0..12 {
            let idx = rng.random_range(0..probe_model.params.len());
            let h = 1e-5;
            let orig = probe_model.params[idx];
            probe_model.params[idx] = orig + h;
            let up = image_loss(&probe_model, &rec);
            probe_model.params[idx] = orig - h;
            let down = image_loss(&probe_model, &rec);
            probe_model.params[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grad[idx];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                ((fd - an).abs() / denom) < 1e-3,
                "param {idx}: fd {fd:e} vs analytic {an:e}"
            );
        }
    }
}
