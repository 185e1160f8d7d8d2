//! The train-test performance matrix P and the measures computed from it:
//! average performance of the final model, backward transfer and forward
//! transfer against a random-weights baseline.
//!
//! Matrix entries are `Option<f64>`: `None` marks a metric that is undefined
//! on that test set (empty denominator). Undefined entries are skipped from
//! averages and the skip count is reported, never silently zero-filled.
//! Baseline runs define only the first row; transfer measures that need rows
//! the run never produced come back undefined, mirroring the dashes in the
//! summary tables.

use crate::core::{ImageRecord, TaskStream};
use crate::error::{Error, Result};
use crate::eval::{image_confusion, match_rbc, Confusion};
use crate::parallel;
use crate::rng::derive_seed;
use crate::strategies::{Pipeline, StrategyRun};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    Sensitivity,
    Specificity,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Accuracy, Metric::Sensitivity, Metric::Specificity];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Sensitivity => "sensitivity",
            Metric::Specificity => "specificity",
        }
    }

    pub fn of(self, c: &Confusion) -> Option<f64> {
        match self {
            Metric::Accuracy => c.accuracy(),
            Metric::Sensitivity => c.sensitivity(),
            Metric::Specificity => c.specificity(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Rbc,
    Image,
}

impl Level {
    pub const ALL: [Level; 2] = [Level::Rbc, Level::Image];

    pub fn name(self) -> &'static str {
        match self {
            Level::Rbc => "rbc",
            Level::Image => "image",
        }
    }
}

/// Thresholds shared by every evaluation.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalConfig {
    /// Detection confidence threshold.
    pub conf_threshold: f64,
    /// IoU threshold of the dual-detector merge.
    pub merge_tau: f64,
    /// IoU threshold of verdict-to-truth matching.
    pub match_tau: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            conf_threshold: 0.25,
            merge_tau: 0.5,
            match_tau: 0.5,
        }
    }
}

/// RBC- and image-level confusions of one pipeline on one test set.
pub fn evaluate_pipeline(
    pipeline: &Pipeline,
    test: &[ImageRecord],
    cfg: &EvalConfig,
) -> (Confusion, Confusion) {
    let per_image = parallel::map_slice(test, |rec| {
        let verdicts = pipeline.predict_verdicts(&rec.pixels, cfg.conf_threshold, cfg.merge_tau);
        let rbc = match_rbc(&verdicts, &rec.annotations, cfg.match_tau);
        let predicted = crate::detector::classify_image(&verdicts);
        (rbc, predicted, rec.is_positive())
    });
    let mut rbc_total = Confusion::default();
    let mut predictions = Vec::with_capacity(test.len());
    let mut truths = Vec::with_capacity(test.len());
    for (rbc, predicted, truth) in per_image {
        rbc_total.merge(&rbc);
        predictions.push(predicted);
        truths.push(truth);
    }
    let image = image_confusion(&predictions, &truths).expect("aligned by construction");
    (rbc_total, image)
}

/// T x T matrix of one metric at one level. `rows[t]` is `None` for steps
/// the run has no model for (rows 2..T of a baseline run).
#[derive(Debug, Clone, PartialEq)]
pub struct PerformanceMatrix {
    pub t: usize,
    pub rows: Vec<Option<Vec<Option<f64>>>>,
}

impl PerformanceMatrix {
    pub fn get(&self, step: usize, task: usize) -> Option<f64> {
        self.rows.get(step)?.as_ref()?.get(task).copied().flatten()
    }

    pub fn row(&self, step: usize) -> Option<&Vec<Option<f64>>> {
        self.rows.get(step)?.as_ref()
    }

    /// The last row the run defines: row T for full runs, row 1 for the
    /// baseline (whose final model is its first).
    pub fn final_row(&self) -> Option<(usize, &Vec<Option<f64>>)> {
        self.rows
            .iter()
            .enumerate()
            .rev()
            .find_map(|(i, r)| r.as_ref().map(|row| (i, row)))
    }

    fn all_rows_present(&self, upto: usize) -> bool {
        (0..upto).all(|i| self.rows.get(i).map_or(false, |r| r.is_some()))
    }

    /// CSV with one line per existing row; undefined entries print as
    /// `undefined`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step");
        for i in 0..self.t {
            out.push_str(&format!(",task_{}", i + 1));
        }
        out.push('\n');
        for (step, row) in self.rows.iter().enumerate() {
            let Some(row) = row else { continue };
            out.push_str(&format!("{}", step + 1));
            for v in row {
                match v {
                    Some(x) => out.push_str(&format!(",{x:.6}")),
                    None => out.push_str(",undefined"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse {
            path: "matrix csv".into(),
            message: "empty file".into(),
        })?;
        let t = header.split(',').count() - 1;
        let mut rows: Vec<Option<Vec<Option<f64>>>> = vec![None; t];
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let step: usize = fields
                .next()
                .unwrap()
                .parse()
                .map_err(|e| Error::Parse {
                    path: "matrix csv".into(),
                    message: format!("bad step: {e}"),
                })?;
            let mut row = Vec::with_capacity(t);
            for f in fields {
                row.push(if f == "undefined" {
                    None
                } else {
                    Some(f.parse::<f64>().map_err(|e| Error::Parse {
                        path: "matrix csv".into(),
                        message: format!("bad value: {e}"),
                    })?)
                });
            }
            if row.len() != t || step == 0 || step > t {
                return Err(Error::Parse {
                    path: "matrix csv".into(),
                    message: format!("row {step} malformed"),
                });
            }
            rows[step - 1] = Some(row);
        }
        Ok(Self { t, rows })
    }
}

/// An averaged quantity plus how many undefined entries were skipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferValue {
    pub value: Option<f64>,
    pub skipped: usize,
}

impl TransferValue {
    fn undefined() -> Self {
        Self {
            value: None,
            skipped: 0,
        }
    }
}

/// Mean of the final model's row over all test sets.
pub fn average_performance(p: &PerformanceMatrix) -> TransferValue {
    let Some((_, row)) = p.final_row() else {
        return TransferValue::undefined();
    };
    let defined: Vec<f64> = row.iter().flatten().copied().collect();
    let skipped = row.len() - defined.len();
    if defined.is_empty() {
        TransferValue {
            value: None,
            skipped,
        }
    } else {
        TransferValue {
            value: Some(defined.iter().sum::<f64>() / defined.len() as f64),
            skipped,
        }
    }
}

/// Mean over earlier tasks of (final performance - just-trained
/// performance). Positive means later training improved earlier tasks.
/// Undefined when T < 2 or the run lacks the full row structure.
pub fn backward_transfer(p: &PerformanceMatrix) -> TransferValue {
    if p.t < 2 || !p.all_rows_present(p.t) {
        return TransferValue::undefined();
    }
    let mut terms = Vec::new();
    let mut skipped = 0usize;
    for i in 0..p.t - 1 {
        match (p.get(p.t - 1, i), p.get(i, i)) {
            (Some(final_perf), Some(own_perf)) => terms.push(final_perf - own_perf),
            _ => skipped += 1,
        }
    }
    if terms.is_empty() {
        TransferValue {
            value: None,
            skipped,
        }
    } else {
        TransferValue {
            value: Some(terms.iter().sum::<f64>() / terms.len() as f64),
            skipped,
        }
    }
}

/// Mean performance of randomly initialized pipelines, per task.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomBaseline {
    pub metric: Metric,
    pub level: Level,
    pub per_task: Vec<Option<f64>>,
}

/// Mean over tasks i >= 2 of (zero-shot performance of the previous model on
/// task i minus the random-weights baseline). Undefined when T < 2 or the
/// run lacks rows 1..T-1.
pub fn forward_transfer(p: &PerformanceMatrix, baseline: &RandomBaseline) -> TransferValue {
    if p.t < 2 || !p.all_rows_present(p.t - 1) {
        return TransferValue::undefined();
    }
    let mut terms = Vec::new();
    let mut skipped = 0usize;
    for i in 1..p.t {
        match (p.get(i - 1, i), baseline.per_task.get(i).copied().flatten()) {
            (Some(perf), Some(b)) => terms.push(perf - b),
            _ => skipped += 1,
        }
    }
    if terms.is_empty() {
        TransferValue {
            value: None,
            skipped,
        }
    } else {
        TransferValue {
            value: Some(terms.iter().sum::<f64>() / terms.len() as f64),
            skipped,
        }
    }
}

/// Both confusions for every (step, task) pair of a run, so all six
/// metric-level matrices derive from one evaluation sweep.
#[derive(Debug, Clone)]
pub struct EvalGrid {
    pub t: usize,
    pub steps: Vec<usize>,
    pub rbc: Vec<Vec<Confusion>>,
    pub image: Vec<Vec<Confusion>>,
}

impl EvalGrid {
    pub fn matrix(&self, metric: Metric, level: Level) -> PerformanceMatrix {
        let mut rows: Vec<Option<Vec<Option<f64>>>> = vec![None; self.t];
        for (pos, &step) in self.steps.iter().enumerate() {
            let source = match level {
                Level::Rbc => &self.rbc[pos],
                Level::Image => &self.image[pos],
            };
            rows[step] = Some(source.iter().map(|c| metric.of(c)).collect());
        }
        PerformanceMatrix { t: self.t, rows }
    }
}

/// Evaluate every checkpoint of a run on every task's test split.
pub fn evaluate_grid(run: &StrategyRun, stream: &TaskStream, cfg: &EvalConfig) -> Result<EvalGrid> {
    if run.kind != crate::strategies::StrategyKind::Baseline
        && run.pipelines.len() != stream.len()
    {
        return Err(Error::MissingCheckpoint {
            task: run.pipelines.len(),
        });
    }
    let steps = run.checkpoint_steps();
    let mut rbc = Vec::with_capacity(steps.len());
    let mut image = Vec::with_capacity(steps.len());
    for &step in &steps {
        let pipeline = run.pipeline_for_step(step);
        let mut rbc_row = Vec::with_capacity(stream.len());
        let mut image_row = Vec::with_capacity(stream.len());
        for site in &stream.tasks {
            let (r, i) = evaluate_pipeline(pipeline, &site.test, cfg);
            rbc_row.push(r);
            image_row.push(i);
        }
        rbc.push(rbc_row);
        image.push(image_row);
    }
    Ok(EvalGrid {
        t: stream.len(),
        steps,
        rbc,
        image,
    })
}

/// P_{t,i} for one metric at one level.
pub fn build_matrix(
    run: &StrategyRun,
    stream: &TaskStream,
    metric: Metric,
    level: Level,
    cfg: &EvalConfig,
) -> Result<PerformanceMatrix> {
    Ok(evaluate_grid(run, stream, cfg)?.matrix(metric, level))
}

/// Per-task performance of randomly initialized pipelines, averaged over
/// `runs` seeds. Seeds derive from `seed`, so the baseline is reproducible.
pub fn random_baseline(
    stream: &TaskStream,
    metric: Metric,
    level: Level,
    runs: usize,
    seed: u64,
    cfg: &EvalConfig,
) -> RandomBaseline {
    let pipelines: Vec<Pipeline> = (0..runs)
        .map(|r| Pipeline::fresh(derive_seed(seed, &["random-baseline"], &[r as u64])))
        .collect();
    let per_task = stream
        .tasks
        .iter()
        .map(|site| {
            let values: Vec<f64> = pipelines
                .iter()
                .filter_map(|p| {
                    let (rbc, image) = evaluate_pipeline(p, &site.test, cfg);
                    let c = match level {
                        Level::Rbc => rbc,
                        Level::Image => image,
                    };
                    metric.of(&c)
                })
                .collect();
            if values.is_empty() {
                None
            } else {
                Some(values.iter().sum::<f64>() / values.len() as f64)
            }
        })
        .collect();
    RandomBaseline {
        metric,
        level,
        per_task,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: Vec<Option<Vec<Option<f64>>>>) -> PerformanceMatrix {
        let t = rows.len();
        PerformanceMatrix { t, rows }
    }

    fn full(values: &[&[f64]]) -> PerformanceMatrix {
        matrix(
            values
                .iter()
                .map(|r| Some(r.iter().map(|&v| Some(v)).collect()))
                .collect(),
        )
    }

    #[test]
    fn average_of_constant_row_is_constant() {
        let p = full(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert_eq!(average_performance(&p).value, Some(1.0));
    }

    #[test]
    fn average_of_final_row() {
        let p = full(&[
            &[0.1, 0.2, 0.3, 0.4, 0.5],
            &[0.1, 0.2, 0.3, 0.4, 0.5],
            &[0.1, 0.2, 0.3, 0.4, 0.5],
            &[0.1, 0.2, 0.3, 0.4, 0.5],
            &[0.9, 0.8, 0.7, 0.6, 0.5],
        ]);
        let av = average_performance(&p);
        assert!((av.value.unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(av.skipped, 0);
    }

    #[test]
    fn average_skips_undefined_entries() {
        let p = matrix(vec![Some(vec![Some(0.5), None, Some(1.0)]), None, None]);
        let av = average_performance(&p);
        assert_eq!(av.value, Some(0.75));
        assert_eq!(av.skipped, 1);
    }

    #[test]
    fn bwt_zero_when_diagonal_matches_final_row() {
        let p = full(&[&[0.6, 0.1, 0.2], &[0.6, 0.7, 0.3], &[0.6, 0.7, 0.9]]);
        assert_eq!(backward_transfer(&p).value, Some(0.0));
    }

    #[test]
    fn bwt_two_task_formula() {
        let p = full(&[&[0.9, 0.5], &[0.8, 0.7]]);
        let bwt = backward_transfer(&p);
        assert!((bwt.value.unwrap() - (-0.1)).abs() < 1e-15);
    }

    #[test]
    fn bwt_undefined_for_single_task_or_baseline_rows() {
        let p = full(&[&[0.9]]);
        assert_eq!(backward_transfer(&p).value, None);
        // baseline shape: only row 1 of 3 exists
        let p = matrix(vec![
            Some(vec![Some(0.9), Some(0.4), Some(0.3)]),
            None,
            None,
        ]);
        assert_eq!(backward_transfer(&p).value, None);
        assert_eq!(forward_transfer(
            &p,
            &RandomBaseline {
                metric: Metric::Accuracy,
                level: Level::Rbc,
                per_task: vec![Some(0.5); 3],
            }
        )
        .value, None);
    }

    #[test]
    fn fwt_formula_and_zero_case() {
        let b = RandomBaseline {
            metric: Metric::Accuracy,
            level: Level::Rbc,
            per_task: vec![None, Some(0.5), Some(0.5)],
        };
        let p = full(&[&[0.9, 0.6, 0.1], &[0.8, 0.9, 0.7], &[0.7, 0.8, 0.9]]);
        let fwt = forward_transfer(&p, &b);
        assert!((fwt.value.unwrap() - 0.15).abs() < 1e-15);
        // no-transfer case: off-diagonals equal the baseline
        let p = full(&[&[0.9, 0.5, 0.1], &[0.8, 0.9, 0.5], &[0.7, 0.8, 0.9]]);
        assert_eq!(forward_transfer(&p, &b).value, Some(0.0));
    }

    #[test]
    fn matrix_csv_round_trips() {
        let p = matrix(vec![
            Some(vec![Some(0.123456), None]),
            Some(vec![Some(1.0), Some(0.5)]),
        ]);
        let csv = p.to_csv();
        let parsed = PerformanceMatrix::parse_csv(&csv).unwrap();
        assert_eq!(parsed.t, 2);
        assert_eq!(parsed.get(0, 0), Some(0.123456));
        assert_eq!(parsed.get(0, 1), None);
        assert_eq!(parsed.get(1, 1), Some(0.5));
    }

    #[test]
    fn transfer_values_match_closed_form_oracle_on_random_matrices() {
        use crate::rng::rng_for;
        use rand::Rng;
        let mut rng = rng_for(5, &["matrix-oracle"], &[]);
        for _ in 0..100 {
            let t = 5usize;
            let mut values = vec![vec![0.0f64; t]; t];
            for row in values.iter_mut() {
                for v in row.iter_mut() {
                    *v = rng.random_range(0.0..1.0);
                }
            }
            let b: Vec<f64> = (0..t).map(|_| rng.random_range(0.0..1.0)).collect();
            let p = full(&values.iter().map(|r| r.as_slice()).collect::<Vec<_>>());
            let baseline = RandomBaseline {
                metric: Metric::Accuracy,
                level: Level::Rbc,
                per_task: b.iter().map(|&v| Some(v)).collect(),
            };
            // closed forms computed directly from the definitions
            let avg_oracle: f64 = values[t - 1].iter().sum::<f64>() / t as f64;
            let bwt_oracle: f64 = (0..t - 1)
                .map(|i| values[t - 1][i] - values[i][i])
                .sum::<f64>()
                / (t - 1) as f64;
            let fwt_oracle: f64 = (1..t)
                .map(|i| values[i - 1][i] - b[i])
                .sum::<f64>()
                / (t - 1) as f64;
            assert!((average_performance(&p).value.unwrap() - avg_oracle).abs() <= 1e-12);
            assert!((backward_transfer(&p).value.unwrap() - bwt_oracle).abs() <= 1e-12);
            assert!((forward_transfer(&p, &baseline).value.unwrap() - fwt_oracle).abs() <= 1e-12);
        }
    }
}
