//! Resumable experiment runs: k patient-grouped folds, one strategy over the
//! stream per fold, matrices and transfer measures per fold, and an
//! aggregate summary.
//!
//! Task artifacts land on disk through an atomic rename, so a killed run
//! leaves either a complete task directory or none. The summary is always
//! recomputed from the persisted (6-decimal) matrix CSVs, which makes it
//! bit-exactly recomputable from the stored record.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::core::TaskStream;
use crate::error::{Error, Result};
use crate::eval::{
    average_performance, backward_transfer, evaluate_grid, forward_transfer, random_baseline,
    Level, Metric, PerformanceMatrix, RandomBaseline, TransferValue,
};
use crate::harness::checkpoint;
use crate::harness::config::ExperimentConfig;
use crate::harness::dataset_io::load_stream;
use crate::rng::derive_seed;
use crate::splits::{assign_folds, patient_grouped_kfold};
use crate::strategies::{
    run_strategy, SiteSelection, StrategyKind, StrategyRun, TaskArtifacts, TaskLog, TaskStore,
};

/// Disk-backed task store. Artifacts are staged into `task_<n>.tmp` and
/// renamed into place, so a task directory existing means it is complete.
pub struct DiskStore {
    fold_dir: PathBuf,
}

impl DiskStore {
    pub fn new(fold_dir: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&fold_dir)?;
        Ok(Self { fold_dir })
    }

    fn task_dir(&self, task: usize) -> PathBuf {
        self.fold_dir.join(format!("task_{}", task + 1))
    }
}

impl TaskStore for DiskStore {
    fn load(&mut self, task: usize) -> Result<Option<TaskArtifacts>> {
        let dir = self.task_dir(task);
        if !dir.exists() {
            return Ok(None);
        }
        let pipeline = crate::strategies::Pipeline {
            rbc: checkpoint::load_model(&dir.join("rbc.ckpt"))?,
            infected: checkpoint::load_model(&dir.join("infected.ckpt"))?,
        };
        let log: TaskLog = serde_json::from_str(&std::fs::read_to_string(dir.join("log.json"))?)
            .map_err(|e| Error::Parse {
                path: dir.join("log.json").display().to_string(),
                message: e.to_string(),
            })?;
        let ewc_anchor = if dir.join("ewc_rbc.anchor").exists() {
            Some((
                checkpoint::load_anchor(&dir.join("ewc_rbc.anchor"))?,
                checkpoint::load_anchor(&dir.join("ewc_infected.anchor"))?,
            ))
        } else {
            None
        };
        let buffer_site = if dir.join("buffer.csv").exists() {
            Some(SiteSelection::parse_manifest(&std::fs::read_to_string(
                dir.join("buffer.csv"),
            )?)?)
        } else {
            None
        };
        Ok(Some(TaskArtifacts {
            pipeline,
            ewc_anchor,
            buffer_site,
            log,
        }))
    }

    fn save(&mut self, task: usize, artifacts: &TaskArtifacts) -> Result<()> {
        let final_dir = self.task_dir(task);
        let tmp_dir = self.fold_dir.join(format!("task_{}.tmp", task + 1));
        if tmp_dir.exists() {
            std::fs::remove_dir_all(&tmp_dir)?;
        }
        std::fs::create_dir_all(&tmp_dir)?;
        checkpoint::save_model(&tmp_dir.join("rbc.ckpt"), &artifacts.pipeline.rbc)?;
        checkpoint::save_model(&tmp_dir.join("infected.ckpt"), &artifacts.pipeline.infected)?;
        std::fs::write(
            tmp_dir.join("log.json"),
            serde_json::to_string_pretty(&artifacts.log).expect("log serializes"),
        )?;
        if let Some((rbc, infected)) = &artifacts.ewc_anchor {
            checkpoint::save_anchor(&tmp_dir.join("ewc_rbc.anchor"), rbc)?;
            checkpoint::save_anchor(&tmp_dir.join("ewc_infected.anchor"), infected)?;
        }
        if let Some(selection) = &artifacts.buffer_site {
            std::fs::write(tmp_dir.join("buffer.csv"), selection.manifest())?;
        }
        if final_dir.exists() {
            std::fs::remove_dir_all(&final_dir)?;
        }
        std::fs::rename(&tmp_dir, &final_dir)?;
        Ok(())
    }
}

/// Store wrapper that aborts the run right after a chosen task has been
/// persisted; stands in for a kill at the resumable boundary.
struct StoppingStore<S: TaskStore> {
    inner: S,
    stop_after_task: usize,
}

impl<S: TaskStore> TaskStore for StoppingStore<S> {
    fn load(&mut self, task: usize) -> Result<Option<TaskArtifacts>> {
        self.inner.load(task)
    }

    fn save(&mut self, task: usize, artifacts: &TaskArtifacts) -> Result<()> {
        self.inner.save(task, artifacts)?;
        if task == self.stop_after_task {
            return Err(Error::Interrupted);
        }
        Ok(())
    }
}

/// Abort point for resumability tests: stop after persisting `task`
/// (0-based) of `fold`.
#[derive(Debug, Clone, Copy)]
pub struct StopAfter {
    pub fold: usize,
    pub task: usize,
}

/// Mean and population standard deviation over folds, with bookkeeping of
/// undefined values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub defined_folds: usize,
    pub skipped_entries: usize,
}

pub fn mean_std(values: &[TransferValue]) -> MeanStd {
    let defined: Vec<f64> = values.iter().filter_map(|v| v.value).collect();
    let skipped_entries = values.iter().map(|v| v.skipped).sum();
    if defined.is_empty() {
        return MeanStd {
            mean: None,
            std: None,
            defined_folds: 0,
            skipped_entries,
        };
    }
    let n = defined.len() as f64;
    let mean = defined.iter().sum::<f64>() / n;
    let var = defined.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd {
        mean: Some(mean),
        std: Some(var.sqrt()),
        defined_folds: defined.len(),
        skipped_entries,
    }
}

/// Aggregate of one metric level across folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub level: Level,
    /// Average performance per metric (accuracy, sensitivity, specificity).
    pub avg: BTreeMap<String, MeanStd>,
    /// Backward transfer of accuracy.
    pub bwt: MeanStd,
    /// Forward transfer of accuracy against the random-weights baseline.
    pub fwt: MeanStd,
}

/// Everything a finished run leaves behind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config: ExperimentConfig,
    pub stream_len: usize,
    pub fold_dirs: Vec<String>,
    pub matrix_files: Vec<String>,
    pub summaries: Vec<LevelSummary>,
}

impl ExperimentRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(
            path,
            serde_json::to_string_pretty(self).expect("record serializes"),
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

fn matrix_file(fold: usize, metric: Metric, level: Level) -> String {
    format!("fold_{fold}/matrices/{}_{}.csv", metric.name(), level.name())
}

fn baseline_file(fold: usize, level: Level) -> String {
    format!("fold_{fold}/matrices/random_baseline_{}.csv", level.name())
}

fn write_random_baseline_csv(path: &Path, baseline: &RandomBaseline) -> Result<()> {
    let mut out = String::from("task,value\n");
    for (i, v) in baseline.per_task.iter().enumerate() {
        match v {
            Some(x) => out.push_str(&format!("{},{x:.6}\n", i + 1)),
            None => out.push_str(&format!("{},undefined\n", i + 1)),
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn read_random_baseline_csv(path: &Path, metric: Metric, level: Level) -> Result<RandomBaseline> {
    let text = std::fs::read_to_string(path)?;
    let mut per_task = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let (_, v) = line.split_once(',').ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            message: format!("line {}: expected two fields", i + 1),
        })?;
        per_task.push(if v == "undefined" {
            None
        } else {
            Some(v.parse::<f64>().map_err(|e| Error::Parse {
                path: path.display().to_string(),
                message: e.to_string(),
            })?)
        });
    }
    Ok(RandomBaseline {
        metric,
        level,
        per_task,
    })
}

/// Load the persisted matrix of one fold.
pub fn load_matrix(out_dir: &Path, fold: usize, metric: Metric, level: Level) -> Result<PerformanceMatrix> {
    let path = out_dir.join(matrix_file(fold, metric, level));
    PerformanceMatrix::parse_csv(&std::fs::read_to_string(&path)?)
}

/// Compute the per-level summaries from the persisted CSVs (never from
/// in-memory state), so the summary is recomputable from the record alone.
pub fn summarize_from_disk(out_dir: &Path, folds: usize) -> Result<Vec<LevelSummary>> {
    let mut summaries = Vec::new();
    for level in Level::ALL {
        let mut avg: BTreeMap<String, MeanStd> = BTreeMap::new();
        for metric in Metric::ALL {
            let per_fold: Vec<TransferValue> = (0..folds)
                .map(|fold| {
                    let m = load_matrix(out_dir, fold, metric, level)?;
                    Ok(average_performance(&m))
                })
                .collect::<Result<_>>()?;
            avg.insert(metric.name().to_string(), mean_std(&per_fold));
        }
        // transfer measures follow the accuracy matrix
        let mut bwt_values = Vec::new();
        let mut fwt_values = Vec::new();
        for fold in 0..folds {
            let m = load_matrix(out_dir, fold, Metric::Accuracy, level)?;
            bwt_values.push(backward_transfer(&m));
            let b = read_random_baseline_csv(
                &out_dir.join(baseline_file(fold, level)),
                Metric::Accuracy,
                level,
            )?;
            fwt_values.push(forward_transfer(&m, &b));
        }
        summaries.push(LevelSummary {
            level,
            avg,
            bwt: mean_std(&bwt_values),
            fwt: mean_std(&fwt_values),
        });
    }
    Ok(summaries)
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "-".to_string(),
    }
}

/// Single-strategy summary CSV row (the report merges rows across runs).
pub fn summary_csv(strategy: StrategyKind, summary: &LevelSummary) -> String {
    let mut out = String::from(
        "strategy,av_accuracy_mean,av_accuracy_std,av_sensitivity_mean,av_sensitivity_std,\
         av_specificity_mean,av_specificity_std,bwt_mean,bwt_std,fwt_mean,fwt_std\n",
    );
    out.push_str(&summary_csv_row(strategy, summary));
    out
}

pub fn summary_csv_row(strategy: StrategyKind, summary: &LevelSummary) -> String {
    let get = |name: &str| summary.avg.get(name).copied().unwrap_or(MeanStd {
        mean: None,
        std: None,
        defined_folds: 0,
        skipped_entries: 0,
    });
    let acc = get("accuracy");
    let sens = get("sensitivity");
    let spec = get("specificity");
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}\n",
        strategy.name(),
        fmt_opt(acc.mean),
        fmt_opt(acc.std),
        fmt_opt(sens.mean),
        fmt_opt(sens.std),
        fmt_opt(spec.mean),
        fmt_opt(spec.std),
        fmt_opt(summary.bwt.mean),
        fmt_opt(summary.bwt.std),
        fmt_opt(summary.fwt.mean),
        fmt_opt(summary.fwt.std),
    )
}

/// Build per-fold streams by re-partitioning every site by patient.
pub fn fold_streams(stream: &TaskStream, folds: usize, seed: u64) -> Result<Vec<TaskStream>> {
    let mut per_site = Vec::with_capacity(stream.len());
    for site in &stream.tasks {
        per_site.push(patient_grouped_kfold(site, folds, seed)?);
    }
    (0..folds)
        .map(|fold| {
            TaskStream::new(
                per_site
                    .iter()
                    .map(|parts| parts[fold].dataset.clone())
                    .collect(),
            )
        })
        .collect()
}

/// Run the configured experiment, reusing any completed tasks found in the
/// output directory. Returns `None` when stopped at the requested boundary.
pub fn run_experiment(
    config: &ExperimentConfig,
    stop: Option<StopAfter>,
) -> Result<Option<ExperimentRecord>> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir)?;
    let config_path = config.out_dir.join("config.toml");
    if config_path.exists() {
        let stored = ExperimentConfig::load(&config_path)?;
        if &stored != config {
            return Err(Error::Config(format!(
                "output directory {} holds a different config; refusing to mix runs",
                config.out_dir.display()
            )));
        }
    } else {
        config.save(&config_path)?;
    }

    let stream = load_stream(&config.data_dir)?;
    let eval_cfg = config.eval_config();

    // fold assignment tables, for provenance
    for site in &stream.tasks {
        let assignment = assign_folds(site, config.folds, config.seed)?;
        std::fs::write(
            config.out_dir.join(format!("folds_site_{}.csv", site.site_id)),
            assignment.to_table(),
        )?;
    }
    let streams = fold_streams(&stream, config.folds, config.seed)?;

    let mut matrix_files = Vec::new();
    let mut fold_dirs = Vec::new();
    for (fold, fold_stream) in streams.iter().enumerate() {
        let fold_dir = config.out_dir.join(format!("fold_{fold}"));
        fold_dirs.push(format!("fold_{fold}"));
        let settings = config.strategy_settings(fold);
        let disk = DiskStore::new(fold_dir.clone())?;
        let run_result = match stop {
            Some(point) if point.fold == fold => {
                let mut store = StoppingStore {
                    inner: disk,
                    stop_after_task: point.task,
                };
                run_strategy(config.strategy, fold_stream, &settings, &mut store)
            }
            _ => {
                let mut store = disk;
                run_strategy(config.strategy, fold_stream, &settings, &mut store)
            }
        };
        let run: StrategyRun = match run_result {
            Ok(run) => run,
            Err(Error::Interrupted) => {
                log::info!("run interrupted after fold {fold} task boundary");
                return Ok(None);
            }
            Err(e) => return Err(e),
        };

        // evaluation: all six matrices from one sweep, then random baselines
        let grid = evaluate_grid(&run, fold_stream, &eval_cfg)?;
        let matrices_dir = fold_dir.join("matrices");
        std::fs::create_dir_all(&matrices_dir)?;
        for level in Level::ALL {
            for metric in Metric::ALL {
                let m = grid.matrix(metric, level);
                let rel = matrix_file(fold, metric, level);
                std::fs::write(config.out_dir.join(&rel), m.to_csv())?;
                matrix_files.push(rel);
            }
            let baseline = random_baseline(
                fold_stream,
                Metric::Accuracy,
                level,
                config.random_baseline_runs,
                derive_seed(config.seed, &["randbase"], &[fold as u64]),
                &eval_cfg,
            );
            write_random_baseline_csv(
                &config.out_dir.join(baseline_file(fold, level)),
                &baseline,
            )?;
        }
    }

    let summaries = summarize_from_disk(&config.out_dir, config.folds)?;
    for summary in &summaries {
        std::fs::write(
            config
                .out_dir
                .join(format!("summary_{}.csv", summary.level.name())),
            summary_csv(config.strategy, summary),
        )?;
    }
    let record = ExperimentRecord {
        config: config.clone(),
        stream_len: stream.len(),
        fold_dirs,
        matrix_files,
        summaries,
    };
    record.save(&config.out_dir.join("record.json"))?;
    Ok(Some(record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::CellClass;
    use crate::detector::DetectorModel;
    use crate::strategies::Pipeline;

    #[test]
    fn disk_store_round_trips_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = DiskStore::new(dir.path().to_path_buf()).unwrap();
        assert!(store.load(0).unwrap().is_none());
        let pipeline = Pipeline {
            rbc: DetectorModel::build_reference(CellClass::Rbc, 1),
            infected: DetectorModel::build_reference(CellClass::Infected, 2),
        };
        let artifacts = TaskArtifacts {
            pipeline: pipeline.clone(),
            ewc_anchor: Some((
                crate::strategies::AnchorEntry {
                    theta_star: vec![1.0, 2.0],
                    fisher: vec![0.5, 0.0],
                },
                crate::strategies::AnchorEntry {
                    theta_star: vec![-1.0, 0.25],
                    fisher: vec![0.1, 3.0],
                },
            )),
            buffer_site: Some(SiteSelection {
                site_id: "1".into(),
                entries: vec![crate::strategies::BufferEntry {
                    image_id: "1-p00-000".into(),
                    positive: true,
                    score: Some(0.5),
                }],
            }),
            log: TaskLog {
                task: 0,
                site_id: "1".into(),
                train_images: 10,
                buffered_images: 0,
                rbc: crate::detector::TrainLog {
                    epochs_run: 1,
                    best_epoch: 1,
                    best_val_f1: Some(1.0),
                    best_val_loss: 0.5,
                    final_train_loss: 0.4,
                },
                infected: crate::detector::TrainLog {
                    epochs_run: 1,
                    best_epoch: 1,
                    best_val_f1: None,
                    best_val_loss: 0.5,
                    final_train_loss: 0.4,
                },
            },
        };
        store.save(0, &artifacts).unwrap();
        let loaded = store.load(0).unwrap().unwrap();
        assert_eq!(loaded.pipeline.rbc.params, pipeline.rbc.params);
        assert_eq!(loaded.ewc_anchor, artifacts.ewc_anchor);
        assert_eq!(loaded.buffer_site, artifacts.buffer_site);
        assert_eq!(loaded.log, artifacts.log);
    }

    #[test]
    fn mean_std_handles_undefined() {
        let vs = [
            TransferValue {
                value: Some(0.5),
                skipped: 1,
            },
            TransferValue {
                value: None,
                skipped: 0,
            },
            TransferValue {
                value: Some(0.7),
                skipped: 0,
            },
        ];
        let ms = mean_std(&vs);
        assert_eq!(ms.defined_folds, 2);
        assert_eq!(ms.skipped_entries, 1);
        assert!((ms.mean.unwrap() - 0.6).abs() < 1e-15);
        assert!((ms.std.unwrap() - 0.1).abs() < 1e-12);
        let undef = mean_std(&[TransferValue {
            value: None,
            skipped: 2,
        }]);
        assert_eq!(undef.mean, None);
        assert_eq!(undef.std, None);
    }
}
