//! The six training strategies over a task stream.
//!
//! All strategies share one runner: per task they assemble a training
//! mixture, pick the auxiliary loss, train both pipeline models with
//! task-derived seeds, then update strategy state (EWC anchors, the replay
//! buffer). Task 1 is strategy-independent by construction — same data, same
//! seeds, inactive hooks — so every strategy produces an identical first
//! pipeline for identical seeds.

pub mod buffer;
pub mod ewc;
pub mod lwf;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::core::{CellClass, ImageRecord, TaskStream};
use crate::detector::{train, AuxLoss, DetectorModel, TrainConfig, TrainLog};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

pub use buffer::{BufferConfig, BufferEntry, MemoryBuffer, SiteSelection};
pub use ewc::{AnchorEntry, AnchorSet, EwcAux};
pub use lwf::{LwfAux, TeacherSnapshot};

/// The strategy roster, in the reporting order of the summary tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Baseline,
    Ewc,
    Lwf,
    ReplayNaive,
    ReplayConf,
    Joint,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::Baseline,
        StrategyKind::Ewc,
        StrategyKind::Lwf,
        StrategyKind::ReplayNaive,
        StrategyKind::ReplayConf,
        StrategyKind::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Baseline => "baseline",
            StrategyKind::Ewc => "ewc",
            StrategyKind::Lwf => "lwf",
            StrategyKind::ReplayNaive => "replay-naive",
            StrategyKind::ReplayConf => "replay-conf",
            StrategyKind::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(StrategyKind::Baseline),
            "ewc" => Ok(StrategyKind::Ewc),
            "lwf" => Ok(StrategyKind::Lwf),
            "replay-naive" => Ok(StrategyKind::ReplayNaive),
            "replay-conf" => Ok(StrategyKind::ReplayConf),
            "joint" => Ok(StrategyKind::Joint),
            other => Err(Error::UnknownStrategy(other.to_string())),
        }
    }

    /// Whether the regularization strength applies to this strategy.
    pub fn uses_lambda(self) -> bool {
        matches!(self, StrategyKind::Ewc | StrategyKind::Lwf)
    }

    pub fn is_replay(self) -> bool {
        matches!(self, StrategyKind::ReplayNaive | StrategyKind::ReplayConf)
    }
}

/// The dual-detector pipeline trained per task.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub rbc: DetectorModel,
    pub infected: DetectorModel,
}

impl Pipeline {
    /// Fresh random pipeline; per-class init seeds derive from `seed`.
    pub fn fresh(seed: u64) -> Self {
        Self {
            rbc: DetectorModel::build_reference(
                CellClass::Rbc,
                derive_seed(seed, &["init", "rbc"], &[]),
            ),
            infected: DetectorModel::build_reference(
                CellClass::Infected,
                derive_seed(seed, &["init", "infected"], &[]),
            ),
        }
    }

    /// Full merge pipeline on one image.
    pub fn predict_verdicts(
        &self,
        pixels: &crate::core::Pixels,
        threshold: f64,
        tau: f64,
    ) -> Vec<crate::detector::CellVerdict> {
        let rbc = crate::detector::detect(&self.rbc, pixels, threshold);
        let infected = crate::detector::detect(&self.infected, pixels, threshold);
        crate::detector::merge_detections(&rbc, &infected, tau)
    }
}

/// Everything a strategy run needs beyond the stream itself.
#[derive(Debug, Clone)]
pub struct StrategySettings {
    /// Per-task training template; its seed field is overridden with a seed
    /// derived from (master_seed, fold, task, model class).
    pub train: TrainConfig,
    pub master_seed: u64,
    pub fold: usize,
    pub ewc_lambda: f64,
    pub lwf_lambda: f64,
    pub buffer: BufferConfig,
    /// Images used for the Fisher diagonal after each EWC task.
    pub fisher_samples: usize,
    /// Score confidence replay with the all-RBC model instead of the
    /// infected-RBC model.
    pub score_with_rbc_model: bool,
}

impl Default for StrategySettings {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            master_seed: 0,
            fold: 0,
            ewc_lambda: 10.0,
            lwf_lambda: 1.0,
            buffer: BufferConfig::default(),
            fisher_samples: 256,
            score_with_rbc_model: false,
        }
    }
}

/// Per-task training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    pub task: usize,
    pub site_id: String,
    pub train_images: usize,
    pub buffered_images: usize,
    pub rbc: TrainLog,
    pub infected: TrainLog,
}

/// Everything persisted per completed task.
#[derive(Debug, Clone)]
pub struct TaskArtifacts {
    pub pipeline: Pipeline,
    /// (all-RBC, infected) anchors appended after an EWC task.
    pub ewc_anchor: Option<(AnchorEntry, AnchorEntry)>,
    /// Buffer contribution of this task's site, for replay strategies.
    pub buffer_site: Option<SiteSelection>,
    pub log: TaskLog,
}

/// Checkpoint persistence at task granularity; a disk-backed implementation
/// lives in the harness, the in-memory one below serves library callers.
pub trait TaskStore {
    fn load(&mut self, task: usize) -> Result<Option<TaskArtifacts>>;
    fn save(&mut self, task: usize, artifacts: &TaskArtifacts) -> Result<()>;
}

/// Volatile store: nothing is reused across runs.
#[derive(Default)]
pub struct MemoryStore {
    map: BTreeMap<usize, TaskArtifacts>,
}

impl TaskStore for MemoryStore {
    fn load(&mut self, task: usize) -> Result<Option<TaskArtifacts>> {
        Ok(self.map.get(&task).cloned())
    }

    fn save(&mut self, task: usize, artifacts: &TaskArtifacts) -> Result<()> {
        self.map.insert(task, artifacts.clone());
        Ok(())
    }
}

/// A completed strategy run: the baseline stores a single pipeline (reused
/// for every task), all other strategies store one pipeline per task.
#[derive(Debug, Clone)]
pub struct StrategyRun {
    pub kind: StrategyKind,
    pub stream_len: usize,
    pub pipelines: Vec<Pipeline>,
    pub logs: Vec<TaskLog>,
    pub buffer: MemoryBuffer,
}

impl StrategyRun {
    /// The pipeline standing in for model f_t (0-based task index).
    pub fn pipeline_for_step(&self, task: usize) -> &Pipeline {
        if self.kind == StrategyKind::Baseline {
            &self.pipelines[0]
        } else {
            &self.pipelines[task]
        }
    }

    /// The matrix rows this run defines: row 0 only for the baseline.
    pub fn checkpoint_steps(&self) -> Vec<usize> {
        if self.kind == StrategyKind::Baseline {
            vec![0]
        } else {
            (0..self.pipelines.len()).collect()
        }
    }
}

fn train_seed(settings: &StrategySettings, task: usize, cls: CellClass) -> u64 {
    let tag = match cls {
        CellClass::Rbc => "rbc",
        CellClass::Infected => "infected",
    };
    derive_seed(
        settings.master_seed,
        &["train", tag],
        &[settings.fold as u64, task as u64],
    )
}

fn train_one(
    init: &DetectorModel,
    train_set: &[&ImageRecord],
    val_set: &[&ImageRecord],
    settings: &StrategySettings,
    task: usize,
    aux: Option<&dyn AuxLoss>,
) -> Result<(DetectorModel, TrainLog)> {
    let cfg = TrainConfig {
        seed: train_seed(settings, task, init.target),
        ..settings.train.clone()
    };
    train(init, train_set, val_set, &cfg, aux)
}

/// Run one strategy over the stream, reusing completed tasks from `store`.
pub fn run_strategy(
    kind: StrategyKind,
    stream: &TaskStream,
    settings: &StrategySettings,
    store: &mut dyn TaskStore,
) -> Result<StrategyRun> {
    let t_total = stream.len();
    let trained_tasks = if kind == StrategyKind::Baseline {
        1
    } else {
        t_total
    };

    let mut pipelines: Vec<Pipeline> = Vec::with_capacity(trained_tasks);
    let mut logs: Vec<TaskLog> = Vec::with_capacity(trained_tasks);
    let mut rbc_anchors = AnchorSet::new(settings.ewc_lambda);
    let mut inf_anchors = AnchorSet::new(settings.ewc_lambda);
    let mut replay_buffer = MemoryBuffer::new(settings.buffer.clone());

    for task in 0..trained_tasks {
        let site = &stream.tasks[task];
        if let Some(artifacts) = store.load(task)? {
            if let Some((rbc_anchor, inf_anchor)) = artifacts.ewc_anchor {
                rbc_anchors.push(rbc_anchor.theta_star, rbc_anchor.fisher)?;
                inf_anchors.push(inf_anchor.theta_star, inf_anchor.fisher)?;
            }
            if let Some(selection) = artifacts.buffer_site {
                replay_buffer.add_site(selection);
            }
            logs.push(artifacts.log);
            pipelines.push(artifacts.pipeline);
            log::info!("task {}: reusing stored checkpoint", task + 1);
            continue;
        }

        // training mixture
        let mut train_refs: Vec<&ImageRecord> = match kind {
            StrategyKind::Joint => {
                let mut refs = Vec::new();
                for prev in &stream.tasks[..=task] {
                    refs.extend(prev.train.iter());
                }
                refs
            }
            _ => site.train.iter().collect(),
        };
        let mut buffered = 0usize;
        if kind.is_replay() {
            let replayed = replay_buffer.resolve(stream)?;
            buffered = replayed.len();
            train_refs.extend(replayed);
        }
        let val_refs: Vec<&ImageRecord> = site.val.iter().collect();

        let init = if task == 0 {
            Pipeline::fresh(derive_seed(
                settings.master_seed,
                &["pipeline-init"],
                &[settings.fold as u64],
            ))
        } else {
            pipelines[task - 1].clone()
        };

        log::info!(
            "task {}/{} (site {}): strategy {}, {} train images ({} buffered)",
            task + 1,
            t_total,
            site.site_id,
            kind.name(),
            train_refs.len(),
            buffered
        );

        let (rbc_model, inf_model, rbc_log, inf_log) = match kind {
            StrategyKind::Ewc => {
                let rbc_aux = EwcAux::new(&rbc_anchors);
                let inf_aux = EwcAux::new(&inf_anchors);
                let (rm, rl) = train_one(
                    &init.rbc,
                    &train_refs,
                    &val_refs,
                    settings,
                    task,
                    Some(&rbc_aux),
                )?;
                let (im, il) = train_one(
                    &init.infected,
                    &train_refs,
                    &val_refs,
                    settings,
                    task,
                    Some(&inf_aux),
                )?;
                (rm, im, rl, il)
            }
            StrategyKind::Lwf if task > 0 => {
                let teacher = &pipelines[task - 1];
                let rbc_aux = LwfAux::new(&teacher.rbc, settings.lwf_lambda);
                let inf_aux = LwfAux::new(&teacher.infected, settings.lwf_lambda);
                let (rm, rl) = train_one(
                    &init.rbc,
                    &train_refs,
                    &val_refs,
                    settings,
                    task,
                    Some(&rbc_aux),
                )?;
                let (im, il) = train_one(
                    &init.infected,
                    &train_refs,
                    &val_refs,
                    settings,
                    task,
                    Some(&inf_aux),
                )?;
                (rm, im, rl, il)
            }
            _ => {
                let (rm, rl) = train_one(&init.rbc, &train_refs, &val_refs, settings, task, None)?;
                let (im, il) =
                    train_one(&init.infected, &train_refs, &val_refs, settings, task, None)?;
                (rm, im, rl, il)
            }
        };

        let pipeline = Pipeline {
            rbc: rbc_model,
            infected: inf_model,
        };
        let log = TaskLog {
            task,
            site_id: site.site_id.clone(),
            train_images: train_refs.len(),
            buffered_images: buffered,
            rbc: rbc_log,
            infected: inf_log,
        };

        let mut artifacts = TaskArtifacts {
            pipeline: pipeline.clone(),
            ewc_anchor: None,
            buffer_site: None,
            log: log.clone(),
        };

        if kind == StrategyKind::Ewc {
            let site_refs: Vec<&ImageRecord> = site.train.iter().collect();
            let rbc_fisher = ewc::fisher_diagonal(
                &pipeline.rbc,
                &site_refs,
                settings.fisher_samples,
                derive_seed(
                    settings.master_seed,
                    &["fisher", "rbc"],
                    &[settings.fold as u64, task as u64],
                ),
            );
            let inf_fisher = ewc::fisher_diagonal(
                &pipeline.infected,
                &site_refs,
                settings.fisher_samples,
                derive_seed(
                    settings.master_seed,
                    &["fisher", "infected"],
                    &[settings.fold as u64, task as u64],
                ),
            );
            let rbc_anchor = AnchorEntry {
                theta_star: pipeline.rbc.params.clone(),
                fisher: rbc_fisher,
            };
            let inf_anchor = AnchorEntry {
                theta_star: pipeline.infected.params.clone(),
                fisher: inf_fisher,
            };
            rbc_anchors.push(rbc_anchor.theta_star.clone(), rbc_anchor.fisher.clone())?;
            inf_anchors.push(inf_anchor.theta_star.clone(), inf_anchor.fisher.clone())?;
            artifacts.ewc_anchor = Some((rbc_anchor, inf_anchor));
        }

        if kind.is_replay() {
            let selection = match kind {
                StrategyKind::ReplayNaive => buffer::select_naive(
                    &settings.buffer,
                    &site.site_id,
                    &site.train,
                    derive_seed(
                        settings.master_seed,
                        &["buffer"],
                        &[settings.fold as u64, task as u64],
                    ),
                )?,
                StrategyKind::ReplayConf => {
                    let scorer = if settings.score_with_rbc_model {
                        &pipeline.rbc
                    } else {
                        &pipeline.infected
                    };
                    buffer::select_confidence(
                        &settings.buffer,
                        &site.site_id,
                        &site.train,
                        scorer,
                        settings.train.conf_threshold,
                    )?
                }
                _ => unreachable!(),
            };
            replay_buffer.add_site(selection.clone());
            artifacts.buffer_site = Some(selection);
        }

        store.save(task, &artifacts)?;
        pipelines.push(pipeline);
        logs.push(log);
    }

    Ok(StrategyRun {
        kind,
        stream_len: t_total,
        pipelines,
        logs,
        buffer: replay_buffer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_site, SiteProfile};

    fn tiny_profile(site_id: &str, seed: u64) -> SiteProfile {
        SiteProfile {
            site_id: site_id.into(),
            n_patients: 4,
            images_per_patient: (2, 2),
            positive_image_fraction: 0.6,
            test_fraction: 0.25,
            cell_density: (4, 7),
            parasite_per_positive: (1, 2),
            stain_hue_shift: 0.0,
            background_tint: [236, 222, 228],
            blur_sigma: 0.0,
            noise_std: 2.0,
            artifact_rate: 0.0,
            seed,
        }
    }

    fn tiny_stream(n_sites: usize) -> TaskStream {
        let tasks: Vec<_> = (0..n_sites)
            .map(|i| {
                let (mut ds, _) =
                    generate_site(&tiny_profile(&format!("{}", i + 1), 100)).unwrap();
                // carve a val image out of train for early stopping
                let val = ds.train.split_off(ds.train.len() - 2);
                ds.val = val;
                ds
            })
            .collect();
        TaskStream::new(tasks).unwrap()
    }

    fn fast_settings() -> StrategySettings {
        StrategySettings {
            train: TrainConfig {
                epochs: 2,
                patience: 1,
                batch_size: 4,
                ..TrainConfig::default()
            },
            master_seed: 7,
            fisher_samples: 4,
            ..StrategySettings::default()
        }
    }

    #[test]
    fn all_strategies_share_the_first_pipeline() {
        let stream = tiny_stream(2);
        let settings = fast_settings();
        let mut first: Option<Pipeline> = None;
        for kind in StrategyKind::ALL {
            let run =
                run_strategy(kind, &stream, &settings, &mut MemoryStore::default()).unwrap();
            let p = run.pipeline_for_step(0).clone();
            match &first {
                None => first = Some(p),
                Some(expect) => {
                    assert_eq!(
                        p.rbc.params,
                        expect.rbc.params,
                        "strategy {} diverged on task 1 (rbc)",
                        kind.name()
                    );
                    assert_eq!(
                        p.infected.params,
                        expect.infected.params,
                        "strategy {} diverged on task 1 (infected)",
                        kind.name()
                    );
                }
            }
        }
    }

    #[test]
    fn baseline_stores_single_pipeline() {
        let stream = tiny_stream(3);
        let run = run_strategy(
            StrategyKind::Baseline,
            &stream,
            &fast_settings(),
            &mut MemoryStore::default(),
        )
        .unwrap();
        assert_eq!(run.pipelines.len(), 1);
        assert_eq!(run.checkpoint_steps(), vec![0]);
        // every step reuses f_1
        assert_eq!(
            run.pipeline_for_step(2).rbc.params,
            run.pipeline_for_step(0).rbc.params
        );
    }

    #[test]
    fn non_baseline_stores_one_pipeline_per_task() {
        let stream = tiny_stream(3);
        for kind in [
            StrategyKind::Joint,
            StrategyKind::ReplayNaive,
            StrategyKind::Lwf,
        ] {
            let run =
                run_strategy(kind, &stream, &fast_settings(), &mut MemoryStore::default())
                    .unwrap();
            assert_eq!(run.pipelines.len(), 3, "{}", kind.name());
            assert_eq!(run.checkpoint_steps(), vec![0, 1, 2]);
        }
    }

    #[test]
    fn joint_concatenates_training_sets() {
        let stream = tiny_stream(2);
        let run = run_strategy(
            StrategyKind::Joint,
            &stream,
            &fast_settings(),
            &mut MemoryStore::default(),
        )
        .unwrap();
        let d1 = stream.tasks[0].train.len();
        let d2 = stream.tasks[1].train.len();
        assert_eq!(run.logs[0].train_images, d1);
        assert_eq!(run.logs[1].train_images, d1 + d2);
    }

    #[test]
    fn replay_mixes_buffer_into_later_tasks() {
        let stream = tiny_stream(2);
        let settings = fast_settings();
        let run = run_strategy(
            StrategyKind::ReplayNaive,
            &stream,
            &settings,
            &mut MemoryStore::default(),
        )
        .unwrap();
        let d2 = stream.tasks[1].train.len();
        assert_eq!(run.logs[0].buffered_images, 0);
        assert!(run.logs[1].buffered_images > 0);
        assert_eq!(
            run.logs[1].train_images,
            d2 + run.logs[1].buffered_images
        );
    }

    #[test]
    fn store_reuse_resumes_identically() {
        let stream = tiny_stream(2);
        let settings = fast_settings();
        let mut store = MemoryStore::default();
        let full =
            run_strategy(StrategyKind::ReplayNaive, &stream, &settings, &mut store).unwrap();
        // second run over the same store must reuse everything bit-exactly
        let resumed =
            run_strategy(StrategyKind::ReplayNaive, &stream, &settings, &mut store).unwrap();
        for (a, b) in full.pipelines.iter().zip(&resumed.pipelines) {
            assert_eq!(a.rbc.params, b.rbc.params);
            assert_eq!(a.infected.params, b.infected.params);
        }
        assert_eq!(full.logs, resumed.logs);
    }

    #[test]
    fn ewc_accumulates_one_anchor_per_task() {
        let stream = tiny_stream(2);
        let mut store = MemoryStore::default();
        let run =
            run_strategy(StrategyKind::Ewc, &stream, &fast_settings(), &mut store).unwrap();
        assert_eq!(run.pipelines.len(), 2);
        let first = store.load(0).unwrap().unwrap();
        assert!(first.ewc_anchor.is_some());
        let anchor = first.ewc_anchor.unwrap();
        assert_eq!(
            anchor.0.theta_star.len(),
            run.pipelines[0].rbc.params.len()
        );
        assert!(anchor.0.fisher.iter().all(|&f| f >= 0.0));
    }
}
