//! Report generation over one or more experiment records: merged summary
//! tables per metric level, per-task curve data with fold spread, rendered
//! SVG plots, and a text table with best values highlighted. The CSVs are
//! the contract; the plots are convenience.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::eval::{Level, Metric, PerformanceMatrix};
use crate::harness::experiment::{
    load_matrix, mean_std, summary_csv_row, ExperimentRecord, LevelSummary, MeanStd,
};
use crate::eval::TransferValue;
use crate::strategies::StrategyKind;

/// A record plus where it lives.
struct LoadedRecord {
    dir: PathBuf,
    record: ExperimentRecord,
}

/// Paths of everything the report emitted.
#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub summary_csvs: Vec<PathBuf>,
    pub curves_csv: PathBuf,
    pub plots: Vec<PathBuf>,
    pub text: String,
}

fn load_records(record_dirs: &[PathBuf]) -> Result<Vec<LoadedRecord>> {
    if record_dirs.is_empty() {
        return Err(Error::Config("need at least one experiment record".into()));
    }
    let mut records = Vec::with_capacity(record_dirs.len());
    for dir in record_dirs {
        let record = ExperimentRecord::load(&dir.join("record.json"))?;
        records.push(LoadedRecord {
            dir: dir.clone(),
            record,
        });
    }
    let t0 = records[0].record.stream_len;
    for r in &records {
        if r.record.stream_len != t0 {
            return Err(Error::Config(format!(
                "records disagree on the number of tasks: {} has T={}, {} has T={}",
                records[0].dir.display(),
                t0,
                r.dir.display(),
                r.record.stream_len
            )));
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for r in &records {
        if !seen.insert(r.record.config.strategy) {
            return Err(Error::Config(format!(
                "duplicate record for strategy {}",
                r.record.config.strategy.name()
            )));
        }
    }
    // table order
    let order: Vec<StrategyKind> = StrategyKind::ALL.to_vec();
    let mut sorted = records;
    sorted.sort_by_key(|r| {
        order
            .iter()
            .position(|k| *k == r.record.config.strategy)
            .unwrap_or(usize::MAX)
    });
    Ok(sorted)
}

fn summary_of(record: &ExperimentRecord, level: Level) -> Option<&LevelSummary> {
    record.summaries.iter().find(|s| s.level == level)
}

/// Per-task curve value: the just-trained model's performance on its own
/// task (P_{t,t}); for the baseline, the first model's performance (P_{1,t}).
fn curve_value(matrix: &PerformanceMatrix, baseline: bool, task: usize) -> Option<f64> {
    if baseline {
        matrix.get(0, task)
    } else {
        matrix.get(task, task)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "-".to_string(),
    }
}

fn render_text_table(records: &[LoadedRecord]) -> String {
    let mut out = String::new();
    for level in Level::ALL {
        out.push_str(&format!("== {} level ==\n", level.name()));
        out.push_str(&format!(
            "{:<14}{:>20}{:>20}{:>20}{:>12}{:>12}\n",
            "strategy", "av accuracy", "av sensitivity", "av specificity", "bwt", "fwt"
        ));
        // collect per-column values for best-value marking (higher is better)
        let cell = |ms: &MeanStd| -> (Option<f64>, String) {
            match (ms.mean, ms.std) {
                (Some(m), Some(s)) => (Some(m), format!("{m:.4} ± {s:.4}")),
                _ => (None, "-".to_string()),
            }
        };
        let mut rows: Vec<(String, Vec<(Option<f64>, String)>)> = Vec::new();
        for r in records {
            let Some(summary) = summary_of(&r.record, level) else {
                continue;
            };
            let get = |name: &str| summary.avg.get(name).cloned().unwrap_or(MeanStd {
                mean: None,
                std: None,
                defined_folds: 0,
                skipped_entries: 0,
            });
            let cells = vec![
                cell(&get("accuracy")),
                cell(&get("sensitivity")),
                cell(&get("specificity")),
                cell(&summary.bwt),
                cell(&summary.fwt),
            ];
            rows.push((r.record.config.strategy.name().to_string(), cells));
        }
        let n_cols = 5;
        let mut best: Vec<Option<f64>> = vec![None; n_cols];
        for (_, cells) in &rows {
            for (c, (v, _)) in cells.iter().enumerate() {
                if let Some(v) = v {
                    if best[c].map_or(true, |b| *v > b) {
                        best[c] = Some(*v);
                    }
                }
            }
        }
        for (name, cells) in &rows {
            out.push_str(&format!("{name:<14}"));
            for (c, (v, text)) in cells.iter().enumerate() {
                let marked = match (v, best[c]) {
                    (Some(v), Some(b)) if *v == b => format!("{text}*"),
                    _ => text.clone(),
                };
                let width = if c < 3 { 20 } else { 12 };
                out.push_str(&format!("{marked:>width$}"));
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

fn plot_curves(
    path: &Path,
    level: Level,
    metric: Metric,
    t: usize,
    series: &[(String, Vec<(usize, f64)>)],
) -> Result<()> {
    let root = SVGBackend::new(path, (800, 520)).into_drawing_area();
    root.fill(&WHITE)
        .map_err(|e| Error::Config(format!("plot: {e}")))?;
    let caption = format!("{} ({} level)", metric.name(), level.name());
    let mut chart = ChartBuilder::on(&root)
        .caption(caption, ("sans-serif", 22))
        .margin(18)
        .x_label_area_size(42)
        .y_label_area_size(52)
        .build_cartesian_2d(0.8f64..(t as f64 + 0.2), 0f64..1.05f64)
        .map_err(|e| Error::Config(format!("plot: {e}")))?;
    chart
        .configure_mesh()
        .x_desc("task")
        .y_desc(metric.name())
        .x_labels(t)
        .draw()
        .map_err(|e| Error::Config(format!("plot: {e}")))?;
    let palette = [
        RGBColor(31, 119, 180),
        RGBColor(255, 127, 14),
        RGBColor(44, 160, 44),
        RGBColor(214, 39, 40),
        RGBColor(148, 103, 189),
        RGBColor(140, 86, 75),
    ];
    for (i, (name, points)) in series.iter().enumerate() {
        let color = palette[i % palette.len()];
        let data: Vec<(f64, f64)> = points
            .iter()
            .map(|&(task, v)| (task as f64 + 1.0, v))
            .collect();
        chart
            .draw_series(LineSeries::new(data.clone(), color.stroke_width(2)))
            .map_err(|e| Error::Config(format!("plot: {e}")))?
            .label(name.clone())
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2))
            });
        chart
            .draw_series(data.iter().map(|&(x, y)| Circle::new((x, y), 3, color.filled())))
            .map_err(|e| Error::Config(format!("plot: {e}")))?;
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.85))
        .draw()
        .map_err(|e| Error::Config(format!("plot: {e}")))?;
    root.present()
        .map_err(|e| Error::Config(format!("plot: {e}")))?;
    Ok(())
}

/// Merge records into summary tables, curve CSVs and rendered plots.
pub fn generate_report(record_dirs: &[PathBuf], out_dir: &Path) -> Result<ReportFiles> {
    let records = load_records(record_dirs)?;
    std::fs::create_dir_all(out_dir)?;
    let t = records[0].record.stream_len;

    // merged summary per level
    let mut summary_csvs = Vec::new();
    for level in Level::ALL {
        let mut csv = String::from(
            "strategy,av_accuracy_mean,av_accuracy_std,av_sensitivity_mean,av_sensitivity_std,\
             av_specificity_mean,av_specificity_std,bwt_mean,bwt_std,fwt_mean,fwt_std\n",
        );
        for r in &records {
            if let Some(summary) = summary_of(&r.record, level) {
                csv.push_str(&summary_csv_row(r.record.config.strategy, summary));
            }
        }
        let path = out_dir.join(format!("summary_{}.csv", level.name()));
        std::fs::write(&path, csv)?;
        summary_csvs.push(path);
    }

    // per-task curves with fold spread
    let mut curves = String::from("level,metric,strategy,task,mean,std\n");
    let mut plot_series: BTreeMap<(Level, Metric), Vec<(String, Vec<(usize, f64)>)>> =
        BTreeMap::new();
    for r in &records {
        let strategy = r.record.config.strategy;
        let folds = r.record.config.folds;
        for level in Level::ALL {
            for metric in Metric::ALL {
                let matrices: Vec<PerformanceMatrix> = (0..folds)
                    .map(|fold| load_matrix(&r.dir, fold, metric, level))
                    .collect::<Result<_>>()?;
                let mut points = Vec::new();
                for task in 0..t {
                    let per_fold: Vec<TransferValue> = matrices
                        .iter()
                        .map(|m| TransferValue {
                            value: curve_value(m, strategy == StrategyKind::Baseline, task),
                            skipped: 0,
                        })
                        .collect();
                    let ms = mean_std(&per_fold);
                    curves.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        level.name(),
                        metric.name(),
                        strategy.name(),
                        task + 1,
                        fmt_opt(ms.mean),
                        fmt_opt(ms.std)
                    ));
                    if let Some(mean) = ms.mean {
                        points.push((task, mean));
                    }
                }
                plot_series
                    .entry((level, metric))
                    .or_default()
                    .push((strategy.name().to_string(), points));
            }
        }
    }
    let curves_csv = out_dir.join("curves.csv");
    std::fs::write(&curves_csv, curves)?;

    let mut plots = Vec::new();
    for ((level, metric), series) in &plot_series {
        let path = out_dir.join(format!("curves_{}_{}.svg", level.name(), metric.name()));
        plot_curves(&path, *level, *metric, t, series)?;
        plots.push(path);
    }

    let text = render_text_table(&records);
    std::fs::write(out_dir.join("summary.txt"), &text)?;

    Ok(ReportFiles {
        summary_csvs,
        curves_csv,
        plots,
        text,
    })
}
