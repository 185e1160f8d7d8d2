// temporary calibration: 3-site directional stream
use smearcl::core::TaskStream;
use smearcl::detector::TrainConfig;
use smearcl::eval::{backward_transfer, build_matrix, EvalConfig, Level, Metric};
use smearcl::harness::experiment::fold_streams;
use smearcl::strategies::{run_strategy, MemoryStore, StrategyKind, StrategySettings};
use smearcl::synthgen::{generate_stream, SiteProfile};
use std::time::Instant;

fn shifted_profiles(seed: u64) -> Vec<SiteProfile> {
    let base = SiteProfile {
        site_id: String::new(),
        n_patients: 12,
        images_per_patient: (4, 4),
        positive_image_fraction: 0.65,
        test_fraction: 0.0,
        cell_density: (10, 18),
        parasite_per_positive: (2, 5),
        stain_hue_shift: 0.0,
        background_tint: [236, 222, 228],
        blur_sigma: 0.0,
        noise_std: 3.0,
        artifact_rate: 0.02,
        seed,
    };
    vec![
        SiteProfile { site_id: "1".into(), ..base.clone() },
        SiteProfile {
            site_id: "2".into(),
            stain_hue_shift: 65.0,
            background_tint: [222, 216, 236],
            blur_sigma: 0.8,
            noise_std: 6.0,
            artifact_rate: 0.05,
            ..base.clone()
        },
        SiteProfile {
            site_id: "3".into(),
            stain_hue_shift: -70.0,
            background_tint: [240, 232, 216],
            blur_sigma: 0.4,
            noise_std: 7.0,
            artifact_rate: 0.5,
            ..base
        },
    ]
}

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let (stream, _) = generate_stream(&shifted_profiles(seed)).unwrap();
    let folds = fold_streams(&stream, 3, seed).unwrap();
    let fold = &folds[0];
    for site in &fold.tasks {
        println!(
            "site {}: train {} val {} test {} (pos test {})",
            site.site_id, site.train.len(), site.val.len(), site.test.len(),
            site.test.iter().filter(|r| r.is_positive()).count()
        );
    }
    let settings = StrategySettings {
        train: TrainConfig { epochs: 30, patience: 8, ..TrainConfig::default() },
        master_seed: seed,
        ..StrategySettings::default()
    };
    let eval_cfg = EvalConfig::default();
    for kind in [
        StrategyKind::Baseline,
        StrategyKind::Joint,
        StrategyKind::ReplayNaive,
        StrategyKind::ReplayConf,
    ] {
        let t0 = Instant::now();
        let run = run_strategy(kind, fold, &settings, &mut MemoryStore::default()).unwrap();
        let sens = build_matrix(&run, fold, Metric::Sensitivity, Level::Rbc, &eval_cfg).unwrap();
        let acc = build_matrix(&run, fold, Metric::Accuracy, Level::Rbc, &eval_cfg).unwrap();
        let final_row = sens.final_row().unwrap().1.clone();
        let avg: Vec<String> = final_row.iter().map(|v| match v {
            Some(x) => format!("{x:.3}"),
            None => "-".into(),
        }).collect();
        let avg_val: f64 = {
            let vals: Vec<f64> = final_row.iter().flatten().copied().collect();
            vals.iter().sum::<f64>() / vals.len().max(1) as f64
        };
        println!(
            "{:<13} {:>5.1}s sens final row {:?} avg {:.3} bwt(acc) {:?}",
            kind.name(),
            t0.elapsed().as_secs_f64(),
            avg,
            avg_val,
            backward_transfer(&acc).value,
        );
    }
}
