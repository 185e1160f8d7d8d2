// temporary diagnostics: detection quality on one test image
use smearcl::core::{iou, CellClass, TaskStream};
use smearcl::detector::{detect, TrainConfig};
use smearcl::splits::patient_grouped_kfold;
use smearcl::strategies::{run_strategy, MemoryStore, StrategyKind, StrategySettings};
use smearcl::synthgen::{generate_site, SiteProfile};

fn main() {
    let profile = SiteProfile {
        site_id: "easy".into(),
        n_patients: 12,
        images_per_patient: (5, 5),
        positive_image_fraction: 0.7,
        test_fraction: 0.0,
        cell_density: (10, 18),
        parasite_per_positive: (2, 4),
        stain_hue_shift: 0.0,
        background_tint: [236, 222, 228],
        blur_sigma: 0.0,
        noise_std: 3.0,
        artifact_rate: 0.0,
        seed: 11,
    };
    let (site, _) = generate_site(&profile).unwrap();
    let parts = patient_grouped_kfold(&site, 3, 5).unwrap();
    let fold = &parts[0].dataset;
    let stream = TaskStream::new(vec![fold.clone()]).unwrap();
    let settings = StrategySettings {
        train: TrainConfig { epochs: 50, patience: 10, ..TrainConfig::default() },
        master_seed: 3,
        ..StrategySettings::default()
    };
    let run = run_strategy(StrategyKind::Baseline, &stream, &settings, &mut MemoryStore::default()).unwrap();
    let pipeline = run.pipeline_for_step(0);

    for rec in fold.test.iter().take(3) {
        let truth_rbc: Vec<_> = rec.annotations.iter().filter(|a| a.cls == CellClass::Rbc).collect();
        let truth_inf: Vec<_> = rec.annotations.iter().filter(|a| a.cls == CellClass::Infected).collect();
        let rbc_dets = detect(&pipeline.rbc, &rec.pixels, 0.25);
        let inf_dets = detect(&pipeline.infected, &rec.pixels, 0.25);
        println!("image {} truth_rbc={} truth_inf={} det_rbc={} det_inf={}",
            rec.image_id, truth_rbc.len(), truth_inf.len(), rbc_dets.len(), inf_dets.len());
        for (i, d) in rbc_dets.iter().take(6).enumerate() {
            let best = truth_rbc.iter().map(|t| iou(&d.bbox, &t.bbox)).fold(0.0f64, f64::max);
            println!("  rbc det {i}: conf {:.2} box ({:.3},{:.3},{:.3},{:.3}) best-iou {:.3}",
                d.confidence, d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h, best);
        }
        for (i, d) in inf_dets.iter().take(4).enumerate() {
            let best = truth_inf.iter().map(|t| iou(&d.bbox, &t.bbox)).fold(0.0f64, f64::max);
            println!("  inf det {i}: conf {:.2} box ({:.3},{:.3},{:.3},{:.3}) best-iou {:.3}",
                d.confidence, d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h, best);
        }
    }
}
