// temporary diagnostics: infected-detector quality on train vs test
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
    for (label, patience, epochs, lr, batch) in [
        ("b8 p16", 16usize, 50usize, 5e-3, 8usize),
        ("b4 p12", 12, 50, 5e-3, 4),
        ("b4 p16", 16, 50, 5e-3, 4),
    ] {
        let settings = StrategySettings {
            train: TrainConfig { epochs, patience, learning_rate: lr, batch_size: batch, ..TrainConfig::default() },
            master_seed: 3,
            ..StrategySettings::default()
        };
        let run = run_strategy(StrategyKind::Baseline, &stream, &settings, &mut MemoryStore::default()).unwrap();
        let model = &run.pipeline_for_step(0).infected;
        println!("== {label}: infected log {:?}", run.logs[0].infected);
        for (name, set) in [("train", &fold.train), ("test", &fold.test)] {
            let mut hits = 0usize; let mut total_truth = 0usize; let mut dets_total = 0usize;
            for rec in set.iter() {
                let truth: Vec<_> = rec.annotations.iter().filter(|a| a.cls == CellClass::Infected).collect();
                let dets = detect(model, &rec.pixels, 0.25);
                dets_total += dets.len();
                total_truth += truth.len();
                for t in &truth {
                    if dets.iter().any(|d| iou(&d.bbox, &t.bbox) >= 0.5) { hits += 1; }
                }
            }
            println!("  {name}: truth {total_truth} hit@0.5 {hits} detections {dets_total}");
        }
    }
}
