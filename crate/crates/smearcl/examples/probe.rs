// temporary calibration probe: single-site learnability
use smearcl::eval::{evaluate_pipeline, EvalConfig};
use smearcl::splits::patient_grouped_kfold;
use smearcl::strategies::{run_strategy, MemoryStore, StrategyKind, StrategySettings};
use smearcl::synthgen::{generate_site, SiteProfile};
use smearcl::core::TaskStream;
use smearcl::detector::TrainConfig;
use std::time::Instant;

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
    let t0 = Instant::now();
    let (site, report) = generate_site(&profile).unwrap();
    println!("generated {} images in {:.1}s: {report:?}", site.train.len(), t0.elapsed().as_secs_f64());

    let parts = patient_grouped_kfold(&site, 3, 5).unwrap();
    let fold = &parts[0].dataset;
    println!("fold 0: train {} val {} test {}", fold.train.len(), fold.val.len(), fold.test.len());
    println!("test positives: {}", fold.test.iter().filter(|r| r.is_positive()).count());

    let stream = TaskStream::new(vec![fold.clone()]).unwrap();
    let settings = StrategySettings {
        train: TrainConfig::default(),
        master_seed: 3,
        ..StrategySettings::default()
    };
    let t0 = Instant::now();
    let run = run_strategy(StrategyKind::Baseline, &stream, &settings, &mut MemoryStore::default()).unwrap();
    println!("trained in {:.1}s; logs: {:?}", t0.elapsed().as_secs_f64(), run.logs[0]);

    let (rbc_conf, img_conf) = evaluate_pipeline(run.pipeline_for_step(0), &fold.test, &EvalConfig::default());
    println!("RBC confusion: {rbc_conf:?}");
    println!("  rbc acc {:?} sens {:?} spec {:?}", rbc_conf.accuracy(), rbc_conf.sensitivity(), rbc_conf.specificity());
    println!("IMG confusion: {img_conf:?}");
    println!("  img acc {:?} sens {:?} spec {:?}", img_conf.accuracy(), img_conf.sensitivity(), img_conf.specificity());
}
