//! Deterministic synthetic multi-site thin-smear generator.
//!
//! Each site profile controls prevalence, patient structure and the visual
//! parameters that induce domain shift (stain hue, tint, blur, noise, stain
//! artifacts). Identical profiles reproduce byte-identical pixels and
//! annotations. The default five profiles mirror the per-site patient/image
//! structure and positive-image fractions of the multi-site clinical setting
//! this generator stands in for, scaled down for desk-scale runtime.

pub mod render;

use serde::{Deserialize, Serialize};

use crate::core::{ImageRecord, SiteDataset, TaskStream};
use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::rng_for;

/// Default image side length in pixels.
pub const IMAGE_SIZE: usize = 256;

/// Generation parameters of one synthetic acquisition site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteProfile {
    pub site_id: String,
    /// Total patients (train and test together).
    pub n_patients: usize,
    /// Inclusive range of images per patient.
    pub images_per_patient: (usize, usize),
    /// Fraction of images containing at least one infected cell.
    pub positive_image_fraction: f64,
    /// Fraction of patients held out as the site's test split.
    pub test_fraction: f64,
    /// Inclusive range of cells per image.
    pub cell_density: (usize, usize),
    /// Inclusive range of infected cells per positive image.
    pub parasite_per_positive: (usize, usize),
    /// Stain hue rotation in degrees on the color wheel.
    pub stain_hue_shift: f64,
    /// Background color before patient jitter.
    pub background_tint: [u8; 3],
    /// Gaussian optical blur (pixels), 0 disables.
    pub blur_sigma: f64,
    /// Gaussian sensor noise in 8-bit units, 0 disables.
    pub noise_std: f64,
    /// Probability an image carries parasite-mimicking stain blobs.
    pub artifact_rate: f64,
    pub seed: u64,
}

impl SiteProfile {
    pub fn validate(&self) -> Result<()> {
        let frac_ok = |v: f64| (0.0..=1.0).contains(&v);
        if !frac_ok(self.positive_image_fraction)
            || !frac_ok(self.test_fraction)
            || !frac_ok(self.artifact_rate)
        {
            return Err(Error::InvalidProfile(format!(
                "site {}: fractions must lie in [0, 1]",
                self.site_id
            )));
        }
        if self.n_patients == 0 {
            return Err(Error::InvalidProfile(format!(
                "site {}: need at least one patient",
                self.site_id
            )));
        }
        for (name, (lo, hi)) in [
            ("images_per_patient", self.images_per_patient),
            ("cell_density", self.cell_density),
            ("parasite_per_positive", self.parasite_per_positive),
        ] {
            if lo > hi {
                return Err(Error::InvalidProfile(format!(
                    "site {}: {name} range is empty",
                    self.site_id
                )));
            }
        }
        if self.images_per_patient.0 == 0 || self.cell_density.0 == 0 {
            return Err(Error::InvalidProfile(format!(
                "site {}: counts must be at least 1",
                self.site_id
            )));
        }
        if self.positive_image_fraction > 0.0 && self.parasite_per_positive.0 == 0 {
            return Err(Error::InvalidProfile(format!(
                "site {}: positive fraction {} with parasite_per_positive minimum 0 is inconsistent",
                self.site_id, self.positive_image_fraction
            )));
        }
        if self.blur_sigma < 0.0 || self.noise_std < 0.0 {
            return Err(Error::InvalidProfile(format!(
                "site {}: blur/noise must be non-negative",
                self.site_id
            )));
        }
        Ok(())
    }
}

/// Per-site generation counts; the row structure of the dataset description
/// table (patients / images / positive images, train and test blocks).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteReport {
    pub site_id: String,
    pub train_patients: usize,
    pub train_images: usize,
    pub train_positive: usize,
    pub test_patients: usize,
    pub test_images: usize,
    pub test_positive: usize,
}

/// Count table over all sites of a stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub sites: Vec<SiteReport>,
}

impl GenerationReport {
    /// CSV with one column per site and the six count rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row");
        for s in &self.sites {
            out.push_str(&format!(",site_{}", s.site_id));
        }
        out.push('\n');
        let rows: [(&str, fn(&SiteReport) -> usize); 6] = [
            ("train_patients", |s| s.train_patients),
            ("train_images", |s| s.train_images),
            ("train_positive_images", |s| s.train_positive),
            ("test_patients", |s| s.test_patients),
            ("test_images", |s| s.test_images),
            ("test_positive_images", |s| s.test_positive),
        ];
        for (name, get) in rows {
            out.push_str(name);
            for s in &self.sites {
                out.push_str(&format!(",{}", get(s)));
            }
            out.push('\n');
        }
        out
    }

    /// Human-readable fixed-width rendering of the same table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<24}", ""));
        for s in &self.sites {
            out.push_str(&format!("{:>10}", format!("D{}", s.site_id)));
        }
        out.push('\n');
        let rows: [(&str, fn(&SiteReport) -> usize); 6] = [
            ("train patients", |s| s.train_patients),
            ("train images", |s| s.train_images),
            ("train positive images", |s| s.train_positive),
            ("test patients", |s| s.test_patients),
            ("test images", |s| s.test_images),
            ("test positive images", |s| s.test_positive),
        ];
        for (name, get) in rows {
            out.push_str(&format!("{name:<24}"));
            for s in &self.sites {
                out.push_str(&format!("{:>10}", get(s)));
            }
            out.push('\n');
        }
        out
    }
}

/// Structural constants of the five default sites: total patients, test
/// patient fraction, images per patient, and positive-image fraction.
const DEFAULT_SITE_STRUCTURE: [(usize, f64, (usize, usize), f64); 5] = [
    (120, 28.0 / 120.0, (12, 15), 1087.0 / 1316.0),
    (193, 38.0 / 193.0, (5, 5), 488.0 / 775.0),
    (50, 10.0 / 50.0, (4, 4), 70.0 / 160.0),
    (25, 4.0 / 25.0, (4, 6), 48.0 / 95.0),
    (27, 5.0 / 27.0, (6, 8), 16.0 / 151.0),
];

/// Visual parameters of the five default sites: hue shift, tint, blur,
/// noise, artifact rate. Site 3 carries an elevated artifact rate; magnitudes
/// are calibrated so a model trained on site 1 alone degrades visibly on the
/// shifted sites.
const DEFAULT_SITE_LOOKS: [(f64, [u8; 3], f64, f64, f64); 5] = [
    (0.0, [236, 222, 228], 0.0, 3.0, 0.02),
    (40.0, [225, 215, 235], 0.8, 5.0, 0.08),
    (-50.0, [240, 230, 218], 0.4, 6.0, 0.45),
    (15.0, [246, 238, 242], 1.2, 4.0, 0.10),
    (-20.0, [228, 228, 234], 0.6, 8.0, 0.12),
];

/// The five default site profiles at the given patient-count scale factor
/// (counts divided by `scale`, default 4).
pub fn default_profiles_scaled(seed: u64, scale: f64) -> Result<Vec<SiteProfile>> {
    if scale < 1.0 {
        return Err(Error::InvalidProfile(format!(
            "scale factor must be >= 1, got {scale}"
        )));
    }
    let mut profiles = Vec::with_capacity(5);
    for (i, ((total_patients, test_frac, ipp, pos_frac), (hue, tint, blur, noise, artifacts))) in
        DEFAULT_SITE_STRUCTURE
            .iter()
            .zip(DEFAULT_SITE_LOOKS.iter())
            .enumerate()
    {
        let n_patients = ((*total_patients as f64) / scale).round().max(2.0) as usize;
        profiles.push(SiteProfile {
            site_id: format!("{}", i + 1),
            n_patients,
            images_per_patient: *ipp,
            positive_image_fraction: *pos_frac,
            test_fraction: *test_frac,
            cell_density: (10, 20),
            parasite_per_positive: (1, 4),
            stain_hue_shift: *hue,
            background_tint: *tint,
            blur_sigma: *blur,
            noise_std: *noise,
            artifact_rate: *artifacts,
            seed,
        });
    }
    // distinct sites must differ in at least one visual parameter
    for a in 0..profiles.len() {
        for b in a + 1..profiles.len() {
            let (pa, pb) = (&profiles[a], &profiles[b]);
            let same_look = pa.stain_hue_shift == pb.stain_hue_shift
                && pa.background_tint == pb.background_tint
                && pa.blur_sigma == pb.blur_sigma
                && pa.noise_std == pb.noise_std
                && pa.artifact_rate == pb.artifact_rate;
            if same_look {
                return Err(Error::InvalidProfile(format!(
                    "sites {} and {} share every visual parameter",
                    pa.site_id, pb.site_id
                )));
            }
        }
    }
    Ok(profiles)
}

/// The default five-site profile set at the default 4x count scale.
pub fn default_profiles(seed: u64) -> Vec<SiteProfile> {
    default_profiles_scaled(seed, 4.0).expect("default profiles are valid")
}

struct ImagePlan {
    patient_idx: usize,
    image_idx: usize,
    positive: bool,
    test: bool,
}

fn plan_site(profile: &SiteProfile) -> Vec<ImagePlan> {
    use rand::seq::SliceRandom;
    use rand::Rng;
    let mut rng = rng_for(profile.seed, &["plan", &profile.site_id], &[]);

    // images per patient
    let counts: Vec<usize> = (0..profile.n_patients)
        .map(|_| rng.random_range(profile.images_per_patient.0..=profile.images_per_patient.1))
        .collect();

    // patient-grouped test split
    let n_test = if profile.test_fraction > 0.0 && profile.n_patients >= 2 {
        ((profile.n_patients as f64 * profile.test_fraction).round() as usize)
            .clamp(1, profile.n_patients - 1)
    } else {
        0
    };
    let mut patient_order: Vec<usize> = (0..profile.n_patients).collect();
    patient_order.shuffle(&mut rng);
    let test_patients: std::collections::BTreeSet<usize> =
        patient_order.into_iter().take(n_test).collect();

    let mut plans: Vec<ImagePlan> = Vec::new();
    for (patient_idx, &count) in counts.iter().enumerate() {
        for image_idx in 0..count {
            plans.push(ImagePlan {
                patient_idx,
                image_idx,
                positive: false,
                test: test_patients.contains(&patient_idx),
            });
        }
    }

    // exact positive quota assigned to a seeded-random subset of images
    let total = plans.len();
    let n_pos = if profile.positive_image_fraction == 0.0 {
        0
    } else {
        ((total as f64) * profile.positive_image_fraction)
            .round()
            .max(1.0) as usize
    }
    .min(total);
    let mut slots: Vec<usize> = (0..total).collect();
    slots.shuffle(&mut rng);
    for &slot in slots.iter().take(n_pos) {
        plans[slot].positive = true;
    }

    // guarantee: with nonzero prevalence, the test split (when present)
    // holds at least one positive image, and the train split keeps one too
    // whenever the quota allows. Swaps preserve the exact positive count.
    if n_pos > 0 {
        let find = |plans: &[ImagePlan], test: bool, positive: bool| {
            plans
                .iter()
                .position(|p| p.test == test && p.positive == positive)
        };
        if find(&plans, true, true).is_none() {
            if let (Some(donor), Some(slot)) = (find(&plans, false, true), find(&plans, true, false))
            {
                plans[donor].positive = false;
                plans[slot].positive = true;
            }
        }
        if n_pos >= 2 && find(&plans, false, true).is_none() {
            if let (Some(donor), Some(slot)) = (find(&plans, true, true), find(&plans, false, false))
            {
                plans[donor].positive = false;
                plans[slot].positive = true;
            }
        }
    }
    plans
}

/// Generate one site: render every planned image, split by patient, count.
pub fn generate_site(profile: &SiteProfile) -> Result<(SiteDataset, SiteReport)> {
    profile.validate()?;
    let plans = plan_site(profile);
    let rendered = parallel::map_slice(&plans, |plan| {
        render::render_image(
            profile,
            plan.patient_idx,
            plan.image_idx,
            plan.positive,
            IMAGE_SIZE,
        )
    });

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut report = SiteReport {
        site_id: profile.site_id.clone(),
        train_patients: 0,
        train_images: 0,
        train_positive: 0,
        test_patients: 0,
        test_images: 0,
        test_positive: 0,
    };
    let mut train_patients = std::collections::BTreeSet::new();
    let mut test_patients = std::collections::BTreeSet::new();
    for (plan, (pixels, annotations)) in plans.iter().zip(rendered) {
        let patient_id = format!("{}-p{:02}", profile.site_id, plan.patient_idx);
        let image_id = format!(
            "{}-p{:02}-{:03}",
            profile.site_id, plan.patient_idx, plan.image_idx
        );
        let record = ImageRecord::new(
            image_id,
            patient_id.clone(),
            profile.site_id.clone(),
            pixels,
            annotations,
        )?;
        let positive = record.is_positive();
        if plan.test {
            test_patients.insert(patient_id);
            report.test_images += 1;
            report.test_positive += usize::from(positive);
            test.push(record);
        } else {
            train_patients.insert(patient_id);
            report.train_images += 1;
            report.train_positive += usize::from(positive);
            train.push(record);
        }
    }
    report.train_patients = train_patients.len();
    report.test_patients = test_patients.len();

    let dataset = SiteDataset {
        site_id: profile.site_id.clone(),
        train,
        val: Vec::new(),
        test,
    };
    dataset.validate_patient_disjoint()?;
    Ok((dataset, report))
}

/// Generate a full stream from an ordered profile list.
pub fn generate_stream(profiles: &[SiteProfile]) -> Result<(TaskStream, GenerationReport)> {
    let mut tasks = Vec::with_capacity(profiles.len());
    let mut sites = Vec::with_capacity(profiles.len());
    for profile in profiles {
        let (dataset, report) = generate_site(profile)?;
        tasks.push(dataset);
        sites.push(report);
    }
    Ok((TaskStream::new(tasks)?, GenerationReport { sites }))
}

/// Count table for an existing stream, in the same row structure as the
/// generator's report.
pub fn describe(stream: &TaskStream) -> GenerationReport {
    let sites = stream
        .tasks
        .iter()
        .map(|site| {
            let count = |images: &[ImageRecord]| {
                let patients: std::collections::BTreeSet<&str> =
                    images.iter().map(|r| r.patient_id.as_str()).collect();
                let positive = images.iter().filter(|r| r.is_positive()).count();
                (patients.len(), images.len(), positive)
            };
            let (train_patients, train_images, train_positive) = count(&site.train);
            let (test_patients, test_images, test_positive) = count(&site.test);
            SiteReport {
                site_id: site.site_id.clone(),
                train_patients,
                train_images,
                train_positive,
                test_patients,
                test_images,
                test_positive,
            }
        })
        .collect();
    GenerationReport { sites }
}
