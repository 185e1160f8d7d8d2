//! On-disk dataset layout.
//!
//! ```text
//! <root>/
//!   stream.csv                  task order: task,site_id
//!   report.csv                  generation counts
//!   site_<id>/
//!     images/<image_id>.png
//!     labels/<image_id>.txt     lines: class cx cy w h  (6 decimals, normalized)
//!     patients.csv              image_id,patient_id
//!     split.csv                 image_id,split  (train|val|test)
//! ```
//!
//! Class ids: 0 = all RBC, 1 = infected RBC. The label convention matches
//! the single-stage-detector ecosystem, so converted public datasets drop in.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::core::{Annotation, BoundingBox, CellClass, ImageRecord, Pixels, SiteDataset, TaskStream};
use crate::error::{Error, Result};
use crate::synthgen::GenerationReport;

fn parse_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// One label line per annotation: `class cx cy w h`, floats with 6 decimals.
pub fn format_labels(annotations: &[Annotation]) -> String {
    let mut out = String::new();
    for a in annotations {
        out.push_str(&format!(
            "{} {:.6} {:.6} {:.6} {:.6}\n",
            a.cls.label_id(),
            a.bbox.cx,
            a.bbox.cy,
            a.bbox.w,
            a.bbox.h
        ));
    }
    out
}

pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(parse_err(
                path,
                format!("line {}: expected 5 fields, got {}", ln + 1, fields.len()),
            ));
        }
        let cls = CellClass::from_label_id(
            fields[0]
                .parse::<u8>()
                .map_err(|e| parse_err(path, format!("line {}: bad class: {e}", ln + 1)))?,
        )?;
        let nums: Vec<f64> = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| parse_err(path, format!("line {}: bad number: {e}", ln + 1)))
            })
            .collect::<Result<_>>()?;
        out.push(Annotation {
            bbox: BoundingBox::new(nums[0], nums[1], nums[2], nums[3])?,
            cls,
        });
    }
    Ok(out)
}

fn write_png(path: &Path, pixels: &Pixels) -> Result<()> {
    let img = image::RgbImage::from_raw(pixels.width, pixels.height, pixels.data.clone())
        .expect("pixel buffer matches dimensions");
    img.save(path)?;
    Ok(())
}

fn read_png(path: &Path) -> Result<Pixels> {
    let img = image::open(path)?.to_rgb8();
    Pixels::new(img.width(), img.height(), img.into_raw())
}

fn site_dir(root: &Path, site_id: &str) -> PathBuf {
    root.join(format!("site_{site_id}"))
}

/// Write a whole stream to disk. Refuses a non-empty target unless `force`.
pub fn write_stream(
    root: &Path,
    stream: &TaskStream,
    report: &GenerationReport,
    force: bool,
) -> Result<()> {
    if root.exists() {
        let non_empty = std::fs::read_dir(root)?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (use --force to overwrite)",
                root.display()
            )));
        }
        if non_empty {
            std::fs::remove_dir_all(root)?;
        }
    }
    std::fs::create_dir_all(root)?;

    let mut stream_csv = String::from("task,site_id\n");
    for (i, site) in stream.tasks.iter().enumerate() {
        stream_csv.push_str(&format!("{},{}\n", i + 1, site.site_id));
    }
    std::fs::write(root.join("stream.csv"), stream_csv)?;
    std::fs::write(root.join("report.csv"), report.to_csv())?;

    for site in &stream.tasks {
        let dir = site_dir(root, &site.site_id);
        std::fs::create_dir_all(dir.join("images"))?;
        std::fs::create_dir_all(dir.join("labels"))?;
        let mut patients_csv = String::from("image_id,patient_id\n");
        let mut split_csv = String::from("image_id,split\n");
        for (split_name, records) in [("train", &site.train), ("val", &site.val), ("test", &site.test)]
        {
            for rec in records.iter() {
                write_png(&dir.join("images").join(format!("{}.png", rec.image_id)), &rec.pixels)?;
                std::fs::write(
                    dir.join("labels").join(format!("{}.txt", rec.image_id)),
                    format_labels(&rec.annotations),
                )?;
                patients_csv.push_str(&format!("{},{}\n", rec.image_id, rec.patient_id));
                split_csv.push_str(&format!("{},{}\n", rec.image_id, split_name));
            }
        }
        std::fs::write(dir.join("patients.csv"), patients_csv)?;
        std::fs::write(dir.join("split.csv"), split_csv)?;
    }
    Ok(())
}

fn read_two_column_csv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let (a, b) = line
            .split_once(',')
            .ok_or_else(|| parse_err(path, format!("line {}: expected two fields", i + 1)))?;
        out.push((a.to_string(), b.to_string()));
    }
    Ok(out)
}

/// Load a stream previously written with [`write_stream`].
pub fn load_stream(root: &Path) -> Result<TaskStream> {
    let order = read_two_column_csv(&root.join("stream.csv"))?;
    let mut tasks = Vec::with_capacity(order.len());
    for (_, site_id) in order {
        let dir = site_dir(root, &site_id);
        let patients: BTreeMap<String, String> = read_two_column_csv(&dir.join("patients.csv"))?
            .into_iter()
            .collect();
        let mut site = SiteDataset {
            site_id: site_id.clone(),
            ..Default::default()
        };
        for (image_id, split) in read_two_column_csv(&dir.join("split.csv"))? {
            let pixels = read_png(&dir.join("images").join(format!("{image_id}.png")))?;
            let label_path = dir.join("labels").join(format!("{image_id}.txt"));
            let annotations = parse_labels(&std::fs::read_to_string(&label_path)?, &label_path)?;
            let patient_id = patients
                .get(&image_id)
                .ok_or_else(|| {
                    parse_err(
                        &dir.join("patients.csv"),
                        format!("no patient for image {image_id}"),
                    )
                })?
                .clone();
            let record = ImageRecord::new(image_id, patient_id, site_id.clone(), pixels, annotations)?;
            match split.as_str() {
                "train" => site.train.push(record),
                "val" => site.val.push(record),
                "test" => site.test.push(record),
                other => {
                    return Err(parse_err(
                        &dir.join("split.csv"),
                        format!("unknown split '{other}'"),
                    ))
                }
            }
        }
        site.validate_patient_disjoint()?;
        tasks.push(site);
    }
    TaskStream::new(tasks)
}

/// Stable fingerprint of a directory tree: file names plus contents, walked
/// in sorted order.
pub fn dir_checksum(root: &Path) -> Result<u64> {
    fn walk(dir: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for entry in entries {
            if entry.is_dir() {
                walk(&entry, files)?;
            } else {
                files.push(entry);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, &mut files)?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for file in files {
        let rel = file.strip_prefix(root).unwrap_or(&file);
        feed(rel.to_string_lossy().as_bytes());
        feed(&std::fs::read(&file)?);
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{describe, generate_stream, SiteProfile};

    fn tiny_profiles() -> Vec<SiteProfile> {
        (1..=2)
            .map(|i| SiteProfile {
                site_id: format!("{i}"),
                n_patients: 3,
                images_per_patient: (2, 2),
                positive_image_fraction: 0.5,
                test_fraction: 0.34,
                cell_density: (3, 5),
                parasite_per_positive: (1, 1),
                stain_hue_shift: i as f64 * 10.0,
                background_tint: [236, 222, 228],
                blur_sigma: 0.0,
                noise_std: 1.0,
                artifact_rate: 0.0,
                seed: 5,
            })
            .collect()
    }

    #[test]
    fn label_format_is_exact() {
        let anns = vec![Annotation {
            bbox: BoundingBox::new(0.5, 0.5, 0.125, 0.125).unwrap(),
            cls: CellClass::Rbc,
        }];
        assert_eq!(format_labels(&anns), "0 0.500000 0.500000 0.125000 0.125000\n");
    }

    #[test]
    fn stream_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let (stream, report) = generate_stream(&tiny_profiles()).unwrap();
        write_stream(dir.path(), &stream, &report, false).unwrap();
        let loaded = load_stream(dir.path()).unwrap();
        assert_eq!(loaded.len(), stream.len());
        for (a, b) in stream.tasks.iter().zip(&loaded.tasks) {
            assert_eq!(a.site_id, b.site_id);
            assert_eq!(a.train.len(), b.train.len());
            assert_eq!(a.test.len(), b.test.len());
            for (x, y) in a.all_images().zip(b.all_images()) {
                assert_eq!(x.image_id, y.image_id);
                assert_eq!(x.patient_id, y.patient_id);
                assert_eq!(x.pixels, y.pixels);
                assert_eq!(x.annotations.len(), y.annotations.len());
                for (ax, ay) in x.annotations.iter().zip(&y.annotations) {
                    assert_eq!(ax.cls, ay.cls);
                    // labels carry 6 decimals
                    assert!((ax.bbox.cx - ay.bbox.cx).abs() <= 5e-7);
                    assert!((ax.bbox.w - ay.bbox.w).abs() <= 5e-7);
                }
            }
        }
        // the description of the loaded stream matches the generation report
        assert_eq!(describe(&loaded), report);
    }

    #[test]
    fn writing_twice_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let (stream, report) = generate_stream(&tiny_profiles()).unwrap();
        write_stream(a.path(), &stream, &report, false).unwrap();
        write_stream(b.path(), &stream, &report, false).unwrap();
        assert_eq!(dir_checksum(a.path()).unwrap(), dir_checksum(b.path()).unwrap());
    }

    #[test]
    fn non_empty_target_needs_force() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("existing.txt"), "x").unwrap();
        let (stream, report) = generate_stream(&tiny_profiles()).unwrap();
        assert!(write_stream(dir.path(), &stream, &report, false).is_err());
        write_stream(dir.path(), &stream, &report, true).unwrap();
        assert!(!dir.path().join("existing.txt").exists());
        load_stream(dir.path()).unwrap();
    }
}
