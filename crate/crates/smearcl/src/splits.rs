//! Patient-grouped k-fold cross validation.
//!
//! All images of a patient stay together: fold i's test set is exactly the
//! images of fold-i patients, and the remaining patients are split 90/10 by
//! patient into train and validation. Patients with at least one positive
//! image are dealt round-robin before the all-negative ones (continuing at
//! the same fold cursor) so every fold's test set contains positives
//! whenever possible while fold sizes still differ by at most one patient.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::core::{ImageRecord, SiteDataset};
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Which fold each patient tests in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of_patient: BTreeMap<String, usize>,
}

impl FoldAssignment {
    /// Text table (patient_id, fold), one line per patient, for provenance.
    pub fn to_table(&self) -> String {
        let mut out = String::from("patient_id,fold\n");
        for (patient, fold) in &self.fold_of_patient {
            out.push_str(&format!("{patient},{fold}\n"));
        }
        out
    }
}

/// One fold's view of a site.
#[derive(Debug, Clone)]
pub struct FoldPartition {
    pub fold: usize,
    pub dataset: SiteDataset,
}

/// Deal patients into k folds, positives-first round-robin after a seeded
/// shuffle.
pub fn assign_folds(dataset: &SiteDataset, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    let mut patients: BTreeMap<String, bool> = BTreeMap::new();
    for rec in dataset.all_images() {
        let positive = patients.entry(rec.patient_id.clone()).or_insert(false);
        *positive = *positive || rec.is_positive();
    }
    if patients.len() < k {
        return Err(Error::InsufficientPatients {
            have: patients.len(),
            need: k,
        });
    }
    let mut positive_patients: Vec<String> = patients
        .iter()
        .filter(|(_, &p)| p)
        .map(|(id, _)| id.clone())
        .collect();
    let mut negative_patients: Vec<String> = patients
        .iter()
        .filter(|(_, &p)| !p)
        .map(|(id, _)| id.clone())
        .collect();
    let mut rng = rng_for(seed, &["kfold", &dataset.site_id], &[]);
    positive_patients.shuffle(&mut rng);
    negative_patients.shuffle(&mut rng);

    let mut fold_of_patient = BTreeMap::new();
    let mut cursor = 0usize;
    for patient in positive_patients.into_iter().chain(negative_patients) {
        fold_of_patient.insert(patient, cursor % k);
        cursor += 1;
    }
    Ok(FoldAssignment { k, fold_of_patient })
}

/// Build the k (train+val, test) partitions of a site.
///
/// The input's own train/val/test split is ignored: all images are pooled
/// and re-partitioned by patient. Within each fold the non-test patients are
/// split 90/10 by patient into train and validation (validation kept
/// non-empty whenever at least two patients remain).
pub fn patient_grouped_kfold(
    dataset: &SiteDataset,
    k: usize,
    seed: u64,
) -> Result<Vec<FoldPartition>> {
    let assignment = assign_folds(dataset, k, seed)?;
    let pooled: Vec<&ImageRecord> = dataset.all_images().collect();
    let mut partitions = Vec::with_capacity(k);
    for fold in 0..k {
        let mut test: Vec<ImageRecord> = Vec::new();
        let mut rest_patients: Vec<String> = Vec::new();
        for (patient, &pf) in &assignment.fold_of_patient {
            if pf == fold {
                continue;
            }
            rest_patients.push(patient.clone());
        }
        for rec in &pooled {
            if assignment.fold_of_patient[&rec.patient_id] == fold {
                test.push((*rec).clone());
            }
        }
        // 90/10 by patient; seeded shuffle so validation patients vary by seed
        let mut rest = rest_patients;
        let mut rng = rng_for(seed, &["valsplit", &dataset.site_id], &[fold as u64]);
        rest.shuffle(&mut rng);
        let n_val = if rest.len() >= 2 {
            ((rest.len() as f64) * 0.1).round().max(1.0) as usize
        } else {
            0
        };
        let val_patients: std::collections::BTreeSet<String> =
            rest.iter().take(n_val).cloned().collect();
        let mut train: Vec<ImageRecord> = Vec::new();
        let mut val: Vec<ImageRecord> = Vec::new();
        for rec in &pooled {
            let pf = assignment.fold_of_patient[&rec.patient_id];
            if pf == fold {
                continue;
            }
            if val_patients.contains(&rec.patient_id) {
                val.push((*rec).clone());
            } else {
                train.push((*rec).clone());
            }
        }
        let part = SiteDataset {
            site_id: dataset.site_id.clone(),
            train,
            val,
            test,
        };
        part.validate_patient_disjoint()?;
        partitions.push(FoldPartition {
            fold,
            dataset: part,
        });
    }
    Ok(partitions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{Annotation, BoundingBox, CellClass, Pixels};
    use std::collections::BTreeSet;

    fn record(patient: &str, idx: usize, positive: bool) -> ImageRecord {
        let annotations = if positive {
            vec![Annotation {
                bbox: BoundingBox::new(0.5, 0.5, 0.1, 0.1).unwrap(),
                cls: CellClass::Infected,
            }]
        } else {
            vec![]
        };
        ImageRecord::new(
            format!("{patient}-{idx}"),
            patient.into(),
            "site".into(),
            Pixels::filled(4, 4, [1, 2, 3]),
            annotations,
        )
        .unwrap()
    }

    fn dataset(n_patients: usize, images_each: usize, positive_every: usize) -> SiteDataset {
        let mut train = Vec::new();
        for p in 0..n_patients {
            for i in 0..images_each {
                train.push(record(
                    &format!("p{p:03}"),
                    i,
                    positive_every > 0 && p % positive_every == 0,
                ));
            }
        }
        SiteDataset {
            site_id: "site".into(),
            train,
            val: vec![],
            test: vec![],
        }
    }

    #[test]
    fn three_patients_three_folds_forced_partition() {
        let ds = dataset(3, 2, 1);
        let parts = patient_grouped_kfold(&ds, 3, 7).unwrap();
        for p in &parts {
            let test_patients: BTreeSet<_> =
                p.dataset.test.iter().map(|r| r.patient_id.clone()).collect();
            assert_eq!(test_patients.len(), 1);
        }
    }

    #[test]
    fn ninety_two_patients_deal_31_31_30() {
        let ds = dataset(92, 1, 3);
        let assignment = assign_folds(&ds, 3, 11).unwrap();
        let mut counts = [0usize; 3];
        for (_, &f) in &assignment.fold_of_patient {
            counts[f] += 1;
        }
        let mut sorted = counts;
        sorted.sort_unstable();
        assert_eq!(sorted, [30, 31, 31]);
    }

    #[test]
    fn same_seed_reproduces_assignment() {
        let ds = dataset(17, 2, 4);
        let a = assign_folds(&ds, 3, 5).unwrap();
        let b = assign_folds(&ds, 3, 5).unwrap();
        assert_eq!(a, b);
        let c = assign_folds(&ds, 3, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn insufficient_patients_rejected() {
        let ds = dataset(2, 3, 1);
        assert!(matches!(
            patient_grouped_kfold(&ds, 3, 1),
            Err(Error::InsufficientPatients { have: 2, need: 3 })
        ));
    }

    #[test]
    fn folds_cover_all_patients_disjointly() {
        let ds = dataset(23, 3, 5);
        let parts = patient_grouped_kfold(&ds, 3, 42).unwrap();
        let mut seen: BTreeSet<String> = BTreeSet::new();
        for p in &parts {
            p.dataset.validate_patient_disjoint().unwrap();
            for r in &p.dataset.test {
                // test patients must be unique across folds
                assert!(seen.insert(r.patient_id.clone()) || seen.contains(&r.patient_id));
            }
        }
        let all: BTreeSet<String> = ds.train.iter().map(|r| r.patient_id.clone()).collect();
        let mut test_union: BTreeSet<String> = BTreeSet::new();
        for p in &parts {
            for r in &p.dataset.test {
                test_union.insert(r.patient_id.clone());
            }
        }
        assert_eq!(all, test_union);
    }

    #[test]
    fn positives_spread_across_folds_when_possible() {
        // 3 positive patients, 9 negative: every fold should test a positive
        let ds = dataset(9, 2, 3);
        let parts = patient_grouped_kfold(&ds, 3, 13).unwrap();
        for p in &parts {
            assert!(
                p.dataset.test.iter().any(|r| r.is_positive()),
                "fold {} has no positive test image",
                p.fold
            );
        }
    }

    #[test]
    fn changed_seed_permutes_but_balances() {
        let ds = dataset(10, 1, 2);
        for seed in 0..20 {
            let assignment = assign_folds(&ds, 3, seed).unwrap();
            let mut counts = [0usize; 3];
            for (_, &f) in &assignment.fold_of_patient {
                counts[f] += 1;
            }
            assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn table_rendering_is_stable() {
        let ds = dataset(4, 1, 2);
        let a = assign_folds(&ds, 2, 3).unwrap();
        assert!(a.to_table().starts_with("patient_id,fold\n"));
        assert_eq!(a.to_table().lines().count(), 5);
    }
}
