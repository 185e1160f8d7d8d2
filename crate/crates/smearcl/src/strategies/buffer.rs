//! Rehearsal memory buffer with positivity-stratified per-site quotas.
//!
//! Each completed site contributes at most `min(cap, floor(site_ratio_cap *
//! |train|))` images; `round(positive_fraction * quota)` of those are
//! positive images when enough exist, with the positive shortfall filled by
//! negatives. Images are stored by id, not by pixels: the buffer is a
//! selection over datasets that stay on disk or in the stream.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::core::{ImageRecord, TaskStream};
use crate::detector::{image_confidence_score, DetectorModel};
use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferConfig {
    /// Hard per-site image cap.
    pub cap: usize,
    /// Target share of positive images per site quota.
    pub positive_fraction: f64,
    /// A site contributes at most this fraction of its own train split.
    pub site_ratio_cap: f64,
}

impl Default for BufferConfig {
    fn default() -> Self {
        Self {
            cap: 125,
            positive_fraction: 0.8,
            site_ratio_cap: 0.5,
        }
    }
}

/// Per-site quota arithmetic: total quota, positive count, negative count.
pub fn site_quota(
    config: &BufferConfig,
    train_size: usize,
    available_positive: usize,
) -> (usize, usize, usize) {
    let quota = config
        .cap
        .min((config.site_ratio_cap * train_size as f64).floor() as usize);
    let positive = ((config.positive_fraction * quota as f64).round() as usize)
        .min(available_positive)
        .min(quota);
    let available_negative = train_size - available_positive;
    let negative = (quota - positive).min(available_negative);
    (quota, positive, negative)
}

/// One stored image reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub image_id: String,
    pub positive: bool,
    /// Confidence score that drove selection, when the policy used one.
    pub score: Option<f64>,
}

/// The images one completed site contributed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSelection {
    pub site_id: String,
    pub entries: Vec<BufferEntry>,
}

impl SiteSelection {
    /// Text manifest: site_id, image_id, positive flag, score.
    pub fn manifest(&self) -> String {
        let mut out = String::from("site_id,image_id,positive,score\n");
        for e in &self.entries {
            let score = match e.score {
                Some(s) => format!("{s:.6}"),
                None => "none".to_string(),
            };
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.site_id, e.image_id, e.positive, score
            ));
        }
        out
    }

    pub fn parse_manifest(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut site_id = String::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::Parse {
                    path: "buffer manifest".into(),
                    message: format!("line {i}: expected 4 fields, got {}", fields.len()),
                });
            }
            site_id = fields[0].to_string();
            let score = match fields[3] {
                "none" => None,
                s => Some(s.parse::<f64>().map_err(|e| Error::Parse {
                    path: "buffer manifest".into(),
                    message: format!("line {i}: bad score: {e}"),
                })?),
            };
            entries.push(BufferEntry {
                image_id: fields[1].to_string(),
                positive: fields[2] == "true",
                score,
            });
        }
        Ok(Self { site_id, entries })
    }
}

/// Cumulative rehearsal store over all completed sites.
#[derive(Debug, Clone, Default)]
pub struct MemoryBuffer {
    pub config: BufferConfig,
    pub sites: Vec<SiteSelection>,
}

impl MemoryBuffer {
    pub fn new(config: BufferConfig) -> Self {
        Self {
            config,
            sites: Vec::new(),
        }
    }

    pub fn add_site(&mut self, selection: SiteSelection) {
        self.sites.push(selection);
    }

    pub fn total_images(&self) -> usize {
        self.sites.iter().map(|s| s.entries.len()).sum()
    }

    /// Resolve stored ids against the stream's train splits, in buffer order.
    pub fn resolve<'a>(&self, stream: &'a TaskStream) -> Result<Vec<&'a ImageRecord>> {
        let mut out = Vec::with_capacity(self.total_images());
        for selection in &self.sites {
            let site = stream
                .tasks
                .iter()
                .find(|t| t.site_id == selection.site_id)
                .ok_or_else(|| {
                    Error::Config(format!("buffer references unknown site {}", selection.site_id))
                })?;
            let by_id: BTreeMap<&str, &ImageRecord> = site
                .train
                .iter()
                .map(|r| (r.image_id.as_str(), r))
                .collect();
            for entry in &selection.entries {
                let rec = by_id.get(entry.image_id.as_str()).ok_or_else(|| {
                    Error::Config(format!(
                        "buffer references unknown image {} in site {}",
                        entry.image_id, selection.site_id
                    ))
                })?;
                out.push(*rec);
            }
        }
        Ok(out)
    }
}

fn split_by_positivity(train: &[ImageRecord]) -> (Vec<&ImageRecord>, Vec<&ImageRecord>) {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for rec in train {
        if rec.is_positive() {
            positives.push(rec);
        } else {
            negatives.push(rec);
        }
    }
    (positives, negatives)
}

/// Uniformly-random selection under the quota rules; deterministic per seed.
pub fn select_naive(
    config: &BufferConfig,
    site_id: &str,
    train: &[ImageRecord],
    seed: u64,
) -> Result<SiteSelection> {
    if train.is_empty() {
        return Err(Error::Config(format!(
            "site {site_id} has no train images to buffer"
        )));
    }
    let (positives, negatives) = split_by_positivity(train);
    let (_, n_pos, n_neg) = site_quota(config, train.len(), positives.len());
    let mut rng = rng_for(seed, &["buffer-naive", site_id], &[]);
    let mut pos_ids: Vec<&ImageRecord> = positives;
    let mut neg_ids: Vec<&ImageRecord> = negatives;
    pos_ids.shuffle(&mut rng);
    neg_ids.shuffle(&mut rng);
    let entries = pos_ids
        .iter()
        .take(n_pos)
        .map(|r| (r, true))
        .chain(neg_ids.iter().take(n_neg).map(|r| (r, false)))
        .map(|(r, positive)| BufferEntry {
            image_id: r.image_id.clone(),
            positive,
            score: None,
        })
        .collect();
    Ok(SiteSelection {
        site_id: site_id.to_string(),
        entries,
    })
}

/// The ranking rule of confidence replay, exposed over precomputed scores:
/// within each positivity class images are ranked ascending by score with
/// unscored images last, ties broken by lexicographic image id, and the
/// lowest-scoring images fill the class quota.
pub fn select_by_scores(
    config: &BufferConfig,
    site_id: &str,
    scored: &[(String, bool, Option<f64>)],
) -> Result<SiteSelection> {
    if scored.is_empty() {
        return Err(Error::Config(format!(
            "site {site_id} has no train images to buffer"
        )));
    }
    let available_pos = scored.iter().filter(|(_, p, _)| *p).count();
    let (_, n_pos, n_neg) = site_quota(config, scored.len(), available_pos);
    let rank = |want_positive: bool, take: usize| -> Vec<BufferEntry> {
        let mut class: Vec<&(String, bool, Option<f64>)> = scored
            .iter()
            .filter(|(_, p, _)| *p == want_positive)
            .collect();
        class.sort_by(|a, b| match (a.2, b.2) {
            (Some(x), Some(y)) => x
                .partial_cmp(&y)
                .unwrap()
                .then_with(|| a.0.cmp(&b.0)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => a.0.cmp(&b.0),
        });
        class
            .into_iter()
            .take(take)
            .map(|(id, positive, score)| BufferEntry {
                image_id: id.clone(),
                positive: *positive,
                score: *score,
            })
            .collect()
    };
    let mut entries = rank(true, n_pos);
    entries.extend(rank(false, n_neg));
    Ok(SiteSelection {
        site_id: site_id.to_string(),
        entries,
    })
}

/// Confidence replay selection: score every train image with the given
/// model (lowest minimum detection confidence first), then select.
pub fn select_confidence(
    config: &BufferConfig,
    site_id: &str,
    train: &[ImageRecord],
    scoring_model: &DetectorModel,
    threshold: f64,
) -> Result<SiteSelection> {
    let scored: Vec<(String, bool, Option<f64>)> = parallel::map_slice(train, |rec| {
        (
            rec.image_id.clone(),
            rec.is_positive(),
            image_confidence_score(scoring_model, &rec.pixels, threshold),
        )
    });
    select_by_scores(config, site_id, &scored)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quota_worked_examples() {
        let cfg = BufferConfig::default();
        // large site: 1316 train, 1087 positive -> 125 = 100 + 25
        assert_eq!(site_quota(&cfg, 1316, 1087), (125, 100, 25));
        // mid-size site: 160 train, 70 positive -> 80 = 64 + 16
        assert_eq!(site_quota(&cfg, 160, 70), (80, 64, 16));
        // positive shortfall: 10 train, 2 positive -> 5 = 2 + 3
        assert_eq!(site_quota(&cfg, 10, 2), (5, 2, 3));
    }

    #[test]
    fn quota_integer_rule_cross_check() {
        // round(0.8 q) computed in floating point must match the exact
        // integer rule floor((4q + 2) / 5) for every feasible quota
        let cfg = BufferConfig::default();
        for size in 0..=2000usize {
            let (q, pos, _) = site_quota(&cfg, size, size);
            assert_eq!(q, 125.min(size / 2));
            assert_eq!(pos, (4 * q + 2) / 5, "quota {q}");
        }
    }

    fn record(id: &str, positive: bool) -> ImageRecord {
        use crate::core::{Annotation, BoundingBox, CellClass, Pixels};
        let annotations = if positive {
            vec![Annotation {
                bbox: BoundingBox::new(0.5, 0.5, 0.1, 0.1).unwrap(),
                cls: CellClass::Infected,
            }]
        } else {
            vec![]
        };
        ImageRecord::new(
            id.into(),
            "p".into(),
            "s".into(),
            Pixels::filled(4, 4, [0, 0, 0]),
            annotations,
        )
        .unwrap()
    }

    #[test]
    fn naive_selection_is_deterministic_and_quota_bound() {
        let cfg = BufferConfig::default();
        let train: Vec<ImageRecord> = (0..40)
            .map(|i| record(&format!("img{i:02}"), i < 25))
            .collect();
        let a = select_naive(&cfg, "s", &train, 3).unwrap();
        let b = select_naive(&cfg, "s", &train, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.entries.len(), 20); // min(125, 40/2)
        assert_eq!(a.entries.iter().filter(|e| e.positive).count(), 16);
        let c = select_naive(&cfg, "s", &train, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_site_is_an_error() {
        let cfg = BufferConfig::default();
        assert!(select_naive(&cfg, "s", &[], 1).is_err());
        assert!(select_by_scores(&cfg, "s", &[]).is_err());
    }

    #[test]
    fn score_ranking_takes_lowest() {
        let cfg = BufferConfig {
            cap: 2,
            positive_fraction: 1.0,
            site_ratio_cap: 1.0,
        };
        let scored = vec![
            ("a".to_string(), true, Some(0.2)),
            ("b".to_string(), true, Some(0.9)),
            ("c".to_string(), true, Some(0.5)),
        ];
        let sel = select_by_scores(&cfg, "s", &scored).unwrap();
        let ids: Vec<&str> = sel.entries.iter().map(|e| e.image_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "c"]);
    }

    #[test]
    fn unscored_images_fall_back_to_id_order() {
        let cfg = BufferConfig {
            cap: 2,
            positive_fraction: 1.0,
            site_ratio_cap: 1.0,
        };
        let scored = vec![
            ("c".to_string(), true, None),
            ("a".to_string(), true, None),
            ("b".to_string(), true, None),
        ];
        let sel = select_by_scores(&cfg, "s", &scored).unwrap();
        let ids: Vec<&str> = sel.entries.iter().map(|e| e.image_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b"]);
    }

    #[test]
    fn manifest_round_trips() {
        let sel = SiteSelection {
            site_id: "2".into(),
            entries: vec![
                BufferEntry {
                    image_id: "2-p01-003".into(),
                    positive: true,
                    score: Some(0.125),
                },
                BufferEntry {
                    image_id: "2-p02-001".into(),
                    positive: false,
                    score: None,
                },
            ],
        };
        let text = sel.manifest();
        let parsed = SiteSelection::parse_manifest(&text).unwrap();
        assert_eq!(parsed, sel);
    }
}
