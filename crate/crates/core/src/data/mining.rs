//! Construction of the ambiguous subset from a probe detector's output.
//!
//! For every annotated object the probe's ranked detections are searched for
//! the box that best overlaps the annotation (rank `k`). Any detection ranked
//! above it that barely overlaps the object yet carries the same category is
//! a distractor; objects with at least one distractor are kept.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{iou, Bbox, Detection, GroundTruth};
use crate::error::{Error, Result};

/// How a higher-ranked low-overlap detection is confirmed to be same-category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistractorCheck {
    /// Trust the detection's own category label.
    #[default]
    CategoryField,
    /// Also require the detection to cover another annotated instance of the category.
    VerifyAgainstGt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    /// Detections overlapping the object less than this are candidate distractors.
    pub iou_low: f64,
    pub check: DistractorCheck,
    /// Overlap needed with another annotation under [`DistractorCheck::VerifyAgainstGt`].
    pub gt_match_iou: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            iou_low: 0.5,
            check: DistractorCheck::CategoryField,
            gt_match_iou: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguousSample {
    pub image_id: String,
    pub gt_bbox: Bbox,
    pub category: String,
    pub distractor_count: usize,
    /// 1-indexed rank of the best-overlapping detection.
    pub true_target_rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipReason {
    NoDetections,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedObject {
    pub image_id: String,
    pub category: String,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningReport {
    pub samples: Vec<AmbiguousSample>,
    pub skipped: Vec<SkippedObject>,
}

/// Groups detections per image, each list sorted by descending confidence.
///
/// The sort is stable, so equal-confidence detections keep file order.
pub fn group_detections(
    detections: impl IntoIterator<Item = Detection>,
) -> BTreeMap<String, Vec<Detection>> {
    let mut per_image: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for d in detections {
        per_image.entry(d.image_id.clone()).or_default().push(d);
    }
    for list in per_image.values_mut() {
        list.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    }
    per_image
}

pub fn mine_ambiguous(
    gt: &[GroundTruth],
    detections: &BTreeMap<String, Vec<Detection>>,
    cfg: &MiningConfig,
) -> Result<MiningReport> {
    if !(cfg.iou_low > 0.0 && cfg.iou_low <= 1.0) {
        return Err(Error::Config(format!("iou_low must lie in (0, 1], got {}", cfg.iou_low)));
    }
    for list in detections.values() {
        if let Some(pos) = list
            .windows(2)
            .position(|w| w[0].confidence < w[1].confidence)
        {
            return Err(Error::SortOrder(pos + 1));
        }
    }

    let mut report = MiningReport::default();
    for (gt_idx, object) in gt.iter().enumerate() {
        let list = match detections.get(&object.image_id) {
            Some(list) if !list.is_empty() => list,
            _ => {
                tracing::warn!(
                    image_id = %object.image_id,
                    category = %object.category,
                    "skipping object: no detections to rank"
                );
                report.skipped.push(SkippedObject {
                    image_id: object.image_id.clone(),
                    category: object.category.clone(),
                    reason: SkipReason::NoDetections,
                });
                continue;
            }
        };

        let overlaps: Vec<f64> = list.iter().map(|d| iou(&d.bbox, &object.bbox)).collect();
        // strict comparison keeps the lowest rank on ties
        let mut best = 0;
        for (j, &v) in overlaps.iter().enumerate().skip(1) {
            if v > overlaps[best] {
                best = j;
            }
        }

        let distractor_count = list[..best]
            .iter()
            .zip(&overlaps)
            .filter(|&(d, &overlap)| {
                overlap < cfg.iou_low
                    && d.category == object.category
                    && match cfg.check {
                        DistractorCheck::CategoryField => true,
                        DistractorCheck::VerifyAgainstGt => {
                            covers_other_instance(d, gt_idx, gt, cfg.gt_match_iou)
                        }
                    }
            })
            .count();

        if distractor_count > 0 {
            report.samples.push(AmbiguousSample {
                image_id: object.image_id.clone(),
                gt_bbox: object.bbox,
                category: object.category.clone(),
                distractor_count,
                true_target_rank: best + 1,
            });
        }
    }
    Ok(report)
}

fn covers_other_instance(d: &Detection, self_idx: usize, gt: &[GroundTruth], thr: f64) -> bool {
    gt.iter().enumerate().any(|(i, other)| {
        i != self_idx
            && other.image_id == d.image_id
            && other.category == d.category
            && iou(&other.bbox, &d.bbox) >= thr
    })
}
