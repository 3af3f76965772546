use crate::data::{iou, Bbox};
use crate::error::{Error, Result};

/// IoU thresholds 0.50, 0.55, ..., 0.95, written out so that 0.6 is exact.
pub const COCO_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// AP of a cell with neither ground truth nor predictions.
pub const VACUOUS_AP: f64 = 1.0;

/// All-point interpolated average precision of one ranked prediction list.
///
/// Predictions are matched greedily in rank order, each to the unmatched
/// ground-truth box it overlaps most, provided that IoU reaches `iou_thr`.
pub fn average_precision(ranked: &[(Bbox, f64)], gts: &[Bbox], iou_thr: f64) -> Result<f64> {
    average_precision_with_vacuous(ranked, gts, iou_thr, VACUOUS_AP)
}

/// As [`average_precision`], with a chosen value for the empty-versus-empty case.
pub fn average_precision_with_vacuous(
    ranked: &[(Bbox, f64)],
    gts: &[Bbox],
    iou_thr: f64,
    vacuous: f64,
) -> Result<f64> {
    if !(iou_thr > 0.0 && iou_thr <= 1.0) {
        return Err(Error::Config(format!("IoU threshold must be in (0, 1], got {iou_thr}")));
    }
    if let Some(i) = ranked.iter().position(|(_, s)| s.is_nan()) {
        return Err(Error::SortOrder(i));
    }
    if let Some(i) = ranked.windows(2).position(|w| w[0].1 < w[1].1) {
        return Err(Error::SortOrder(i + 1));
    }
    if gts.is_empty() {
        return Ok(if ranked.is_empty() { vacuous } else { 0.0 });
    }

    let mut matched = vec![false; gts.len()];
    let mut tp = 0usize;
    // (recall, precision) after each prediction
    let mut curve = Vec::with_capacity(ranked.len());
    for (n, (b, _)) in ranked.iter().enumerate() {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(g, _)| !matched[*g])
            .map(|(g, gt)| (g, iou(b, gt)))
            .filter(|&(_, o)| o >= iou_thr)
            .fold(None, |acc: Option<(usize, f64)>, cur| match acc {
                Some(a) if a.1 >= cur.1 => Some(a),
                _ => Some(cur),
            });
        if let Some((g, _)) = best {
            matched[g] = true;
            tp += 1;
        }
        curve.push((tp as f64 / gts.len() as f64, tp as f64 / (n + 1) as f64));
    }

    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    let mut prev_recall = curve.last().map_or(0.0, |c| c.0);
    for &(recall, precision) in curve.iter().rev() {
        ap += (prev_recall - recall) * envelope;
        envelope = envelope.max(precision);
        prev_recall = recall;
    }
    ap += prev_recall * envelope;
    Ok(ap)
}

/// Mean of [`average_precision`] over `thresholds`.
pub fn map_over_thresholds(ranked: &[(Bbox, f64)], gts: &[Bbox], thresholds: &[f64]) -> Result<f64> {
    if thresholds.is_empty() {
        return Err(Error::Config("no IoU thresholds given".into()));
    }
    let mut sum = 0.0;
    for &t in thresholds {
        sum += average_precision(ranked, gts, t)?;
    }
    Ok(sum / thresholds.len() as f64)
}
