//! Evaluation metrics: region similarity J, contour accuracy F, tracklet
//! average precision / recall, and multiple-choice accuracy.
//!
//! AP follows the video-instance-segmentation convention: spatio-temporal
//! IoU, greedy confidence-ordered matching per episode, a pooled
//! max-interpolated precision-recall curve, averaged over the IoU
//! thresholds 0.50:0.05:0.95.

use crate::error::{Error, Result};
use crate::loss::hungarian_match;
use crate::mask::{st_iou, Mask};
use crate::tensor::Tensor;

/// The ten IoU thresholds AP and AR average over.
pub const AP_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Detections are capped at this many per episode for recall.
pub const AR_DETECTION_CAP: usize = 100;

fn check_tracklets(op: &'static str, pred: &[Mask], gt: &[Mask]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            op,
            left: vec![pred.len()],
            right: vec![gt.len()],
        });
    }
    for (p, g) in pred.iter().zip(gt) {
        if (p.h, p.w) != (g.h, g.w) {
            return Err(Error::ShapeMismatch {
                op,
                left: vec![p.h, p.w],
                right: vec![g.h, g.w],
            });
        }
    }
    Ok(())
}

/// Mean per-frame IoU; frames where both masks are empty count 1.0.
pub fn region_similarity_j(pred: &[Mask], gt: &[Mask]) -> Result<f64> {
    check_tracklets("region_similarity_j", pred, gt)?;
    if pred.is_empty() {
        return Ok(1.0);
    }
    let total: f64 = pred.iter().zip(gt).map(|(p, g)| p.iou(g)).sum();
    Ok(total / pred.len() as f64)
}

/// Foreground cells 4-adjacent to background or to the image edge.
pub fn boundary(mask: &Mask) -> Mask {
    let mut out = Mask::empty(mask.h, mask.w);
    for y in 0..mask.h {
        for x in 0..mask.w {
            if !mask.get(y, x) {
                continue;
            }
            let at_edge = y == 0 || x == 0 || y == mask.h - 1 || x == mask.w - 1;
            let open = at_edge
                || !mask.get(y - 1, x)
                || !mask.get(y + 1, x)
                || !mask.get(y, x - 1)
                || !mask.get(y, x + 1);
            out.set(y, x, open);
        }
    }
    out
}

/// Dilation by one pixel in the Chebyshev metric (3x3 structuring element).
fn dilate_one(mask: &Mask) -> Mask {
    let mut out = Mask::empty(mask.h, mask.w);
    for y in 0..mask.h {
        for x in 0..mask.w {
            if !mask.get(y, x) {
                continue;
            }
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let ny = y as i64 + dy;
                    let nx = x as i64 + dx;
                    if ny >= 0 && nx >= 0 && (ny as usize) < mask.h && (nx as usize) < mask.w {
                        out.set(ny as usize, nx as usize, true);
                    }
                }
            }
        }
    }
    out
}

fn boundary_f_frame(pred: &Mask, gt: &Mask) -> f64 {
    let pb = boundary(pred);
    let gb = boundary(gt);
    match (pb.is_blank(), gb.is_blank()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let gb_dilated = dilate_one(&gb);
    let pb_dilated = dilate_one(&pb);
    let matched_p = pb
        .data()
        .iter()
        .zip(gb_dilated.data())
        .filter(|&(&p, &g)| p != 0 && g != 0)
        .count();
    let matched_g = gb
        .data()
        .iter()
        .zip(pb_dilated.data())
        .filter(|&(&g, &p)| g != 0 && p != 0)
        .count();
    let precision = matched_p as f64 / pb.count() as f64;
    let recall = matched_g as f64 / gb.count() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Mean per-frame boundary F-measure with a 1-pixel matching tolerance;
/// frames where both masks are empty count 1.0.
pub fn contour_accuracy_f(pred: &[Mask], gt: &[Mask]) -> Result<f64> {
    check_tracklets("contour_accuracy_f", pred, gt)?;
    if pred.is_empty() {
        return Ok(1.0);
    }
    let total: f64 = pred.iter().zip(gt).map(|(p, g)| boundary_f_frame(p, g)).sum();
    Ok(total / pred.len() as f64)
}

/// One scored prediction for AP/AR.
#[derive(Debug, Clone)]
pub struct ScoredTracklet {
    pub confidence: f64,
    pub frames: Vec<Mask>,
}

/// One episode's predictions and ground truth, for pooled AP.
#[derive(Debug, Clone)]
pub struct EpisodeEval {
    pub preds: Vec<ScoredTracklet>,
    pub gts: Vec<Vec<Mask>>,
}

fn validate_confidences(episodes: &[EpisodeEval]) -> Result<usize> {
    for ep in episodes {
        for p in &ep.preds {
            if !(0.0..=1.0).contains(&p.confidence) {
                return Err(Error::Evaluation(format!(
                    "confidence {} outside [0,1]",
                    p.confidence
                )));
            }
        }
    }
    Ok(episodes.iter().map(|e| e.gts.len()).sum())
}

/// With no ground truth anywhere, scores are vacuously perfect exactly
/// when nothing was predicted either.
fn vacuous_scores(episodes: &[EpisodeEval]) -> (f64, f64) {
    let any_pred = episodes.iter().any(|e| !e.preds.is_empty());
    if any_pred {
        (0.0, 0.0)
    } else {
        (1.0, 1.0)
    }
}

/// `(AP, recall)` at a single IoU threshold, with the same pooling,
/// matching and tie rules as [`tracklet_ap`].
pub fn tracklet_ap_at(episodes: &[EpisodeEval], threshold: f64) -> Result<(f64, f64)> {
    let total_gt = validate_confidences(episodes)?;
    if total_gt == 0 {
        return Ok(vacuous_scores(episodes));
    }
    Ok(ap_recall_at(episodes, threshold, total_gt))
}

/// `(AP, AR)` pooled over episodes and averaged over [`AP_THRESHOLDS`].
/// Ties in confidence break by episode order then prediction index, so
/// evaluation is deterministic.
pub fn tracklet_ap(episodes: &[EpisodeEval]) -> Result<(f64, f64)> {
    let total_gt = validate_confidences(episodes)?;
    if total_gt == 0 {
        return Ok(vacuous_scores(episodes));
    }

    let mut ap_sum = 0.0;
    let mut ar_sum = 0.0;
    for &thr in &AP_THRESHOLDS {
        let (ap, recall) = ap_recall_at(episodes, thr, total_gt);
        ap_sum += ap;
        ar_sum += recall;
    }
    Ok((
        ap_sum / AP_THRESHOLDS.len() as f64,
        ar_sum / AP_THRESHOLDS.len() as f64,
    ))
}

fn ap_recall_at(episodes: &[EpisodeEval], thr: f64, total_gt: usize) -> (f64, f64) {
    // Flat detection list: (confidence, episode, pred index, is_tp).
    let mut dets: Vec<(f64, usize, usize, bool)> = Vec::new();
    let mut matched_gt_total = 0usize;
    for (e, ep) in episodes.iter().enumerate() {
        let mut order: Vec<usize> = (0..ep.preds.len().min(AR_DETECTION_CAP)).collect();
        order.sort_by(|&a, &b| {
            ep.preds[b]
                .confidence
                .partial_cmp(&ep.preds[a].confidence)
                .expect("finite confidences")
                .then(a.cmp(&b))
        });
        let mut gt_used = vec![false; ep.gts.len()];
        for &pi in &order {
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in ep.gts.iter().enumerate() {
                if gt_used[gi] {
                    continue;
                }
                let iou = st_iou(&ep.preds[pi].frames, gt);
                if iou >= thr && best.map_or(true, |(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            let tp = if let Some((gi, _)) = best {
                gt_used[gi] = true;
                matched_gt_total += 1;
                true
            } else {
                false
            };
            dets.push((ep.preds[pi].confidence, e, pi, tp));
        }
    }
    dets.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("finite confidences")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    // Raw precision-recall points, then max interpolation.
    let mut tp_cum = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(dets.len());
    for (rank, det) in dets.iter().enumerate() {
        if det.3 {
            tp_cum += 1;
        }
        let recall = tp_cum as f64 / total_gt as f64;
        let precision = tp_cum as f64 / (rank + 1) as f64;
        points.push((recall, precision));
    }
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &(r, p) in &points {
        if r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = r;
        }
    }
    (ap, matched_gt_total as f64 / total_gt as f64)
}

/// Fraction of exactly-matching choices.
pub fn mc_accuracy(chosen: &[usize], keys: &[usize]) -> Result<f64> {
    if chosen.len() != keys.len() {
        return Err(Error::ShapeMismatch {
            op: "mc_accuracy",
            left: vec![chosen.len()],
            right: vec![keys.len()],
        });
    }
    if chosen.is_empty() {
        return Ok(1.0);
    }
    let hits = chosen.iter().zip(keys).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / chosen.len() as f64)
}

/// Pairs predicted tracklets with ground truth by maximum total
/// spatio-temporal IoU and averages J and F over the ground-truth
/// instances; unmatched ground truth scores zero on both.
pub fn paired_jf(preds: &[Vec<Mask>], gts: &[Vec<Mask>]) -> Result<(f64, f64)> {
    if gts.is_empty() {
        return Ok((1.0, 1.0));
    }
    let mut j_total = 0.0;
    let mut f_total = 0.0;
    if !preds.is_empty() {
        let mut cost = Tensor::zeros(&[preds.len(), gts.len()]);
        for (i, p) in preds.iter().enumerate() {
            for (j, g) in gts.iter().enumerate() {
                cost.set2(i, j, -st_iou(p, g));
            }
        }
        for (pi, gi) in hungarian_match(&cost)? {
            j_total += region_similarity_j(&preds[pi], &gts[gi])?;
            f_total += contour_accuracy_f(&preds[pi], &gts[gi])?;
        }
    }
    Ok((j_total / gts.len() as f64, f_total / gts.len() as f64))
}
