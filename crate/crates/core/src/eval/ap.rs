//! Average precision with greedy score-ordered matching at a fixed 3D IoU
//! threshold, interpolated at 11 or 40 recall points.

use crate::types::Box3;

use super::iou3d::iou3d;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApInterpolation {
    /// Recall points 0.0, 0.1, ..., 1.0 with precision anchored to 1 at
    /// recall 0.
    Points11,
    /// Recall points 1/40, 2/40, ..., 1.0.
    Points40,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    /// Raw (recall, precision) samples after each detection.
    pub curve: Vec<(f64, f64)>,
    pub n_gt: usize,
    pub n_det: usize,
    pub true_positives: usize,
}

/// AP for one class. Detections are (box, score) pairs; each ground truth
/// can be matched at most once, in descending score order, at IoU >= the
/// threshold. Returns `None` when there are no ground-truth boxes.
pub fn average_precision(
    detections: &[(Box3, f64)],
    gts: &[Box3],
    iou_th: f64,
    mode: ApInterpolation,
) -> Option<ApResult> {
    if gts.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].1.partial_cmp(&detections[a].1).unwrap());

    let mut gt_used = vec![false; gts.len()];
    let mut curve = Vec::with_capacity(detections.len());
    let mut tp = 0usize;
    let mut fp = 0usize;
    for &di in &order {
        let det = &detections[di].0;
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_used[gi] {
                continue;
            }
            let v = iou3d(det, gt);
            if v >= iou_th && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                gt_used[gi] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        curve.push((
            tp as f64 / gts.len() as f64,
            tp as f64 / (tp + fp) as f64,
        ));
    }

    let interp = |r: f64| -> f64 {
        let mut best = if r <= 0.0 { 1.0 } else { 0.0 }; // recall-0 anchor
        for &(cr, cp) in &curve {
            if cr >= r && cp > best {
                best = cp;
            }
        }
        best
    };
    let ap = match mode {
        ApInterpolation::Points11 => {
            (0..=10).map(|k| interp(k as f64 / 10.0)).sum::<f64>() / 11.0
        }
        ApInterpolation::Points40 => {
            (1..=40).map(|k| interp(k as f64 / 40.0)).sum::<f64>() / 40.0
        }
    };
    Some(ApResult {
        ap,
        curve,
        n_gt: gts.len(),
        n_det: detections.len(),
        true_positives: tp,
    })
}

/// Mean over the classes that have ground truth.
pub fn mean_ap(per_class: &[Option<ApResult>]) -> Option<f64> {
    let present: Vec<f64> = per_class
        .iter()
        .filter_map(|r| r.as_ref().map(|r| r.ap))
        .collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}
