//! Metrics machinery: ground-segmentation scores, rotated 3D IoU, average
//! precision, ID/OOD separability statistics and latency aggregation.

pub mod ap;
pub mod iou3d;

use thiserror::Error;

pub use ap::{average_precision, mean_ap, ApInterpolation, ApResult};
pub use iou3d::iou3d;

use crate::networks::energy::calibrate_threshold;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no valid points to score")]
    Empty,
    #[error("prediction and ground truth lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// Binary segmentation counts and derived metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegScore {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub iou: f64,
}

/// Scores a predicted ground labeling against ground truth over aligned
/// per-point boolean slices (the caller restricts both to valid points).
pub fn seg_metrics(pred: &[bool], gt: &[bool]) -> Result<SegScore, EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(EvalError::Empty);
    }
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(SegScore {
        true_pos: tp,
        false_pos: fp,
        true_neg: tn,
        false_neg: fneg,
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fneg),
        accuracy: ratio(tp + tn, tp + fp + tn + fneg),
        iou: ratio(tp, tp + fp + fneg),
    })
}

/// One shared-range histogram bin over both energy populations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistBin {
    pub lo: f64,
    pub hi: f64,
    pub id_count: usize,
    pub ood_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodSeparability {
    /// Probability that a random ID energy ranks below a random OOD energy
    /// (ties count half).
    pub auroc: f64,
    /// OOD fraction passing the threshold that admits 95% of ID samples.
    pub fpr_at_95_tpr: f64,
    pub threshold_95: f64,
    pub histogram: Vec<HistBin>,
}

/// Rank-statistic AUROC plus FPR at the calibrated 95% TPR gate.
pub fn ood_separability(id_energies: &[f64], ood_energies: &[f64]) -> OodSeparability {
    assert!(
        !id_energies.is_empty() && !ood_energies.is_empty(),
        "both energy lists must be nonempty"
    );
    // Concordant pair count via merged ranks (Mann-Whitney U).
    let mut all: Vec<(f64, bool)> = id_energies
        .iter()
        .map(|&e| (e, true))
        .chain(ood_energies.iter().map(|&e| (e, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    // Average ranks over tie groups, accumulate OOD rank sum.
    let mut ood_rank_sum = 0.0f64;
    let mut i = 0usize;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0; // 1-based
        for item in &all[i..=j] {
            if !item.1 {
                ood_rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let n_i = id_energies.len() as f64;
    let n_o = ood_energies.len() as f64;
    let auroc = (ood_rank_sum - n_o * (n_o + 1.0) / 2.0) / (n_i * n_o);

    let threshold_95 = calibrate_threshold(id_energies, 0.95).unwrap();
    let fpr = ood_energies.iter().filter(|&&e| e < threshold_95).count() as f64 / n_o;

    // 50-bin shared-range histogram.
    let lo = all.first().unwrap().0;
    let hi = all.last().unwrap().0;
    let width = ((hi - lo) / 50.0).max(1e-12);
    let mut histogram: Vec<HistBin> = (0..50)
        .map(|k| HistBin {
            lo: lo + k as f64 * width,
            hi: lo + (k + 1) as f64 * width,
            id_count: 0,
            ood_count: 0,
        })
        .collect();
    for &(e, is_id) in &all {
        let k = (((e - lo) / width) as usize).min(49);
        if is_id {
            histogram[k].id_count += 1;
        } else {
            histogram[k].ood_count += 1;
        }
    }

    OodSeparability {
        auroc,
        fpr_at_95_tpr: fpr,
        threshold_95,
        histogram,
    }
}

// ── latency aggregation ─────────────────────────────────────────────────

/// Wall-clock milliseconds per pipeline stage for one scan.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimings {
    pub projection_ms: f64,
    pub ground_ms: f64,
    pub cluster_ms: f64,
    pub network_ms: f64,
    pub total_ms: f64,
}

impl StageTimings {
    pub fn stage_sum(&self) -> f64 {
        self.projection_ms + self.ground_ms + self.cluster_ms + self.network_ms
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyStats {
    pub runs: usize,
    pub median: StageTimings,
    pub p95: StageTimings,
    /// 1000 / median total milliseconds.
    pub fps_median: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((sorted.len() as f64 - 1.0) * q).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Runs the measured closure `repeats` times over `n_scans` scan indices and
/// aggregates per-stage medians and p95s. The caller is responsible for
/// warm-up and for pinning the run to a single thread when the headline
/// number is wanted.
pub fn benchmark<F: FnMut(usize) -> StageTimings>(
    n_scans: usize,
    repeats: usize,
    mut run: F,
) -> LatencyStats {
    let mut samples = Vec::with_capacity(n_scans * repeats);
    for _ in 0..repeats {
        for scan in 0..n_scans {
            samples.push(run(scan));
        }
    }
    let collect =
        |f: fn(&StageTimings) -> f64| -> Vec<f64> {
            let mut v: Vec<f64> = samples.iter().map(f).collect();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v
        };
    let proj = collect(|t| t.projection_ms);
    let ground = collect(|t| t.ground_ms);
    let cluster = collect(|t| t.cluster_ms);
    let network = collect(|t| t.network_ms);
    let total = collect(|t| t.total_ms);
    let at = |q: f64| StageTimings {
        projection_ms: percentile(&proj, q),
        ground_ms: percentile(&ground, q),
        cluster_ms: percentile(&cluster, q),
        network_ms: percentile(&network, q),
        total_ms: percentile(&total, q),
    };
    let median = at(0.5);
    LatencyStats {
        runs: samples.len(),
        p95: at(0.95),
        fps_median: if median.total_ms > 0.0 {
            1000.0 / median.total_ms
        } else {
            0.0
        },
        median,
    }
}
