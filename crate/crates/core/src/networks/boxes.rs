//! Heading/size bin machinery and box decoding.
//!
//! Heading is discretized into evenly spaced yaw bins over [-pi, pi); sizes
//! into one template per class. The network classifies a bin and regresses a
//! residual per bin; decoding picks the argmax bin, applies its residual and
//! the R-Net yaw prior, and maps the canonical-frame result back to the
//! world through the inverse of the proposal canonicalization.

use std::f64::consts::{PI, TAU};

use crate::proposals::Proposal;
use crate::types::{normalize_angle, Box3, Point3};

/// Heading bin count plus one size template per class.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxCodec {
    pub nh: usize,
    /// Size templates (l, w, h), indexed by class id.
    pub templates: Vec<[f64; 3]>,
}

impl Default for BoxCodec {
    fn default() -> Self {
        Self {
            nh: 12,
            templates: vec![
                [3.9, 1.6, 1.56],  // car
                [0.8, 0.6, 1.73],  // pedestrian
                [1.76, 0.6, 1.73], // cyclist
            ],
        }
    }
}

impl BoxCodec {
    pub fn ns(&self) -> usize {
        self.templates.len()
    }

    #[inline]
    pub fn bin_width(&self) -> f64 {
        TAU / self.nh as f64
    }

    /// Center of heading bin k: -pi + (k + 1/2) * 2pi/NH.
    #[inline]
    pub fn bin_center(&self, k: usize) -> f64 {
        -PI + (k as f64 + 0.5) * self.bin_width()
    }

    /// Nearest bin and signed residual for a yaw. A yaw exactly between two
    /// bin centers goes to the lower bin index.
    pub fn bin_of_yaw(&self, yaw: f64) -> (usize, f64) {
        let y = normalize_angle(yaw); // (-pi, pi]
        let u = (y + PI) / self.bin_width(); // (0, nh]
        let mut k = u.floor() as usize;
        if (u - u.floor()).abs() == 0.0 {
            // On a bin boundary, i.e. exactly between two centers.
            k = k.saturating_sub(1);
        }
        if k >= self.nh {
            k = self.nh - 1;
        }
        (k, y - self.bin_center(k))
    }
}

/// Structured output of the box network.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxPrediction {
    /// Second-stage center correction (canonical frame, meters).
    pub center_delta: [f64; 3],
    /// First-stage center offset from the T-Net (canonical frame, meters).
    pub tnet_delta: [f64; 3],
    pub heading_logits: Vec<f64>,
    pub heading_residuals: Vec<f64>,
    pub size_logits: Vec<f64>,
    pub size_residuals: Vec<[f64; 3]>,
    /// Scalar yaw prior added to the decoded heading.
    pub rnet_yaw: f64,
}

impl BoxPrediction {
    /// Packed head layout: center(3) | heading logits(NH) |
    /// heading residuals(NH) | size logits(NS) | size residuals(NS*3).
    pub fn unpack(out: &[f64], tnet_delta: [f64; 3], rnet_yaw: f64, nh: usize, ns: usize) -> Self {
        assert_eq!(out.len(), 3 + 2 * nh + 4 * ns);
        let mut at = 0usize;
        let mut take = |n: usize| {
            let s = &out[at..at + n];
            at += n;
            s.to_vec()
        };
        let center = take(3);
        let heading_logits = take(nh);
        let heading_residuals = take(nh);
        let size_logits = take(ns);
        let raw = take(3 * ns);
        let size_residuals = raw.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Self {
            center_delta: [center[0], center[1], center[2]],
            tnet_delta,
            heading_logits,
            heading_residuals,
            size_logits,
            size_residuals,
            rnet_yaw,
        }
    }

    /// Predicted center in the canonical frame (both stages summed).
    pub fn center_canonical(&self) -> Point3 {
        Point3::new(
            self.tnet_delta[0] + self.center_delta[0],
            self.tnet_delta[1] + self.center_delta[1],
            self.tnet_delta[2] + self.center_delta[2],
        )
    }

    pub fn argmax_heading(&self) -> usize {
        argmax(&self.heading_logits)
    }

    pub fn argmax_size(&self) -> usize {
        argmax(&self.size_logits)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One emitted object.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub box3: Box3,
    /// Softmax class probabilities (sums to one).
    pub class_probs: Vec<f64>,
    pub class_id: usize,
    pub energy_cls: f64,
    pub energy_box: f64,
    /// Set when a decoded size was clamped up to 0.1 m.
    pub degenerate: bool,
}

impl Detection {
    /// Ranking score: lower classifier energy means more in-distribution.
    pub fn score(&self) -> f64 {
        -self.energy_cls
    }
}

/// Decodes a prediction into a world-frame box through the inverse of the
/// proposal canonicalization. Non-positive sizes clamp to 0.1 m and flag
/// the detection degenerate.
pub fn decode_box(pred: &BoxPrediction, proposal: &Proposal, codec: &BoxCodec) -> (Box3, bool) {
    let h = pred.argmax_heading();
    let s = pred.argmax_size();
    decode_box_at_bins(pred, proposal, codec, s, h)
}

/// Decoding with the (size, heading) bins pinned; the argmax path and the
/// corner-loss hypotheses both go through here.
pub fn decode_box_at_bins(
    pred: &BoxPrediction,
    proposal: &Proposal,
    codec: &BoxCodec,
    size_bin: usize,
    heading_bin: usize,
) -> (Box3, bool) {
    let yaw_canonical =
        codec.bin_center(heading_bin) + pred.heading_residuals[heading_bin] + pred.rnet_yaw;
    let template = codec.templates[size_bin];
    let mut degenerate = false;
    let mut size = [0.0; 3];
    for d in 0..3 {
        size[d] = template[d] * (1.0 + pred.size_residuals[size_bin][d]);
        if size[d] <= 0.0 {
            size[d] = 0.1;
            degenerate = true;
        }
    }
    let view = proposal.view_yaw();
    let center = pred.center_canonical().rotate_z(view) + proposal.mean;
    let yaw = normalize_angle(yaw_canonical + view);
    (Box3::new(center, size, yaw), degenerate)
}

/// Canonical-frame box corners for a (size, heading) hypothesis, used by the
/// corner loss. Same corner enumeration as [`Box3::corners`].
pub fn corners_at_bins(
    pred: &BoxPrediction,
    codec: &BoxCodec,
    size_bin: usize,
    heading_bin: usize,
) -> [Point3; 8] {
    let yaw = codec.bin_center(heading_bin) + pred.heading_residuals[heading_bin] + pred.rnet_yaw;
    let template = codec.templates[size_bin];
    let size = [
        template[0] * (1.0 + pred.size_residuals[size_bin][0]),
        template[1] * (1.0 + pred.size_residuals[size_bin][1]),
        template[2] * (1.0 + pred.size_residuals[size_bin][2]),
    ];
    Box3::new(pred.center_canonical(), size, yaw).corners()
}
