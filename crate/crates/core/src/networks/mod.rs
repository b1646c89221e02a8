//! Point-set networks for proposal classification and box estimation.
//!
//! Both networks share the same skeleton: a per-point MLP (3-32-64-128) with
//! ReLU, a coordinatewise max pool over the points for permutation
//! invariance, and a small location encoder (3-64-32) whose output is
//! concatenated with the pooled feature. The classifier ends in a single
//! head producing K class logits. The box network first regresses a center
//! offset (T-Net) and a yaw prior (R-Net) from the pooled features, shifts
//! the points by the offset, runs the shared encoder a second time, and a
//! final head emits the packed box prediction.
//!
//! Plain ReLU MLPs, no batch norm: single-proposal inference latency is the
//! budget that matters here.

pub mod boxes;
pub mod energy;

use std::sync::Arc;

use thiserror::Error;

use crate::nn::{linear_fwd, max_pool, relu, LayoutBuilder, Layout, LinearRef, Params};
use crate::types::Point3;

pub use boxes::{decode_box, BoxCodec, BoxPrediction, Detection};
pub use energy::{
    box_energy_logits, calibrate_threshold, energy_score, id_passthrough, EnergyConfig,
    GateDecision,
};

/// Per-point encoder widths.
pub const ENC_DIMS: [usize; 4] = [3, 32, 64, 128];
/// Location encoder widths.
pub const PVLE_DIMS: [usize; 3] = [3, 64, 32];
/// Pooled feature width.
pub const GLOBAL_DIM: usize = ENC_DIMS[3];
/// Pooled feature concatenated with the location feature.
pub const CAT_DIM: usize = GLOBAL_DIM + PVLE_DIMS[2];

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("non-finite network input")]
    NonFiniteInput,
    #[error("expected {expected} points, got {got}")]
    WrongPointCount { expected: usize, got: usize },
}

/// Which network a critical-point query refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WhichNetwork {
    Classifier,
    Box,
}

// ── shared forward pieces ───────────────────────────────────────────────

pub(crate) struct EncoderCache {
    pub(crate) acts1: Vec<f64>,
    pub(crate) acts2: Vec<f64>,
    pub(crate) acts3: Vec<f64>,
    pub(crate) global: Vec<f64>,
    pub(crate) argmax: Vec<usize>,
}

pub(crate) fn encoder_forward(
    params: &[f64],
    enc: [&LinearRef; 3],
    xs: &[f64],
) -> EncoderCache {
    let n = xs.len() / 3;
    let mut acts1 = vec![0.0; n * ENC_DIMS[1]];
    linear_fwd(params, enc[0], xs, &mut acts1);
    relu(&mut acts1);
    let mut acts2 = vec![0.0; n * ENC_DIMS[2]];
    linear_fwd(params, enc[1], &acts1, &mut acts2);
    relu(&mut acts2);
    let mut acts3 = vec![0.0; n * ENC_DIMS[3]];
    linear_fwd(params, enc[2], &acts2, &mut acts3);
    relu(&mut acts3);
    let (global, argmax) = max_pool(&acts3, ENC_DIMS[3]);
    EncoderCache {
        acts1,
        acts2,
        acts3,
        global,
        argmax,
    }
}

pub(crate) struct PvleCache {
    pub(crate) h: Vec<f64>,
    pub(crate) out: Vec<f64>,
}

/// Location encoder: linear + ReLU, linear + ReLU.
pub(crate) fn pvle_forward_cached(
    params: &[f64],
    l1: &LinearRef,
    l2: &LinearRef,
    feat: [f64; 3],
) -> PvleCache {
    let mut h = vec![0.0; l1.out_dim];
    linear_fwd(params, l1, &feat, &mut h);
    relu(&mut h);
    let mut out = vec![0.0; l2.out_dim];
    linear_fwd(params, l2, &h, &mut out);
    relu(&mut out);
    PvleCache { h, out }
}

pub(crate) struct HeadCache {
    pub(crate) h: Vec<f64>,
    pub(crate) out: Vec<f64>,
}

/// Two-layer head: linear + ReLU, then a raw linear output.
pub(crate) fn head_forward_cached(
    params: &[f64],
    l1: &LinearRef,
    l2: &LinearRef,
    x: &[f64],
) -> HeadCache {
    let mut h = vec![0.0; l1.out_dim];
    linear_fwd(params, l1, x, &mut h);
    relu(&mut h);
    let mut out = vec![0.0; l2.out_dim];
    linear_fwd(params, l2, &h, &mut out);
    HeadCache { h, out }
}

pub(crate) fn flatten_points(pts: &[Point3]) -> Vec<f64> {
    let mut xs = Vec::with_capacity(pts.len() * 3);
    for p in pts {
        xs.push(p.x);
        xs.push(p.y);
        xs.push(p.z);
    }
    xs
}

fn check_inputs(pts: &[Point3], vox: [f64; 3]) -> Result<(), NetworkError> {
    if pts.iter().any(|p| !p.is_finite()) || vox.iter().any(|v| !v.is_finite()) {
        return Err(NetworkError::NonFiniteInput);
    }
    Ok(())
}

// ── classifier ──────────────────────────────────────────────────────────

/// Proposal classifier: encoder + pooled feature, location feature, one head
/// to K class logits.
#[derive(Debug, Clone)]
pub struct ClassifierNet {
    pub n_classes: usize,
    pub enc1: LinearRef,
    pub enc2: LinearRef,
    pub enc3: LinearRef,
    pub pvle1: LinearRef,
    pub pvle2: LinearRef,
    pub head1: LinearRef,
    pub head2: LinearRef,
    pub layout: Arc<Layout>,
}

pub(crate) struct ClassifierCache {
    pub(crate) xs: Vec<f64>,
    pub(crate) enc: EncoderCache,
    pub(crate) pvle: PvleCache,
    pub(crate) cat: Vec<f64>,
    pub(crate) head: HeadCache,
}

impl ClassifierNet {
    pub fn new(n_classes: usize) -> Self {
        let mut b = LayoutBuilder::new();
        let enc1 = b.linear("enc1", ENC_DIMS[0], ENC_DIMS[1]);
        let enc2 = b.linear("enc2", ENC_DIMS[1], ENC_DIMS[2]);
        let enc3 = b.linear("enc3", ENC_DIMS[2], ENC_DIMS[3]);
        let pvle1 = b.linear("pvle1", PVLE_DIMS[0], PVLE_DIMS[1]);
        let pvle2 = b.linear("pvle2", PVLE_DIMS[1], PVLE_DIMS[2]);
        let head1 = b.linear("cls1", CAT_DIM, 64);
        let head2 = b.linear("cls2", 64, n_classes);
        Self {
            n_classes,
            enc1,
            enc2,
            enc3,
            pvle1,
            pvle2,
            head1,
            head2,
            layout: b.finish(),
        }
    }

    pub fn init_params(&self, seed: u64) -> Params {
        Params::init(self.layout.clone(), seed)
    }

    /// Location encoder output for normalized voxel-center features.
    pub fn pvle_forward(&self, params: &Params, feat: [f64; 3]) -> Vec<f64> {
        pvle_forward_cached(&params.data, &self.pvle1, &self.pvle2, feat).out
    }

    pub(crate) fn forward_cached(
        &self,
        params: &[f64],
        pts: &[Point3],
        vox: [f64; 3],
    ) -> ClassifierCache {
        let xs = flatten_points(pts);
        let enc = encoder_forward(params, [&self.enc1, &self.enc2, &self.enc3], &xs);
        let pvle = pvle_forward_cached(params, &self.pvle1, &self.pvle2, vox);
        let mut cat = Vec::with_capacity(CAT_DIM);
        cat.extend_from_slice(&enc.global);
        cat.extend_from_slice(&pvle.out);
        let head = head_forward_cached(params, &self.head1, &self.head2, &cat);
        ClassifierCache {
            xs,
            enc,
            pvle,
            cat,
            head,
        }
    }

    /// Class logits for a canonicalized proposal.
    pub fn forward(
        &self,
        params: &Params,
        pts: &[Point3],
        vox: [f64; 3],
    ) -> Result<Vec<f64>, NetworkError> {
        check_inputs(pts, vox)?;
        Ok(self.forward_cached(&params.data, pts, vox).head.out)
    }
}

// ── box estimation ──────────────────────────────────────────────────────

/// Box estimation network with T-Net center regressor, R-Net yaw prior, and
/// a second encoder pass over the re-centered points.
#[derive(Debug, Clone)]
pub struct BoxNet {
    pub nh: usize,
    pub ns: usize,
    pub enc1: LinearRef,
    pub enc2: LinearRef,
    pub enc3: LinearRef,
    pub pvle1: LinearRef,
    pub pvle2: LinearRef,
    pub tnet1: LinearRef,
    pub tnet2: LinearRef,
    pub rnet1: LinearRef,
    pub rnet2: LinearRef,
    pub head1: LinearRef,
    pub head2: LinearRef,
    pub layout: Arc<Layout>,
}

pub(crate) struct BoxCache {
    pub(crate) xs: Vec<f64>,
    pub(crate) enc_a: EncoderCache,
    pub(crate) pvle: PvleCache,
    pub(crate) cat1: Vec<f64>,
    pub(crate) tnet: HeadCache,
    pub(crate) rnet: HeadCache,
    pub(crate) xs2: Vec<f64>,
    pub(crate) enc_b: EncoderCache,
    pub(crate) cat2: Vec<f64>,
    pub(crate) head: HeadCache,
}

impl BoxNet {
    pub fn new(nh: usize, ns: usize) -> Self {
        let out_dim = 3 + 2 * nh + 4 * ns;
        let mut b = LayoutBuilder::new();
        let enc1 = b.linear("enc1", ENC_DIMS[0], ENC_DIMS[1]);
        let enc2 = b.linear("enc2", ENC_DIMS[1], ENC_DIMS[2]);
        let enc3 = b.linear("enc3", ENC_DIMS[2], ENC_DIMS[3]);
        let pvle1 = b.linear("pvle1", PVLE_DIMS[0], PVLE_DIMS[1]);
        let pvle2 = b.linear("pvle2", PVLE_DIMS[1], PVLE_DIMS[2]);
        let tnet1 = b.linear("tnet1", CAT_DIM, 64);
        let tnet2 = b.linear("tnet2", 64, 3);
        let rnet1 = b.linear("rnet1", CAT_DIM, 64);
        let rnet2 = b.linear("rnet2", 64, 1);
        let head1 = b.linear("box1", CAT_DIM, 128);
        let head2 = b.linear("box2", 128, out_dim);
        Self {
            nh,
            ns,
            enc1,
            enc2,
            enc3,
            pvle1,
            pvle2,
            tnet1,
            tnet2,
            rnet1,
            rnet2,
            head1,
            head2,
            layout: b.finish(),
        }
    }

    pub fn init_params(&self, seed: u64) -> Params {
        Params::init(self.layout.clone(), seed)
    }

    pub fn pvle_forward(&self, params: &Params, feat: [f64; 3]) -> Vec<f64> {
        pvle_forward_cached(&params.data, &self.pvle1, &self.pvle2, feat).out
    }

    pub(crate) fn forward_cached(&self, params: &[f64], pts: &[Point3], vox: [f64; 3]) -> BoxCache {
        let xs = flatten_points(pts);
        let enc_a = encoder_forward(params, [&self.enc1, &self.enc2, &self.enc3], &xs);
        let pvle = pvle_forward_cached(params, &self.pvle1, &self.pvle2, vox);
        let mut cat1 = Vec::with_capacity(CAT_DIM);
        cat1.extend_from_slice(&enc_a.global);
        cat1.extend_from_slice(&pvle.out);
        let tnet = head_forward_cached(params, &self.tnet1, &self.tnet2, &cat1);
        let rnet = head_forward_cached(params, &self.rnet1, &self.rnet2, &cat1);

        // Re-center by the T-Net offset and encode again with the same
        // weights; gradients from both passes accumulate on the encoder.
        let mut xs2 = xs.clone();
        for row in xs2.chunks_exact_mut(3) {
            row[0] -= tnet.out[0];
            row[1] -= tnet.out[1];
            row[2] -= tnet.out[2];
        }
        let enc_b = encoder_forward(params, [&self.enc1, &self.enc2, &self.enc3], &xs2);
        let mut cat2 = Vec::with_capacity(CAT_DIM);
        cat2.extend_from_slice(&enc_b.global);
        cat2.extend_from_slice(&pvle.out);
        let head = head_forward_cached(params, &self.head1, &self.head2, &cat2);
        BoxCache {
            xs,
            enc_a,
            pvle,
            cat1,
            tnet,
            rnet,
            xs2,
            enc_b,
            cat2,
            head,
        }
    }

    /// Structured box prediction for a canonicalized proposal.
    pub fn forward(
        &self,
        params: &Params,
        pts: &[Point3],
        vox: [f64; 3],
    ) -> Result<BoxPrediction, NetworkError> {
        check_inputs(pts, vox)?;
        let cache = self.forward_cached(&params.data, pts, vox);
        Ok(BoxPrediction::unpack(
            &cache.head.out,
            [cache.tnet.out[0], cache.tnet.out[1], cache.tnet.out[2]],
            cache.rnet.out[0],
            self.nh,
            self.ns,
        ))
    }
}

// ── critical point sets ─────────────────────────────────────────────────

/// Point indices that realize the pooled global feature (lowest index on
/// ties). For the box network this is the second pooling, the one feeding
/// the box head.
pub fn critical_point_set(
    cls: &ClassifierNet,
    cls_params: &Params,
    boxnet: &BoxNet,
    box_params: &Params,
    pts: &[Point3],
    vox: [f64; 3],
    which: WhichNetwork,
) -> Vec<usize> {
    let argmax = match which {
        WhichNetwork::Classifier => {
            cls.forward_cached(&cls_params.data, pts, vox).enc.argmax
        }
        WhichNetwork::Box => boxnet.forward_cached(&box_params.data, pts, vox).enc_b.argmax,
    };
    let mut set: Vec<usize> = argmax;
    set.sort_unstable();
    set.dedup();
    set
}

/// Overlap measure |A ∩ B| / |A ∪ B| between two index sets.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.iter().filter(|i| b.contains(i)).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}
