//! Exact reverse-mode gradients for both networks, hand-written against the
//! cached forward activations. Max pooling routes each channel's gradient to
//! its argmax point (lowest index on ties); ReLU uses subgradient 0 at 0.
//! The box network's encoder runs twice with shared weights, so both passes
//! accumulate into the same tensors.

use thiserror::Error;

use crate::networks::{
    BoxNet, ClassifierNet, EncoderCache, HeadCache, PvleCache, CAT_DIM, ENC_DIMS, GLOBAL_DIM,
};
use crate::nn::{first_non_finite_in, linear_bwd, max_pool_bwd, relu_bwd, LinearRef, Params};
use crate::types::Point3;

use super::loss::{
    box_energy_grads, box_sample_grad, classifier_loss_grad, BoxPredGrad, BoxTargets, TrainConfig,
};
use crate::networks::boxes::{BoxCodec, BoxPrediction};

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("non-finite value in {tensor}")]
    NonFinite { tensor: String },
    #[error("batch needs at least one ID and one OOD sample")]
    EmptyBatch,
    #[error("invalid train config: {0}")]
    BadConfig(String),
}

/// One labeled in-distribution classifier sample.
pub struct ClsSample<'a> {
    pub points: &'a [Point3],
    pub vox: [f64; 3],
    pub label: usize,
}

/// One unlabeled (out-of-distribution) sample.
pub struct OodSample<'a> {
    pub points: &'a [Point3],
    pub vox: [f64; 3],
}

/// One in-distribution box-regression sample.
pub struct BoxSample<'a> {
    pub points: &'a [Point3],
    pub vox: [f64; 3],
    pub targets: &'a BoxTargets,
}

/// Backward through the shared per-point encoder. `dxs` receives the input
/// gradient when the caller needs it (second box pass).
fn encoder_backward(
    params: &[f64],
    enc: [&LinearRef; 3],
    xs: &[f64],
    cache: &EncoderCache,
    dglobal: &[f64],
    grads: &mut [f64],
    dxs: Option<&mut [f64]>,
) {
    let n = xs.len() / ENC_DIMS[0];
    let mut d3 = vec![0.0; n * ENC_DIMS[3]];
    max_pool_bwd(dglobal, &cache.argmax, &mut d3);
    relu_bwd(&cache.acts3, &mut d3);
    let mut d2 = vec![0.0; n * ENC_DIMS[2]];
    linear_bwd(params, enc[2], &cache.acts2, &d3, grads, Some(&mut d2));
    relu_bwd(&cache.acts2, &mut d2);
    let mut d1 = vec![0.0; n * ENC_DIMS[1]];
    linear_bwd(params, enc[1], &cache.acts1, &d2, grads, Some(&mut d1));
    relu_bwd(&cache.acts1, &mut d1);
    linear_bwd(params, enc[0], xs, &d1, grads, dxs);
}

/// Backward through the location encoder (both layers ReLU).
fn pvle_backward(
    params: &[f64],
    l1: &LinearRef,
    l2: &LinearRef,
    vox: [f64; 3],
    cache: &PvleCache,
    mut dout: Vec<f64>,
    grads: &mut [f64],
) {
    relu_bwd(&cache.out, &mut dout);
    let mut dh = vec![0.0; l1.out_dim];
    linear_bwd(params, l2, &cache.h, &dout, grads, Some(&mut dh));
    relu_bwd(&cache.h, &mut dh);
    linear_bwd(params, l1, &vox, &dh, grads, None);
}

/// Backward through a two-layer head; returns the input gradient.
fn head_backward(
    params: &[f64],
    l1: &LinearRef,
    l2: &LinearRef,
    x: &[f64],
    cache: &HeadCache,
    dout: &[f64],
    grads: &mut [f64],
) -> Vec<f64> {
    let mut dh = vec![0.0; l1.out_dim];
    linear_bwd(params, l2, &cache.h, dout, grads, Some(&mut dh));
    relu_bwd(&cache.h, &mut dh);
    let mut dx = vec![0.0; l1.in_dim];
    linear_bwd(params, l1, x, &dh, grads, Some(&mut dx));
    dx
}

/// Accumulates one classifier sample's gradient given d(loss)/d(logits).
pub(crate) fn classifier_backward(
    net: &ClassifierNet,
    params: &[f64],
    vox: [f64; 3],
    cache: &crate::networks::ClassifierCache,
    dlogits: &[f64],
    grads: &mut [f64],
) {
    let dcat = head_backward(
        params,
        &net.head1,
        &net.head2,
        &cache.cat,
        &cache.head,
        dlogits,
        grads,
    );
    let dglobal = &dcat[..GLOBAL_DIM];
    let dpv = dcat[GLOBAL_DIM..].to_vec();
    pvle_backward(params, &net.pvle1, &net.pvle2, vox, &cache.pvle, dpv, grads);
    encoder_backward(
        params,
        [&net.enc1, &net.enc2, &net.enc3],
        &cache.xs,
        &cache.enc,
        dglobal,
        grads,
        None,
    );
}

/// Accumulates one box sample's gradient given the gradients on the packed
/// head output, the T-Net offset and the R-Net yaw.
pub(crate) fn box_backward(
    net: &BoxNet,
    params: &[f64],
    vox: [f64; 3],
    cache: &crate::networks::BoxCache,
    dout: &[f64],
    dtnet_direct: [f64; 3],
    drnet_direct: f64,
    grads: &mut [f64],
) {
    let n = cache.xs.len() / 3;

    // Box head -> cat2 = [global_b, pvle].
    let dcat2 = head_backward(
        params,
        &net.head1,
        &net.head2,
        &cache.cat2,
        &cache.head,
        dout,
        grads,
    );
    let mut dpv_total = dcat2[GLOBAL_DIM..].to_vec();

    // Second encoder pass; its input gradient flows into the T-Net offset.
    let mut dxs2 = vec![0.0; n * 3];
    encoder_backward(
        params,
        [&net.enc1, &net.enc2, &net.enc3],
        &cache.xs2,
        &cache.enc_b,
        &dcat2[..GLOBAL_DIM],
        grads,
        Some(&mut dxs2),
    );
    let mut dtnet = dtnet_direct;
    for row in dxs2.chunks_exact(3) {
        dtnet[0] -= row[0];
        dtnet[1] -= row[1];
        dtnet[2] -= row[2];
    }

    // T-Net and R-Net share cat1 = [global_a, pvle].
    let dcat1_t = head_backward(
        params,
        &net.tnet1,
        &net.tnet2,
        &cache.cat1,
        &cache.tnet,
        &dtnet,
        grads,
    );
    let dcat1_r = head_backward(
        params,
        &net.rnet1,
        &net.rnet2,
        &cache.cat1,
        &cache.rnet,
        &[drnet_direct],
        grads,
    );
    let mut dcat1 = dcat1_t;
    for (a, b) in dcat1.iter_mut().zip(dcat1_r.iter()) {
        *a += b;
    }
    debug_assert_eq!(dcat1.len(), CAT_DIM);

    // First encoder pass over the raw canonical points.
    encoder_backward(
        params,
        [&net.enc1, &net.enc2, &net.enc3],
        &cache.xs,
        &cache.enc_a,
        &dcat1[..GLOBAL_DIM],
        grads,
        None,
    );
    for (a, b) in dpv_total.iter_mut().zip(dcat1[GLOBAL_DIM..].iter()) {
        *a += b;
    }
    pvle_backward(
        params,
        &net.pvle1,
        &net.pvle2,
        vox,
        &cache.pvle,
        dpv_total,
        grads,
    );
}

fn finite_or_err(loss: f64, params: &Params, grads: &[f64]) -> Result<(), TrainError> {
    if !loss.is_finite() {
        return Err(TrainError::NonFinite {
            tensor: "loss".into(),
        });
    }
    if let Some(name) = first_non_finite_in(&params.layout, grads) {
        return Err(TrainError::NonFinite {
            tensor: name.to_string(),
        });
    }
    Ok(())
}

/// Loss and full parameter gradient of the classifier objective on a batch.
pub fn classifier_loss_and_grad(
    net: &ClassifierNet,
    params: &Params,
    id: &[ClsSample<'_>],
    ood: &[OodSample<'_>],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>), TrainError> {
    if id.is_empty() || ood.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut id_caches = Vec::with_capacity(id.len());
    let mut id_logits = Vec::with_capacity(id.len());
    for s in id {
        let cache = net.forward_cached(&params.data, s.points, s.vox);
        id_logits.push((cache.head.out.clone(), s.label));
        id_caches.push(cache);
    }
    let mut ood_caches = Vec::with_capacity(ood.len());
    let mut ood_logits = Vec::with_capacity(ood.len());
    for s in ood {
        let cache = net.forward_cached(&params.data, s.points, s.vox);
        ood_logits.push(cache.head.out.clone());
        ood_caches.push(cache);
    }

    let (loss, id_dlogits, ood_dlogits) = classifier_loss_grad(&id_logits, &ood_logits, cfg);

    let mut grads = vec![0.0; params.layout.len];
    for ((s, cache), dl) in id.iter().zip(id_caches.iter()).zip(id_dlogits.iter()) {
        classifier_backward(net, &params.data, s.vox, cache, dl, &mut grads);
    }
    for ((s, cache), dl) in ood.iter().zip(ood_caches.iter()).zip(ood_dlogits.iter()) {
        classifier_backward(net, &params.data, s.vox, cache, dl, &mut grads);
    }
    finite_or_err(loss, params, &grads)?;
    Ok((loss, grads))
}

/// Loss and full parameter gradient of the box objective on a batch.
/// ID samples contribute every term; OOD samples only the energy hinge.
pub fn boxnet_loss_and_grad(
    net: &BoxNet,
    params: &Params,
    id: &[BoxSample<'_>],
    ood: &[OodSample<'_>],
    cfg: &TrainConfig,
    codec: &BoxCodec,
) -> Result<(f64, Vec<f64>), TrainError> {
    if id.is_empty() || ood.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let unpack = |cache: &crate::networks::BoxCache| {
        BoxPrediction::unpack(
            &cache.head.out,
            [cache.tnet.out[0], cache.tnet.out[1], cache.tnet.out[2]],
            cache.rnet.out[0],
            net.nh,
            net.ns,
        )
    };

    let mut id_caches = Vec::with_capacity(id.len());
    let mut id_preds = Vec::with_capacity(id.len());
    for s in id {
        let cache = net.forward_cached(&params.data, s.points, s.vox);
        id_preds.push(unpack(&cache));
        id_caches.push(cache);
    }
    let mut ood_caches = Vec::with_capacity(ood.len());
    let mut ood_preds = Vec::with_capacity(ood.len());
    for s in ood {
        let cache = net.forward_cached(&params.data, s.points, s.vox);
        ood_preds.push(unpack(&cache));
        ood_caches.push(cache);
    }

    // Loss: mean of per-sample breakdowns plus batch energy hinges.
    let inv_n_id = 1.0 / id.len() as f64;
    let mut loss = 0.0;
    for (s, pred) in id.iter().zip(id_preds.iter()) {
        loss += super::loss::box_sample_breakdown(pred, s.targets, codec)
            .total(cfg.gamma_corner)
            * inv_n_id;
    }
    let id_e: Vec<f64> = id_preds
        .iter()
        .map(|p| {
            crate::networks::energy_score(
                &crate::networks::box_energy_logits(p),
                cfg.temperature,
            )
            .unwrap()
        })
        .collect();
    let ood_e: Vec<f64> = ood_preds
        .iter()
        .map(|p| {
            crate::networks::energy_score(
                &crate::networks::box_energy_logits(p),
                cfg.temperature,
            )
            .unwrap()
        })
        .collect();
    loss += cfg.lambda * super::loss::energy_hinge_loss(&id_e, &ood_e, cfg.m_id, cfg.m_ood);

    // Gradients per prediction.
    let id_refs: Vec<&BoxPrediction> = id_preds.iter().collect();
    let ood_refs: Vec<&BoxPrediction> = ood_preds.iter().collect();
    let (id_energy_g, ood_energy_g) = box_energy_grads(&id_refs, &ood_refs, cfg);

    let mut grads = vec![0.0; params.layout.len];
    for (((s, pred), cache), e_g) in id
        .iter()
        .zip(id_preds.iter())
        .zip(id_caches.iter())
        .zip(id_energy_g.iter())
    {
        let mut g = box_sample_grad(pred, s.targets, cfg, codec, inv_n_id);
        add_energy_grad(&mut g, e_g, net.nh);
        let (dout, dtnet, drnet) = g.pack();
        box_backward(net, &params.data, s.vox, cache, &dout, dtnet, drnet, &mut grads);
    }
    for ((s, cache), e_g) in ood.iter().zip(ood_caches.iter()).zip(ood_energy_g.iter()) {
        let mut g = BoxPredGrad::zeros(net.nh, net.ns);
        add_energy_grad(&mut g, e_g, net.nh);
        let (dout, dtnet, drnet) = g.pack();
        box_backward(net, &params.data, s.vox, cache, &dout, dtnet, drnet, &mut grads);
    }
    finite_or_err(loss, params, &grads)?;
    Ok((loss, grads))
}

/// Spreads an energy gradient over [heading logits | size logits] into the
/// prediction gradient.
fn add_energy_grad(g: &mut BoxPredGrad, energy_g: &[f64], nh: usize) {
    for (k, v) in energy_g.iter().enumerate() {
        if k < nh {
            g.heading_logits[k] += v;
        } else {
            g.size_logits[k - nh] += v;
        }
    }
}

/// Convenience wrapper around [`box_loss`] evaluating a whole ID batch the
/// same way the gradient path does; used by the finite-difference checks.
pub fn boxnet_batch_loss(
    net: &BoxNet,
    params: &Params,
    id: &[BoxSample<'_>],
    ood: &[OodSample<'_>],
    cfg: &TrainConfig,
    codec: &BoxCodec,
) -> f64 {
    let preds: Vec<BoxPrediction> = id
        .iter()
        .map(|s| net.forward(params, s.points, s.vox).unwrap())
        .collect();
    let ood_preds: Vec<BoxPrediction> = ood
        .iter()
        .map(|s| net.forward(params, s.points, s.vox).unwrap())
        .collect();
    let inv = 1.0 / id.len() as f64;
    let mut loss = 0.0;
    for (s, p) in id.iter().zip(preds.iter()) {
        loss +=
            super::loss::box_sample_breakdown(p, s.targets, codec).total(cfg.gamma_corner) * inv;
    }
    let id_e: Vec<f64> = preds
        .iter()
        .map(|p| {
            crate::networks::energy_score(&crate::networks::box_energy_logits(p), cfg.temperature)
                .unwrap()
        })
        .collect();
    let ood_e: Vec<f64> = ood_preds
        .iter()
        .map(|p| {
            crate::networks::energy_score(&crate::networks::box_energy_logits(p), cfg.temperature)
                .unwrap()
        })
        .collect();
    loss + cfg.lambda * super::loss::energy_hinge_loss(&id_e, &ood_e, cfg.m_id, cfg.m_ood)
}

/// Classifier batch loss without gradients, matching
/// [`classifier_loss_and_grad`]'s objective; used by finite differences.
pub fn classifier_batch_loss(
    net: &ClassifierNet,
    params: &Params,
    id: &[ClsSample<'_>],
    ood: &[OodSample<'_>],
    cfg: &TrainConfig,
) -> f64 {
    let id_logits: Vec<(Vec<f64>, usize)> = id
        .iter()
        .map(|s| (net.forward(params, s.points, s.vox).unwrap(), s.label))
        .collect();
    let ood_logits: Vec<Vec<f64>> = ood
        .iter()
        .map(|s| net.forward(params, s.points, s.vox).unwrap())
        .collect();
    super::loss::classifier_loss(&id_logits, &ood_logits, cfg)
}
