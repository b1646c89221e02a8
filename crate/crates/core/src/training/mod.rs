//! Desk-scale training of both networks on the synthetic proposal dataset:
//! mini-batch Adam over hand-written gradients, 50/50 ID/OOD batches so both
//! energy hinge expectations are estimated every step.

pub mod adam;
pub mod backprop;
pub mod dataset;
pub mod loss;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_step, AdamState};
pub use backprop::{
    boxnet_loss_and_grad, classifier_loss_and_grad, BoxSample, ClsSample, OodSample, TrainError,
};
pub use dataset::{synth_dataset, write_dataset, DatasetConfig, IdSample, SynthDataset};
pub use loss::{
    box_loss, classifier_loss, corner_loss, encode_box_targets, BoxLossBreakdown, BoxTargets,
    TrainConfig,
};

use crate::networks::boxes::BoxCodec;
use crate::networks::{BoxNet, ClassifierNet};
use crate::nn::archive::{load_params, save_params, ArchiveError};
use crate::nn::Params;
use crate::proposals::{Proposal, ProposalConfig};

/// Normalized voxel-center features for a proposal, or zeros when the
/// location encoder is disabled.
pub fn vox_features(p: &Proposal, pcfg: &ProposalConfig, pvle_enabled: bool) -> [f64; 3] {
    if pvle_enabled {
        p.voxel.features(pcfg)
    } else {
        [0.0; 3]
    }
}

#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub net: ClassifierNet,
    pub params: Params,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedBoxNet {
    pub net: BoxNet,
    pub params: Params,
    pub epoch_losses: Vec<f64>,
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Trains the classifier on ID samples (cross entropy + energy) and OOD
/// proposals (energy only).
pub fn train_classifier(
    id: &[IdSample],
    ood: &[Proposal],
    pcfg: &ProposalConfig,
    cfg: &TrainConfig,
    pvle_enabled: bool,
) -> Result<TrainedClassifier, TrainError> {
    cfg.validate().map_err(TrainError::BadConfig)?;
    if id.is_empty() || ood.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let net = ClassifierNet::new(crate::synth::CLASS_NAMES.len());
    let mut params = net.init_params(cfg.seed);
    let mut state = AdamState::new(params.layout.len);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x51A5_51A5_51A5_51A5);

    let id_feats: Vec<[f64; 3]> = id
        .iter()
        .map(|s| vox_features(&s.proposal, pcfg, pvle_enabled))
        .collect();
    let ood_feats: Vec<[f64; 3]> = ood
        .iter()
        .map(|p| vox_features(p, pcfg, pvle_enabled))
        .collect();

    let half = (cfg.batch_size / 2).max(1);
    let steps = id.len().max(ood.len()).div_ceil(half);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        let id_order = shuffled_indices(id.len(), &mut rng);
        let ood_order = shuffled_indices(ood.len(), &mut rng);
        let mut total = 0.0;
        for step in 0..steps {
            let id_batch: Vec<ClsSample> = (0..half)
                .map(|k| {
                    let i = id_order[(step * half + k) % id.len()];
                    ClsSample {
                        points: &id[i].proposal.canonical_points,
                        vox: id_feats[i],
                        label: id[i].class_id,
                    }
                })
                .collect();
            let ood_batch: Vec<OodSample> = (0..half)
                .map(|k| {
                    let j = ood_order[(step * half + k) % ood.len()];
                    OodSample {
                        points: &ood[j].canonical_points,
                        vox: ood_feats[j],
                    }
                })
                .collect();
            let (loss, grads) = classifier_loss_and_grad(&net, &params, &id_batch, &ood_batch, cfg)?;
            adam_step(&mut params.data, &grads, &mut state, cfg.lr, cfg.beta1, cfg.beta2);
            total += loss;
        }
        epoch_losses.push(total / steps as f64);
    }

    Ok(TrainedClassifier {
        net,
        params,
        epoch_losses,
    })
}

/// Trains the box network on ID samples (full multi-task objective) and OOD
/// proposals (energy hinge only).
pub fn train_boxnet(
    id: &[IdSample],
    ood: &[Proposal],
    pcfg: &ProposalConfig,
    cfg: &TrainConfig,
    codec: &BoxCodec,
    pvle_enabled: bool,
) -> Result<TrainedBoxNet, TrainError> {
    cfg.validate().map_err(TrainError::BadConfig)?;
    if id.is_empty() || ood.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let net = BoxNet::new(codec.nh, codec.ns());
    let mut params = net.init_params(cfg.seed.wrapping_add(1));
    let mut state = AdamState::new(params.layout.len);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xB0B0_B0B0_B0B0_B0B0);

    let id_feats: Vec<[f64; 3]> = id
        .iter()
        .map(|s| vox_features(&s.proposal, pcfg, pvle_enabled))
        .collect();
    let ood_feats: Vec<[f64; 3]> = ood
        .iter()
        .map(|p| vox_features(p, pcfg, pvle_enabled))
        .collect();

    let half = (cfg.batch_size / 2).max(1);
    let steps = id.len().max(ood.len()).div_ceil(half);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        let id_order = shuffled_indices(id.len(), &mut rng);
        let ood_order = shuffled_indices(ood.len(), &mut rng);
        let mut total = 0.0;
        for step in 0..steps {
            let id_batch: Vec<BoxSample> = (0..half)
                .map(|k| {
                    let i = id_order[(step * half + k) % id.len()];
                    BoxSample {
                        points: &id[i].proposal.canonical_points,
                        vox: id_feats[i],
                        targets: &id[i].targets,
                    }
                })
                .collect();
            let ood_batch: Vec<OodSample> = (0..half)
                .map(|k| {
                    let j = ood_order[(step * half + k) % ood.len()];
                    OodSample {
                        points: &ood[j].canonical_points,
                        vox: ood_feats[j],
                    }
                })
                .collect();
            let (loss, grads) =
                boxnet_loss_and_grad(&net, &params, &id_batch, &ood_batch, cfg, codec)?;
            adam_step(&mut params.data, &grads, &mut state, cfg.lr, cfg.beta1, cfg.beta2);
            total += loss;
        }
        epoch_losses.push(total / steps as f64);
    }

    Ok(TrainedBoxNet {
        net,
        params,
        epoch_losses,
    })
}

/// Fraction of items whose argmax logit matches the label.
pub fn classifier_accuracy(
    net: &ClassifierNet,
    params: &Params,
    items: &[(&Proposal, usize)],
    pcfg: &ProposalConfig,
    pvle_enabled: bool,
) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    for (p, label) in items {
        let logits = net
            .forward(params, &p.canonical_points, vox_features(p, pcfg, pvle_enabled))
            .unwrap();
        if crate::networks::boxes::argmax(&logits) == *label {
            hits += 1;
        }
    }
    hits as f64 / items.len() as f64
}

/// Classifier energies for a set of proposals.
pub fn classifier_energies(
    net: &ClassifierNet,
    params: &Params,
    proposals: &[&Proposal],
    pcfg: &ProposalConfig,
    pvle_enabled: bool,
    temperature: f64,
) -> Vec<f64> {
    proposals
        .iter()
        .map(|p| {
            let logits = net
                .forward(params, &p.canonical_points, vox_features(p, pcfg, pvle_enabled))
                .unwrap();
            crate::networks::energy_score(&logits, temperature).unwrap()
        })
        .collect()
}

// ── checkpoints ─────────────────────────────────────────────────────────

pub const CLASSIFIER_FILE: &str = "classifier.pcrd";
pub const BOXNET_FILE: &str = "boxnet.pcrd";
pub const META_FILE: &str = "meta.txt";

/// Writes a checkpoint directory: both weight archives plus a key-value
/// metadata block.
pub fn save_checkpoint(
    dir: &Path,
    cls_params: &Params,
    box_params: &Params,
    meta: &BTreeMap<String, String>,
) -> Result<(), ArchiveError> {
    std::fs::create_dir_all(dir)?;
    save_params(&dir.join(CLASSIFIER_FILE), cls_params)?;
    save_params(&dir.join(BOXNET_FILE), box_params)?;
    let mut text = String::new();
    for (k, v) in meta {
        text.push_str(&format!("{k} = {v}\n"));
    }
    std::fs::write(dir.join(META_FILE), text).map_err(ArchiveError::Io)?;
    Ok(())
}

fn load_meta(path: &Path) -> Result<BTreeMap<String, String>, ArchiveError> {
    let text = std::fs::read_to_string(path).map_err(ArchiveError::Io)?;
    let mut meta = BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            meta.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    Ok(meta)
}

/// Loads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(
    dir: &Path,
    n_classes: usize,
    nh: usize,
    ns: usize,
) -> Result<(ClassifierNet, Params, BoxNet, Params, BTreeMap<String, String>), ArchiveError> {
    let cls = ClassifierNet::new(n_classes);
    let cls_params = load_params(&dir.join(CLASSIFIER_FILE), cls.layout.clone())?;
    let boxnet = BoxNet::new(nh, ns);
    let box_params = load_params(&dir.join(BOXNET_FILE), boxnet.layout.clone())?;
    let meta = load_meta(&dir.join(META_FILE))?;
    Ok((cls, cls_params, boxnet, box_params, meta))
}
