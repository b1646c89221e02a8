//! Pipeline configuration and its flat key-value text format.
//!
//! One `section.key = value` pair per line, `#` comments, unknown keys
//! rejected. Serialization is canonical (sorted keys, shortest round-trip
//! float formatting), so parse-then-serialize is idempotent.

use thiserror::Error;

use crate::clustering::ClusterConfig;
use crate::ground::GroundConfig;
use crate::networks::energy::EnergyConfig;
use crate::projection::ProjectionConfig;
use crate::proposals::ProposalConfig;
use crate::training::TrainConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected 'key = value', got '{text}'")]
    BadLine { line: usize, text: String },
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for '{key}': {value}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Every stage's configuration plus weight locations.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub projection: ProjectionConfig,
    pub ground: GroundConfig,
    pub cluster: ClusterConfig,
    pub proposal: ProposalConfig,
    pub energy: EnergyConfig,
    pub train: TrainConfig,
    pub classifier_weights: Option<String>,
    pub boxnet_weights: Option<String>,
    /// Semantic label ids counted as ground during evaluation.
    pub ground_label_ids: Vec<u32>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            projection: ProjectionConfig::kitti_hdl64e(),
            ground: GroundConfig::default(),
            cluster: ClusterConfig::default(),
            proposal: ProposalConfig::default(),
            energy: EnergyConfig::default(),
            train: TrainConfig::default(),
            classifier_weights: None,
            boxnet_weights: None,
            ground_label_ids: crate::kitti::default_ground_label_ids(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.projection
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.ground
            .validate(self.projection.s_w)
            .map_err(ConfigError::Invalid)?;
        self.cluster.validate().map_err(ConfigError::Invalid)?;
        self.proposal.validate().map_err(ConfigError::Invalid)?;
        self.energy.validate().map_err(ConfigError::Invalid)?;
        self.train.validate().map_err(ConfigError::Invalid)?;
        Ok(())
    }
}

/// Parses the flat key-value format on top of the defaults.
pub fn parse_config(text: &str) -> Result<PipelineConfig, ConfigError> {
    let mut cfg = PipelineConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::BadLine {
                line: line_no,
                text: raw.to_string(),
            });
        };
        let key = key.trim();
        let value = value.trim();
        apply_key(&mut cfg, key, value).map_err(|kind| match kind {
            KeyError::Unknown => ConfigError::UnknownKey {
                line: line_no,
                key: key.to_string(),
            },
            KeyError::BadValue => ConfigError::BadValue {
                line: line_no,
                key: key.to_string(),
                value: value.to_string(),
            },
        })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

enum KeyError {
    Unknown,
    BadValue,
}

fn apply_key(cfg: &mut PipelineConfig, key: &str, value: &str) -> Result<(), KeyError> {
    fn num<T: std::str::FromStr>(value: &str) -> Result<T, KeyError> {
        value.parse().map_err(|_| KeyError::BadValue)
    }
    match key {
        "projection.s_h" => cfg.projection.s_h = num(value)?,
        "projection.s_w" => cfg.projection.s_w = num(value)?,
        "projection.f_up_deg" => cfg.projection.f_up = num::<f64>(value)?.to_radians(),
        "projection.f_down_deg" => cfg.projection.f_down = num::<f64>(value)?.to_radians(),
        "ground.f_th1" => cfg.ground.f_th1 = num(value)?,
        "ground.f_th2" => cfg.ground.f_th2 = num(value)?,
        "ground.p_th" => cfg.ground.p_th = num(value)?,
        "ground.n_sectors" => cfg.ground.n_sectors = num(value)?,
        "ground.ransac_iters" => cfg.ground.ransac_iters = num(value)?,
        "ground.ransac_inlier_th" => cfg.ground.ransac_inlier_th = num(value)?,
        "ground.min_samples" => cfg.ground.min_samples = num(value)?,
        "cluster.theta_deg" => cfg.cluster.theta = num::<f64>(value)?.to_radians(),
        "cluster.window_h" => cfg.cluster.window_h = num(value)?,
        "cluster.window_w" => cfg.cluster.window_w = num(value)?,
        "cluster.min_cluster_points" => cfg.cluster.min_cluster_points = num(value)?,
        "proposal.n_points" => cfg.proposal.n_points = num(value)?,
        "proposal.max_range" => cfg.proposal.max_range = num(value)?,
        "proposal.voxel_az_deg" => cfg.proposal.res_azimuth = num::<f64>(value)?.to_radians(),
        "proposal.voxel_el_deg" => cfg.proposal.res_elevation = num::<f64>(value)?.to_radians(),
        "proposal.voxel_range_m" => cfg.proposal.res_range = num(value)?,
        "energy.t" => cfg.energy.t = num(value)?,
        "energy.gamma_c" => cfg.energy.gamma_c = num(value)?,
        "energy.gamma_b" => cfg.energy.gamma_b = num(value)?,
        "train.lr" => cfg.train.lr = num(value)?,
        "train.beta1" => cfg.train.beta1 = num(value)?,
        "train.beta2" => cfg.train.beta2 = num(value)?,
        "train.epochs" => cfg.train.epochs = num(value)?,
        "train.lambda" => cfg.train.lambda = num(value)?,
        "train.gamma_corner" => cfg.train.gamma_corner = num(value)?,
        "train.m_id" => cfg.train.m_id = num(value)?,
        "train.m_ood" => cfg.train.m_ood = num(value)?,
        "train.temperature" => cfg.train.temperature = num(value)?,
        "train.batch_size" => cfg.train.batch_size = num(value)?,
        "train.seed" => cfg.train.seed = num(value)?,
        "weights.classifier" => cfg.classifier_weights = Some(value.to_string()),
        "weights.boxnet" => cfg.boxnet_weights = Some(value.to_string()),
        "eval.ground_label_ids" => {
            let ids: Result<Vec<u32>, _> =
                value.split(',').map(|s| s.trim().parse::<u32>()).collect();
            cfg.ground_label_ids = ids.map_err(|_| KeyError::BadValue)?;
        }
        _ => return Err(KeyError::Unknown),
    }
    Ok(())
}

/// Canonical serialization: one sorted `key = value` pair per line.
pub fn serialize_config(cfg: &PipelineConfig) -> String {
    let mut pairs: Vec<(String, String)> = vec![
        ("projection.s_h".into(), cfg.projection.s_h.to_string()),
        ("projection.s_w".into(), cfg.projection.s_w.to_string()),
        (
            "projection.f_up_deg".into(),
            cfg.projection.f_up.to_degrees().to_string(),
        ),
        (
            "projection.f_down_deg".into(),
            cfg.projection.f_down.to_degrees().to_string(),
        ),
        ("ground.f_th1".into(), cfg.ground.f_th1.to_string()),
        ("ground.f_th2".into(), cfg.ground.f_th2.to_string()),
        ("ground.p_th".into(), cfg.ground.p_th.to_string()),
        ("ground.n_sectors".into(), cfg.ground.n_sectors.to_string()),
        (
            "ground.ransac_iters".into(),
            cfg.ground.ransac_iters.to_string(),
        ),
        (
            "ground.ransac_inlier_th".into(),
            cfg.ground.ransac_inlier_th.to_string(),
        ),
        (
            "ground.min_samples".into(),
            cfg.ground.min_samples.to_string(),
        ),
        (
            "cluster.theta_deg".into(),
            cfg.cluster.theta.to_degrees().to_string(),
        ),
        ("cluster.window_h".into(), cfg.cluster.window_h.to_string()),
        ("cluster.window_w".into(), cfg.cluster.window_w.to_string()),
        (
            "cluster.min_cluster_points".into(),
            cfg.cluster.min_cluster_points.to_string(),
        ),
        ("proposal.n_points".into(), cfg.proposal.n_points.to_string()),
        ("proposal.max_range".into(), cfg.proposal.max_range.to_string()),
        (
            "proposal.voxel_az_deg".into(),
            cfg.proposal.res_azimuth.to_degrees().to_string(),
        ),
        (
            "proposal.voxel_el_deg".into(),
            cfg.proposal.res_elevation.to_degrees().to_string(),
        ),
        (
            "proposal.voxel_range_m".into(),
            cfg.proposal.res_range.to_string(),
        ),
        ("energy.t".into(), cfg.energy.t.to_string()),
        ("energy.gamma_c".into(), cfg.energy.gamma_c.to_string()),
        ("energy.gamma_b".into(), cfg.energy.gamma_b.to_string()),
        ("train.lr".into(), cfg.train.lr.to_string()),
        ("train.beta1".into(), cfg.train.beta1.to_string()),
        ("train.beta2".into(), cfg.train.beta2.to_string()),
        ("train.epochs".into(), cfg.train.epochs.to_string()),
        ("train.lambda".into(), cfg.train.lambda.to_string()),
        (
            "train.gamma_corner".into(),
            cfg.train.gamma_corner.to_string(),
        ),
        ("train.m_id".into(), cfg.train.m_id.to_string()),
        ("train.m_ood".into(), cfg.train.m_ood.to_string()),
        (
            "train.temperature".into(),
            cfg.train.temperature.to_string(),
        ),
        (
            "train.batch_size".into(),
            cfg.train.batch_size.to_string(),
        ),
        ("train.seed".into(), cfg.train.seed.to_string()),
        (
            "eval.ground_label_ids".into(),
            cfg.ground_label_ids
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        ),
    ];
    if let Some(p) = &cfg.classifier_weights {
        pairs.push(("weights.classifier".into(), p.clone()));
    }
    if let Some(p) = &cfg.boxnet_weights {
        pairs.push(("weights.boxnet".into(), p.clone()));
    }
    pairs.sort();
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}

/// FNV-1a hash of the canonical serialization; recorded in checkpoints.
pub fn config_hash(cfg: &PipelineConfig) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in serialize_config(cfg).bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    format!("{h:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        PipelineConfig::default().validate().unwrap();
    }

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = parse_config("# just a comment\n\n").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
    }

    #[test]
    fn overrides_apply() {
        let cfg = parse_config(
            "ground.p_th = 0.35\ncluster.theta_deg = 12.5\nprojection.s_w = 512\nweights.classifier = /tmp/c.pcrd\n",
        )
        .unwrap();
        assert!((cfg.ground.p_th - 0.35).abs() < 1e-12);
        assert!((cfg.cluster.theta.to_degrees() - 12.5).abs() < 1e-9);
        assert_eq!(cfg.projection.s_w, 512);
        assert_eq!(cfg.classifier_weights.as_deref(), Some("/tmp/c.pcrd"));
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        match parse_config("\nground.nope = 1\n") {
            Err(ConfigError::UnknownKey { line, key }) => {
                assert_eq!(line, 2);
                assert_eq!(key, "ground.nope");
            }
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn bad_value_is_rejected() {
        assert!(matches!(
            parse_config("ground.p_th = fast\n"),
            Err(ConfigError::BadValue { .. })
        ));
    }

    #[test]
    fn invalid_combinations_are_rejected() {
        // 30 sectors does not divide 2048 columns.
        assert!(matches!(
            parse_config("ground.n_sectors = 30\n"),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn serialize_parse_is_idempotent() {
        let text = "ground.p_th = 0.25\nprojection.s_h = 32\nprojection.s_w = 512\ncluster.window_w = 4\neval.ground_label_ids = 40,72\n";
        let once = serialize_config(&parse_config(text).unwrap());
        let twice = serialize_config(&parse_config(&once).unwrap());
        assert_eq!(once, twice);
    }

    #[test]
    fn hash_tracks_content() {
        let a = config_hash(&PipelineConfig::default());
        let b = config_hash(&parse_config("ground.p_th = 0.3\n").unwrap());
        assert_ne!(a, b);
        assert_eq!(a, config_hash(&PipelineConfig::default()));
    }
}
