//! CPU-only 3D road-user detection for LiDAR point clouds.
//!
//! The pipeline organizes a scan into a range image, removes the ground with
//! filter-sampled per-sector RANSAC planes, clusters the remaining cells by
//! depth, and classifies each cluster with small point-set networks gated by
//! energy-based in-distribution checks. Training, evaluation and benchmark
//! tooling live alongside the inference path.

pub mod clustering;
pub mod config;
pub mod eval;
pub mod grid;
pub mod ground;
pub mod kitti;
pub mod networks;
pub mod nn;
pub mod pipeline;
pub mod projection;
pub mod proposals;
pub mod synth;
pub mod training;
pub mod types;

pub use clustering::{cluster_depth, merge_angle, ClusterConfig, ClusterLabels};
pub use config::{parse_config, serialize_config, PipelineConfig};
pub use eval::{average_precision, iou3d, ood_separability, seg_metrics, ApInterpolation};
pub use grid::Grid;
pub use ground::{segment_ground, GroundConfig, GroundMask, PlaneModel};
pub use networks::{
    calibrate_threshold, decode_box, energy_score, id_passthrough, BoxCodec, BoxNet, BoxPrediction,
    ClassifierNet, Detection, EnergyConfig,
};
pub use pipeline::{detect_scan, DetectorWeights, ScanResult, StageCounts};
pub use projection::{project_cloud, OrganizedCloud, ProjectionConfig};
pub use proposals::{
    build_proposal, canonicalize, extract_proposals, voxelize_mean, Proposal, ProposalConfig,
    VoxelCoord,
};
pub use training::{encode_box_targets, synth_dataset, DatasetConfig, TrainConfig};
pub use types::{normalize_angle, Box3, Point3};
