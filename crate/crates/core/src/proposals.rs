//! Turns clusters into fixed-size, canonicalized network inputs.
//!
//! Each cluster becomes a proposal holding exactly `n_points` raw points
//! (random subsample or duplicate-padded), its mean point, the canonical
//! (mean-subtracted, yaw-aligned) copy of those points, and the spherical
//! voxel coordinate of the mean. Canonicalization deliberately removes the
//! observation angle and distance; the voxel coordinate carries them back
//! into the networks as a separate feature.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::clustering::ClusterLabels;
use crate::projection::OrganizedCloud;
use crate::types::Point3;

#[derive(Debug, Error, PartialEq)]
pub enum ProposalError {
    #[error("cannot voxelize a zero-norm mean point")]
    ZeroNormMean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalConfig {
    /// Fixed sample size fed to the networks.
    pub n_points: usize,
    /// Proposals with mean range beyond this are discarded (meters).
    pub max_range: f64,
    /// Azimuth voxel resolution (radians).
    pub res_azimuth: f64,
    /// Elevation voxel resolution (radians).
    pub res_elevation: f64,
    /// Range voxel resolution (meters).
    pub res_range: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            n_points: 64,
            max_range: 60.0,
            res_azimuth: 10.0_f64.to_radians(),
            res_elevation: 10.0_f64.to_radians(),
            res_range: 1.0,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_points < 16 {
            return Err("n_points must be >= 16".into());
        }
        if !(self.res_azimuth > 0.0 && self.res_elevation > 0.0 && self.res_range > 0.0) {
            return Err("voxel resolutions must be positive".into());
        }
        if self.max_range <= 0.0 {
            return Err("max_range must be positive".into());
        }
        Ok(())
    }

    pub fn azimuth_cells(&self) -> usize {
        (2.0 * PI / self.res_azimuth).ceil() as usize
    }

    pub fn elevation_cells(&self) -> usize {
        (PI / self.res_elevation).ceil() as usize
    }
}

/// Spherical voxel of a proposal mean: grid indices plus real cell centers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelCoord {
    pub azimuth_idx: usize,
    pub elevation_idx: usize,
    pub range_idx: usize,
    pub azimuth_center: f64,
    pub elevation_center: f64,
    pub range_center: f64,
}

impl VoxelCoord {
    /// Normalized cell-center features consumed by the location encoder.
    pub fn features(&self, cfg: &ProposalConfig) -> [f64; 3] {
        [
            self.azimuth_center / PI,
            self.elevation_center / FRAC_PI_2,
            self.range_center / cfg.max_range,
        ]
    }
}

/// One cluster prepared for the networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    /// The sampled raw points (exactly `n_points`).
    pub points: Vec<Point3>,
    /// Arithmetic mean of `points`.
    pub mean: Point3,
    /// Euclidean distance of the mean to the origin.
    pub r_m: f64,
    /// Mean-subtracted points rotated so the mean azimuth maps to +x.
    pub canonical_points: Vec<Point3>,
    pub voxel: VoxelCoord,
    pub cluster_id: u32,
    /// Cluster size before resampling.
    pub source_count: usize,
}

impl Proposal {
    /// Yaw of the observation direction removed by canonicalization.
    pub fn view_yaw(&self) -> f64 {
        self.mean.y.atan2(self.mean.x)
    }
}

/// Subtracts the mean and rotates about the vertical axis so the mean's
/// azimuth maps to +x. A rigid transform: pairwise distances are preserved.
pub fn canonicalize(points: &[Point3], mean: Point3) -> Vec<Point3> {
    let yaw = -mean.y.atan2(mean.x);
    points.iter().map(|p| (*p - mean).rotate_z(yaw)).collect()
}

/// Spherical voxelization of a mean point. Exact cell-boundary values land
/// in the higher cell (floor of an exact integer); azimuth pi wraps to cell 0.
pub fn voxelize_mean(mean: Point3, cfg: &ProposalConfig) -> Result<VoxelCoord, ProposalError> {
    let r_m = mean.norm();
    if r_m <= 0.0 {
        return Err(ProposalError::ZeroNormMean);
    }
    let azimuth = mean.y.atan2(mean.x);
    let elevation = (mean.z / r_m).asin();

    let n_az = cfg.azimuth_cells();
    let n_el = cfg.elevation_cells();
    let azimuth_idx = (((azimuth + PI) / cfg.res_azimuth).floor() as usize) % n_az;
    let elevation_idx =
        (((elevation + FRAC_PI_2) / cfg.res_elevation).floor() as usize).min(n_el - 1);
    let range_idx = (r_m / cfg.res_range).floor() as usize;

    Ok(VoxelCoord {
        azimuth_idx,
        elevation_idx,
        range_idx,
        azimuth_center: -PI + (azimuth_idx as f64 + 0.5) * cfg.res_azimuth,
        elevation_center: -FRAC_PI_2 + (elevation_idx as f64 + 0.5) * cfg.res_elevation,
        range_center: (range_idx as f64 + 0.5) * cfg.res_range,
    })
}

/// Samples exactly `n_points` from a cluster: a uniform subset without
/// replacement when the cluster is larger, or every point once plus extra
/// duplicate draws when it is smaller.
fn resample(points: &[Point3], m: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    let n = points.len();
    if n == m {
        return points.to_vec();
    }
    if n > m {
        // Partial Fisher-Yates over an index vector.
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..m {
            let j = rng.random_range(i..n);
            idx.swap(i, j);
        }
        return idx[..m].iter().map(|&i| points[i]).collect();
    }
    let mut out = points.to_vec();
    for _ in n..m {
        out.push(points[rng.random_range(0..n)]);
    }
    out
}

/// Builds one proposal from raw cluster points. Returns `None` when the
/// cluster is empty or its mean lies beyond `max_range`.
pub fn build_proposal(
    cluster_points: &[Point3],
    cluster_id: u32,
    cfg: &ProposalConfig,
    seed: u64,
) -> Option<Proposal> {
    if cluster_points.is_empty() {
        return None;
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (cluster_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let points = resample(cluster_points, cfg.n_points, &mut rng);
    let inv = 1.0 / points.len() as f64;
    let mut mean = Point3::default();
    for p in &points {
        mean = mean + *p;
    }
    mean = mean * inv;
    let r_m = mean.norm();
    if r_m > cfg.max_range {
        return None;
    }
    let voxel = voxelize_mean(mean, cfg).ok()?;
    let canonical_points = canonicalize(&points, mean);
    Some(Proposal {
        points,
        mean,
        r_m,
        canonical_points,
        voxel,
        cluster_id,
        source_count: cluster_points.len(),
    })
}

/// One proposal per cluster whose mean lies within `max_range`.
pub fn extract_proposals(
    cloud: &OrganizedCloud,
    labels: &ClusterLabels,
    cfg: &ProposalConfig,
    seed: u64,
) -> Vec<Proposal> {
    let mut clusters: Vec<Vec<Point3>> = vec![Vec::new(); labels.n_clusters()];
    for r in 0..cloud.rows() {
        for c in 0..cloud.cols() {
            let id = labels.label(r, c);
            if id > 0 {
                clusters[id as usize - 1].push(cloud.point(r, c));
            }
        }
    }
    clusters
        .iter()
        .enumerate()
        .filter_map(|(i, pts)| build_proposal(pts, i as u32 + 1, cfg, seed))
        .collect()
}

/// Debug dump: one text line per proposal (cluster id, pre-sampling size,
/// mean, voxel indices).
pub fn dump_lines(proposals: &[Proposal]) -> String {
    let mut out = String::new();
    for p in proposals {
        out.push_str(&format!(
            "{} {} {:.6} {:.6} {:.6} {} {} {}\n",
            p.cluster_id,
            p.source_count,
            p.mean.x,
            p.mean.y,
            p.mean.z,
            p.voxel.azimuth_idx,
            p.voxel.elevation_idx,
            p.voxel.range_idx
        ));
    }
    out
}

/// Binary point payload companion to `dump_lines`: for each proposal in
/// order, `n_points` little-endian f32 (x, y, z) triples.
pub fn write_points_payload<W: Write>(w: &mut W, proposals: &[Proposal]) -> std::io::Result<()> {
    for p in proposals {
        for pt in &p.points {
            w.write_all(&(pt.x as f32).to_le_bytes())?;
            w.write_all(&(pt.y as f32).to_le_bytes())?;
            w.write_all(&(pt.z as f32).to_le_bytes())?;
        }
    }
    Ok(())
}
