//! BFS depth clustering over the non-ground cells of the range image.
//!
//! Two neighboring returns merge into one cluster when the angle beta =
//! atan2(d2*sin(g), d1 - d2*cos(g)) exceeds a threshold, where d1 >= d2 are
//! their Euclidean ranges and g the angular separation of the two beams.
//! Large beta means the two returns lie roughly on a surface seen at a
//! shallow depth gap; small beta means a depth discontinuity.
//!
//! The search window spans several cells per axis to bridge holes from
//! missing returns. Columns wrap around the azimuth seam, rows do not.

use std::collections::VecDeque;

use thiserror::Error;

use crate::grid::Grid;
use crate::ground::GroundMask;
use crate::projection::OrganizedCloud;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("merge angle needs d2 > 0, got {0}")]
    NonPositiveRange(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterConfig {
    /// Merge-angle threshold (radians, in (0, pi/2)).
    pub theta: f64,
    /// Row window half-extent (cells).
    pub window_h: usize,
    /// Column window half-extent (cells).
    pub window_w: usize,
    /// Clusters smaller than this are discarded.
    pub min_cluster_points: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            theta: 10.0_f64.to_radians(),
            window_h: 2,
            window_w: 3,
            min_cluster_points: 10,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.theta > 0.0 && self.theta < std::f64::consts::FRAC_PI_2) {
            return Err("theta must lie in (0, pi/2)".into());
        }
        if self.window_h == 0 || self.window_w == 0 {
            return Err("search window extents must be >= 1".into());
        }
        Ok(())
    }
}

/// Per-cell cluster ids; 0 marks unlabeled/ground/invalid cells,
/// ids 1..=n_clusters are contiguous in first-seen order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterLabels {
    labels: Grid<u32>,
    n_clusters: usize,
}

impl ClusterLabels {
    #[inline]
    pub fn label(&self, r: usize, c: usize) -> u32 {
        self.labels[(r, c)]
    }

    pub fn grid(&self) -> &Grid<u32> {
        &self.labels
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }
}

/// Closed-form merge angle between two returns separated by `alpha` radians.
/// Result lies in (0, pi).
pub fn merge_angle(d1: f64, d2: f64, alpha: f64) -> Result<f64, ClusterError> {
    if d2 <= 0.0 {
        return Err(ClusterError::NonPositiveRange(d2));
    }
    debug_assert!(d1 >= d2);
    Ok((d2 * alpha.sin()).atan2(d1 - d2 * alpha.cos()))
}

/// Threshold form of the merge criterion: beta > theta without the atan2.
///
/// With a = d2*sin(g) > 0 and b = d1 - d2*cos(g), beta = atan2(a, b) exceeds
/// theta exactly when a*cos(theta) - b*sin(theta) > 0 (the sign of
/// sin(beta - theta) for beta in (0, pi), theta in (0, pi/2)).
#[inline]
pub fn merge_exceeds(
    d1: f64,
    d2: f64,
    sin_gamma: f64,
    cos_gamma: f64,
    sin_theta: f64,
    cos_theta: f64,
) -> bool {
    let a = d2 * sin_gamma;
    let b = d1 - d2 * cos_gamma;
    a * cos_theta - b * sin_theta > 0.0
}

/// Angular separation of beams offset by (di, dj) cells, given the grid's
/// per-axis angular increments. Axis moves reduce to step * gap.
#[inline]
pub fn beam_separation(di: usize, dj: usize, alpha_v: f64, alpha_h: f64) -> f64 {
    (di as f64 * alpha_v).hypot(dj as f64 * alpha_h)
}

/// Labels the valid non-ground cells of a scan by BFS depth clustering.
pub fn cluster_depth(
    cloud: &OrganizedCloud,
    ground: &GroundMask,
    cfg: &ClusterConfig,
) -> ClusterLabels {
    let (rows, cols) = (cloud.rows(), cloud.cols());
    assert_eq!(ground.grid().shape(), (rows, cols));

    // Euclidean ranges; 0 marks cells excluded from clustering.
    let mut range = Grid::filled(rows, cols, 0.0f64);
    for r in 0..rows {
        for c in 0..cols {
            if cloud.is_valid(r, c) && !ground.is_ground(r, c) {
                range[(r, c)] = cloud.range(r, c);
            }
        }
    }

    let alpha_v = cloud.config.elevation_step();
    let alpha_h = cloud.config.azimuth_step();
    let (sin_t, cos_t) = cfg.theta.sin_cos();

    // Per-offset beam separation trig, excluding (0, 0).
    let mut offsets = Vec::new();
    for di in -(cfg.window_h as i64)..=cfg.window_h as i64 {
        for dj in -(cfg.window_w as i64)..=cfg.window_w as i64 {
            if di == 0 && dj == 0 {
                continue;
            }
            let gamma = beam_separation(di.unsigned_abs() as usize, dj.unsigned_abs() as usize, alpha_v, alpha_h);
            let (sg, cg) = gamma.sin_cos();
            offsets.push((di, dj, sg, cg));
        }
    }

    let mut labels = Grid::filled(rows, cols, 0u32);
    let mut clusters: Vec<Vec<(usize, usize)>> = Vec::new();
    let mut queue = VecDeque::new();

    for seed_r in 0..rows {
        for seed_c in 0..cols {
            if range[(seed_r, seed_c)] == 0.0 || labels[(seed_r, seed_c)] != 0 {
                continue;
            }
            let id = clusters.len() as u32 + 1;
            let mut cells = Vec::new();
            labels[(seed_r, seed_c)] = id;
            queue.push_back((seed_r, seed_c));
            while let Some((r, c)) = queue.pop_front() {
                cells.push((r, c));
                let d_here = range[(r, c)];
                for &(di, dj, sg, cg) in &offsets {
                    let rn = r as i64 + di;
                    if rn < 0 || rn >= rows as i64 {
                        continue;
                    }
                    let rn = rn as usize;
                    let cn = (c as i64 + dj).rem_euclid(cols as i64) as usize;
                    if labels[(rn, cn)] != 0 {
                        continue;
                    }
                    let d_there = range[(rn, cn)];
                    if d_there == 0.0 {
                        continue;
                    }
                    let (d1, d2) = if d_here >= d_there {
                        (d_here, d_there)
                    } else {
                        (d_there, d_here)
                    };
                    if merge_exceeds(d1, d2, sg, cg, sin_t, cos_t) {
                        labels[(rn, cn)] = id;
                        queue.push_back((rn, cn));
                    }
                }
            }
            clusters.push(cells);
        }
    }

    // Drop undersized clusters and renumber survivors contiguously,
    // preserving first-seen order.
    let mut next = 0u32;
    for cells in &clusters {
        let new_id = if cells.len() >= cfg.min_cluster_points {
            next += 1;
            next
        } else {
            0
        };
        for &(r, c) in cells {
            labels[(r, c)] = new_id;
        }
    }

    ClusterLabels {
        labels,
        n_clusters: next as usize,
    }
}
