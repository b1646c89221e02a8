//! Spherical projection of an unordered LiDAR point list onto the organized
//! H×W range-image representation used by every downstream stage.
//!
//! Columns follow azimuth (full-quadrant atan2, so rear points do not alias
//! to the front), rows follow elevation mapped so the top beam (+f_up) lands
//! on row 0 and the bottom beam (-f_down) on the last row. When several
//! points fall into one cell the nearest return wins; untouched cells are
//! invalid and carry zeros in every channel.

use std::f64::consts::PI;

use thiserror::Error;

use crate::grid::Grid;
use crate::types::Point3;

#[derive(Debug, Error, PartialEq)]
pub enum ProjectionError {
    #[error("point {index} has zero norm")]
    ZeroNormPoint { index: usize },
    #[error("point {index} has a non-finite coordinate")]
    NonFinitePoint { index: usize },
    #[error("invalid projection config: {0}")]
    BadConfig(String),
}

/// Geometry of the projection image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionConfig {
    /// Row count (beam count).
    pub s_h: usize,
    /// Column count.
    pub s_w: usize,
    /// Vertical field of view above the horizontal plane (radians, >= 0).
    pub f_up: f64,
    /// Vertical field of view below the horizontal plane (radians, >= 0).
    pub f_down: f64,
}

impl ProjectionConfig {
    pub fn new(s_h: usize, s_w: usize, f_up: f64, f_down: f64) -> Result<Self, ProjectionError> {
        let cfg = Self {
            s_h,
            s_w,
            f_up,
            f_down,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// HDL-64E-style defaults: 64x2048, +3 deg up, -25 deg down.
    pub fn kitti_hdl64e() -> Self {
        Self {
            s_h: 64,
            s_w: 2048,
            f_up: 3.0_f64.to_radians(),
            f_down: 25.0_f64.to_radians(),
        }
    }

    /// Total vertical field of view.
    #[inline]
    pub fn f(&self) -> f64 {
        self.f_up + self.f_down
    }

    pub fn validate(&self) -> Result<(), ProjectionError> {
        if self.s_h < 2 {
            return Err(ProjectionError::BadConfig("s_h must be >= 2".into()));
        }
        if self.s_w < 4 {
            return Err(ProjectionError::BadConfig("s_w must be >= 4".into()));
        }
        if self.f_up < 0.0 || self.f_down < 0.0 || self.f() <= 0.0 {
            return Err(ProjectionError::BadConfig(
                "vertical FOV must satisfy f_up >= 0, f_down >= 0, f_up + f_down > 0".into(),
            ));
        }
        Ok(())
    }

    /// Column index for azimuth `theta` (radians in (-pi, pi]), clamped.
    #[inline]
    pub fn col_of_azimuth(&self, theta: f64) -> usize {
        let u = 0.5 * (1.0 - theta / PI) * self.s_w as f64;
        (u.floor() as i64).clamp(0, self.s_w as i64 - 1) as usize
    }

    /// Row index for elevation `el` (radians), clamped.
    #[inline]
    pub fn row_of_elevation(&self, el: f64) -> usize {
        let v = (self.f_up - el) / self.f() * self.s_h as f64;
        (v.floor() as i64).clamp(0, self.s_h as i64 - 1) as usize
    }

    /// Azimuth of a column center.
    #[inline]
    pub fn azimuth_of_col(&self, c: usize) -> f64 {
        PI * (1.0 - 2.0 * (c as f64 + 0.5) / self.s_w as f64)
    }

    /// Elevation of a row center.
    #[inline]
    pub fn elevation_of_row(&self, r: usize) -> f64 {
        self.f_up - (r as f64 + 0.5) / self.s_h as f64 * self.f()
    }

    /// Angular increment between adjacent columns.
    #[inline]
    pub fn azimuth_step(&self) -> f64 {
        2.0 * PI / self.s_w as f64
    }

    /// Angular increment between adjacent rows.
    #[inline]
    pub fn elevation_step(&self) -> f64 {
        self.f() / self.s_h as f64
    }
}

/// Organized multi-channel projection of one scan.
///
/// `r` is the distance to the Z-axis, sqrt(x^2 + y^2), not the Euclidean
/// range. Invalid cells hold zero in every channel.
#[derive(Debug, Clone)]
pub struct OrganizedCloud {
    pub config: ProjectionConfig,
    x: Grid<f64>,
    y: Grid<f64>,
    z: Grid<f64>,
    r: Grid<f64>,
    valid: Grid<bool>,
}

impl OrganizedCloud {
    /// All channels: (X, Y, Z, R, valid).
    pub fn channels(&self) -> (&Grid<f64>, &Grid<f64>, &Grid<f64>, &Grid<f64>, &Grid<bool>) {
        (&self.x, &self.y, &self.z, &self.r, &self.valid)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.config.s_h
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.config.s_w
    }

    #[inline]
    pub fn is_valid(&self, r: usize, c: usize) -> bool {
        self.valid[(r, c)]
    }

    pub fn valid_mask(&self) -> &Grid<bool> {
        &self.valid
    }

    #[inline]
    pub fn point(&self, r: usize, c: usize) -> Point3 {
        Point3::new(self.x[(r, c)], self.y[(r, c)], self.z[(r, c)])
    }

    /// Euclidean range of the stored point (0 for invalid cells).
    #[inline]
    pub fn range(&self, r: usize, c: usize) -> f64 {
        let p = self.point(r, c);
        p.norm()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Points stored in valid cells, row-major.
    pub fn valid_points(&self) -> Vec<Point3> {
        let mut out = Vec::with_capacity(self.valid_count());
        for r in 0..self.rows() {
            for c in 0..self.cols() {
                if self.valid[(r, c)] {
                    out.push(self.point(r, c));
                }
            }
        }
        out
    }
}

/// Projects an unordered point list onto the organized image.
///
/// Rejects the whole scan if any point is non-finite or has zero norm.
/// Cell collisions keep the point with the smallest Euclidean range.
pub fn project_cloud(
    points: &[Point3],
    cfg: &ProjectionConfig,
) -> Result<OrganizedCloud, ProjectionError> {
    cfg.validate()?;
    let (h, w) = (cfg.s_h, cfg.s_w);
    let mut cloud = OrganizedCloud {
        config: *cfg,
        x: Grid::filled(h, w, 0.0),
        y: Grid::filled(h, w, 0.0),
        z: Grid::filled(h, w, 0.0),
        r: Grid::filled(h, w, 0.0),
        valid: Grid::filled(h, w, false),
    };
    // Euclidean range of the currently stored point, for collision handling.
    let mut best_range = Grid::filled(h, w, f64::INFINITY);

    for (i, p) in points.iter().enumerate() {
        if !p.is_finite() {
            return Err(ProjectionError::NonFinitePoint { index: i });
        }
        let range = p.norm();
        if range <= 0.0 {
            return Err(ProjectionError::ZeroNormPoint { index: i });
        }
        let theta = p.y.atan2(p.x);
        let el = (p.z / range).asin();
        let c = cfg.col_of_azimuth(theta);
        let r = cfg.row_of_elevation(el);
        if range < best_range[(r, c)] {
            best_range[(r, c)] = range;
            cloud.x[(r, c)] = p.x;
            cloud.y[(r, c)] = p.y;
            cloud.z[(r, c)] = p.z;
            cloud.r[(r, c)] = p.norm_xy();
            cloud.valid[(r, c)] = true;
        }
    }
    Ok(cloud)
}
