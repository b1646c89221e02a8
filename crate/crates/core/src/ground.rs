//! Ground segmentation on the organized range image.
//!
//! Two small derivative filters run over the Z and R channels to sample
//! likely-ground cells cheaply, RANSAC fits one plane per azimuthal sector
//! on those samples only, and the final mask thresholds point-to-plane
//! distance for every valid cell.
//!
//! The vertical filter estimates the local slope dZ/dR, the horizontal
//! filter the range derivative along a scan row; flat ground keeps both
//! small, while walls, poles and object sides trip one of them.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::grid::Grid;
use crate::projection::OrganizedCloud;
use crate::types::Point3;

/// Denominator guard for the slope filter: |S_v * R| below this marks the
/// cell non-computable instead of producing huge ratios.
const SLOPE_DENOM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundConfig {
    /// Vertical slope threshold on dZ/dR (dimensionless).
    pub f_th1: f64,
    /// Horizontal range-derivative threshold (meters).
    pub f_th2: f64,
    /// Point-to-plane distance threshold for the final mask (meters).
    pub p_th: f64,
    /// Azimuthal sector count; must divide the image width.
    pub n_sectors: usize,
    /// RANSAC iterations per sector.
    pub ransac_iters: usize,
    /// RANSAC inlier distance (meters).
    pub ransac_inlier_th: f64,
    /// Minimum sampled points per sector for a fit attempt.
    pub min_samples: usize,
}

impl Default for GroundConfig {
    fn default() -> Self {
        Self {
            f_th1: 0.25,
            f_th2: 0.5,
            p_th: 0.2,
            n_sectors: 32,
            ransac_iters: 25,
            ransac_inlier_th: 0.2,
            min_samples: 40,
        }
    }
}

impl GroundConfig {
    pub fn validate(&self, s_w: usize) -> Result<(), String> {
        if !(self.f_th1 > 0.0 && self.f_th2 > 0.0 && self.p_th > 0.0 && self.ransac_inlier_th > 0.0)
        {
            return Err("ground thresholds must be positive".into());
        }
        if self.n_sectors == 0 || s_w % self.n_sectors != 0 {
            return Err(format!(
                "n_sectors ({}) must be >= 1 and divide the image width ({})",
                self.n_sectors, s_w
            ));
        }
        if self.ransac_iters == 0 {
            return Err("ransac_iters must be >= 1".into());
        }
        Ok(())
    }

    #[inline]
    pub fn sector_of_col(&self, c: usize, s_w: usize) -> usize {
        c * self.n_sectors / s_w
    }
}

/// Plane a1*x + a2*y + a3*z + a4 = 0 fitted to one sector,
/// normalized so a1^2 + a2^2 + a3^2 = 1 and a3 >= 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneModel {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
    pub sector: usize,
    pub inlier_count: usize,
}

impl PlaneModel {
    /// Signed point-to-plane distance; tolerates unnormalized coefficients.
    #[inline]
    pub fn distance(&self, p: Point3) -> f64 {
        let norm = (self.a1 * self.a1 + self.a2 * self.a2 + self.a3 * self.a3).sqrt();
        (self.a1 * p.x + self.a2 * p.y + self.a3 * p.z + self.a4) / norm
    }

    fn normalized(mut self) -> Self {
        let n = (self.a1 * self.a1 + self.a2 * self.a2 + self.a3 * self.a3).sqrt();
        self.a1 /= n;
        self.a2 /= n;
        self.a3 /= n;
        self.a4 /= n;
        if self.a3 < 0.0 {
            self.a1 = -self.a1;
            self.a2 = -self.a2;
            self.a3 = -self.a3;
            self.a4 = -self.a4;
        }
        self
    }
}

/// Per-cell ground labeling; true only on valid cells.
#[derive(Debug, Clone)]
pub struct GroundMask {
    mask: Grid<bool>,
}

impl GroundMask {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            mask: Grid::filled(rows, cols, false),
        }
    }

    pub fn from_grid(mask: Grid<bool>) -> Self {
        Self { mask }
    }

    #[inline]
    pub fn is_ground(&self, r: usize, c: usize) -> bool {
        self.mask[(r, c)]
    }

    pub fn grid(&self) -> &Grid<bool> {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&v| v).count()
    }
}

/// Filter responses; `slope` is dZ/dR, `horiz` the range derivative along a
/// row. A cell participates in sampling only where both are computable.
#[derive(Debug, Clone)]
pub struct NormalProxies {
    pub slope: Grid<f64>,
    pub slope_ok: Grid<bool>,
    pub horiz: Grid<f64>,
    pub horiz_ok: Grid<bool>,
}

impl NormalProxies {
    #[inline]
    pub fn computable(&self, r: usize, c: usize) -> bool {
        self.slope_ok[(r, c)] && self.horiz_ok[(r, c)]
    }
}

/// Runs both derivative filters.
///
/// The vertical kernel [[2,1],[-2,-1]] is anchored so the output cell is its
/// top-left tap; the horizontal kernel [1,2,-2,-1] is anchored on its second
/// tap. Columns wrap around the azimuth seam; rows do not wrap.
pub fn normal_proxies(r_ch: &Grid<f64>, z_ch: &Grid<f64>, valid: &Grid<bool>) -> NormalProxies {
    let (rows, cols) = r_ch.shape();
    assert_eq!(z_ch.shape(), (rows, cols));
    assert_eq!(valid.shape(), (rows, cols));

    let mut out = NormalProxies {
        slope: Grid::filled(rows, cols, 0.0),
        slope_ok: Grid::filled(rows, cols, false),
        horiz: Grid::filled(rows, cols, 0.0),
        horiz_ok: Grid::filled(rows, cols, false),
    };

    let z = z_ch.as_slice();
    let rr = r_ch.as_slice();
    let va = valid.as_slice();
    let slope = out.slope.as_mut_slice();
    let slope_ok = out.slope_ok.as_mut_slice();
    let horiz = out.horiz.as_mut_slice();
    let horiz_ok = out.horiz_ok.as_mut_slice();

    for r in 0..rows {
        let row0 = r * cols;
        let row1 = row0 + cols;
        for c in 0..cols {
            // Columns wrap at the azimuth seam; rows never wrap.
            let c1 = if c + 1 == cols { 0 } else { c + 1 };
            if r + 1 < rows && va[row0 + c] && va[row0 + c1] && va[row1 + c] && va[row1 + c1] {
                let dz = 2.0 * z[row0 + c] + z[row0 + c1] - 2.0 * z[row1 + c] - z[row1 + c1];
                let dr = 2.0 * rr[row0 + c] + rr[row0 + c1] - 2.0 * rr[row1 + c] - rr[row1 + c1];
                if dr.abs() >= SLOPE_DENOM_EPS {
                    slope[row0 + c] = dz / dr;
                    slope_ok[row0 + c] = true;
                }
            }

            let cm1 = if c == 0 { cols - 1 } else { c - 1 };
            let c2 = if c + 2 >= cols { c + 2 - cols } else { c + 2 };
            if va[row0 + cm1] && va[row0 + c] && va[row0 + c1] && va[row0 + c2] {
                horiz[row0 + c] =
                    rr[row0 + cm1] + 2.0 * rr[row0 + c] - 2.0 * rr[row0 + c1] - rr[row0 + c2];
                horiz_ok[row0 + c] = true;
            }
        }
    }
    out
}

/// Thresholds the filter responses and groups passing cells' Cartesian
/// coordinates by azimuthal sector of their column index.
pub fn sample_ground(
    proxies: &NormalProxies,
    cloud: &OrganizedCloud,
    cfg: &GroundConfig,
) -> Vec<Vec<Point3>> {
    let (rows, cols) = (cloud.rows(), cloud.cols());
    let (x_ch, y_ch, z_ch, _, _) = cloud.channels();
    let (x, y, z) = (x_ch.as_slice(), y_ch.as_slice(), z_ch.as_slice());
    let slope = proxies.slope.as_slice();
    let slope_ok = proxies.slope_ok.as_slice();
    let horiz = proxies.horiz.as_slice();
    let horiz_ok = proxies.horiz_ok.as_slice();

    let sector_of: Vec<u32> = (0..cols)
        .map(|c| cfg.sector_of_col(c, cols) as u32)
        .collect();
    let mut sectors =
        vec![Vec::with_capacity(rows * cols / cfg.n_sectors); cfg.n_sectors];
    for r in 0..rows {
        let row = r * cols;
        for c in 0..cols {
            let i = row + c;
            if slope_ok[i]
                && horiz_ok[i]
                && slope[i].abs() <= cfg.f_th1
                && horiz[i].abs() <= cfg.f_th2
            {
                sectors[sector_of[c] as usize].push(Point3::new(x[i], y[i], z[i]));
            }
        }
    }
    sectors
}

/// RANSAC plane fit over one sector's samples.
///
/// Draws 3 non-collinear samples per round, keeps the plane with the most
/// inliers, then refits by least squares on those inliers. Returns `None`
/// when there are fewer than `min_samples` samples or every draw was
/// degenerate; such sectors label nothing as ground.
pub fn fit_plane_ransac(
    samples: &[Point3],
    cfg: &GroundConfig,
    sector: usize,
    rng_seed: u64,
) -> Option<PlaneModel> {
    if samples.len() < cfg.min_samples.max(3) {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed.wrapping_add(sector as u64));
    let n = samples.len();

    // Candidate planes are scored on a strided subset; the filter already
    // made the samples ground-heavy, so a few hundred points rank planes
    // reliably and keep the scoring pass in cache.
    const MAX_SCORING: usize = 512;
    let scoring: Vec<Point3> = if n > MAX_SCORING {
        let stride = n.div_ceil(MAX_SCORING);
        samples.iter().step_by(stride).copied().collect()
    } else {
        samples.to_vec()
    };

    let mut best: Option<(usize, Point3, f64)> = None; // (inliers, normal, a4)
    for _ in 0..cfg.ransac_iters {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        let k = rng.random_range(0..n);
        if i == j || j == k || i == k {
            continue;
        }
        let (p1, p2, p3) = (samples[i], samples[j], samples[k]);
        let normal = (p2 - p1).cross(p3 - p1);
        let nn = normal.norm();
        if nn < 1e-9 {
            continue; // collinear draw
        }
        let normal = normal * (1.0 / nn);
        let a4 = -normal.dot(p1);
        let inliers = scoring
            .iter()
            .filter(|p| (normal.dot(**p) + a4).abs() < cfg.ransac_inlier_th)
            .count();
        if best.as_ref().map_or(true, |(b, _, _)| inliers > *b) {
            best = Some((inliers, normal, a4));
        }
    }

    let (inlier_count, normal, a4) = best?;
    if inlier_count < 3 {
        return None;
    }

    let inliers: Vec<Point3> = samples
        .iter()
        .copied()
        .filter(|p| (normal.dot(*p) + a4).abs() < cfg.ransac_inlier_th)
        .collect();

    let refit = least_squares_plane(&inliers).unwrap_or(PlaneModel {
        a1: normal.x,
        a2: normal.y,
        a3: normal.z,
        a4,
        sector,
        inlier_count,
    });

    Some(
        PlaneModel {
            sector,
            inlier_count: inliers.len(),
            ..refit
        }
        .normalized(),
    )
}

/// Total least squares plane: centroid plus smallest covariance eigenvector.
fn least_squares_plane(points: &[Point3]) -> Option<PlaneModel> {
    if points.len() < 3 {
        return None;
    }
    let inv_n = 1.0 / points.len() as f64;
    let mut centroid = Point3::default();
    for p in points {
        centroid = centroid + *p;
    }
    centroid = centroid * inv_n;

    let mut cov = [0.0f64; 6]; // xx, xy, xz, yy, yz, zz
    for p in points {
        let d = *p - centroid;
        cov[0] += d.x * d.x;
        cov[1] += d.x * d.y;
        cov[2] += d.x * d.z;
        cov[3] += d.y * d.y;
        cov[4] += d.y * d.z;
        cov[5] += d.z * d.z;
    }
    for c in cov.iter_mut() {
        *c *= inv_n;
    }

    let normal = smallest_eigenvector_sym3(cov)?;
    let a4 = -normal.dot(centroid);
    Some(PlaneModel {
        a1: normal.x,
        a2: normal.y,
        a3: normal.z,
        a4,
        sector: 0,
        inlier_count: points.len(),
    })
}

/// Eigenvector of the smallest eigenvalue of a symmetric 3x3 matrix given as
/// [xx, xy, xz, yy, yz, zz]. Analytic (trigonometric) eigenvalues, then the
/// eigenvector from the largest cross product of rows of (A - lambda I).
fn smallest_eigenvector_sym3(m: [f64; 6]) -> Option<Point3> {
    let (a11, a12, a13, a22, a23, a33) = (m[0], m[1], m[2], m[3], m[4], m[5]);
    let q = (a11 + a22 + a33) / 3.0;
    let p1 = a12 * a12 + a13 * a13 + a23 * a23;

    let lambda_min = if p1 < 1e-30 {
        a11.min(a22).min(a33)
    } else {
        let p2 = (a11 - q).powi(2) + (a22 - q).powi(2) + (a33 - q).powi(2) + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        let inv_p = 1.0 / p;
        let b11 = (a11 - q) * inv_p;
        let b12 = a12 * inv_p;
        let b13 = a13 * inv_p;
        let b22 = (a22 - q) * inv_p;
        let b23 = a23 * inv_p;
        let b33 = (a33 - q) * inv_p;
        let half_det = (b11 * b22 * b33 + 2.0 * b12 * b13 * b23
            - b11 * b23 * b23
            - b22 * b13 * b13
            - b33 * b12 * b12)
            / 2.0;
        let phi = half_det.clamp(-1.0, 1.0).acos() / 3.0;
        // Smallest eigenvalue uses phi + 2*pi/3.
        q + 2.0 * p * (phi + 2.0 * std::f64::consts::FRAC_PI_3).cos()
    };

    let r0 = Point3::new(a11 - lambda_min, a12, a13);
    let r1 = Point3::new(a12, a22 - lambda_min, a23);
    let r2 = Point3::new(a13, a23, a33 - lambda_min);
    let c01 = r0.cross(r1);
    let c02 = r0.cross(r2);
    let c12 = r1.cross(r2);
    let mut best = c01;
    if c02.norm() > best.norm() {
        best = c02;
    }
    if c12.norm() > best.norm() {
        best = c12;
    }
    let n = best.norm();
    if n < 1e-20 {
        return None;
    }
    Some(best * (1.0 / n))
}

/// Builds the ground mask from already-fitted sector planes: a valid cell is
/// ground when its distance to its sector's plane is below `p_th`.
pub fn apply_planes(
    cloud: &OrganizedCloud,
    planes: &[Option<PlaneModel>],
    p_th: f64,
    cfg: &GroundConfig,
) -> GroundMask {
    let (rows, cols) = (cloud.rows(), cloud.cols());
    let mut mask = GroundMask::empty(rows, cols);
    let (x_ch, y_ch, z_ch, _, valid) = cloud.channels();
    let (x, y, z, va) = (
        x_ch.as_slice(),
        y_ch.as_slice(),
        z_ch.as_slice(),
        valid.as_slice(),
    );
    let out = mask.mask.as_mut_slice();
    let plane_of: Vec<Option<PlaneModel>> = (0..cols)
        .map(|c| planes.get(cfg.sector_of_col(c, cols)).copied().flatten())
        .collect();
    for r in 0..rows {
        let row = r * cols;
        for c in 0..cols {
            let i = row + c;
            let Some(plane) = plane_of[c] else { continue };
            if va[i] {
                // Coefficients are unit-normalized after fitting.
                let d = plane.a1 * x[i] + plane.a2 * y[i] + plane.a3 * z[i] + plane.a4;
                out[i] = d.abs() < p_th;
            }
        }
    }
    mask
}

/// Full ground segmentation: filters, per-sector sampling, per-sector RANSAC,
/// distance thresholding. Always returns a mask; sectors without a plane
/// contribute no ground labels.
pub fn segment_ground(
    cloud: &OrganizedCloud,
    cfg: &GroundConfig,
    rng_seed: u64,
) -> (GroundMask, Vec<PlaneModel>) {
    let (_, _, z_ch, r_ch, valid) = cloud.channels();
    let proxies = normal_proxies(r_ch, z_ch, valid);
    let sectors = sample_ground(&proxies, cloud, cfg);

    let fits: Vec<Option<PlaneModel>> = sectors
        .iter()
        .enumerate()
        .map(|(s, samples)| fit_plane_ransac(samples, cfg, s, rng_seed))
        .collect();

    let mask = apply_planes(cloud, &fits, cfg.p_th, cfg);
    let planes = fits.into_iter().flatten().collect();
    (mask, planes)
}
