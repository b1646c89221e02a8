//! Synthetic LiDAR worlds: a ground plane plus box/cylinder obstacles,
//! rendered by casting one ray per range-image cell. Rendering at the
//! sensor's angular resolution reproduces the real falloff of returns per
//! object with range, and the per-point surface labels give exact ground
//! truth for segmentation and detection tests.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::grid::Grid;
use crate::projection::{OrganizedCloud, ProjectionConfig};
use crate::types::{Box3, Point3};

/// Analytic surface for ray casting.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Box(Box3),
    /// Vertical cylinder spanning z0..z1.
    Cylinder {
        cx: f64,
        cy: f64,
        z0: f64,
        z1: f64,
        radius: f64,
    },
}

impl Shape {
    /// Rough bounding sphere (center, radius).
    pub fn bounding_sphere(&self) -> (Point3, f64) {
        match self {
            Shape::Box(b) => {
                let r = 0.5 * (b.size[0].powi(2) + b.size[1].powi(2) + b.size[2].powi(2)).sqrt();
                (b.center, r)
            }
            Shape::Cylinder {
                cx,
                cy,
                z0,
                z1,
                radius,
            } => {
                let half_h = (z1 - z0) / 2.0;
                (
                    Point3::new(*cx, *cy, (z0 + z1) / 2.0),
                    (radius * radius + half_h * half_h).sqrt(),
                )
            }
        }
    }
}

/// Smallest positive ray parameter t with origin at the sensor, or None.
pub fn ray_shape(dir: Point3, shape: &Shape) -> Option<f64> {
    const T_MIN: f64 = 1e-6;
    match shape {
        Shape::Box(b) => {
            // Into the box frame: rotate by -yaw around the box center.
            let o = (Point3::default() - b.center).rotate_z(-b.yaw);
            let d = dir.rotate_z(-b.yaw);
            let half = [b.size[0] / 2.0, b.size[1] / 2.0, b.size[2] / 2.0];
            let (mut t_enter, mut t_exit) = (f64::NEG_INFINITY, f64::INFINITY);
            let o_arr = [o.x, o.y, o.z];
            let d_arr = [d.x, d.y, d.z];
            for a in 0..3 {
                if d_arr[a].abs() < 1e-12 {
                    if o_arr[a].abs() > half[a] {
                        return None;
                    }
                    continue;
                }
                let t1 = (-half[a] - o_arr[a]) / d_arr[a];
                let t2 = (half[a] - o_arr[a]) / d_arr[a];
                let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                t_enter = t_enter.max(lo);
                t_exit = t_exit.min(hi);
            }
            if t_enter > t_exit || t_exit <= T_MIN {
                return None;
            }
            if t_enter > T_MIN {
                Some(t_enter)
            } else {
                Some(t_exit)
            }
        }
        Shape::Cylinder {
            cx,
            cy,
            z0,
            z1,
            radius,
        } => {
            let mut best: Option<f64> = None;
            let mut consider = |t: f64| {
                if t > T_MIN && best.map_or(true, |b| t < b) {
                    best = Some(t);
                }
            };
            // Side surface.
            let a = dir.x * dir.x + dir.y * dir.y;
            if a > 1e-12 {
                let b_coef = -2.0 * (dir.x * cx + dir.y * cy);
                let c = cx * cx + cy * cy - radius * radius;
                let disc = b_coef * b_coef - 4.0 * a * c;
                if disc >= 0.0 {
                    let sq = disc.sqrt();
                    for t in [(-b_coef - sq) / (2.0 * a), (-b_coef + sq) / (2.0 * a)] {
                        let z = t * dir.z;
                        if z >= *z0 && z <= *z1 {
                            consider(t);
                        }
                    }
                }
            }
            // End caps.
            if dir.z.abs() > 1e-12 {
                for zc in [*z0, *z1] {
                    let t = zc / dir.z;
                    let (x, y) = (t * dir.x, t * dir.y);
                    if (x - cx).powi(2) + (y - cy).powi(2) <= radius * radius {
                        consider(t);
                    }
                }
            }
            best
        }
    }
}

/// World description for a rendered scan.
#[derive(Debug, Clone)]
pub struct Scene {
    /// Unit ground-plane normal; the plane satisfies n.p + offset = 0.
    pub ground_normal: Point3,
    pub ground_offset: f64,
    /// Gaussian noise on the z of ground returns (meters).
    pub z_noise_sigma: f64,
    /// Probability of dropping a return entirely (missing reflection).
    pub dropout: f64,
    pub obstacles: Vec<Shape>,
    pub max_range: f64,
}

impl Scene {
    /// Flat world with the sensor `sensor_height` above the ground.
    pub fn flat(sensor_height: f64) -> Self {
        Self {
            ground_normal: Point3::new(0.0, 0.0, 1.0),
            ground_offset: sensor_height,
            z_noise_sigma: 0.0,
            dropout: 0.0,
            obstacles: Vec::new(),
            max_range: 80.0,
        }
    }

    /// Ground plane tilted by `pitch` about the y-axis then yawed; still
    /// passing `sensor_height` below the sensor.
    pub fn tilted(sensor_height: f64, pitch: f64, yaw: f64) -> Self {
        let n = Point3::new(pitch.sin(), 0.0, pitch.cos()).rotate_z(yaw);
        Self {
            ground_normal: n,
            ground_offset: n.z * sensor_height,
            ..Self::flat(sensor_height)
        }
    }

    /// Height of the ground surface under the sensor origin.
    pub fn ground_z_at_origin(&self) -> f64 {
        -self.ground_offset / self.ground_normal.z
    }
}

/// A rendered scan: points with per-point surface labels.
#[derive(Debug, Clone)]
pub struct RenderedScan {
    pub points: Vec<Point3>,
    pub hit_ground: Vec<bool>,
}

/// Beam direction of a cell center.
pub fn beam_dir(proj: &ProjectionConfig, r: usize, c: usize) -> Point3 {
    let az = proj.azimuth_of_col(c);
    let el = proj.elevation_of_row(r);
    Point3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
}

/// Casts one ray per cell; the nearest surface wins. Ground returns get
/// Gaussian z-noise; dropout removes returns entirely.
pub fn render_scan(proj: &ProjectionConfig, scene: &Scene, seed: u64) -> RenderedScan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, scene.z_noise_sigma.max(1e-12)).unwrap();
    let mut points = Vec::new();
    let mut hit_ground = Vec::new();

    for r in 0..proj.s_h {
        for c in 0..proj.s_w {
            // Consume randomness unconditionally so dropout does not shift
            // the noise stream of later cells.
            let drop_draw: f64 = rng.random();
            let noise = normal.sample(&mut rng);
            if scene.dropout > 0.0 && drop_draw < scene.dropout {
                continue;
            }
            let dir = beam_dir(proj, r, c);

            let mut t_best = f64::INFINITY;
            let mut ground = false;
            let denom = scene.ground_normal.dot(dir);
            if denom.abs() > 1e-12 {
                let t = -scene.ground_offset / denom;
                if t > 0.0 && t <= scene.max_range {
                    t_best = t;
                    ground = true;
                }
            }
            for shape in &scene.obstacles {
                if let Some(t) = ray_shape(dir, shape) {
                    if t <= scene.max_range && t < t_best {
                        t_best = t;
                        ground = false;
                    }
                }
            }
            if !t_best.is_finite() {
                continue;
            }
            let mut p = dir * t_best;
            if ground && scene.z_noise_sigma > 0.0 {
                p.z += noise;
            }
            points.push(p);
            hit_ground.push(ground);
        }
    }
    RenderedScan { points, hit_ground }
}

/// Casts rays only inside the angular window of the shapes' joint bounding
/// sphere; used to render single objects cheaply.
pub fn raycast_shapes(
    proj: &ProjectionConfig,
    shapes: &[Shape],
    max_range: f64,
    range_noise_sigma: f64,
    seed: u64,
) -> Vec<Point3> {
    if shapes.is_empty() {
        return Vec::new();
    }
    let mut center = Point3::default();
    for s in shapes {
        center = center + s.bounding_sphere().0;
    }
    center = center * (1.0 / shapes.len() as f64);
    let mut radius: f64 = 0.0;
    for s in shapes {
        let (c, r) = s.bounding_sphere();
        radius = radius.max((c - center).norm() + r);
    }
    let dist = center.norm();
    if dist <= radius {
        return Vec::new(); // object envelops the sensor; not a valid target
    }
    let half_angle = (radius / dist).min(1.0).asin() * 1.15;

    let az_c = center.y.atan2(center.x);
    let el_c = (center.z / dist).asin();
    let col_c = proj.col_of_azimuth(az_c) as i64;
    let row_c = proj.row_of_elevation(el_c) as i64;
    let col_pad = (half_angle / proj.azimuth_step()).ceil() as i64 + 2;
    let row_pad = (half_angle / proj.elevation_step()).ceil() as i64 + 2;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, range_noise_sigma.max(1e-12)).unwrap();
    let mut out = Vec::new();
    for dr in -row_pad..=row_pad {
        let r = row_c + dr;
        if r < 0 || r >= proj.s_h as i64 {
            continue;
        }
        for dc in -col_pad..=col_pad {
            let c = (col_c + dc).rem_euclid(proj.s_w as i64);
            let dir = beam_dir(proj, r as usize, c as usize);
            let mut t_best = f64::INFINITY;
            for shape in shapes {
                if let Some(t) = ray_shape(dir, shape) {
                    if t < t_best {
                        t_best = t;
                    }
                }
            }
            if t_best.is_finite() && t_best <= max_range {
                let t = if range_noise_sigma > 0.0 {
                    t_best + normal.sample(&mut rng)
                } else {
                    t_best
                };
                out.push(dir * t);
            }
        }
    }
    out
}

/// Per-cell ground-truth labels for a projected rendered scan: each cell
/// takes the label of the point it stores.
pub fn organized_ground_truth(
    cloud: &OrganizedCloud,
    points: &[Point3],
    hit_ground: &[bool],
) -> Grid<bool> {
    let proj = &cloud.config;
    let mut gt = Grid::filled(proj.s_h, proj.s_w, false);
    for (p, &flag) in points.iter().zip(hit_ground.iter()) {
        let range = p.norm();
        let c = proj.col_of_azimuth(p.y.atan2(p.x));
        let r = proj.row_of_elevation((p.z / range).asin());
        if cloud.is_valid(r, c) && cloud.point(r, c) == *p {
            gt[(r, c)] = flag;
        }
    }
    gt
}

// ── object and clutter generators ───────────────────────────────────────

pub const CLASS_CAR: usize = 0;
pub const CLASS_PEDESTRIAN: usize = 1;
pub const CLASS_CYCLIST: usize = 2;
pub const CLASS_NAMES: [&str; 3] = ["car", "pedestrian", "cyclist"];

/// One placed in-distribution object: shapes for rendering plus its
/// ground-truth box.
#[derive(Debug, Clone)]
pub struct PlacedObject {
    pub class_id: usize,
    pub gt: Box3,
    pub shapes: Vec<Shape>,
}

/// Samples an object of `class_id` standing on the ground at the given
/// planar position.
pub fn sample_object(
    class_id: usize,
    x: f64,
    y: f64,
    ground_z: f64,
    rng: &mut ChaCha8Rng,
) -> PlacedObject {
    match class_id {
        CLASS_CAR => {
            let l = 3.9 * rng.random_range(0.88..1.12);
            let w = 1.6 * rng.random_range(0.88..1.12);
            let h = 1.56 * rng.random_range(0.9..1.1);
            let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let gt = Box3::new(Point3::new(x, y, ground_z + h / 2.0), [l, w, h], yaw);
            PlacedObject {
                class_id,
                gt,
                shapes: vec![Shape::Box(gt)],
            }
        }
        CLASS_PEDESTRIAN => {
            let radius = rng.random_range(0.25..0.35);
            let h = rng.random_range(1.5..1.9);
            let gt = Box3::new(
                Point3::new(x, y, ground_z + h / 2.0),
                [2.2 * radius, 1.8 * radius, h],
                0.0,
            );
            PlacedObject {
                class_id,
                gt,
                shapes: vec![Shape::Cylinder {
                    cx: x,
                    cy: y,
                    z0: ground_z,
                    z1: ground_z + h,
                    radius,
                }],
            }
        }
        CLASS_CYCLIST => {
            let l = 1.76 * rng.random_range(0.9..1.1);
            let h = rng.random_range(1.6..1.85);
            let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let frame_h = 0.62 * h;
            let frame = Box3::new(
                Point3::new(x, y, ground_z + frame_h / 2.0),
                [l, 0.24, frame_h],
                yaw,
            );
            let rider_r = rng.random_range(0.18..0.24);
            let gt = Box3::new(Point3::new(x, y, ground_z + h / 2.0), [l, 0.6, h], yaw);
            PlacedObject {
                class_id,
                gt,
                shapes: vec![
                    Shape::Box(frame),
                    Shape::Cylinder {
                        cx: x,
                        cy: y,
                        z0: ground_z + 0.45 * h,
                        z1: ground_z + h,
                        radius: rider_r,
                    },
                ],
            }
        }
        other => panic!("unknown class id {other}"),
    }
}

/// Out-of-distribution clutter families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OodKind {
    Wall,
    Pole,
    Blob,
    Foliage,
}

pub const OOD_KINDS: [OodKind; 4] = [OodKind::Wall, OodKind::Pole, OodKind::Blob, OodKind::Foliage];

/// Clutter instances are either analytic shapes (rendered like objects) or
/// direct point sets (for diffuse clutter with no crisp surface).
#[derive(Debug, Clone)]
pub enum OodInstance {
    Shapes(Vec<Shape>),
    Points(Vec<Point3>),
}

pub fn sample_ood(
    kind: OodKind,
    x: f64,
    y: f64,
    ground_z: f64,
    rng: &mut ChaCha8Rng,
) -> OodInstance {
    let range = (x * x + y * y).sqrt().max(1.0);
    match kind {
        OodKind::Wall => {
            let l = rng.random_range(2.5..8.0);
            let h = rng.random_range(1.8..3.2);
            let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            OodInstance::Shapes(vec![Shape::Box(Box3::new(
                Point3::new(x, y, ground_z + h / 2.0),
                [l, 0.15, h],
                yaw,
            ))])
        }
        OodKind::Pole => {
            let h = rng.random_range(2.5..6.0);
            OodInstance::Shapes(vec![Shape::Cylinder {
                cx: x,
                cy: y,
                z0: ground_z,
                z1: ground_z + h,
                radius: rng.random_range(0.05..0.15),
            }])
        }
        OodKind::Blob => {
            let n = ((18000.0 / (range * range)) as usize).clamp(15, 400);
            let sx = rng.random_range(0.25..1.2);
            let sy = rng.random_range(0.25..1.2);
            let sz = rng.random_range(0.2..0.9);
            let cz = ground_z + rng.random_range(0.4..1.6);
            let normal = Normal::new(0.0, 1.0).unwrap();
            let pts = (0..n)
                .map(|_| {
                    Point3::new(
                        x + sx * normal.sample(rng),
                        y + sy * normal.sample(rng),
                        cz + sz * normal.sample(rng),
                    )
                })
                .collect();
            OodInstance::Points(pts)
        }
        OodKind::Foliage => {
            let n = ((24000.0 / (range * range)) as usize).clamp(20, 500);
            let ex = rng.random_range(1.0..3.0);
            let ey = rng.random_range(1.0..3.0);
            let ez = rng.random_range(1.2..3.0);
            let pts = (0..n)
                .map(|_| {
                    Point3::new(
                        x + rng.random_range(-ex..ex) / 2.0,
                        y + rng.random_range(-ey..ey) / 2.0,
                        ground_z + 0.3 + rng.random_range(0.0..ez),
                    )
                })
                .collect();
            OodInstance::Points(pts)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::project_cloud;

    #[test]
    fn ray_hits_axis_aligned_box_front_face() {
        let shape = Shape::Box(Box3::new(Point3::new(10.0, 0.0, 0.0), [2.0, 4.0, 2.0], 0.0));
        let t = ray_shape(Point3::new(1.0, 0.0, 0.0), &shape).unwrap();
        assert!((t - 9.0).abs() < 1e-9);
        assert!(ray_shape(Point3::new(0.0, 1.0, 0.0), &shape).is_none());
    }

    #[test]
    fn ray_hits_rotated_box() {
        // 45-degree box: the frontmost corner sits at x = 10 - sqrt(2).
        let shape = Shape::Box(Box3::new(
            Point3::new(10.0, 0.0, 0.0),
            [2.0, 2.0, 2.0],
            std::f64::consts::FRAC_PI_4,
        ));
        let t = ray_shape(Point3::new(1.0, 0.0, 0.0), &shape).unwrap();
        assert!((t - (10.0 - 2.0_f64.sqrt())).abs() < 1e-9);
    }

    #[test]
    fn ray_hits_cylinder_side_and_respects_height() {
        let shape = Shape::Cylinder {
            cx: 5.0,
            cy: 0.0,
            z0: -1.0,
            z1: 1.0,
            radius: 0.5,
        };
        let t = ray_shape(Point3::new(1.0, 0.0, 0.0), &shape).unwrap();
        assert!((t - 4.5).abs() < 1e-9);
        // A ray aimed well above the cylinder misses.
        let up = Point3::new(1.0, 0.0, 0.5);
        let up = up * (1.0 / up.norm());
        assert!(ray_shape(up, &shape).is_none());
    }

    #[test]
    fn flat_scene_renders_only_ground_below_horizon() {
        let proj = ProjectionConfig::new(32, 128, 2.0_f64.to_radians(), 24.0_f64.to_radians())
            .unwrap();
        let scene = Scene::flat(1.7);
        let scan = render_scan(&proj, &scene, 1);
        assert!(!scan.points.is_empty());
        assert!(scan.hit_ground.iter().all(|&g| g));
        for p in &scan.points {
            assert!((p.z + 1.7).abs() < 1e-9);
        }
    }

    #[test]
    fn obstacle_occludes_ground() {
        let proj = ProjectionConfig::new(32, 256, 2.0_f64.to_radians(), 24.0_f64.to_radians())
            .unwrap();
        let mut scene = Scene::flat(1.7);
        scene.obstacles.push(Shape::Box(Box3::new(
            Point3::new(6.0, 0.0, -0.7),
            [2.0, 2.0, 2.0],
            0.0,
        )));
        let scan = render_scan(&proj, &scene, 2);
        let n_obstacle = scan.hit_ground.iter().filter(|&&g| !g).count();
        assert!(n_obstacle > 20, "box should catch many beams: {n_obstacle}");
    }

    #[test]
    fn ground_truth_grid_matches_rendered_labels() {
        let proj = ProjectionConfig::new(16, 64, 2.0_f64.to_radians(), 20.0_f64.to_radians())
            .unwrap();
        let mut scene = Scene::flat(1.5);
        scene.obstacles.push(Shape::Cylinder {
            cx: 4.0,
            cy: 0.5,
            z0: -1.5,
            z1: 0.5,
            radius: 0.4,
        });
        let scan = render_scan(&proj, &scene, 3);
        let cloud = project_cloud(&scan.points, &proj).unwrap();
        let gt = organized_ground_truth(&cloud, &scan.points, &scan.hit_ground);
        let mut obstacle_cells = 0;
        for r in 0..16 {
            for c in 0..64 {
                if cloud.is_valid(r, c) && !gt[(r, c)] {
                    obstacle_cells += 1;
                    let p = cloud.point(r, c);
                    // Obstacle cells really sit on the cylinder.
                    assert!((p.norm_xy() > 2.0) && p.norm_xy() < 6.0);
                }
            }
        }
        assert!(obstacle_cells > 3);
    }

    #[test]
    fn windowed_raycast_matches_full_render_for_single_object() {
        let proj = ProjectionConfig::new(32, 256, 2.0_f64.to_radians(), 24.0_f64.to_radians())
            .unwrap();
        let shapes = vec![Shape::Box(Box3::new(
            Point3::new(8.0, 3.0, -0.9),
            [1.8, 1.4, 1.5],
            0.4,
        ))];
        let windowed = raycast_shapes(&proj, &shapes, 80.0, 0.0, 0);
        let mut scene = Scene::flat(1.7);
        scene.obstacles = shapes;
        // Remove the ground: lower it far below so only the box is hit.
        scene.ground_offset = 1e6;
        let full = render_scan(&proj, &scene, 0);
        assert_eq!(windowed.len(), full.points.len());
        for p in &windowed {
            assert!(full.points.iter().any(|q| (*q - *p).norm() < 1e-9));
        }
    }

    #[test]
    fn pedestrian_heights_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let obj = sample_object(CLASS_PEDESTRIAN, 8.0, 1.0, -1.7, &mut rng);
            assert!(obj.gt.size[2] >= 1.5 && obj.gt.size[2] <= 1.9);
        }
    }

    #[test]
    fn rendered_point_count_follows_inverse_square_law() {
        // Doubling the range divides the expected return count by about
        // four (an angular-resolution sensor sees 1/r^2 surface density).
        let proj = ProjectionConfig::kitti_hdl64e();
        let mut near_total = 0usize;
        let mut far_total = 0usize;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let near = sample_object(CLASS_PEDESTRIAN, 8.0, 0.0, -1.7, &mut rng);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let far = sample_object(CLASS_PEDESTRIAN, 16.0, 0.0, -1.7, &mut rng);
            near_total += raycast_shapes(&proj, &near.shapes, 80.0, 0.0, seed).len();
            far_total += raycast_shapes(&proj, &far.shapes, 80.0, 0.0, seed).len();
        }
        let ratio = far_total as f64 / near_total as f64;
        assert!(
            (0.15..0.35).contains(&ratio),
            "far/near return ratio {ratio} should sit near 1/4"
        );
    }

    #[test]
    fn render_is_deterministic_per_seed() {
        let proj = ProjectionConfig::new(16, 64, 0.05, 0.4).unwrap();
        let mut scene = Scene::flat(1.6);
        scene.z_noise_sigma = 0.02;
        scene.dropout = 0.1;
        let a = render_scan(&proj, &scene, 11);
        let b = render_scan(&proj, &scene, 11);
        assert_eq!(a.points, b.points);
        assert_eq!(a.hit_ground, b.hit_ground);
    }
}
