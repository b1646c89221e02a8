//! Rotated 3D box IoU: convex polygon clipping of the two yaw-rotated
//! ground-plane rectangles times the vertical overlap, over the union.

use crate::types::Box3;

/// Area of a convex polygon (shoelace formula).
fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let (x1, y1) = poly[i];
        let (x2, y2) = poly[(i + 1) % poly.len()];
        acc += x1 * y2 - x2 * y1;
    }
    acc.abs() / 2.0
}

/// Sutherland-Hodgman clip of a convex subject polygon by a convex clip
/// polygon given in consistent winding order.
fn clip_polygon(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    // Ensure counter-clockwise clip winding so "inside" is a fixed side.
    let ccw = {
        let mut acc = 0.0;
        for i in 0..clip.len() {
            let (x1, y1) = clip[i];
            let (x2, y2) = clip[(i + 1) % clip.len()];
            acc += x1 * y2 - x2 * y1;
        }
        acc >= 0.0
    };
    let clip_ccw: Vec<(f64, f64)> = if ccw {
        clip.to_vec()
    } else {
        clip.iter().rev().cloned().collect()
    };

    let mut output = subject.to_vec();
    for i in 0..clip_ccw.len() {
        if output.is_empty() {
            return output;
        }
        let (ax, ay) = clip_ccw[i];
        let (bx, by) = clip_ccw[(i + 1) % clip_ccw.len()];
        let inside = |(px, py): (f64, f64)| (bx - ax) * (py - ay) - (by - ay) * (px - ax) >= 0.0;
        let intersect = |(px, py): (f64, f64), (qx, qy): (f64, f64)| {
            let a1 = by - ay;
            let b1 = ax - bx;
            let c1 = a1 * ax + b1 * ay;
            let a2 = qy - py;
            let b2 = px - qx;
            let c2 = a2 * px + b2 * py;
            let det = a1 * b2 - a2 * b1;
            ((b2 * c1 - b1 * c2) / det, (a1 * c2 - a2 * c1) / det)
        };

        let input = output;
        output = Vec::with_capacity(input.len() + 2);
        for j in 0..input.len() {
            let current = input[j];
            let previous = input[(j + input.len() - 1) % input.len()];
            match (inside(current), inside(previous)) {
                (true, true) => output.push(current),
                (true, false) => {
                    output.push(intersect(previous, current));
                    output.push(current);
                }
                (false, true) => output.push(intersect(previous, current)),
                (false, false) => {}
            }
        }
    }
    output
}

/// Ground-plane intersection area of two yaw-rotated boxes.
pub fn footprint_intersection(a: &Box3, b: &Box3) -> f64 {
    let pa: Vec<(f64, f64)> = a.footprint().to_vec();
    let pb: Vec<(f64, f64)> = b.footprint().to_vec();
    polygon_area(&clip_polygon(&pa, &pb))
}

/// Rotated 3D intersection-over-union.
pub fn iou3d(a: &Box3, b: &Box3) -> f64 {
    let inter_area = footprint_intersection(a, b);
    if inter_area <= 0.0 {
        return 0.0;
    }
    let (a_lo, a_hi) = (a.center.z - a.size[2] / 2.0, a.center.z + a.size[2] / 2.0);
    let (b_lo, b_hi) = (b.center.z - b.size[2] / 2.0, b.center.z + b.size[2] / 2.0);
    let dz = (a_hi.min(b_hi) - a_lo.max(b_lo)).max(0.0);
    let inter = inter_area * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Point3;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_cube_at(x: f64) -> Box3 {
        Box3::new(Point3::new(x, 0.0, 0.0), [1.0, 1.0, 1.0], 0.0)
    }

    #[test]
    fn identical_boxes_have_iou_one() {
        let b = Box3::new(Point3::new(3.0, -2.0, 1.0), [4.2, 1.7, 1.5], 0.77);
        assert!((iou3d(&b, &b) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn disjoint_boxes_have_iou_zero() {
        assert_eq!(iou3d(&unit_cube_at(0.0), &unit_cube_at(5.0)), 0.0);
        // Vertically disjoint too.
        let a = unit_cube_at(0.0);
        let b = Box3::new(Point3::new(0.0, 0.0, 3.0), [1.0, 1.0, 1.0], 0.0);
        assert_eq!(iou3d(&a, &b), 0.0);
    }

    #[test]
    fn half_offset_cubes_give_one_third() {
        let v = iou3d(&unit_cube_at(0.0), &unit_cube_at(0.5));
        assert!((v - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn rotated_square_overlap_is_known() {
        // A unit square against itself rotated 45 degrees: the intersection
        // is a regular octagon with area 2*(sqrt(2)-1).
        let a = Box3::new(Point3::new(0.0, 0.0, 0.0), [1.0, 1.0, 1.0], 0.0);
        let b = Box3::new(
            Point3::new(0.0, 0.0, 0.0),
            [1.0, 1.0, 1.0],
            std::f64::consts::FRAC_PI_4,
        );
        let inter = footprint_intersection(&a, &b);
        let expect = 2.0 * (2.0_f64.sqrt() - 1.0);
        assert!((inter - expect).abs() < 1e-9);
        let iou = iou3d(&a, &b);
        assert!((iou - expect / (2.0 - expect)).abs() < 1e-9);
    }

    #[test]
    fn matches_monte_carlo_oracle_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..20 {
            let mk = |rng: &mut ChaCha8Rng, spread: f64| {
                Box3::new(
                    Point3::new(
                        rng.random_range(-spread..spread),
                        rng.random_range(-spread..spread),
                        rng.random_range(-0.5..0.5),
                    ),
                    [
                        rng.random_range(0.8..4.0),
                        rng.random_range(0.8..2.5),
                        rng.random_range(0.8..2.0),
                    ],
                    rng.random_range(-3.1..3.1),
                )
            };
            let a = mk(&mut rng, 1.0);
            let b = mk(&mut rng, 1.0);
            let analytic = iou3d(&a, &b);

            // Monte-Carlo volume estimate over the bounding region.
            let inside = |p: Point3, bx: &Box3| {
                let local = (p - bx.center).rotate_z(-bx.yaw);
                local.x.abs() <= bx.size[0] / 2.0
                    && local.y.abs() <= bx.size[1] / 2.0
                    && local.z.abs() <= bx.size[2] / 2.0
            };
            let lo = -6.0;
            let hi = 6.0;
            let n = 60_000;
            let (mut n_a, mut n_b, mut n_ab) = (0u32, 0u32, 0u32);
            for _ in 0..n {
                let p = Point3::new(
                    rng.random_range(lo..hi),
                    rng.random_range(lo..hi),
                    rng.random_range(-2.0..2.0),
                );
                let ia = inside(p, &a);
                let ib = inside(p, &b);
                if ia {
                    n_a += 1;
                }
                if ib {
                    n_b += 1;
                }
                if ia && ib {
                    n_ab += 1;
                }
            }
            let union = (n_a + n_b - n_ab) as f64;
            let mc = if union == 0.0 {
                0.0
            } else {
                n_ab as f64 / union
            };
            assert!(
                (analytic - mc).abs() < 0.05,
                "case {case}: analytic {analytic} vs MC {mc}"
            );
        }
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(
            ax in -3.0..3.0f64, ay in -3.0..3.0f64,
            bx in -3.0..3.0f64, by in -3.0..3.0f64,
            yaw_a in -3.14..3.14f64, yaw_b in -3.14..3.14f64,
            l in 0.5..4.0f64, w in 0.5..2.0f64, h in 0.5..2.0f64,
        ) {
            let a = Box3::new(Point3::new(ax, ay, 0.0), [l, w, h], yaw_a);
            let b = Box3::new(Point3::new(bx, by, 0.2), [w, l, h], yaw_b);
            let ab = iou3d(&a, &b);
            let ba = iou3d(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }
}
