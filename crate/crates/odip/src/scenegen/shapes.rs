//! Silhouette geometry for the renderable shape archetypes.
//!
//! Shapes are defined in a canonical frame centered on the object, with
//! `scale` giving the full extent of the major dimension in pixels. Rotation
//! is applied by inverse-rotating query points into the canonical frame, so
//! the renderer only ever needs a point-in-shape test plus an analytic
//! bounding half-extent for window iteration and placement.

use crate::registry::ShapeArchetype;

/// Aspect of the wide rectangle (height / width).
const WIDE_RECT_ASPECT: f64 = 0.55;
/// Aspect of the tall ellipse (width / height).
const TALL_ELLIPSE_ASPECT: f64 = 0.5;
/// Base width of the triangle relative to its height.
const TRIANGLE_BASE: f64 = 0.9;
/// Inner diameter of the ring relative to the outer one.
const RING_INNER: f64 = 0.55;

/// Canonical half-sizes `(hx, hy)` of the unrotated shape.
fn canonical_half(archetype: ShapeArchetype, scale: f64) -> (f64, f64) {
    let h = scale / 2.0;
    match archetype {
        ShapeArchetype::Square | ShapeArchetype::Disc | ShapeArchetype::Ring => (h, h),
        ShapeArchetype::WideRectangle => (h, h * WIDE_RECT_ASPECT),
        ShapeArchetype::TallEllipse => (h * TALL_ELLIPSE_ASPECT, h),
        ShapeArchetype::Triangle => (h * TRIANGLE_BASE, h),
    }
}

/// Whether the point `(dx, dy)` (relative to the shape center, image axes)
/// lies inside the shape rotated by `rotation` radians.
pub fn contains(archetype: ShapeArchetype, scale: f64, rotation: f64, dx: f64, dy: f64) -> bool {
    // Inverse-rotate the query point into the canonical frame.
    let (sin, cos) = rotation.sin_cos();
    let x = dx * cos + dy * sin;
    let y = -dx * sin + dy * cos;
    let (hx, hy) = canonical_half(archetype, scale);
    match archetype {
        ShapeArchetype::Square | ShapeArchetype::WideRectangle => x.abs() <= hx && y.abs() <= hy,
        ShapeArchetype::Disc => x * x + y * y <= hx * hx,
        ShapeArchetype::TallEllipse => {
            let u = x / hx;
            let v = y / hy;
            u * u + v * v <= 1.0
        }
        ShapeArchetype::Triangle => {
            // Apex at (0, -hy), base from (-hx, hy) to (hx, hy).
            if !(-hy..=hy).contains(&y) {
                return false;
            }
            let half_width_here = hx * (y + hy) / (2.0 * hy);
            x.abs() <= half_width_here
        }
        ShapeArchetype::Ring => {
            let r2 = x * x + y * y;
            let inner = hx * RING_INNER;
            r2 <= hx * hx && r2 >= inner * inner
        }
    }
}

/// Vertices of the canonical triangle, used for its exact rotated bounds.
fn triangle_vertices(scale: f64) -> [(f64, f64); 3] {
    let (hx, hy) = canonical_half(ShapeArchetype::Triangle, scale);
    [(0.0, -hy), (-hx, hy), (hx, hy)]
}

/// Analytic half-extents `(hx, hy)` of the axis-aligned bounding box of the
/// shape rotated by `rotation`. Exact for every archetype, so the renderer's
/// iteration window and the placement margins never clip a silhouette.
pub fn half_extents(archetype: ShapeArchetype, scale: f64, rotation: f64) -> (f64, f64) {
    let (hx, hy) = canonical_half(archetype, scale);
    let (sin, cos) = rotation.sin_cos();
    match archetype {
        ShapeArchetype::Disc | ShapeArchetype::Ring => (hx, hy),
        ShapeArchetype::Square | ShapeArchetype::WideRectangle => {
            (hx * cos.abs() + hy * sin.abs(), hx * sin.abs() + hy * cos.abs())
        }
        ShapeArchetype::TallEllipse => {
            // Support function of a rotated ellipse along the image axes.
            let ex = (hx * hx * cos * cos + hy * hy * sin * sin).sqrt();
            let ey = (hx * hx * sin * sin + hy * hy * cos * cos).sqrt();
            (ex, ey)
        }
        ShapeArchetype::Triangle => {
            let mut max_x = 0.0f64;
            let mut max_y = 0.0f64;
            for (vx, vy) in triangle_vertices(scale) {
                let rx = vx * cos - vy * sin;
                let ry = vx * sin + vy * cos;
                max_x = max_x.max(rx.abs());
                max_y = max_y.max(ry.abs());
            }
            (max_x, max_y)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ALL: [ShapeArchetype; 6] = [
        ShapeArchetype::Square,
        ShapeArchetype::Disc,
        ShapeArchetype::WideRectangle,
        ShapeArchetype::TallEllipse,
        ShapeArchetype::Triangle,
        ShapeArchetype::Ring,
    ];

    /// Pixel-measured bounding half-extents, the oracle for `half_extents`.
    fn measured_half(archetype: ShapeArchetype, scale: f64, rotation: f64) -> (f64, f64) {
        let mut max_x = 0.0f64;
        let mut max_y = 0.0f64;
        let r = (scale * 0.75).ceil() as i32;
        for yi in -4 * r..=4 * r {
            for xi in -4 * r..=4 * r {
                let (dx, dy) = (f64::from(xi) * 0.25, f64::from(yi) * 0.25);
                if contains(archetype, scale, rotation, dx, dy) {
                    max_x = max_x.max(dx.abs());
                    max_y = max_y.max(dy.abs());
                }
            }
        }
        (max_x, max_y)
    }

    #[test]
    fn analytic_bounds_match_sampled_silhouettes() {
        for archetype in ALL {
            for rotation in [0.0, 0.4, 1.1, 2.0, std::f64::consts::PI / 4.0] {
                let scale = 30.0;
                let (ax, ay) = half_extents(archetype, scale, rotation);
                let (mx, my) = measured_half(archetype, scale, rotation);
                // The sampled grid quantizes at 0.25 px; the analytic bound
                // must cover every sampled point and be tight to within the
                // grid resolution plus a small shape-boundary allowance.
                assert!(mx <= ax + 1e-9 && my <= ay + 1e-9, "{archetype:?} rot {rotation}: bound too small");
                assert!(ax - mx < 0.6 && ay - my < 0.6, "{archetype:?} rot {rotation}: bound too loose ({ax} vs {mx}, {ay} vs {my})");
            }
        }
    }

    #[test]
    fn centers_are_inside_except_for_the_ring() {
        for archetype in ALL {
            let inside = contains(archetype, 30.0, 0.7, 0.0, 0.0);
            if archetype == ShapeArchetype::Ring {
                assert!(!inside, "ring center must be hollow");
            } else {
                assert!(inside, "{archetype:?} center must be solid");
            }
        }
    }

    #[test]
    fn rotation_moves_mass_for_anisotropic_shapes() {
        // A point just beyond the short side of the wide rectangle enters
        // the silhouette once the rectangle is rotated a quarter turn.
        let y_probe = 0.55 * 15.0 + 1.0;
        assert!(!contains(ShapeArchetype::WideRectangle, 30.0, 0.0, 0.0, y_probe));
        assert!(contains(
            ShapeArchetype::WideRectangle,
            30.0,
            std::f64::consts::FRAC_PI_2,
            0.0,
            y_probe
        ));
    }

    #[test]
    fn disc_to_square_area_ratio_is_pi_over_four() {
        let count = |archetype: ShapeArchetype| -> f64 {
            let mut n = 0u32;
            for yi in -40..40 {
                for xi in -40..40 {
                    if contains(archetype, 60.0, 0.0, f64::from(xi) + 0.5, f64::from(yi) + 0.5) {
                        n += 1;
                    }
                }
            }
            f64::from(n)
        };
        let ratio = count(ShapeArchetype::Disc) / count(ShapeArchetype::Square);
        assert!(
            (ratio - std::f64::consts::FRAC_PI_4).abs() < 0.02,
            "disc/square pixel ratio {ratio} should be close to pi/4"
        );
    }

    #[test]
    fn rotated_silhouette_area_is_preserved() {
        // Point-in-shape under rotation must not thin or fatten the shape.
        let count = |rotation: f64| -> i64 {
            let mut n = 0;
            for yi in -40..40 {
                for xi in -40..40 {
                    if contains(
                        ShapeArchetype::Triangle,
                        40.0,
                        rotation,
                        f64::from(xi) + 0.5,
                        f64::from(yi) + 0.5,
                    ) {
                        n += 1;
                    }
                }
            }
            n
        };
        let a = count(0.0);
        let b = count(1.0);
        assert!((a - b).abs() < a / 25, "area changed too much under rotation: {a} vs {b}");
    }
}
