use super::{AnnotationSet, ClassMap, Polygon, SoilingClass};
use crate::error::Result;

/// Even-odd ray casting towards +x.
///
/// An edge is crossed when `y` lies in its half-open vertical span
/// `[min(ya, yb), max(ya, yb))`, and a crossing counts only when it lies
/// strictly right of `p`. Together this is the top-left rule: points on a
/// left or top edge are inside, points on a right or bottom edge are not.
pub fn point_in_polygon(p: (f64, f64), poly: &Polygon) -> bool {
    let (px, py) = p;
    let verts = &poly.vertices;
    let n = verts.len();
    let mut inside = false;
    for i in 0..n {
        let (ax, ay) = verts[i];
        let (bx, by) = verts[(i + 1) % n];
        if (ay <= py) != (by <= py) {
            let x = ax + (py - ay) * (bx - ax) / (by - ay);
            if x > px {
                inside = !inside;
            }
        }
    }
    inside
}

/// Absolute shoelace area in px².
pub fn polygon_area(poly: &Polygon) -> f64 {
    let verts = &poly.vertices;
    let n = verts.len();
    let twice: f64 = (0..n)
        .map(|i| {
            let (x0, y0) = verts[i];
            let (x1, y1) = verts[(i + 1) % n];
            x0 * y1 - x1 * y0
        })
        .sum();
    twice.abs() * 0.5
}

/// Reference rasterization: every pixel center is tested against every
/// polygon in order. Slow, but independent of the scanline fill.
pub fn rasterize_oracle(ann: &AnnotationSet) -> Result<ClassMap> {
    ann.validate()?;
    let mut labels = vec![SoilingClass::Clean; ann.width * ann.height];
    for row in 0..ann.height {
        for col in 0..ann.width {
            let center = (col as f64 + 0.5, row as f64 + 0.5);
            for poly in &ann.polygons {
                if point_in_polygon(center, poly) {
                    labels[row * ann.width + col] = poly.class;
                }
            }
        }
    }
    Ok(ClassMap::from_labels(ann.width, ann.height, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square() -> Polygon {
        Polygon::rect(0.0, 0.0, 4.0, 4.0, SoilingClass::Opaque)
    }

    #[test]
    fn square_inside_and_outside() {
        assert!(point_in_polygon((2.0, 2.0), &square()));
        assert!(!point_in_polygon((5.0, 5.0), &square()));
    }

    #[test]
    fn boundary_follows_top_left_rule() {
        let sq = square();
        // left and top edges are inside
        assert!(point_in_polygon((0.0, 2.0), &sq));
        assert!(point_in_polygon((2.0, 0.0), &sq));
        assert!(point_in_polygon((0.0, 0.0), &sq));
        // right and bottom edges are outside
        assert!(!point_in_polygon((4.0, 2.0), &sq));
        assert!(!point_in_polygon((2.0, 4.0), &sq));
        assert!(!point_in_polygon((4.0, 4.0), &sq));
    }

    #[test]
    fn abutting_squares_partition_the_shared_edge() {
        let left = Polygon::rect(0.0, 0.0, 2.0, 2.0, SoilingClass::Opaque);
        let right = Polygon::rect(2.0, 0.0, 4.0, 2.0, SoilingClass::Transparent);
        for &y in &[0.0, 0.5, 1.0, 1.5, 1.999] {
            let hits = [&left, &right]
                .iter()
                .filter(|p| point_in_polygon((2.0, y), p))
                .count();
            assert_eq!(hits, 1, "y = {y}");
        }
    }

    #[test]
    fn self_intersecting_bowtie_uses_even_odd() {
        // Pentagram: the central pentagon is covered twice and is therefore outside.
        let pts: Vec<(f64, f64)> = (0..5)
            .map(|k| {
                let a = std::f64::consts::PI * (0.5 + 0.8 * k as f64);
                (10.0 + 8.0 * a.cos(), 10.0 - 8.0 * a.sin())
            })
            .collect();
        let star = Polygon::new(pts, SoilingClass::Opaque);
        assert!(!point_in_polygon((10.0, 10.0), &star));
        assert!(point_in_polygon((10.0, 3.5), &star));
    }

    #[test]
    fn areas() {
        assert_eq!(polygon_area(&square()), 16.0);
        let tri = Polygon::new(
            vec![(0.0, 0.0), (4.0, 0.0), (0.0, 4.0)],
            SoilingClass::Clean,
        );
        assert_eq!(polygon_area(&tri), 8.0);
        let mut rev = tri.clone();
        rev.vertices.reverse();
        assert_eq!(polygon_area(&rev), 8.0);
    }

    fn random_star(rng: &mut ChaCha8Rng, cx: f64, cy: f64, rmin: f64, rmax: f64) -> Polygon {
        let n = rng.random_range(5..12);
        let mut angles: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        angles.sort_by(f64::total_cmp);
        angles.dedup();
        let pts = angles
            .iter()
            .map(|a| {
                let r = rng.random_range(rmin..rmax);
                (cx + r * a.cos(), cy + r * a.sin())
            })
            .collect();
        Polygon::new(pts, SoilingClass::Opaque)
    }

    #[test]
    fn monte_carlo_inside_fraction_matches_shoelace() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let poly = random_star(&mut rng, 50.0, 50.0, 15.0, 45.0);
            let (x0, y0, x1, y1) = poly.bbox();
            let samples = 10_000;
            let inside = (0..samples)
                .filter(|_| {
                    let p = (rng.random_range(x0..x1), rng.random_range(y0..y1));
                    point_in_polygon(p, &poly)
                })
                .count();
            let frac = inside as f64 / samples as f64;
            let expect = polygon_area(&poly) / ((x1 - x0) * (y1 - y0));
            assert!((frac - expect).abs() < 0.02, "{frac} vs {expect}");
        }
    }
}
