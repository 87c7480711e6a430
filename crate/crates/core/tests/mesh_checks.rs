//! Point location and the projector against brute force.

use geoconfound_core::mesh::{build_mesh, Domain, Point, TriMesh};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn inside(m: &TriMesh, t: usize, p: &Point) -> bool {
    let [a, b, c] = m.triangles()[t];
    let v = m.vertices();
    let cross = |o: &Point, q: &Point| (q.x - o.x) * (p.y - o.y) - (q.y - o.y) * (p.x - o.x);
    let (d1, d2, d3) = (cross(&v[a], &v[b]), cross(&v[b], &v[c]), cross(&v[c], &v[a]));
    let eps = 1e-12;
    d1 >= -eps && d2 >= -eps && d3 >= -eps
}

#[test]
fn brute_force_scan_agrees_on_random_points() {
    let m = build_mesh(&Domain::new(0.0, 1.0, 0.0, 1.0).unwrap(), 0.5, 0.25).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10_000 {
        let p = Point::new(rng.random(), rng.random());
        let first = (0..m.n_triangles()).find(|&t| inside(&m, t, &p)).expect("covered by brute force");
        let (t, _) = m.locate(&p).expect("located");
        assert_eq!(t, first);
    }
}

#[test]
fn triangles_have_positive_area() {
    let m = build_mesh(&Domain::new(-2.0, 7.0, 3.0, 4.0).unwrap(), 0.33, 0.6).unwrap();
    assert!((0..m.n_triangles()).all(|t| m.triangle_area(t) > 0.0));
}

fn projector_checks(points: &[Point], m: &TriMesh) {
    let a = m.project(points).unwrap();
    let vx: Vec<f64> = m.vertices().iter().map(|v| v.x).collect();
    let vy: Vec<f64> = m.vertices().iter().map(|v| v.y).collect();
    let g: Vec<f64> = m.vertices().iter().map(|v| 2.5 - 1.5 * v.x + 0.75 * v.y).collect();
    let (ax, ay, ag) = (a.apply(&vx), a.apply(&vy), a.apply(&g));
    for (i, p) in points.iter().enumerate() {
        assert!((ax[i] - p.x).abs() < 1e-10 && (ay[i] - p.y).abs() < 1e-10);
        assert!((ag[i] - (2.5 - 1.5 * p.x + 0.75 * p.y)).abs() < 1e-10);
        let row: Vec<(usize, f64)> = a.row(i).collect();
        assert!(row.len() <= 3);
        assert!(row.iter().all(|&(_, w)| (0.0..=1.0).contains(&w)));
        assert!((row.iter().map(|e| e.1).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn hundred_random_points_reproduced() {
    let m = build_mesh(&Domain::new(0.0, 10.0, 0.0, 10.0).unwrap(), 0.4, 2.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pts: Vec<Point> = (0..100).map(|_| Point::new(10.0 * rng.random::<f64>(), 10.0 * rng.random::<f64>())).collect();
    projector_checks(&pts, &m);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projector_reproduces_affine_functions(
        w in 0.5f64..20.0, h in 0.5f64..20.0, frac in 0.05f64..0.5,
        pts in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..40),
    ) {
        let d = Domain::new(0.0, w, 0.0, h).unwrap();
        let m = build_mesh(&d, frac * w.min(h), d.default_extension()).unwrap();
        let pts: Vec<Point> = pts.iter().map(|&(u, v)| Point::new(u * w, v * h)).collect();
        projector_checks(&pts, &m);
    }
}
