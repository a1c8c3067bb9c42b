use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::geometry::TriangleMesh;

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f32; 3]> {
    (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0))).collect()
}

fn shifted(points: &[[f32; 3]], by: [f32; 3]) -> Vec<[f32; 3]> {
    points.iter().map(|p| [p[0] + by[0], p[1] + by[1], p[2] + by[2]]).collect()
}

#[test]
fn mpvpe_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_points(&mut rng, 5);
    assert_eq!(mpvpe(&x, &x).unwrap(), 0.0);
    assert!((mpvpe(&x, &shifted(&x, [1.0, 0.0, 0.0])).unwrap() - 1.0).abs() < 1e-6);
    let y = random_points(&mut rng, 5);
    assert!((mpvpe(&x, &y).unwrap() - reference::mpvpe(&x, &y)).abs() <= 1e-9);
    assert!(matches!(mpvpe(&x, &y[..4]), Err(MetricsError::Size(_))));
}

#[test]
fn apd_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_points(&mut rng, 6);
    assert_eq!(apd(&[a.clone(), a.clone()]).unwrap(), 0.0);
    assert!((apd(&[a.clone(), shifted(&a, [1.0, 0.0, 0.0])]).unwrap() - 1.0).abs() < 1e-6);
    let set: Vec<_> = (0..4).map(|_| random_points(&mut rng, 6)).collect();
    assert!((apd(&set).unwrap() - reference::apd(&set)).abs() <= 1e-9);
    assert!(matches!(apd(&set[..1]), Err(MetricsError::TooFew { .. })));
    assert!(apd(&[a.clone(), a[..5].to_vec()]).is_err());
}

fn mesh(vertices: &[[f64; 3]], faces: &[[usize; 3]]) -> TriangleMesh {
    TriangleMesh::new(vertices.to_vec(), faces.to_vec()).unwrap()
}

#[test]
fn tetrahedron_has_no_self_intersections() {
    let m = mesh(
        &[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        &[[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]],
    );
    assert_eq!(self_intersection_rate(&m).unwrap(), 0.0);
}

#[test]
fn piercing_triangle_case() {
    let m = mesh(
        &[
            // a triangle in the z = 0 plane
            [0.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [0.0, 2.0, 0.0],
            // a vertical triangle passing through it
            [0.5, 0.5, -1.0],
            [0.5, 0.5, 1.0],
            [0.6, 0.4, 1.0],
            // far away
            [10.0, 10.0, 10.0],
            [11.0, 10.0, 10.0],
            [10.0, 11.0, 10.0],
        ],
        &[[0, 1, 2], [3, 4, 5], [6, 7, 8]],
    );
    // all-pairs oracle: only the first two faces meet
    let oracle = intersecting_faces_all_pairs(&m).unwrap();
    assert_eq!(oracle, vec![0, 1]);
    assert_eq!(intersecting_faces(&m).unwrap(), oracle);
    let rate = self_intersection_rate(&m).unwrap();
    assert!((rate - 200.0 / 3.0).abs() < 1e-9);
    assert_eq!(format!("{rate:.2}"), "66.67");
}

#[test]
fn adjacent_faces_are_excluded() {
    let m = mesh(
        &[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]],
        &[[0, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 1]],
    );
    assert_eq!(self_intersection_rate(&m).unwrap(), 0.0);
    // folding one face through its neighbour still shares a vertex
    let folded = mesh(
        &[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.5, 0.2, -1.0], [0.5, 0.2, 1.0]],
        &[[0, 1, 2], [0, 3, 4]],
    );
    assert_eq!(self_intersection_rate(&folded).unwrap(), 0.0);
}

#[test]
fn degenerate_faces_are_rejected() {
    let m = mesh(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], &[[0, 1, 2]]);
    assert!(matches!(self_intersection_rate(&m), Err(MetricsError::DegenerateFace(0))));
}

#[test]
fn triangle_pairs() {
    let base = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
    let lifted = base.map(|v| [v[0], v[1], 0.5]);
    assert!(!triangles_intersect(&base, &lifted));
    let coplanar_overlap = [[0.2, 0.2, 0.0], [1.2, 0.2, 0.0], [0.2, 1.2, 0.0]];
    assert!(triangles_intersect(&base, &coplanar_overlap));
    let coplanar_apart = [[2.0, 2.0, 0.0], [3.0, 2.0, 0.0], [2.0, 3.0, 0.0]];
    assert!(!triangles_intersect(&base, &coplanar_apart));
    let contained = [[0.1, 0.1, 0.0], [0.3, 0.1, 0.0], [0.1, 0.3, 0.0]];
    assert!(triangles_intersect(&base, &contained));
    let crossing = [[0.2, 0.2, -1.0], [0.2, 0.2, 1.0], [0.3, 0.1, 0.0]];
    assert!(triangles_intersect(&base, &crossing));
    let beside = [[2.0, 0.2, -1.0], [2.0, 0.2, 1.0], [2.1, 0.1, 0.0]];
    assert!(!triangles_intersect(&base, &beside));
    // the plane is crossed, but outside the triangle
    let near_miss = [[0.8, 0.8, -1.0], [0.8, 0.8, 1.0], [0.9, 0.7, 0.0]];
    assert!(!triangles_intersect(&base, &near_miss));
}

#[test]
fn latent_moment_examples() {
    let zeros = vec![Tensor::<f32>::zeros(&[3, 2]); 4];
    let m = latent_moments(&zeros).unwrap();
    assert_eq!(m.mean, vec![0.0, 0.0]);
    assert_eq!(m.var, vec![0.0, 0.0]);

    let v = [0.5f32, -2.0, 3.0];
    let plus = Tensor::new(&[1, 3], v.to_vec()).unwrap();
    let minus = plus.map(|x| -x);
    let m = latent_moments(&[plus, minus]).unwrap();
    for d in 0..3 {
        assert_eq!(m.mean[d], 0.0);
        assert!((m.var[d] - (v[d] as f64).powi(2)).abs() < 1e-12);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws: Vec<Tensor<f32>> =
        (0..1000).map(|_| Tensor::from_fn(&[1, 4], |_| StandardNormal.sample(&mut rng))).collect();
    let m = latent_moments(&draws).unwrap();
    for d in 0..4 {
        assert!(m.mean[d].abs() < 0.1);
        assert!((0.85..=1.15).contains(&m.var[d]));
    }
    assert!(latent_moments(&draws[..1]).is_err());
}

#[test]
fn report_json_keys_and_round_trip() {
    let report = EvalReport {
        mpvpe: 0.01,
        apd: 0.2,
        si_rate: 1.5,
        latent_moments: LatentMoments { mean: vec![0.0, 0.1], var: vec![1.0, 0.9] },
        sample_count: 500,
    };
    assert!(report.is_valid());
    let json = serde_json::to_value(&report).unwrap();
    let mut keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(keys, ["apd", "latent_moments", "mpvpe", "sample_count", "si_rate"]);
    let back: EvalReport = serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
    assert_eq!(back, report);
    assert!(!EvalReport { apd: f64::NAN, ..report }.is_valid());
}

fn random_mesh(seed: u64) -> TriangleMesh {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(6..14);
    let vertices: Vec<[f64; 3]> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0))).collect();
    let mut faces = Vec::new();
    while faces.len() < rng.random_range(4..16) {
        let f = [rng.random_range(0..n), rng.random_range(0..n), rng.random_range(0..n)];
        if f[0] != f[1] && f[1] != f[2] && f[0] != f[2] && unit_normal(&f.map(|v| vertices[v])).is_some() {
            faces.push(f);
        }
    }
    TriangleMesh::new(vertices, faces).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metrics_match_reference_twins(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..12);
        let (x, y) = (random_points(&mut rng, n), random_points(&mut rng, n));
        prop_assert!((mpvpe(&x, &y).unwrap() - reference::mpvpe(&x, &y)).abs() <= 1e-9);
        let s = rng.random_range(2..6);
        let set: Vec<_> = (0..s).map(|_| random_points(&mut rng, n)).collect();
        prop_assert!((apd(&set).unwrap() - reference::apd(&set)).abs() <= 1e-9);
        let m = random_mesh(seed);
        prop_assert_eq!(intersecting_faces(&m).unwrap(), intersecting_faces_all_pairs(&m).unwrap());
    }

    #[test]
    fn translation_and_order_invariance(seed in 0u64..1_000_000, ox in -3.0f32..3.0, oy in -3.0f32..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = (random_points(&mut rng, 7), random_points(&mut rng, 7));
        let off = [ox, oy, 0.5];
        let base = mpvpe(&x, &y).unwrap();
        prop_assert!((mpvpe(&shifted(&x, off), &shifted(&y, off)).unwrap() - base).abs() <= 1e-5);
        let norm = ((ox * ox + oy * oy + 0.25) as f64).sqrt();
        prop_assert!((mpvpe(&x, &shifted(&x, off)).unwrap() - norm).abs() <= 1e-5);

        let mut set: Vec<_> = (0..5).map(|_| random_points(&mut rng, 4)).collect();
        let a = apd(&set).unwrap();
        let moved: Vec<_> = set.iter().map(|s| shifted(s, off)).collect();
        prop_assert!((apd(&moved).unwrap() - a).abs() <= 1e-5);
        set.reverse();
        set.swap(0, 3);
        prop_assert!((apd(&set).unwrap() - a).abs() <= 1e-12);
    }
}
