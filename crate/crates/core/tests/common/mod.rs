//! Brute-force oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use pocca_core::geometry::{Point3, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn sq(a: &Point3, b: &Point3) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Greedy farthest-point selection, recomputing every min-distance from
/// scratch; ties go to the lowest index.
pub fn fps_oracle(points: &[Point3], m: usize, seed: usize) -> Vec<usize> {
    let mut chosen = vec![seed];
    while chosen.len() < m {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..points.len() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen
                .iter()
                .map(|&c| sq(&points[i], &points[c]))
                .fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        chosen.push(best.expect("unselected point remains").0);
    }
    chosen
}

/// First `k` indices after a full sort by (distance, index).
pub fn knn_oracle(points: &[Point3], query: &Point3, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| sq(&points[a], query).total_cmp(&sq(&points[b], query)).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn random_points(n: usize, seed: u64) -> Vec<Point3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
        .collect()
}

pub fn random_cloud(n: usize, seed: u64) -> PointCloud {
    PointCloud::new(random_points(n, seed)).expect("finite points")
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
