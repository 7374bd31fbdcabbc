mod common;

use common::{fps_oracle, knn_oracle, random_cloud, sq};
use pocca_core::geometry::io::{decode_pcb1, encode_pcb1, format_text, parse_text};
use pocca_core::geometry::{
    augment, fps, knn, normalize_unit_sphere, patch_radius, sample_patches, AugmentParams, KernelSelection, Point3,
    PointCloud, RotationMode, SamplerConfig, SamplingMethod,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Coordinates on a coarse lattice (many exact distance ties) or continuous.
fn coord() -> impl Strategy<Value = f64> {
    prop_oneof![(-3i32..=3).prop_map(|v| v as f64 * 0.5), -2.0f64..2.0]
}

fn points(lo: usize, hi: usize) -> impl Strategy<Value = Vec<Point3>> {
    prop::collection::vec([coord(), coord(), coord()], lo..=hi)
}

fn method() -> impl Strategy<Value = SamplingMethod> {
    prop_oneof![
        Just(SamplingMethod::KnnMultiscale),
        Just(SamplingMethod::KnnDirect),
        Just(SamplingMethod::SliceCut),
        Just(SamplingMethod::CuboidCut),
        Just(SamplingMethod::SphereCut),
    ]
}

fn pairwise(p: &[Point3]) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            out.push(sq(&p[i], &p[j]).sqrt());
        }
    }
    out
}

proptest! {
    #[test]
    fn fps_matches_greedy_oracle((pts, m, seed) in points(1, 64).prop_flat_map(|p| {
        let n = p.len();
        (Just(p), 1..=n, 0..n)
    })) {
        let cloud = PointCloud::new(pts.clone()).unwrap();
        prop_assert_eq!(fps(&cloud, m, seed).unwrap(), fps_oracle(&pts, m, seed));
    }

    #[test]
    fn knn_matches_full_sort((pts, k) in points(1, 128).prop_flat_map(|p| {
        let n = p.len();
        (Just(p), 0..=n)
    }), query in [coord(), coord(), coord()]) {
        let cloud = PointCloud::new(pts.clone()).unwrap();
        prop_assert_eq!(knn(&cloud, &query, k).unwrap(), knn_oracle(&pts, &query, k));
    }

    #[test]
    fn patches_are_rectangular_subsets(
        seed in any::<u64>(),
        n in 64usize..160,
        k in 2usize..8,
        n_p in 1usize..5,
        scales in prop::sample::subsequence(vec![0u32, 1, 2], 1..=3),
        method in method(),
        random_kernels in any::<bool>(),
    ) {
        let cloud = random_cloud(n, seed);
        let cfg = SamplerConfig {
            n_patches_per_scale: n_p,
            patch_size: k,
            scales: scales.clone(),
            method,
            kernel_selection: if random_kernels { KernelSelection::Random } else { KernelSelection::Fps },
        };
        let set = sample_patches(&cloud, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(set.len(), n_p * scales.len());
        prop_assert_eq!(set.indices.len(), set.len());
        for i in 0..set.len() {
            prop_assert_eq!(set.patches[i].len(), k);
            prop_assert!(set.indices[i].iter().all(|&j| j < n));
            let gathered: Vec<Point3> = set.indices[i].iter().map(|&j| cloud.points()[j]).collect();
            prop_assert_eq!(&gathered, &set.patches[i]);
            prop_assert_eq!(set.scale_tags[i], scales[i / n_p]);
            prop_assert_eq!(set.kernel_indices[i], set.kernel_indices[i % n_p]);
            if method.is_knn() {
                let mut distinct = set.indices[i].clone();
                distinct.sort_unstable();
                distinct.dedup();
                prop_assert_eq!(distinct.len(), k);
            }
        }
    }

    #[test]
    fn scale_zero_multiscale_is_direct_knn(seed in any::<u64>(), n in 32usize..128, k in 1usize..16, n_p in 1usize..6) {
        let cloud = random_cloud(n, seed);
        let cfg = SamplerConfig { n_patches_per_scale: n_p, patch_size: k, scales: vec![0], ..SamplerConfig::default() };
        let multi = sample_patches(&cloud, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let direct_cfg = SamplerConfig { method: SamplingMethod::KnnDirect, ..cfg };
        let direct = sample_patches(&cloud, &direct_cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&multi, &direct);
        for (idx, &kernel) in multi.indices.iter().zip(&multi.kernel_indices) {
            prop_assert_eq!(idx, &knn_oracle(cloud.points(), &cloud.points()[kernel], k));
        }
    }

    #[test]
    fn larger_scale_covers_at_least_the_same_radius(seed in any::<u64>(), k in 2usize..12) {
        let cloud = random_cloud(4 * 12 + 16, seed);
        let cfg = SamplerConfig { n_patches_per_scale: 4, patch_size: k, scales: vec![0, 2], ..SamplerConfig::default() };
        let set = sample_patches(&cloud, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for i in 0..4 {
            let c = cloud.points()[set.kernel_indices[i]];
            prop_assert!(patch_radius(&set.patches[i + 4], &c) >= patch_radius(&set.patches[i], &c));
        }
    }

    #[test]
    fn rotation_preserves_pairwise_distances(seed in any::<u64>(), so3 in any::<bool>()) {
        let cloud = random_cloud(40, seed);
        let params = AugmentParams {
            rotation: if so3 { RotationMode::FullSo3 } else { RotationMode::GravityAxis },
            ..AugmentParams::identity()
        };
        let out = augment(&cloud, &params, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (a, b) = (pairwise(cloud.points()), pairwise(out.points()));
        prop_assert!(common::max_abs_diff(&a, &b) <= 1e-6);
    }

    #[test]
    fn fixed_seed_reproduces_augmentation_and_sampling(seed in any::<u64>()) {
        let cloud = random_cloud(128, seed ^ 1);
        let cfg = SamplerConfig { patch_size: 8, ..SamplerConfig::default() };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = augment(&cloud, &AugmentParams::default(), &mut rng).unwrap();
            let p = sample_patches(&a, &cfg, &mut rng).unwrap();
            (a, p)
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn normalization_centers_and_bounds(seed in any::<u64>(), scale in 0.01f64..100.0, shift in -50.0f64..50.0) {
        let raw = random_cloud(100, seed);
        let moved = PointCloud::new(raw.points().iter().map(|p| p.map(|v| v * scale + shift)).collect()).unwrap();
        let out = normalize_unit_sphere(&moved).unwrap();
        let max_norm = out.points().iter().map(|p| sq(p, &[0.0; 3]).sqrt()).fold(0.0, f64::max);
        prop_assert!((max_norm - 1.0).abs() <= 1e-6);
        prop_assert!(sq(&out.centroid(), &[0.0; 3]).sqrt() < 1e-6);
    }

    #[test]
    fn text_and_binary_round_trip(pts in points(1, 40)) {
        let cloud = PointCloud::new(pts.clone()).unwrap();
        prop_assert_eq!(parse_text(&format_text(&cloud, &["hdr".into()])).unwrap(), cloud.clone());
        let as_f32: Vec<Point3> = pts.iter().map(|p| p.map(|v| v as f32 as f64)).collect();
        let decoded = decode_pcb1(&encode_pcb1(&cloud)).unwrap();
        prop_assert_eq!(decoded.points(), as_f32.as_slice());
    }
}

#[test]
fn jitter_displacement_respects_clip() {
    let cloud = random_cloud(10_000, 3);
    let params = AugmentParams {
        jitter_sigma: 0.01,
        jitter_clip: 0.05,
        ..AugmentParams::identity()
    };
    let out = augment(&cloud, &params, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut moved = 0;
    for (a, b) in cloud.points().iter().zip(out.points()) {
        for k in 0..3 {
            let d = (a[k] - b[k]).abs();
            assert!(d <= 0.05 + 1e-12, "displacement {d}");
            moved += usize::from(d > 0.0);
        }
    }
    assert!(moved > 29_000);
}

#[test]
fn eight_patches_per_scale_of_256_points() {
    let cloud = random_cloud(2048, 9);
    let cfg = SamplerConfig {
        n_patches_per_scale: 8,
        patch_size: 256,
        scales: vec![0, 1, 2],
        ..SamplerConfig::default()
    };
    let set = sample_patches(&cloud, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(set.len(), 24);
    assert!(set.patches.iter().all(|p| p.len() == 256));
}

#[test]
fn fps_kernels_are_spread_further_than_random_ones() {
    let cloud = random_cloud(500, 11);
    let min_gap = |kernels: &[usize]| {
        let mut best = f64::INFINITY;
        for (i, &a) in kernels.iter().enumerate() {
            for &b in &kernels[i + 1..] {
                best = best.min(sq(&cloud.points()[a], &cloud.points()[b]));
            }
        }
        best
    };
    let mut wins = 0;
    for seed in 0..20 {
        let mk = |sel| SamplerConfig {
            n_patches_per_scale: 8,
            patch_size: 4,
            scales: vec![0],
            kernel_selection: sel,
            ..SamplerConfig::default()
        };
        let f = sample_patches(&cloud, &mk(KernelSelection::Fps), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let r = sample_patches(
            &cloud,
            &mk(KernelSelection::Random),
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap();
        wins += usize::from(min_gap(&f.kernel_indices[..8]) >= min_gap(&r.kernel_indices[..8]));
    }
    assert!(wins >= 18, "fps spread won {wins}/20");
}
