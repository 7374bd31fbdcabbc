mod common;

use common::random_cloud;
use pocca_core::autodiff::{Graph, ParamGroup, ParamTensor, Precision, UpdateRule};
use pocca_core::geometry::{AugmentParams, PointCloud, SamplerConfig};
use pocca_core::model::{
    forward_pocca, prepare_views, BnMode, ForwardOptions, ModelConfig, ViewConfig, ViewPair, CA_ONLINE, CA_TARGET,
    ENCODER_ONLINE, ENCODER_TARGET,
};
use pocca_core::train::{
    collapse_metrics, cosine_lr, ema_update, similarity_loss, total_loss, total_loss_node, TrainConfig, Trainer,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn vector(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, d)
}

fn group(name: &str, values: Vec<f64>) -> ParamGroup<f64> {
    let mut g = ParamGroup::new(name, UpdateRule::Ema);
    g.tensors.push(ParamTensor::new("w", &[values.len()], values));
    g
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        dim: 16,
        encoder_hidden: [16, 16],
        heads: 2,
        ..ModelConfig::default()
    }
}

fn tiny_views() -> ViewConfig {
    ViewConfig {
        augment: AugmentParams::default(),
        sampler: SamplerConfig {
            n_patches_per_scale: 2,
            patch_size: 8,
            scales: vec![0, 1],
            ..SamplerConfig::default()
        },
        global_points: 32,
    }
}

fn tiny_trainer<T: pocca_core::autodiff::Real>(seed: u64, clouds: usize, epochs: u64) -> Trainer<T> {
    let data: Vec<PointCloud> = (0..clouds)
        .map(|i| random_cloud(64, seed.wrapping_mul(1000).wrapping_add(i as u64)))
        .collect();
    let cfg = TrainConfig {
        lr: 3e-3,
        epochs,
        batch_size: 4,
        precision: T::PRECISION,
        seed,
        ..TrainConfig::default()
    };
    Trainer::new(cfg, &tiny_model(), tiny_views(), data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn loss_terms_are_bounded(d in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = || -> Vec<f64> { (0..d).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let (p1, z2, p2, z1) = (v(), v(), v(), v());
        let a = similarity_loss(&p1, &z2).unwrap();
        let b = similarity_loss(&p2, &z1).unwrap();
        prop_assert!((0.0..=4.0 + 1e-12).contains(&a) && (0.0..=4.0 + 1e-12).contains(&b));
        let total = total_loss(&p1, &z2, &p2, &z1).unwrap();
        prop_assert!((0.0..=8.0 + 1e-12).contains(&total));
        prop_assert_eq!(total, total_loss(&p2, &z1, &p1, &z2).unwrap());
    }

    #[test]
    fn loss_of_scaled_copies_is_zero_and_of_negation_is_four(z in vector(7), c in 0.01f64..100.0) {
        prop_assume!(z.iter().map(|v| v * v).sum::<f64>() > 1e-6);
        let p: Vec<f64> = z.iter().map(|v| v * c).collect();
        let n: Vec<f64> = z.iter().map(|v| -v).collect();
        prop_assert!(similarity_loss(&p, &z).unwrap().abs() < 1e-9);
        prop_assert!((similarity_loss(&n, &z).unwrap() - 4.0).abs() < 1e-9);
        prop_assert!(total_loss(&p, &z, &z, &p).unwrap().abs() < 1e-9);
    }

    #[test]
    fn ema_fixed_point_and_copy_limit_are_exact(v in vector(9), w in vector(9), tau in 0.0f64..1.0) {
        let mut t = group("t", v.clone());
        ema_update(&mut t, &group("o", v.clone()), tau).unwrap();
        prop_assert_eq!(&t.tensors[0].value, &v);
        let mut t = group("t", v.clone());
        ema_update(&mut t, &group("o", w.clone()), 0.0).unwrap();
        prop_assert_eq!(&t.tensors[0].value, &w);
        let mut t = group("t", v.clone());
        ema_update(&mut t, &group("o", w.clone()), tau).unwrap();
        for ((r, a), b) in t.tensors[0].value.iter().zip(&v).zip(&w) {
            prop_assert!(*r >= a.min(*b) - 1e-12 && *r <= a.max(*b) + 1e-12);
            prop_assert!((r - (tau * a + (1.0 - tau) * b)).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_schedule_decreases_within_bounds(total in 1u64..5000, lr0 in 1e-6f64..1.0, frac in 0.0f64..1.0) {
        let s = (frac * total as f64) as u64;
        let a = cosine_lr(s, total, lr0);
        prop_assert!((0.0..=lr0).contains(&a));
        prop_assert!(cosine_lr(s + 1, total, lr0) <= a);
    }
}

#[test]
fn ema_arithmetic_in_both_precisions() {
    let mut t = group("t", vec![1.0]);
    ema_update(&mut t, &group("o", vec![0.0]), 0.99).unwrap();
    assert_eq!(t.tensors[0].value, vec![0.99]);
    let mut t32 = ParamGroup::<f32>::new("t", UpdateRule::Ema);
    t32.tensors.push(ParamTensor::new("w", &[1], vec![1.0f32]));
    let mut o32 = ParamGroup::<f32>::new("o", UpdateRule::Backprop);
    o32.tensors.push(ParamTensor::new("w", &[1], vec![0.0f32]));
    ema_update(&mut t32, &o32, 0.99).unwrap();
    assert_eq!(t32.tensors[0].value, vec![0.99f32]);
}

#[test]
fn cosine_schedule_landmarks() {
    assert_eq!(cosine_lr(0, 100, 0.5), 0.5);
    assert_eq!(cosine_lr(100, 100, 0.5), 0.0);
    assert_eq!(cosine_lr(50, 100, 0.5), 0.25);
}

#[test]
fn gaussian_embeddings_have_inverse_sqrt_d_spread() {
    let (n, d) = (256, 128);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let m = collapse_metrics(&z, d).unwrap();
    let target = 1.0 / (d as f64).sqrt();
    assert!((m.per_dim_std - target).abs() < 0.2 * target, "{}", m.per_dim_std);
    assert!(m.mean_pairwise_cosine.abs() < 0.02);
}

fn swapped(v: &ViewPair) -> ViewPair {
    ViewPair {
        sigma1: v.sigma2.clone(),
        sigma2: v.sigma1.clone(),
        patches_a: v.patches_b.clone(),
        patches_b: v.patches_a.clone(),
    }
}

#[test]
fn swapping_the_augmentations_leaves_the_batch_loss_unchanged() {
    let params = pocca_core::train::init_params::<f64>(&tiny_model(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pairs: Vec<ViewPair> = (0..3)
        .map(|i| prepare_views(&random_cloud(64, i), &tiny_views(), &mut rng).unwrap())
        .collect();
    let loss = |pairs: &[ViewPair]| {
        let mut g = Graph::<f64>::new();
        let out = forward_pocca(&mut g, &params, pairs, BnMode::Train, ForwardOptions::default()).unwrap();
        let l = total_loss_node(&mut g, &out).unwrap();
        g.scalar(l)
    };
    let a = loss(&pairs);
    let b = loss(&pairs.iter().map(swapped).collect::<Vec<_>>());
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
}

#[test]
fn ema_groups_change_only_through_the_momentum_update() {
    let mut tr = tiny_trainer::<f64>(1, 8, 3);
    for _ in 0..6 {
        let before = tr.params.clone();
        let m = tr.step().unwrap();
        assert!(m.loss.is_finite() && (0.0..=8.0).contains(&m.loss));
        for (target, online) in [(ENCODER_TARGET, ENCODER_ONLINE), (CA_TARGET, CA_ONLINE)] {
            let mut expected = before.groups[target].clone();
            ema_update(&mut expected, &tr.params.groups[online], tr.cfg.tau).unwrap();
            assert_eq!(tr.params.groups[target].tensors, expected.tensors);
        }
    }
}

#[test]
fn identical_seed_and_config_give_identical_loss_traces() {
    let a = tiny_trainer::<f64>(5, 8, 2).run(None, |_, _| Ok(())).unwrap();
    let b = tiny_trainer::<f64>(5, 8, 2).run(None, |_, _| Ok(())).unwrap();
    assert_eq!(a, b);
    let c = tiny_trainer::<f64>(6, 8, 2).run(None, |_, _| Ok(())).unwrap();
    assert_ne!(a, c);
}

#[test]
fn loss_on_a_fixed_tiny_batch_halves_within_200_steps() {
    let mut ratios: Vec<f64> = (0..5)
        .map(|seed| {
            let mut tr = tiny_trainer::<f32>(seed, 4, 200);
            let trace = tr.run(None, |_, _| Ok(())).unwrap();
            assert_eq!(trace.len(), 200);
            trace.last().unwrap().loss / trace[0].loss
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    assert!(ratios[2] < 0.5, "final/initial ratios {ratios:?}");
}

#[test]
fn precision_mismatch_is_rejected() {
    let data: Vec<PointCloud> = (0..4).map(|i| random_cloud(64, i)).collect();
    let cfg = TrainConfig {
        precision: Precision::F64,
        batch_size: 4,
        ..TrainConfig::default()
    };
    assert!(Trainer::<f32>::new(cfg, &tiny_model(), tiny_views(), data).is_err());
}
