use pocca_core::eval::{
    evaluate, few_shot_probe, generate_dataset, linear_probe, run_experiment, sample_shape, DatasetConfig, Experiment,
    Features, ShapeClass, SoftmaxProbe, SyntheticDataset,
};
use pocca_core::geometry::{norm, Point3, PointCloud};
use pocca_core::model::ModelConfig;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn radial_stats(cloud: &PointCloud) -> [f64; 2] {
    let n = cloud.points().len() as f64;
    let c: Point3 = std::array::from_fn(|k| cloud.points().iter().map(|p| p[k]).sum::<f64>() / n);
    let r: Vec<f64> = cloud
        .points()
        .iter()
        .map(|p| norm(&[p[0] - c[0], p[1] - c[1], p[2] - c[2]]))
        .collect();
    let mean = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    [mean, var.sqrt()]
}

fn gaussian_features(n: usize, d: usize, classes: usize, rng: &mut ChaCha8Rng) -> Features {
    let values = (0..n * d).map(|_| StandardNormal.sample(rng)).collect();
    let labels = (0..n).map(|i| i % classes).collect();
    Features::new(values, d, labels).unwrap()
}

/// Class means at distinct corners plus unit noise.
fn blob_features(per_class: usize, d: usize, classes: usize, sep: f64, seed: u64) -> Features {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for i in 0..per_class * classes {
        let c = i % classes;
        for j in 0..d {
            let centre = if j == c % d { sep } else { 0.0 };
            values.push(
                centre + {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z
                },
            );
        }
        labels.push(c);
    }
    Features::new(values, d, labels).unwrap()
}

#[test]
fn sphere_and_plane_separate_by_nearest_centroid() {
    let cfg = DatasetConfig {
        classes: vec![ShapeClass::Sphere, ShapeClass::PlaneWithHole],
        train_per_class: 30,
        test_per_class: 50,
        points: 256,
        ..DatasetConfig::default()
    };
    let data = generate_dataset(&cfg, 3).unwrap();
    let mut centroids = [[0.0; 2]; 2];
    let mut counts = [0.0; 2];
    for c in &data.train {
        let l = c.label.unwrap() as usize;
        let s = radial_stats(c);
        centroids[l][0] += s[0];
        centroids[l][1] += s[1];
        counts[l] += 1.0;
    }
    for l in 0..2 {
        centroids[l].iter_mut().for_each(|v| *v /= counts[l]);
    }
    let correct = data
        .test
        .iter()
        .filter(|c| {
            let s = radial_stats(c);
            let d = |m: &[f64; 2]| (s[0] - m[0]).powi(2) + (s[1] - m[1]).powi(2);
            let pred = usize::from(d(&centroids[1]) < d(&centroids[0]));
            pred == c.label.unwrap() as usize
        })
        .count();
    let acc = correct as f64 / data.test.len() as f64;
    assert!(acc > 0.9, "nearest-centroid accuracy {acc}");
}

#[test]
fn canonical_sphere_has_unit_radius_up_to_noise() {
    let noise = 0.01;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for p in sample_shape(ShapeClass::Sphere, 2000, noise, &mut rng) {
        assert!((norm(&p) - 1.0).abs() <= 3f64.sqrt() * noise + 1e-12);
    }
}

#[test]
fn dataset_is_seed_deterministic_and_seed_sensitive() {
    let cfg = DatasetConfig {
        train_per_class: 2,
        test_per_class: 1,
        points: 64,
        ..DatasetConfig::default()
    };
    let a = generate_dataset(&cfg, 5).unwrap();
    assert_eq!(a, generate_dataset(&cfg, 5).unwrap());
    assert_ne!(a.train, generate_dataset(&cfg, 6).unwrap().train);
    for c in a.train.iter().chain(&a.test) {
        assert_eq!(c.points().len(), 64);
    }
}

#[test]
fn shuffled_labels_give_chance_accuracy() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let train = gaussian_features(400, 8, 4, &mut rng);
    let test = gaussian_features(4000, 8, 4, &mut rng);
    let mut shuffled = train.labels.clone();
    shuffled.shuffle(&mut rng);
    let train = Features::new(train.values, 8, shuffled).unwrap();
    let r = linear_probe(&train, &test, 4).unwrap();
    assert!(
        (r.overall_accuracy - 0.25).abs() <= 0.05,
        "accuracy {}",
        r.overall_accuracy
    );
}

#[test]
fn duplicated_columns_keep_accuracy() {
    let train = blob_features(30, 4, 4, 3.0, 1);
    let test = blob_features(100, 4, 4, 3.0, 2);
    let widen = |f: &Features| {
        let values = (0..f.len())
            .flat_map(|i| f.row(i).iter().chain(f.row(i)).copied().collect::<Vec<_>>())
            .collect();
        Features::new(values, 2 * f.dim, f.labels.clone()).unwrap()
    };
    let a = linear_probe(&train, &test, 4).unwrap();
    let b = linear_probe(&widen(&train), &widen(&test), 4).unwrap();
    assert!(a.overall_accuracy > 0.8);
    // Duplication halves the effective L2 penalty, so a few borderline rows may flip.
    assert!(
        (a.overall_accuracy - b.overall_accuracy).abs() <= 0.01,
        "{} vs {}",
        a.overall_accuracy,
        b.overall_accuracy
    );
}

#[test]
fn probe_fit_converges() {
    let train = blob_features(20, 6, 3, 2.0, 4);
    let p = SoftmaxProbe::fit(&train, 3).unwrap();
    assert!(p.grad_norm < pocca_core::eval::PROBE_GRAD_TOL);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn confusion_rows_sum_to_class_counts(seed in 0u64..1000, classes in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let train = gaussian_features(12 * classes, 3, classes, &mut rng);
        let n_test = rng.gen_range(classes..40);
        let test = gaussian_features(n_test, 3, classes, &mut rng);
        let p = SoftmaxProbe::fit(&train, classes).unwrap();
        let r = evaluate(&p, &test, classes);
        for k in 0..classes {
            let n = test.labels.iter().filter(|&&l| l == k).count();
            prop_assert_eq!(r.confusion[k].iter().sum::<usize>(), n);
            if n > 0 {
                prop_assert!((r.per_class_accuracy[k] - r.confusion[k][k] as f64 / n as f64).abs() < 1e-15);
            }
        }
        let trace: usize = (0..classes).map(|k| r.confusion[k][k]).sum();
        prop_assert!((r.overall_accuracy - trace as f64 / n_test as f64).abs() < 1e-15);
    }

    #[test]
    fn identical_features_give_one_over_x(x in 2usize..6, y in 1usize..4, seed in 0u64..100) {
        let per_class = y + 5;
        let n = per_class * 6;
        let f = Features::new(vec![0.5; n * 2], 2, (0..n).map(|i| i % 6).collect()).unwrap();
        let r = few_shot_probe(&f, x, y, 4, seed).unwrap();
        for a in &r.accuracies {
            prop_assert!((a - 1.0 / x as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn one_way_few_shot_is_perfect() {
    let f = blob_features(6, 3, 3, 0.0, 8);
    let r = few_shot_probe(&f, 1, 2, 10, 0).unwrap();
    assert_eq!(r.mean, 1.0);
    assert_eq!(r.std_error, 0.0);
}

#[test]
fn few_shot_is_seed_deterministic() {
    let f = blob_features(15, 5, 5, 1.5, 3);
    let a = few_shot_probe(&f, 3, 2, 12, 77).unwrap();
    assert_eq!(a, few_shot_probe(&f, 3, 2, 12, 77).unwrap());
    assert_ne!(a.accuracies, few_shot_probe(&f, 3, 2, 12, 78).unwrap().accuracies);
    assert!((a.std_error - a.std / 12f64.sqrt()).abs() < 1e-15);
}

#[test]
fn random_init_encoder_beats_chance() {
    let mut exp = Experiment {
        model: ModelConfig {
            dim: 32,
            encoder_hidden: [32, 32],
            heads: 2,
            ..ModelConfig::default()
        },
        dataset: DatasetConfig {
            train_per_class: 20,
            test_per_class: 10,
            points: 128,
            ..DatasetConfig::default()
        },
        ..Experiment::default()
    };
    exp.views.global_points = 64;
    exp.views.sampler.patch_size = 16;
    let out = run_experiment(&exp, false).unwrap();
    assert_eq!(out.steps, 0);
    assert!(
        out.probe.overall_accuracy > 1.0 / 6.0 + 0.2,
        "accuracy {}",
        out.probe.overall_accuracy
    );
    assert_eq!(
        SyntheticDataset::labels(&generate_dataset(&exp.dataset, exp.dataset.seed).unwrap().test).len(),
        60
    );
}
