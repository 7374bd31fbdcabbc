use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{apply, normalize_unit_sphere, random_rotation, Point3, PointCloud};
use crate::train::mix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Sphere,
    Cube,
    Cylinder,
    Torus,
    Cone,
    PlaneWithHole,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 6] = [
        ShapeClass::Sphere,
        ShapeClass::Cube,
        ShapeClass::Cylinder,
        ShapeClass::Torus,
        ShapeClass::Cone,
        ShapeClass::PlaneWithHole,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Cube => "cube",
            ShapeClass::Cylinder => "cylinder",
            ShapeClass::Torus => "torus",
            ShapeClass::Cone => "cone",
            ShapeClass::PlaneWithHole => "plane_with_hole",
        }
    }
}

pub const TORUS_MAJOR: f64 = 0.7;
pub const TORUS_MINOR: f64 = 0.3;
pub const CYLINDER_RADIUS: f64 = 0.5;
pub const CONE_RADIUS: f64 = 0.7;
pub const HOLE_RADIUS: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub classes: Vec<ShapeClass>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub points: usize,
    /// Per-coordinate uniform noise bound applied on the canonical surface.
    pub noise: f64,
    /// Per-axis scale factors are drawn from this interval.
    pub scale_range: [f64; 2],
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            classes: ShapeClass::ALL.to_vec(),
            train_per_class: 40,
            test_per_class: 20,
            points: 512,
            noise: 0.01,
            scale_range: [0.8, 1.2],
            seed: 7,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return invalid("dataset.classes needs at least two classes");
        }
        if self.points == 0 || self.train_per_class == 0 {
            return invalid("dataset.points and dataset.train_per_class must be positive");
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return invalid("dataset.scale_range must be positive and ordered");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return invalid("dataset.noise must be >= 0");
        }
        Ok(())
    }
}

/// Class-balanced labelled clouds; `label` is the index into `classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub classes: Vec<ShapeClass>,
    pub train: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
}

impl SyntheticDataset {
    pub fn labels(clouds: &[PointCloud]) -> Vec<usize> {
        clouds
            .iter()
            .map(|c| c.label.expect("labelled cloud") as usize)
            .collect()
    }
}

fn area_pick(rng: &mut impl Rng, areas: &[f64]) -> usize {
    let total: f64 = areas.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (i, a) in areas.iter().enumerate() {
        if u < *a {
            return i;
        }
        u -= a;
    }
    areas.len() - 1
}

fn disk(rng: &mut impl Rng, radius: f64) -> (f64, f64) {
    let r = radius * rng.gen::<f64>().sqrt();
    let t = rng.gen_range(0.0..TAU);
    (r * t.cos(), r * t.sin())
}

fn surface_point(class: ShapeClass, rng: &mut impl Rng) -> Point3 {
    match class {
        ShapeClass::Sphere => {
            let z: f64 = rng.gen_range(-1.0..=1.0);
            let t = rng.gen_range(0.0..TAU);
            let r = (1.0 - z * z).max(0.0).sqrt();
            [r * t.cos(), r * t.sin(), z]
        }
        ShapeClass::Cube => {
            let face = rng.gen_range(0..6);
            let (u, v) = (rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0));
            let s = if face % 2 == 0 { 1.0 } else { -1.0 };
            match face / 2 {
                0 => [s, u, v],
                1 => [u, s, v],
                _ => [u, v, s],
            }
        }
        ShapeClass::Cylinder => {
            let side = TAU * CYLINDER_RADIUS * 2.0;
            let cap = PI * CYLINDER_RADIUS * CYLINDER_RADIUS;
            match area_pick(rng, &[side, cap, cap]) {
                0 => {
                    let t = rng.gen_range(0.0..TAU);
                    [
                        CYLINDER_RADIUS * t.cos(),
                        CYLINDER_RADIUS * t.sin(),
                        rng.gen_range(-1.0..=1.0),
                    ]
                }
                k => {
                    let (x, y) = disk(rng, CYLINDER_RADIUS);
                    [x, y, if k == 1 { 1.0 } else { -1.0 }]
                }
            }
        }
        ShapeClass::Torus => loop {
            let u = rng.gen_range(0.0..TAU);
            let v = rng.gen_range(0.0..TAU);
            let w = (TORUS_MAJOR + TORUS_MINOR * v.cos()) / (TORUS_MAJOR + TORUS_MINOR);
            if rng.gen::<f64>() <= w {
                let ring = TORUS_MAJOR + TORUS_MINOR * v.cos();
                break [ring * u.cos(), ring * u.sin(), TORUS_MINOR * v.sin()];
            }
        },
        ShapeClass::Cone => {
            let slant = (CONE_RADIUS * CONE_RADIUS + 4.0).sqrt();
            let lateral = PI * CONE_RADIUS * slant;
            let base = PI * CONE_RADIUS * CONE_RADIUS;
            if area_pick(rng, &[lateral, base]) == 0 {
                // Distance from the apex is distributed with density ∝ s.
                let s: f64 = rng.gen::<f64>().sqrt();
                let t = rng.gen_range(0.0..TAU);
                let r = CONE_RADIUS * s;
                [r * t.cos(), r * t.sin(), 1.0 - 2.0 * s]
            } else {
                let (x, y) = disk(rng, CONE_RADIUS);
                [x, y, -1.0]
            }
        }
        ShapeClass::PlaneWithHole => loop {
            let (x, y) = (rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0));
            if x * x + y * y >= HOLE_RADIUS * HOLE_RADIUS {
                break [x, y, 0.0];
            }
        },
    }
}

/// `n` points on the canonical surface of `class`, each coordinate perturbed
/// by uniform noise in `±noise`.
pub fn sample_shape(class: ShapeClass, n: usize, noise: f64, rng: &mut impl Rng) -> Vec<Point3> {
    (0..n)
        .map(|_| {
            let p = surface_point(class, rng);
            if noise > 0.0 {
                p.map(|c| c + rng.gen_range(-noise..=noise))
            } else {
                p
            }
        })
        .collect()
}

fn make_sample(cfg: &DatasetConfig, class_index: usize, rng: &mut impl Rng) -> Result<PointCloud> {
    let class = cfg.classes[class_index];
    let raw = sample_shape(class, cfg.points, cfg.noise, rng);
    let [lo, hi] = cfg.scale_range;
    let scale: [f64; 3] = std::array::from_fn(|_| if hi > lo { rng.gen_range(lo..=hi) } else { lo });
    let rot = random_rotation(rng);
    let posed = raw
        .iter()
        .map(|p| apply(&rot, &[p[0] * scale[0], p[1] * scale[1], p[2] * scale[2]]))
        .collect();
    let cloud = PointCloud::new(posed)?.with_label(class_index as u32);
    normalize_unit_sphere(&cloud)
}

const TRAIN_STREAM: u64 = 0x7452_4149;
const TEST_STREAM: u64 = 0x7445_5354;

/// Deterministic per seed. Every sample has its own random stream keyed by
/// split, class and index, so train and test never share a stream.
pub fn generate_dataset(cfg: &DatasetConfig, seed: u64) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let split = |stream: u64, per_class: usize| -> Result<Vec<PointCloud>> {
        let mut out = Vec::with_capacity(per_class * cfg.classes.len());
        for i in 0..per_class {
            for c in 0..cfg.classes.len() {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, stream, (c * per_class + i) as u64));
                out.push(make_sample(cfg, c, &mut rng)?);
            }
        }
        Ok(out)
    };
    Ok(SyntheticDataset {
        classes: cfg.classes.clone(),
        train: split(TRAIN_STREAM, cfg.train_per_class)?,
        test: split(TEST_STREAM, cfg.test_per_class)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::norm;

    #[test]
    fn sphere_points_lie_on_unit_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = 0.02;
        for p in sample_shape(ShapeClass::Sphere, 500, noise, &mut rng) {
            assert!((norm(&p) - 1.0).abs() <= 3f64.sqrt() * noise + 1e-12);
        }
    }

    #[test]
    fn plane_points_avoid_the_hole() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in sample_shape(ShapeClass::PlaneWithHole, 500, 0.0, &mut rng) {
            assert!(p[0] * p[0] + p[1] * p[1] >= HOLE_RADIUS * HOLE_RADIUS);
            assert_eq!(p[2], 0.0);
        }
    }

    #[test]
    fn torus_points_satisfy_implicit_equation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in sample_shape(ShapeClass::Torus, 500, 0.0, &mut rng) {
            let ring = (p[0] * p[0] + p[1] * p[1]).sqrt() - TORUS_MAJOR;
            assert!((ring * ring + p[2] * p[2] - TORUS_MINOR * TORUS_MINOR).abs() < 1e-9);
        }
    }

    #[test]
    fn dataset_is_balanced_and_deterministic() {
        let cfg = DatasetConfig {
            train_per_class: 3,
            test_per_class: 2,
            points: 64,
            ..DatasetConfig::default()
        };
        let a = generate_dataset(&cfg, 11).unwrap();
        let b = generate_dataset(&cfg, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 18);
        assert_eq!(a.test.len(), 12);
        for c in 0..6 {
            assert_eq!(
                SyntheticDataset::labels(&a.train).iter().filter(|&&l| l == c).count(),
                3
            );
        }
        assert_ne!(a.train[0], a.test[0]);
    }

    #[test]
    fn single_class_is_rejected() {
        let cfg = DatasetConfig {
            classes: vec![ShapeClass::Cube],
            ..DatasetConfig::default()
        };
        assert!(generate_dataset(&cfg, 0).is_err());
    }
}
