use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::cloud::{Point3, PointCloud};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    /// Uniform angle about the z (gravity) axis.
    GravityAxis,
    /// Uniform over SO(3).
    FullSo3,
    /// No rotation.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotation: RotationMode,
    pub scale_range: [f64; 2],
    pub translation_range: [f64; 2],
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            rotation: RotationMode::GravityAxis,
            scale_range: [0.8, 1.25],
            translation_range: [-0.1, 0.1],
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
        }
    }
}

impl AugmentParams {
    /// Leaves every cloud untouched.
    pub fn identity() -> Self {
        AugmentParams {
            rotation: RotationMode::Identity,
            scale_range: [1.0, 1.0],
            translation_range: [0.0, 0.0],
            jitter_sigma: 0.0,
            jitter_clip: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [s0, s1] = self.scale_range;
        let [t0, t1] = self.translation_range;
        if !(s0 > 0.0 && s1 >= s0 && s1.is_finite()) {
            return invalid(format!(
                "scale_range {:?} must be positive and ordered",
                self.scale_range
            ));
        }
        if !(t1 >= t0 && t0.is_finite() && t1.is_finite()) {
            return invalid(format!(
                "translation_range {:?} must be ordered",
                self.translation_range
            ));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return invalid("jitter_sigma must be >= 0");
        }
        if !(self.jitter_clip >= 0.0 && self.jitter_clip.is_finite()) {
            return invalid("jitter_clip must be >= 0");
        }
        Ok(())
    }
}

pub type Mat3 = [[f64; 3]; 3];

pub fn apply(m: &Mat3, p: &Point3) -> Point3 {
    [
        m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
        m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
        m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
    ]
}

pub fn rotation_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Uniform random rotation from a uniform unit quaternion (Shoemake).
pub fn random_rotation(rng: &mut impl Rng) -> Mat3 {
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let u3: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let (w, x, y, z) = (a * u2.sin(), a * u2.cos(), b * u3.sin(), b * u3.cos());
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
        ],
        [
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
        ],
        [
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// `jitter(translate(scale(rotate(points))))` with parameters drawn from `rng`.
pub fn augment(cloud: &PointCloud, params: &AugmentParams, rng: &mut impl Rng) -> Result<PointCloud> {
    params.validate()?;
    let rot = match params.rotation {
        RotationMode::GravityAxis => rotation_z(rng.gen_range(0.0..std::f64::consts::TAU)),
        RotationMode::FullSo3 => random_rotation(rng),
        RotationMode::Identity => [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };
    let scale = uniform(rng, params.scale_range);
    let shift = [
        uniform(rng, params.translation_range),
        uniform(rng, params.translation_range),
        uniform(rng, params.translation_range),
    ];
    let jitter = (params.jitter_sigma > 0.0).then(|| Normal::new(0.0, params.jitter_sigma).expect("sigma validated"));
    let clip = params.jitter_clip;
    let points = cloud
        .points()
        .iter()
        .map(|p| {
            let r = if params.rotation == RotationMode::Identity {
                *p
            } else {
                apply(&rot, p)
            };
            let mut q = [0.0; 3];
            for k in 0..3 {
                q[k] = r[k] * scale + shift[k];
                if let Some(n) = &jitter {
                    q[k] += n.sample(rng).clamp(-clip, clip);
                }
            }
            q
        })
        .collect();
    Ok(cloud.with_points(points))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::cloud::sq_dist;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_params_leave_cloud_unchanged() {
        let c = cloud(50, 1);
        let out = augment(&c, &AugmentParams::identity(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(out, c);
    }

    #[test]
    fn rotation_only_preserves_distances() {
        let c = cloud(40, 3);
        for rotation in [RotationMode::GravityAxis, RotationMode::FullSo3] {
            let params = AugmentParams {
                rotation,
                ..AugmentParams::identity()
            };
            let out = augment(&c, &params, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            for i in 0..c.len() {
                for j in 0..c.len() {
                    let d0 = sq_dist(&c.points()[i], &c.points()[j]).sqrt();
                    let d1 = sq_dist(&out.points()[i], &out.points()[j]).sqrt();
                    assert!((d0 - d1).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn random_rotation_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let m = random_rotation(&mut rng);
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|k| m[i][k] * m[j][k]).sum();
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - expect).abs() < 1e-12);
                }
            }
            let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
            assert!((det - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_scale_range_is_rejected() {
        let params = AugmentParams {
            scale_range: [0.0, 1.0],
            ..AugmentParams::default()
        };
        assert!(augment(&cloud(3, 0), &params, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
