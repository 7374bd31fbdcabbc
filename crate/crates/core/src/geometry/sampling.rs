//! Global farthest-point sampling, k-nearest-neighbour queries and local
//! patch extraction.
//!
//! All distance comparisons use squared Euclidean distance and break ties
//! by the lower point index.

use std::cmp::Ordering;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cloud::{sq_dist, Point3, PointCloud};
use crate::error::{invalid, Result};

/// Greedy farthest-point sampling of `m` indices starting at `seed_index`.
pub fn fps(cloud: &PointCloud, m: usize, seed_index: usize) -> Result<Vec<usize>> {
    fps_points(cloud.points(), m, seed_index)
}

pub(crate) fn fps_points(points: &[Point3], m: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m == 0 || m > n {
        return invalid(format!("fps needs 1 <= m <= {n}, got {m}"));
    }
    if seed_index >= n {
        return invalid(format!("fps seed index {seed_index} out of range for {n} points"));
    }
    let mut selected = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut order = Vec::with_capacity(m);
    let mut current = seed_index;
    for _ in 0..m {
        order.push(current);
        selected[current] = true;
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if selected[i] {
                continue;
            }
            let d = sq_dist(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(order)
}

fn by_distance(d: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b))
}

/// Indices of the `k` nearest points to `query`, nearest first.
pub fn knn(cloud: &PointCloud, query: &Point3, k: usize) -> Result<Vec<usize>> {
    knn_points(cloud.points(), query, k)
}

pub(crate) fn knn_points(points: &[Point3], query: &Point3, k: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if k > n {
        return invalid(format!("knn asked for {k} neighbours among {n} points"));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let d: Vec<f64> = points.iter().map(|p| sq_dist(p, query)).collect();
    let mut idx: Vec<usize> = (0..n).collect();
    let cmp = by_distance(&d);
    if k < n {
        idx.select_nth_unstable_by(k - 1, &cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(&cmp);
    Ok(idx)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMethod {
    /// Gather `2^α·K` neighbours, FPS-downsample to `K`.
    KnnMultiscale,
    /// Plain `K` nearest neighbours; the scale tag has no effect.
    KnnDirect,
    SliceCut,
    CuboidCut,
    SphereCut,
}

impl SamplingMethod {
    pub fn label(self) -> &'static str {
        match self {
            SamplingMethod::KnnMultiscale => "KNN",
            SamplingMethod::KnnDirect => "Direct KNN",
            SamplingMethod::SliceCut => "Slice-cut",
            SamplingMethod::CuboidCut => "Cuboid-cut",
            SamplingMethod::SphereCut => "Sphere-cut",
        }
    }

    pub fn is_knn(self) -> bool {
        matches!(self, SamplingMethod::KnnMultiscale | SamplingMethod::KnnDirect)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSelection {
    Fps,
    Random,
}

/// Region extents for the shape-cut baselines, in unit-sphere coordinates.
/// They grow with the scale tag so that larger α covers more of the shape.
pub const SPHERE_CUT_RADIUS: f64 = 0.35;
pub const CUBOID_CUT_HALF_EXTENT: f64 = 0.3;
pub const SLICE_CUT_HALF_WIDTH: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_patches_per_scale: usize,
    pub patch_size: usize,
    pub scales: Vec<u32>,
    pub method: SamplingMethod,
    pub kernel_selection: KernelSelection,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_patches_per_scale: 4,
            patch_size: 32,
            scales: vec![0, 1, 2],
            method: SamplingMethod::KnnMultiscale,
            kernel_selection: KernelSelection::Fps,
        }
    }
}

impl SamplerConfig {
    pub fn patches_per_cloud(&self) -> usize {
        self.n_patches_per_scale * self.scales.len()
    }

    pub fn validate(&self, cloud_size: usize) -> Result<()> {
        if self.patch_size == 0 || self.n_patches_per_scale == 0 || self.scales.is_empty() {
            return invalid("sampler needs patch_size, n_patches_per_scale and scales to be non-empty");
        }
        if self.scales.iter().any(|&a| a > 16) {
            return invalid("scale factors above 16 are not supported");
        }
        if self.patch_size > cloud_size {
            return invalid(format!(
                "patch_size {} exceeds cloud size {cloud_size}",
                self.patch_size
            ));
        }
        if self.n_patches_per_scale > cloud_size {
            return invalid(format!(
                "{} kernels requested from {cloud_size} points",
                self.n_patches_per_scale
            ));
        }
        if self.method == SamplingMethod::KnnMultiscale {
            let max_alpha = *self.scales.iter().max().unwrap_or(&0);
            let gathered = self.patch_size << max_alpha;
            if gathered > cloud_size {
                return invalid(format!(
                    "scale {max_alpha} gathers {gathered} neighbours from {cloud_size} points"
                ));
            }
        }
        Ok(())
    }
}

/// Local samples of one cloud: `n_patches_per_scale × |scales|` patches of
/// exactly `patch_size` points each, ordered scale-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<Vec<Point3>>,
    /// Source indices of every patch point.
    pub indices: Vec<Vec<usize>>,
    pub kernel_indices: Vec<usize>,
    pub scale_tags: Vec<u32>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

fn select_kernels(cloud: &PointCloud, cfg: &SamplerConfig, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let n = cloud.len();
    match cfg.kernel_selection {
        KernelSelection::Fps => {
            let seed = rng.gen_range(0..n);
            fps(cloud, cfg.n_patches_per_scale, seed)
        }
        KernelSelection::Random => Ok(index::sample(rng, n, cfg.n_patches_per_scale).into_vec()),
    }
}

/// FPS-downsample `candidates` (source indices) to `k`, seeded at `kernel`
/// when it is among them.
fn downsample(points: &[Point3], candidates: &[usize], kernel: usize, k: usize) -> Result<Vec<usize>> {
    let sub: Vec<Point3> = candidates.iter().map(|&i| points[i]).collect();
    let seed = candidates.iter().position(|&i| i == kernel).unwrap_or(0);
    Ok(fps_points(&sub, k, seed)?.into_iter().map(|j| candidates[j]).collect())
}

fn cut_region(points: &[Point3], kernel: usize, method: SamplingMethod, alpha: u32, axis: usize) -> Vec<usize> {
    let c = points[kernel];
    let growth = 2f64.powi(alpha as i32);
    let inside: Box<dyn Fn(&Point3) -> bool> = match method {
        SamplingMethod::SphereCut => {
            let r = SPHERE_CUT_RADIUS * growth.cbrt();
            let r2 = r * r;
            Box::new(move |p| sq_dist(p, &c) <= r2)
        }
        SamplingMethod::CuboidCut => {
            let h = CUBOID_CUT_HALF_EXTENT * growth.cbrt();
            Box::new(move |p| (0..3).all(|k| (p[k] - c[k]).abs() <= h))
        }
        SamplingMethod::SliceCut => {
            let h = SLICE_CUT_HALF_WIDTH * growth;
            Box::new(move |p| (p[axis] - c[axis]).abs() <= h)
        }
        SamplingMethod::KnnMultiscale | SamplingMethod::KnnDirect => unreachable!("not a cut method"),
    };
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| inside(p))
        .map(|(i, _)| i)
        .collect()
}

/// Extract local patches from `cloud`.
pub fn sample_patches(cloud: &PointCloud, cfg: &SamplerConfig, rng: &mut impl Rng) -> Result<PatchSet> {
    cfg.validate(cloud.len())?;
    let points = cloud.points();
    let k = cfg.patch_size;
    let kernels = select_kernels(cloud, cfg, rng)?;
    let mut set = PatchSet {
        patches: Vec::with_capacity(cfg.patches_per_cloud()),
        indices: Vec::with_capacity(cfg.patches_per_cloud()),
        kernel_indices: Vec::with_capacity(cfg.patches_per_cloud()),
        scale_tags: Vec::with_capacity(cfg.patches_per_cloud()),
    };
    for &alpha in &cfg.scales {
        for &kernel in &kernels {
            let idx = match cfg.method {
                SamplingMethod::KnnDirect => knn_points(points, &points[kernel], k)?,
                SamplingMethod::KnnMultiscale => {
                    let gathered = knn_points(points, &points[kernel], k << alpha)?;
                    if alpha == 0 {
                        gathered
                    } else {
                        downsample(points, &gathered, kernel, k)?
                    }
                }
                method => {
                    let axis = rng.gen_range(0..3);
                    let region = cut_region(points, kernel, method, alpha, axis);
                    if region.len() >= k {
                        downsample(points, &region, kernel, k)?
                    } else {
                        let mut idx = region.clone();
                        while idx.len() < k {
                            idx.push(region[rng.gen_range(0..region.len())]);
                        }
                        idx
                    }
                }
            };
            set.patches.push(idx.iter().map(|&i| points[i]).collect());
            set.indices.push(idx);
            set.kernel_indices.push(kernel);
            set.scale_tags.push(alpha);
        }
    }
    Ok(set)
}

/// Radius of the smallest kernel-centred ball containing the patch.
pub fn patch_radius(patch: &[Point3], center: &Point3) -> f64 {
    patch.iter().map(|p| sq_dist(p, center)).fold(0.0, f64::max).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn square() -> PointCloud {
        PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.5, 0.5, 0.0],
        ])
        .unwrap()
    }

    #[test]
    fn fps_on_square_breaks_ties_low() {
        assert_eq!(fps(&square(), 4, 0).unwrap(), vec![0, 3, 1, 2]);
    }

    #[test]
    fn fps_single_returns_seed() {
        assert_eq!(fps(&square(), 1, 3).unwrap(), vec![3]);
    }

    #[test]
    fn fps_exhaustive_returns_permutation() {
        let mut all = fps(&square(), 5, 2).unwrap();
        assert_eq!(all[0], 2);
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn fps_rejects_oversized_request() {
        assert!(matches!(fps(&square(), 6, 0), Err(crate::Error::InvalidInput(_))));
    }

    #[test]
    fn knn_collinear() {
        let c = PointCloud::new(vec![[3.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        assert_eq!(knn(&c, &[0.0, 0.0, 0.0], 2).unwrap(), vec![2, 1]);
        assert_eq!(knn(&c, &[1.0, 0.0, 0.0], 1).unwrap(), vec![1]);
        assert!(knn(&c, &[0.0; 3], 5).is_err());
    }

    #[test]
    fn knn_ties_prefer_lower_index() {
        let c = PointCloud::new(vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(knn(&c, &[0.0; 3], 3).unwrap(), vec![0, 1, 2]);
    }

    fn blob(n: usize, seed: u64) -> PointCloud {
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
    fn cut_methods_fill_exactly_k() {
        let c = blob(300, 5);
        for method in [
            SamplingMethod::SliceCut,
            SamplingMethod::CuboidCut,
            SamplingMethod::SphereCut,
        ] {
            let cfg = SamplerConfig {
                method,
                patch_size: 16,
                ..SamplerConfig::default()
            };
            let set = sample_patches(&c, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            assert_eq!(set.len(), 12);
            assert!(set.patches.iter().all(|p| p.len() == 16));
            assert!(set.indices.iter().flatten().all(|&i| i < c.len()));
        }
    }

    #[test]
    fn sparse_cut_region_resamples_with_replacement() {
        // two far-apart clusters: a sphere cut around the lone point holds one point
        let mut pts = vec![[5.0, 5.0, 5.0]];
        pts.extend(blob(40, 2).points().iter().copied());
        let c = PointCloud::new(pts).unwrap();
        let region = cut_region(c.points(), 0, SamplingMethod::SphereCut, 0, 0);
        assert_eq!(region, vec![0]);
    }

    #[test]
    fn infeasible_config_is_rejected() {
        let c = blob(100, 1);
        let cfg = SamplerConfig {
            patch_size: 32,
            scales: vec![0, 1, 2],
            ..SamplerConfig::default()
        };
        assert!(sample_patches(&c, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
