use crate::error::{invalid, Result};

pub type Point3 = [f64; 3];

pub fn sq_dist(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

pub fn norm(p: &Point3) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

/// An ordered set of 3D points with an optional class id and optional
/// per-point labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    pub label: Option<u32>,
    point_labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return invalid("point cloud holds a non-finite coordinate");
        }
        Ok(PointCloud {
            points,
            label: None,
            point_labels: None,
        })
    }

    pub fn with_label(mut self, label: u32) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_point_labels(mut self, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != self.points.len() {
            return invalid(format!(
                "{} point labels for {} points",
                labels.len(),
                self.points.len()
            ));
        }
        self.point_labels = Some(labels);
        Ok(self)
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn point_labels(&self) -> Option<&[u32]> {
        self.point_labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point3 {
        let n = self.points.len().max(1) as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    /// Points at `indices`, in that order. Labels follow the points.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            label: self.label,
            point_labels: self
                .point_labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Replace the coordinates, keeping labels. Length must not change.
    pub(crate) fn with_points(&self, points: Vec<Point3>) -> PointCloud {
        debug_assert_eq!(points.len(), self.points.len());
        PointCloud {
            points,
            label: self.label,
            point_labels: self.point_labels.clone(),
        }
    }

    /// Flat `[x0, y0, z0, x1, ...]` buffer.
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }
}

/// Center at the origin and scale so the furthest point has norm 1.
///
/// A cloud whose points all coincide maps to all zeros.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> Result<PointCloud> {
    if cloud.is_empty() {
        return invalid("cannot normalize an empty cloud");
    }
    let c = cloud.centroid();
    let centered: Vec<Point3> = cloud
        .points()
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let radius = centered.iter().map(norm).fold(0.0, f64::max);
    let points = if radius > 0.0 {
        centered.iter().map(|p| p.map(|v| v / radius)).collect()
    } else {
        vec![[0.0; 3]; centered.len()]
    };
    Ok(cloud.with_points(points))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite() {
        assert!(PointCloud::new(vec![[0.0, f64::NAN, 0.0]]).is_err());
    }

    #[test]
    fn two_point_cloud_normalizes_symmetrically() {
        let c = PointCloud::new(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        let n = normalize_unit_sphere(&c).unwrap();
        assert_eq!(n.points(), &[[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn unit_sphere_cloud_is_unchanged() {
        let c = PointCloud::new(vec![
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 0.5, 0.0],
            [0.0, -0.5, 0.0],
        ])
        .unwrap();
        let n = normalize_unit_sphere(&c).unwrap();
        assert_eq!(n.points(), c.points());
    }

    #[test]
    fn coincident_points_map_to_zero() {
        let c = PointCloud::new(vec![[3.0, 3.0, 3.0]; 4]).unwrap();
        let n = normalize_unit_sphere(&c).unwrap();
        assert!(n.points().iter().all(|p| *p == [0.0; 3]));
    }

    #[test]
    fn empty_cloud_is_invalid() {
        let c = PointCloud::new(vec![]).unwrap();
        assert!(matches!(normalize_unit_sphere(&c), Err(crate::Error::InvalidInput(_))));
    }

    #[test]
    fn point_labels_follow_selection() {
        let c = PointCloud::new(vec![[0.0; 3], [1.0; 3], [2.0; 3]])
            .unwrap()
            .with_point_labels(vec![7, 8, 9])
            .unwrap();
        let s = c.select(&[2, 0]);
        assert_eq!(s.point_labels(), Some(&[9, 7][..]));
    }
}
