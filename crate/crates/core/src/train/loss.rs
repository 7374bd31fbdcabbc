use crate::autodiff::{Graph, Real, TensorId, NORM_EPS};
use crate::error::{invalid, Result};
use crate::model::ForwardOutput;

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / (n + NORM_EPS)).collect()
}

/// `‖p/‖p‖ − z/‖z‖‖² = 2 − 2 cos(p, z)`.
///
/// Norms are guarded by `ε = 1e-12`, so a zero vector normalizes to zero and
/// scores 2 against anything.
pub fn similarity_loss(p: &[f64], z: &[f64]) -> Result<f64> {
    if p.len() != z.len() || p.is_empty() {
        return invalid(format!("similarity of lengths {} and {}", p.len(), z.len()));
    }
    if p.iter().chain(z).any(|x| !x.is_finite()) {
        return invalid("similarity input is not finite");
    }
    let (pu, zu) = (unit(p), unit(z));
    let cos: f64 = pu.iter().zip(&zu).map(|(a, b)| a * b).sum();
    Ok(2.0 - 2.0 * cos)
}

/// Symmetric objective `L(p1, z2) + L(p2, z1)`.
pub fn total_loss(p1: &[f64], z2: &[f64], p2: &[f64], z1: &[f64]) -> Result<f64> {
    Ok(similarity_loss(p1, z2)? + similarity_loss(p2, z1)?)
}

/// Graph form of [`similarity_loss`] over `[B, d]` rows, averaged over `B`.
/// The target enters through a stop-gradient.
pub fn similarity_loss_node<T: Real>(g: &mut Graph<T>, p: TensorId, z: TensorId) -> Result<TensorId> {
    let z = g.stop_gradient(z);
    let pn = g.l2_normalize(p)?;
    let zn = g.l2_normalize(z)?;
    let prod = g.mul(pn, zn)?;
    let axis = g.shape(prod).len() - 1;
    let cos = g.sum_axis(prod, axis)?;
    let mean_cos = g.mean(cos);
    let scaled = g.scale(mean_cos, T::of(-2.0));
    let two = g.constant(&[], vec![T::of(2.0)])?;
    g.add(two, scaled)
}

/// Batch objective of both symmetric passes.
pub fn total_loss_node<T: Real>(g: &mut Graph<T>, out: &ForwardOutput<T>) -> Result<TensorId> {
    let a = similarity_loss_node(g, out.p1, out.z2)?;
    let b = similarity_loss_node(g, out.p2, out.z1)?;
    g.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn algebraic_values() {
        let z = [0.3, -1.2, 2.0];
        assert!(similarity_loss(&[0.6, -2.4, 4.0], &z).unwrap().abs() < 1e-10);
        assert!((similarity_loss(&[1.0, 0.0], &[0.0, 5.0]).unwrap() - 2.0).abs() < 1e-10);
        assert!((similarity_loss(&[-0.3, 1.2, -2.0], &z).unwrap() - 4.0).abs() < 1e-10);
    }

    #[test]
    fn zero_vector_is_guarded() {
        assert_eq!(similarity_loss(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 2.0);
    }

    #[test]
    fn node_matches_scalar_version() {
        let p = [0.2, -0.5, 1.0, 0.3, 0.3, -0.9];
        let z = [1.0, 0.1, 0.0, -0.2, 0.4, 0.8];
        let mut g = Graph::<f64>::new();
        let pi = g.variable(&[2, 3], p.to_vec()).unwrap();
        let zi = g.constant(&[2, 3], z.to_vec()).unwrap();
        let l = similarity_loss_node(&mut g, pi, zi).unwrap();
        let expect = (similarity_loss(&p[..3], &z[..3]).unwrap() + similarity_loss(&p[3..], &z[3..]).unwrap()) / 2.0;
        assert!((g.scalar(l) - expect).abs() < 1e-10);
    }
}
