//! Central finite-difference checks of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NormMode, OpKind, TensorId};
use crate::error::Result;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error gate used by every gradient check.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared against this magnitude instead,
/// so vanishing components are judged by absolute error `FD_TOLERANCE * REL_FLOOR`.
pub const REL_FLOOR: f64 = 1e-4;

/// One evaluation of the checked scalar function.
#[derive(Clone, Copy, Debug)]
pub struct Probe {
    pub value: f64,
    /// Hash of the branch decisions taken at non-smooth ops.
    pub kink_signature: u64,
}

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates whose ±h probes crossed a relu or max-pool kink.
    pub skipped: usize,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol && self.checked > 0
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare `analytic` against central differences of `f` at `x0`.
///
/// The quotient is Richardson-extrapolated from steps `h` and `h/2`, which
/// cancels the second-order truncation term. Coordinates where any probe
/// lands on a different side of a kink than the base point are skipped and
/// counted, since the difference quotient is meaningless there.
pub fn finite_diff_check<F>(mut f: F, x0: &[f64], analytic: &[f64], h: f64) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> Result<Probe>,
{
    assert_eq!(x0.len(), analytic.len(), "gradient length must match parameters");
    let base = f(x0)?;
    let mut report = FdReport::default();
    let mut x = x0.to_vec();
    'coords: for i in 0..x.len() {
        let orig = x[i];
        let mut quotients = [0.0; 2];
        for (q, step) in quotients.iter_mut().zip([h, 0.5 * h]) {
            x[i] = orig + step;
            let plus = f(&x)?;
            x[i] = orig - step;
            let minus = f(&x)?;
            x[i] = orig;
            if plus.kink_signature != base.kink_signature || minus.kink_signature != base.kink_signature {
                report.skipped += 1;
                continue 'coords;
            }
            *q = (plus.value - minus.value) / (2.0 * step);
        }
        let numeric = (4.0 * quotients[1] - quotients[0]) / 3.0;
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}

type Builder = fn(&mut Graph<f64>, &[TensorId]) -> Result<TensorId>;

struct OpCase {
    kind: OpKind,
    shapes: Vec<Vec<usize>>,
    build: Builder,
    /// Keep every input at least this far from zero (relu kink).
    min_abs: f64,
}

fn cases() -> Vec<OpCase> {
    fn case(kind: OpKind, shapes: &[&[usize]], build: Builder) -> OpCase {
        OpCase {
            kind,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
            build,
            min_abs: 0.0,
        }
    }
    let mut relu = case(OpKind::Relu, &[&[4, 3]], |g, x| Ok(g.relu(x[0])));
    relu.min_abs = 0.1;
    vec![
        case(OpKind::MatMul, &[&[2, 3, 4], &[4, 5]], |g, x| g.matmul(x[0], x[1])),
        case(OpKind::BatchMatMul, &[&[2, 3, 4], &[2, 4, 2]], |g, x| {
            g.batch_matmul(x[0], x[1])
        }),
        case(OpKind::Add, &[&[3, 4], &[4]], |g, x| g.add(x[0], x[1])),
        case(OpKind::Sub, &[&[3, 4], &[3, 4]], |g, x| g.sub(x[0], x[1])),
        case(OpKind::Mul, &[&[3, 4], &[3, 4]], |g, x| g.mul(x[0], x[1])),
        case(OpKind::Scale, &[&[5]], |g, x| Ok(g.scale(x[0], -1.7))),
        relu,
        case(OpKind::Softmax, &[&[3, 5]], |g, x| g.softmax(x[0])),
        case(OpKind::BatchNorm, &[&[6, 3], &[3], &[3]], |g, x| {
            Ok(g.batch_norm(x[0], x[1], x[2], NormMode::Train)?.0)
        }),
        case(OpKind::MaxPool, &[&[2, 5, 3]], |g, x| g.max_pool_over_points(x[0])),
        case(OpKind::Mean, &[&[2, 3, 4]], |g, x| g.mean_axis(x[0], 1)),
        case(OpKind::Sum, &[&[2, 3, 4]], |g, x| g.sum_axis(x[0], 2)),
        case(OpKind::Concat, &[&[2, 3, 2], &[2, 1, 2]], |g, x| {
            g.concat(&[x[0], x[1]], 1)
        }),
        case(OpKind::Narrow, &[&[3, 5, 2]], |g, x| g.narrow(x[0], 1, 1, 3)),
        case(OpKind::L2Normalize, &[&[3, 4]], |g, x| g.l2_normalize(x[0])),
        case(OpKind::Permute, &[&[2, 3, 4]], |g, x| g.permute(x[0], &[1, 2, 0])),
        case(OpKind::Reshape, &[&[2, 6]], |g, x| g.reshape(x[0], &[3, 4])),
    ]
}

/// Result of checking one primitive.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: OpKind,
    pub report: FdReport,
}

fn evaluate_case(
    case: &OpCase,
    flat: &[f64],
    weights: &[f64],
    fault: Option<OpKind>,
    want_grad: bool,
) -> Result<(Probe, Vec<f64>)> {
    let mut g = Graph::<f64>::new();
    g.track_kinks(true);
    if let Some(kind) = fault {
        g.inject_fault(kind);
    }
    let mut leaves = Vec::new();
    let mut offset = 0;
    for shape in &case.shapes {
        let n: usize = shape.iter().product();
        leaves.push(g.variable(shape, flat[offset..offset + n].to_vec())?);
        offset += n;
    }
    let out = (case.build)(&mut g, &leaves)?;
    let shape = g.shape(out).to_vec();
    let w = g.constant(&shape, weights.to_vec())?;
    let weighted = g.mul(out, w)?;
    let loss = g.sum(weighted);
    let probe = Probe {
        value: g.scalar(loss),
        kink_signature: g.kink_signature(),
    };
    let mut grad = Vec::new();
    if want_grad {
        g.backward(loss)?;
        for &leaf in &leaves {
            match g.grad(leaf) {
                Some(v) => grad.extend_from_slice(v),
                None => grad.extend(std::iter::repeat_n(0.0, g.value(leaf).len())),
            }
        }
    }
    Ok((probe, grad))
}

/// Check every differentiable primitive on random f64 inputs.
///
/// `fault` corrupts the backward pass of one op kind; the harness must then
/// report that op as failing.
pub fn check_primitives(seed: u64, fault: Option<OpKind>) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for case in cases() {
        let n: usize = case.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        let x0: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = rng.gen_range(-1.0..1.0);
                if v.abs() < case.min_abs {
                    v.signum() * case.min_abs + v
                } else {
                    v
                }
            })
            .collect();
        let probe_graph = {
            let mut g = Graph::<f64>::new();
            let mut leaves = Vec::new();
            let mut offset = 0;
            for shape in &case.shapes {
                let k: usize = shape.iter().product();
                leaves.push(g.constant(shape, x0[offset..offset + k].to_vec())?);
                offset += k;
            }
            let o = (case.build)(&mut g, &leaves)?;
            g.value(o).len()
        };
        let weights: Vec<f64> = (0..probe_graph).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, analytic) = evaluate_case(&case, &x0, &weights, fault, true)?;
        let report = finite_diff_check(
            |x| Ok(evaluate_case(&case, x, &weights, None, false)?.0),
            &x0,
            &analytic,
            FD_STEP,
        )?;
        out.push(OpCheck { op: case.kind, report });
    }
    Ok(out)
}
