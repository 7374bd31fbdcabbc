use pocca_core::autodiff::gradcheck::{check_primitives, finite_diff_check, Probe, FD_STEP, FD_TOLERANCE};
use pocca_core::autodiff::{Graph, NormMode, OpKind};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=rows, 1..=cols).prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(-30.0f64..30.0, r * c)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions((r, c, v) in matrix(6, 9)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&[r, c], v).unwrap();
        let s = g.softmax(x).unwrap();
        for row in g.value(s).chunks(c) {
            prop_assert!(row.iter().all(|p| *p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn l2_normalize_gives_unit_rows((r, c, v) in matrix(6, 9)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&[r, c], v.clone()).unwrap();
        let y = g.l2_normalize(x).unwrap();
        for (row, src) in g.value(y).chunks(c).zip(v.chunks(c)) {
            if src.iter().map(|a| a * a).sum::<f64>().sqrt() > 1e-6 {
                prop_assert!((row.iter().map(|a| a * a).sum::<f64>().sqrt() - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn batch_norm_standardizes_each_feature((r, c, v) in matrix(12, 5)) {
        prop_assume!(r >= 2);
        let mut g = Graph::<f64>::new();
        let x = g.constant(&[r, c], v.clone()).unwrap();
        let gamma = g.constant(&[c], vec![1.0; c]).unwrap();
        let beta = g.constant(&[c], vec![0.0; c]).unwrap();
        let (y, _) = g.batch_norm(x, gamma, beta, NormMode::Train).unwrap();
        let out = g.value(y);
        for j in 0..c {
            let col: Vec<f64> = (0..r).map(|i| out[i * c + j]).collect();
            let src: Vec<f64> = (0..r).map(|i| v[i * c + j]).collect();
            let mean = col.iter().sum::<f64>() / r as f64;
            let var = col.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / r as f64;
            let src_mean = src.iter().sum::<f64>() / r as f64;
            let src_var = src.iter().map(|a| (a - src_mean).powi(2)).sum::<f64>() / r as f64;
            let expected = src_var / (src_var + pocca_core::autodiff::BN_EPS);
            prop_assert!(mean.abs() <= 1e-9);
            prop_assert!((var - expected).abs() <= 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn every_primitive_matches_finite_differences(seed in any::<u64>()) {
        for check in check_primitives(seed, None).unwrap() {
            prop_assert!(check.report.passes(FD_TOLERANCE), "{}: {:?}", check.op.name(), check.report);
        }
    }
}

#[test]
fn stopped_edge_passes_no_gradient_to_ancestors() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(&[3], vec![1.0, -2.0, 0.5]).unwrap();
    let h = g.relu(x);
    let h = g.scale(h, 3.0);
    let s = g.stop_gradient(h);
    let y = g.variable(&[3], vec![0.3, 0.1, 2.0]).unwrap();
    let prod = g.mul(s, y).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    assert!(g.grad(x).is_none_or(|v| v.iter().all(|a| *a == 0.0)));
    assert_eq!(g.grad(y).unwrap(), g.value(s));
}

#[test]
fn mixed_graph_gradient_matches_finite_differences() {
    // loss = sum(stop(x * x) * x * w) + sum(x * x)
    let x0 = vec![0.7, -1.3, 0.2, 2.1];
    let w = vec![0.5, -0.25, 1.5, 0.75];
    let build = |g: &mut Graph<f64>, x: &[f64]| {
        let xs = g.variable(&[4], x.to_vec()).unwrap();
        let wv = g.constant(&[4], w.clone()).unwrap();
        let sq = g.mul(xs, xs).unwrap();
        let stopped = g.stop_gradient(sq);
        let a = g.mul(stopped, xs).unwrap();
        let a = g.mul(a, wv).unwrap();
        let b = g.mul(xs, xs).unwrap();
        let s = g.add(a, b).unwrap();
        (xs, g.sum(s))
    };
    let mut g = Graph::<f64>::new();
    let (xs, loss) = build(&mut g, &x0);
    let frozen = g.stop_gradient_values();
    g.backward(loss).unwrap();
    let analytic = g.grad(xs).unwrap().to_vec();
    for i in 0..4 {
        let expected = x0[i] * x0[i] * w[i] + 2.0 * x0[i];
        assert!((analytic[i] - expected).abs() < 1e-12);
    }
    let report = finite_diff_check(
        |x| {
            let mut g = Graph::<f64>::new();
            g.replay_stop_gradients(frozen.clone());
            let (_, loss) = build(&mut g, x);
            Ok(Probe {
                value: g.scalar(loss),
                kink_signature: 0,
            })
        },
        &x0,
        &analytic,
        FD_STEP,
    )
    .unwrap();
    assert!(report.passes(FD_TOLERANCE), "{report:?}");
}

#[test]
fn loss_from_stopped_branch_only_has_zero_gradients() {
    let mut g = Graph::<f64>::new();
    let w = g.variable(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let x = g.constant(&[1, 2], vec![0.5, -1.0]).unwrap();
    let y = g.matmul(x, w).unwrap();
    let s = g.stop_gradient(y);
    let loss = g.sum(s);
    g.backward(loss).unwrap();
    assert!(g.grad(w).is_none_or(|v| v.iter().all(|a| *a == 0.0)));
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut g = Graph::<f64>::new();
        let a = g
            .constant(&[3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect())
            .unwrap();
        let b = g
            .constant(&[4, 2], (0..8).map(|i| (i as f64 * 1.1).cos()).collect())
            .unwrap();
        let m = g.matmul(a, b).unwrap();
        let s = g.softmax(m).unwrap();
        let n = g.l2_normalize(s).unwrap();
        g.value(n).to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn every_differentiable_op_is_checked() {
    let checked: Vec<OpKind> = check_primitives(0, None).unwrap().into_iter().map(|c| c.op).collect();
    for kind in OpKind::DIFFERENTIABLE {
        assert!(checked.contains(&kind), "{} is not covered", kind.name());
    }
}
