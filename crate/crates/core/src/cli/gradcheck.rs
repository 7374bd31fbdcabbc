use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{check_primitives, finite_diff_check, FdReport, Probe, FD_STEP, FD_TOLERANCE};
use crate::autodiff::{accumulate_grads, Graph, OpKind, ParamGroup, UpdateRule};
use crate::error::{invalid, Result};
use crate::geometry::{AugmentParams, PointCloud, SamplerConfig};
use crate::model::{
    forward_pocca, prepare_views, BnMode, ForwardOptions, ModelConfig, ModelParams, ViewConfig, ViewPair,
};
use crate::train::total_loss_node;

/// Small full-model setup: `d = 8`, two patches of 4 points, 16-point clouds.
pub const MODEL_CHECK_DIM: usize = 8;
pub const MODEL_CHECK_POINTS: usize = 16;
pub const MODEL_CHECK_PATCHES: usize = 2;
pub const MODEL_CHECK_BATCH: usize = 2;

/// One line of the gradcheck report.
#[derive(Clone, Debug)]
pub struct CheckLine {
    pub name: String,
    pub report: FdReport,
}

impl CheckLine {
    pub fn passes(&self) -> bool {
        self.report.passes(FD_TOLERANCE)
    }

    pub fn format(&self) -> String {
        format!(
            "{:<28} max_rel_error={:.3e} checked={} skipped={} {}",
            self.name,
            self.report.max_rel_error,
            self.report.checked,
            self.report.skipped,
            if self.passes() { "PASS" } else { "FAIL" }
        )
    }
}

pub fn parse_op(name: &str) -> Result<OpKind> {
    OpKind::DIFFERENTIABLE
        .into_iter()
        .find(|k| k.name().eq_ignore_ascii_case(name))
        .map_or_else(|| invalid(format!("unknown op {name:?}")), Ok)
}

fn model_check_setup(seed: u64) -> Result<(ModelParams<f64>, Vec<ViewPair>)> {
    let cfg = ModelConfig {
        dim: MODEL_CHECK_DIM,
        encoder_hidden: [8, 8],
        heads: 2,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::<f64>::init(&cfg, &mut rng)?;
    let views = ViewConfig {
        augment: AugmentParams::default(),
        sampler: SamplerConfig {
            n_patches_per_scale: MODEL_CHECK_PATCHES,
            patch_size: 4,
            scales: vec![0],
            ..SamplerConfig::default()
        },
        global_points: 12,
    };
    let pairs = (0..MODEL_CHECK_BATCH)
        .map(|_| {
            let pts = (0..MODEL_CHECK_POINTS)
                .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
                .collect();
            prepare_views(&PointCloud::new(pts)?, &views, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((params, pairs))
}

fn backprop_indices(params: &ModelParams<f64>) -> Vec<usize> {
    (0..params.groups.len())
        .filter(|&i| params.groups[i].update_rule == UpdateRule::Backprop)
        .collect()
}

/// Loss probe, graded groups and the recorded stop-gradient values.
type LossAndGrad = (Probe, Vec<ParamGroup<f64>>, Vec<Vec<f64>>);

fn loss_and_grad(
    params: &ModelParams<f64>,
    pairs: &[ViewPair],
    fault: Option<OpKind>,
    frozen: Option<&[Vec<f64>]>,
    want_grad: bool,
) -> Result<LossAndGrad> {
    let mut g = Graph::<f64>::new();
    g.track_kinks(true);
    if let Some(v) = frozen {
        g.replay_stop_gradients(v.to_vec());
    }
    if let Some(k) = fault {
        g.inject_fault(k);
    }
    let out = forward_pocca(&mut g, params, pairs, BnMode::Train, ForwardOptions::default())?;
    let loss = total_loss_node(&mut g, &out)?;
    let probe = Probe {
        value: g.scalar(loss),
        kink_signature: g.kink_signature(),
    };
    let mut groups = params.groups.clone();
    if want_grad {
        g.backward(loss)?;
        groups.iter_mut().for_each(ParamGroup::zero_grad);
        let mut refs: Vec<&mut ParamGroup<f64>> = groups.iter_mut().collect();
        accumulate_grads(&g, &mut refs);
    }
    Ok((probe, groups, g.stop_gradient_values()))
}

/// Finite-difference check of the whole two-pass loss with respect to every
/// backprop-updated group, one line per group.
///
/// Stop-gradient outputs are held at their base-point values while probing,
/// so the difference quotient differentiates the same function as backward.
pub fn check_model(seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckLine>> {
    let (params, pairs) = model_check_setup(seed)?;
    let (_, graded, frozen) = loss_and_grad(&params, &pairs, fault, None, true)?;
    let mut lines = Vec::new();
    for gi in backprop_indices(&params) {
        let x0 = params.groups[gi].flatten();
        let analytic = graded[gi].flatten_grad();
        let report = finite_diff_check(
            |x| {
                let mut p = params.clone();
                p.groups[gi].assign_flat(x)?;
                Ok(loss_and_grad(&p, &pairs, None, Some(&frozen), false)?.0)
            },
            &x0,
            &analytic,
            FD_STEP,
        )?;
        lines.push(CheckLine {
            name: format!("model/{}", params.groups[gi].name),
            report,
        });
    }
    Ok(lines)
}

/// Every primitive followed by the full model.
pub fn run_gradcheck(seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckLine>> {
    let mut lines: Vec<CheckLine> = check_primitives(seed, fault)?
        .into_iter()
        .map(|c| CheckLine {
            name: format!("op/{}", c.op.name()),
            report: c.report,
        })
        .collect();
    lines.extend(check_model(seed, fault)?);
    Ok(lines)
}
