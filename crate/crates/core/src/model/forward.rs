use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::MergeMode;
use super::layers::{stack_points, BnMode, BnRecord, Net};
use super::params::{ModelParams, CA_ONLINE, CA_TARGET, ENCODER_ONLINE, ENCODER_TARGET};
use crate::autodiff::{Graph, Real, TensorId};
use crate::error::{invalid, Result};
use crate::geometry::{augment, fps, sample_patches, AugmentParams, Point3, PointCloud, SamplerConfig};

/// Everything needed to turn one cloud into a pair of views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewConfig {
    pub augment: AugmentParams,
    pub sampler: SamplerConfig,
    /// Points kept by FPS for each global view.
    pub global_points: usize,
}

impl Default for ViewConfig {
    fn default() -> Self {
        ViewConfig {
            augment: AugmentParams::default(),
            sampler: SamplerConfig::default(),
            global_points: 256,
        }
    }
}

impl ViewConfig {
    pub fn validate(&self, cloud_size: usize) -> Result<()> {
        self.augment.validate()?;
        self.sampler.validate(cloud_size)?;
        if self.global_points == 0 || self.global_points > cloud_size {
            return invalid(format!(
                "global_points {} must be in 1..={cloud_size}",
                self.global_points
            ));
        }
        Ok(())
    }
}

/// Two augmentations of one cloud: global FPS samples and patch sets.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub sigma1: Vec<Point3>,
    pub sigma2: Vec<Point3>,
    /// Patches from the first augmentation, each of `K` points.
    pub patches_a: Vec<Vec<Point3>>,
    /// Patches from the second augmentation.
    pub patches_b: Vec<Vec<Point3>>,
}

pub fn prepare_views(cloud: &PointCloud, cfg: &ViewConfig, rng: &mut impl Rng) -> Result<ViewPair> {
    cfg.validate(cloud.len())?;
    let mut one = || -> Result<(Vec<Point3>, Vec<Vec<Point3>>)> {
        let m = augment(cloud, &cfg.augment, rng)?;
        let seed = rng.gen_range(0..m.len());
        let sigma = m.select(&fps(&m, cfg.global_points, seed)?).points().to_vec();
        let patches = sample_patches(&m, &cfg.sampler, rng)?;
        let patches = patches.patches;
        Ok((sigma, patches))
    };
    let (sigma1, patches_a) = one()?;
    let (sigma2, patches_b) = one()?;
    Ok(ViewPair {
        sigma1,
        sigma2,
        patches_a,
        patches_b,
    })
}

/// Gradient cuts used to isolate individual paths into the online encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub detach_online_global: bool,
    pub detach_patches_a: bool,
    pub detach_patches_b: bool,
}

/// Graph nodes produced by [`forward_pocca`]. All embeddings are `[B, d]`.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    /// Online prediction from the first view.
    pub p1: TensorId,
    /// Target embedding from the second view.
    pub z2: TensorId,
    /// Online prediction from the second view.
    pub p2: TensorId,
    /// Target embedding from the first view.
    pub z1: TensorId,
    /// Online fused embeddings before the predictor, per pass.
    pub online_z: [TensorId; 2],
    /// Attention weights from every aligner and fusion call.
    pub attention: Vec<TensorId>,
    pub bn_records: Vec<BnRecord<T>>,
}

struct PassInputs {
    online_global: TensorId,
    target_global: TensorId,
    online_patches: TensorId,
    target_patches: TensorId,
}

/// Four-branch forward over a batch of view pairs, both symmetric passes.
///
/// Pass 1 sends view 1 through the online branch and view 2 through the
/// target branch; pass 2 swaps them. Every output of the momentum encoder
/// and the whole target fusion are cut from the gradient.
pub fn forward_pocca<T: Real>(
    g: &mut Graph<T>,
    params: &ModelParams<T>,
    views: &[ViewPair],
    mode: BnMode,
    opts: ForwardOptions,
) -> Result<ForwardOutput<T>> {
    let Some(first) = views.first() else {
        return invalid("forward needs at least one view pair");
    };
    let cfg = params.config.clone();
    let b = views.len();
    let n_patch = first.patches_a.len();
    if n_patch == 0
        || views
            .iter()
            .any(|v| v.patches_a.len() != n_patch || v.patches_b.len() != n_patch)
    {
        return invalid("every view pair needs the same nonzero patch count on both sides");
    }
    let d = cfg.dim;
    let mut net = Net::bind(g, params, mode)?;

    // Global views: rows 0..B are sigma1, B..2B are sigma2.
    let globals: Vec<&[Point3]> = views
        .iter()
        .map(|v| v.sigma1.as_slice())
        .chain(views.iter().map(|v| v.sigma2.as_slice()))
        .collect();
    let (shape, values) = stack_points::<T>(&globals)?;
    let global_in = g.constant(&shape, values)?;
    let mut online_global = net.encode(g, ENCODER_ONLINE, global_in)?;
    if opts.detach_online_global {
        online_global = g.stop_gradient(online_global);
    }
    let target_global = if cfg.momentum_branch.target_global_uses_momentum() {
        let t = net.encode(g, ENCODER_TARGET, global_in)?;
        g.stop_gradient(t)
    } else {
        online_global
    };

    // Patches: per cloud, the A patches then the B patches.
    let patch_sets: Vec<&[Point3]> = views
        .iter()
        .flat_map(|v| v.patches_a.iter().chain(&v.patches_b).map(Vec::as_slice))
        .collect();
    let (shape, values) = stack_points::<T>(&patch_sets)?;
    let patch_in = g.constant(&shape, values)?;
    let split = |g: &mut Graph<T>, feats: TensorId, detach: (bool, bool)| -> Result<(TensorId, TensorId)> {
        let feats = g.reshape(feats, &[b, 2 * n_patch, d])?;
        let mut a = g.narrow(feats, 1, 0, n_patch)?;
        let mut bb = g.narrow(feats, 1, n_patch, n_patch)?;
        if detach.0 {
            a = g.stop_gradient(a);
        }
        if detach.1 {
            bb = g.stop_gradient(bb);
        }
        Ok((a, bb))
    };
    let online_feats = net.encode(g, ENCODER_ONLINE, patch_in)?;
    let (on_a, on_b) = split(g, online_feats, (opts.detach_patches_a, opts.detach_patches_b))?;
    let (tg_a, tg_b) = if cfg.momentum_branch.target_patch_uses_momentum() {
        let t = net.encode(g, ENCODER_TARGET, patch_in)?;
        let t = g.stop_gradient(t);
        split(g, t, (false, false))?
    } else {
        (on_a, on_b)
    };

    let g1_on = g.narrow(online_global, 0, 0, b)?;
    let g2_on = g.narrow(online_global, 0, b, b)?;
    let g1_tg = g.narrow(target_global, 0, 0, b)?;
    let g2_tg = g.narrow(target_global, 0, b, b)?;
    let passes = [
        PassInputs {
            online_global: g1_on,
            target_global: g2_tg,
            online_patches: on_a,
            target_patches: tg_b,
        },
        PassInputs {
            online_global: g2_on,
            target_global: g1_tg,
            online_patches: on_b,
            target_patches: tg_a,
        },
    ];

    let mut attention = Vec::new();
    let mut preds = Vec::with_capacity(2);
    let mut targets = Vec::with_capacity(2);
    let mut online_z = Vec::with_capacity(2);
    for pass in &passes {
        let (online_kv, target_kv) = match cfg.merge_mode {
            MergeMode::Aligner => {
                let (x, y, w) = net.align(g, pass.online_patches, pass.target_patches)?;
                attention.push(w);
                let both = g.concat(&[x, y], 1)?;
                (both, both)
            }
            MergeMode::Concat => {
                let both = g.concat(&[pass.online_patches, pass.target_patches], 1)?;
                (both, both)
            }
            MergeMode::None => (pass.online_patches, pass.target_patches),
        };
        let (z_on, w) = net.fuse(g, CA_ONLINE, pass.online_global, online_kv)?;
        attention.extend(w);
        let (z_tg, w) = net.fuse(g, CA_TARGET, pass.target_global, target_kv)?;
        attention.extend(w);
        let z_tg = g.stop_gradient(z_tg);
        let p = if cfg.use_predictor { net.predict(g, z_on)? } else { z_on };
        preds.push(p);
        targets.push(z_tg);
        online_z.push(z_on);
    }
    Ok(ForwardOutput {
        p1: preds[0],
        z2: targets[0],
        p2: preds[1],
        z1: targets[1],
        online_z: [online_z[0], online_z[1]],
        attention,
        bn_records: net.records,
    })
}

/// Online fused embeddings `[B * d]` of the first view of every pair.
pub fn online_embeddings<T: Real>(params: &ModelParams<T>, views: &[ViewPair], mode: BnMode) -> Result<Vec<T>> {
    let mut g = Graph::new();
    let out = forward_pocca(&mut g, params, views, mode, ForwardOptions::default())?;
    Ok(g.value(out.online_z[0]).to_vec())
}
