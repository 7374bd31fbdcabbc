use super::config::{FusionVariant, ModelConfig};
use super::params::{ModelParams, ENCODER_LAYERS};
use crate::autodiff::{BatchStats, BoundGroup, Graph, NormMode, ParamGroup, Real, TensorId};
use crate::error::{invalid, shape_err, Result};

/// Batch-norm behaviour for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and report them.
    Train,
    /// Normalize with the stored running statistics.
    Eval,
}

/// Batch statistics observed by one train-mode batch-norm layer.
#[derive(Clone, Debug)]
pub struct BnRecord<T> {
    pub group: usize,
    pub layer: String,
    pub stats: BatchStats<T>,
}

/// Attention result plus its weights `[rows * heads, queries, keys]`.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub out: TensorId,
    pub weights: TensorId,
}

/// Parameters bound into one graph, with the layer builders that use them.
pub struct Net<'a, T: Real> {
    pub params: &'a ModelParams<T>,
    pub bound: Vec<BoundGroup>,
    pub mode: BnMode,
    pub records: Vec<BnRecord<T>>,
}

impl<'a, T: Real> Net<'a, T> {
    pub fn bind(g: &mut Graph<T>, params: &'a ModelParams<T>, mode: BnMode) -> Result<Self> {
        let bound = params
            .groups
            .iter()
            .enumerate()
            .map(|(i, group)| BoundGroup::bind(g, i, group))
            .collect::<Result<Vec<_>>>()?;
        Ok(Net {
            params,
            bound,
            mode,
            records: Vec::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    fn p(&self, group: usize, name: &str) -> TensorId {
        self.bound[group].get(name)
    }

    fn linear(&self, g: &mut Graph<T>, x: TensorId, group: usize, prefix: &str, bias: bool) -> Result<TensorId> {
        let y = g.matmul(x, self.p(group, &format!("{prefix}.weight")))?;
        if bias {
            g.add(y, self.p(group, &format!("{prefix}.bias")))
        } else {
            Ok(y)
        }
    }

    fn batch_norm(&mut self, g: &mut Graph<T>, x: TensorId, group: usize, prefix: &str) -> Result<TensorId> {
        let gamma = self.p(group, &format!("{prefix}.gamma"));
        let beta = self.p(group, &format!("{prefix}.beta"));
        match self.mode {
            BnMode::Train => {
                let (y, stats) = g.batch_norm(x, gamma, beta, NormMode::Train)?;
                self.records.push(BnRecord {
                    group,
                    layer: prefix.to_string(),
                    stats: stats.expect("train mode reports statistics"),
                });
                Ok(y)
            }
            BnMode::Eval => {
                let params: &ParamGroup<T> = &self.params.groups[group];
                let mean = &params
                    .buffer(&format!("{prefix}.running_mean"))
                    .expect("batch-norm buffer")
                    .value;
                let var = &params
                    .buffer(&format!("{prefix}.running_var"))
                    .expect("batch-norm buffer")
                    .value;
                Ok(g.batch_norm(x, gamma, beta, NormMode::Eval { mean, var })?.0)
            }
        }
    }

    /// Shared per-point MLP and channelwise max-pool.
    ///
    /// `points` is `[N, 3]` or `[R, N, 3]`; the result is `[d]` or `[R, d]`.
    /// In train mode the batch statistics span every point in the call.
    pub fn encode(&mut self, g: &mut Graph<T>, group: usize, points: TensorId) -> Result<TensorId> {
        let shape = g.shape(points).to_vec();
        match shape.as_slice() {
            [n, 3] | [_, n, 3] if *n > 0 => {}
            [n, 3] | [_, n, 3] if *n == 0 => return invalid("cannot encode an empty point set"),
            _ => return shape_err(format!("encoder input must be [N, 3] or [R, N, 3], got {shape:?}")),
        }
        let mut x = points;
        for l in 0..ENCODER_LAYERS {
            x = self.linear(g, x, group, &format!("fc{l}"), false)?;
            x = self.batch_norm(g, x, group, &format!("bn{l}"))?;
            x = g.relu(x);
        }
        g.max_pool_over_points(x)
    }

    /// Multi-head scaled dot-product attention before the output projection.
    ///
    /// `query` is `[R, Lq, d]`, `context` is `[R, Lk, d]`.
    pub fn attend(&self, g: &mut Graph<T>, group: usize, query: TensorId, context: TensorId) -> Result<Attended> {
        let (qs, cs) = (g.shape(query).to_vec(), g.shape(context).to_vec());
        let d = self.config().dim;
        if qs.len() != 3 || cs.len() != 3 || qs[0] != cs[0] || qs[2] != d || cs[2] != d {
            return shape_err(format!("attention query {qs:?} and context {cs:?} for dim {d}"));
        }
        let (rows, lq, lk) = (qs[0], qs[1], cs[1]);
        let heads = self.config().heads;
        let dh = d / heads;
        let split = |g: &mut Graph<T>, x: TensorId, len: usize| -> Result<TensorId> {
            let x = g.reshape(x, &[rows, len, heads, dh])?;
            let x = g.permute(x, &[0, 2, 1, 3])?;
            g.reshape(x, &[rows * heads, len, dh])
        };
        let q = self.linear(g, query, group, "q", true)?;
        let k = self.linear(g, context, group, "k", true)?;
        let v = self.linear(g, context, group, "v", true)?;
        let q = split(g, q, lq)?;
        let k = split(g, k, lk)?;
        let v = split(g, v, lk)?;
        let kt = g.transpose(k)?;
        let scores = g.batch_matmul(q, kt)?;
        let scores = g.scale(scores, T::of(1.0 / (dh as f64).sqrt()));
        let weights = g.softmax(scores)?;
        let out = g.batch_matmul(weights, v)?;
        let out = g.reshape(out, &[rows, heads, lq, dh])?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[rows, lq, d])?;
        Ok(Attended { out, weights })
    }

    /// Patch-feature aligner over `a, b: [R, P, d]`.
    ///
    /// Each side queries the concatenation of both sides with shared
    /// projections; output is `x + W_o attn + b_o`. Returns the aligned
    /// sides and the attention weights.
    pub fn align(&self, g: &mut Graph<T>, a: TensorId, b: TensorId) -> Result<(TensorId, TensorId, TensorId)> {
        let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return shape_err(format!("aligner inputs {sa:?} and {sb:?}"));
        }
        if sa[1] == 0 || sb[1] == 0 {
            return invalid("aligner needs at least one patch per branch");
        }
        let group = super::params::ALIGNER;
        let both = g.concat(&[a, b], 1)?;
        let att = self.attend(g, group, both, both)?;
        let proj = self.linear(g, att.out, group, "out", true)?;
        let aligned = g.add(both, proj)?;
        let out_a = g.narrow(aligned, 1, 0, sa[1])?;
        let out_b = g.narrow(aligned, 1, sa[1], sb[1])?;
        Ok((out_a, out_b, att.weights))
    }

    /// Merge global features `[R, d]` with patch features `[R, L, d]` into `[R, d]`.
    ///
    /// Returns the fused feature and, for attention variants, the weights.
    pub fn fuse(
        &self,
        g: &mut Graph<T>,
        group: usize,
        global: TensorId,
        patches: TensorId,
    ) -> Result<(TensorId, Option<TensorId>)> {
        let (gs, ps) = (g.shape(global).to_vec(), g.shape(patches).to_vec());
        let d = self.config().dim;
        if gs.len() != 2 || ps.len() != 3 || gs[0] != ps[0] || gs[1] != d || ps[2] != d || ps[1] == 0 {
            return shape_err(format!("fusion of global {gs:?} with patches {ps:?}"));
        }
        let rows = gs[0];
        match self.config().fusion {
            FusionVariant::Classical | FusionVariant::Offset => {
                let query = g.reshape(global, &[rows, 1, d])?;
                let att = self.attend(g, group, query, patches)?;
                let attended = g.reshape(att.out, &[rows, d])?;
                let out = if self.config().fusion == FusionVariant::Classical {
                    let proj = self.linear(g, attended, group, "out", true)?;
                    g.add(global, proj)?
                } else {
                    let offset = g.sub(attended, global)?;
                    let proj = self.linear(g, offset, group, "out", true)?;
                    let act = g.relu(proj);
                    g.add(act, global)?
                };
                Ok((out, Some(att.weights)))
            }
            FusionVariant::ConcatBaseline => {
                let pooled = g.mean_axis(patches, 1)?;
                let cat = g.concat(&[global, pooled], 1)?;
                Ok((self.linear(g, cat, group, "fuse", true)?, None))
            }
        }
    }

    /// `linear -> batch norm -> relu -> linear` over `[R, d]`.
    pub fn predict(&mut self, g: &mut Graph<T>, z: TensorId) -> Result<TensorId> {
        let group = super::params::PREDICTOR;
        let h = self.linear(g, z, group, "fc1", true)?;
        let h = self.batch_norm(g, h, group, "bn")?;
        let h = g.relu(h);
        self.linear(g, h, group, "fc2", true)
    }
}

/// Row-major `[R, N, 3]` values for clouds of equal size.
pub fn stack_points<T: Real>(clouds: &[&[crate::geometry::Point3]]) -> Result<(Vec<usize>, Vec<T>)> {
    let Some(first) = clouds.first() else {
        return invalid("no point sets to stack");
    };
    let n = first.len();
    if clouds.iter().any(|c| c.len() != n) {
        return invalid("point sets in one batch must have equal size");
    }
    let values = clouds
        .iter()
        .flat_map(|c| c.iter().flatten())
        .map(|&v| T::of(v))
        .collect();
    Ok((vec![clouds.len(), n, 3], values))
}

/// Encoder features `[R * d]` for a batch of equal-size clouds using group
/// `group` of `params`, outside any training graph.
pub fn encode_batch<T: Real>(
    params: &ModelParams<T>,
    group: usize,
    clouds: &[&[crate::geometry::Point3]],
    mode: BnMode,
) -> Result<(Vec<T>, Vec<BnRecord<T>>)> {
    let (shape, values) = stack_points::<T>(clouds)?;
    let mut g = Graph::new();
    let mut net = Net::bind(&mut g, params, mode)?;
    let x = g.constant(&shape, values)?;
    let f = net.encode(&mut g, group, x)?;
    Ok((g.value(f).to_vec(), net.records))
}
