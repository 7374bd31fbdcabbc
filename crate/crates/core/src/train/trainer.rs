use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::collapse::collapse_metrics;
use super::loss::total_loss_node;
use super::optim::{ema_update, scheduled_lr, AdamState, Schedule};
use crate::autodiff::{accumulate_grads, Graph, ParamGroup, Precision, Real, UpdateRule};
use crate::error::{invalid, Error, Result};
use crate::geometry::PointCloud;
use crate::model::{
    forward_pocca, prepare_views, BnMode, BnRecord, ForwardOptions, ModelConfig, ModelParams, ViewConfig, CA_ONLINE,
    CA_TARGET, ENCODER_ONLINE, ENCODER_TARGET,
};

/// Weight of the old value in batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.9;

/// Upper bound of the symmetric objective.
pub const LOSS_BOUND: f64 = 8.0;

const INIT_STREAM: u64 = 0x494E_4954;

/// Initial parameters of a run with training seed `seed`.
pub fn init_params<T: Real>(model: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    ModelParams::init(model, &mut ChaCha8Rng::seed_from_u64(mix(seed, INIT_STREAM, 0)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// EMA decay of the momentum groups.
    pub tau: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 0.99,
            lr: 1e-3,
            weight_decay: 1e-4,
            epochs: 30,
            batch_size: 8,
            schedule: Schedule::Cosine,
            precision: Precision::F32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return invalid(format!("train.tau = {} must lie in (0, 1)", self.tau));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return invalid(format!("train.lr = {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return invalid("train.weight_decay must be >= 0");
        }
        if self.epochs == 0 {
            return invalid("train.epochs must be positive");
        }
        if self.batch_size < 2 {
            return invalid("train.batch_size must be at least 2 for batch norm");
        }
        Ok(())
    }
}

/// Mutable training progress, everything needed to resume bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub adam: AdamState<T>,
    /// Drives the epoch shuffles.
    pub rng: ChaCha8Rng,
    /// Sample order of the current epoch.
    pub order: Vec<usize>,
}

impl<T: Real> TrainState<T> {
    pub fn new(params: &ModelParams<T>, cfg: &TrainConfig) -> Self {
        TrainState {
            step: 0,
            epoch: 0,
            lr: cfg.lr,
            adam: AdamState::new(&params.groups),
            rng: ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x5348_5546, 0)),
            order: Vec::new(),
        }
    }
}

/// One line of the metrics stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
    pub mean_cosine: f64,
    pub per_dim_std: f64,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "step,epoch,loss,lr,mean_cosine,per_dim_std";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{:e}",
            self.step, self.epoch, self.loss, self.lr, self.mean_cosine, self.per_dim_std
        )
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Decorrelated 64-bit seed from three words.
pub fn mix(a: u64, b: u64, c: u64) -> u64 {
    splitmix(splitmix(splitmix(a) ^ b) ^ c)
}

/// Random stream for sample `index` of step `step`.
pub fn sample_rng(seed: u64, step: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, step, index))
}

/// Fold train-mode batch statistics into the running buffers.
pub fn apply_bn_records<T: Real>(params: &mut ModelParams<T>, records: &[BnRecord<T>]) {
    let keep = T::of(BN_MOMENTUM);
    let take = T::of(1.0 - BN_MOMENTUM);
    for r in records {
        let group = &mut params.groups[r.group];
        for (suffix, fresh) in [("running_mean", &r.stats.mean), ("running_var", &r.stats.var)] {
            let buf = group
                .buffer_mut(&format!("{}.{suffix}", r.layer))
                .expect("batch-norm buffer");
            for (b, &f) in buf.value.iter_mut().zip(fresh) {
                *b = keep * *b + take * f;
            }
        }
    }
}

fn all_finite<T: Real>(groups: &[ParamGroup<T>]) -> bool {
    groups
        .iter()
        .flat_map(|g| g.tensors.iter().chain(&g.buffers))
        .all(|t| t.value.iter().all(|v| v.is_finite()))
}

fn dump<T: Real>(params: &ModelParams<T>, loss: f64) -> String {
    let norms: Vec<String> = params
        .groups
        .iter()
        .map(|g| {
            let n = g.flatten().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
            format!("{}={n:e}", g.name)
        })
        .collect();
    format!("loss={loss:e} param_norms[{}]", norms.join(" "))
}

/// Momentum updates of both EMA groups.
pub fn apply_ema<T: Real>(params: &mut ModelParams<T>, tau: f64) -> Result<()> {
    for (target, online) in [(ENCODER_TARGET, ENCODER_ONLINE), (CA_TARGET, CA_ONLINE)] {
        if params.groups[target].update_rule == UpdateRule::Ema {
            let (lo, hi) = params.groups.split_at_mut(target);
            ema_update(&mut hi[0], &lo[online], tau)?;
        }
    }
    Ok(())
}

/// Forward both passes on `batch`, backpropagate, update and advance.
///
/// The per-sample random streams are derived from the seed, the step
/// counter and the position in the batch.
pub fn train_step<T: Real>(
    batch: &[&PointCloud],
    params: &mut ModelParams<T>,
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    views: &ViewConfig,
    total_steps: u64,
) -> Result<StepMetrics> {
    let pairs = batch
        .iter()
        .enumerate()
        .map(|(i, c)| prepare_views(c, views, &mut sample_rng(cfg.seed, state.step, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let lr = scheduled_lr(cfg.schedule, state.step, total_steps, cfg.lr);

    let mut g = Graph::new();
    let built = forward_pocca(&mut g, params, &pairs, BnMode::Train, ForwardOptions::default())
        .and_then(|out| Ok((total_loss_node(&mut g, &out)?, out)));
    let (loss_id, out) = match built {
        Ok(v) => v,
        Err(_) if g.has_non_finite() => {
            return Err(Error::NonFinite {
                step: state.step,
                dump: dump(params, f64::NAN),
            })
        }
        Err(e) => return Err(e),
    };
    let loss = g.scalar(loss_id).as_f64();
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            step: state.step,
            dump: dump(params, loss),
        });
    }
    assert!(
        (-1e-6..=LOSS_BOUND + 1e-6).contains(&loss),
        "loss {loss} outside [0, {LOSS_BOUND}] at step {}",
        state.step
    );
    let d = params.config.dim;
    let embeddings: Vec<f64> = g.value(out.online_z[0]).iter().map(|v| v.as_f64()).collect();
    let collapse = collapse_metrics(&embeddings, d)?;
    g.backward(loss_id)?;

    params.zero_grad();
    {
        let mut refs: Vec<&mut ParamGroup<T>> = params.groups.iter_mut().collect();
        accumulate_grads(&g, &mut refs);
    }
    for group in &params.groups {
        if group.update_rule == UpdateRule::Ema {
            assert!(
                group.tensors.iter().all(|t| t.grad.iter().all(|v| *v == T::zero())),
                "EMA group {} received a gradient",
                group.name
            );
        }
    }
    apply_bn_records(params, &out.bn_records);
    state.adam.step(&mut params.groups, lr, cfg.weight_decay);
    apply_ema(params, cfg.tau)?;
    params.zero_grad();
    if !all_finite(&params.groups) {
        return Err(Error::NonFinite {
            step: state.step,
            dump: dump(params, loss),
        });
    }

    let metrics = StepMetrics {
        step: state.step,
        epoch: state.epoch,
        loss,
        lr,
        mean_cosine: collapse.mean_pairwise_cosine,
        per_dim_std: collapse.per_dim_std,
    };
    state.lr = lr;
    state.step += 1;
    Ok(metrics)
}

/// Epoch-wise shuffled training over a fixed set of clouds.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub views: ViewConfig,
    pub params: ModelParams<T>,
    pub state: TrainState<T>,
    pub data: Vec<PointCloud>,
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: TrainConfig, model: &ModelConfig, views: ViewConfig, data: Vec<PointCloud>) -> Result<Self> {
        let params = init_params(model, cfg.seed)?;
        Self::from_parts(cfg, views, params, None, data)
    }

    /// Assemble from existing parameters and, when resuming, state.
    pub fn from_parts(
        cfg: TrainConfig,
        views: ViewConfig,
        params: ModelParams<T>,
        state: Option<TrainState<T>>,
        data: Vec<PointCloud>,
    ) -> Result<Self> {
        cfg.validate()?;
        if T::PRECISION != cfg.precision {
            return invalid(format!(
                "trainer built for {} but train.precision is {}",
                T::PRECISION.tag(),
                cfg.precision.tag()
            ));
        }
        if data.len() < cfg.batch_size {
            return invalid(format!(
                "{} training clouds cannot fill a batch of {}",
                data.len(),
                cfg.batch_size
            ));
        }
        for c in &data {
            views.validate(c.len())?;
        }
        let state = state.unwrap_or_else(|| TrainState::new(&params, &cfg));
        Ok(Trainer {
            cfg,
            views,
            params,
            state,
            data,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.data.len() / self.cfg.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.cfg.epochs * self.steps_per_epoch()
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    /// One optimizer step on the next batch of the current epoch.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let spe = self.steps_per_epoch();
        let within = self.state.step % spe;
        if within == 0 || self.state.order.len() != self.data.len() {
            let mut order: Vec<usize> = (0..self.data.len()).collect();
            order.shuffle(&mut self.state.rng);
            self.state.order = order;
        }
        self.state.epoch = self.state.step / spe;
        let bs = self.cfg.batch_size;
        let start = within as usize * bs;
        let batch: Vec<&PointCloud> = self.state.order[start..start + bs]
            .iter()
            .map(|&i| &self.data[i])
            .collect();
        let total = self.total_steps();
        train_step(&batch, &mut self.params, &mut self.state, &self.cfg, &self.views, total)
    }

    /// Step until the schedule ends or `max_steps` more steps have run.
    pub fn run(
        &mut self,
        max_steps: Option<u64>,
        mut on_step: impl FnMut(&StepMetrics, &Self) -> Result<()>,
    ) -> Result<Vec<StepMetrics>> {
        let mut trace = Vec::new();
        let stop = max_steps.map_or(u64::MAX, |m| self.state.step.saturating_add(m));
        while !self.is_done() && self.state.step < stop {
            let m = self.step()?;
            on_step(&m, self)?;
            trace.push(m);
        }
        Ok(trace)
    }
}
