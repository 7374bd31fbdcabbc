use rand::Rng;

use super::config::{FusionVariant, ModelConfig, MomentumBranch};
use crate::autodiff::{ParamGroup, ParamTensor, Real, UpdateRule};
use crate::error::{invalid, Result};

pub const ENCODER_ONLINE: usize = 0;
pub const ENCODER_TARGET: usize = 1;
pub const ALIGNER: usize = 2;
pub const CA_ONLINE: usize = 3;
pub const CA_TARGET: usize = 4;
pub const PREDICTOR: usize = 5;

pub const GROUP_NAMES: [&str; 6] = [
    "encoder_online",
    "encoder_target",
    "aligner",
    "ca_online",
    "ca_target",
    "predictor",
];

/// Number of per-point layers in the encoder.
pub const ENCODER_LAYERS: usize = 3;

/// Every learnable group, indexed by the constants above.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub groups: Vec<ParamGroup<T>>,
}

fn linear<T: Real>(
    group: &mut ParamGroup<T>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
    rng: &mut impl Rng,
) {
    group.tensors.push(ParamTensor::fan_in_uniform(
        format!("{prefix}.weight"),
        &[fan_in, fan_out],
        fan_in,
        rng,
    ));
    if bias {
        group
            .tensors
            .push(ParamTensor::filled(format!("{prefix}.bias"), &[fan_out], T::zero()));
    }
}

fn batch_norm<T: Real>(group: &mut ParamGroup<T>, prefix: &str, width: usize) {
    group
        .tensors
        .push(ParamTensor::filled(format!("{prefix}.gamma"), &[width], T::one()));
    group
        .tensors
        .push(ParamTensor::filled(format!("{prefix}.beta"), &[width], T::zero()));
    group.buffers.push(ParamTensor::filled(
        format!("{prefix}.running_mean"),
        &[width],
        T::zero(),
    ));
    group
        .buffers
        .push(ParamTensor::filled(format!("{prefix}.running_var"), &[width], T::one()));
}

/// Per-point MLP `3 -> h1 -> h2 -> d`; every layer is a bias-free linear map,
/// batch norm and relu.
pub fn init_encoder<T: Real>(cfg: &ModelConfig, name: &str, rng: &mut impl Rng) -> ParamGroup<T> {
    let mut g = ParamGroup::new(name, UpdateRule::Backprop);
    let widths = [3, cfg.encoder_hidden[0], cfg.encoder_hidden[1], cfg.dim];
    for l in 0..ENCODER_LAYERS {
        linear(&mut g, &format!("fc{l}"), widths[l], widths[l + 1], false, rng);
        batch_norm(&mut g, &format!("bn{l}"), widths[l + 1]);
    }
    g
}

/// Query, key, value and output projections, all `d -> d` with bias.
pub fn init_attention<T: Real>(cfg: &ModelConfig, name: &str, rng: &mut impl Rng) -> ParamGroup<T> {
    let mut g = ParamGroup::new(name, UpdateRule::Backprop);
    for p in ["q", "k", "v", "out"] {
        linear(&mut g, p, cfg.dim, cfg.dim, true, rng);
    }
    g
}

pub fn init_cross_attention<T: Real>(cfg: &ModelConfig, name: &str, rng: &mut impl Rng) -> ParamGroup<T> {
    match cfg.fusion {
        FusionVariant::Classical | FusionVariant::Offset => init_attention(cfg, name, rng),
        FusionVariant::ConcatBaseline => {
            let mut g = ParamGroup::new(name, UpdateRule::Backprop);
            linear(&mut g, "fuse", 2 * cfg.dim, cfg.dim, true, rng);
            g
        }
    }
}

pub fn init_predictor<T: Real>(cfg: &ModelConfig, rng: &mut impl Rng) -> ParamGroup<T> {
    let mut g = ParamGroup::new(GROUP_NAMES[PREDICTOR], UpdateRule::Backprop);
    let h = cfg.predictor_width();
    linear(&mut g, "fc1", cfg.dim, h, true, rng);
    batch_norm(&mut g, "bn", h);
    linear(&mut g, "fc2", h, cfg.dim, true, rng);
    g
}

impl<T: Real> ModelParams<T> {
    /// Fresh parameters. Target groups start as exact copies of their online
    /// counterparts.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let enc = init_encoder(config, GROUP_NAMES[ENCODER_ONLINE], rng);
        let aligner = init_attention(config, GROUP_NAMES[ALIGNER], rng);
        let ca = init_cross_attention(config, GROUP_NAMES[CA_ONLINE], rng);
        let mut predictor = init_predictor(config, rng);

        let mut enc_target = enc.clone();
        enc_target.name = GROUP_NAMES[ENCODER_TARGET].into();
        enc_target.update_rule = if config.momentum_branch == MomentumBranch::None {
            UpdateRule::Frozen
        } else {
            UpdateRule::Ema
        };
        let mut ca_target = ca.clone();
        ca_target.name = GROUP_NAMES[CA_TARGET].into();
        ca_target.update_rule = UpdateRule::Ema;
        if !config.use_predictor {
            predictor.update_rule = UpdateRule::Frozen;
        }
        let mut aligner = aligner;
        if config.merge_mode != super::MergeMode::Aligner {
            aligner.update_rule = UpdateRule::Frozen;
        }
        Ok(ModelParams {
            config: config.clone(),
            groups: vec![enc, enc_target, aligner, ca, ca_target, predictor],
        })
    }

    pub fn group(&self, index: usize) -> &ParamGroup<T> {
        &self.groups[index]
    }

    pub fn group_mut(&mut self, index: usize) -> &mut ParamGroup<T> {
        &mut self.groups[index]
    }

    pub fn group_by_name(&self, name: &str) -> Option<&ParamGroup<T>> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn zero_grad(&mut self) {
        self.groups.iter_mut().for_each(ParamGroup::zero_grad);
    }

    /// Rebuild from stored groups, checking names, order and shapes against
    /// a fresh layout for `config`.
    pub fn from_groups(config: &ModelConfig, groups: Vec<ParamGroup<T>>) -> Result<Self> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let reference = Self::init(config, &mut rng)?;
        if groups.len() != reference.groups.len() {
            return invalid(format!(
                "expected {} parameter groups, found {}",
                reference.groups.len(),
                groups.len()
            ));
        }
        for (a, b) in groups.iter().zip(&reference.groups) {
            let buffers_match = a.buffers.len() == b.buffers.len()
                && a.buffers
                    .iter()
                    .zip(&b.buffers)
                    .all(|(x, y)| x.name == y.name && x.shape == y.shape);
            if a.name != b.name || !a.same_layout(b) || !buffers_match {
                return invalid(format!(
                    "parameter group {} does not match the model configuration",
                    a.name
                ));
            }
        }
        Ok(ModelParams {
            config: config.clone(),
            groups,
        })
    }
}
