use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// How the global feature is merged with patch features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    /// Global query attends over patches; residual add after the output projection.
    Classical,
    /// `relu(W_o (attended - query) + b_o) + query`.
    Offset,
    /// Mean-pooled patches concatenated with the global feature, one linear layer.
    ConcatBaseline,
}

/// How patch features of the two augmentations are combined before fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    /// Aligner output for both patch sets, shared by both fusions.
    Aligner,
    /// Both raw patch sets, shared by both fusions.
    Concat,
    /// Each fusion sees only its own augmentation's patches.
    None,
}

/// Which encoder sub-branches use the momentum (EMA) encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentumBranch {
    TargetGlobal,
    TargetPatch,
    TargetBoth,
    /// The online encoder is used everywhere; the momentum encoder is unused.
    None,
}

impl MomentumBranch {
    pub fn target_global_uses_momentum(self) -> bool {
        matches!(self, MomentumBranch::TargetGlobal | MomentumBranch::TargetBoth)
    }

    pub fn target_patch_uses_momentum(self) -> bool {
        matches!(self, MomentumBranch::TargetPatch | MomentumBranch::TargetBoth)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding dimension `d`.
    pub dim: usize,
    /// Widths of the two hidden per-point layers.
    pub encoder_hidden: [usize; 2],
    pub heads: usize,
    /// Predictor hidden width; `None` means `2 * dim`.
    pub predictor_hidden: Option<usize>,
    pub fusion: FusionVariant,
    pub merge_mode: MergeMode,
    pub momentum_branch: MomentumBranch,
    pub use_predictor: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 128,
            encoder_hidden: [64, 128],
            heads: 4,
            predictor_hidden: None,
            fusion: FusionVariant::Classical,
            merge_mode: MergeMode::Aligner,
            momentum_branch: MomentumBranch::TargetGlobal,
            use_predictor: true,
        }
    }
}

impl ModelConfig {
    pub fn predictor_width(&self) -> usize {
        self.predictor_hidden.unwrap_or(2 * self.dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.encoder_hidden.contains(&0) || self.predictor_width() == 0 {
            return invalid("model.dim, model.encoder_hidden and model.predictor_hidden must be positive");
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return invalid(format!(
                "model.dim ({}) must be divisible by model.heads ({})",
                self.dim, self.heads
            ));
        }
        Ok(())
    }
}
