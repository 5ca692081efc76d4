use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::losses::LossWeights;

/// Initial learning rate of the paper (§V), for a pretrained ViT-H backbone.
pub const PAPER_BASE_LR: f64 = 1.25e-6;
/// Paper step counts (§V): mammal-only, avian-only and joint AniMer+ runs.
pub const PAPER_STEPS_MAMMAL: usize = 2_000_000;
pub const PAPER_STEPS_AVIAN: usize = 240_000;
pub const PAPER_STEPS_JOINT: usize = 1_400_000;

/// Table III: dataset name, training sample weight, has 3D annotations.
pub const TABLE_III: [(&str, f64, bool); 9] = [
    ("Animal3D", 1.0, true),
    ("CtrlAni3D", 0.6, true),
    ("Animal Pose", 0.15, false),
    ("AwA-Pose", 0.15, false),
    ("Zebra Synthetic", 0.05, true),
    ("Stanford Extra", 0.15, false),
    ("APT-36K", 0.15, false),
    ("CtrlAVES3D", 0.45, true),
    ("CUB", 0.45, false),
];

/// Training stage: 1 uses 3D-annotated datasets only, 2 the full corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

impl TryFrom<u8> for Stage {
    type Error = crate::Error;
    fn try_from(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(invalid!("stage must be 1 or 2, got {n}")),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        s.number()
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// AdamW hyperparameters. The paper states only the optimizer and the
/// initial learning rate; the rest are the standard defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    /// Toy default 1e-3; the paper's value is [`PAPER_BASE_LR`].
    pub base_lr: f64,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    /// Sampling weight per dataset name; datasets not listed get weight 1.
    pub dataset_weights: BTreeMap<String, f64>,
    pub seed: u64,
    /// Emit a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Zero the AdamW moments when stage 2 starts. The paper is silent;
    /// default keeps them (the LR schedule restarts either way).
    pub reset_moments_stage2: bool,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_steps: 1000,
            stage2_steps: 1000,
            base_lr: 1e-3,
            optimizer: OptimizerConfig::default(),
            batch_size: 16,
            dataset_weights: BTreeMap::new(),
            seed: 0,
            checkpoint_every: 0,
            reset_moments_stage2: false,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    /// Paper-scale preset: AniMer+ joint run of [`PAPER_STEPS_JOINT`] steps
    /// (split evenly between the stages; the paper gives no split) at the
    /// paper learning rate with Table III weights.
    pub fn paper_joint() -> Self {
        Self {
            stage1_steps: PAPER_STEPS_JOINT / 2,
            stage2_steps: PAPER_STEPS_JOINT / 2,
            base_lr: PAPER_BASE_LR,
            dataset_weights: TABLE_III.iter().map(|&(n, w, _)| (n.to_string(), w)).collect(),
            ..Self::default()
        }
    }

    pub fn stage_steps(&self, stage: Stage) -> usize {
        match stage {
            Stage::One => self.stage1_steps,
            Stage::Two => self.stage2_steps,
        }
    }

    pub fn weight_of(&self, dataset: &str) -> f64 {
        self.dataset_weights.get(dataset).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage1_steps == 0 || self.stage2_steps == 0 {
            return Err(invalid!("stage step counts must be positive"));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(invalid!("base_lr must be positive, got {}", self.base_lr));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return Err(invalid!("invalid optimizer hyperparameters {o:?}"));
        }
        if self.batch_size < 2 {
            return Err(invalid!("batch_size must be at least 2 (Eq. 1 needs pairs), got {}", self.batch_size));
        }
        if let Some((n, w)) = self.dataset_weights.iter().find(|(_, w)| !(w.is_finite() && **w >= 0.0)) {
            return Err(invalid!("dataset weight for {n:?} must be finite and >= 0, got {w}"));
        }
        self.loss_weights.validate()
    }
}
