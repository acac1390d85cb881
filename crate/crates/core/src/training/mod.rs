//! Bipartite matching, detection losses and the three training stages.

mod loss;
mod matching;
mod objective;
mod stage;

pub use loss::{detection_loss, forward_loss, ForwardLoss, ImageLoss, LossBreakdown};
pub use matching::{hungarian_match, match_cost, total_cost, MatchResult};
pub use objective::{FullObjective, ObjectiveTerm};
pub use stage::{
    encode_scenes, loss_csv, run_stage, sample_stage2_instances, stage_rng, write_loss_csv, StageOutcome, StepLog,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    /// Weight of the background term for unmatched queries.
    pub background: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
            background: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Text,
    Visual,
    Multimodal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RandomCount {
    Random,
}

/// How many cached prompts are averaged per category in Stage III.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PromptCount {
    Fixed(usize),
    /// Uniform over `1..=max_prompt_count`, redrawn every step.
    Random(RandomCount),
}

impl std::fmt::Display for PromptCount {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PromptCount::Fixed(n) => write!(f, "{n}"),
            PromptCount::Random(_) => write!(f, "random"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: u8,
    pub epochs: usize,
    pub lr: f64,
    /// Parameter path prefixes held fixed.
    pub frozen: Vec<String>,
    pub prompt_mode: PromptMode,
    #[serde(default = "one")]
    pub instances_per_category: usize,
    #[serde(default = "default_count")]
    pub fusion_train_prompt_count: PromptCount,
}

fn one() -> usize {
    1
}

fn default_count() -> PromptCount {
    PromptCount::Fixed(32)
}

impl StageConfig {
    pub fn stage1() -> Self {
        Self {
            stage: 1,
            epochs: 30,
            lr: 1e-3,
            frozen: vec!["vpe".into(), "fusion".into()],
            prompt_mode: PromptMode::Text,
            instances_per_category: 1,
            fusion_train_prompt_count: default_count(),
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage: 2,
            epochs: 10,
            frozen: vec!["det".into(), "text".into(), "fusion".into()],
            prompt_mode: PromptMode::Visual,
            ..Self::stage1()
        }
    }

    pub fn stage3() -> Self {
        Self {
            stage: 3,
            epochs: 10,
            frozen: vec!["det".into(), "text".into(), "vpe".into()],
            prompt_mode: PromptMode::Multimodal,
            ..Self::stage1()
        }
    }

    pub fn default_for(stage: u8) -> Result<Self> {
        match stage {
            1 => Ok(Self::stage1()),
            2 => Ok(Self::stage2()),
            3 => Ok(Self::stage3()),
            s => Err(Error::Config(format!("unknown stage {s}"))),
        }
    }

    pub fn freezes(&self, module: &str) -> bool {
        self.frozen.iter().any(|f| f == module || module.starts_with(&format!("{f}.")))
    }

    /// Stage II with a trainable detector alternates text and visual prompts.
    pub fn is_joint(&self) -> bool {
        self.stage == 2 && !self.freezes("det")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("stage {} learning rate must be positive", self.stage));
        }
        if self.instances_per_category == 0 {
            return fail("instances_per_category must be at least 1".into());
        }
        if self.fusion_train_prompt_count == PromptCount::Fixed(0) {
            return fail("fusion_train_prompt_count must be at least 1".into());
        }
        let mode_ok = matches!(
            (self.stage, self.prompt_mode),
            (1, PromptMode::Text) | (2, PromptMode::Visual) | (3, PromptMode::Multimodal)
        );
        if !mode_ok {
            return fail(format!("stage {} cannot train with {:?} prompts", self.stage, self.prompt_mode));
        }
        match self.stage {
            1 if self.freezes("det") || self.freezes("text") => fail("stage 1 must train det and text".into()),
            2 if self.freezes("vpe") || !self.freezes("text") || !self.freezes("fusion") => {
                fail("stage 2 trains vpe with text and fusion frozen".into())
            }
            3 if !(self.freezes("det") && self.freezes("text") && self.freezes("vpe")) || self.freezes("fusion") => {
                fail("stage 3 trains only fusion".into())
            }
            1..=3 => Ok(()),
            s => fail(format!("unknown stage {s}")),
        }
    }
}

/// Settings shared by all stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub grad_clip: f64,
    pub weights: LossWeights,
    pub max_prompt_count: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            batch_size: 4,
            grad_clip: 1.0,
            weights: LossWeights::default(),
            max_prompt_count: 32,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_prompt_count == 0 || !(self.grad_clip > 0.0) {
            return Err(Error::Config("batch_size, max_prompt_count and grad_clip must be positive".into()));
        }
        let w = &self.weights;
        if [w.cls, w.l1, w.giou, w.background].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}
