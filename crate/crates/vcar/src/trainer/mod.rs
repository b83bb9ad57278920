//! Sequence assembly, objectives, and the one- or two-stage training
//! pipeline. Every training mode maps to one sequence-layout rule and one
//! adapter regime; the optimizer only ever steps the active adapter set.

mod assemble;
mod optim;
mod pipeline;

pub use assemble::{
    assemble, assemble_dataset, assemble_segments, AssembledExample, Segment, ANSWER_TURN,
};
pub use optim::{lr_at, Adam, AdamState};
pub use pipeline::{
    batch_mean_loss, example_loss, pretrain_backbone, train_pipeline, train_stage,
    PipelineResult, PretrainConfig, StageResult,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::AdapterError;
use crate::model::ModelError;
use crate::taskgen::TaskGenError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("mode {mode} needs a {what} annotation on sample {sample}")]
    MissingAnnotation { mode: TrainingMode, what: &'static str, sample: String },
    #[error("unknown training mode {0:?}")]
    UnknownMode(String),
    #[error("loss became non-finite at step {step}")]
    NanLoss { step: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    TaskGen(#[from] TaskGenError),
}

/// Supervision layout / adapter regime selector. Single-set modes train the
/// set "theta"; dual-set modes train "theta_d" and "theta_r" in their
/// pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    Direct,
    Cot,
    CotT,
    CotGt,
    TsciqThreePart,
    Vcar,
    VcarWoRationale,
    /// Identical layout and regime to `CotGt`; kept as its own mode so
    /// ablation reports name it explicitly.
    VcarWoDescription,
    Concat,
    Multitask,
    SwitchOrder,
    QuestionAugmentation,
    ExtendDetails,
    MultiRationaleConcat,
    MultiRationaleSeparate,
}

/// One training stage: which adapter set learns, and which layout index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub adapter_id: &'static str,
    pub index: usize,
}

impl TrainingMode {
    pub const ALL: [TrainingMode; 15] = [
        TrainingMode::Direct,
        TrainingMode::Cot,
        TrainingMode::CotT,
        TrainingMode::CotGt,
        TrainingMode::TsciqThreePart,
        TrainingMode::Vcar,
        TrainingMode::VcarWoRationale,
        TrainingMode::VcarWoDescription,
        TrainingMode::Concat,
        TrainingMode::Multitask,
        TrainingMode::SwitchOrder,
        TrainingMode::QuestionAugmentation,
        TrainingMode::ExtendDetails,
        TrainingMode::MultiRationaleConcat,
        TrainingMode::MultiRationaleSeparate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainingMode::Direct => "direct",
            TrainingMode::Cot => "cot",
            TrainingMode::CotT => "cot_t",
            TrainingMode::CotGt => "cot_gt",
            TrainingMode::TsciqThreePart => "tsciq_three_part",
            TrainingMode::Vcar => "vcar",
            TrainingMode::VcarWoRationale => "vcar_wo_rationale",
            TrainingMode::VcarWoDescription => "vcar_wo_description",
            TrainingMode::Concat => "concat",
            TrainingMode::Multitask => "multitask",
            TrainingMode::SwitchOrder => "switch_order",
            TrainingMode::QuestionAugmentation => "question_augmentation",
            TrainingMode::ExtendDetails => "extend_details",
            TrainingMode::MultiRationaleConcat => "multi_rationale_concat",
            TrainingMode::MultiRationaleSeparate => "multi_rationale_separate",
        }
    }

    /// Dual-adapter modes run two stages; the rest train one set once.
    pub fn stages(self) -> Vec<StageSpec> {
        match self {
            TrainingMode::Vcar
            | TrainingMode::VcarWoRationale
            | TrainingMode::QuestionAugmentation => vec![
                StageSpec { adapter_id: "theta_d", index: 0 },
                StageSpec { adapter_id: "theta_r", index: 1 },
            ],
            // Reversed pipeline: the rationale set trains first and the
            // description set produces the final answer turn.
            TrainingMode::SwitchOrder => vec![
                StageSpec { adapter_id: "theta_r", index: 0 },
                StageSpec { adapter_id: "theta_d", index: 1 },
            ],
            _ => vec![StageSpec { adapter_id: "theta", index: 0 }],
        }
    }

    pub fn adapter_ids(self) -> Vec<&'static str> {
        let mut ids: Vec<&'static str> = self.stages().iter().map(|s| s.adapter_id).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn needs_description(self) -> bool {
        matches!(
            self,
            TrainingMode::Vcar
                | TrainingMode::VcarWoRationale
                | TrainingMode::Concat
                | TrainingMode::Multitask
                | TrainingMode::SwitchOrder
        )
    }

    pub fn needs_rationale(self) -> bool {
        !matches!(self, TrainingMode::Direct | TrainingMode::VcarWoRationale)
    }

    /// Answer-filtering applies to the raw-teacher chain-of-thought mode.
    pub fn filters_rationales(self) -> bool {
        matches!(self, TrainingMode::CotT)
    }
}

impl std::fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TrainingMode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TrainingMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| TrainError::UnknownMode(s.to_string()))
    }
}

/// Hyperparameters for one adapter-training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub rank: usize,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            warmup_fraction: 0.03,
            batch_size: 8,
            epochs: 1,
            seed: 0,
            rank: 8,
            alpha: 16.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr <= 0.0 {
            return Err(TrainError::InvalidConfig("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(TrainError::InvalidConfig("warmup_fraction must be in [0, 1)".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("epochs and batch_size must be >= 1".into()));
        }
        if self.rank == 0 || self.alpha <= 0.0 {
            return Err(TrainError::InvalidConfig("rank and alpha must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for m in TrainingMode::ALL {
            assert_eq!(m.name().parse::<TrainingMode>().unwrap(), m);
        }
        assert!("nonsense".parse::<TrainingMode>().is_err());
    }

    #[test]
    fn dual_modes_have_two_stages() {
        assert_eq!(TrainingMode::Vcar.stages().len(), 2);
        assert_eq!(TrainingMode::Vcar.stages()[0].adapter_id, "theta_d");
        assert_eq!(TrainingMode::SwitchOrder.stages()[0].adapter_id, "theta_r");
        assert_eq!(TrainingMode::CotGt.stages().len(), 1);
        assert_eq!(TrainingMode::Multitask.stages().len(), 1);
    }
}
