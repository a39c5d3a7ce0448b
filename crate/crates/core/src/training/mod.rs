//! Teacher training, the two distillation stages and their ablations.

mod engine;
mod optim;
mod run;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, LayerRef, SentinelRole};
use crate::error::{Error, Result};
use crate::losses::LossWeights;

pub use engine::Prepared;
pub use optim::{AdamW, OptimizerConfig};
pub use run::{
    distill_stage1, distill_stage2, run_single_stage, run_variant, train_classifier, train_teacher,
    DistillData, TeacherCache,
};

/// Piecewise-constant teacher learning rate. Runs shorter than
/// `quarter_epoch` simply never reach the later phases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSchedule {
    pub base_lr: f64,
    pub epochs: usize,
    pub halve_epoch: usize,
    pub quarter_epoch: usize,
}

impl Default for TeacherSchedule {
    fn default() -> Self {
        TeacherSchedule {
            base_lr: 8e-5,
            epochs: 10,
            halve_epoch: 3,
            quarter_epoch: 6,
        }
    }
}

impl TeacherSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if !(1 <= self.halve_epoch && self.halve_epoch < self.quarter_epoch) {
            return Err(Error::Config(format!(
                "need 1 <= halve_epoch < quarter_epoch, got {} and {}",
                self.halve_epoch, self.quarter_epoch
            )));
        }
        Ok(())
    }
}

/// Learning rate for 1-based `epoch`.
pub fn lr_schedule(schedule: &TeacherSchedule, epoch: usize) -> Result<f64> {
    if epoch == 0 || epoch > schedule.epochs {
        return Err(Error::contract(format!(
            "epoch {epoch} outside 1..={}",
            schedule.epochs
        )));
    }
    Ok(if epoch < schedule.halve_epoch {
        schedule.base_lr
    } else if epoch < schedule.quarter_epoch {
        schedule.base_lr / 2.0
    } else {
        schedule.base_lr / 4.0
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Stage 1 on the semantic sentinels, then stage 2.
    TwoStage,
    /// One phase minimizing CE, KL and MSE jointly.
    SingleStage,
    /// Stage 1 on the candidate sentinels, then stage 2.
    Lmskdts,
    /// Two-stage with alignment at the middle and last layers.
    DistillStar,
    /// Stage 1, then scoring with a fresh random linear head.
    ProbeRandom,
    /// Stage 1, then scoring with the sum head.
    ProbeSum,
    /// Plain cross-entropy on the student view, no teacher.
    CeOnly,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::TwoStage,
        Variant::SingleStage,
        Variant::Lmskdts,
        Variant::DistillStar,
        Variant::ProbeRandom,
        Variant::ProbeSum,
        Variant::CeOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::TwoStage => "two_stage",
            Variant::SingleStage => "single_stage",
            Variant::Lmskdts => "lmskdts",
            Variant::DistillStar => "distill_star",
            Variant::ProbeRandom => "probe_random",
            Variant::ProbeSum => "probe_sum",
            Variant::CeOnly => "ce_only",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub variant: Variant,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Stage-2 weights: `alpha` KL, `beta` CE.
    pub weights: LossWeights,
    /// Single-stage weights: `alpha` CE, `beta` KL, `gamma` MSE.
    pub single_stage_weights: LossWeights,
    /// Roles aligned in stage 1; `lmskdts` always aligns the candidate marks.
    pub alignment_roles: Vec<SentinelRole>,
    /// Layers aligned in stage 1; `distill_star` always uses mid and last.
    pub alignment_layers: Vec<LayerRef>,
    /// Constant student learning rate.
    pub lr: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            variant: Variant::TwoStage,
            stage1_epochs: 4,
            stage2_epochs: 6,
            weights: LossWeights::default(),
            single_stage_weights: LossWeights::single_stage(),
            alignment_roles: SentinelRole::semantic(),
            alignment_layers: vec![LayerRef::Last],
            lr: 8e-5,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn roles(&self) -> Vec<SentinelRole> {
        match self.variant {
            Variant::Lmskdts => vec![SentinelRole::Candidate],
            _ => self.alignment_roles.clone(),
        }
    }

    pub fn layers(&self, encoder: &EncoderConfig) -> Result<Vec<usize>> {
        match self.variant {
            Variant::DistillStar => encoder.resolve_layers(&[LayerRef::Mid, LayerRef::Last]),
            _ => encoder.resolve_layers(&self.alignment_layers),
        }
    }

    pub fn validate(&self, encoder: &EncoderConfig) -> Result<()> {
        self.weights.validate()?;
        self.single_stage_weights.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        let roles = self.roles();
        if roles.is_empty() {
            return Err(Error::Config("alignment_roles is empty".into()));
        }
        if roles.contains(&SentinelRole::EvidenceSegment) {
            return Err(Error::Config(
                "the evidence segment exists only in the teacher view and cannot be aligned".into(),
            ));
        }
        if self.layers(encoder)?.is_empty() {
            return Err(Error::Config("alignment_layers is empty".into()));
        }
        Ok(())
    }
}

/// Loss and accuracy curves of one training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub name: String,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    /// Test accuracy after each epoch, when a test set is supplied.
    pub test_accuracy: Vec<f64>,
}

impl StageLog {
    pub fn new(name: &str) -> Self {
        StageLog {
            name: name.to_string(),
            train_loss: Vec::new(),
            test_accuracy: Vec::new(),
        }
    }
}

/// Accuracies of the probe heads applied right after stage 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub random_head: f64,
    pub sum_head: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: String,
    pub seed: u64,
    pub stages: Vec<StageLog>,
    pub final_accuracy: Option<f64>,
    pub probe: Option<ProbeResult>,
    pub wall_clock_secs: f64,
    pub config: serde_json::Value,
}

impl RunRecord {
    /// Record with wall-clock time zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> RunRecord {
        RunRecord {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }
}
