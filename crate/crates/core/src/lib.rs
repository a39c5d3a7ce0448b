//! Two-stage knowledge distillation for multiple-choice reading comprehension
//! on a small from-scratch transformer encoder.

pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod numerics;
pub mod report;
pub mod rng;
pub mod synthdata;
pub mod training;

pub use encoder::{EncoderConfig, ModelParams, SentinelRole};
pub use error::{Error, Result};
pub use eval::EvalResult;
pub use experiment::{ExperimentConfig, ExperimentMatrix};
pub use losses::LossWeights;
pub use report::ReportFormat;
pub use synthdata::{DatasetSpec, Example, View};
pub use training::{DistillConfig, OptimizerConfig, RunRecord, TeacherSchedule, Variant};
