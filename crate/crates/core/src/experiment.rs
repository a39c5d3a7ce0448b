//! Experiment configuration and the teacher/student comparison matrix.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::synthdata::{generate_dataset, read_jsonl, DatasetSpec, Example, View};
use crate::training::{
    run_variant, train_teacher, DistillConfig, DistillData, OptimizerConfig, Prepared, ProbeResult,
    RunRecord, TeacherSchedule, Variant,
};

/// Where a dataset comes from: generated from a spec or read from JSONL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Spec(DatasetSpec),
    Path(PathBuf),
}

impl DatasetSource {
    pub fn load(&self) -> Result<Vec<Example>> {
        match self {
            DatasetSource::Spec(spec) => generate_dataset(spec),
            DatasetSource::Path(path) => read_jsonl(path),
        }
    }

    fn resolve(&mut self, base: &Path) {
        if let DatasetSource::Path(p) = self {
            *p = base.join(&*p);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPair {
    pub train: DatasetSource,
    pub test: DatasetSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetPair,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: TeacherSchedule,
    /// Student settings; `variant` and `seed` are overridden per run.
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Pre-trained teacher used by `distill`; otherwise the teacher saved
    /// under `out_dir` for the run's seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_checkpoint: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.dataset.train.resolve(base);
        cfg.dataset.test.resolve(base);
        cfg.out_dir = base.join(&cfg.out_dir);
        if let Some(p) = cfg.teacher_checkpoint.as_mut() {
            *p = base.join(&*p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.optimizer.validate()?;
        self.schedule.validate()?;
        self.distill.validate(&self.encoder)?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds is empty".into()));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::Config("seeds contain duplicates".into()));
        }
        Ok(())
    }

    pub fn distill_for(&self, variant: Variant, seed: u64) -> DistillConfig {
        DistillConfig {
            variant,
            seed,
            ..self.distill.clone()
        }
    }
}

/// Train and test sets rendered in both views.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub teacher_train: Prepared,
    pub student_train: Prepared,
    pub teacher_test: Prepared,
    pub student_test: Prepared,
}

impl PreparedData {
    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        let train = config.dataset.train.load()?;
        let test = config.dataset.test.load()?;
        Self::new(&train, &test, &config.encoder)
    }

    pub fn new(train: &[Example], test: &[Example], encoder: &EncoderConfig) -> Result<Self> {
        if train.is_empty() || test.is_empty() {
            return Err(Error::Config("train and test sets must be nonempty".into()));
        }
        Ok(PreparedData {
            teacher_train: Prepared::new(train, View::Teacher, encoder)?,
            student_train: Prepared::new(train, View::Student, encoder)?,
            teacher_test: Prepared::new(test, View::Teacher, encoder)?,
            student_test: Prepared::new(test, View::Student, encoder)?,
        })
    }

    pub fn distill_data(&self) -> DistillData<'_> {
        DistillData {
            teacher_train: &self.teacher_train,
            student_train: &self.student_train,
            student_test: Some(&self.student_test),
        }
    }
}

/// One line of the matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowKind {
    TeacherWithEvidence,
    TeacherWithoutEvidence,
    Student(Variant),
}

impl RowKind {
    pub const ALL: [RowKind; 9] = [
        RowKind::TeacherWithEvidence,
        RowKind::TeacherWithoutEvidence,
        RowKind::Student(Variant::CeOnly),
        RowKind::Student(Variant::Lmskdts),
        RowKind::Student(Variant::SingleStage),
        RowKind::Student(Variant::TwoStage),
        RowKind::Student(Variant::DistillStar),
        RowKind::Student(Variant::ProbeRandom),
        RowKind::Student(Variant::ProbeSum),
    ];

    pub fn label(self) -> &'static str {
        match self {
            RowKind::TeacherWithEvidence => "teacher_with_evidence",
            RowKind::TeacherWithoutEvidence => "teacher_without_evidence",
            RowKind::Student(Variant::CeOnly) => "student_ce_only",
            RowKind::Student(v) => v.name(),
        }
    }

    pub fn from_label(label: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.label() == label)
            .ok_or_else(|| Error::Config(format!("unknown matrix row {label:?}")))
    }

    fn config(self, config: &ExperimentConfig) -> serde_json::Value {
        match self {
            RowKind::TeacherWithEvidence | RowKind::TeacherWithoutEvidence => {
                let view = if self == RowKind::TeacherWithEvidence {
                    View::Teacher
                } else {
                    View::Student
                };
                serde_json::json!({ "view": view, "schedule": config.schedule })
            }
            RowKind::Student(v) => {
                let mut d = serde_json::to_value(config.distill_for(v, 0)).expect("serializable");
                d.as_object_mut().expect("object").remove("seed");
                serde_json::json!({ "distill": d })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub label: String,
    /// Row-specific settings; the rest comes from the matrix config.
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// Per-seed test accuracy, `None` where the run failed.
    pub accuracies: Vec<Option<f64>>,
    /// Mean over seeds, `None` if any seed failed.
    pub mean: Option<f64>,
    pub errors: Vec<String>,
    pub records: Vec<RunRecord>,
}

impl MatrixRow {
    pub fn accuracy(&self, seed: u64) -> Option<f64> {
        let i = self.seeds.iter().position(|&s| s == seed)?;
        self.accuracies[i]
    }

    pub fn record(&self, seed: u64) -> Option<&RunRecord> {
        self.records.iter().find(|r| r.seed == seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMatrix {
    pub config: ExperimentConfig,
    pub rows: Vec<MatrixRow>,
}

impl ExperimentMatrix {
    pub fn row(&self, label: &str) -> Option<&MatrixRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

type RowResult = (RowKind, Result<RunRecord, String>);

/// Runs one matrix row for one seed from scratch.
pub fn run_row(config: &ExperimentConfig, data: &PreparedData, kind: RowKind, seed: u64) -> Result<RunRecord> {
    match kind {
        RowKind::TeacherWithEvidence => teacher_run(config, data, View::Teacher, seed),
        RowKind::TeacherWithoutEvidence => teacher_run(config, data, View::Student, seed),
        RowKind::Student(v) => {
            let (teacher, _) = train_teacher(
                &data.teacher_train,
                None,
                &config.encoder,
                &config.schedule,
                &config.optimizer,
                seed,
            )?;
            let cfg = config.distill_for(v, seed);
            Ok(run_variant(&teacher, data.distill_data(), &cfg, &config.optimizer)?.1)
        }
    }
}

fn teacher_run(config: &ExperimentConfig, data: &PreparedData, view: View, seed: u64) -> Result<RunRecord> {
    let (train, test) = match view {
        View::Teacher => (&data.teacher_train, &data.teacher_test),
        View::Student => (&data.student_train, &data.student_test),
    };
    let (_, record) = train_teacher(train, Some(test), &config.encoder, &config.schedule, &config.optimizer, seed)?;
    Ok(record)
}

/// The probe rows evaluate the two-stage student right after stage 1, so
/// their records follow from the two-stage record without retraining.
fn probe_record(config: &ExperimentConfig, two_stage: &RunRecord, variant: Variant) -> Result<RunRecord> {
    let probe: ProbeResult = two_stage
        .probe
        .ok_or_else(|| Error::contract("two_stage record has no probe result"))?;
    let cfg = config.distill_for(variant, two_stage.seed);
    Ok(RunRecord {
        variant: variant.name().to_string(),
        seed: two_stage.seed,
        stages: two_stage.stages[..1].to_vec(),
        final_accuracy: Some(match variant {
            Variant::ProbeRandom => probe.random_head,
            _ => probe.sum_head,
        }),
        probe: Some(probe),
        wall_clock_secs: two_stage.wall_clock_secs,
        config: serde_json::json!({ "distill": cfg, "optimizer": config.optimizer }),
    })
}

fn seed_runs(
    config: &ExperimentConfig,
    data: &PreparedData,
    seed: u64,
    progress: &(dyn Fn(&str, &Result<RunRecord, String>) + Sync),
) -> Vec<RowResult> {
    let report = |kind: RowKind, r: Result<RunRecord>| -> RowResult {
        let r = r.map_err(|e| format!("seed {seed}: {e}"));
        progress(kind.label(), &r);
        (kind, r)
    };
    let mut out = Vec::with_capacity(RowKind::ALL.len());

    let teacher = train_teacher(
        &data.teacher_train,
        Some(&data.teacher_test),
        &config.encoder,
        &config.schedule,
        &config.optimizer,
        seed,
    );
    let teacher = match teacher {
        Ok((params, record)) => {
            out.push(report(RowKind::TeacherWithEvidence, Ok(record)));
            Ok(params)
        }
        Err(e) => {
            let msg = e.to_string();
            out.push(report(RowKind::TeacherWithEvidence, Err(e)));
            Err(msg)
        }
    };
    out.push(report(
        RowKind::TeacherWithoutEvidence,
        teacher_run(config, data, View::Student, seed),
    ));

    let mut two_stage: Option<RunRecord> = None;
    for kind in &RowKind::ALL[2..] {
        let RowKind::Student(variant) = *kind else { unreachable!("student rows") };
        let result = match (&teacher, variant) {
            (Err(msg), _) => Err(Error::Training {
                epoch: 0,
                step: 0,
                reason: format!("teacher unavailable: {msg}"),
            }),
            (Ok(_), Variant::ProbeRandom | Variant::ProbeSum) => match &two_stage {
                Some(rec) => probe_record(config, rec, variant),
                None => Err(Error::contract("two_stage run failed; probe unavailable")),
            },
            (Ok(t), _) => {
                let cfg = config.distill_for(variant, seed);
                run_variant(t, data.distill_data(), &cfg, &config.optimizer).map(|(_, r)| r)
            }
        };
        if variant == Variant::TwoStage {
            two_stage = result.as_ref().ok().cloned();
        }
        out.push(report(*kind, result));
    }
    out
}

/// Runs every row for every seed. Seeds run concurrently; failures are
/// recorded in their row and the matrix is still returned.
pub fn experiment_matrix(config: &ExperimentConfig) -> Result<ExperimentMatrix> {
    experiment_matrix_with(config, &|_, _| {})
}

/// As [`experiment_matrix`], calling `progress` after each finished run.
pub fn experiment_matrix_with(
    config: &ExperimentConfig,
    progress: &(dyn Fn(&str, &Result<RunRecord, String>) + Sync),
) -> Result<ExperimentMatrix> {
    config.validate()?;
    let data = PreparedData::load(config)?;
    let per_seed: Vec<Vec<RowResult>> = config
        .seeds
        .par_iter()
        .map(|&seed| seed_runs(config, &data, seed, progress))
        .collect();

    let rows = RowKind::ALL
        .iter()
        .enumerate()
        .map(|(i, kind)| {
            let mut row = MatrixRow {
                label: kind.label().to_string(),
                config: kind.config(config),
                seeds: config.seeds.clone(),
                accuracies: Vec::new(),
                mean: None,
                errors: Vec::new(),
                records: Vec::new(),
            };
            for runs in &per_seed {
                let (k, result) = &runs[i];
                debug_assert_eq!(k, kind);
                match result {
                    Ok(rec) => {
                        row.accuracies.push(rec.final_accuracy);
                        row.records.push(rec.clone());
                    }
                    Err(msg) => {
                        row.accuracies.push(None);
                        row.errors.push(msg.clone());
                    }
                }
            }
            let accs: Option<Vec<f64>> = row.accuracies.iter().copied().collect();
            row.mean = accs.map(|a| a.iter().sum::<f64>() / a.len() as f64);
            row
        })
        .collect();
    Ok(ExperimentMatrix {
        config: config.clone(),
        rows,
    })
}
