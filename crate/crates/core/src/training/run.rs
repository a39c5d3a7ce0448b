use std::time::Instant;

use rayon::prelude::*;

use super::engine::{all_trainable, encoder_only, taped_forward, train_loop, LoopSpec, Prepared};
use super::{
    lr_schedule, DistillConfig, OptimizerConfig, ProbeResult, RunRecord, StageLog, TeacherSchedule,
    Variant,
};
use crate::encoder::{
    candidate_logits, extract_alignment_reps, forward, head_logits_taped, taped_alignment_reps,
    ModelParams, ParamVars, SentinelRole,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_prepared, Scorer};
use crate::losses::{self, one_hot, LossWeights};
use crate::numerics::{softmax, Tape, Var};
use crate::rng::derive_labeled;
use crate::synthdata::View;

type EvalHook<'a> = Box<dyn FnMut(&ModelParams) -> Result<Option<f64>> + 'a>;

fn own_head_eval(test: Option<&Prepared>) -> EvalHook<'_> {
    Box::new(move |p: &ModelParams| {
        test.map(|t| evaluate_prepared(p, t, Scorer::OwnHead).map(|r| r.accuracy))
            .transpose()
    })
}

fn student_logits(tape: &mut Tape, vars: &ParamVars, params_cfg: &crate::encoder::EncoderConfig, data: &Prepared, i: usize) -> Result<(Var, crate::encoder::TapedTrace)> {
    let trace = taped_forward(tape, vars, params_cfg, data, i)?;
    let logits = head_logits_taped(tape, &trace, vars.head_weight, vars.head_bias)?;
    Ok((logits, trace))
}

/// Cross-entropy training on one view with all tensors trainable.
#[allow(clippy::too_many_arguments)]
pub fn train_classifier(
    mut params: ModelParams,
    train: &Prepared,
    test: Option<&Prepared>,
    epochs: usize,
    lr: &dyn Fn(usize) -> Result<f64>,
    opt: &OptimizerConfig,
    shuffle_seed: u64,
    name: &str,
) -> Result<(ModelParams, StageLog)> {
    let config = params.config.clone();
    let spec = LoopSpec {
        name,
        epochs,
        lr,
        opt,
        shuffle_seed,
        trainable: all_trainable(&params),
    };
    let loss = |tape: &mut Tape, vars: &ParamVars, i: usize| -> Result<Var> {
        let (logits, _) = student_logits(tape, vars, &config, train, i)?;
        let p = tape.softmax_rows(logits);
        losses::cross_entropy(tape, &one_hot(train.labels[i], config.n_candidates), p)
    };
    let mut eval = own_head_eval(test);
    let log = train_loop(&mut params, train.len(), &spec, &loss, &mut *eval)?;
    Ok((params, log))
}

/// Trains a model from scratch with the teacher schedule on `train`'s view
/// and keeps the final-epoch parameters.
pub fn train_teacher(
    train: &Prepared,
    test: Option<&Prepared>,
    config: &crate::encoder::EncoderConfig,
    schedule: &TeacherSchedule,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<(ModelParams, RunRecord)> {
    schedule.validate()?;
    if train.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let start = Instant::now();
    let init = ModelParams::init(config, derive_labeled(seed, "teacher"))?;
    let lr = |epoch: usize| lr_schedule(schedule, epoch);
    let (params, log) = train_classifier(
        init,
        train,
        test,
        schedule.epochs,
        &lr,
        opt,
        derive_labeled(seed, "teacher-shuffle"),
        "teacher",
    )?;
    let final_accuracy = own_head_eval(test)(&params)?;
    let view = match train.view {
        View::Teacher => "teacher",
        View::Student => "teacher_without_evidence",
    };
    let record = RunRecord {
        variant: view.to_string(),
        seed,
        stages: vec![log],
        final_accuracy,
        probe: None,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        config: serde_json::json!({
            "encoder": config,
            "schedule": schedule,
            "optimizer": opt,
            "view": train.view,
        }),
    };
    Ok((params, record))
}

/// Teacher outputs for every training example, computed once: alignment
/// vectors for the configured roles and layers, and temperature-softened
/// answer distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherCache {
    pub reps: Vec<Vec<Vec<f64>>>,
    pub probs: Vec<Vec<f64>>,
}

impl TeacherCache {
    pub fn build(
        teacher: &ModelParams,
        data: &Prepared,
        roles: &[SentinelRole],
        layers: &[usize],
        temperature: f64,
    ) -> Result<Self> {
        let entries = (0..data.len())
            .into_par_iter()
            .map(|i| Self::entry(teacher, data, i, roles, layers, temperature))
            .collect::<Result<Vec<_>>>()?;
        let (reps, probs) = entries.into_iter().unzip();
        Ok(TeacherCache { reps, probs })
    }

    /// Recomputes the cached values for example `i`.
    pub fn entry(
        teacher: &ModelParams,
        data: &Prepared,
        i: usize,
        roles: &[SentinelRole],
        layers: &[usize],
        temperature: f64,
    ) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let x = &data.inputs[i];
        let trace = forward(teacher, &x.token_ids, &x.mask, &x.layout)?;
        let reps = extract_alignment_reps(&trace, roles, layers)?;
        let logits: Vec<f64> = candidate_logits(&trace, teacher)
            .data()
            .iter()
            .map(|z| z / temperature)
            .collect();
        Ok((reps, softmax(&logits)))
    }
}

/// Teacher-view and student-view renderings of the same training examples.
#[derive(Clone, Copy, Debug)]
pub struct DistillData<'a> {
    pub teacher_train: &'a Prepared,
    pub student_train: &'a Prepared,
    pub student_test: Option<&'a Prepared>,
}

impl DistillData<'_> {
    fn check(&self) -> Result<()> {
        if self.teacher_train.view != View::Teacher || self.student_train.view != View::Student {
            return Err(Error::contract("distillation data views are swapped"));
        }
        if self.teacher_train.ids != self.student_train.ids {
            return Err(Error::contract("teacher and student training sets differ"));
        }
        if self.student_train.is_empty() {
            return Err(Error::contract("training set is empty"));
        }
        Ok(())
    }
}

fn constant_lr(lr: f64) -> impl Fn(usize) -> Result<f64> {
    move |_| Ok(lr)
}

/// Stage 1: MSE between teacher and student sentinel states. The answer
/// head is excluded from the update.
pub fn distill_stage1(
    teacher: &ModelParams,
    mut student: ModelParams,
    data: DistillData<'_>,
    config: &DistillConfig,
    opt: &OptimizerConfig,
) -> Result<(ModelParams, StageLog)> {
    data.check()?;
    config.validate(&student.config)?;
    let roles = config.roles();
    let layers = config.layers(&student.config)?;
    let cache = TeacherCache::build(teacher, data.teacher_train, &roles, &layers, 1.0)?;
    let cfg = student.config.clone();
    let train = data.student_train;
    let loss = |tape: &mut Tape, vars: &ParamVars, i: usize| -> Result<Var> {
        let trace = taped_forward(tape, vars, &cfg, train, i)?;
        let reps = taped_alignment_reps(tape, &trace, &roles, &layers)?;
        losses::mse_alignment(tape, &cache.reps[i], reps)
    };
    let lr = constant_lr(config.lr);
    let spec = LoopSpec {
        name: "stage1",
        epochs: config.stage1_epochs,
        lr: &lr,
        opt,
        shuffle_seed: derive_labeled(config.seed, "stage1"),
        trainable: encoder_only(&student),
    };
    let mut eval = own_head_eval(data.student_test);
    let log = train_loop(&mut student, train.len(), &spec, &loss, &mut *eval)?;
    Ok((student, log))
}

/// Per-example KL term against cached teacher probabilities.
fn kl_term(tape: &mut Tape, logits: Var, p: Var, t_probs: &[f64], temperature: f64) -> Result<Var> {
    let s = if temperature == 1.0 {
        p
    } else {
        let z = tape.scale(logits, 1.0 / temperature);
        tape.softmax_rows(z)
    };
    losses::kl_divergence(tape, t_probs, s)
}

/// Stage 2: `alpha * KL(teacher || student) + beta * CE` over all tensors.
pub fn distill_stage2(
    teacher: &ModelParams,
    mut student: ModelParams,
    data: DistillData<'_>,
    config: &DistillConfig,
    opt: &OptimizerConfig,
) -> Result<(ModelParams, StageLog)> {
    data.check()?;
    config.validate(&student.config)?;
    let w = config.weights;
    let cache = TeacherCache::build(teacher, data.teacher_train, &[SentinelRole::Candidate], &[0], w.temperature)?;
    let cfg = student.config.clone();
    let train = data.student_train;
    let loss = |tape: &mut Tape, vars: &ParamVars, i: usize| -> Result<Var> {
        let (logits, _) = student_logits(tape, vars, &cfg, train, i)?;
        let p = tape.softmax_rows(logits);
        let y = one_hot(train.labels[i], cfg.n_candidates);
        if w.temperature == 1.0 {
            return losses::soft_label_loss(tape, &cache.probs[i], p, &y, p, &w);
        }
        let kl = kl_term(tape, logits, p, &cache.probs[i], w.temperature)?;
        let ce = losses::cross_entropy(tape, &y, p)?;
        losses::weighted_sum(tape, &[(kl, w.alpha), (ce, w.beta)])
    };
    let lr = constant_lr(config.lr);
    let spec = LoopSpec {
        name: "stage2",
        epochs: config.stage2_epochs,
        lr: &lr,
        opt,
        shuffle_seed: derive_labeled(config.seed, "stage2"),
        trainable: all_trainable(&student),
    };
    let mut eval = own_head_eval(data.student_test);
    let log = train_loop(&mut student, train.len(), &spec, &loss, &mut *eval)?;
    Ok((student, log))
}

/// One phase of `alpha * CE + beta * KL + gamma * MSE` for
/// `stage1_epochs + stage2_epochs` epochs.
pub fn run_single_stage(
    teacher: &ModelParams,
    mut student: ModelParams,
    data: DistillData<'_>,
    config: &DistillConfig,
    opt: &OptimizerConfig,
) -> Result<(ModelParams, StageLog)> {
    data.check()?;
    config.validate(&student.config)?;
    let w: LossWeights = config.single_stage_weights;
    let roles = config.roles();
    let layers = config.layers(&student.config)?;
    let cache = TeacherCache::build(teacher, data.teacher_train, &roles, &layers, w.temperature)?;
    let cfg = student.config.clone();
    let train = data.student_train;
    let loss = |tape: &mut Tape, vars: &ParamVars, i: usize| -> Result<Var> {
        let (logits, trace) = student_logits(tape, vars, &cfg, train, i)?;
        let p = tape.softmax_rows(logits);
        let ce = losses::cross_entropy(tape, &one_hot(train.labels[i], cfg.n_candidates), p)?;
        let kl = kl_term(tape, logits, p, &cache.probs[i], w.temperature)?;
        let reps = taped_alignment_reps(tape, &trace, &roles, &layers)?;
        let mse = losses::mse_alignment(tape, &cache.reps[i], reps)?;
        losses::single_stage_loss(tape, ce, kl, mse, &w)
    };
    let lr = constant_lr(config.lr);
    let spec = LoopSpec {
        name: "single_stage",
        epochs: config.stage1_epochs + config.stage2_epochs,
        lr: &lr,
        opt,
        shuffle_seed: derive_labeled(config.seed, "single"),
        trainable: all_trainable(&student),
    };
    let mut eval = own_head_eval(data.student_test);
    let log = train_loop(&mut student, train.len(), &spec, &loss, &mut *eval)?;
    Ok((student, log))
}

fn probe(student: &ModelParams, test: Option<&Prepared>, seed: u64) -> Result<Option<ProbeResult>> {
    let Some(test) = test else { return Ok(None) };
    let (w, b) = ModelParams::random_head(student.config.d_model, derive_labeled(seed, "probe"));
    let random_head = evaluate_prepared(student, test, Scorer::Head(&w, &b))?.accuracy;
    let sum_head = evaluate_prepared(student, test, Scorer::SumHead)?.accuracy;
    Ok(Some(ProbeResult {
        random_head,
        sum_head,
    }))
}

/// Runs one variant from a freshly initialized student and returns the
/// final student with its record.
pub fn run_variant(
    teacher: &ModelParams,
    data: DistillData<'_>,
    config: &DistillConfig,
    opt: &OptimizerConfig,
) -> Result<(ModelParams, RunRecord)> {
    let start = Instant::now();
    config.validate(&teacher.config)?;
    let student = ModelParams::init(&teacher.config, derive_labeled(config.seed, "student"))?;
    let test = data.student_test;
    let mut probe_result = None;
    let (student, stages, final_accuracy) = match config.variant {
        Variant::CeOnly => {
            data.check()?;
            let lr = constant_lr(config.lr);
            let (s, log) = train_classifier(
                student,
                data.student_train,
                test,
                config.stage1_epochs + config.stage2_epochs,
                &lr,
                opt,
                derive_labeled(config.seed, "stage2"),
                "ce_only",
            )?;
            let acc = own_head_eval(test)(&s)?;
            (s, vec![log], acc)
        }
        Variant::SingleStage => {
            let (s, log) = run_single_stage(teacher, student, data, config, opt)?;
            let acc = own_head_eval(test)(&s)?;
            (s, vec![log], acc)
        }
        Variant::TwoStage | Variant::Lmskdts | Variant::DistillStar => {
            let (s, log1) = distill_stage1(teacher, student, data, config, opt)?;
            probe_result = probe(&s, test, config.seed)?;
            let (s, log2) = distill_stage2(teacher, s, data, config, opt)?;
            let acc = own_head_eval(test)(&s)?;
            (s, vec![log1, log2], acc)
        }
        Variant::ProbeRandom | Variant::ProbeSum => {
            let (s, log1) = distill_stage1(teacher, student, data, config, opt)?;
            probe_result = probe(&s, test, config.seed)?;
            let acc = probe_result.map(|p| match config.variant {
                Variant::ProbeRandom => p.random_head,
                _ => p.sum_head,
            });
            (s, vec![log1], acc)
        }
    };
    let record = RunRecord {
        variant: config.variant.name().to_string(),
        seed: config.seed,
        stages,
        final_accuracy,
        probe: probe_result,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        config: serde_json::json!({ "distill": config, "optimizer": opt }),
    };
    Ok((student, record))
}
