//! Acceptance criteria 1 to 10, one PASS/FAIL line each.
//!
//! Criteria 7 to 9 read the desk-scale matrix from `configs/desk.json`. The
//! matrix is cached under the cargo target tmpdir and rebuilt whenever the
//! cached config differs or `MRC_ACCEPTANCE_FRESH` is set.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use rand::Rng as _;

use mrc_distill::encoder::{
    forward_taped, head_logits_taped, taped_alignment_reps, write_checkpoint, EncoderConfig, ModelParams, ParamVars,
    SentinelRole, HEAD_TENSORS,
};
use mrc_distill::experiment::{experiment_matrix_with, ExperimentConfig, ExperimentMatrix, PreparedData};
use mrc_distill::losses::{self, one_hot, LossWeights};
use mrc_distill::numerics::{grad_check, softmax, Tape, Tensor, Var};
use mrc_distill::rng;
use mrc_distill::synthdata::{generate_dataset, render_input, DatasetSpec, Example, RenderedInput, View};
use mrc_distill::training::{distill_stage1, lr_schedule, run_variant, train_teacher, TeacherSchedule, Variant};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).ancestors().nth(2).expect("workspace root").to_path_buf()
}

// Criterion 1

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 10;

fn normal(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u: f64 = r.random_range(f64::EPSILON..1.0);
            let v: f64 = r.random_range(0.0..1.0);
            (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn simplex(n: usize, r: &mut rng::Rng) -> Vec<f64> {
    softmax(&(0..n).map(|_| r.random_range(-2.0..2.0)).collect::<Vec<_>>())
}

fn op_check<F>(name: &str, shapes: &[&[usize]], out: &[usize], op: F) -> Result<usize, String>
where
    F: Fn(&mut Tape, &[Var]) -> mrc_distill::Result<Var>,
{
    for seed in 0..INSTANCES {
        let mut r = rng::rng(rng::derive_labeled(seed, name));
        let inputs: Vec<Tensor> = shapes.iter().map(|s| normal(s, &mut r)).collect();
        let w = normal(out, &mut r);
        let f = |t: &mut Tape, v: &[Var]| {
            let y = op(t, v)?;
            let c = t.constant(w.clone());
            let m = t.mul(y, c)?;
            Ok(t.sum(m))
        };
        let rep = grad_check(f, &inputs, H, TOL).map_err(err)?;
        ensure(rep.pass, format!("{name} instance {seed}: rel err {:.3e}", rep.max_rel_error))?;
    }
    Ok(INSTANCES as usize)
}

fn tiny_model(seed: u64) -> (ModelParams, RenderedInput, RenderedInput) {
    let config = EncoderConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        max_len: 48,
        ..EncoderConfig::default()
    };
    let mut params = ModelParams::init(&config, seed).unwrap();
    let mut r = rng::rng(rng::derive_labeled(seed, "widen"));
    for t in params.tensors_mut() {
        for x in t.data_mut() {
            *x = *x * 3.0 + r.random_range(-0.1..0.1);
        }
    }
    let spec = DatasetSpec {
        seed,
        n_examples: 1,
        ..DatasetSpec::default()
    };
    let e = generate_dataset(&spec).unwrap().remove(0);
    let s = render_input(&e, View::Student, &config).unwrap();
    let t = render_input(&e, View::Teacher, &config).unwrap();
    (params, s, t)
}

/// Key biases, and under softmax-only losses the final-norm shift and head
/// bias, have exactly zero gradient; they are held constant.
fn held(name: &str, softmax_only: bool) -> bool {
    name.ends_with("attn.bk") || (softmax_only && (name == "final_norm.beta" || name == "head.bias"))
}

type PipelineLoss = dyn Fn(&mut Tape, Var, Var, usize, &mut rng::Rng) -> mrc_distill::Result<Var>;

fn pipeline(name: &str, view: View, softmax_only: bool, loss: &PipelineLoss) -> Result<usize, String> {
    for seed in 0..INSTANCES {
        let (params, s, t) = tiny_model(seed);
        let x = if view == View::Teacher { t } else { s };
        let config = params.config.clone();
        let names = params.names();
        let all: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
        let free: Vec<Tensor> = all
            .iter()
            .zip(&names)
            .filter(|(_, n)| !held(n, softmax_only))
            .map(|(t, _)| t.clone())
            .collect();
        let f = |tape: &mut Tape, vars: &[Var]| {
            let mut it = vars.iter();
            let full = all
                .iter()
                .zip(&names)
                .map(|(t, n)| if held(n, softmax_only) { tape.constant(t.clone()) } else { *it.next().unwrap() })
                .collect();
            let pv = ParamVars::from_vars(full, config.n_layers);
            let trace = forward_taped(tape, &pv, &config, &x.token_ids, &x.mask, &x.layout)?;
            let logits = head_logits_taped(tape, &trace, pv.head_weight, pv.head_bias)?;
            let p = tape.softmax_rows(logits);
            let reps = taped_alignment_reps(tape, &trace, &SentinelRole::semantic(), &[config.n_layers])?;
            let mut r = rng::rng(rng::derive_labeled(seed, name));
            loss(tape, p, reps, config.d_model, &mut r)
        };
        let rep = grad_check(f, &free, H, TOL).map_err(err)?;
        ensure(rep.pass, format!("{name} instance {seed}: rel err {:.3e}", rep.max_rel_error))?;
    }
    Ok(INSTANCES as usize)
}

fn label(r: &mut rng::Rng) -> Vec<f64> {
    one_hot(r.random_range(0..3), 3)
}

fn reps(r: &mut rng::Rng, d: usize) -> Vec<Vec<f64>> {
    (0..3).map(|_| normal(&[d], r).into_data()).collect()
}

fn criterion_gradients() -> Outcome {
    let mut n = 0;
    n += op_check("matmul", &[&[3, 4], &[4, 5]], &[3, 5], |t, v| t.matmul(v[0], v[1]))?;
    n += op_check("transpose", &[&[3, 4]], &[4, 3], |t, v| t.transpose(v[0]))?;
    n += op_check("add", &[&[3, 4], &[3, 4]], &[3, 4], |t, v| t.add(v[0], v[1]))?;
    n += op_check("add_row_bias", &[&[3, 4], &[4]], &[3, 4], |t, v| t.add_row_bias(v[0], v[1]))?;
    n += op_check("mul", &[&[3, 4], &[3, 4]], &[3, 4], |t, v| t.mul(v[0], v[1]))?;
    n += op_check("scale", &[&[3, 4]], &[3, 4], |t, v| Ok(t.scale(v[0], -0.7)))?;
    n += op_check("gelu", &[&[3, 4]], &[3, 4], |t, v| Ok(t.gelu(v[0])))?;
    n += op_check("softmax_rows", &[&[3, 4]], &[3, 4], |t, v| Ok(t.softmax_rows(v[0])))?;
    n += op_check("slice_cols", &[&[3, 6]], &[3, 2], |t, v| t.slice_cols(v[0], 3, 2))?;
    n += op_check("concat_cols", &[&[3, 2], &[3, 4]], &[3, 6], |t, v| t.concat_cols(&[v[0], v[1]]))?;
    n += op_check("concat_rows", &[&[2, 4], &[3, 4]], &[5, 4], |t, v| t.concat_rows(&[v[0], v[1]]))?;
    n += op_check("gather_rows", &[&[5, 3]], &[4, 3], |t, v| t.gather_rows(v[0], &[4, 0, 4, 2]))?;
    n += op_check("reshape", &[&[3, 4]], &[2, 6], |t, v| t.reshape(v[0], &[2, 6]))?;
    n += op_check("sum", &[&[3, 4]], &[1], |t, v| Ok(t.sum(v[0])))?;
    n += op_check("layer_norm", &[&[3, 5], &[5], &[5]], &[3, 5], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))?;
    n += op_check("cross_entropy", &[&[1, 4]], &[1], |t, v| {
        let p = t.softmax_rows(v[0]);
        losses::cross_entropy(t, &one_hot(2, 4), p)
    })?;
    n += op_check("kl_divergence", &[&[1, 4]], &[1], |t, v| {
        let p = t.softmax_rows(v[0]);
        losses::kl_divergence(t, &[0.1, 0.2, 0.3, 0.4], p)
    })?;
    n += op_check("mse_alignment", &[&[2, 3]], &[1], |t, v| {
        losses::mse_alignment(t, &[vec![0.5, -1.0, 2.0], vec![0.0, 0.3, -0.2]], v[0])
    })?;

    n += pipeline("teacher_ce", View::Teacher, true, &|t, p, _, _, r| losses::cross_entropy(t, &label(r), p))?;
    n += pipeline("alignment", View::Student, false, &|t, _, s, d, r| losses::mse_alignment(t, &reps(r, d), s))?;
    n += pipeline("soft_label", View::Student, true, &|t, p, _, _, r| {
        let target = simplex(3, r);
        losses::soft_label_loss(t, &target, p, &label(r), p, &LossWeights::default())
    })?;
    n += pipeline("single_stage", View::Student, false, &|t, p, s, d, r| {
        let target = simplex(3, r);
        let ce = losses::cross_entropy(t, &label(r), p)?;
        let kl = losses::kl_divergence(t, &target, p)?;
        let mse = losses::mse_alignment(t, &reps(r, d), s)?;
        losses::single_stage_loss(t, ce, kl, mse, &LossWeights::single_stage())
    })?;
    Ok(format!("{n} instances within rel err {TOL:e} at h={H:e}"))
}

// Criterion 2

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).item().unwrap()
}

fn probs(tape: &mut Tape, p: &[f64]) -> Var {
    tape.leaf(Tensor::from_rows(&[p.to_vec()]).unwrap())
}

fn close(name: &str, got: f64, want: f64) -> Result<(), String> {
    ensure((got - want).abs() <= 1e-9, format!("{name}: got {got}, want {want}"))
}

fn criterion_loss_values() -> Outcome {
    let ln = f64::ln;
    let mut t = Tape::new();
    let mut n = 0;
    let mut check = |name: &str, got: mrc_distill::Result<Var>, t: &Tape, want: f64| -> Result<(), String> {
        n += 1;
        close(name, scalar(t, got.map_err(err)?), want)
    };

    let p = probs(&mut t, &[1.0, 0.0, 0.0]);
    let v = losses::cross_entropy(&mut t, &[1.0, 0.0, 0.0], p);
    check("ce vertex", v, &t, 0.0)?;
    let p = probs(&mut t, &[1.0 / 3.0; 3]);
    let v = losses::cross_entropy(&mut t, &[1.0, 0.0, 0.0], p);
    check("ce uniform", v, &t, ln(3.0))?;
    let p = probs(&mut t, &[0.1, 0.7, 0.2]);
    let v = losses::cross_entropy(&mut t, &[0.0, 1.0, 0.0], p);
    check("ce direct", v, &t, -ln(0.7))?;

    let s = t.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap());
    let v = losses::mse_alignment(&mut t, &[vec![1.0, 2.0], vec![-3.0, 0.5]], s);
    check("mse identity", v, &t, 0.0)?;
    let s = t.leaf(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
    let v = losses::mse_alignment(&mut t, &[vec![1.0, 2.0]], s);
    check("mse elementwise", v, &t, 2.5)?;
    let s = t.leaf(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
    let v = losses::mse_alignment(&mut t, &[vec![3.0, 6.0]], s);
    check("mse homogeneity", v, &t, 9.0 * 2.5)?;

    let p = probs(&mut t, &[0.2, 0.3, 0.5]);
    let v = losses::kl_divergence(&mut t, &[0.2, 0.3, 0.5], p);
    check("kl equal", v, &t, 0.0)?;
    let p = probs(&mut t, &[0.5, 0.5]);
    let v = losses::kl_divergence(&mut t, &[1.0, 0.0], p);
    check("kl zero mass", v, &t, ln(2.0))?;
    let p = probs(&mut t, &[0.25, 0.75]);
    let v = losses::kl_divergence(&mut t, &[0.5, 0.5], p);
    let kl_ref = 0.5 * ln(2.0) + 0.5 * ln(2.0 / 3.0);
    check("kl direct", v, &t, kl_ref)?;

    let y = [0.0, 1.0, 0.0];
    let w0 = LossWeights {
        alpha: 0.0,
        beta: 0.5,
        ..LossWeights::default()
    };
    let s = probs(&mut t, &[0.3, 0.3, 0.4]);
    let p = probs(&mut t, &[0.1, 0.7, 0.2]);
    let v = losses::soft_label_loss(&mut t, &[0.6, 0.2, 0.2], s, &y, p, &w0);
    check("soft label alpha 0", v, &t, -0.5 * ln(0.7))?;
    let wb = LossWeights {
        alpha: 0.5,
        beta: 0.0,
        ..LossWeights::default()
    };
    let s = probs(&mut t, &[0.6, 0.2, 0.2]);
    let v = losses::soft_label_loss(&mut t, &[0.6, 0.2, 0.2], s, &y, p, &wb);
    check("soft label beta 0", v, &t, 0.0)?;
    let s = probs(&mut t, &[0.25, 0.75]);
    let p2 = probs(&mut t, &[0.3, 0.7]);
    let v = losses::soft_label_loss(&mut t, &[0.5, 0.5], s, &[0.0, 1.0], p2, &LossWeights::default());
    check("soft label components", v, &t, 0.5 * kl_ref + 0.5 * -ln(0.7))?;

    let w = LossWeights::single_stage();
    ensure(
        (w.alpha, w.beta, w.gamma) == (0.25, 0.25, 0.5),
        format!("single-stage weights {w:?}"),
    )?;
    let c = |t: &mut Tape, x: f64| t.leaf(Tensor::new(vec![1], vec![x]).unwrap());
    let (a, b, g) = (c(&mut t, 1.0), c(&mut t, 1.0), c(&mut t, 1.0));
    let v = losses::single_stage_loss(&mut t, a, b, g, &w);
    check("single stage ones", v, &t, 1.0)?;
    let (a, b, g) = (c(&mut t, 0.0), c(&mut t, 0.0), c(&mut t, 0.0));
    let v = losses::single_stage_loss(&mut t, a, b, g, &w);
    check("single stage zeros", v, &t, 0.0)?;
    let (a, b, g) = (c(&mut t, ln(3.0)), c(&mut t, ln(2.0)), c(&mut t, 2.5));
    let v = losses::single_stage_loss(&mut t, a, b, g, &w);
    check("single stage components", v, &t, 0.25 * ln(3.0) + 0.25 * ln(2.0) + 0.5 * 2.5)?;
    Ok(format!("{n} examples within 1e-9"))
}

// Criterion 3

fn criterion_schedule() -> Outcome {
    let s = TeacherSchedule::default();
    let got: Vec<f64> = [1, 3, 7].iter().map(|&e| lr_schedule(&s, e)).collect::<Result<_, _>>().map_err(err)?;
    ensure(got == [8e-5, 4e-5, 2e-5], format!("lr at epochs 1, 3, 7: {got:?}"))?;
    Ok(format!("{got:?}"))
}

// Criterion 4

fn kl(t: &[f64], s: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let sv = probs(&mut tape, s);
    let v = losses::kl_divergence(&mut tape, t, sv).unwrap();
    scalar(&tape, v)
}

fn criterion_kl() -> Outcome {
    let mut r = rng::rng(rng::derive_labeled(4, "kl-pairs"));
    let mut min = f64::INFINITY;
    let mut self_max = 0.0f64;
    for i in 0..1000 {
        let n = 2 + i % 4;
        let t = simplex(n, &mut r);
        let s = simplex(n, &mut r);
        let d = kl(&t, &s);
        ensure(d >= 0.0, format!("pair {i}: KL {d} < 0"))?;
        let gap = t.iter().zip(&s).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if gap > 1e-4 {
            ensure(d > 1e-12, format!("pair {i}: distinct inputs with KL {d}"))?;
        }
        min = min.min(d);
        let same = kl(&t, &t);
        ensure(same.abs() <= 1e-12, format!("pair {i}: KL(t, t) = {same}"))?;
        self_max = self_max.max(same.abs());
    }
    Ok(format!("1000 pairs; min KL {min:.3e}; max |KL(t,t)| {self_max:.1e}"))
}

// Criterion 5

fn lookup(doc: &[u32], subject: u32, relation: u32) -> Option<u32> {
    let hits: Vec<u32> = doc.chunks(3).filter(|f| f[0] == subject && f[1] == relation).map(|f| f[2]).collect();
    (hits.len() == 1).then(|| hits[0])
}

fn criterion_data() -> Outcome {
    let spec = DatasetSpec {
        seed: 5,
        n_examples: 10_000,
        ..DatasetSpec::default()
    };
    let vocab = spec.vocab();
    let data: Vec<Example> = generate_dataset(&spec).map_err(err)?;
    ensure(data.len() == 10_000, "dataset size")?;
    let mut counts = [0usize; 3];
    let mut paraphrased = 0;
    for e in &data {
        let id = e.id;
        let doc: HashSet<u32> = e.document.iter().copied().collect();
        let absent: Vec<u32> = e.evidence.iter().copied().filter(|t| !doc.contains(t)).collect();
        if e.paraphrased {
            paraphrased += 1;
            ensure(
                absent.len() == 1 && vocab.is_paraphrase(absent[0]),
                format!("example {id}: paraphrased evidence"),
            )?;
        } else {
            ensure(
                e.document.windows(e.evidence.len()).any(|w| w == e.evidence.as_slice()),
                format!("example {id}: evidence not contiguous in document"),
            )?;
        }
        ensure(!e.document.iter().any(|&t| vocab.is_paraphrase(t)), format!("example {id}: paraphrase in document"))?;
        let from_doc = lookup(&e.document, e.question[0], e.question[1])
            .and_then(|o| e.candidates.iter().position(|c| c[0] == o));
        ensure(from_doc == Some(e.label), format!("example {id}: document lookup {from_doc:?}"))?;
        let rel = vocab.deparaphrase(e.evidence[1]);
        let from_ev = (e.evidence[0] == e.question[0] && rel == e.question[1])
            .then(|| e.candidates.iter().position(|c| c[0] == e.evidence[2]))
            .flatten();
        ensure(from_ev == Some(e.label), format!("example {id}: evidence lookup {from_ev:?}"))?;
        counts[e.label] += 1;
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / 10_000.0).collect();
    ensure(freqs.iter().all(|f| (0.30..=0.37).contains(f)), format!("label frequencies {freqs:?}"))?;
    let rate = paraphrased as f64 / 10_000.0;
    ensure((rate - 0.46).abs() <= 0.02, format!("paraphrase fraction {rate}"))?;
    Ok(format!("10000 examples; oracles 100%; labels {freqs:?}; paraphrased {rate:.4}"))
}

// Criterion 6

fn criterion_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let config = workspace().join("configs/smoke.json");
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_mrc-distill"))
            .args(["matrix", "--config"])
            .arg(&config)
            .arg("--out-dir")
            .arg(&out_dir)
            .output()
            .map_err(err)?;
        ensure(status.status.success(), String::from_utf8_lossy(&status.stderr).trim().to_string())?;
        let csv = std::fs::read(out_dir.join("report.csv")).map_err(err)?;
        let md = std::fs::read(out_dir.join("report.md")).map_err(err)?;
        outputs.push((csv, md));
    }
    ensure(outputs[0] == outputs[1], "reports differ between runs")?;
    Ok(format!("report.csv ({} bytes) and report.md identical", outputs[0].0.len()))
}

// Criteria 7 to 9

fn desk_matrix() -> Result<ExperimentMatrix, String> {
    let config = ExperimentConfig::load(&workspace().join("configs/desk.json")).map_err(err)?;
    let cache = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-desk-matrix.json");
    if std::env::var_os("MRC_ACCEPTANCE_FRESH").is_none() {
        if let Ok(m) = ExperimentMatrix::load(&cache) {
            if m.config == config {
                eprintln!("using cached desk matrix {}", cache.display());
                return Ok(m);
            }
        }
    }
    eprintln!("running desk matrix (cache at {})", cache.display());
    let progress = |label: &str, r: &Result<mrc_distill::training::RunRecord, String>| match r {
        Ok(rec) => eprintln!("  {label} seed {}: {:?} ({:.0}s)", rec.seed, rec.final_accuracy, rec.wall_clock_secs),
        Err(e) => eprintln!("  {label}: {e}"),
    };
    let m = experiment_matrix_with(&config, &progress).map_err(err)?;
    m.save(&cache).map_err(err)?;
    Ok(m)
}

fn per_seed(m: &ExperimentMatrix, label: &str) -> Result<Vec<f64>, String> {
    let row = m.row(label).ok_or(format!("missing row {label}"))?;
    ensure(row.errors.is_empty(), format!("{label} failed: {:?}", row.errors))?;
    row.accuracies.iter().map(|a| a.ok_or(format!("{label}: missing accuracy"))).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(" ")
}

fn criterion_teacher(m: &ExperimentMatrix) -> Outcome {
    let with = per_seed(m, "teacher_with_evidence")?;
    let without = per_seed(m, "teacher_without_evidence")?;
    let wins = with.iter().zip(&without).filter(|(a, b)| a >= b).count();
    let detail = format!("with [{}] vs without [{}]: {wins}/{}", fmt(&with), fmt(&without), with.len());
    ensure(with.len() == 5 && wins >= 4, detail.clone())?;
    Ok(detail)
}

fn criterion_students(m: &ExperimentMatrix) -> Outcome {
    let ce = mean(&per_seed(m, "student_ce_only")?);
    let two = mean(&per_seed(m, "two_stage")?);
    let single = mean(&per_seed(m, "single_stage")?);
    let lmskdts = mean(&per_seed(m, "lmskdts")?);
    let star = mean(&per_seed(m, "distill_star")?);
    let detail = format!(
        "ce_only {ce:.4}, lmskdts {lmskdts:.4}, single_stage {single:.4}, two_stage {two:.4}, distill_star {star:.4}"
    );
    ensure(two >= ce + 0.01 && two >= single, detail.clone())?;
    Ok(detail)
}

fn criterion_probe(m: &ExperimentMatrix) -> Outcome {
    let row = m.row("lmskdts").ok_or("missing row lmskdts")?;
    let lm: Vec<f64> = row
        .seeds
        .iter()
        .map(|&s| row.record(s).and_then(|r| r.probe).map(|p| p.random_head).ok_or(format!("seed {s}: no probe")))
        .collect::<Result<_, _>>()?;
    let two = per_seed(m, "probe_random")?;
    let wins = lm.iter().zip(&two).filter(|(a, b)| a > b).count();
    let detail = format!("lmskdts [{}] vs two_stage [{}]: {wins}/{}", fmt(&lm), fmt(&two), lm.len());
    ensure(lm.len() == 5 && wins >= 4, detail.clone())?;
    Ok(detail)
}

fn records<'a>(m: &'a ExperimentMatrix, label: &str) -> Result<Vec<&'a mrc_distill::RunRecord>, String> {
    let row = m.row(label).ok_or(format!("missing row {label}"))?;
    ensure(row.errors.is_empty(), format!("{label} failed: {:?}", row.errors))?;
    Ok(row.records.iter().collect())
}

fn oracle_training_trends(m: &ExperimentMatrix) -> Outcome {
    let mut n = 0;
    for label in ["teacher_with_evidence", "teacher_without_evidence", "two_stage", "lmskdts", "distill_star"] {
        for rec in records(m, label)? {
            let loss = &rec.stages[0].train_loss;
            let (first, last) = (loss[0], loss[loss.len() - 1]);
            ensure(last < first, format!("{label} seed {}: {} loss {first:.4} -> {last:.4}", rec.seed, rec.stages[0].name))?;
            n += 1;
        }
    }
    let gains: Vec<f64> = records(m, "two_stage")?
        .iter()
        .map(|r| r.stages[1].test_accuracy.last().unwrap() - r.stages[0].test_accuracy.last().unwrap())
        .collect();
    let wins = gains.iter().filter(|&&g| g > 0.0).count();
    let detail = format!("{n} first-stage curves decrease; stage-2 gain over stage 1 [{}]: {wins}/{}", fmt(&gains), gains.len());
    ensure(wins >= 4, detail.clone())?;
    Ok(detail)
}

// Criterion 10

fn criterion_isolation() -> Outcome {
    let config = ExperimentConfig::load(&workspace().join("configs/smoke.json")).map_err(err)?;
    let data = PreparedData::load(&config).map_err(err)?;
    let seed = config.seeds[0];
    let (teacher, _) = train_teacher(
        &data.teacher_train,
        None,
        &config.encoder,
        &config.schedule,
        &config.optimizer,
        seed,
    )
    .map_err(err)?;
    let before = write_checkpoint(&teacher).map_err(err)?;
    let head = |p: &ModelParams| -> Vec<Vec<u64>> {
        p.names()
            .iter()
            .zip(p.tensors())
            .filter(|(n, _)| HEAD_TENSORS.contains(&n.as_str()))
            .map(|(_, t)| t.data().iter().map(|x| x.to_bits()).collect())
            .collect()
    };
    let mut checked = 0;
    for variant in [Variant::TwoStage, Variant::Lmskdts, Variant::DistillStar] {
        let cfg = config.distill_for(variant, seed);
        let init = ModelParams::init(&config.encoder, rng::derive_labeled(seed, "student")).map_err(err)?;
        let (after, log) = distill_stage1(&teacher, init.clone(), data.distill_data(), &cfg, &config.optimizer)
            .map_err(err)?;
        ensure(!log.train_loss.is_empty(), format!("{}: stage 1 did not run", variant.name()))?;
        ensure(head(&after) == head(&init), format!("{}: head moved in stage 1", variant.name()))?;
        ensure(after != init, format!("{}: stage 1 left the encoder unchanged", variant.name()))?;
        checked += 1;
    }
    for variant in Variant::ALL {
        let cfg = config.distill_for(variant, seed);
        run_variant(&teacher, data.distill_data(), &cfg, &config.optimizer).map_err(err)?;
        ensure(
            write_checkpoint(&teacher).map_err(err)? == before,
            format!("teacher changed by {}", variant.name()),
        )?;
    }
    Ok(format!(
        "head bit-identical after {checked} stage-1 runs; teacher bit-identical across {} variants",
        Variant::ALL.len()
    ))
}

fn run(id: &str, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into()))
    });
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{id} {tag} {name}: {detail}");
    outcome.is_ok()
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= run("criterion  1", "gradient correctness", criterion_gradients);
    ok &= run("criterion  2", "loss-value oracles", criterion_loss_values);
    ok &= run("criterion  3", "schedule oracle", criterion_schedule);
    ok &= run("criterion  4", "KL properties", criterion_kl);
    ok &= run("criterion  5", "data invariants", criterion_data);
    ok &= run("criterion  6", "determinism", criterion_determinism);
    match desk_matrix() {
        Ok(m) => {
            ok &= run("criterion  7", "teacher with vs without evidence", || criterion_teacher(&m));
            ok &= run("criterion  8", "student ordering", || criterion_students(&m));
            ok &= run("criterion  9", "random-head probe", || criterion_probe(&m));
            ok &= run("supplement  ", "desk training trends", || oracle_training_trends(&m));
        }
        Err(e) => {
            for (n, name) in [(7, "teacher with vs without evidence"), (8, "student ordering"), (9, "random-head probe")] {
                println!("criterion {n:>2} FAIL {name}: desk matrix unavailable: {e}");
            }
            ok = false;
        }
    }
    ok &= run("criterion 10", "stage isolation", criterion_isolation);
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
