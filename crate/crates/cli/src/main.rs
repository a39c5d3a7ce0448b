use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use mrc_distill::encoder::{load_checkpoint, save_checkpoint};
use mrc_distill::eval::evaluate;
use mrc_distill::experiment::{experiment_matrix_with, PreparedData};
use mrc_distill::report::{emit_report, render_report};
use mrc_distill::synthdata::{generate_dataset, read_jsonl, write_jsonl};
use mrc_distill::training::{run_variant, train_teacher};
use mrc_distill::{
    DatasetSpec, Error, ExperimentConfig, ExperimentMatrix, ModelParams, ReportFormat, RunRecord, Variant, View,
};

#[derive(Parser)]
#[command(name = "mrc-distill", version, about = "Teacher training and two-stage distillation on synthetic reading-comprehension data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset from a JSON spec and write it as JSONL.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one teacher per configured seed.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a student variant per seed against the saved teachers.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        variant: Variant,
    },
    /// Accuracy of a checkpoint on a JSONL dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        view: View,
    },
    /// Run every matrix row for every seed and write the matrix and reports.
    Matrix {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Render a saved matrix to stdout.
    Report {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        format: ReportFormat,
    },
}

fn print(value: serde_json::Value) {
    println!("{value}");
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn teacher_path(config: &ExperimentConfig, seed: u64) -> PathBuf {
    config
        .teacher_checkpoint
        .clone()
        .unwrap_or_else(|| config.out_dir.join(format!("teacher-seed{seed}.ckpt")))
}

fn write_record(path: &Path, value: &RunRecord) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(spec: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display()))?;
    let spec = DatasetSpec::from_json(&text)?;
    let data = generate_dataset(&spec)?;
    write_jsonl(&data, out)?;
    print(json!({ "examples": data.len(), "out": out }));
    Ok(())
}

fn train_teachers(path: &Path) -> Result<()> {
    let config = ExperimentConfig::load(path)?;
    let data = PreparedData::load(&config)?;
    create_dir(&config.out_dir)?;
    for &seed in &config.seeds {
        let (params, record) = train_teacher(
            &data.teacher_train,
            Some(&data.teacher_test),
            &config.encoder,
            &config.schedule,
            &config.optimizer,
            seed,
        )?;
        let ckpt = config.out_dir.join(format!("teacher-seed{seed}.ckpt"));
        save_checkpoint(&params, &ckpt)?;
        write_record(&config.out_dir.join(format!("teacher-seed{seed}.json")), &record)?;
        print(json!({ "seed": seed, "accuracy": record.final_accuracy, "checkpoint": ckpt }));
    }
    Ok(())
}

fn distill(path: &Path, variant: Variant) -> Result<()> {
    let config = ExperimentConfig::load(path)?;
    let data = PreparedData::load(&config)?;
    create_dir(&config.out_dir)?;
    for &seed in &config.seeds {
        let teacher: ModelParams = load_checkpoint(&teacher_path(&config, seed))?;
        if teacher.config != config.encoder {
            return Err(Error::Config("teacher checkpoint was trained with a different encoder config".into()).into());
        }
        let cfg = config.distill_for(variant, seed);
        let (student, record) = run_variant(&teacher, data.distill_data(), &cfg, &config.optimizer)?;
        let stem = format!("{}-seed{seed}", variant.name());
        let ckpt = config.out_dir.join(format!("{stem}.ckpt"));
        save_checkpoint(&student, &ckpt)?;
        write_record(&config.out_dir.join(format!("{stem}.json")), &record)?;
        print(json!({
            "variant": variant.name(),
            "seed": seed,
            "accuracy": record.final_accuracy,
            "checkpoint": ckpt,
        }));
    }
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, view: View) -> Result<()> {
    let params = load_checkpoint(checkpoint)?;
    let examples = read_jsonl(data)?;
    print(serde_json::to_value(evaluate(&params, &examples, view)?)?);
    Ok(())
}

fn matrix(path: &Path, out_dir: &Path) -> Result<()> {
    let config = ExperimentConfig::load(path)?;
    create_dir(out_dir)?;
    let progress = |label: &str, r: &std::result::Result<RunRecord, String>| match r {
        Ok(rec) => eprintln!(
            "{label} seed {}: accuracy {} ({:.1}s)",
            rec.seed,
            rec.final_accuracy.map_or("NA".into(), |a| format!("{a:.4}")),
            rec.wall_clock_secs
        ),
        Err(e) => eprintln!("{label}: failed: {e}"),
    };
    let m = experiment_matrix_with(&config, &progress)?;
    let json_path = out_dir.join("matrix.json");
    m.save(&json_path)?;
    emit_report(&m, ReportFormat::Csv, &out_dir.join("report.csv"))?;
    emit_report(&m, ReportFormat::Markdown, &out_dir.join("report.md"))?;
    let failed: usize = m.rows.iter().map(|r| r.errors.len()).sum();
    print(json!({ "matrix": json_path, "rows": m.rows.len(), "failed_runs": failed }));
    Ok(())
}

fn report(path: &Path, format: ReportFormat) -> Result<()> {
    let m = ExperimentMatrix::load(path)?;
    print!("{}", render_report(&m, format));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out } => gen_data(&spec, &out),
        Command::TrainTeacher { config } => train_teachers(&config),
        Command::Distill { config, variant } => distill(&config, variant),
        Command::Eval {
            checkpoint,
            data,
            view,
        } => eval(&checkpoint, &data, view),
        Command::Matrix { config, out_dir } => matrix(&config, &out_dir),
        Command::Report { matrix, format } => report(&matrix, format),
    }
}

fn fail(kind: &str, message: &str) -> ExitCode {
    let message = message.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => return fail("usage", &e.to_string()),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<Error>().map_or("io", Error::kind);
            fail(kind, &format!("{e:#}"))
        }
    }
}
