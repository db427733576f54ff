use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde_json::{json, Value};
use stitchformer::data::{load_dataset, save_dataset, Dataset};
use stitchformer::eval::{demo_sweep, rollout_eval, run_stitching, train_contextformer, PolicyAgent, ScoreReference};
use stitchformer::models::ContextFormer;
use stitchformer::objectives::{write_metrics_line, EpochMetrics};
use stitchformer::tensor::{Precision, Real};
use stitchformer::theorem::check_theorem;

mod config;

use config::{usage, RunConfig, Settings, UsageError};

#[derive(Parser)]
#[command(
    name = "stitchformer",
    version,
    about = "Train and evaluate latent-conditioned transformer policies on stitching tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of segment episodes and expert demonstrations.
    GenData(Settings),
    /// Train policy, encoder and contextual embedding on a dataset.
    Train(Settings),
    /// Roll out a trained checkpoint.
    Eval(Settings),
    /// Train ContextFormer and the zero-token control, then compare them.
    StitchExp(Settings),
    /// Check the objective decomposition on random discrete instances.
    VerifyTheorem(Settings),
    /// Convert a metrics or report file to CSV.
    ExportMetrics(Settings),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report_error("usage", &e.to_string());
            return ExitCode::from(2);
        }
    };
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let kind = if e.is::<UsageError>() {
                "usage"
            } else {
                e.chain().find_map(|c| c.downcast_ref::<stitchformer::Error>()).map_or("runtime", error_kind)
            };
            report_error(kind, &format!("{e:#}"));
            ExitCode::from(if kind == "usage" { 2 } else { 1 })
        }
    }
}

fn error_kind(e: &stitchformer::Error) -> &'static str {
    use stitchformer::Error::*;
    match e {
        Contract(_) => "contract",
        Numeric(_) => "numeric",
        Format(_) => "format",
        Corruption(_) => "corruption",
        Generation(_) => "generation",
        Io(_) => "io",
        Json(_) => "json",
    }
}

fn report_error(kind: &str, message: &str) {
    eprintln!("{}", json!({ "error": kind, "message": message.trim_end() }));
}

fn print_json(value: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

/// Runs one command. `Ok(false)` means the command finished but its check
/// failed.
fn dispatch(command: Command) -> anyhow::Result<bool> {
    match command {
        Command::GenData(s) => gen_data(RunConfig::resolve("gen-data", s, None)?),
        Command::Train(s) => {
            let (cfg, dataset) = with_dataset("train", s)?;
            match cfg.precision {
                Precision::F32 => train::<f32>(&cfg, &dataset),
                Precision::F64 => train::<f64>(&cfg, &dataset),
            }
        }
        Command::Eval(s) => {
            let (cfg, dataset) = with_dataset("eval", s)?;
            match cfg.precision {
                Precision::F32 => eval::<f32>(&cfg, &dataset),
                Precision::F64 => eval::<f64>(&cfg, &dataset),
            }
        }
        Command::StitchExp(s) => {
            let (cfg, dataset) = match s.dataset.is_some() || config_names_dataset(&s)? {
                true => {
                    let (cfg, dataset) = with_dataset("stitch-exp", s)?;
                    (cfg, Some(dataset))
                }
                false => (RunConfig::resolve("stitch-exp", s, None)?, None),
            };
            match cfg.precision {
                Precision::F32 => stitch_exp::<f32>(&cfg, dataset),
                Precision::F64 => stitch_exp::<f64>(&cfg, dataset),
            }
        }
        Command::VerifyTheorem(s) => verify_theorem(RunConfig::resolve("verify-theorem", s, None)?),
        Command::ExportMetrics(s) => export_metrics(RunConfig::resolve("export-metrics", s, None)?),
    }
}

fn config_names_dataset(s: &Settings) -> anyhow::Result<bool> {
    Ok(match &s.config {
        Some(path) => Settings::from_file(path)?.dataset.is_some(),
        None => false,
    })
}

/// Resolves the configuration of a command that reads a dataset, taking the
/// environment from the dataset unless one is given.
fn with_dataset(command: &str, s: Settings) -> anyhow::Result<(RunConfig, Dataset)> {
    let file = match &s.config {
        Some(path) => Settings::from_file(path)?,
        None => Settings::default(),
    };
    let path = s.dataset.clone().or(file.dataset).ok_or_else(|| usage!("dataset path required (--dataset)"))?;
    let precision = match s.precision.or(file.precision) {
        Some(p) => p,
        None => stitchformer::eval::ExperimentConfig::new(stitchformer::envs::EnvKind::FourRooms).precision,
    };
    let dataset = load_dataset(&path, precision).with_context(|| format!("loading dataset {}", path.display()))?;
    let cfg = RunConfig::resolve(command, s, Some(dataset.spec().kind))?;
    anyhow::ensure!(
        cfg.env == dataset.spec().kind,
        usage!("dataset {} holds {} data but env is {}", path.display(), dataset.spec().kind, cfg.env)
    );
    anyhow::ensure!(
        !cfg.observation_only() || dataset.manifest.observation_only,
        usage!("mode lfo needs a dataset generated with action-free demonstrations")
    );
    Ok((cfg, dataset))
}

fn gen_data(cfg: RunConfig) -> anyhow::Result<bool> {
    cfg.echo()?;
    let dataset = cfg.experiment().build_dataset()?;
    let path = cfg.dataset.clone().unwrap_or_else(|| cfg.artifact("dataset.jsonl"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_dataset(&path, &dataset)?;
    print_json(&json!({
        "dataset": path,
        "env": cfg.env,
        "content_hash": dataset.manifest.content_hash,
        "suboptimal_episodes": dataset.suboptimal.len(),
        "expert_demos": dataset.expert.len(),
        "observation_only": dataset.manifest.observation_only,
    }))?;
    Ok(true)
}

fn metrics_sink(cfg: &RunConfig) -> anyhow::Result<impl FnMut(&EpochMetrics) -> stitchformer::Result<()>> {
    let path = cfg.artifact("metrics.jsonl");
    if path.exists() {
        std::fs::remove_file(&path)?;
    }
    Ok(move |m: &EpochMetrics| write_metrics_line(&path, m))
}

fn train<S: Real>(cfg: &RunConfig, dataset: &Dataset) -> anyhow::Result<bool> {
    cfg.echo()?;
    let exp = cfg.experiment();
    let mut last = None;
    let mut sink = metrics_sink(cfg)?;
    let model: ContextFormer<S> = train_contextformer(dataset, &exp, |m| {
        last = Some(m.clone());
        sink(m)
    })?;
    let checkpoint = cfg.checkpoint.clone().unwrap_or_else(|| cfg.artifact("model.ckpt"));
    model.save(
        &checkpoint,
        json!({ "env": cfg.env, "dataset_hash": dataset.manifest.content_hash, "observation_only": cfg.observation_only() }),
    )?;
    print_json(&json!({
        "checkpoint": checkpoint,
        "metrics": cfg.artifact("metrics.jsonl"),
        "epochs": cfg.epochs,
        "final": last,
        "z_star": model.latent.values(),
    }))?;
    Ok(true)
}

fn eval<S: Real>(cfg: &RunConfig, dataset: &Dataset) -> anyhow::Result<bool> {
    cfg.echo()?;
    let checkpoint = cfg.checkpoint.clone().unwrap_or_else(|| cfg.artifact("model.ckpt"));
    let (model, extra) = ContextFormer::<S>::load(&checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    if let Some(hash) = extra.get("dataset_hash").and_then(Value::as_str) {
        anyhow::ensure!(
            hash == dataset.manifest.content_hash,
            usage!("checkpoint {} was trained on a different dataset", checkpoint.display())
        );
    }
    let spec = dataset.spec();
    anyhow::ensure!(
        model.policy.config().obs_dim == spec.obs_dim && model.policy.config().act_dim == spec.act_dim(),
        usage!("checkpoint does not match the {} observation and action widths", spec.name)
    );
    let reference = ScoreReference::measure(cfg.env, cfg.reference_episodes, cfg.seed)?;
    let mut agent = PolicyAgent { policy: &model.policy, z: model.latent.values(), stats: dataset.stats() };
    let mut env = cfg.env.make();
    let mut report = rollout_eval(&mut agent, env.as_mut(), cfg.eval_episodes, cfg.seed, &reference)?;
    report.context = Some(model.policy.config().context);
    write_json(&cfg.artifact("eval.json"), &report)?;
    print_json(&json!({
        "env": report.env,
        "episodes": report.episodes,
        "success_rate": report.success_rate,
        "mean_return": report.mean_return,
        "normalized_score": report.normalized_score,
        "report": cfg.artifact("eval.json"),
    }))?;
    Ok(true)
}

fn stitch_exp<S: Real>(cfg: &RunConfig, dataset: Option<Dataset>) -> anyhow::Result<bool> {
    cfg.echo()?;
    let exp = cfg.experiment();
    if let Some(counts) = &cfg.sweep {
        anyhow::ensure!(dataset.is_none(), usage!("a sweep generates its own datasets; drop the dataset setting"));
        let reports = demo_sweep::<S>(&exp, counts)?;
        write_json(&cfg.artifact("sweep.json"), &reports)?;
        let rows: Vec<Value> = reports
            .iter()
            .map(|r| json!({ "demos": r.demos, "contextformer": r.contextformer.success_rate, "control": r.control.success_rate }))
            .collect();
        print_json(&json!({ "sweep": rows, "report": cfg.artifact("sweep.json") }))?;
        return Ok(true);
    }
    let dataset = match dataset {
        Some(d) => d,
        None => exp.build_dataset()?,
    };
    let mut sink = metrics_sink(cfg)?;
    let report = run_stitching::<S>(&dataset, &exp, &mut sink)?;
    write_json(&cfg.artifact("report.json"), &report)?;
    print_json(&json!({
        "env": report.env,
        "demos": report.demos,
        "observation_only": report.observation_only,
        "contextformer_success": report.contextformer.success_rate,
        "control_success": report.control.success_rate,
        "success_gap": report.success_gap,
        "report": cfg.artifact("report.json"),
    }))?;
    Ok(true)
}

fn verify_theorem(cfg: RunConfig) -> anyhow::Result<bool> {
    cfg.echo()?;
    let report = check_theorem(cfg.instances, cfg.seed)?;
    write_json(&cfg.artifact("theorem.json"), &report)?;
    print_json(&report)?;
    Ok(report.pass)
}

fn export_metrics(cfg: RunConfig) -> anyhow::Result<bool> {
    let input = cfg.input.clone().ok_or_else(|| usage!("input path required (--input)"))?;
    cfg.echo()?;
    let text = std::fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
    let out: PathBuf = cfg.artifact(&format!("{stem}.csv"));
    let mut writer = csv::Writer::from_path(&out).with_context(|| format!("writing {}", out.display()))?;
    let is_jsonl = input.extension().is_some_and(|e| e == "jsonl");
    let rows = if is_jsonl {
        let mut rows = 0;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let m: EpochMetrics =
                serde_json::from_str(line).with_context(|| format!("{} line {}", input.display(), i + 1))?;
            writer.serialize(m)?;
            rows += 1;
        }
        rows
    } else {
        let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", input.display()))?;
        let reports = match value {
            Value::Array(items) => items,
            other => vec![other],
        };
        writer.write_record(["demos", "arm", "episodes", "success_rate", "mean_return", "normalized_score"])?;
        let mut rows = 0;
        for r in &reports {
            let arms: Vec<(&str, &Value)> = match r.get("contextformer") {
                Some(ours) => vec![("contextformer", ours), ("control", &r["control"])],
                None => vec![("policy", r)],
            };
            for (arm, e) in arms {
                let field = |k: &str| {
                    e.get(k).map(Value::to_string).ok_or_else(|| anyhow::anyhow!("{} lacks {k}", input.display()))
                };
                let demos = r.get("demos").map(Value::to_string).unwrap_or_default();
                writer.write_record([
                    demos,
                    arm.to_string(),
                    field("episodes")?,
                    field("success_rate")?,
                    field("mean_return")?,
                    field("normalized_score")?,
                ])?;
                rows += 1;
            }
        }
        rows
    };
    writer.flush()?;
    print_json(&json!({ "csv": out, "rows": rows }))?;
    Ok(true)
}
