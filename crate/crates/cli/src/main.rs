use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use bpsd::bundle::{self, load_bundle, reload_data};
use bpsd::cohort::write_cohort_with_offset;
use bpsd::config::{ConfigFile, DataSource, RunConfig};
use bpsd::evaluation::report::{ablation_csv, write_reports, ABLATION_FILE};
use bpsd::featurize::{read_instances, write_instances};
use bpsd::framework::ActiveSet;
use bpsd::pipeline;
use bpsd::synthgen::generate_cohort;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

/// Two-stage prediction of behavioral symptoms of dementia from wearable signals.
#[derive(Parser)]
#[command(name = "bpsd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cohort (signals, events, demographics, instances).
    Generate(GenerateArgs),
    /// Train personalized models, the generalized suite and the baseline.
    Train(TrainArgs),
    /// Evaluate a trained bundle and write the reports.
    Evaluate(EvaluateArgs),
    /// Run the four-row generalized-model ablation.
    Ablate(EvaluateArgs),
    /// Predict one instance row and print the result as JSON.
    Predict(PredictArgs),
}

#[derive(Args, Default)]
struct GeneratorFlags {
    /// Random seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patients: Option<usize>,
    #[arg(long)]
    days: Option<usize>,
    #[arg(long)]
    wear_days_per_week: Option<usize>,
    #[arg(long)]
    drift_scale: Option<f64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    generator: GeneratorFlags,
    /// Config file (`[section] key = value`); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory with signals.csv, events.csv and demographics.csv.
    #[arg(long, conflicts_with_all = ["patients", "days", "wear_days_per_week", "drift_scale"])]
    data: Option<PathBuf>,
    #[command(flatten)]
    generator: GeneratorFlags,
    /// ERT, RF or LR.
    #[arg(long)]
    backbone: Option<String>,
    /// Active ensemble members, e.g. `rdg,irg,tcn`.
    #[arg(long)]
    ensemble: Option<String>,
    /// Occurrence probability at or above which stage one fires.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    tcn_epochs: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Bundle directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Evaluate with a different active ensemble set.
    #[arg(long)]
    ensemble: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// instances.csv file holding the row to predict.
    #[arg(long)]
    instances: PathBuf,
    /// Zero-based data row index.
    #[arg(long, default_value_t = 0)]
    row: usize,
    #[arg(long)]
    ensemble: Option<String>,
}

/// Exit status for a failure, from the library error category.
fn exit_code(err: &anyhow::Error) -> (u8, &'static str) {
    let kind = err.chain().find_map(|e| e.downcast_ref::<bpsd::Error>()).map_or("internal", bpsd::Error::kind);
    let code = match kind {
        "config" => 2,
        "data" | "io" => 3,
        "degenerate" => 4,
        _ => 1,
    };
    (code, kind)
}

fn layered_config(path: Option<&Path>, flags: ConfigFile) -> anyhow::Result<RunConfig> {
    let mut file = match path {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    file.overlay(&flags);
    let (config, notes) = RunConfig::resolve(&file)?;
    for n in notes {
        eprintln!("note: {n}");
    }
    Ok(config)
}

fn generator_flags(f: &GeneratorFlags, into: &mut ConfigFile) {
    let mut set = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            into.set("generator", k, v);
        }
    };
    set("seed", f.seed.map(|v| v.to_string()));
    set("patients", f.patients.map(|v| v.to_string()));
    set("days", f.days.map(|v| v.to_string()));
    set("wear_days_per_week", f.wear_days_per_week.map(|v| v.to_string()));
    set("drift_scale", f.drift_scale.map(|v| v.to_string()));
}

fn required_out(config: &RunConfig) -> anyhow::Result<PathBuf> {
    config
        .out
        .clone()
        .ok_or_else(|| bpsd::Error::Config("no output directory (use --out or [output] dir)".into()).into())
}

/// Stages outputs in a scratch directory next to `out` and moves them into
/// place only when `f` succeeds; on failure the scratch directory is removed.
fn with_staging<T>(out: &Path, f: impl FnOnce(&Path) -> anyhow::Result<T>) -> anyhow::Result<T> {
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(bpsd::Error::from)?;
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    let stage = parent.join(format!(".{name}.partial-{}", std::process::id()));
    if stage.exists() {
        fs::remove_dir_all(&stage).map_err(bpsd::Error::from)?;
    }
    fs::create_dir_all(&stage).map_err(bpsd::Error::from)?;
    let result = f(&stage).and_then(|v| {
        fs::create_dir_all(out).map_err(bpsd::Error::from)?;
        for entry in fs::read_dir(&stage).map_err(bpsd::Error::from)? {
            let entry = entry.map_err(bpsd::Error::from)?;
            let target = out.join(entry.file_name());
            if target.is_dir() {
                fs::remove_dir_all(&target).map_err(bpsd::Error::from)?;
            } else if target.exists() {
                fs::remove_file(&target).map_err(bpsd::Error::from)?;
            }
            fs::rename(entry.path(), &target).map_err(bpsd::Error::from)?;
        }
        Ok(v)
    });
    let _ = fs::remove_dir_all(&stage);
    result
}

fn cmd_generate(args: GenerateArgs) -> anyhow::Result<()> {
    let mut flags = ConfigFile::default();
    generator_flags(&args.generator, &mut flags);
    if let Some(o) = &args.out {
        flags.set("output", "dir", o.display().to_string());
    }
    let config = layered_config(args.config.as_deref(), flags)?;
    let DataSource::Generator(gen) = &config.data else {
        return Err(bpsd::Error::Config("generate needs generator settings, not [data] dir".into()).into());
    };
    let out = required_out(&config)?;
    with_staging(&out, |stage| {
        let cohort = generate_cohort(gen)?;
        write_cohort_with_offset(&cohort, stage, gen.utc_offset_seconds)?;
        let data = pipeline::prepare(&cohort, &config.framework);
        let all: Vec<_> = data.instances.into_iter().flatten().collect();
        write_instances(&stage.join("instances.csv"), &all)?;
        eprintln!("wrote {} patients, {} instances to {}", cohort.patients.len(), all.len(), out.display());
        Ok(())
    })
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut flags = ConfigFile::default();
    match &args.data {
        Some(d) => flags.set("data", "dir", d.display().to_string()),
        None => generator_flags(&args.generator, &mut flags),
    }
    if let Some(s) = args.generator.seed {
        flags.set("model", "seed", s.to_string());
    }
    if let Some(b) = &args.backbone {
        flags.set("model", "backbone", b.clone());
    }
    if let Some(e) = &args.ensemble {
        flags.set("model", "ensemble", e.clone());
    }
    if let Some(t) = args.threshold {
        flags.set("model", "threshold", t.to_string());
    }
    if let Some(e) = args.tcn_epochs {
        flags.set("tcn", "epochs", e.to_string());
    }
    if let Some(o) = &args.out {
        flags.set("output", "dir", o.display().to_string());
    }
    let config = layered_config(args.config.as_deref(), flags)?;
    let out = required_out(&config)?;
    with_staging(&out, |stage| {
        let b = bundle::train_to_dir(&config, stage, bundle::timestamp_now())?;
        eprintln!(
            "trained {} personalized models ({} skipped); bundle {}",
            b.predictor.personalized.len(),
            b.manifest.skipped.len(),
            out.display()
        );
        Ok(())
    })
}

fn load_for_eval(model: &Path, ensemble: Option<&str>) -> anyhow::Result<(bundle::Bundle, pipeline::PreparedData)> {
    let mut b = load_bundle(model).with_context(|| format!("loading bundle {}", model.display()))?;
    if let Some(e) = ensemble {
        b.predictor.active = ActiveSet::parse(e)?;
    }
    let data = reload_data(&b, model)?;
    Ok((b, data))
}

fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let (b, data) = load_for_eval(&args.model, args.ensemble.as_deref())?;
    let r = pipeline::evaluate(&b.predictor, &b.baseline, &data, &b.skipped())?;
    with_staging(&args.out, |stage| {
        write_reports(stage, &r.two_stage, Some(&r.baseline), Some(&r.ablation), &r.excluded)?;
        Ok(())
    })?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
    eprintln!(
        "two-stage mean 4-class macro AUC {} vs pooled baseline {}",
        fmt(r.two_stage.mean_macro_auc()),
        fmt(r.baseline.auc)
    );
    Ok(())
}

fn cmd_ablate(args: EvaluateArgs) -> anyhow::Result<()> {
    let (b, data) = load_for_eval(&args.model, args.ensemble.as_deref())?;
    let rows = bpsd::evaluation::run_ablation(&b.predictor, &data.splits)?;
    with_staging(&args.out, |stage| {
        fs::write(stage.join(ABLATION_FILE), ablation_csv(&rows)).map_err(bpsd::Error::from)?;
        Ok(())
    })
}

fn cmd_predict(args: PredictArgs) -> anyhow::Result<()> {
    let mut b = load_bundle(&args.model)?;
    if let Some(e) = &args.ensemble {
        b.predictor.active = ActiveSet::parse(e)?;
    }
    let rows = read_instances(&args.instances)?;
    let inst = rows.get(args.row).ok_or_else(|| {
        bpsd::Error::Data(format!("{} has {} rows; row {} requested", args.instances.display(), rows.len(), args.row))
    })?;
    let out = b.predictor.predict(inst)?;
    let doc = json!({
        "patient_id": inst.patient_id,
        "occurrence_prob": out.occurrence_prob,
        "ensemble_probs": out.ensemble_probs,
        "final_class": out.final_class.name(),
        "model_version": b.model_version(),
    });
    println!("{doc}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Predict(a) => cmd_predict(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = exit_code(&e);
            let message = format!("{e:#}").replace('\n', " ");
            eprintln!("{}", json!({ "error": kind, "code": code, "message": message }));
            log::debug!("{e:?}");
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        let cfg: anyhow::Error = bpsd::Error::Config("x".into()).into();
        assert_eq!(exit_code(&cfg).0, 2);
        let data: anyhow::Error = bpsd::Error::Data("x".into()).into();
        assert_eq!(exit_code(&data.context("while loading")).0, 3);
        let deg: anyhow::Error = bpsd::Error::Degenerate("x".into()).into();
        assert_eq!(exit_code(&deg).0, 4);
        assert_eq!(exit_code(&anyhow::anyhow!("other")).0, 1);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
