use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use remtime_core::encodings::ensure_encodings;
use remtime_core::evaluation::{cross_validate, evaluate, write_earliness_csv, CrossValidationReport, DummyModel};
use remtime_core::eventlog::{
    canonical_options, filter_short_traces, log_statistics, parse_csv, parse_xes, write_canonical_csv,
    AttributeSchema, CsvOptions, EventLog, SchemaFile,
};
use remtime_core::graphbuild::{
    build_dataset, fit_stats, read_dataset, read_sidecar, write_dataset, write_sidecar, DatasetSidecar, PrefixGraph,
};
use remtime_core::prefixing::{build_prefixes, make_split, materialize_fold, SplitPlan};
use remtime_core::synthetic::{generate_two_variant_log, SyntheticConfig};
use remtime_core::training::{save_checkpoint, train_model, write_metrics_csv};

use crate::config::RunConfig;
use crate::manifest::{hash_file, previous, RunManifest};
use crate::{Cli, CliError, Command, LogFormat};

pub const LOG_FILE: &str = "log.csv";
pub const SCHEMA_FILE: &str = "schema.json";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const SPLIT_FILE: &str = "split.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const REPORT_FILE: &str = "report.json";
pub const BASELINE_FILE: &str = "baseline.json";
pub const EARLINESS_FILE: &str = "earliness.csv";

/// Traces shorter than this yield no prefix with a remaining time.
const MIN_TRACE_LEN: usize = 3;

pub fn run(cli: &Cli) -> Result<Value, CliError> {
    match &cli.command {
        Command::Generate { cases } => generate(cli, *cases),
        Command::Stats => stats(cli),
        Command::Split => split(cli),
        Command::Convert => convert(cli),
        Command::Train => train(cli),
        Command::Evaluate { .. } => evaluate_cmd(cli),
        Command::Baseline => baseline(cli),
        Command::Report => report(cli),
    }
}

fn out_dir(cli: &Cli) -> Result<&Path, CliError> {
    std::fs::create_dir_all(&cli.out).map_err(remtime_core::Error::from)?;
    Ok(&cli.out)
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    RunConfig::resolve(cli.config.as_deref(), &cli.overrides())
}

fn log_path(cli: &Cli) -> Result<&PathBuf, CliError> {
    cli.log.as_ref().ok_or_else(|| CliError::Usage("--log is required".into()))
}

/// Parses `--log`, drops traces too short to yield a prefix, and returns
/// the hashes of the files read.
fn load_log(cli: &Cli) -> Result<(EventLog, BTreeMap<String, String>), CliError> {
    let path = log_path(cli)?;
    let mut inputs = BTreeMap::new();
    inputs.insert("log".to_string(), hash_file(path)?);
    let is_xes = match cli.format {
        Some(LogFormat::Xes) => true,
        Some(LogFormat::Csv) => false,
        None => path.extension().is_some_and(|e| e.eq_ignore_ascii_case("xes")),
    };
    let log = if is_xes {
        parse_xes(path)?
    } else {
        let schema = match &cli.schema {
            Some(s) => {
                inputs.insert("schema".to_string(), hash_file(s)?);
                SchemaFile::load(s)?
            }
            None => SchemaFile {
                csv: CsvOptions::default(),
                attributes: AttributeSchema::default(),
            },
        };
        parse_csv(path, &schema.csv, &schema.attributes)?
    };
    Ok((filter_short_traces(&log, MIN_TRACE_LEN)?, inputs))
}

fn config_json(cfg: &RunConfig, extra: Value) -> Value {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    if let (Value::Object(map), Value::Object(more)) = (&mut v, extra) {
        map.extend(more);
    }
    v
}

fn summary(m: &RunManifest, dir: &Path, extra: Value) -> Value {
    let mut v = json!({
        "command": m.command,
        "out": dir.display().to_string(),
        "manifest_hash": m.manifest_hash,
        "artifacts": m.artifacts.keys().collect::<Vec<_>>(),
    });
    if let (Value::Object(map), Value::Object(more)) = (&mut v, extra) {
        map.extend(more);
    }
    v
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(remtime_core::Error::from)?;
    std::fs::write(path, text + "\n").map_err(remtime_core::Error::from)?;
    Ok(())
}

fn generate(cli: &Cli, cases: usize) -> Result<Value, CliError> {
    let dir = out_dir(cli)?;
    let config = SyntheticConfig {
        cases,
        seed: cli.seed.unwrap_or(SyntheticConfig::default().seed),
        ..SyntheticConfig::default()
    };
    let mut m = RunManifest::begin(
        "generate",
        config.seed,
        serde_json::to_value(&config).expect("config serializes"),
        BTreeMap::new(),
    );
    let log = generate_two_variant_log(&config)?;
    let w = BufWriter::new(File::create(dir.join(LOG_FILE)).map_err(remtime_core::Error::from)?);
    write_canonical_csv(&log, w)?;
    let schema = SchemaFile {
        csv: canonical_options(),
        attributes: log.schema().clone(),
    };
    write_json(&dir.join(SCHEMA_FILE), &schema)?;
    m.record(dir, LOG_FILE)?;
    m.record(dir, SCHEMA_FILE)?;
    let m = m.finish(dir)?;
    Ok(summary(&m, dir, json!({ "cases": cases })))
}

fn stats(cli: &Cli) -> Result<Value, CliError> {
    let (log, _) = load_log(cli)?;
    Ok(serde_json::to_value(log_statistics(&log)).expect("stats serialize"))
}

fn plan_from_config(log: &EventLog, cfg: &RunConfig) -> Result<SplitPlan, CliError> {
    Ok(make_split(
        log,
        cfg.split.mode,
        cfg.split.folds,
        cfg.split.train_ratio,
        cfg.seed,
        cfg.split.validation_fraction,
    )?)
}

fn split(cli: &Cli) -> Result<Value, CliError> {
    let cfg = resolve(cli)?;
    let (log, inputs) = load_log(cli)?;
    let dir = out_dir(cli)?;
    let mut m = RunManifest::begin("split", cfg.seed, serde_json::to_value(&cfg.split).expect("split serializes"), inputs);
    let plan = plan_from_config(&log, &cfg)?;
    plan.save(dir.join(SPLIT_FILE))?;
    m.record(dir, SPLIT_FILE)?;
    let m = m.finish(dir)?;
    Ok(summary(&m, dir, json!({ "runs": plan.runs(), "cases": plan.assignment.len() })))
}

/// The split plan in `dir`, if one was written.
fn existing_plan(dir: &Path, inputs: &mut BTreeMap<String, String>) -> Result<Option<SplitPlan>, CliError> {
    let path = dir.join(SPLIT_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    inputs.insert(SPLIT_FILE.to_string(), hash_file(&path)?);
    Ok(Some(SplitPlan::load(path)?))
}

fn convert(cli: &Cli) -> Result<Value, CliError> {
    let cfg = resolve(cli)?;
    let (log, mut inputs) = load_log(cli)?;
    let dir = out_dir(cli)?;
    let plan = existing_plan(dir, &mut inputs)?;
    let fold = plan.as_ref().map(|_| cli.fold);
    let mut m = RunManifest::begin(
        "convert",
        cfg.seed,
        json!({ "fold": fold, "encodings": cfg.model.encoding_config() }),
        inputs,
    );
    let records = build_prefixes(&log)?;
    let stats = match &plan {
        Some(p) => fit_stats(&materialize_fold(&records, p, cli.fold)?.train, &log)?,
        None => fit_stats(&records, &log)?,
    };
    let mut graphs = build_dataset(&records, &stats);
    ensure_encodings(&mut graphs, &cfg.model.encoding_config());
    write_dataset(&graphs, dir.join(DATASET_FILE))?;
    let mut sidecar = DatasetSidecar::new(stats);
    sidecar.manifest_hash = Some(m.manifest_hash.clone());
    write_sidecar(&sidecar, dir.join(STATS_FILE))?;
    m.record(dir, DATASET_FILE)?;
    m.record(dir, STATS_FILE)?;
    let m = m.finish(dir)?;
    Ok(summary(
        &m,
        dir,
        json!({ "graphs": graphs.len(), "edge_features": sidecar.layout.width, "fold": fold }),
    ))
}

fn require(dir: &Path, name: &str, producer: &str) -> Result<PathBuf, CliError> {
    let p = dir.join(name);
    if p.is_file() {
        Ok(p)
    } else {
        Err(CliError::Usage(format!("{} not found; run `remtime {producer}` first", p.display())))
    }
}

fn train(cli: &Cli) -> Result<Value, CliError> {
    let cfg = resolve(cli)?;
    let dir = out_dir(cli)?;
    let dataset_path = require(dir, DATASET_FILE, "convert")?;
    let stats_path = require(dir, STATS_FILE, "convert")?;
    let split_path = require(dir, SPLIT_FILE, "split")?;
    if let Some(conv) = previous(dir, "convert") {
        if conv.config.get("fold").and_then(Value::as_u64) != Some(cli.fold as u64) {
            return Err(CliError::Usage(format!(
                "dataset statistics were not fitted on fold {}; rerun convert with --fold {}",
                cli.fold, cli.fold
            )));
        }
    }
    let mut inputs = BTreeMap::new();
    for p in [&dataset_path, &stats_path, &split_path] {
        let name = p.file_name().expect("file name").to_string_lossy().to_string();
        inputs.insert(name, hash_file(p)?);
    }
    let mut m = RunManifest::begin("train", cfg.seed, config_json(&cfg, json!({ "fold": cli.fold })), inputs);
    let graphs = read_dataset(&dataset_path)?;
    let sidecar = read_sidecar(&stats_path)?;
    let plan = SplitPlan::load(&split_path)?;
    let cases = plan.fold_cases(cli.fold)?;
    let pick = |set: &BTreeSet<String>| -> Vec<PrefixGraph> {
        graphs.iter().filter(|g| set.contains(&g.case_id)).cloned().collect()
    };
    let (train_graphs, val_graphs) = (pick(&cases.train), pick(&cases.validation));
    let trained = train_model(&train_graphs, &val_graphs, &sidecar.stats, &cfg.model, &cfg.train)?;
    write_metrics_csv(&trained.curve, dir.join(METRICS_FILE))?;
    save_checkpoint(&trained, dir.join(CHECKPOINT_FILE))?;
    m.record(dir, METRICS_FILE)?;
    m.record(dir, CHECKPOINT_FILE)?;
    let m = m.finish(dir)?;
    trained.check_converged()?;
    Ok(summary(
        &m,
        dir,
        json!({
            "train_graphs": train_graphs.len(),
            "validation_graphs": val_graphs.len(),
            "epochs": trained.curve.len(),
            "best_epoch": trained.best_epoch,
            "best_val_loss": trained.best_val_loss(),
        }),
    ))
}

fn evaluate_cmd(cli: &Cli) -> Result<Value, CliError> {
    let cfg = resolve(cli)?;
    let (log, mut inputs) = load_log(cli)?;
    let dir = out_dir(cli)?;
    let plan = match existing_plan(dir, &mut inputs)? {
        Some(p) => p,
        None => plan_from_config(&log, &cfg)?,
    };
    let mut m = RunManifest::begin("evaluate", cfg.seed, config_json(&cfg, json!({})), inputs);
    let mut report = cross_validate(&log, &plan, &cfg.model, &cfg.train, &cfg.seeds)?;
    report.manifest_hash = Some(m.manifest_hash.clone());
    write_json(&dir.join(REPORT_FILE), &report)?;
    m.record(dir, REPORT_FILE)?;
    let m = m.finish(dir)?;
    Ok(summary(&m, dir, headline(&report)))
}

fn headline(r: &CrossValidationReport) -> Value {
    json!({
        "runs": r.runs.len(),
        "model_mae_days": { "mean": r.model_mae_days.mean, "std": r.model_mae_days.std },
        "baseline_mae_days": { "mean": r.baseline_mae_days.mean, "std": r.baseline_mae_days.std },
        "model_relative_mae": r.model_relative_mae.mean,
        "baseline_relative_mae": r.baseline_relative_mae.mean,
    })
}

fn baseline(cli: &Cli) -> Result<Value, CliError> {
    let cfg = resolve(cli)?;
    let (log, mut inputs) = load_log(cli)?;
    let dir = out_dir(cli)?;
    let plan = match existing_plan(dir, &mut inputs)? {
        Some(p) => p,
        None => plan_from_config(&log, &cfg)?,
    };
    let mut m = RunManifest::begin("baseline", cfg.seed, json!({ "fold": cli.fold, "split": cfg.split }), inputs);
    let records = build_prefixes(&log)?;
    let fold = materialize_fold(&records, &plan, cli.fold)?;
    let dummy = DummyModel::fit(&fold.train)?;
    let avg_days = log_statistics(&log).avg_case_duration_days;
    let report = evaluate(&dummy.predict_records(&fold.test), &fold.test, avg_days)?;
    let out = json!({
        "manifest_hash": m.manifest_hash,
        "fold": cli.fold,
        "means_by_prefix_length": dummy.means,
        "report": report,
    });
    write_json(&dir.join(BASELINE_FILE), &out)?;
    m.record(dir, BASELINE_FILE)?;
    let m = m.finish(dir)?;
    Ok(summary(&m, dir, json!({ "mae_days": report.mae_days, "relative_mae": report.relative_mae })))
}

fn report(cli: &Cli) -> Result<Value, CliError> {
    let dir = out_dir(cli)?;
    let path = require(dir, REPORT_FILE, "evaluate")?;
    let mut inputs = BTreeMap::new();
    inputs.insert(REPORT_FILE.to_string(), hash_file(&path)?);
    let text = std::fs::read_to_string(&path).map_err(remtime_core::Error::from)?;
    let r: CrossValidationReport = serde_json::from_str(&text).map_err(remtime_core::Error::from)?;
    let mut m = RunManifest::begin("report", 0, json!({}), inputs);
    write_earliness_csv(&r.model_pooled, dir.join(EARLINESS_FILE))?;
    m.record(dir, EARLINESS_FILE)?;
    let m = m.finish(dir)?;
    Ok(summary(&m, dir, headline(&r)))
}
