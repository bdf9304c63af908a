//! Command implementations behind the `rumorgraph` binary.
//!
//! Every command writes into an output directory and finishes with a
//! `manifest.json` listing the produced files with their SHA-256 digests.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, RunMode, SCHEMA_VERSION};
use crate::dataio::{parse_events, CheckpointMode, CheckpointSpec, Dataset, DatasetStats};
use crate::embed::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::evalkit::{early_detection, evaluate, pca_csv, pca_project, representations};
use crate::model::{read_snapshot, write_snapshot, ModelParams};
use crate::numcore::Precision;
use crate::synth::{generate, SynthSpec};
use crate::trainer::{cross_validate, fit, prepare_all, LogRecord, TrainConfig};

/// Process exit code for an error.
///
/// 1: invalid input data or missing files; 2: configuration or spec
/// errors; 3: training aborted; 4: degenerate data.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Stratification(_) => 2,
        Error::Training(_) => 3,
        Error::Degenerate(_) => 4,
        _ => 1,
    }
}

fn write_file(dir: &Path, name: &str, bytes: &[u8], produced: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    produced.push(PathBuf::from(name));
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T, produced: &mut Vec<PathBuf>) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    write_file(dir, name, &text, produced)
}

fn write_manifest(dir: &Path, command: &str, config_hash: &str, produced: &[PathBuf]) -> Result<()> {
    let files = produced
        .iter()
        .map(|name| {
            let path = dir.join(name);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            Ok(json!({
                "path": name.to_string_lossy(),
                "sha256": hex::encode(Sha256::digest(&bytes)),
            }))
        })
        .collect::<Result<Vec<Value>>>()?;
    let manifest = json!({
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config_hash": config_hash,
        "files": files,
    });
    write_json(dir, "manifest.json", &manifest, &mut Vec::new())
}

fn hash_value<T: Serialize>(v: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(v)?)))
}

/// Parses and validates an event file and returns its statistics.
pub fn cmd_validate(events: &Path) -> Result<DatasetStats> {
    Ok(parse_events(events)?.stats())
}

pub fn format_stats(name: &str, s: &DatasetStats) -> String {
    format!(
        "{name}\n  # events        {}\n  # tree nodes    {}\n  # rumors        {}\n  # non-rumors    {}\n  avg. depth      {:.2}\n  avg. time (h)   {:.2}\n",
        s.events, s.tree_nodes, s.rumors, s.non_rumors, s.avg_depth, s.avg_duration_hours
    )
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
}

impl Overrides {
    fn apply(&self, train: &mut TrainConfig) {
        if let Some(s) = self.seed {
            train.seed = s;
        }
        if let Some(p) = self.precision {
            train.precision = p;
        }
    }
}

fn load_pair(cfg: &RunConfig) -> Result<(Dataset, Dataset, EmbeddingProvider)> {
    let provider = EmbeddingProvider::from_spec(&cfg.embeddings)?;
    if provider.dim() != cfg.train.model.d_in {
        return Err(Error::Config(format!(
            "embedding width {} differs from model d_in {}",
            provider.dim(),
            cfg.train.model.d_in
        )));
    }
    Ok((parse_events(&cfg.source)?, parse_events(&cfg.target)?, provider))
}

fn log_line(fold: Option<usize>, record: &LogRecord) -> Result<String> {
    let mut v = serde_json::to_value(record)?;
    if let (Some(f), Value::Object(map)) = (fold, &mut v) {
        map.insert("fold".into(), json!(f));
    }
    let mut line = serde_json::to_string(&v)?;
    line.push('\n');
    Ok(line)
}

#[allow(clippy::too_many_arguments)]
fn train_once(
    cfg: &RunConfig,
    train: &TrainConfig,
    source: &Dataset,
    target: &Dataset,
    provider: &EmbeddingProvider,
    dir: &Path,
    produced: &mut Vec<PathBuf>,
    prefix: &str,
) -> Result<Value> {
    let mut log = String::new();
    let mut log_err = None;
    let report = match cfg.mode {
        RunMode::CrossValidate => {
            let mut snapshots: Vec<ModelParams> = Vec::new();
            let report = cross_validate(
                source,
                target,
                provider,
                cfg.folds,
                train,
                &mut |f, r| match log_line(Some(f), &r) {
                    Ok(l) => log.push_str(&l),
                    Err(e) => log_err = Some(e),
                },
                &mut |_, p| snapshots.push(p.clone()),
            )?;
            for (f, p) in snapshots.iter().enumerate() {
                let name = format!("{prefix}model_fold{f}.bin");
                write_snapshot(&dir.join(&name), &train.model, train.seed, p)?;
                produced.push(PathBuf::from(name));
            }
            serde_json::to_value(&report)?
        }
        RunMode::Fit => {
            let src = prepare_all(&source.events, provider)?;
            let tgt = prepare_all(&target.events, provider)?;
            let result = fit(&src, &tgt, train, &mut |r| match log_line(None, &r) {
                Ok(l) => log.push_str(&l),
                Err(e) => log_err = Some(e),
            })?;
            let name = format!("{prefix}model.bin");
            write_snapshot(&dir.join(&name), &train.model, train.seed, &result.params)?;
            produced.push(PathBuf::from(name));
            let test = match &cfg.test {
                Some(path) => {
                    let test = prepare_all(&parse_events(path)?.events, provider)?;
                    Some(evaluate(&result.params, &train.model, &test)?)
                }
                None => None,
            };
            if let (Some(cp), Some(path)) = (&cfg.checkpoints, &cfg.test) {
                let curve = early_detection(&result.params, &train.model, &parse_events(path)?.events, cp, provider)?;
                write_file(
                    dir,
                    &format!("{prefix}early_detection.csv"),
                    curve.to_csv().as_bytes(),
                    produced,
                )?;
            }
            json!({ "epochs": result.epochs, "history": result.history, "test": test })
        }
    };
    if let Some(e) = log_err {
        return Err(e);
    }
    write_file(dir, &format!("{prefix}train_log.jsonl"), log.as_bytes(), produced)?;
    Ok(report)
}

/// Trains per the config and writes snapshots, logs and `metrics.json`.
pub fn cmd_train(config: &Path, overrides: Overrides) -> Result<PathBuf> {
    let mut cfg = RunConfig::load(config)?;
    overrides.apply(&mut cfg.train);
    cfg.validate()?;
    let (source, target, provider) = load_pair(&cfg)?;
    let dir = cfg.out.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut produced = Vec::new();

    let report = train_once(&cfg, &cfg.train, &source, &target, &provider, &dir, &mut produced, "")?;
    let mut sweep = Vec::new();
    for &alpha in &cfg.alpha_sweep {
        info!("alpha sweep: {alpha}");
        let train = TrainConfig {
            alpha,
            ..cfg.train.clone()
        };
        let prefix = format!("alpha_{alpha}/");
        let r = train_once(&cfg, &train, &source, &target, &provider, &dir, &mut produced, &prefix)?;
        sweep.push(json!({ "alpha": alpha, "report": r }));
    }
    let metrics = json!({
        "schema_version": SCHEMA_VERSION,
        "mode": cfg.mode,
        "seed": cfg.train.seed,
        "report": report,
        "alpha_sweep": sweep,
    });
    write_json(&dir, "metrics.json", &metrics, &mut produced)?;
    write_json(&dir, "config.json", &cfg, &mut produced)?;
    write_manifest(&dir, "train", &cfg.hash()?, &produced)?;
    Ok(dir)
}

fn default_provider(embeddings: Option<&str>, d_in: usize) -> Result<EmbeddingProvider> {
    match embeddings {
        Some(spec) => EmbeddingProvider::from_spec(spec),
        None => Ok(EmbeddingProvider::hashed(d_in, 0)),
    }
}

/// Writes `early_detection.csv` for a snapshot over an event file.
pub fn cmd_earlydetect(
    snapshot: &Path,
    events: &Path,
    checkpoints: &str,
    mode: CheckpointMode,
    embeddings: Option<&str>,
    out: &Path,
) -> Result<PathBuf> {
    let spec = CheckpointSpec::parse(mode, checkpoints)?;
    let (header, params) = read_snapshot(snapshot)?;
    let provider = default_provider(embeddings, header.config.d_in)?;
    let ds = parse_events(events)?;
    let curve = early_detection(&params, &header.config, &ds.events, &spec, &provider)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut produced = Vec::new();
    write_file(out, "early_detection.csv", curve.to_csv().as_bytes(), &mut produced)?;
    let hash = hash_value(&json!({
        "snapshot": snapshot, "events": events, "checkpoints": spec, "embeddings": embeddings,
    }))?;
    write_manifest(out, "earlydetect", &hash, &produced)?;
    Ok(out.join("early_detection.csv"))
}

/// Writes `pca.csv` and the `pca.json` sidecar for a snapshot over an
/// event file.
pub fn cmd_export_features(snapshot: &Path, events: &Path, embeddings: Option<&str>, out: &Path) -> Result<PathBuf> {
    let (header, params) = read_snapshot(snapshot)?;
    let provider = default_provider(embeddings, header.config.d_in)?;
    let ds = parse_events(events)?;
    let prepared = prepare_all(&ds.events, &provider)?;
    let reprs = representations(&params, &header.config, &prepared)?;
    let projected = pca_project(&reprs, 2)?;
    let ids: Vec<String> = prepared.iter().map(|e| e.event_id.clone()).collect();
    let labels: Vec<_> = prepared.iter().map(|e| e.label).collect();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut produced = Vec::new();
    write_file(
        out,
        "pca.csv",
        pca_csv(&ids, &labels, &projected).as_bytes(),
        &mut produced,
    )?;
    let sidecar = json!({
        "schema_version": SCHEMA_VERSION,
        "explained_variance": projected.explained_variance,
        "components": projected.components,
    });
    write_json(out, "pca.json", &sidecar, &mut produced)?;
    let hash = hash_value(&json!({ "snapshot": snapshot, "events": events, "embeddings": embeddings }))?;
    write_manifest(out, "export-features", &hash, &produced)?;
    Ok(out.join("pca.csv"))
}

/// Generates `source.jsonl` and `target.jsonl`.
pub fn cmd_synth(spec: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<PathBuf> {
    let mut spec: SynthSpec = match spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let (source, target) = generate(&spec)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut produced = Vec::new();
    write_file(out, "source.jsonl", source.to_jsonl()?.as_bytes(), &mut produced)?;
    write_file(out, "target.jsonl", target.to_jsonl()?.as_bytes(), &mut produced)?;
    write_json(out, "synth_spec.json", &spec, &mut produced)?;
    write_manifest(out, "synth", &hash_value(&spec)?, &produced)?;
    Ok(out.to_path_buf())
}
