//! Configuration resolution and experiment orchestration behind the
//! `fedtsp` binary.

use std::path::{Path, PathBuf};
use std::process::Command;

use serde::Serialize;
use serde_json::Value;

use fedtsp_core::error::ResultExt;
use fedtsp_core::metrics::{write_outputs, OutputPaths};
use fedtsp_core::protocol::{prepare_federation, run_experiment, ExperimentConfig, RunOptions, RunResult};
use fedtsp_core::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub fn exit_code(err: &Error) -> i32 {
    if err.is_config() {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

/// Sets `root[a][b]... = value` for a dotted `key`, creating objects on the way.
fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key {key:?}")));
    }
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            return Err(Error::Config(format!("override {key:?}: {part:?} is not an object")));
        }
        node = node
            .as_object_mut()
            .expect("checked above")
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    match node.as_object_mut() {
        Some(obj) => {
            obj.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(Error::Config(format!("override {key:?} targets a non-object"))),
    }
}

/// `KEY=VALUE`; the value is read as JSON when it parses, otherwise as a string.
pub fn parse_override(spec: &str) -> Result<(String, Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not of the form KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

/// Applies defaults, then the JSON document, then the overrides in order,
/// and validates the result.
pub fn resolve_config(document: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut value: Value = serde_json::from_str(document)
        .map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
    if !value.is_object() {
        return Err(Error::Config("config must be a JSON object".into()));
    }
    for spec in overrides {
        let (key, v) = parse_override(spec)?;
        set_path(&mut value, &key, v)?;
    }
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            Error::Config(inner.to_string())
        } else {
            Error::Config(format!("{path}: {inner}"))
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `path` (or starts from `{}`) and resolves it with `overrides`.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let document = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Context {
            context: "reading config".into(),
            source: Box::new(Error::Config(format!("{}: {e}", p.display()))),
        })?,
        None => "{}".to_string(),
    };
    resolve_config(&document, overrides)
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub config_path: Option<String>,
    pub config: ExperimentConfig,
    pub git_describe: String,
    pub start_timestamp: String,
    pub output_dir: String,
}

pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "untracked".to_string())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct PflReport<'a> {
    best_top1: &'a [Option<f64>],
    mean_best_top1: f64,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub result: RunResult,
    pub paths: OutputPaths,
    pub manifest_path: PathBuf,
}

/// Writes the manifest, runs the experiment and writes all outputs to `out_dir`.
pub fn run(
    config: &ExperimentConfig,
    config_path: Option<&Path>,
    out_dir: &Path,
    threads: usize,
) -> Result<RunOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest = RunManifest {
        config_path: config_path.map(|p| p.display().to_string()),
        config: config.clone(),
        git_describe: git_describe(),
        start_timestamp: chrono::Utc::now().to_rfc3339(),
        output_dir: out_dir.display().to_string(),
    };
    let manifest_path = out_dir.join("manifest.json");
    write_json(&manifest_path, &manifest)?;

    log::info!(
        "method {} mode {}: {} clients, {} rounds",
        config.method,
        config.mode,
        config.num_clients,
        config.rounds
    );
    let fed = prepare_federation(config).context(|| "setup")?;
    let result = run_experiment(config, &fed, RunOptions { threads }).context(|| config.method.to_string())?;
    let echo = serde_json::to_value(config).expect("config serializes");
    let paths = write_outputs(&result, &echo, fed.hierarchy.as_deref(), out_dir).context(|| "outputs")?;
    if let Some(bank) = &result.prompt_bank {
        let path = out_dir.join("prompts.json");
        std::fs::write(&path, bank.prefixes_to_json()).map_err(|e| Error::io(&path, e))?;
    }
    if let Some(pfl) = &result.pfl {
        write_json(
            &out_dir.join("pfl.json"),
            &PflReport {
                best_top1: &pfl.best_top1,
                mean_best_top1: pfl.mean_best_top1,
            },
        )?;
    }
    Ok(RunOutcome {
        result,
        paths,
        manifest_path,
    })
}
