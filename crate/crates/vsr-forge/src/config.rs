//! Run configuration files: a small JSON schema that names a task and an
//! algorithm, plus optional partial engine blocks layered over the profile
//! defaults. Dotted `--set` overrides edit the document before resolution,
//! so every knob is reachable from the command line.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::bench::{builtin_suite, builtin_suite_names, AlgebraicTask, BenchTask, TaskSource};
use crate::gp::{GpConfig, VsrGpConfig};
use crate::vsr::VsrConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Invalid(String),
    #[error("override '{key}': {msg}")]
    BadOverride { key: String, msg: String },
}

fn invalid(msg: impl fmt::Display) -> ConfigError {
    ConfigError::Invalid(msg.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    VsrDpg,
    VsrGp,
    Gp,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::VsrDpg => "vsr-dpg",
            Algorithm::VsrGp => "vsr-gp",
            Algorithm::Gp => "gp",
        }
    }
}

impl FromStr for Algorithm {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Algorithm, ConfigError> {
        match s {
            "vsr-dpg" => Ok(Algorithm::VsrDpg),
            "vsr-gp" => Ok(Algorithm::VsrGp),
            "gp" => Ok(Algorithm::Gp),
            other => Err(invalid(format!(
                "unknown algorithm '{other}' (expected vsr-dpg, vsr-gp or gp)"
            ))),
        }
    }
}

/// Scale preset for the engine defaults. `full` mirrors the reference
/// experiment settings; `desk` is sized for a laptop core. `paper` is an
/// accepted alias for `full`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Desk,
    Full,
}

impl FromStr for Profile {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Profile, ConfigError> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" | "paper" => Ok(Profile::Full),
            other => Err(invalid(format!(
                "unknown profile '{other}' (expected desk, full or paper)"
            ))),
        }
    }
}

/// Task selector: either a built-in suite (optionally one task inside it)
/// or a single task file on disk.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suite: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
}

impl TaskRef {
    /// Parses command-line shorthand: `suite`, `suite/task`, or a path to a
    /// task file (anything ending in `.json`).
    pub fn parse(s: &str) -> TaskRef {
        if s.ends_with(".json") {
            return TaskRef {
                file: Some(s.to_string()),
                ..TaskRef::default()
            };
        }
        match s.split_once('/') {
            Some((suite, task)) => TaskRef {
                suite: Some(suite.to_string()),
                task: Some(task.to_string()),
                ..TaskRef::default()
            },
            None => TaskRef {
                suite: Some(s.to_string()),
                ..TaskRef::default()
            },
        }
    }

    /// Materializes the referenced task.
    pub fn resolve(&self) -> Result<BenchTask, ConfigError> {
        match (&self.suite, &self.file) {
            (Some(_), Some(_)) => Err(invalid("task: give either suite or file, not both")),
            (None, None) => Err(invalid("task: one of suite or file is required")),
            (None, Some(file)) => {
                let text = std::fs::read_to_string(file).map_err(|source| ConfigError::Io {
                    path: file.clone(),
                    source,
                })?;
                let task: AlgebraicTask =
                    serde_json::from_str(&text).map_err(|e| invalid(format!("{file}: {e}")))?;
                task.ground_truth().map_err(invalid)?;
                Ok(BenchTask {
                    id: task.id.clone(),
                    operators: task.operators.clone(),
                    source: TaskSource::Algebraic(task),
                })
            }
            (Some(suite), None) => {
                let s = builtin_suite(suite).map_err(|_| {
                    invalid(format!(
                        "unknown suite '{suite}' (built-ins: {})",
                        builtin_suite_names().join(", ")
                    ))
                })?;
                let mut tasks = s.tasks;
                match &self.task {
                    None if tasks.len() == 1 => Ok(tasks.remove(0)),
                    None => Err(invalid(format!(
                        "suite '{suite}' has {} tasks; pick one with suite/task",
                        tasks.len()
                    ))),
                    Some(id) => tasks
                        .into_iter()
                        .find(|t| &t.id == id)
                        .ok_or_else(|| invalid(format!("no task '{id}' in suite '{suite}'"))),
                }
            }
        }
    }
}

/// The on-disk run file. Engine blocks are partial: whatever they set is
/// layered over the profile defaults for the chosen task, and unknown keys
/// are still rejected when the merged block is decoded.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    pub algorithm: Algorithm,
    pub task: TaskRef,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub profile: Profile,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    #[serde(default)]
    pub vsr: Option<Value>,
    #[serde(default)]
    pub vsr_gp: Option<Value>,
    #[serde(default)]
    pub gp: Option<Value>,
}

fn default_test_size() -> usize {
    256
}

/// Engine configuration after profile defaults and file overrides merge.
#[derive(Debug, Clone)]
pub enum EngineConfig {
    VsrDpg(VsrConfig),
    VsrGp(VsrGpConfig),
    Gp(GpConfig),
}

/// A fully resolved run: the task, the algorithm, and a complete validated
/// engine configuration.
#[derive(Debug)]
pub struct ResolvedRun {
    pub algorithm: Algorithm,
    pub task: BenchTask,
    pub seed: u64,
    pub test_size: usize,
    pub engine: EngineConfig,
}

/// Splits `key=value`; the value parses as JSON when possible and falls
/// back to a plain string, so `--set vsr.k_trials=12` is a number and
/// `--set task.suite=xprod` is a string.
pub fn parse_set(arg: &str) -> Result<(Vec<String>, Value), ConfigError> {
    let (key, raw) = arg.split_once('=').ok_or_else(|| ConfigError::BadOverride {
        key: arg.to_string(),
        msg: "expected key=value".to_string(),
    })?;
    if key.is_empty() {
        return Err(ConfigError::BadOverride {
            key: arg.to_string(),
            msg: "empty key".to_string(),
        });
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.split('.').map(str::to_string).collect(), value))
}

/// Sets a dotted path inside a JSON document, creating objects on the way.
pub fn apply_override(doc: &mut Value, path: &[String], value: Value) -> Result<(), ConfigError> {
    let mut slot = doc;
    for (i, seg) in path.iter().enumerate() {
        let map = slot.as_object_mut().ok_or_else(|| ConfigError::BadOverride {
            key: path.join("."),
            msg: format!("'{}' is not an object", path[..i].join(".")),
        })?;
        if i + 1 == path.len() {
            map.insert(seg.clone(), value);
            return Ok(());
        }
        slot = map
            .entry(seg.clone())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("path is non-empty")
}

/// Recursive object merge; non-objects replace.
pub fn deep_merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

fn merged_block<T: Serialize + serde::de::DeserializeOwned>(
    defaults: &T,
    over: Option<&Value>,
    what: &str,
) -> Result<T, ConfigError> {
    let mut doc = serde_json::to_value(defaults).expect("config serializes");
    if let Some(over) = over {
        deep_merge(&mut doc, over);
    }
    serde_json::from_value(doc).map_err(|e| invalid(format!("{what}: {e}")))
}

/// Profile defaults for an engine over the given operator menu.
pub fn engine_defaults(
    algorithm: Algorithm,
    profile: Profile,
    operators: Vec<crate::grammar::Operator>,
) -> EngineConfig {
    match (algorithm, profile) {
        (Algorithm::VsrDpg, Profile::Desk) => EngineConfig::VsrDpg(VsrConfig::desk(operators)),
        (Algorithm::VsrDpg, Profile::Full) => EngineConfig::VsrDpg(VsrConfig::full(operators)),
        (Algorithm::VsrGp, Profile::Desk) => EngineConfig::VsrGp(VsrGpConfig::desk(operators)),
        (Algorithm::VsrGp, Profile::Full) => EngineConfig::VsrGp(VsrGpConfig::full(operators)),
        (Algorithm::Gp, Profile::Desk) => EngineConfig::Gp(GpConfig::desk()),
        (Algorithm::Gp, Profile::Full) => EngineConfig::Gp(GpConfig::full()),
    }
}

impl RunFile {
    pub fn parse(doc: &Value) -> Result<RunFile, ConfigError> {
        serde_json::from_value(doc.clone()).map_err(invalid)
    }

    /// Resolves the task and builds the engine config: profile defaults for
    /// the task's operator menu, then the file's partial block on top.
    pub fn resolve(&self) -> Result<ResolvedRun, ConfigError> {
        let task = self.task.resolve()?;
        let ops = task.operators.clone();
        let engine = match engine_defaults(self.algorithm, self.profile, ops) {
            EngineConfig::VsrDpg(defaults) => {
                let cfg: VsrConfig = merged_block(&defaults, self.vsr.as_ref(), "vsr")?;
                cfg.validate().map_err(invalid)?;
                EngineConfig::VsrDpg(cfg)
            }
            EngineConfig::VsrGp(defaults) => {
                let cfg: VsrGpConfig = merged_block(&defaults, self.vsr_gp.as_ref(), "vsr_gp")?;
                cfg.validate().map_err(invalid)?;
                EngineConfig::VsrGp(cfg)
            }
            EngineConfig::Gp(defaults) => {
                let cfg: GpConfig = merged_block(&defaults, self.gp.as_ref(), "gp")?;
                cfg.validate().map_err(invalid)?;
                EngineConfig::Gp(cfg)
            }
        };
        if self.test_size == 0 {
            return Err(invalid("test_size must be positive"));
        }
        Ok(ResolvedRun {
            algorithm: self.algorithm,
            task,
            seed: self.seed,
            test_size: self.test_size,
            engine,
        })
    }
}

/// Loads a run file and applies command-line overrides: dotted `--set`
/// pairs first, then the dedicated flags, which win.
pub fn load_run_file(
    path: &Path,
    sets: &[String],
    seed: Option<u64>,
    profile: Option<Profile>,
) -> Result<RunFile, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut doc: Value =
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    for s in sets {
        let (path, value) = parse_set(s)?;
        apply_override(&mut doc, &path, value)?;
    }
    if let Some(seed) = seed {
        apply_override(&mut doc, &["seed".to_string()], Value::from(seed))?;
    }
    if let Some(profile) = profile {
        let v = serde_json::to_value(profile).expect("profile serializes");
        apply_override(&mut doc, &["profile".to_string()], v)?;
    }
    RunFile::parse(&doc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn task_refs_parse_and_resolve() {
        let r = TaskRef::parse("xprod");
        assert_eq!(r.suite.as_deref(), Some("xprod"));
        let task = r.resolve().unwrap();
        assert_eq!(task.id, "xprod");

        let r = TaskRef::parse("sincos-2-1-1/prog-3");
        assert_eq!(r.task.as_deref(), Some("prog-3"));
        assert_eq!(r.resolve().unwrap().id, "prog-3");

        assert!(TaskRef::parse("sincos-2-1-1").resolve().is_err());
        assert!(TaskRef::parse("nope").resolve().is_err());
        assert!(TaskRef::parse("sincos-2-1-1/prog-99").resolve().is_err());

        let r = TaskRef::parse("tasks/custom.json");
        assert_eq!(r.file.as_deref(), Some("tasks/custom.json"));
    }

    #[test]
    fn run_file_layers_partial_engine_blocks_over_profile() {
        let doc = json!({
            "algorithm": "vsr-dpg",
            "task": {"suite": "xprod"},
            "seed": 7,
            "vsr": {"k_trials": 4, "policy": {"epochs_per_round": 2}}
        });
        let rf = RunFile::parse(&doc).unwrap();
        let run = rf.resolve().unwrap();
        match run.engine {
            EngineConfig::VsrDpg(cfg) => {
                assert_eq!(cfg.k_trials, 4);
                assert_eq!(cfg.policy.epochs_per_round, 2);
                // Untouched fields keep the desk defaults.
                assert_eq!(cfg.data_batch_size, 256);
            }
            _ => panic!("wrong engine"),
        }
        assert_eq!(run.seed, 7);
        assert_eq!(run.test_size, 256);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_name() {
        let doc = json!({
            "algorithm": "vsr-dpg",
            "task": {"suite": "xprod"},
            "vsr": {"k_trails": 4}
        });
        let err = RunFile::parse(&doc).unwrap().resolve().unwrap_err();
        assert!(err.to_string().contains("k_trails"), "{err}");

        let doc = json!({"algorithm": "gp", "task": {"suite": "xprod"}, "extra": 1});
        assert!(RunFile::parse(&doc).is_err());
    }

    #[test]
    fn set_overrides_edit_documents_in_place() {
        let mut doc = json!({"algorithm": "gp", "task": {"suite": "xprod"}});
        let (path, value) = parse_set("gp.pop_size=64").unwrap();
        apply_override(&mut doc, &path, value).unwrap();
        let (path, value) = parse_set("task.suite=sincos-2-1-1").unwrap();
        apply_override(&mut doc, &path, value).unwrap();
        let (path, value) = parse_set("task.task=prog-0").unwrap();
        apply_override(&mut doc, &path, value).unwrap();
        assert_eq!(doc["gp"]["pop_size"], json!(64));
        assert_eq!(doc["task"]["suite"], json!("sincos-2-1-1"));
        let run = RunFile::parse(&doc).unwrap().resolve().unwrap();
        assert_eq!(run.task.id, "prog-0");
        match run.engine {
            EngineConfig::Gp(cfg) => assert_eq!(cfg.pop_size, 64),
            _ => panic!("wrong engine"),
        }

        assert!(parse_set("no-equals").is_err());
        let err = apply_override(
            &mut doc,
            &["algorithm".to_string(), "x".to_string()],
            json!(1),
        )
        .unwrap_err();
        assert!(err.to_string().contains("not an object"));
    }

    #[test]
    fn profiles_and_algorithms_parse_from_strings() {
        assert_eq!("desk".parse::<Profile>().unwrap(), Profile::Desk);
        assert_eq!("paper".parse::<Profile>().unwrap(), Profile::Full);
        assert_eq!("full".parse::<Profile>().unwrap(), Profile::Full);
        assert!("tiny".parse::<Profile>().is_err());
        assert_eq!("vsr-gp".parse::<Algorithm>().unwrap(), Algorithm::VsrGp);
        assert_eq!(Algorithm::Gp.as_str(), "gp");
        assert!("spl".parse::<Algorithm>().is_err());
    }
}
