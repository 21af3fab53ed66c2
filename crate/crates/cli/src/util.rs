use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gskit::scene::write_atomic;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

pub const MANIFEST: &str = "run_manifest.json";

#[derive(Debug)]
pub enum CliError {
    /// Bad flag or configuration value; exit code 1.
    Validation(String),
    /// Failure while running; exit code 2.
    Runtime(String),
}

impl CliError {
    pub fn flag(flag: &str, reason: impl fmt::Display) -> Self {
        CliError::Validation(format!("invalid value for {flag}: {reason}"))
    }

    /// Configuration errors from the library name a field; report it as the
    /// matching flag.
    pub fn config(e: gskit::Error) -> Self {
        match e {
            gskit::Error::InvalidArgument { arg, reason } => Self::flag(&format!("--{}", arg.replace('_', "-")), reason),
            other => CliError::Validation(other.to_string()),
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<gskit::Error> for CliError {
    fn from(e: gskit::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Recursively overlay `patch` onto `base`; objects merge key by key, any
/// other value replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(Value::Null), v);
            }
        }
        (a, b) => *a = b,
    }
}

pub fn read_config_file(path: Option<&Path>) -> Result<Option<Value>, CliError> {
    let Some(path) = path else { return Ok(None) };
    let text = fs::read_to_string(path).map_err(|e| CliError::flag("--config", format!("{}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| CliError::flag("--config", format!("{}: {e}", path.display())))?;
    if !v.is_object() {
        return Err(CliError::flag("--config", format!("{}: expected a JSON object", path.display())));
    }
    Ok(Some(v))
}

/// `base` with the config file's values laid over it.
pub fn layered<C: Serialize + DeserializeOwned>(base: C, file: Option<&Value>) -> Result<C, CliError> {
    let Some(file) = file else { return Ok(base) };
    let mut v = serde_json::to_value(&base).expect("config serializes");
    merge(&mut v, file.clone());
    serde_json::from_value(v).map_err(|e| CliError::flag("--config", e))
}

pub fn to_json<S: Serialize>(v: &S) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(v).expect("report serializes");
    bytes.push(b'\n');
    bytes
}

pub fn write_json<S: Serialize>(path: &Path, v: &S) -> Result<(), CliError> {
    Ok(write_atomic(path, &to_json(v))?)
}

pub fn write_jsonl<S: Serialize>(path: &Path, rows: &[S]) -> Result<(), CliError> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("row serializes");
        out.push(b'\n');
    }
    Ok(write_atomic(path, &out)?)
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

pub fn path_string(p: &Path) -> String {
    p.display().to_string()
}

#[derive(Serialize)]
pub struct RunManifest {
    pub subcommand: &'static str,
    pub tool_version: &'static str,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    pub config: Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub wall_time_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<Value>,
}

pub struct Run {
    subcommand: &'static str,
    argv: Vec<String>,
    start: Instant,
}

impl Run {
    pub fn start(subcommand: &'static str, argv: &[String]) -> Self {
        Self { subcommand, argv: argv.to_vec(), start: Instant::now() }
    }

    /// Write the run manifest into `dir`.
    pub fn finish<C: Serialize>(
        self,
        dir: &Path,
        seed: Option<u64>,
        config: &C,
        inputs: &[&Path],
        outputs: &[PathBuf],
        timing: Option<Value>,
    ) -> Result<(), CliError> {
        let m = RunManifest {
            subcommand: self.subcommand,
            tool_version: env!("CARGO_PKG_VERSION"),
            argv: self.argv,
            seed,
            config: serde_json::to_value(config).expect("config serializes"),
            inputs: inputs.iter().map(|p| path_string(p)).collect(),
            outputs: outputs.iter().map(|p| path_string(p)).collect(),
            wall_time_seconds: self.start.elapsed().as_secs_f64(),
            timing,
        };
        write_json(&dir.join(MANIFEST), &m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn merge_overlays_nested_objects() {
        let mut a = json!({"train": {"lr": 0.02, "epochs": 30}, "model": {"radius": null}});
        merge(&mut a, json!({"train": {"lr": 0.1}, "model": {"radius": 6.0}}));
        assert_eq!(a, json!({"train": {"lr": 0.1, "epochs": 30}, "model": {"radius": 6.0}}));
    }

    #[test]
    fn library_field_errors_name_flags() {
        let e = CliError::config(gskit::Error::InvalidArgument { arg: "batch_size", reason: "must be positive".into() });
        assert_eq!(e.code(), 1);
        assert!(e.to_string().contains("--batch-size"));
    }
}
