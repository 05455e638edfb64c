use std::fmt;
use std::fs;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{Map, Value};

/// Failure of one invocation, carrying its exit status.
#[derive(Debug)]
pub enum CliError {
    /// Flags that parse but do not make sense together.
    Usage(String),
    Core(halprobe::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_format() => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<halprobe::Error> for CliError {
    fn from(e: halprobe::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(halprobe::Error::Io(e))
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Serialize)]
pub struct Timing {
    pub started_unix_seconds: f64,
    pub elapsed_seconds: f64,
}

/// The JSON document every subcommand prints on success.
#[derive(Debug, Serialize)]
pub struct RunReport {
    pub subcommand: String,
    pub config: Value,
    pub timing: Option<Timing>,
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reports: Option<Value>,
    #[serde(skip_serializing_if = "Map::is_empty")]
    pub details: Map<String, Value>,
}

pub struct Clock {
    started: SystemTime,
    instant: Instant,
}

impl Clock {
    pub fn start() -> Self {
        Clock {
            started: SystemTime::now(),
            instant: Instant::now(),
        }
    }

    pub fn timing(&self) -> Timing {
        Timing {
            started_unix_seconds: self
                .started
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0),
            elapsed_seconds: self.instant.elapsed().as_secs_f64(),
        }
    }
}

const TIMING_KEYS: [&str; 1] = ["per_sample_inference_seconds"];

/// Nulls every measured duration nested in `v`.
pub fn strip_timings(v: &mut Value) {
    match v {
        Value::Object(map) => {
            for (k, child) in map.iter_mut() {
                if TIMING_KEYS.contains(&k.as_str()) {
                    *child = Value::Null;
                } else {
                    strip_timings(child);
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(strip_timings),
        _ => {}
    }
}

pub fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report types serialize to JSON")
}

pub fn render(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values render");
    s.push('\n');
    s
}

pub fn write_json(path: &Path, v: &Value) -> CliResult<()> {
    fs::write(path, render(v))?;
    Ok(())
}

pub fn path_string(p: &Path) -> String {
    p.display().to_string()
}
