//! Runs programs in a child process with a wall-clock limit.
//!
//! Each run gets a fresh temporary working directory holding only the program
//! source. The child leads its own process group so a timeout (or a program
//! that leaves background children behind) is cleaned up with one `killpg`.
//!
//! Wire protocol: stdin carries `{"inputs": {name: value|null, ...}}`, and a
//! successful program prints exactly one `{"outputs": {name: value, ...}}`
//! object and exits 0.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::os::unix::process::CommandExt;
use std::path::PathBuf;
use std::process::{Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};
use thiserror::Error;

use crate::program::{KnowledgeIntensiveProgram, ProgramMetadata, SemanticType};

#[derive(Debug, Error)]
pub enum ExecutorError {
    #[error("interpreter command {0:?} has no {{source_path}} placeholder")]
    InvalidTemplate(String),
    #[error("cannot prepare sandbox directory: {0}")]
    Sandbox(#[source] std::io::Error),
    #[error("cannot spawn {command:?}: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecutionLimits {
    #[serde(with = "secs")]
    pub wall_timeout: Duration,
    pub max_output_bytes: usize,
    /// Whitespace-separated argv; `{source_path}` is replaced by the program
    /// file name inside the sandbox directory.
    pub interpreter_command: String,
    pub source_file_name: String,
}

impl Default for ExecutionLimits {
    fn default() -> Self {
        ExecutionLimits {
            wall_timeout: Duration::from_secs(5),
            max_output_bytes: 64 * 1024,
            interpreter_command: "python3 -I {source_path}".into(),
            source_file_name: "program.py".into(),
        }
    }
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        if !(v.is_finite() && v > 0.0) {
            return Err(serde::de::Error::custom("timeout must be positive"));
        }
        Ok(Duration::from_secs_f64(v))
    }
}

/// Input values keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VariableBindings(pub BTreeMap<String, Value>);

impl VariableBindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.0.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Value) {
        self.0.insert(name.into(), value);
    }

    /// Keeps the entries of `raw` that name a declared input and coerce to its
    /// type. Returns the bindings and the names that were dropped.
    pub fn coerce(raw: &Map<String, Value>, metadata: &ProgramMetadata) -> (Self, Vec<String>) {
        let mut out = VariableBindings::new();
        let mut dropped = Vec::new();
        for (name, value) in raw {
            let coerced = metadata
                .input(name)
                .and_then(|spec| coerce_value(value, spec.semantic_type));
            match coerced {
                Some(v) => out.insert(name.clone(), v),
                None => dropped.push(name.clone()),
            }
        }
        (out, dropped)
    }

    /// The stdin payload: every declared input, with `null` for absent ones.
    pub fn wire_payload(&self, metadata: &ProgramMetadata) -> Value {
        let mut inputs = Map::new();
        for spec in &metadata.inputs {
            inputs.insert(
                spec.name.clone(),
                self.0.get(&spec.name).cloned().unwrap_or(Value::Null),
            );
        }
        serde_json::json!({ "inputs": inputs })
    }
}

fn number_from_text(text: &str) -> Option<Number> {
    let cleaned: String = text.trim().chars().filter(|c| *c != ',' && *c != '_').collect();
    if let Ok(i) = cleaned.parse::<i64>() {
        return Some(i.into());
    }
    cleaned
        .parse::<f64>()
        .ok()
        .filter(|f| f.is_finite())
        .and_then(Number::from_f64)
}

fn normalize_number(n: &Number) -> Option<Number> {
    if n.is_i64() || n.is_u64() {
        return Some(n.clone());
    }
    let f = n.as_f64()?;
    if f.fract() == 0.0 && f.abs() < 9.0e15 {
        Some((f as i64).into())
    } else {
        Number::from_f64(f)
    }
}

fn coerce_value(value: &Value, ty: SemanticType) -> Option<Value> {
    match (ty, value) {
        (_, Value::Null) => Some(Value::Null),
        (SemanticType::Integer, Value::Number(n)) => {
            let n = normalize_number(n)?;
            (n.is_i64() || n.is_u64()).then_some(Value::Number(n))
        }
        (SemanticType::Integer, Value::String(s)) => {
            let n = number_from_text(s)?;
            coerce_value(&Value::Number(n), ty)
        }
        (SemanticType::Decimal, Value::Number(n)) => normalize_number(n).map(Value::Number),
        (SemanticType::Decimal, Value::String(s)) => number_from_text(s)
            .and_then(|n| normalize_number(&n))
            .map(Value::Number),
        (SemanticType::Boolean, Value::Bool(b)) => Some(Value::Bool(*b)),
        (SemanticType::Boolean, Value::String(s)) => match s.trim().to_lowercase().as_str() {
            "true" | "yes" => Some(Value::Bool(true)),
            "false" | "no" => Some(Value::Bool(false)),
            _ => None,
        },
        (SemanticType::String, Value::String(s)) => Some(Value::String(s.clone())),
        (SemanticType::String, Value::Number(n)) => Some(Value::String(n.to_string())),
        (SemanticType::String, Value::Bool(b)) => Some(Value::String(b.to_string())),
        (SemanticType::DecimalList, Value::Array(items)) => items
            .iter()
            .map(|v| coerce_value(v, SemanticType::Decimal).filter(|v| !v.is_null()))
            .collect::<Option<Vec<_>>>()
            .map(Value::Array),
        _ => None,
    }
}

/// Output values keyed by declared output name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OutcomeMap(pub BTreeMap<String, Value>);

impl OutcomeMap {
    pub fn get(&self, name: &str) -> Option<&Value> {
        self.0.get(name)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionStatus {
    Success,
    RuntimeError,
    Timeout,
    ProtocolError,
}

impl fmt::Display for ExecutionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExecutionStatus::Success => "success",
            ExecutionStatus::RuntimeError => "runtime_error",
            ExecutionStatus::Timeout => "timeout",
            ExecutionStatus::ProtocolError => "protocol_error",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub status: ExecutionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<OutcomeMap>,
    pub detail: String,
    /// Kept out of serialized artifacts so they stay reproducible.
    #[serde(skip)]
    pub wall_time: Duration,
}

/// Equality ignores `wall_time`.
impl PartialEq for ExecutionResult {
    fn eq(&self, other: &Self) -> bool {
        self.status == other.status && self.outcome == other.outcome && self.detail == other.detail
    }
}

impl ExecutionResult {
    pub fn is_success(&self) -> bool {
        self.status == ExecutionStatus::Success
    }

    fn failure(status: ExecutionStatus, detail: String, wall_time: Duration) -> Self {
        ExecutionResult {
            status,
            outcome: None,
            detail,
            wall_time,
        }
    }
}

struct Captured {
    bytes: Vec<u8>,
    overflowed: bool,
}

fn spawn_reader<R: Read + Send + 'static>(mut r: R, cap: usize) -> thread::JoinHandle<Captured> {
    thread::spawn(move || {
        let mut bytes = Vec::new();
        let mut overflowed = false;
        let mut buf = [0u8; 8192];
        loop {
            match r.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = cap.saturating_sub(bytes.len());
                    if n > room {
                        overflowed = true;
                    }
                    bytes.extend_from_slice(&buf[..n.min(room)]);
                }
            }
        }
        Captured { bytes, overflowed }
    })
}

fn kill_group(pgid: u32) {
    // ESRCH just means the group is already gone.
    unsafe {
        libc::killpg(pgid as libc::pid_t, libc::SIGKILL);
    }
}

fn build_command(limits: &ExecutionLimits) -> Result<Vec<String>, ExecutorError> {
    let argv: Vec<String> = limits
        .interpreter_command
        .split_whitespace()
        .map(|t| t.replace("{source_path}", &limits.source_file_name))
        .collect();
    if argv.is_empty() || !limits.interpreter_command.contains("{source_path}") {
        return Err(ExecutorError::InvalidTemplate(
            limits.interpreter_command.clone(),
        ));
    }
    Ok(argv)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireOutput {
    outputs: Map<String, Value>,
}

fn describe_exit(status: ExitStatus) -> String {
    use std::os::unix::process::ExitStatusExt;
    match (status.code(), status.signal()) {
        (Some(c), _) => format!("exit status {c}"),
        (None, Some(s)) => format!("terminated by signal {s}"),
        _ => "abnormal exit".into(),
    }
}

/// Runs `program` on `bindings`. Program faults come back as a classified
/// [`ExecutionResult`]; only failure to set up or spawn the child is an `Err`.
pub fn execute(
    program: &KnowledgeIntensiveProgram,
    bindings: &VariableBindings,
    limits: &ExecutionLimits,
) -> Result<ExecutionResult, ExecutorError> {
    let argv = build_command(limits)?;
    let dir = tempfile::Builder::new()
        .prefix("kipg-exec-")
        .tempdir()
        .map_err(ExecutorError::Sandbox)?;
    let source_path: PathBuf = dir.path().join(&limits.source_file_name);
    std::fs::write(&source_path, &program.source_text).map_err(ExecutorError::Sandbox)?;

    let payload = bindings.wire_payload(&program.metadata).to_string();

    let mut cmd = Command::new(&argv[0]);
    cmd.args(&argv[1..])
        .current_dir(dir.path())
        .env_clear()
        .env("PATH", std::env::var_os("PATH").unwrap_or_default())
        .env("PYTHONHASHSEED", "0")
        .env("PYTHONDONTWRITEBYTECODE", "1")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);

    let start = Instant::now();
    let mut child = cmd.spawn().map_err(|source| ExecutorError::Spawn {
        command: limits.interpreter_command.clone(),
        source,
    })?;
    let pgid = child.id();

    let mut stdin = child.stdin.take().expect("piped stdin");
    let writer = thread::spawn(move || {
        // A program that never reads stdin closes the pipe; that is not a fault.
        let _ = stdin.write_all(payload.as_bytes());
    });
    let out_reader = spawn_reader(child.stdout.take().expect("piped stdout"), limits.max_output_bytes);
    let err_reader = spawn_reader(child.stderr.take().expect("piped stderr"), limits.max_output_bytes);

    let deadline = start + limits.wall_timeout;
    let mut poll = Duration::from_millis(1);
    let exit = loop {
        match child.try_wait() {
            Ok(Some(status)) => break Some(status),
            Ok(None) if Instant::now() >= deadline => break None,
            Ok(None) => {
                thread::sleep(poll.min(deadline.saturating_duration_since(Instant::now())));
                poll = (poll * 2).min(Duration::from_millis(20));
            }
            Err(_) => break None,
        }
    };
    // Reap the whole group, including anything the program forked.
    kill_group(pgid);
    let exit = match exit {
        Some(s) => Some(s),
        None => {
            let _ = child.wait();
            None
        }
    };
    let wall_time = start.elapsed();
    let _ = writer.join();
    let stdout = out_reader.join().expect("stdout reader");
    let stderr = err_reader.join().expect("stderr reader");
    // Tracebacks name the sandbox path; drop it so details are reproducible.
    let sandbox_prefix = format!("{}/", dir.path().display());
    let stderr_text = String::from_utf8_lossy(&stderr.bytes)
        .trim_end()
        .replace(&sandbox_prefix, "");
    let stdout_text = String::from_utf8_lossy(&stdout.bytes).to_string();

    let Some(status) = exit else {
        let mut detail = format!(
            "exceeded wall timeout of {:.3}s",
            limits.wall_timeout.as_secs_f64()
        );
        if !stderr_text.is_empty() {
            detail.push('\n');
            detail.push_str(&stderr_text);
        }
        return Ok(ExecutionResult::failure(ExecutionStatus::Timeout, detail, wall_time));
    };

    if !status.success() || stderr_text.contains("Traceback (most recent call last)") {
        let detail = if stderr_text.is_empty() {
            describe_exit(status)
        } else {
            stderr_text
        };
        return Ok(ExecutionResult::failure(ExecutionStatus::RuntimeError, detail, wall_time));
    }

    let protocol = |why: String| {
        ExecutionResult::failure(
            ExecutionStatus::ProtocolError,
            format!("{why}\nstdout: {stdout_text}"),
            wall_time,
        )
    };
    if stdout.overflowed {
        return Ok(protocol(format!(
            "stdout exceeded {} bytes",
            limits.max_output_bytes
        )));
    }
    let wire: WireOutput = match serde_json::from_str(stdout_text.trim()) {
        Ok(w) => w,
        Err(e) => return Ok(protocol(format!("stdout is not one outputs object: {e}"))),
    };
    if wire.outputs.is_empty() {
        return Ok(protocol("program returned no outputs".into()));
    }
    if let Some(unknown) = wire
        .outputs
        .keys()
        .find(|k| program.metadata.output(k).is_none())
    {
        return Ok(protocol(format!("undeclared output {unknown:?}")));
    }
    Ok(ExecutionResult {
        status: ExecutionStatus::Success,
        outcome: Some(OutcomeMap(wire.outputs.into_iter().collect())),
        detail: String::new(),
        wall_time,
    })
}

/// Runs independent jobs on a pool of `parallelism` workers (at least one),
/// returning results in input order.
pub fn execute_batch(
    jobs: &[(&KnowledgeIntensiveProgram, &VariableBindings)],
    limits: &ExecutionLimits,
    parallelism: usize,
) -> Vec<Result<ExecutionResult, ExecutorError>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .expect("worker pool");
    pool.install(|| {
        jobs.par_iter()
            .map(|(p, b)| execute(p, b, limits))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn meta() -> ProgramMetadata {
        crate::program::parse_metadata(
            "# Source: s\n# Inputs:\n#   n (integer, dimensionless): n\n#   x (decimal, yuan): x\n#   ok (boolean, dimensionless): ok\n#   tag (string, dimensionless): tag\n#   xs (list-of-decimal, yuan): xs\n# Outputs:\n#   y (decimal, yuan): y\n",
        )
        .unwrap()
    }

    #[test]
    fn coercion_follows_declared_types() {
        let raw = json!({
            "n": "12", "x": "3,000,000", "ok": "yes", "tag": 5, "xs": [1, "2.5"], "zzz": 1
        });
        let (b, dropped) = VariableBindings::coerce(raw.as_object().unwrap(), &meta());
        assert_eq!(b.get("n"), Some(&json!(12)));
        assert_eq!(b.get("x"), Some(&json!(3000000)));
        assert_eq!(b.get("ok"), Some(&json!(true)));
        assert_eq!(b.get("tag"), Some(&json!("5")));
        assert_eq!(b.get("xs"), Some(&json!([1, 2.5])));
        assert_eq!(dropped, ["zzz"]);

        let (b, dropped) =
            VariableBindings::coerce(json!({"n": 1.5, "x": "lots"}).as_object().unwrap(), &meta());
        assert!(b.is_empty());
        assert_eq!(dropped, ["n", "x"]);
    }

    #[test]
    fn payload_passes_absent_inputs_as_null() {
        let mut b = VariableBindings::new();
        b.insert("x", json!(10));
        assert_eq!(
            b.wire_payload(&meta()),
            json!({"inputs": {"n": null, "x": 10, "ok": null, "tag": null, "xs": null}})
        );
    }

    #[test]
    fn template_needs_placeholder() {
        let limits = ExecutionLimits {
            interpreter_command: "python3".into(),
            ..Default::default()
        };
        assert!(matches!(build_command(&limits), Err(ExecutorError::InvalidTemplate(_))));
        assert_eq!(
            build_command(&ExecutionLimits::default()).unwrap(),
            ["python3", "-I", "program.py"]
        );
    }

    #[test]
    fn limits_round_trip_through_config() {
        let l: ExecutionLimits = serde_json::from_str(r#"{"wall_timeout": 1.5}"#).unwrap();
        assert_eq!(l.wall_timeout, Duration::from_millis(1500));
        assert_eq!(l.max_output_bytes, 65536);
        assert!(serde_json::from_str::<ExecutionLimits>(r#"{"wall_timeout": 0}"#).is_err());
    }
}
