//! Canonical JSONL encoding: one object per line, keys sorted, `\n` terminated.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use super::{Trajectory, TrajectoryError};

const TOP_LEVEL_KEYS: [&str; 6] = [
    "id",
    "ledger_history",
    "provenance",
    "rounds",
    "terminal_status",
    "user_prompt",
];

/// Serializes any value with lexicographically sorted object keys.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    // serde_json's default map is ordered by key, so a round trip through
    // `Value` sorts every nested object.
    let v = serde_json::to_value(value).expect("serializable value");
    serde_json::to_string(&v).expect("value to string")
}

/// One canonical line, without the terminator.
pub fn serialize(traj: &Trajectory) -> String {
    canonical_json(traj)
}

pub fn deserialize(line: &str) -> Result<Trajectory, TrajectoryError> {
    let value: Value = serde_json::from_str(line.trim_end_matches(['\n', '\r']))
        .map_err(|e| TrajectoryError::schema("$", e.to_string()))?;
    let Value::Object(map) = &value else {
        return Err(TrajectoryError::schema("$", "expected a JSON object"));
    };
    for key in TOP_LEVEL_KEYS {
        if !map.contains_key(key) {
            return Err(TrajectoryError::schema(key, "missing field"));
        }
    }
    if let Some(extra) = map.keys().find(|k| !TOP_LEVEL_KEYS.contains(&k.as_str())) {
        return Err(TrajectoryError::schema(extra.clone(), "unexpected field"));
    }
    let traj: Trajectory = serde_path_to_error::deserialize(value).map_err(|e| {
        let mut path = e.path().to_string();
        let msg = e.inner().to_string();
        if let Some(field) = missing_field(&msg) {
            path = if path == "." {
                field.to_string()
            } else {
                format!("{path}.{field}")
            };
        }
        TrajectoryError::schema(path, msg)
    })?;
    traj.validate().map_err(|e| match e {
        TrajectoryError::SchemaViolation { .. } => e,
        other => TrajectoryError::schema("rounds", other.to_string()),
    })?;
    Ok(traj)
}

fn missing_field(msg: &str) -> Option<&str> {
    let rest = msg.strip_prefix("missing field `")?;
    rest.split('`').next()
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Trajectory>, TrajectoryError> {
    let file = fs::File::open(path).map_err(|e| TrajectoryError::schema(path.display().to_string(), e.to_string()))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| TrajectoryError::schema(format!("line {}", n + 1), e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let t = deserialize(&line).map_err(|e| match e {
            TrajectoryError::SchemaViolation { path, message } => TrajectoryError::SchemaViolation {
                path: format!("line {}: {path}", n + 1),
                message,
            },
            other => other,
        })?;
        out.push(t);
    }
    Ok(out)
}

/// Writes the whole file atomically (temp file + rename).
pub fn write_jsonl(path: &Path, trajectories: &[Trajectory]) -> std::io::Result<()> {
    let mut body = String::new();
    for t in trajectories {
        body.push_str(&serialize(t));
        body.push('\n');
    }
    crate::fsutil::write_atomic(path, body.as_bytes())
}

pub fn append_line(file: &mut fs::File, traj: &Trajectory) -> std::io::Result<()> {
    let mut line = serialize(traj);
    line.push('\n');
    file.write_all(line.as_bytes())?;
    file.flush()
}
