//! Small file helpers shared by the on-disk formats.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::Pose;

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::parse(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn fmt_list(values: &[f64]) -> String {
    values.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(", ")
}

/// `{"<tag>": "...", "frames": [{"i": k, "<key>": [16 numbers]}, ...]}`
pub(crate) fn pose_list_json<'a>(
    header: Option<(&str, &str)>,
    key: &str,
    poses: impl Iterator<Item = (usize, &'a Pose)>,
) -> String {
    let mut out = String::from("{\n");
    if let Some((k, v)) = header {
        out.push_str(&format!("  \"{k}\": \"{v}\",\n"));
    }
    out.push_str("  \"frames\": [");
    let mut first = true;
    for (i, pose) in poses {
        if !first {
            out.push(',');
        }
        first = false;
        out.push_str(&format!(
            "\n    {{\"i\": {i}, \"{key}\": [{}]}}",
            fmt_list(&pose.to_row_major())
        ));
    }
    out.push_str("\n  ]\n}\n");
    out
}
