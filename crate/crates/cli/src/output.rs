use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::config::ConfigError;

/// Machine-readable failure, printed to stderr as one JSON line.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorRecord {
    pub error: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub column: Option<usize>,
}

impl ErrorRecord {
    pub fn new(error: &'static str, message: impl ToString) -> Self {
        Self { error, message: message.to_string(), field: None, line: None, column: None }
    }

    pub fn usage(message: impl ToString) -> Self {
        Self::new("UsageError", message)
    }

    pub fn io(path: &Path, e: impl ToString) -> Self {
        Self { field: Some(path.display().to_string()), ..Self::new("IoError", e) }
    }

    pub fn computation(e: impl ToString) -> Self {
        Self::new("ComputationError", e)
    }

    pub fn emit(&self) {
        eprintln!("{}", serde_json::to_string(self).expect("record serialises"));
    }
}

impl From<ConfigError> for ErrorRecord {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Parse { line, column, message } => {
                Self { line: Some(line), column: Some(column), ..Self::new("ParseError", message) }
            }
            ConfigError::Validation { field, message } => Self { field: Some(field), ..Self::new("ValidationError", message) },
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ErrorRecord> {
    let mut text = serde_json::to_string_pretty(value).map_err(ErrorRecord::computation)?;
    text.push('\n');
    let mut f = File::create(path).map_err(|e| ErrorRecord::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| ErrorRecord::io(path, e))
}

/// RFC 4180 quoting with LF record terminators.
pub fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), ErrorRecord> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path).map_err(|e| ErrorRecord::io(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| ErrorRecord::io(path, e))?;
    }
    w.flush().map_err(|e| ErrorRecord::io(path, e))
}
