use std::fmt;
use std::path::{Path, PathBuf};

use crossdiff::Error;
use serde::de::DeserializeOwned;
use serde::Serialize;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;
pub const EXIT_MISMATCH: u8 = 4;
pub const EXIT_EMPTY_SET: u8 = 5;
pub const EXIT_INFEASIBLE: u8 = 6;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(EXIT_CONFIG, message)
    }

    pub fn mismatch(message: impl Into<String>) -> Self {
        Self::new(EXIT_MISMATCH, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidConfig(_) | Error::InvalidBatchSize { .. } | Error::InvalidFeature { .. } => EXIT_CONFIG,
            Error::NonFiniteLoss | Error::NonFiniteGradient | Error::DivergedAtStep(_) => EXIT_DIVERGED,
            Error::ModelSetMismatch(_) => EXIT_MISMATCH,
            Error::EmptyCriticalSet(_) => EXIT_EMPTY_SET,
            Error::DictionaryInfeasible { .. } => EXIT_INFEASIBLE,
            _ => EXIT_FAILURE,
        };
        Self::new(code, e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::new(EXIT_FAILURE, format!("csv: {e}"))
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

/// Reads a JSON or TOML document (chosen by extension); parse failures are
/// config errors.
pub fn read_doc<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    let is_toml = path.extension().is_some_and(|x| x == "toml");
    let parsed = if is_toml {
        toml::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

/// JSON artifact with a schema version in front of the payload.
#[derive(Serialize, serde::Deserialize)]
pub struct Versioned<T> {
    pub schema_version: u32,
    #[serde(flatten)]
    pub body: T,
}

pub fn write_json<T: Serialize>(path: &Path, body: &T) -> CliResult {
    let doc = Versioned {
        schema_version: crossdiff::SCHEMA_VERSION,
        body,
    };
    let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::new(EXIT_FAILURE, e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::new(EXIT_FAILURE, format!("{}: {e}", path.display())))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::new(EXIT_FAILURE, format!("cannot read {}: {e}", path.display())))?;
    let doc: Versioned<T> =
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    if doc.schema_version != crossdiff::SCHEMA_VERSION {
        return Err(CliError::config(format!(
            "{}: unsupported schema_version {}",
            path.display(),
            doc.schema_version
        )));
    }
    Ok(doc.body)
}

/// Writes `rows` under `header`. Each row must have as many cells as the header.
pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()
        .map_err(|e| CliError::new(EXIT_FAILURE, format!("{}: {e}", path.display())))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

pub fn cell<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn ensure_dir(dir: &Path) -> CliResult<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::new(EXIT_FAILURE, format!("{}: {e}", dir.display())))?;
    Ok(dir.to_path_buf())
}
