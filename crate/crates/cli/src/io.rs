use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use kvprune::engine::EngineError;
use kvprune::trace::{default_marker_set, MarkerSet, ReasoningTrace, TraceFile};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<kvprune::trace::TraceError> for CliError {
    fn from(e: kvprune::trace::TraceError) -> Self {
        CliError::Input(format!("{e:?}: {e}"))
    }
}

impl From<kvprune::scoring::ScoringError> for CliError {
    fn from(e: kvprune::scoring::ScoringError) -> Self {
        CliError::Input(format!("{e:?}: {e}"))
    }
}

impl From<kvprune::policy::PolicyError> for CliError {
    fn from(e: kvprune::policy::PolicyError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::InvalidConfig(_) | EngineError::UnknownText(_) | EngineError::Weights(_) => {
                CliError::Input(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    // serde_json's messages name the missing or mistyped field
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("cannot create {}: {e}", dir.display())))
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// Write `name` into `out`, or print it when there is no output directory.
pub fn emit(out: Option<&Path>, name: &str, contents: &str) -> Result<(), CliError> {
    match out {
        Some(dir) => write_file(&dir.join(name), contents),
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

pub fn read_trace(path: &Path) -> Result<ReasoningTrace, CliError> {
    let file: TraceFile = read_json(path)?;
    Ok(file.into_trace()?)
}

pub fn read_markers(path: Option<&Path>) -> Result<MarkerSet, CliError> {
    let Some(path) = path else {
        return Ok(default_marker_set());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let phrases: Vec<String> = match serde_json::from_str::<Vec<String>>(&text) {
        Ok(p) => p,
        Err(_) => text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect(),
    };
    Ok(MarkerSet::new(phrases)?)
}

/// Expand directories into the `.json` files beneath them, sorted.
pub fn collect_json(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found = Vec::new();
            walk(p, &mut found).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            walk(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "json") {
            out.push(path);
        }
    }
    Ok(())
}
