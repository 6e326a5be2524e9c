//! File plumbing: atomic writes, config loading, sequence discovery.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use dualtrack_core::config::Config;
use dualtrack_core::eval::RunRecord;
use dualtrack_core::sim::{load_sequence, SequenceData};
use serde::Serialize;

use crate::{CliError, CliResult};

/// Write through a temporary file in the target directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    tmp.persist(path).map_err(|e| CliError::io(format!("{}: {}", path.display(), e.error)))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Defaults when no file is given; a missing or invalid file is a config error.
pub fn load_config(path: Option<&Path>) -> CliResult<Config> {
    match path {
        None => Ok(Config::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            Config::parse(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))
        }
    }
}

fn is_sequence_dir(p: &Path) -> bool {
    p.join("meta.json").is_file()
}

/// Each path is a sequence directory or a directory of them, scanned in
/// name order.
pub fn discover_sequences(paths: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if is_sequence_dir(p) {
            out.push(p.clone());
            continue;
        }
        let entries = fs::read_dir(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
        let mut found: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|c| is_sequence_dir(c)).collect();
        if found.is_empty() {
            return Err(CliError::data(format!("{}: no sequences found", p.display())));
        }
        found.sort();
        out.extend(found);
    }
    Ok(out)
}

pub fn load_sequences(paths: &[PathBuf]) -> CliResult<Vec<SequenceData>> {
    discover_sequences(paths)?
        .iter()
        .map(|p| load_sequence(p).map_err(|e| CliError::data(format!("{}: {e}", p.display()))))
        .collect()
}

pub fn read_run(path: &Path) -> CliResult<RunRecord> {
    let text = fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let rec: RunRecord = serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    rec.validate().map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok(rec)
}

/// Thread cap from `DUALTRACK_THREADS`; unset or invalid means rayon's default.
pub fn thread_cap() -> Option<usize> {
    std::env::var("DUALTRACK_THREADS").ok()?.trim().parse().ok().filter(|&n| n > 0)
}
