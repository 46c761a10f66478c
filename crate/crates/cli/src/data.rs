use std::path::Path;

use invexnet::checkpoint::{write_atomic, DatasetRef};
use invexnet::datasets::{by_name, parse_csv, Dataset, TEST_SEED_OFFSET};

use crate::{CliError, CliResult};

fn is_csv(name: &str) -> bool {
    name.ends_with(".csv") || Path::new(name).is_file()
}

/// A generator name or a CSV path. CSV features are used as-is (no
/// standardization), so checkpoints stay valid on the raw file.
pub fn load(name: &str, label_column: &str, seed: u64) -> CliResult<(Dataset, DatasetRef)> {
    let data = if is_csv(name) {
        let file = std::fs::File::open(name).map_err(|e| CliError::io(format!("{name}: {e}")))?;
        let stem = Path::new(name).file_stem().and_then(|s| s.to_str()).unwrap_or("csv");
        parse_csv(file, label_column, stem).map_err(|e| CliError::config(format!("{name}: {e}")))?
    } else {
        by_name(name, seed)?
    };
    Ok((data, DatasetRef { name: name.to_string(), seed }))
}

/// The held-out split of a generated dataset; CSV files have none.
pub fn test_split(r: &DatasetRef) -> CliResult<Option<Dataset>> {
    if is_csv(&r.name) {
        return Ok(None);
    }
    Ok(Some(by_name(&r.name, r.seed.wrapping_add(TEST_SEED_OFFSET))?))
}

/// Dataset from `--dataset` when given, else the checkpoint's reference.
pub fn resolve(flag: Option<&str>, label_column: &str, seed: Option<u64>, stored: Option<&DatasetRef>) -> CliResult<(Dataset, DatasetRef)> {
    match (flag, stored) {
        (Some(name), s) => load(name, label_column, seed.or(s.map(|s| s.seed)).unwrap_or(0)),
        (None, Some(s)) => load(&s.name, label_column, seed.unwrap_or(s.seed)),
        (None, None) => Err(CliError::config("checkpoint has no dataset reference; pass --dataset")),
    }
}

pub fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
    }
    write_atomic(path, bytes).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

pub fn json<T: serde::Serialize>(value: &T) -> CliResult<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError { code: CliError::OTHER, message: e.to_string() })?;
    s.push('\n');
    Ok(s.into_bytes())
}
