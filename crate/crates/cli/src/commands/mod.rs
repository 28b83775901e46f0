pub mod encode;
pub mod eval;
pub mod info;
pub mod predict;
pub mod simulate;
pub mod train;

use std::path::Path;

use crate::settings::CliError;

/// Sorted list of files in `dir` with the given extension.
pub fn list_with_extension(dir: &Path, ext: &str) -> Result<Vec<std::path::PathBuf>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::usage(format!(
            "directory not found: {}",
            dir.display()
        )));
    }
    let mut files: Vec<std::path::PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::runtime(format!("cannot list {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some(ext))
        .collect();
    files.sort();
    Ok(files)
}

pub fn ensure_out_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))
}
