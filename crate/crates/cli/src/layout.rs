//! On-disk layout of generated data and command outputs.

use std::fs;
use std::path::{Path, PathBuf};

use ashplus_core::synthdata::{load_dataset, load_style_pool, Dataset};
use ashplus_core::Tensor;

use crate::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.txt";
/// Echo of the command, its resolved flags and configuration.
pub const RESOLVED_FILE: &str = "resolved.toml";

pub const SOURCE_DIR: &str = "source";
pub const TARGETS_DIR: &str = "targets";
pub const STYLES_DIR: &str = "styles";

pub fn require_dir(path: &Path, what: &str) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::ingestion(format!("{what} directory {} does not exist", path.display())))
    }
}

pub fn create_out(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::ingestion(format!("cannot create {}: {e}", dir.display())))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::ingestion(format!("cannot write {}: {e}", path.display())))
}

pub fn load_source(data: &Path) -> CliResult<Dataset> {
    require_dir(data, "data")?;
    Ok(load_dataset(&data.join(SOURCE_DIR))?)
}

/// Target domains in directory order.
pub fn load_targets(data: &Path) -> CliResult<Vec<Dataset>> {
    require_dir(data, "data")?;
    let root = data.join(TARGETS_DIR);
    require_dir(&root, "targets")?;
    let mut dirs: Vec<PathBuf> = fs::read_dir(&root)
        .map_err(|e| CliError::ingestion(format!("cannot list {}: {e}", root.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::ingestion(format!("no target domains under {}", root.display())));
    }
    dirs.iter().map(|d| load_dataset(d).map_err(CliError::from)).collect()
}

pub fn load_styles(data: Option<&Path>, pool: Option<&Path>) -> CliResult<Vec<Tensor<f32>>> {
    let dir = match (pool, data) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(d)) => d.join(STYLES_DIR),
        (None, None) => return Err(CliError::config("--style-pool or --data is required")),
    };
    require_dir(&dir, "style pool")?;
    Ok(load_style_pool(&dir)?)
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if let Ok(rel) = path.strip_prefix(root) {
            let rel = rel.to_string_lossy().replace('\\', "/");
            if rel != MANIFEST_FILE {
                out.push(rel);
            }
        }
    }
    Ok(())
}

/// Lists every file under `out` (sorted, relative paths) in the manifest.
pub fn write_manifest(out: &Path) -> CliResult<()> {
    let mut files = Vec::new();
    collect_files(out, out, &mut files).map_err(|e| CliError::ingestion(format!("cannot list {}: {e}", out.display())))?;
    files.sort();
    let mut text = files.join("\n");
    text.push('\n');
    write_text(&out.join(MANIFEST_FILE), &text)
}
