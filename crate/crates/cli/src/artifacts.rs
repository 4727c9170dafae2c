//! Output directory bookkeeping.

use std::fs;
use std::path::{Path, PathBuf};

use speechalign::config::RunConfig;
use speechalign::{Error, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const VERSION_FILE: &str = "VERSION";

pub fn tool_version() -> String {
    format!("speechalign {}", env!("CARGO_PKG_VERSION"))
}

/// Creates `dir` and records the effective config and tool version in it.
pub fn prepare(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    fs::write(dir.join(VERSION_FILE), format!("{}\n", tool_version()))?;
    Ok(())
}

/// Version recorded in the nearest directory at or above `start`, stopping
/// at `root`.
pub fn recorded_version(start: &Path, root: &Path) -> Result<String> {
    let mut dir = Some(start);
    while let Some(d) = dir {
        let file = d.join(VERSION_FILE);
        if file.is_file() {
            return Ok(fs::read_to_string(file)?.trim().to_string());
        }
        if d == root {
            break;
        }
        dir = d.parent();
    }
    Err(Error::Input(format!("no {VERSION_FILE} file above {}", start.display())))
}

/// Every `*.json` file under `dir`, sorted.
pub fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "json") {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}
