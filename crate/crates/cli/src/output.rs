//! Atomic output placement: everything is written under a temporary sibling
//! and moved into place only once complete.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use robustsr::{Error, Result};
use tempfile::TempDir;

fn parent_of(target: &Path) -> Result<PathBuf> {
    let parent = match target.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&parent)?;
    Ok(parent)
}

fn refuse_existing(target: &Path, force: bool) -> Result<()> {
    if target.exists() && !force {
        return Err(Error::Config(format!(
            "{} already exists; pass --force to replace it",
            target.display()
        )));
    }
    Ok(())
}

/// An output directory under construction.
pub struct OutputDir {
    tmp: TempDir,
    target: PathBuf,
    force: bool,
}

impl OutputDir {
    pub fn create(target: &Path, force: bool) -> Result<Self> {
        refuse_existing(target, force)?;
        let tmp = tempfile::Builder::new()
            .prefix(".robustsr-")
            .tempdir_in(parent_of(target)?)?;
        Ok(Self {
            tmp,
            target: target.to_path_buf(),
            force,
        })
    }

    pub fn path(&self) -> &Path {
        self.tmp.path()
    }

    /// Moves the finished directory to its target.
    pub fn commit(self) -> Result<PathBuf> {
        refuse_existing(&self.target, self.force)?;
        if self.target.is_dir() {
            std::fs::remove_dir_all(&self.target)?;
        } else if self.target.exists() {
            std::fs::remove_file(&self.target)?;
        }
        let staged = self.tmp.keep();
        std::fs::rename(&staged, &self.target)?;
        Ok(self.target)
    }
}

/// Writes one file through `write`, which receives a temporary path with
/// the target's extension, then renames it over `target`.
pub fn write_file(target: &Path, force: bool, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    refuse_existing(target, force)?;
    let suffix = target
        .extension()
        .map(|e| format!(".{}", e.to_string_lossy()))
        .unwrap_or_default();
    let tmp = tempfile::Builder::new()
        .prefix(".robustsr-")
        .suffix(&suffix)
        .tempfile_in(parent_of(target)?)?;
    write(tmp.path())?;
    tmp.persist(target).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// `<file>.resolved_config.toml` next to a single-file output.
pub fn sidecar_path(target: &Path) -> PathBuf {
    let mut name = target.file_name().map(OsString::from).unwrap_or_default();
    name.push(".");
    name.push(robustsr::config::RESOLVED_CONFIG_FILE);
    target.with_file_name(name)
}
