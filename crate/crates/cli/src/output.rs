//! Output-directory lifecycle: refuse non-empty targets without --force,
//! remove partial artifacts on failure.

use std::path::{Path, PathBuf};

use equiplace_core::{Error, Result};

/// Tracks artifacts written by a command; anything still tracked when the
/// guard drops (i.e. on error) is deleted so failures leave no partial
/// outputs behind.
pub struct OutputGuard {
    tracked: Vec<PathBuf>,
    committed: bool,
}

impl OutputGuard {
    pub fn new() -> Self {
        OutputGuard {
            tracked: Vec::new(),
            committed: false,
        }
    }

    /// Prepare an output directory: reject a non-empty target unless
    /// `force` is set; create it (tracking it for cleanup if fresh).
    pub fn prepare_dir(&mut self, dir: &Path, force: bool) -> Result<()> {
        if dir.exists() {
            let non_empty = std::fs::read_dir(dir)?.next().is_some();
            if non_empty && !force {
                return Err(Error::Data(format!(
                    "output directory {} is not empty (use --force to overwrite)",
                    dir.display()
                )));
            }
        } else {
            std::fs::create_dir_all(dir)?;
            self.track(dir);
        }
        Ok(())
    }

    /// Register an artifact for cleanup-on-failure.
    pub fn track(&mut self, path: &Path) {
        self.tracked.push(path.to_path_buf());
    }

    /// Keep all artifacts: the command succeeded.
    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for path in self.tracked.iter().rev() {
            if path.is_dir() {
                std::fs::remove_dir_all(path).ok();
            } else {
                std::fs::remove_file(path).ok();
            }
        }
    }
}

/// Write a file and track it in the guard.
pub fn write_tracked(guard: &mut OutputGuard, path: &Path, contents: &str) -> Result<()> {
    guard.track(path);
    std::fs::write(path, contents)?;
    Ok(())
}
