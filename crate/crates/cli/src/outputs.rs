//! Output bookkeeping so that a failed command leaves nothing behind.

use std::path::{Path, PathBuf};

use crate::{runtime, Outcome};

/// Records created files and directories; unless [`Outputs::commit`] is
/// called, dropping it deletes them again.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    pub fn new() -> Self {
        Self::default()
    }

    /// `create_dir_all`, remembering which levels did not exist yet.
    pub fn dir(&mut self, path: &Path) -> Outcome<()> {
        let mut missing = Vec::new();
        let mut p = Some(path);
        while let Some(d) = p {
            if d.as_os_str().is_empty() || d.exists() {
                break;
            }
            missing.push(d.to_path_buf());
            p = d.parent();
        }
        std::fs::create_dir_all(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        // Deepest first, which is also the order to remove them in.
        self.dirs.extend(missing);
        Ok(())
    }

    /// Registers `path` before it is written.
    pub fn file(&mut self, path: impl Into<PathBuf>) -> PathBuf {
        let path = path.into();
        self.files.push(path.clone());
        path
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.files {
            let _ = std::fs::remove_file(f);
        }
        for d in &self.dirs {
            let _ = std::fs::remove_dir(d);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncommitted_outputs_are_removed() {
        let tmp = tempfile::tempdir().unwrap();
        let nested = tmp.path().join("a/b");
        {
            let mut o = Outputs::new();
            o.dir(&nested).unwrap();
            let f = o.file(nested.join("x.txt"));
            std::fs::write(&f, "x").unwrap();
        }
        assert!(!tmp.path().join("a").exists());
        let mut o = Outputs::new();
        o.dir(&nested).unwrap();
        std::fs::write(o.file(nested.join("x.txt")), "x").unwrap();
        o.commit();
        assert!(nested.join("x.txt").exists());
    }
}
