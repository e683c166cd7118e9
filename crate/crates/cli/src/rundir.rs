use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

/// A run's output directory. Files go to a hidden sibling staging
/// directory that replaces `dest` on [`RunDir::commit`]; a lock file
/// beside `dest` keeps concurrent runs out. Dropping without committing
/// removes the staging directory and the lock.
pub struct RunDir {
    dest: PathBuf,
    staging: PathBuf,
    lock: PathBuf,
    committed: bool,
}

fn sibling(dest: &Path, prefix: &str, suffix: &str) -> Result<PathBuf> {
    let name = dest
        .file_name()
        .with_context(|| format!("output path {} has no final component", dest.display()))?
        .to_string_lossy();
    Ok(dest.with_file_name(format!("{prefix}{name}{suffix}")))
}

impl RunDir {
    pub fn create(dest: &Path, force: bool) -> Result<Self> {
        if dest.exists() && !force {
            bail!("{} already exists (use --force to replace it)", dest.display());
        }
        if let Some(parent) = dest.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        let lock = sibling(dest, "", ".lock")?;
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .with_context(|| format!("{} is locked by another run", dest.display()))?;
        writeln!(f, "{}", std::process::id())?;
        let staging = sibling(dest, ".", ".staging")?;
        let mut run = Self {
            dest: dest.to_path_buf(),
            staging,
            lock,
            committed: false,
        };
        if run.staging.exists() {
            fs::remove_dir_all(&run.staging)?;
        }
        if let Err(e) = fs::create_dir(&run.staging) {
            run.committed = true;
            let _ = fs::remove_file(&run.lock);
            return Err(e).context("creating staging directory");
        }
        Ok(run)
    }

    /// Where outputs are written before the commit.
    pub fn path(&self) -> &Path {
        &self.staging
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.staging.join(name)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<()> {
        let p = self.file(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }

    pub fn commit(mut self) -> Result<PathBuf> {
        if self.dest.exists() {
            fs::remove_dir_all(&self.dest).with_context(|| format!("replacing {}", self.dest.display()))?;
        }
        fs::rename(&self.staging, &self.dest).with_context(|| format!("moving outputs to {}", self.dest.display()))?;
        self.committed = true;
        let _ = fs::remove_file(&self.lock);
        Ok(self.dest.clone())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.staging);
            let _ = fs::remove_file(&self.lock);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commit_moves_and_unlocks() {
        let tmp = tempfile::tempdir().unwrap();
        let dest = tmp.path().join("run");
        let r = RunDir::create(&dest, false).unwrap();
        r.write("a.txt", "x").unwrap();
        assert!(RunDir::create(&dest, true).is_err(), "second run must see the lock");
        r.commit().unwrap();
        assert_eq!(fs::read_to_string(dest.join("a.txt")).unwrap(), "x");
        assert!(!tmp.path().join("run.lock").exists());
        assert!(RunDir::create(&dest, false).is_err());
        let r = RunDir::create(&dest, true).unwrap();
        r.write("b.txt", "y").unwrap();
        r.commit().unwrap();
        assert!(!dest.join("a.txt").exists());
    }

    #[test]
    fn abandoned_run_leaves_nothing() {
        let tmp = tempfile::tempdir().unwrap();
        let dest = tmp.path().join("run");
        {
            let r = RunDir::create(&dest, false).unwrap();
            r.write("a.txt", "x").unwrap();
        }
        assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
    }
}
