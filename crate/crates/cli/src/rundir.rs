//! Run-directory management: naming, lock file, resolved-config dump.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use decoseg_core::config::RunSettings;
use decoseg_core::{Error, Result};

pub struct RunDir {
    pub path: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    /// Create `<out>/<run_name>` (timestamp-seed when unnamed), take the
    /// lock file and write the resolved configuration.
    pub fn create(settings: &RunSettings) -> Result<RunDir> {
        let name = if settings.run_name.is_empty() {
            let ts = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            format!("{ts}-seed{}", settings.train.seed)
        } else {
            settings.run_name.clone()
        };
        let path = Path::new(&settings.out_dir).join(name);
        fs::create_dir_all(&path)?;
        let lock = path.join("run.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::Config {
                    line: 0,
                    msg: format!(
                        "run directory {} is locked by another writer ({})",
                        path.display(),
                        lock.display()
                    ),
                });
            }
            Err(e) => return Err(e.into()),
        }
        fs::write(path.join("config.resolved"), settings.resolved())?;
        Ok(RunDir { path, lock })
    }

    pub fn file(&self, name: impl AsRef<Path>) -> PathBuf {
        self.path.join(name)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}
