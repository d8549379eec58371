//! Artifact directories: one per pipeline stage under the run directory.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::CliError;

pub const VERSION: &str = concat!("hedgelab ", env!("CARGO_PKG_VERSION"));

/// A stage's output directory, created with the resolved config and tool
/// version written into it.
pub struct Stage {
    pub dir: PathBuf,
}

impl Stage {
    pub fn create(cfg: &RunConfig, name: &str) -> Result<Stage, CliError> {
        let dir = cfg.run_dir().join(name);
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let stage = Stage { dir };
        stage.write_text("resolved_config.toml", &cfg.to_toml())?;
        stage.write_text("VERSION", &format!("{}\n", VERSION))?;
        Ok(stage)
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    pub fn write_text(&self, file: &str, text: &str) -> Result<(), CliError> {
        let p = self.path(file);
        std::fs::write(&p, text).map_err(|e| CliError::io(&p, e))
    }

    /// Opens `file` for writing, runs `f` on it and flushes.
    pub fn write_with<F>(&self, file: &str, f: F) -> Result<PathBuf, CliError>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<(), CliError>,
    {
        let p = self.path(file);
        let mut w = BufWriter::new(File::create(&p).map_err(|e| CliError::io(&p, e))?);
        f(&mut w)?;
        w.flush().map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }
}

/// Path of an artifact produced by an earlier stage, or the dependency error
/// telling the user which command to run first.
pub fn upstream(cfg: &RunConfig, command: &str, stage: &str, file: &str) -> Result<PathBuf, CliError> {
    let p = cfg.run_dir().join(stage).join(file);
    if p.is_file() {
        Ok(p)
    } else {
        Err(CliError::MissingArtifact {
            command: command.into(),
            path: p,
            producer: stage.into(),
        })
    }
}

pub fn read_to_string(p: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))
}
