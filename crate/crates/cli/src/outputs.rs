use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::args::Command;

/// Files written by one command. Unless [`Outputs::commit`] is called, every
/// registered file is deleted on drop, so a failed command leaves nothing
/// half-written behind.
#[derive(Default)]
pub struct Outputs {
    paths: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    /// Registers `path` and hands it back for a library writer to fill.
    pub fn claim(&mut self, path: &Path) -> Result<PathBuf> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        self.paths.push(path.to_path_buf());
        Ok(path.to_path_buf())
    }

    pub fn create(&mut self, path: &Path) -> Result<BufWriter<File>> {
        let path = self.claim(path)?;
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(BufWriter::new(file))
    }

    /// Writes a whole file through `fill`.
    pub fn write_with(&mut self, path: &Path, fill: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
        let mut out = self.create(path)?;
        fill(&mut out).with_context(|| format!("writing {}", path.display()))?;
        out.flush().with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for path in &self.paths {
                let _ = std::fs::remove_file(path);
            }
        }
    }
}

/// Resolved configuration of one or more commands, replayable with
/// `subtail --manifest <file>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub steps: Vec<Command>,
}

impl RunManifest {
    pub fn single(step: Command) -> Self {
        Self {
            tool: "subtail".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            steps: vec![step],
        }
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        text
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }
}
