//! Run directory layout:
//!
//! ```text
//! config.json            frozen configuration
//! metrics.jsonl          one EpochRecord per line
//! checkpoints/epoch-NNN.ckpt
//! best                   relative path of the best checkpoint
//! ```

use std::io::Write as _;
use std::path::{Path, PathBuf};

use super::EpochRecord;
use crate::error::{Error, Result};
use crate::model::{read_checkpoint, write_checkpoint, Checkpoint, Mecformer};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_MARKER: &str = "best";

#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates the directory tree and writes the config snapshot. Existing
    /// metrics are truncated.
    pub fn create(root: &Path, config_snapshot: &str) -> Result<Self> {
        let ckpt = root.join("checkpoints");
        std::fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        let dir = RunDir {
            root: root.to_path_buf(),
        };
        dir.write_text(CONFIG_FILE, config_snapshot)?;
        dir.write_text(METRICS_FILE, "")?;
        Ok(dir)
    }

    pub fn open(root: &Path) -> Self {
        RunDir {
            root: root.to_path_buf(),
        }
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let path = self.root.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn epoch_checkpoint(epoch: usize) -> String {
        format!("checkpoints/epoch-{epoch:03}.ckpt")
    }

    /// Appends the epoch's metrics, saves its checkpoint and moves the best
    /// marker when the epoch improved.
    pub fn record_epoch(&self, record: &EpochRecord, model: &Mecformer, metadata: &str) -> Result<()> {
        let metrics = self.root.join(METRICS_FILE);
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(&metrics)
            .map_err(|e| Error::io(&metrics, e))?;
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        f.write_all(&line).map_err(|e| Error::io(&metrics, e))?;

        let rel = Self::epoch_checkpoint(record.epoch);
        write_checkpoint(&self.root.join(&rel), &Checkpoint::of(model, metadata))?;
        if record.improved {
            self.write_text(BEST_MARKER, &rel)?;
        }
        Ok(())
    }

    pub fn best_checkpoint_path(&self) -> Result<PathBuf> {
        let marker = self.root.join(BEST_MARKER);
        let rel = std::fs::read_to_string(&marker).map_err(|e| Error::io(&marker, e))?;
        Ok(self.root.join(rel.trim()))
    }

    pub fn load_best(&self) -> Result<Checkpoint> {
        read_checkpoint(&self.best_checkpoint_path()?)
    }

    pub fn history(&self) -> Result<Vec<EpochRecord>> {
        let path = self.root.join(METRICS_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }
}
