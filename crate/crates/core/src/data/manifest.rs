//! JSON-lines manifest tying bag files to tasks, labels and splits.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_bag_file, FeatureBag, Split, TaskSpec};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub slide_id: String,
    pub task: String,
    /// Bag file path relative to the manifest's directory.
    pub path: String,
    pub label_term: String,
    pub split: Split,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                Error::Ingestion(format!("{} line {}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

/// Bags listed in a manifest, checked against the task spec.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub bags: Vec<FeatureBag>,
    pub splits: Vec<Split>,
}

impl LoadedData {
    pub fn subset(&self, split: Split) -> Vec<&FeatureBag> {
        self.bags
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .map(|(b, _)| b)
            .collect()
    }
}

/// Reads every bag of a manifest. Paths resolve relative to the manifest.
/// Each bag must agree with its manifest row and with `spec`; when given,
/// `d_f` must match every bag.
pub fn load_manifest(path: &Path, spec: &TaskSpec, d_f: Option<usize>) -> Result<LoadedData> {
    let root: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let entries = read_manifest(path)?;
    let mut bags = Vec::with_capacity(entries.len());
    let mut splits = Vec::with_capacity(entries.len());
    for e in entries {
        let task = spec.task_index(&e.task)?;
        let bag = read_bag_file(&root.join(&e.path))?;
        if bag.slide_id != e.slide_id || bag.task_id != task || bag.label_term != e.label_term {
            return Err(Error::Ingestion(format!(
                "bag file {} disagrees with its manifest row for {:?}",
                e.path, e.slide_id
            )));
        }
        if spec.resolve(task, &bag.label_term).is_none() {
            return Err(Error::Ingestion(format!(
                "label {:?} of bag {:?} is not a category of task {:?}",
                bag.label_term, bag.slide_id, e.task
            )));
        }
        if let Some(d) = d_f {
            bag.expect_d_f(d)?;
        }
        bags.push(bag);
        splits.push(e.split);
    }
    Ok(LoadedData { bags, splits })
}
