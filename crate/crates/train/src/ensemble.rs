//! Saved generator states with the in-plane pixels each one must not vote on.

use std::path::{Path, PathBuf};

use pairgan_nets::checkpoint::{load_generator, save_generator};
use pairgan_nets::{Generator, Real};
use serde::{Deserialize, Serialize};

use crate::error::{io, TrainError};
use crate::noise::Footprint;

pub const INDEX_FILE: &str = "ensemble.json";

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMember<T> {
    /// Completed epochs when the state was captured.
    pub epoch: usize,
    /// Pixels this member saw the noise square on, excluded in every slice.
    pub exclusion: Option<Footprint>,
    pub generator: Generator<T>,
}

impl<T> EnsembleMember<T> {
    pub fn excludes(&self, x: usize, y: usize) -> bool {
        self.exclusion.is_some_and(|f| f.contains(x, y))
    }

    pub fn file_name(&self) -> String {
        format!("generator_epoch{:05}.ckpt", self.epoch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEnsemble<T> {
    pub members: Vec<EnsembleMember<T>>,
    /// `(height, width)` of the slices the members were trained on.
    pub plane: (usize, usize),
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    file: String,
    epoch: usize,
    exclusion: Option<Footprint>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    plane: (usize, usize),
    members: Vec<IndexEntry>,
}

impl<T: Real> CheckpointEnsemble<T> {
    /// Every pixel must be covered by at least one member, which the last
    /// member guarantees by having no exclusion.
    pub fn new(members: Vec<EnsembleMember<T>>, plane: (usize, usize)) -> Result<Self, TrainError> {
        match members.last() {
            None => return Err(TrainError::Config("an ensemble needs at least one member".into())),
            Some(m) if m.exclusion.is_some() => {
                return Err(TrainError::Config("the last ensemble member must not exclude any pixels".into()))
            }
            _ => {}
        }
        for m in &members {
            if m.generator.config().input_size != plane {
                return Err(TrainError::Grid(format!(
                    "member from epoch {} takes {:?} slices, ensemble plane is {plane:?}",
                    m.epoch,
                    m.generator.config().input_size
                )));
            }
        }
        Ok(Self { members, plane })
    }

    /// Write one checkpoint per member plus an index.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>, TrainError> {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let mut paths = Vec::new();
        let mut entries = Vec::new();
        for m in &self.members {
            paths.push(save_member(m, dir)?);
            entries.push(IndexEntry { file: m.file_name(), epoch: m.epoch, exclusion: m.exclusion });
        }
        let index = Index { plane: self.plane, members: entries };
        let path = dir.join(INDEX_FILE);
        let text = serde_json::to_string_pretty(&index).expect("index serialises");
        std::fs::write(&path, text).map_err(|e| io(&path, e))?;
        Ok(paths)
    }

    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        let path = dir.join(INDEX_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| io(&path, e))?;
        let index: Index = serde_json::from_str(&text)
            .map_err(|e| TrainError::Config(format!("{}: malformed ensemble index: {e}", path.display())))?;
        let mut members = Vec::new();
        for entry in index.members {
            let (generator, _) = load_generator(&dir.join(&entry.file))?;
            members.push(EnsembleMember { epoch: entry.epoch, exclusion: entry.exclusion, generator });
        }
        Self::new(members, index.plane)
    }
}

/// Write a single member's checkpoint into `dir`; returns its path.
pub fn save_member<T: Real>(m: &EnsembleMember<T>, dir: &Path) -> Result<PathBuf, TrainError> {
    let path = dir.join(m.file_name());
    let meta = serde_json::json!({ "epoch": m.epoch, "exclusion": m.exclusion });
    save_generator(&m.generator, meta, &path)?;
    Ok(path)
}
