//! Where each command reads and writes inside the output directory.

use std::path::{Path, PathBuf};

use crate::config::Paths;

/// Stage names of the preprocessing chain, in order. The last stage is
/// written under the bare volume name.
pub const STAGES: [&str; 4] = ["resampled", "matched", "normalized", "centered"];

#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
    pub ext: String,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>, ext: &str) -> Self {
        Self { root: root.into(), ext: ext.to_string() }
    }

    pub fn preprocessed_dir(&self) -> PathBuf {
        self.root.join("preprocessed")
    }

    /// Final preprocessed file for `name` (t1, t2, brain_t1, brain_t2, seg1, seg2).
    pub fn preprocessed(&self, name: &str) -> PathBuf {
        self.preprocessed_dir().join(format!("{name}{}", self.ext))
    }

    /// Intermediate stage `k` (0-based) of volume `name`.
    pub fn stage(&self, name: &str, k: usize) -> PathBuf {
        if k + 1 == STAGES.len() {
            return self.preprocessed(name);
        }
        self.preprocessed_dir().join(format!("{name}_{}_{}{}", k + 1, STAGES[k], self.ext))
    }

    pub fn preprocess_manifest(&self) -> PathBuf {
        self.preprocessed_dir().join("manifest.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn train_manifest(&self) -> PathBuf {
        self.root.join("train_manifest.json")
    }

    pub fn losses(&self) -> PathBuf {
        self.root.join("losses.csv")
    }

    pub fn change_map(&self) -> PathBuf {
        self.root.join(format!("change_map{}", self.ext))
    }

    pub fn overlays(&self) -> PathBuf {
        self.root.join("overlays")
    }

    pub fn predict_manifest(&self) -> PathBuf {
        self.root.join("predict_manifest.json")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn cohort_csv(&self) -> PathBuf {
        self.root.join("cohort.csv")
    }

    pub fn cohort_accuracy_csv(&self) -> PathBuf {
        self.root.join("cohort_accuracy.csv")
    }

    pub fn phantoms(&self) -> PathBuf {
        self.root.join("phantoms")
    }
}

/// Input paths of a phantom case written by the `phantom` command.
pub fn phantom_case_paths(dir: &Path, ext: &str) -> Paths {
    let f = |n: &str| Some(dir.join(format!("{n}{ext}")));
    Paths { t1: f("t1"), t2: f("t2"), brain_t1: f("brain"), brain_t2: f("brain_t2"), seg1: f("seg1"), seg2: f("seg2") }
}
