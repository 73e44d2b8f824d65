//! Run configuration: one TOML or JSON document whose every key defaults to
//! the published setting, with an optional desk-scale preset underneath.

use std::path::{Path, PathBuf};

use pairgan_core::analysis::TernaryParams;
use pairgan_core::augment::AugmentSpec;
use pairgan_core::phantom::PhantomSpec;
use pairgan_core::preprocess::MatchDirection;
use pairgan_core::Shape;
use pairgan_nets::{CriticConfig, GeneratorConfig};
use pairgan_train::{NoiseConfig, OptimizerConfig, OverlayStyle, TrainConfig, TrainingSchedule};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub t1: Option<PathBuf>,
    pub t2: Option<PathBuf>,
    pub brain_t1: Option<PathBuf>,
    pub brain_t2: Option<PathBuf>,
    pub seg1: Option<PathBuf>,
    pub seg2: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub shape: [usize; 3],
}

impl Default for Grid {
    fn default() -> Self {
        Self { shape: [256, 256, 128] }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    pub match_direction: MatchDirection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub depth: usize,
    pub base_width: usize,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        Self { depth: g.depth, base_width: g.base_width }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticSection {
    pub depth: usize,
    pub base_width: usize,
    pub leaky_slope: f64,
}

impl Default for CriticSection {
    fn default() -> Self {
        let c = CriticConfig::default();
        Self { depth: c.depth, base_width: c.base_width, leaky_slope: c.leaky_slope }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    /// Augment the follow-up views as well as the baseline views.
    pub augment_t2: bool,
    pub zero_init_head: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { augment_t2: t.augment_t2, zero_init_head: t.zero_init_head }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OverlaySection {
    pub threshold: f64,
    pub full_scale: f64,
    /// Slices to render; empty renders every slice.
    pub slices: Vec<usize>,
}

impl Default for OverlaySection {
    fn default() -> Self {
        let s = OverlayStyle::default();
        Self { threshold: s.threshold, full_scale: s.full_scale, slices: Vec::new() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// Output directories of earlier runs to summarise as a cohort.
    pub cohort: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub n_per_class: usize,
    pub seed: u64,
    /// Write only `spec` itself as a single case instead of a suite.
    pub single: bool,
    pub spec: PhantomSpec,
}

impl Default for PhantomSection {
    fn default() -> Self {
        Self { n_per_class: 3, seed: 0, single: false, spec: PhantomSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output: PathBuf,
    /// Extension of written volumes: `.nii`, `.nii.gz` or `.raw`.
    pub volume_ext: String,
    pub paths: Paths,
    pub grid: Grid,
    pub preprocess: PreprocessSection,
    pub augment: AugmentSpec,
    pub generator: GeneratorSection,
    pub critic: CriticSection,
    pub schedule: TrainingSchedule,
    pub optimizer: OptimizerConfig,
    pub noise: NoiseConfig,
    pub training: TrainingSection,
    pub analysis: TernaryParams,
    pub overlay: OverlaySection,
    pub evaluate: EvaluateSection,
    pub phantom: PhantomSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: PathBuf::from("pairgan-out"),
            volume_ext: ".nii.gz".into(),
            paths: Paths::default(),
            grid: Grid::default(),
            preprocess: PreprocessSection::default(),
            augment: AugmentSpec::default(),
            generator: GeneratorSection::default(),
            critic: CriticSection::default(),
            schedule: TrainingSchedule::default(),
            optimizer: OptimizerConfig::default(),
            noise: NoiseConfig::default(),
            training: TrainingSection::default(),
            analysis: TernaryParams::default(),
            overlay: OverlaySection::default(),
            evaluate: EvaluateSection::default(),
            phantom: PhantomSection::default(),
        }
    }
}

impl RunConfig {
    /// 64x64x32 grid, generator base width 16, 200 epochs. The border crop
    /// shrinks to 3 voxels because 10 would remove most of a 32-slice grid.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.grid.shape = [64, 64, 32];
        c.generator.base_width = 16;
        c.schedule.total_epochs = 200;
        c.analysis.crop = 3;
        c
    }

    /// `base` overlaid with the document at `path` (TOML unless the extension
    /// is `.json`). Keys absent from the document keep `base`'s values.
    pub fn load(path: &Path, base: RunConfig) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config("--config", format!("cannot read {}: {e}", path.display())))?;
        let doc: Value = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| CliError::config("--config", format!("{}: {e}", path.display())))?
        } else {
            let t: toml::Value =
                toml::from_str(&text).map_err(|e| CliError::config("--config", format!("{}: {e}", path.display())))?;
            serde_json::to_value(t).expect("toml values map to json")
        };
        Self::overlay(base, doc)
    }

    pub fn overlay(base: RunConfig, doc: Value) -> Result<Self, CliError> {
        let mut merged = serde_json::to_value(&base).expect("config serialises");
        merge(&mut merged, doc);
        serde_path_to_error::deserialize(merged).map_err(|e| {
            let field = e.path().to_string();
            CliError::config(&field, e.into_inner().to_string())
        })
    }

    pub fn shape(&self) -> Shape {
        Shape(self.grid.shape)
    }

    pub fn plane(&self) -> (usize, usize) {
        (self.grid.shape[1], self.grid.shape[0])
    }

    pub fn train_config(&self) -> TrainConfig {
        let plane = self.plane();
        TrainConfig {
            generator: GeneratorConfig {
                depth: self.generator.depth,
                base_width: self.generator.base_width,
                input_size: plane,
            },
            critic: CriticConfig {
                depth: self.critic.depth,
                base_width: self.critic.base_width,
                input_size: plane,
                leaky_slope: self.critic.leaky_slope,
            },
            schedule: self.schedule,
            optimizer: self.optimizer,
            augment: self.augment,
            augment_t2: self.training.augment_t2,
            noise: self.noise,
            zero_init_head: self.training.zero_init_head,
        }
    }

    pub fn overlay_style(&self) -> OverlayStyle {
        OverlayStyle { threshold: self.overlay.threshold, full_scale: self.overlay.full_scale }
    }

    /// Checks independent of any command: value ranges and network geometry.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.grid.shape.contains(&0) {
            return Err(CliError::config("grid.shape", "every extent must be positive"));
        }
        if !matches!(self.volume_ext.as_str(), ".nii" | ".nii.gz" | ".raw") {
            return Err(CliError::config("volume_ext", format!("expected .nii, .nii.gz or .raw, got {}", self.volume_ext)));
        }
        self.analysis.rano.validate().map_err(|e| CliError::config("analysis.rano", e.to_string()))?;
        self.analysis.validate().map_err(|e| CliError::config("analysis", e.to_string()))?;
        if 2 * self.analysis.crop >= *self.grid.shape.iter().min().expect("three extents") {
            return Err(CliError::config("analysis.crop", format!("crop {} leaves nothing of the grid", self.analysis.crop)));
        }
        self.augment.validate().map_err(|e| CliError::config("augment", e.to_string()))?;
        let t = self.train_config();
        t.generator.validate().map_err(|e| CliError::config("generator", e.to_string()))?;
        t.critic.validate().map_err(|e| CliError::config("critic", e.to_string()))?;
        t.schedule.validate().map_err(|e| CliError::config("schedule", e.to_string()))?;
        t.optimizer.validate().map_err(|e| CliError::config("optimizer", e.to_string()))?;
        t.noise.validate().map_err(|e| CliError::config("noise", e.to_string()))?;
        let (h, w) = self.plane();
        for &pos in &self.schedule.noise_positions {
            pairgan_train::Footprint::centred(pos, self.schedule.noise_square_px, h, w)
                .map_err(|e| CliError::config("schedule.noise_positions", e.to_string()))?;
        }
        if self.overlay.full_scale <= 0.0 {
            return Err(CliError::config("overlay.full_scale", "must be positive"));
        }
        Ok(())
    }

    /// The path at `field`, which must be set and exist.
    pub fn require(&self, field: &str, value: &Option<PathBuf>) -> Result<PathBuf, CliError> {
        let p = value.clone().ok_or_else(|| CliError::config(field, "is required for this command"))?;
        if !p.exists() {
            return Err(CliError::config(field, format!("{} does not exist", p.display())));
        }
        Ok(p)
    }

    /// An optional path that, when set, must exist.
    pub fn optional(&self, field: &str, value: &Option<PathBuf>) -> Result<Option<PathBuf>, CliError> {
        match value {
            None => Ok(None),
            Some(_) => self.require(field, value).map(Some),
        }
    }
}

fn merge(base: &mut Value, doc: Value) {
    match (base, doc) {
        (Value::Object(b), Value::Object(d)) => {
            for (k, v) in d {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_published_values() {
        let c = RunConfig::default();
        assert_eq!(c.grid.shape, [256, 256, 128]);
        assert_eq!(c.schedule.total_epochs, 1000);
        assert_eq!((c.schedule.critic_steps_normal, c.schedule.critic_steps_boosted), (5, 100));
        assert_eq!((c.analysis.tau_pos, c.analysis.tau_neg), (0.15, -0.15));
        assert_eq!((c.analysis.min_component, c.analysis.crop), (30, 10));
        assert_eq!((c.optimizer.learning_rate, c.optimizer.gp_lambda), (1e-4, 10.0));
        c.validate().unwrap();
        RunConfig::desk().validate().unwrap();
    }

    #[test]
    fn documents_override_only_what_they_name() {
        let doc = serde_json::json!({ "schedule": { "total_epochs": 50 }, "analysis": { "tau_pos": 0.2 } });
        let c = RunConfig::overlay(RunConfig::desk(), doc).unwrap();
        assert_eq!(c.schedule.total_epochs, 50);
        assert_eq!(c.schedule.critic_steps_boosted, 100);
        assert_eq!(c.analysis.tau_pos, 0.2);
        assert_eq!(c.analysis.crop, 3);
        assert_eq!(c.grid.shape, [64, 64, 32]);
    }

    #[test]
    fn errors_name_the_field() {
        let e = RunConfig::overlay(RunConfig::default(), serde_json::json!({ "schedule": { "total_epochs": "many" } }))
            .unwrap_err();
        assert!(e.to_string().contains("schedule.total_epochs"), "{e}");
        let e = RunConfig::overlay(RunConfig::default(), serde_json::json!({ "optimiser": {} })).unwrap_err();
        assert!(e.to_string().contains("optimiser"), "{e}");
        let mut c = RunConfig::desk();
        c.analysis.tau_neg = 0.1;
        assert!(c.validate().unwrap_err().to_string().contains("analysis"));
        let mut c = RunConfig::default();
        c.analysis.rano.response_drop_pct = 120;
        assert!(c.validate().unwrap_err().to_string().contains("analysis.rano"));
    }

    #[test]
    fn toml_and_json_agree() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(&t, "seed = 4\n[grid]\nshape = [32, 32, 16]\n[paths]\nt1 = \"a.nii\"\n").unwrap();
        let j = dir.path().join("c.json");
        std::fs::write(&j, r#"{"seed": 4, "grid": {"shape": [32, 32, 16]}, "paths": {"t1": "a.nii"}}"#).unwrap();
        let (a, b) = (RunConfig::load(&t, RunConfig::default()).unwrap(), RunConfig::load(&j, RunConfig::default()).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.plane(), (32, 32));
        assert_eq!(a.paths.t1, Some(PathBuf::from("a.nii")));
    }
}
