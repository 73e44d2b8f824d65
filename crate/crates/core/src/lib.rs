//! Data side of the pairgan pipeline: volumes and their file formats, the
//! preprocessing chain, random augmentation, change analysis and synthetic
//! phantoms.

pub mod analysis;
pub mod augment;
pub mod error;
pub mod io;
pub mod phantom;
pub mod preprocess;
pub mod volume;

pub use analysis::{
    auc, classify_rano, evaluate_case, roc_analysis, ternarize, volume_change, CaseReport, Connectivity, RanoAssessment, RanoThresholds,
    RanoCategory, RocCurve, RocResult, TernaryMap, TernaryParams,
};
pub use augment::{apply, apply_slice, draw, AugmentDraw, AugmentSpec};
pub use error::CoreError;
pub use io::{read_mask, read_volume, write_mask, write_volume};
pub use phantom::{generate, generate_suite, PhantomCase, PhantomSpec, PhantomTruth};
pub use preprocess::{center_brain, histogram_match, normalize_unit, resample};
pub use volume::{BrainMask, Mask, SegmentationMask, Shape, Volume};
