//! Personalised change-map training on a single image pair and whole-volume
//! inference.
//!
//! A WGAN-GP generator learns an additive map `M` with `t1 + M` looking like
//! the follow-up scan to a critic. Training runs slice-wise over augmented
//! views, a smoothed noise square is moved through three positions, and the
//! generator is saved at each move and at the end. Those four states form the
//! ensemble whose masked mean is the final change map.

mod alloc;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod inference;
pub mod noise;
pub mod overlay;
pub mod schedule;
pub mod trainer;

pub use data::PairData;
pub use ensemble::{CheckpointEnsemble, EnsembleMember};
pub use error::TrainError;
pub use inference::{ensemble_map, predict_map, ChangeMap};
pub use noise::{apply_noise_square, Footprint, NoiseConfig, NoiseSquare, NoiseTarget};
pub use overlay::{render_overlays, OverlayStyle};
pub use schedule::{OptimizerConfig, TrainingSchedule};
pub use trainer::{
    critic_step, epoch, generator_step, history_csv, run_training, CriticDiagnostics, EpochStats, GeneratorDiagnostics,
    Observer, TrainConfig, TrainState, TrainingOutcome,
};
