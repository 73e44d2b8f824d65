//! Networks for slice-wise change mapping: a U-Net generator that outputs an
//! additive map and an encoder critic scoring single slices, each with
//! hand-written forward and backward passes over `f32` or `f64`.

pub mod checkpoint;
pub mod critic;
pub mod error;
pub mod generator;
pub mod layers;
pub mod manifest;
pub mod ops;
pub mod param;
pub mod scalar;
pub mod tensor;

pub use critic::{critic_forward, Critic, CriticCache, CriticConfig, Penalty};
pub use error::NetError;
pub use generator::{generator_forward, Generator, GeneratorCache, GeneratorConfig};
pub use layers::Mode;
pub use manifest::{LayerKind, LayerSpec};
pub use param::{Adam, AdamConfig, Param, Parameterized};
pub use scalar::Real;
pub use tensor::{fake_t2, Feat, SliceBatch};
