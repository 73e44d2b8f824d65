//! Flat description of a network's layer sequence, used for structural checks
//! and written into checkpoint headers.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    ConvTranspose,
    BatchNorm,
    Relu,
    LeakyRelu,
    MaxPool,
    Concat,
    SpatialMean,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Spatial extent of the layer output.
    pub out_hw: (usize, usize),
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind, in_ch: usize, out_ch: usize, out_hw: (usize, usize)) -> Self {
        Self { name: name.into(), kind, in_ch, out_ch, kernel: 0, stride: 1, out_hw }
    }

    pub fn kernel(mut self, k: usize, stride: usize) -> Self {
        self.kernel = k;
        self.stride = stride;
        self
    }
}
