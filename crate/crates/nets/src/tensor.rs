//! Activation storage.
//!
//! Internally every activation is laid out channel-major (`C, N, H, W`) so a
//! convolution is a single GEMM against the im2col matrix of the whole batch
//! and per-channel statistics run over contiguous memory. The public
//! [`SliceBatch`] is the usual `(N, 1, H, W)` batch; with one channel the two
//! layouts coincide.

use crate::error::NetError;
use crate::scalar::Real;

/// Channel-major feature map `(C, N, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Feat<T> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Feat<T> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self { c, n, h, w, data: vec![T::zero(); c * n * h * w] }
    }

    pub fn from_vec(c: usize, n: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * n * h * w, "feature map extent mismatch");
        Self { c, n, h, w, data }
    }

    /// Elements per channel (`N * H * W`).
    #[inline]
    pub fn plane(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.c == other.c && self.n == other.n && self.h == other.h && self.w == other.w
    }

    /// Stack `self` and `other` along the channel axis.
    pub fn concat_channels(&self, other: &Self) -> Self {
        assert!(self.n == other.n && self.h == other.h && self.w == other.w);
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Self { c: self.c + other.c, n: self.n, h: self.h, w: self.w, data }
    }

    /// Inverse of [`Feat::concat_channels`]: the first `c_first` channels and the rest.
    pub fn split_channels(&self, c_first: usize) -> (Self, Self) {
        assert!(c_first <= self.c);
        let cut = c_first * self.plane();
        (
            Self { c: c_first, n: self.n, h: self.h, w: self.w, data: self.data[..cut].to_vec() },
            Self { c: self.c - c_first, n: self.n, h: self.h, w: self.w, data: self.data[cut..].to_vec() },
        )
    }

    /// Concatenate along the batch axis.
    pub fn concat_batch(&self, other: &Self) -> Self {
        assert!(self.c == other.c && self.h == other.h && self.w == other.w);
        let (pa, pb) = (self.plane(), other.plane());
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        for c in 0..self.c {
            data.extend_from_slice(&self.data[c * pa..(c + 1) * pa]);
            data.extend_from_slice(&other.data[c * pb..(c + 1) * pb]);
        }
        Self { c: self.c, n: self.n + other.n, h: self.h, w: self.w, data }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A batch of single-channel slices, `(N, 1, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceBatch<T> {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
}

impl<T: Real> SliceBatch<T> {
    pub fn new(batch: usize, height: usize, width: usize, values: Vec<T>) -> Result<Self, NetError> {
        if values.len() != batch * height * width {
            return Err(NetError::Shape(format!(
                "slice batch ({batch},1,{height},{width}) needs {} values, got {}",
                batch * height * width,
                values.len()
            )));
        }
        Ok(Self { batch, height, width, values })
    }

    pub fn zeros(batch: usize, height: usize, width: usize) -> Self {
        Self { batch, height, width, values: vec![T::zero(); batch * height * width] }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.batch, 1, self.height, self.width]
    }

    pub fn item(&self, i: usize) -> &[T] {
        let p = self.height * self.width;
        &self.values[i * p..(i + 1) * p]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [T] {
        let p = self.height * self.width;
        &mut self.values[i * p..(i + 1) * p]
    }

    pub fn to_feat(&self) -> Feat<T> {
        Feat::from_vec(1, self.batch, self.height, self.width, self.values.clone())
    }

    pub fn from_feat(f: Feat<T>) -> Self {
        assert_eq!(f.c, 1, "slice batches carry one channel");
        Self { batch: f.n, height: f.h, width: f.w, values: f.data }
    }
}

/// Elementwise `x + m`, no clamping. This is how a fake follow-up slice is
/// formed from a baseline slice and its change map.
pub fn fake_t2<T: Real>(x: &SliceBatch<T>, m: &SliceBatch<T>) -> Result<SliceBatch<T>, NetError> {
    if x.shape() != m.shape() {
        return Err(NetError::Shape(format!(
            "fake_t2 operands differ: {:?} vs {:?}",
            x.shape(),
            m.shape()
        )));
    }
    let values = x.values.iter().zip(&m.values).map(|(&a, &b)| a + b).collect();
    Ok(SliceBatch { batch: x.batch, height: x.height, width: x.width, values })
}
