//! Tracklet datasets: synthetic generation, image manifests and splits.

pub mod manifest;
pub mod split;
pub mod synthetic;

use std::collections::BTreeSet;

use rand::Rng;

pub use manifest::{export_manifest, load_manifest};
pub use split::{split, Split};
pub use synthetic::{generate, redundancy_probe, SyntheticConfig, World};

use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameKind {
    /// Freshly rendered (or loaded) frame.
    Distinct,
    /// Near-copy of the previous frame.
    Duplicate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameFlags {
    pub kind: FrameKind,
    pub occluded: bool,
}

impl Default for FrameFlags {
    fn default() -> Self {
        Self {
            kind: FrameKind::Distinct,
            occluded: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackletRecord {
    pub id: String,
    pub identity: u32,
    pub camera: u32,
    /// `[L × C × H × W]`, values in `[0, 1]`.
    pub frames: Tensor,
    /// One entry per frame.
    pub flags: Vec<FrameFlags>,
}

impl TrackletRecord {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Frames at the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Tensor> {
        let s = self.frames.shape();
        let n: usize = s[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&self.frames.data()[i * n..(i + 1) * n]);
        }
        let mut shape = s.to_vec();
        shape[0] = indices.len();
        Ok(Tensor::new(shape, data)?)
    }

    /// Frames at `indices` as model input: pixels shifted by
    /// [`PIXEL_MEAN`] so they are centered on zero.
    pub fn model_input(&self, indices: &[usize]) -> Result<Tensor> {
        Ok(center_pixels(&self.select(indices)?))
    }
}

/// Value subtracted from every `[0, 1]` pixel before it enters the backbone.
pub const PIXEL_MEAN: f64 = 0.5;

pub fn center_pixels(frames: &Tensor) -> Tensor {
    let data = frames.data().iter().map(|p| p - PIXEL_MEAN).collect();
    Tensor::new(frames.shape().to_vec(), data).expect("same shape")
}

/// `count` indices spread evenly over `0..len`; all of them when `len ≤ count`.
pub fn evenly_spaced(len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    (0..count).map(|i| (2 * i + 1) * len / (2 * count)).collect()
}

/// A random contiguous chunk of `count` indices; all of them when `len ≤ count`.
pub fn random_chunk<R: Rng + ?Sized>(len: usize, count: usize, rng: &mut R) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    let start = rng.random_range(0..=len - count);
    (start..start + count).collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub tracklets: Vec<TrackletRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.tracklets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracklets.is_empty()
    }

    /// Distinct identity labels, ascending.
    pub fn identities(&self) -> Vec<u32> {
        self.tracklets.iter().map(|t| t.identity).collect::<BTreeSet<_>>().into_iter().collect()
    }
}
