//! Task data and evaluation: a deterministic moving-shapes sequence
//! generator for segmentation tracking and next-frame prediction, a
//! DAVIS-style directory loader/exporter, and the metrics used by both
//! tasks (region IoU, boundary F-measure, MSE/MAE/SSIM/PSNR).

pub mod davis;
pub mod error;
pub mod metrics;
pub mod synth;

pub use error::{Error, Result};
pub use synth::{gen_moving_shapes, SyntheticConfig};

use stremn_core::tensor::Tensor;

/// One video: frames in [0,1] (3×H×W) plus integer label maps for a
/// contiguous prefix of frames (all of them for synthetic data; at least
/// frame 0 for segmentation tracking, possibly none for raw prediction
/// footage).
#[derive(Clone)]
pub struct SequenceSample {
    pub name: String,
    pub frames: Vec<Tensor<f32>>,
    /// Row-major H×W label maps for frames `0..masks.len()`;
    /// 0 = background, 1..=object_count = objects.
    pub masks: Vec<Vec<u8>>,
    pub object_count: usize,
    pub seed: u64,
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn spatial(&self) -> (usize, usize) {
        let s = self.frames[0].shape();
        (s[1], s[2])
    }

    pub fn fully_annotated(&self) -> bool {
        self.masks.len() == self.frames.len()
    }

    /// Binary mask of one object label at frame `t` as 1×H×W in {0,1}.
    pub fn object_mask_tensor(&self, t: usize, label: u8) -> Option<Tensor<f32>> {
        let mask = self.masks.get(t)?;
        let (h, w) = self.spatial();
        let data: Vec<f32> = mask.iter().map(|&v| if v == label { 1.0 } else { 0.0 }).collect();
        Some(Tensor::from_vec(&[1, h, w], data).expect("mask dims"))
    }

    /// Binary mask of one object label at frame `t`.
    pub fn object_mask(&self, t: usize, label: u8) -> Option<Vec<bool>> {
        Some(self.masks.get(t)?.iter().map(|&v| v == label).collect())
    }
}
