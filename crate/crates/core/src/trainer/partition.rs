use crate::autodiff::{Real, Tensor};
use crate::error::{MelleError, Result};

/// Frames grouped `r` at a time: `⌈T/r⌉ × (r·n_mels)`, last group zero-padded.
#[derive(Debug, Clone, PartialEq)]
pub struct Groups<T> {
    pub groups: Tensor<T>,
    /// Real frames before padding.
    pub n_frames: usize,
    pub reduction_factor: usize,
}

impl<T: Real> Groups<T> {
    pub fn n_groups(&self) -> usize {
        self.groups.rows()
    }

    /// Per-element validity over the padded frame grid (`⌈T/r⌉·r × n_mels`), 1 for real frames.
    pub fn frame_mask(&self) -> Vec<T> {
        let n_mels = self.groups.cols() / self.reduction_factor;
        let total = self.n_groups() * self.reduction_factor;
        (0..total)
            .flat_map(|t| {
                let v = if t < self.n_frames { T::one() } else { T::zero() };
                std::iter::repeat_n(v, n_mels)
            })
            .collect()
    }

    /// Padded frames `⌈T/r⌉·r × n_mels` (same memory layout as the groups).
    pub fn padded_frames(&self) -> Tensor<T> {
        let n_mels = self.groups.cols() / self.reduction_factor;
        self.groups
            .clone()
            .reshape(&[self.n_groups() * self.reduction_factor, n_mels])
            .expect("groups are r frames wide")
    }

    /// Inverse of [`partition_reduction`]: the real frames only.
    pub fn ungroup(&self) -> Tensor<T> {
        self.padded_frames().slice_rows(0, self.n_frames)
    }
}

/// Partition `frames: T × n_mels` into contiguous, non-overlapping groups of `r` frames.
pub fn partition_reduction<T: Real>(frames: &Tensor<T>, r: usize) -> Result<Groups<T>> {
    if r == 0 {
        return Err(MelleError::InvalidInput("reduction factor must be >= 1".into()));
    }
    if frames.shape().len() != 2 {
        return Err(MelleError::shape(
            "partition_reduction",
            format!("expected T × n_mels, got {:?}", frames.shape()),
        ));
    }
    let (t, m) = (frames.rows(), frames.cols());
    let n = t.div_ceil(r);
    let mut data = frames.data().to_vec();
    data.resize(n * r * m, T::zero());
    Ok(Groups {
        groups: Tensor::new(&[n, r * m], data)?,
        n_frames: t,
        reduction_factor: r,
    })
}
