use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::partition::partition_reduction;
use crate::audio::MelSpectrogram;
use crate::autodiff::{RngState, Tensor};
use crate::error::{MelleError, Result};
use crate::tokenizer::{TokenSequence, PAD};

/// One transcribed utterance with its features.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub tokens: TokenSequence,
    pub mel: MelSpectrogram,
}

/// Right-padded tokens and mels for a set of utterances.
///
/// Every mel is padded to the same frame count, a multiple of `r`. Losses
/// only ever see each item's real tokens and real groups, and in-group padding
/// is masked, so extra padding never changes a loss value.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub tokens: Vec<Vec<usize>>,
    pub token_lens: Vec<usize>,
    pub mels: Vec<Tensor<f32>>,
    pub frame_lens: Vec<usize>,
    /// Per item, one entry per padded group; a single 1 at the final real group.
    pub stop_targets: Vec<Vec<f32>>,
    pub reduction_factor: usize,
}

impl TrainingBatch {
    pub fn new(items: &[&Utterance], r: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(MelleError::InvalidInput("empty batch".into()));
        }
        if r == 0 {
            return Err(MelleError::InvalidInput("reduction factor must be >= 1".into()));
        }
        let max_tokens = items.iter().map(|u| u.tokens.len()).max().unwrap_or(0);
        let max_frames = items.iter().map(|u| u.mel.n_frames()).max().unwrap_or(0);
        let mut b = Self {
            tokens: Vec::new(),
            token_lens: Vec::new(),
            mels: Vec::new(),
            frame_lens: Vec::new(),
            stop_targets: Vec::new(),
            reduction_factor: r,
        };
        for u in items {
            if u.mel.n_frames() == 0 {
                return Err(MelleError::InvalidInput(format!("utterance {} has no frames", u.id)));
            }
            let mut t = u.tokens.ids().to_vec();
            t.resize(max_tokens, PAD);
            b.tokens.push(t);
            b.token_lens.push(u.tokens.len());
            b.mels.push(u.mel.to_tensor());
            b.frame_lens.push(u.mel.n_frames());
        }
        b.pad_frames_to(max_frames)?;
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Padded frame count shared by all items.
    pub fn padded_frames(&self) -> usize {
        self.mels.first().map_or(0, Tensor::rows)
    }

    /// Real frames summed over items.
    pub fn total_frames(&self) -> usize {
        self.frame_lens.iter().sum()
    }

    /// Real decoding steps summed over items.
    pub fn total_groups(&self) -> usize {
        self.frame_lens.iter().map(|t| t.div_ceil(self.reduction_factor)).sum()
    }

    /// Extend every mel with zero frames to at least `frames` (rounded up to a multiple of `r`).
    pub fn pad_frames_to(&mut self, frames: usize) -> Result<()> {
        let r = self.reduction_factor;
        let target = frames.max(self.padded_frames()).div_ceil(r) * r;
        for (i, m) in self.mels.iter_mut().enumerate() {
            let mut data = m.data().to_vec();
            data.resize(target * crate::audio::N_MELS, 0.0);
            *m = Tensor::new(&[target, crate::audio::N_MELS], data)?;
            let real_groups = self.frame_lens[i].div_ceil(r);
            let mut s = vec![0.0; target / r];
            s[real_groups - 1] = 1.0;
            if self.stop_targets.len() <= i {
                self.stop_targets.push(s);
            } else {
                self.stop_targets[i] = s;
            }
        }
        Ok(())
    }

    /// Item `i` trimmed to its real tokens and real groups (`⌈T/r⌉ × r·80`).
    pub fn item_groups(&self, i: usize) -> Result<(Vec<usize>, super::Groups<f32>)> {
        let r = self.reduction_factor;
        let real = self.frame_lens[i];
        let frames = self.mels[i].slice_rows(0, real);
        let groups = partition_reduction(&frames, r)?;
        Ok((self.tokens[i][..self.token_lens[i]].to_vec(), groups))
    }
}

/// Length-sorted batches holding at most `batch_frames` real frames each
/// (a single longer utterance still gets a batch of its own).
pub fn make_batches(utts: &[Utterance], batch_frames: usize, r: usize) -> Result<Vec<TrainingBatch>> {
    if utts.is_empty() {
        return Err(MelleError::InvalidInput("no training utterances".into()));
    }
    let mut order: Vec<usize> = (0..utts.len()).collect();
    order.sort_by_key(|&i| (utts[i].mel.n_frames(), i));
    let mut batches = Vec::new();
    let mut cur: Vec<&Utterance> = Vec::new();
    let mut frames = 0;
    for i in order {
        let n = utts[i].mel.n_frames();
        if !cur.is_empty() && frames + n > batch_frames {
            batches.push(TrainingBatch::new(&cur, r)?);
            cur.clear();
            frames = 0;
        }
        cur.push(&utts[i]);
        frames += n;
    }
    batches.push(TrainingBatch::new(&cur, r)?);
    Ok(batches)
}

/// Seeded permutation of `0..n` for one pass over the batches.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = RngState::new(seed).split_named("batch_order").split(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(rng.next_u64()));
    order
}
