use rand::Rng;

use super::corpus::Utterance;
use crate::numerics::{Scalar, Tensor};
use crate::rng::stream;

/// Concatenates `factor` consecutive frames into one. A trailing partial
/// window is zero-padded.
pub fn frame_stack<T: Scalar>(features: &Tensor<T>, factor: usize) -> Tensor<T> {
    let factor = factor.max(1);
    let (t_raw, d) = (features.shape()[0], features.shape()[1]);
    let t = t_raw.div_ceil(factor);
    let mut out = vec![T::zero(); t * factor * d];
    out[..t_raw * d].copy_from_slice(features.data());
    Tensor::new(vec![t, factor * d], out).expect("stacked shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpecAugmentConfig {
    pub freq_masks: usize,
    pub max_freq_len: usize,
    pub time_masks: usize,
    pub max_time_len: usize,
}

impl SpecAugmentConfig {
    /// Masking used with 128-dim filterbanks.
    pub fn full_scale() -> Self {
        Self {
            freq_masks: 2,
            max_freq_len: 27,
            time_masks: 2,
            max_time_len: 50,
        }
    }

    /// Masking scaled down for the 32-dim synthetic corpus.
    pub fn desk_scale() -> Self {
        Self {
            freq_masks: 2,
            max_freq_len: 7,
            time_masks: 2,
            max_time_len: 4,
        }
    }

    pub fn disabled() -> Self {
        Self {
            freq_masks: 0,
            max_freq_len: 0,
            time_masks: 0,
            max_time_len: 0,
        }
    }
}

/// Zeroes random frequency bands and time spans of `features[T, d]`.
pub fn spec_augment<T: Scalar>(features: &Tensor<T>, cfg: &SpecAugmentConfig, seed: u64) -> Tensor<T> {
    let mut out = features.clone();
    let (t, d) = (features.shape()[0], features.shape()[1]);
    let mut rng = stream(seed, &[0x5bec]);
    for _ in 0..cfg.freq_masks {
        let width = rng.gen_range(0..=cfg.max_freq_len.min(d));
        let start = rng.gen_range(0..=d - width);
        for f in 0..t {
            out.row_mut(f)[start..start + width].iter_mut().for_each(|v| *v = T::zero());
        }
    }
    for _ in 0..cfg.time_masks {
        let width = rng.gen_range(0..=cfg.max_time_len.min(t));
        let start = rng.gen_range(0..=t - width);
        for f in start..start + width {
            out.row_mut(f).iter_mut().for_each(|v| *v = T::zero());
        }
    }
    out
}

/// Raw frames → model input frames, with optional training-time masking.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePipeline {
    pub stack_factor: usize,
    pub spec_augment: Option<SpecAugmentConfig>,
    /// Mask raw frames (true) or stacked frames (false).
    pub augment_before_stack: bool,
}

impl FeaturePipeline {
    /// Stacked features for evaluation; never masks.
    pub fn prepare<T: Scalar>(&self, utt: &Utterance<T>) -> Utterance<T> {
        Utterance {
            features: frame_stack(&utt.features, self.stack_factor),
            ..utt.clone()
        }
    }

    /// Stacked features for training; masks when SpecAugment is configured.
    pub fn prepare_train<T: Scalar>(&self, utt: &Utterance<T>, seed: u64) -> Utterance<T> {
        let Some(cfg) = &self.spec_augment else {
            return self.prepare(utt);
        };
        let seed = seed ^ (utt.id as u64).rotate_left(17);
        let features = if self.augment_before_stack {
            frame_stack(&spec_augment(&utt.features, cfg, seed), self.stack_factor)
        } else {
            spec_augment(&frame_stack(&utt.features, self.stack_factor), cfg, seed)
        };
        Utterance {
            features,
            ..utt.clone()
        }
    }
}
