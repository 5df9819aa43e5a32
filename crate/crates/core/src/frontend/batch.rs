use rand::Rng;

use super::corpus::{Token, Utterance};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// A padded mixed-language minibatch.
#[derive(Clone, Debug)]
pub struct Batch<T = f32> {
    /// `[B, T, d]`, zero beyond each utterance's length.
    pub features: Tensor<T>,
    pub feature_lengths: Vec<usize>,
    /// `[B, K]`; row `b` is the indicator of utterance `b`'s language.
    pub language_onehot: Tensor<T>,
    /// `[B, U]` row-major, padded with the pad token.
    pub targets: Vec<Token>,
    pub target_lengths: Vec<usize>,
    pub max_target_len: usize,
    pub utterance_ids: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn size(&self) -> usize {
        self.feature_lengths.len()
    }

    pub fn frames(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn num_languages(&self) -> usize {
        self.language_onehot.shape()[1]
    }

    pub fn target(&self, b: usize) -> &[Token] {
        let start = b * self.max_target_len;
        &self.targets[start..start + self.target_lengths[b]]
    }
}

/// Pads utterances (already in model-input feature space) into one batch.
pub fn make_batch<T: Scalar>(
    utterances: &[&Utterance<T>],
    num_languages: usize,
    pad_token: Token,
) -> Result<Batch<T>> {
    let Some(first) = utterances.first() else {
        return Err(Error::Contract("make_batch on an empty utterance list".into()));
    };
    let d = first.dim();
    let b = utterances.len();
    let t_max = utterances.iter().map(|u| u.frames()).max().unwrap_or(0);
    let u_max = utterances.iter().map(|u| u.transcript.len()).max().unwrap_or(0);
    let mut features = vec![T::zero(); b * t_max * d];
    let mut onehot = vec![T::zero(); b * num_languages];
    let mut targets = vec![pad_token; b * u_max];
    for (i, u) in utterances.iter().enumerate() {
        if u.dim() != d {
            return Err(Error::Dimension(format!(
                "utterance {} has feature dim {}, batch uses {d}",
                u.id,
                u.dim()
            )));
        }
        if u.language_id >= num_languages {
            return Err(Error::Range(format!(
                "utterance {} language {} >= {num_languages}",
                u.id, u.language_id
            )));
        }
        features[i * t_max * d..][..u.frames() * d].copy_from_slice(u.features.data());
        onehot[i * num_languages + u.language_id] = T::one();
        targets[i * u_max..][..u.transcript.len()].copy_from_slice(&u.transcript);
    }
    Ok(Batch {
        features: Tensor::new(vec![b, t_max, d], features)?,
        feature_lengths: utterances.iter().map(|u| u.frames()).collect(),
        language_onehot: Tensor::new(vec![b, num_languages], onehot)?,
        targets,
        target_lengths: utterances.iter().map(|u| u.transcript.len()).collect(),
        max_target_len: u_max,
        utterance_ids: utterances.iter().map(|u| u.id).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingMode {
    /// Each batch slot first picks a language uniformly.
    Uniform,
    /// Slots pick utterances uniformly from the pooled data.
    Proportional,
}

/// Draws mixed-language batches of utterance indices.
pub struct LanguageSampler {
    by_language: Vec<Vec<usize>>,
    total: usize,
    mode: SamplingMode,
}

impl LanguageSampler {
    pub fn new<T: Scalar>(pool: &[Utterance<T>], mode: SamplingMode) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::Data("cannot sample from an empty training pool".into()));
        }
        let k = pool.iter().map(|u| u.language_id).max().unwrap_or(0) + 1;
        let mut by_language = vec![Vec::new(); k];
        for (i, u) in pool.iter().enumerate() {
            by_language[u.language_id].push(i);
        }
        by_language.retain(|v| !v.is_empty());
        Ok(Self {
            by_language,
            total: pool.len(),
            mode,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<usize> {
        (0..batch_size)
            .map(|_| match self.mode {
                SamplingMode::Uniform => {
                    let lang = &self.by_language[rng.gen_range(0..self.by_language.len())];
                    lang[rng.gen_range(0..lang.len())]
                }
                SamplingMode::Proportional => rng.gen_range(0..self.total),
            })
            .collect()
    }
}
