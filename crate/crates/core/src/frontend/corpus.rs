use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{lit, Scalar, Tensor};
use crate::rng::stream;

pub type Token = usize;

/// One utterance: raw feature frames plus its language and transcript.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance<T = f32> {
    /// Corpus-unique identifier; also the tie-breaker when ranking.
    pub id: usize,
    /// `[frames, dim]`.
    pub features: Tensor<T>,
    pub language_id: usize,
    /// Empty exactly when the utterance is unlabeled.
    pub transcript: Vec<Token>,
    pub supervised: bool,
}

impl<T: Scalar> Utterance<T> {
    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn with_transcript(&self, transcript: Vec<Token>) -> Self {
        Self {
            transcript,
            supervised: true,
            ..self.clone()
        }
    }
}

/// Generative description of one synthetic language.
#[derive(Clone, Debug)]
pub struct LanguageSpec<T = f32> {
    pub language_id: usize,
    /// `[vocab, dim]`: the mean feature frame emitted for each token.
    pub emission_means: Tensor<T>,
    pub noise_scale: f64,
    pub supervised_count: usize,
    pub unlabeled_count: usize,
    pub test_count: usize,
}

/// Transcript and duration ranges shared by every language.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusShape {
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_frames_per_token: usize,
    pub max_frames_per_token: usize,
}

impl Default for CorpusShape {
    fn default() -> Self {
        Self {
            min_tokens: 2,
            max_tokens: 5,
            min_frames_per_token: 6,
            max_frames_per_token: 10,
        }
    }
}

/// Labeled, unlabeled and held-out test utterances.
#[derive(Clone, Debug, Default)]
pub struct Corpus<T = f32> {
    pub supervised: Vec<Utterance<T>>,
    pub unlabeled: Vec<Utterance<T>>,
    pub test: Vec<Utterance<T>>,
    /// Generating transcripts of `unlabeled`, index-aligned. Never used for
    /// training; only for measuring pseudo-label quality.
    pub unlabeled_references: Vec<Vec<Token>>,
}

impl<T: Scalar> Corpus<T> {
    pub fn languages(&self) -> BTreeSet<usize> {
        self.supervised
            .iter()
            .chain(&self.unlabeled)
            .chain(&self.test)
            .map(|u| u.language_id)
            .collect()
    }
}

impl<T: Scalar> LanguageSpec<T> {
    pub fn vocab_size(&self) -> usize {
        self.emission_means.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.emission_means.shape()[1]
    }

    /// A family of related languages sharing one token inventory. Each
    /// language moves every token by a common acoustic shift (std
    /// `language_shift`) plus an independent per-token offset (std
    /// `token_divergence`). Tail languages additionally exchange the sounds
    /// of `tail_swaps` random token pairs, so identical acoustics mean
    /// different tokens depending on the language.
    pub fn synthetic_family(family: &FamilySpec, seed: u64) -> Vec<Self> {
        let (vocab, dim) = (family.vocab, family.dim);
        let mut base_rng = stream(seed, &[0xba5e]);
        let base: Tensor<T> = Tensor::randn(&[vocab, dim], 1.0, &mut base_rng);
        (0..family.languages)
            .map(|k| {
                let mut rng = stream(seed, &[0x1a46, k as u64]);
                let shift: Tensor<T> = Tensor::randn(&[dim], family.language_shift, &mut rng);
                let offset: Tensor<T> = Tensor::randn(&[vocab, dim], family.token_divergence, &mut rng);
                let mut means = base.clone();
                means.add_assign(&offset);
                for v in 0..vocab {
                    means.row_mut(v).iter_mut().zip(shift.data()).for_each(|(m, s)| *m += *s);
                }
                let head = k < family.head_languages;
                if !head {
                    let tokens = rand::seq::index::sample(&mut rng, vocab, (2 * family.tail_swaps).min(vocab));
                    let tokens = tokens.into_vec();
                    for pair in tokens.chunks_exact(2) {
                        let (a, b) = (means.row(pair[0]).to_vec(), means.row(pair[1]).to_vec());
                        means.row_mut(pair[0]).copy_from_slice(&b);
                        means.row_mut(pair[1]).copy_from_slice(&a);
                    }
                }
                LanguageSpec {
                    language_id: k,
                    emission_means: means,
                    noise_scale: family.noise_scale,
                    supervised_count: if head { family.supervised_head } else { family.supervised_tail },
                    unlabeled_count: family.unlabeled,
                    test_count: family.test,
                }
            })
            .collect()
    }
}

/// Parameters of [`LanguageSpec::synthetic_family`]. The first
/// `head_languages` languages are data-rich, the rest are tail languages.
#[derive(Clone, Debug, PartialEq)]
pub struct FamilySpec {
    pub languages: usize,
    pub head_languages: usize,
    pub vocab: usize,
    pub dim: usize,
    pub language_shift: f64,
    pub token_divergence: f64,
    pub noise_scale: f64,
    pub tail_swaps: usize,
    pub supervised_head: usize,
    pub supervised_tail: usize,
    pub unlabeled: usize,
    pub test: usize,
}

impl Default for FamilySpec {
    /// Four languages, two of them head languages with 20× the labeled data.
    fn default() -> Self {
        Self {
            languages: 4,
            head_languages: 2,
            vocab: 32,
            dim: 32,
            language_shift: 0.5,
            token_divergence: 0.3,
            noise_scale: 0.5,
            tail_swaps: 4,
            supervised_head: 400,
            supervised_tail: 20,
            unlabeled: 100,
            test: 40,
        }
    }
}

const SPLIT_SUPERVISED: u64 = 1;
const SPLIT_UNLABELED: u64 = 2;
const SPLIT_TEST: u64 = 3;

fn sample_utterance<T: Scalar>(
    spec: &LanguageSpec<T>,
    shape: &CorpusShape,
    seed: u64,
    split: u64,
    index: usize,
) -> (Vec<Token>, Tensor<T>) {
    let mut rng = stream(seed, &[spec.language_id as u64, split, index as u64]);
    let vocab = spec.vocab_size();
    let dim = spec.dim();
    let n = rng.gen_range(shape.min_tokens..=shape.max_tokens);
    let mut transcript = Vec::with_capacity(n);
    while transcript.len() < n {
        let tok = rng.gen_range(0..vocab);
        // Adjacent repeats would be indistinguishable from one long token.
        if transcript.last() != Some(&tok) || vocab == 1 {
            transcript.push(tok);
        }
    }
    let mut frames = Vec::new();
    for &tok in &transcript {
        let len = rng.gen_range(shape.min_frames_per_token..=shape.max_frames_per_token);
        let mean = spec.emission_means.row(tok);
        for _ in 0..len {
            for &m in mean {
                let z: f64 = rng.sample(StandardNormal);
                frames.push(m + lit::<T>(z * spec.noise_scale));
            }
        }
    }
    let t = frames.len() / dim.max(1);
    let features = Tensor::new(vec![t, dim], frames).expect("frame buffer matches shape");
    (transcript, features)
}

/// Draws every language's labeled, unlabeled and test utterances.
pub fn generate_corpus<T: Scalar>(
    specs: &[LanguageSpec<T>],
    shape: &CorpusShape,
    seed: u64,
) -> Result<Corpus<T>> {
    if specs.is_empty() {
        return Err(Error::Config("corpus needs at least one language".into()));
    }
    if shape.min_tokens == 0
        || shape.min_tokens > shape.max_tokens
        || shape.min_frames_per_token == 0
        || shape.min_frames_per_token > shape.max_frames_per_token
    {
        return Err(Error::Config(format!("invalid corpus shape {shape:?}")));
    }
    let mut seen = BTreeSet::new();
    for s in specs {
        if !seen.insert(s.language_id) {
            return Err(Error::Config(format!("duplicate language id {}", s.language_id)));
        }
        if s.dim() != specs[0].dim() {
            return Err(Error::Config("languages disagree on feature dimension".into()));
        }
    }
    let mut corpus = Corpus::default();
    let mut next_id = 0;
    let mut make = |spec: &LanguageSpec<T>, split: u64, i: usize, labeled: bool| {
        let (transcript, features) = sample_utterance(spec, shape, seed, split, i);
        let id = next_id;
        next_id += 1;
        let utt = Utterance {
            id,
            features,
            language_id: spec.language_id,
            transcript: if labeled { transcript.clone() } else { Vec::new() },
            supervised: labeled,
        };
        (utt, transcript)
    };
    for spec in specs {
        for i in 0..spec.supervised_count {
            corpus.supervised.push(make(spec, SPLIT_SUPERVISED, i, true).0);
        }
    }
    for spec in specs {
        for i in 0..spec.unlabeled_count {
            let (utt, reference) = make(spec, SPLIT_UNLABELED, i, false);
            corpus.unlabeled.push(utt);
            corpus.unlabeled_references.push(reference);
        }
    }
    for spec in specs {
        for i in 0..spec.test_count {
            corpus.test.push(make(spec, SPLIT_TEST, i, true).0);
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(id: usize, noise: f64, sup: usize, unl: usize) -> LanguageSpec<f32> {
        let means = Tensor::new(
            vec![4, 3],
            (0..12).map(|v| v as f32 + 10.0 * id as f32).collect(),
        )
        .unwrap();
        LanguageSpec {
            language_id: id,
            emission_means: means,
            noise_scale: noise,
            supervised_count: sup,
            unlabeled_count: unl,
            test_count: 1,
        }
    }

    #[test]
    fn noiseless_single_token_reproduces_mean() {
        let shape = CorpusShape {
            min_tokens: 1,
            max_tokens: 1,
            min_frames_per_token: 3,
            max_frames_per_token: 3,
        };
        let c = generate_corpus(&[spec(0, 0.0, 5, 0)], &shape, 7).unwrap();
        let means = spec(0, 0.0, 0, 0).emission_means;
        for u in &c.supervised {
            assert_eq!(u.transcript.len(), 1);
            let tok = u.transcript[0];
            for f in 0..u.frames() {
                assert_eq!(u.features.row(f), means.row(tok));
            }
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let specs = [spec(0, 0.5, 3, 2), spec(1, 0.5, 2, 2)];
        let a = generate_corpus(&specs, &CorpusShape::default(), 11).unwrap();
        let b = generate_corpus(&specs, &CorpusShape::default(), 11).unwrap();
        for (x, y) in a.supervised.iter().chain(&a.unlabeled).zip(b.supervised.iter().chain(&b.unlabeled)) {
            assert!(x.features.bit_eq(&y.features));
            assert_eq!(x.transcript, y.transcript);
        }
        let c = generate_corpus(&specs, &CorpusShape::default(), 12).unwrap();
        assert_ne!(a.supervised[0].features, c.supervised[0].features);
    }

    #[test]
    fn counts_are_honored() {
        let c = generate_corpus(&[spec(0, 0.1, 4, 8)], &CorpusShape::default(), 1).unwrap();
        assert_eq!(c.supervised.len(), 4);
        assert_eq!(c.unlabeled.len(), 8);
        assert!(c.supervised.iter().all(|u| u.supervised && !u.transcript.is_empty()));
        assert!(c.unlabeled.iter().all(|u| !u.supervised && u.transcript.is_empty()));
        assert_eq!(c.unlabeled_references.len(), 8);
    }

    #[test]
    fn duplicate_language_rejected() {
        let err = generate_corpus(&[spec(1, 0.0, 1, 0), spec(1, 0.0, 1, 0)], &CorpusShape::default(), 0)
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn no_adjacent_repeats() {
        let c = generate_corpus(&[spec(0, 0.0, 50, 0)], &CorpusShape::default(), 3).unwrap();
        for u in &c.supervised {
            assert!(u.transcript.windows(2).all(|w| w[0] != w[1]));
        }
    }

    #[test]
    fn family_puts_tail_languages_last() {
        let specs = LanguageSpec::<f32>::synthetic_family(
            &FamilySpec {
                vocab: 8,
                dim: 4,
                language_shift: 0.5,
                noise_scale: 0.1,
                supervised_head: 40,
                supervised_tail: 2,
                unlabeled: 5,
                test: 3,
                ..FamilySpec::default()
            },
            9,
        );
        let counts: Vec<_> = specs.iter().map(|s| s.supervised_count).collect();
        assert_eq!(counts, vec![40, 40, 2, 2]);
        assert_ne!(specs[0].emission_means, specs[1].emission_means);
    }
}
