//! Synthetic multilingual corpus, feature assembly and mixed-language batching.

mod augment;
mod batch;
mod corpus;
mod io;

pub use augment::{frame_stack, spec_augment, FeaturePipeline, SpecAugmentConfig};
pub use batch::{make_batch, Batch, LanguageSampler, SamplingMode};
pub use corpus::{generate_corpus, Corpus, CorpusShape, FamilySpec, LanguageSpec, Token, Utterance};
pub use io::{read_corpus, write_corpus, MANIFEST, TEST_MANIFEST};
