//! A complete transducer: cascaded encoder, language-dependent adapters,
//! prediction and joint networks, all in one named parameter store.

use crate::backbone::{self, encode_cascaded, Pass};
use crate::error::{Error, Result};
use crate::frontend::Batch;
use crate::lda;
use crate::model_config::ModelConfig;
use crate::numerics::{ParamBinder, ParamStore, Scalar, Tape, Tensor};
use crate::rng::stream;
use crate::transducer::{self, beam_decode, greedy_decode, DecoderView, Hypothesis, TokenLm};

/// Labels a decoder may emit on one frame before it is forced onward.
pub const MAX_SYMBOLS_PER_FRAME: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    /// Optimizer steps that produced these weights.
    pub step: u64,
}

impl<T: Scalar> Model<T> {
    /// Fresh weights; adapters start as exact identities (zero up-projection).
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        backbone::init_backbone(&config, &mut params, &mut stream(seed, &[1]));
        lda::init_adapters(&config, &mut params, &mut stream(seed, &[2]));
        transducer::init_transducer(&config, &mut params, &mut stream(seed, &[3]));
        Ok(Self { config, params, step: 0 })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            step: self.step,
        }
    }

    fn has_adapters(&self) -> bool {
        self.params.names().any(|n| lda::is_adapter_param(n))
    }

    /// Both encoder passes for a batch, `[B, T, d]` each, with adapters
    /// routed by the batch's language rows when the model carries them.
    pub fn encode(&self, batch: &Batch<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let frozen = |_: &str| false;
        let mut binder = ParamBinder::new(&self.params, &frozen);
        let mut tape = Tape::new();
        let x = tape.constant(batch.features.clone());
        let langs = self.languages(batch)?;
        let (a, b) = encode_cascaded(&mut tape, &mut binder, &self.config, x, &batch.feature_lengths, langs.as_deref())?;
        Ok((tape.value(a).clone(), tape.value(b).clone()))
    }

    pub(crate) fn languages(&self, batch: &Batch<T>) -> Result<Option<Vec<usize>>> {
        if batch.num_languages() != self.config.num_languages {
            return Err(Error::Range(format!(
                "batch has {} language columns, model serves {}",
                batch.num_languages(),
                self.config.num_languages
            )));
        }
        let langs = lda::language_indices(&batch.language_onehot, self.config.num_languages)?;
        Ok(self.has_adapters().then_some(langs))
    }

    pub fn decoder(&self) -> Result<DecoderView<'_, T>> {
        DecoderView::new(&self.config, &self.params)
    }

    /// Greedy hypotheses for every utterance of `batch` from one pass.
    pub fn greedy_batch(&self, batch: &Batch<T>, pass: Pass) -> Result<Vec<Hypothesis>> {
        let encoded = self.encode(batch)?;
        let view = self.decoder()?;
        (0..batch.size())
            .map(|b| greedy_decode(&view, &utterance_frames(pass_output(&encoded, pass), b, batch.feature_lengths[b])?, MAX_SYMBOLS_PER_FRAME))
            .collect()
    }

    /// Beam hypotheses (best first) for every utterance of `batch`.
    pub fn beam_batch(
        &self,
        batch: &Batch<T>,
        pass: Pass,
        beam_width: usize,
        lm: Option<&dyn TokenLm>,
        lm_weight: f64,
    ) -> Result<Vec<Vec<Hypothesis>>> {
        let encoded = self.encode(batch)?;
        let view = self.decoder()?;
        (0..batch.size())
            .map(|b| {
                let frames = utterance_frames(pass_output(&encoded, pass), b, batch.feature_lengths[b])?;
                beam_decode(&view, &frames, beam_width, MAX_SYMBOLS_PER_FRAME, lm, lm_weight)
            })
            .collect()
    }
}

fn pass_output<T>(encoded: &(Tensor<T>, Tensor<T>), pass: Pass) -> &Tensor<T> {
    match pass {
        Pass::First => &encoded.0,
        Pass::Second => &encoded.1,
    }
}

/// The first `len` frames of utterance `b` of `x[B, T, d]`, as `[len, d]`.
pub fn utterance_frames<T: Scalar>(x: &Tensor<T>, b: usize, len: usize) -> Result<Tensor<T>> {
    let (t, d) = (x.shape()[1], x.shape()[2]);
    if len > t {
        return Err(Error::Dimension(format!("{len} frames requested from {t}")));
    }
    Tensor::new(vec![len, d], x.data()[b * t * d..][..len * d].to_vec())
}
