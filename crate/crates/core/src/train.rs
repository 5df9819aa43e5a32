//! Optimization loops for the three training regimes: backbone
//! pre-training, adapter-only finetuning and full finetuning.

use std::collections::BTreeMap;

use crate::backbone::encode_cascaded;
use crate::error::{Error, Result};
use crate::frontend::{make_batch, Batch, FeaturePipeline, LanguageSampler, SamplingMode, Utterance};
use crate::lda;
use crate::model::Model;
use crate::numerics::{adam_step, lit, AdamConfig, OptimizerState, ParamBinder, Tape, Tensor};
use crate::rng::{derive_seed, stream};
use crate::transducer::{self, transducer_loss_var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Everything except adapters.
    Backbone,
    /// Only the language-dependent adapter tensors.
    Lda,
    /// Every parameter, adapters included.
    Full,
}

impl TrainMode {
    pub fn trainable(self, name: &str) -> bool {
        match self {
            TrainMode::Backbone => !lda::is_adapter_param(name),
            TrainMode::Full => true,
            TrainMode::Lda => lda::is_language_param(name),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Backbone => "backbone",
            TrainMode::Lda => "lda",
            TrainMode::Full => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub fastemit: f64,
    /// Loss weights of the causal and non-causal passes.
    pub pass_weights: [f64; 2],
    pub sampling: SamplingMode,
    pub pipeline: FeaturePipeline,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            adam: AdamConfig::default(),
            fastemit: transducer::DEFAULT_FASTEMIT,
            pass_weights: [0.5, 0.5],
            sampling: SamplingMode::Uniform,
            pipeline: FeaturePipeline {
                stack_factor: 4,
                spec_augment: None,
                augment_before_stack: true,
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub pass_losses: [f64; 2],
}

/// Weighted dual-pass transducer loss of one batch plus the gradients of
/// every parameter `mode` trains (zeros where the batch does not reach).
pub fn loss_and_grads(
    model: &Model<f32>,
    batch: &Batch<f32>,
    mode: TrainMode,
    fastemit: f64,
    pass_weights: [f64; 2],
) -> Result<(f64, [f64; 2], BTreeMap<String, Tensor<f32>>)> {
    let trainable = |n: &str| mode.trainable(n);
    let mut binder = ParamBinder::new(&model.params, &trainable);
    let mut tape = Tape::new();
    let x = tape.constant(batch.features.clone());
    let langs = model.languages(batch)?;
    let cfg = &model.config;
    let (first, second) = encode_cascaded(&mut tape, &mut binder, cfg, x, &batch.feature_lengths, langs.as_deref())?;
    let mut total = None;
    let mut pass_losses = [0.0; 2];
    for (i, enc) in [first, second].into_iter().enumerate() {
        if pass_weights[i] == 0.0 {
            continue;
        }
        let (l, _) = transducer_loss_var(&mut tape, &mut binder, cfg, enc, batch, fastemit)?;
        pass_losses[i] = f64::from(tape.value(l).item());
        let l = tape.scale(l, lit(pass_weights[i]));
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("both pass loss weights are zero".into()))?;
    let value = f64::from(tape.value(total).item());
    if !value.is_finite() {
        return Err(Error::Training(format!("non-finite loss {value}")));
    }
    let mut grads = tape.backward(total)?;
    let grads = binder.collect_grads(&tape, &mut grads);
    Ok((value, pass_losses, grads))
}

/// Holds the optimizer across steps and produces evaluation weights.
pub struct Trainer {
    pub mode: TrainMode,
    pub config: TrainConfig,
    pub state: OptimizerState<f32>,
}

impl Trainer {
    pub fn new(mode: TrainMode, config: TrainConfig) -> Self {
        let state = OptimizerState::new(config.adam.clone());
        Self { mode, config, state }
    }

    pub fn step(&mut self, model: &mut Model<f32>, batch: &Batch<f32>) -> Result<StepReport> {
        let (loss, pass_losses, grads) = loss_and_grads(model, batch, self.mode, self.config.fastemit, self.config.pass_weights)?;
        adam_step(&mut model.params, &grads, &mut self.state)?;
        model.step += 1;
        Ok(StepReport {
            step: model.step,
            loss,
            pass_losses,
        })
    }

    /// The weights to evaluate or checkpoint: EMA shadows when enabled.
    pub fn evaluation_model(&self, model: &Model<f32>) -> Model<f32> {
        Model {
            config: model.config.clone(),
            params: self.state.evaluation_weights(&model.params),
            step: model.step,
        }
    }

    /// Runs `config.steps` updates on batches sampled from `pool` (raw
    /// features). `on_step` sees the evaluation weights after each update
    /// and may stop early by returning `false`.
    pub fn run(
        &mut self,
        model: &mut Model<f32>,
        pool: &[Utterance<f32>],
        mut on_step: impl FnMut(&StepReport, &Trainer, &Model<f32>) -> Result<bool>,
    ) -> Result<Vec<StepReport>> {
        if pool.iter().any(|u| u.transcript.is_empty() && !u.supervised) {
            return Err(Error::Data("training pool contains unlabeled utterances".into()));
        }
        let sampler = LanguageSampler::new(pool, self.config.sampling)?;
        let mut rng = stream(self.config.seed, &[0x7a1, self.mode as u64]);
        let mut reports = Vec::with_capacity(self.config.steps as usize);
        let stacked: Vec<Utterance<f32>> = match self.config.pipeline.spec_augment {
            None => pool.iter().map(|u| self.config.pipeline.prepare(u)).collect(),
            Some(_) => Vec::new(),
        };
        for i in 0..self.config.steps {
            let picks = sampler.sample(self.config.batch_size, &mut rng);
            let prepared: Vec<Utterance<f32>>;
            let utts: Vec<&Utterance<f32>> = if stacked.is_empty() {
                let seed = derive_seed(self.config.seed, &[0x5a, i]);
                prepared = picks.iter().map(|&p| self.config.pipeline.prepare_train(&pool[p], seed)).collect();
                prepared.iter().collect()
            } else {
                picks.iter().map(|&p| &stacked[p]).collect()
            };
            let batch = make_batch(&utts, model.config.num_languages, 0)?;
            let report = self.step(model, &batch)?;
            let keep_going = on_step(&report, self, model)?;
            reports.push(report);
            if !keep_going {
                break;
            }
        }
        Ok(reports)
    }
}
