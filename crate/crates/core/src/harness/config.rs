use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::frontend::{CorpusShape, FamilySpec, FeaturePipeline, SamplingMode, SpecAugmentConfig};
use crate::model_config::ModelConfig;
use crate::nst::NstConfig;
use crate::numerics::AdamConfig;
use crate::train::TrainConfig;

/// Every knob of a desk-scale run, serialized as flat `key=value` lines.
/// Parsing starts from the defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub family: FamilySpec,
    pub shape: CorpusShape,
    pub stack_factor: usize,
    pub spec_augment: SpecAugmentConfig,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// 0 disables weight averaging.
    pub ema_decay: f64,
    pub fastemit: f64,
    pub backbone_steps: u64,
    pub backbone_batch: usize,
    pub backbone_lr: f64,
    pub backbone_warmup: u64,
    pub backbone_sampling: SamplingMode,
    pub finetune_steps: u64,
    pub finetune_batch: usize,
    pub finetune_lr: f64,
    pub finetune_warmup: u64,
    /// Evaluate (and snapshot) finetuned models every this many steps.
    pub eval_every: u64,
    pub nst_iterations: usize,
    pub nst_keep_fraction: f64,
    pub nst_per_language: bool,
    pub nst_lm_weight: f64,
    pub nst_beam_width: usize,
    pub nst_student_steps: u64,
    pub lm_order: usize,
    pub lm_smoothing: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let family = FamilySpec {
            language_shift: 0.2,
            tail_swaps: 6,
            supervised_head: 600,
            supervised_tail: 30,
            test: 100,
            ..FamilySpec::default()
        };
        let stack_factor = 4;
        let model = ModelConfig {
            input_dim: stack_factor * family.dim,
            d_model: 64,
            heads: 4,
            num_languages: family.languages,
            vocab_size: family.vocab,
            ..ModelConfig::desk_scale()
        };
        let adam = AdamConfig::default();
        Self {
            model,
            family,
            shape: CorpusShape::default(),
            stack_factor,
            spec_augment: SpecAugmentConfig::desk_scale(),
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            ema_decay: adam.ema_decay.unwrap_or(0.0),
            fastemit: crate::transducer::DEFAULT_FASTEMIT,
            backbone_steps: 1000,
            backbone_batch: 8,
            backbone_lr: adam.peak_lr,
            backbone_warmup: 100,
            backbone_sampling: SamplingMode::Proportional,
            finetune_steps: 600,
            finetune_batch: 8,
            finetune_lr: 5e-3,
            finetune_warmup: 50,
            eval_every: 50,
            nst_iterations: 4,
            nst_keep_fraction: 0.6,
            nst_per_language: true,
            nst_lm_weight: 0.3,
            nst_beam_width: 4,
            nst_student_steps: 600,
            lm_order: 3,
            lm_smoothing: 0.1,
            seed: 1,
        }
    }
}

enum Field<'a> {
    Usize(&'a mut usize),
    U64(&'a mut u64),
    F64(&'a mut f64),
    Bool(&'a mut bool),
    Window(&'a mut Option<usize>),
    Sampling(&'a mut SamplingMode),
}

impl Field<'_> {
    fn render(&self) -> String {
        match self {
            Field::Usize(v) => v.to_string(),
            Field::U64(v) => v.to_string(),
            Field::F64(v) => v.to_string(),
            Field::Bool(v) => v.to_string(),
            Field::Window(v) => v.map_or("unlimited".into(), |w| w.to_string()),
            Field::Sampling(v) => match v {
                SamplingMode::Uniform => "uniform".into(),
                SamplingMode::Proportional => "proportional".into(),
            },
        }
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("bad value {value:?} for {key}"));
        match self {
            Field::Usize(v) => **v = value.parse().map_err(|_| bad())?,
            Field::U64(v) => **v = value.parse().map_err(|_| bad())?,
            Field::F64(v) => **v = value.parse().map_err(|_| bad())?,
            Field::Bool(v) => **v = value.parse().map_err(|_| bad())?,
            Field::Window(v) => {
                **v = match value {
                    "unlimited" => None,
                    w => Some(w.parse().map_err(|_| bad())?),
                }
            }
            Field::Sampling(v) => {
                **v = match value {
                    "uniform" => SamplingMode::Uniform,
                    "proportional" => SamplingMode::Proportional,
                    _ => return Err(bad()),
                }
            }
        }
        Ok(())
    }
}

impl RunConfig {
    fn fields(&mut self) -> Vec<(&'static str, Field<'_>)> {
        use Field::*;
        let m = &mut self.model;
        let f = &mut self.family;
        let s = &mut self.shape;
        let a = &mut self.spec_augment;
        vec![
            ("model.input_dim", Usize(&mut m.input_dim)),
            ("model.d_model", Usize(&mut m.d_model)),
            ("model.heads", Usize(&mut m.heads)),
            ("model.ff_mult", Usize(&mut m.ff_mult)),
            ("model.kernel_size", Usize(&mut m.kernel_size)),
            ("model.causal_layers", Usize(&mut m.causal_layers)),
            ("model.noncausal_layers", Usize(&mut m.noncausal_layers)),
            ("model.left_context", Window(&mut m.left_context)),
            ("model.max_positions", Usize(&mut m.max_positions)),
            ("model.num_languages", Usize(&mut m.num_languages)),
            ("model.adapter_hidden", Usize(&mut m.adapter_hidden)),
            ("model.adapter_bias", Bool(&mut m.adapter_bias)),
            ("model.adapter_after_last", Bool(&mut m.adapter_after_last)),
            ("model.vocab_size", Usize(&mut m.vocab_size)),
            ("model.embed_dim", Usize(&mut m.embed_dim)),
            ("model.joint_dim", Usize(&mut m.joint_dim)),
            ("corpus.languages", Usize(&mut f.languages)),
            ("corpus.head_languages", Usize(&mut f.head_languages)),
            ("corpus.vocab", Usize(&mut f.vocab)),
            ("corpus.dim", Usize(&mut f.dim)),
            ("corpus.language_shift", F64(&mut f.language_shift)),
            ("corpus.token_divergence", F64(&mut f.token_divergence)),
            ("corpus.noise_scale", F64(&mut f.noise_scale)),
            ("corpus.tail_swaps", Usize(&mut f.tail_swaps)),
            ("corpus.supervised_head", Usize(&mut f.supervised_head)),
            ("corpus.supervised_tail", Usize(&mut f.supervised_tail)),
            ("corpus.unlabeled", Usize(&mut f.unlabeled)),
            ("corpus.test", Usize(&mut f.test)),
            ("corpus.min_tokens", Usize(&mut s.min_tokens)),
            ("corpus.max_tokens", Usize(&mut s.max_tokens)),
            ("corpus.min_frames_per_token", Usize(&mut s.min_frames_per_token)),
            ("corpus.max_frames_per_token", Usize(&mut s.max_frames_per_token)),
            ("features.stack_factor", Usize(&mut self.stack_factor)),
            ("specaug.freq_masks", Usize(&mut a.freq_masks)),
            ("specaug.max_freq_len", Usize(&mut a.max_freq_len)),
            ("specaug.time_masks", Usize(&mut a.time_masks)),
            ("specaug.max_time_len", Usize(&mut a.max_time_len)),
            ("optim.beta1", F64(&mut self.beta1)),
            ("optim.beta2", F64(&mut self.beta2)),
            ("optim.epsilon", F64(&mut self.epsilon)),
            ("optim.ema_decay", F64(&mut self.ema_decay)),
            ("loss.fastemit", F64(&mut self.fastemit)),
            ("backbone.steps", U64(&mut self.backbone_steps)),
            ("backbone.batch_size", Usize(&mut self.backbone_batch)),
            ("backbone.peak_lr", F64(&mut self.backbone_lr)),
            ("backbone.warmup_steps", U64(&mut self.backbone_warmup)),
            ("backbone.sampling", Sampling(&mut self.backbone_sampling)),
            ("finetune.steps", U64(&mut self.finetune_steps)),
            ("finetune.batch_size", Usize(&mut self.finetune_batch)),
            ("finetune.peak_lr", F64(&mut self.finetune_lr)),
            ("finetune.warmup_steps", U64(&mut self.finetune_warmup)),
            ("finetune.eval_every", U64(&mut self.eval_every)),
            ("nst.iterations", Usize(&mut self.nst_iterations)),
            ("nst.keep_fraction", F64(&mut self.nst_keep_fraction)),
            ("nst.per_language", Bool(&mut self.nst_per_language)),
            ("nst.lm_weight", F64(&mut self.nst_lm_weight)),
            ("nst.beam_width", Usize(&mut self.nst_beam_width)),
            ("nst.student_steps", U64(&mut self.nst_student_steps)),
            ("nst.lm_order", Usize(&mut self.lm_order)),
            ("nst.lm_smoothing", F64(&mut self.lm_smoothing)),
            ("seed", U64(&mut self.seed)),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut copy = self.clone();
        let mut out = String::new();
        for (k, v) in copy.fields() {
            let _ = writeln!(out, "{k}={}", v.render());
        }
        out
    }

    /// Overrides defaults with the `key=value` lines of `text`. Blank lines
    /// and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        {
            let mut fields = cfg.fields();
            for (n, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
                let (k, v) = (k.trim(), v.trim());
                let field = fields
                    .iter_mut()
                    .find(|(name, _)| *name == k)
                    .ok_or_else(|| Error::Config(format!("line {}: unknown key {k}", n + 1)))?;
                if !seen.insert(k.to_string()) {
                    return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
                }
                field.1.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// FNV-1a digest of the canonical text; stored in checkpoint metadata.
    pub fn digest(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = fnv::FnvHasher::default();
        h.write(self.to_text().as_bytes());
        h.finish()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        let f = &self.family;
        if self.model.input_dim != self.stack_factor * f.dim {
            return fail(format!(
                "model.input_dim {} must equal features.stack_factor × corpus.dim = {}",
                self.model.input_dim,
                self.stack_factor * f.dim
            ));
        }
        if self.model.vocab_size != f.vocab || self.model.num_languages != f.languages {
            return fail("model vocabulary and language count must match the corpus".into());
        }
        if f.head_languages > f.languages {
            return fail("corpus.head_languages exceeds corpus.languages".into());
        }
        if self.shape.min_tokens == 0 || self.shape.min_tokens > self.shape.max_tokens {
            return fail("corpus token range is empty".into());
        }
        if self.shape.min_frames_per_token == 0 || self.shape.min_frames_per_token > self.shape.max_frames_per_token {
            return fail("corpus frame range is empty".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return fail(format!("optim.ema_decay {} must lie in [0, 1)", self.ema_decay));
        }
        if self.backbone_batch == 0 || self.finetune_batch == 0 || self.eval_every == 0 {
            return fail("batch sizes and finetune.eval_every must be positive".into());
        }
        if self.lm_order == 0 {
            return fail("nst.lm_order must be at least 1".into());
        }
        self.nst().validate()
    }

    fn adam(&self, peak_lr: f64, warmup_steps: u64) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            peak_lr,
            warmup_steps,
            ema_decay: (self.ema_decay > 0.0).then_some(self.ema_decay),
        }
    }

    pub fn pipeline(&self, augment: bool) -> FeaturePipeline {
        FeaturePipeline {
            stack_factor: self.stack_factor,
            spec_augment: augment.then(|| self.spec_augment.clone()),
            augment_before_stack: true,
        }
    }

    pub fn backbone_training(&self) -> TrainConfig {
        TrainConfig {
            steps: self.backbone_steps,
            batch_size: self.backbone_batch,
            adam: self.adam(self.backbone_lr, self.backbone_warmup),
            fastemit: self.fastemit,
            sampling: self.backbone_sampling,
            pipeline: self.pipeline(false),
            seed: crate::rng::derive_seed(self.seed, &[0xbb]),
            ..TrainConfig::default()
        }
    }

    /// Adapter-only and full finetuning share budget and schedule.
    pub fn finetuning(&self) -> TrainConfig {
        TrainConfig {
            steps: self.finetune_steps,
            batch_size: self.finetune_batch,
            adam: self.adam(self.finetune_lr, self.finetune_warmup),
            fastemit: self.fastemit,
            sampling: SamplingMode::Uniform,
            pipeline: self.pipeline(false),
            seed: crate::rng::derive_seed(self.seed, &[0xf7]),
            ..TrainConfig::default()
        }
    }

    pub fn nst(&self) -> NstConfig {
        let finetune = self.finetuning();
        NstConfig {
            iterations: self.nst_iterations,
            keep_fraction: self.nst_keep_fraction,
            per_language: self.nst_per_language,
            lm_weight: self.nst_lm_weight,
            beam_width: self.nst_beam_width,
            student: TrainConfig {
                steps: self.nst_student_steps,
                pipeline: self.pipeline(true),
                seed: crate::rng::derive_seed(self.seed, &[0x45]),
                ..finetune.clone()
            },
            final_student: finetune,
        }
    }
}
