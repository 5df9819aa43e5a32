//! The experiment stages behind the CLI, usable in-process.

use std::collections::BTreeMap;

use super::config::RunConfig;
use super::metrics::{evaluate_model, select_peak_checkpoints, EvalReport};
use crate::checkpoints::{merge_adapters, MergeSource};
use crate::error::{Error, Result};
use crate::frontend::{generate_corpus, Corpus, FeaturePipeline, LanguageSpec, Utterance};
use crate::model::Model;
use crate::nst::{run_nst, NGramLm, NstOutcome};
use crate::rng::derive_seed;
use crate::train::{TrainMode, Trainer};

pub fn generate(cfg: &RunConfig) -> Result<Corpus<f32>> {
    let specs = LanguageSpec::<f32>::synthetic_family(&cfg.family, cfg.seed);
    generate_corpus(&specs, &cfg.shape, cfg.seed)
}

/// Splits held-out utterances into a development half (even ids), used
/// for checkpoint selection, and a test half (odd ids).
pub fn dev_test_split(held_out: &[Utterance<f32>]) -> (Vec<Utterance<f32>>, Vec<Utterance<f32>>) {
    held_out.iter().cloned().partition(|u| u.id % 2 == 0)
}

pub fn of_language(utts: &[Utterance<f32>], language: usize) -> Vec<Utterance<f32>> {
    utts.iter().filter(|u| u.language_id == language).cloned().collect()
}

/// Multilingual pre-training of everything but the adapters.
pub fn train_backbone(cfg: &RunConfig, corpus: &Corpus<f32>) -> Result<Model<f32>> {
    let mut model = Model::init(cfg.model.clone(), derive_seed(cfg.seed, &[0x1d]))?;
    let mut trainer = Trainer::new(TrainMode::Backbone, cfg.backbone_training());
    trainer.run(&mut model, &corpus.supervised, |_, _, _| Ok(true))?;
    Ok(trainer.evaluation_model(&model))
}

/// Periodic snapshots of a finetuning run with their dev-set reports.
pub struct PeakTracker {
    name: String,
    dev: Vec<Utterance<f32>>,
    pipeline: FeaturePipeline,
    pub snapshots: BTreeMap<u64, Model<f32>>,
    pub reports: Vec<EvalReport>,
}

impl PeakTracker {
    pub fn new(name: &str, dev: Vec<Utterance<f32>>, pipeline: FeaturePipeline) -> Self {
        Self {
            name: name.to_string(),
            dev,
            pipeline,
            snapshots: BTreeMap::new(),
            reports: Vec::new(),
        }
    }

    pub fn observe(&mut self, model: &Model<f32>) -> Result<()> {
        let report = evaluate_model(model, &self.name, &self.dev, &self.pipeline)?;
        self.snapshots.insert(model.step, model.clone());
        self.reports.push(report);
        Ok(())
    }

    /// Per language, the dev-best step.
    pub fn peaks(&self) -> Result<BTreeMap<usize, (u64, f64)>> {
        select_peak_checkpoints(&self.reports)
    }

    pub fn peak_model(&self, language: usize) -> Result<&Model<f32>> {
        let peaks = self.peaks()?;
        let (step, _) = peaks
            .get(&language)
            .ok_or_else(|| Error::Range(format!("language {language} was never evaluated")))?;
        Ok(&self.snapshots[step])
    }

    /// Backbone plus every language's adapter slice from its peak snapshot.
    pub fn merged(&self, base: &Model<f32>) -> Result<Model<f32>> {
        let peaks = self.peaks()?;
        let sources: Vec<MergeSource> = peaks
            .iter()
            .map(|(l, (s, _))| MergeSource {
                language: *l,
                model: &self.snapshots[s],
                label: format!("{}@{s}", self.name),
            })
            .collect();
        merge_adapters(base, &sources)
    }
}

fn tracked_run(
    cfg: &RunConfig,
    mode: TrainMode,
    start: &Model<f32>,
    pool: &[Utterance<f32>],
    tracker: &mut PeakTracker,
) -> Result<()> {
    let train = cfg.finetuning();
    let (every, total) = (cfg.eval_every, train.steps);
    let mut model = start.clone();
    let mut trainer = Trainer::new(mode, train);
    let mut done = 0;
    trainer.run(&mut model, pool, |r, t, m| {
        done += 1;
        if done % every == 0 || done == total {
            let mut eval = t.evaluation_model(m);
            eval.step = r.step;
            tracker.observe(&eval)?;
        }
        Ok(true)
    })?;
    Ok(())
}

/// Adapter-only finetuning on all languages at once.
pub fn finetune_lda(cfg: &RunConfig, backbone: &Model<f32>, pool: &[Utterance<f32>], dev: &[Utterance<f32>]) -> Result<PeakTracker> {
    let mut tracker = PeakTracker::new("lda", dev.to_vec(), cfg.pipeline(false));
    tracked_run(cfg, TrainMode::Lda, backbone, pool, &mut tracker)?;
    Ok(tracker)
}

/// Monolingual finetuning of every parameter, on the same step budget.
pub fn finetune_full(
    cfg: &RunConfig,
    backbone: &Model<f32>,
    pool: &[Utterance<f32>],
    dev: &[Utterance<f32>],
    language: usize,
) -> Result<PeakTracker> {
    let pool = of_language(pool, language);
    if pool.is_empty() {
        return Err(Error::Data(format!("no supervised data for language {language}")));
    }
    let mut tracker = PeakTracker::new(&format!("full{language}"), of_language(dev, language), cfg.pipeline(false));
    tracked_run(cfg, TrainMode::Full, backbone, &pool, &mut tracker)?;
    Ok(tracker)
}

pub fn train_lm(cfg: &RunConfig, supervised: &[Utterance<f32>]) -> Result<NGramLm> {
    let transcripts: Vec<_> = supervised.iter().map(|u| u.transcript.clone()).collect();
    NGramLm::train(&transcripts, cfg.model.vocab_size, cfg.lm_order, cfg.lm_smoothing)
}

/// Noisy student training whose final adapter-only student is tracked
/// like [`finetune_lda`].
pub fn nst_run(
    cfg: &RunConfig,
    backbone: &Model<f32>,
    corpus: &Corpus<f32>,
    dev: &[Utterance<f32>],
) -> Result<(NstOutcome, PeakTracker)> {
    let lm = train_lm(cfg, &corpus.supervised)?;
    let nst = cfg.nst();
    let mut tracker = PeakTracker::new("nst", dev.to_vec(), cfg.pipeline(false));
    let (every, total) = (cfg.eval_every, nst.final_student.steps);
    let mut done = 0;
    let outcome = run_nst(backbone, &corpus.supervised, &corpus.unlabeled, dev, &lm, &nst, |r, t, m| {
        done += 1;
        if done % every == 0 || done == total {
            let mut eval = t.evaluation_model(m);
            eval.step = r.step;
            tracker.observe(&eval)?;
        }
        Ok(true)
    })?;
    Ok((outcome, tracker))
}
