//! Noisy student training: LM-fused teacher transcription of unlabeled
//! audio, score-based filtering, and the teacher → student loop whose last
//! student is adapter-only.

mod lm;

pub use lm::{fused_score, NGramLm};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::backbone::Pass;
use crate::error::{Error, Result};
use crate::frontend::{make_batch, SpecAugmentConfig, Token, Utterance};
use crate::harness::{evaluate_model, EvalReport};
use crate::model::Model;
use crate::train::{StepReport, TrainConfig, TrainMode, Trainer};

const TRANSCRIBE_BATCH: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub utterance_id: usize,
    pub language_id: usize,
    pub tokens: Vec<Token>,
    /// Fused log-probability per emitted token.
    pub score: f64,
    pub teacher_iteration: usize,
}

#[derive(Clone, Debug)]
pub struct NstConfig {
    pub iterations: usize,
    pub keep_fraction: f64,
    pub per_language: bool,
    pub lm_weight: f64,
    pub beam_width: usize,
    /// Initial teacher and intermediate (full-model) students.
    pub student: TrainConfig,
    /// The last, adapter-only student.
    pub final_student: TrainConfig,
}

impl Default for NstConfig {
    fn default() -> Self {
        let student = TrainConfig::default();
        let mut pipeline = student.pipeline.clone();
        pipeline.spec_augment = Some(SpecAugmentConfig::desk_scale());
        Self {
            iterations: 4,
            keep_fraction: 0.6,
            per_language: true,
            lm_weight: 0.3,
            beam_width: 4,
            final_student: student.clone(),
            student: TrainConfig { pipeline, ..student },
        }
    }
}

impl NstConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("noisy student training needs at least one iteration".into()));
        }
        check_fraction(self.keep_fraction)?;
        if self.beam_width == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        Ok(())
    }

    /// Which parameters student `iteration` (1-based) trains.
    pub fn student_mode(&self, iteration: usize) -> TrainMode {
        if iteration == self.iterations {
            TrainMode::Lda
        } else {
            TrainMode::Full
        }
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::Config(format!("keep fraction {f} must lie in (0, 1]")));
    }
    Ok(())
}

/// Beam-decodes unlabeled utterances (raw features) with the teacher's
/// non-causal pass under shallow fusion.
pub fn transcribe_unlabeled(
    teacher: &Model<f32>,
    unlabeled: &[Utterance<f32>],
    lm: &NGramLm,
    cfg: &NstConfig,
    iteration: usize,
) -> Result<Vec<PseudoLabel>> {
    if let Some(u) = unlabeled.iter().find(|u| u.supervised || !u.transcript.is_empty()) {
        return Err(Error::Contract(format!("utterance {} is already labeled", u.id)));
    }
    let pipeline = &cfg.student.pipeline;
    let mut out = Vec::with_capacity(unlabeled.len());
    for chunk in unlabeled.chunks(TRANSCRIBE_BATCH) {
        let prepared: Vec<Utterance<f32>> = chunk.iter().map(|u| pipeline.prepare(u)).collect();
        let refs: Vec<&Utterance<f32>> = prepared.iter().collect();
        let batch = make_batch(&refs, teacher.config.num_languages, 0)?;
        let hyps = teacher.beam_batch(&batch, Pass::Second, cfg.beam_width, Some(lm), cfg.lm_weight)?;
        for (u, h) in chunk.iter().zip(hyps) {
            let best = h.into_iter().next().ok_or_else(|| Error::Contract("beam search returned nothing".into()))?;
            let score = best.score / best.tokens.len().max(1) as f64;
            if !score.is_finite() {
                return Err(Error::Training(format!("non-finite pseudo-label score for utterance {}", u.id)));
            }
            out.push(PseudoLabel {
                utterance_id: u.id,
                language_id: u.language_id,
                tokens: best.tokens,
                score,
                teacher_iteration: iteration,
            });
        }
    }
    Ok(out)
}

/// Keeps the best `ceil(fraction · n)` labels by score (per language when
/// `per_language`), ties going to the lower utterance id. The survivors
/// are returned in input order.
pub fn filter_transcripts(labels: &[PseudoLabel], keep_fraction: f64, per_language: bool) -> Result<Vec<PseudoLabel>> {
    check_fraction(keep_fraction)?;
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(if per_language { l.language_id } else { 0 }).or_default().push(i);
    }
    let mut keep = vec![false; labels.len()];
    for idx in groups.values_mut() {
        idx.sort_by(|&a, &b| {
            labels[b]
                .score
                .total_cmp(&labels[a].score)
                .then(labels[a].utterance_id.cmp(&labels[b].utterance_id))
        });
        let n = (keep_fraction * idx.len() as f64).ceil() as usize;
        for &i in idx.iter().take(n) {
            keep[i] = true;
        }
    }
    Ok(labels.iter().zip(keep).filter(|(_, k)| *k).map(|(l, _)| l.clone()).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LedgerEntry {
    /// 0 is the supervised-only teacher.
    pub iteration: usize,
    pub mode: TrainMode,
    pub kept: BTreeMap<usize, usize>,
    pub training_size: usize,
    pub dev: EvalReport,
}

pub fn ledger_to_tsv(ledger: &[LedgerEntry]) -> String {
    let mut out = String::from("iteration\tstudent\ttraining_size\tlanguage\tkept\twer_first_pass\twer_cascaded\n");
    for e in ledger {
        for l in &e.dev.languages {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}",
                e.iteration,
                e.mode.name(),
                e.training_size,
                l.language,
                e.kept.get(&l.language).copied().unwrap_or(0),
                l.first_pass,
                l.second_pass
            );
        }
    }
    out
}

pub struct NstOutcome {
    /// Evaluation weights of the final adapter-only student.
    pub model: Model<f32>,
    pub ledger: Vec<LedgerEntry>,
    /// Parameters the final student was allowed to change.
    pub final_trainable: Vec<String>,
}

/// Trains teacher 0 on `supervised` from `backbone`, then runs
/// `cfg.iterations` rounds of transcribe → filter → train. Intermediate
/// students train every parameter from `backbone`; the last trains only the
/// language-dependent adapters over the frozen `backbone`. `on_final_step`
/// observes the final student as it trains.
pub fn run_nst(
    backbone: &Model<f32>,
    supervised: &[Utterance<f32>],
    unlabeled: &[Utterance<f32>],
    dev: &[Utterance<f32>],
    lm: &NGramLm,
    cfg: &NstConfig,
    mut on_final_step: impl FnMut(&StepReport, &Trainer, &Model<f32>) -> Result<bool>,
) -> Result<NstOutcome> {
    cfg.validate()?;
    let at = |i: usize| move |e: Error| match e {
        Error::Training(m) => Error::Training(format!("noisy student iteration {i}: {m}")),
        other => other,
    };
    let evaluate = |m: &Model<f32>, i: usize| evaluate_model(m, &format!("nst{i}"), dev, &cfg.student.pipeline);

    let mut teacher = backbone.clone();
    let mut trainer = Trainer::new(TrainMode::Full, cfg.student.clone());
    trainer.run(&mut teacher, supervised, |_, _, _| Ok(true)).map_err(at(0))?;
    let mut teacher = trainer.evaluation_model(&teacher);
    let mut ledger = vec![LedgerEntry {
        iteration: 0,
        mode: TrainMode::Full,
        kept: BTreeMap::new(),
        training_size: supervised.len(),
        dev: evaluate(&teacher, 0)?,
    }];

    for i in 1..=cfg.iterations {
        let labels = transcribe_unlabeled(&teacher, unlabeled, lm, cfg, i - 1).map_err(at(i))?;
        let kept = filter_transcripts(&labels, cfg.keep_fraction, cfg.per_language)?;
        let by_id: BTreeMap<usize, &Utterance<f32>> = unlabeled.iter().map(|u| (u.id, u)).collect();
        let mut pool = supervised.to_vec();
        let mut kept_counts = BTreeMap::new();
        for l in &kept {
            pool.push(by_id[&l.utterance_id].with_transcript(l.tokens.clone()));
            *kept_counts.entry(l.language_id).or_insert(0) += 1;
        }
        let mode = cfg.student_mode(i);
        let train_cfg = if mode == TrainMode::Lda { &cfg.final_student } else { &cfg.student };
        let mut student = backbone.clone();
        let mut trainer = Trainer::new(mode, TrainConfig {
            seed: crate::rng::derive_seed(train_cfg.seed, &[i as u64]),
            ..train_cfg.clone()
        });
        if mode == TrainMode::Lda {
            trainer.run(&mut student, &pool, &mut on_final_step)
        } else {
            trainer.run(&mut student, &pool, |_, _, _| Ok(true))
        }
        .map_err(at(i))?;
        teacher = trainer.evaluation_model(&student);
        ledger.push(LedgerEntry {
            iteration: i,
            mode,
            kept: kept_counts,
            training_size: pool.len(),
            dev: evaluate(&teacher, i)?,
        });
    }
    let final_trainable = backbone.params.names().filter(|n| TrainMode::Lda.trainable(n)).cloned().collect();
    Ok(NstOutcome {
        model: teacher,
        ledger,
        final_trainable,
    })
}

#[cfg(test)]
mod tests;
