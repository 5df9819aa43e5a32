use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::backbone::Pass;
use crate::error::{Error, Result};
use crate::frontend::{make_batch, FeaturePipeline, Token, Utterance};
use crate::model::Model;
use crate::numerics::Scalar;

const EVAL_BATCH: usize = 16;

/// Levenshtein distance with unit substitution, insertion and deletion costs.
pub fn edit_distance(reference: &[Token], hypothesis: &[Token]) -> usize {
    let mut row: Vec<usize> = (0..=hypothesis.len()).collect();
    for (i, r) in reference.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let next = (diag + usize::from(r != h)).min(row[j] + 1).min(row[j + 1] + 1);
            diag = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[hypothesis.len()]
}

/// Edit distance normalized by `max(1, |reference|)`.
pub fn wer(reference: &[Token], hypothesis: &[Token]) -> f64 {
    edit_distance(reference, hypothesis) as f64 / reference.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageWer {
    pub language: usize,
    pub utterances: usize,
    /// Causal pass.
    pub first_pass: f64,
    /// Cascaded (non-causal) pass.
    pub second_pass: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub step: u64,
    /// One entry per language, ascending.
    pub languages: Vec<LanguageWer>,
}

impl EvalReport {
    pub fn cascaded(&self, language: usize) -> Option<f64> {
        self.languages.iter().find(|l| l.language == language).map(|l| l.second_pass)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("model\tstep\tlanguage\tutterances\twer_first_pass\twer_cascaded\n");
        for l in &self.languages {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:.6}\t{:.6}",
                self.model, self.step, l.language, l.utterances, l.first_pass, l.second_pass
            );
        }
        out
    }

    /// Parses the output of [`to_tsv`](Self::to_tsv) (possibly several
    /// reports concatenated, one per model/step).
    pub fn parse_tsv(text: &str) -> Result<Vec<EvalReport>> {
        let mut reports: Vec<EvalReport> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() || line.starts_with("model\t") {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Data(format!("report line {}: {line:?}", n + 1));
            if f.len() != 6 {
                return Err(bad());
            }
            let step: u64 = f[1].parse().map_err(|_| bad())?;
            let entry = LanguageWer {
                language: f[2].parse().map_err(|_| bad())?,
                utterances: f[3].parse().map_err(|_| bad())?,
                first_pass: f[4].parse().map_err(|_| bad())?,
                second_pass: f[5].parse().map_err(|_| bad())?,
            };
            match reports.last_mut() {
                Some(r) if r.model == f[0] && r.step == step => r.languages.push(entry),
                _ => reports.push(EvalReport {
                    model: f[0].to_string(),
                    step,
                    languages: vec![entry],
                }),
            }
        }
        Ok(reports)
    }
}

/// Greedy-decodes `test` (raw features) with both passes and averages
/// per-utterance WER within each language present in the set.
pub fn evaluate_model<T: Scalar>(
    model: &Model<T>,
    name: &str,
    test: &[Utterance<T>],
    pipeline: &FeaturePipeline,
) -> Result<EvalReport> {
    let k = model.config.num_languages;
    if let Some(u) = test.iter().find(|u| u.language_id >= k) {
        return Err(Error::Range(format!("utterance {} has language {} but the model serves {k}", u.id, u.language_id)));
    }
    let prepared: Vec<Utterance<T>> = test.iter().map(|u| pipeline.prepare(u)).collect();
    let mut sums: BTreeMap<usize, (usize, f64, f64)> = BTreeMap::new();
    for chunk in prepared.chunks(EVAL_BATCH) {
        let refs: Vec<&Utterance<T>> = chunk.iter().collect();
        let batch = make_batch(&refs, k, 0)?;
        let first = model.greedy_batch(&batch, Pass::First)?;
        let second = model.greedy_batch(&batch, Pass::Second)?;
        for (i, u) in chunk.iter().enumerate() {
            let e = sums.entry(u.language_id).or_default();
            e.0 += 1;
            e.1 += wer(&u.transcript, &first[i].tokens);
            e.2 += wer(&u.transcript, &second[i].tokens);
        }
    }
    Ok(EvalReport {
        model: name.to_string(),
        step: model.step,
        languages: sums
            .into_iter()
            .map(|(language, (n, a, b))| LanguageWer {
                language,
                utterances: n,
                first_pass: a / n as f64,
                second_pass: b / n as f64,
            })
            .collect(),
    })
}

/// Per language, the report step with the lowest cascaded WER; the earliest
/// step wins ties. Returns `language -> (step, wer)`.
pub fn select_peak_checkpoints(reports: &[EvalReport]) -> Result<BTreeMap<usize, (u64, f64)>> {
    if reports.is_empty() {
        return Err(Error::Contract("peak selection needs at least one report".into()));
    }
    let mut best: BTreeMap<usize, (u64, f64)> = BTreeMap::new();
    for r in reports {
        for l in &r.languages {
            let candidate = (r.step, l.second_pass);
            best.entry(l.language)
                .and_modify(|b| {
                    if l.second_pass < b.1 || (l.second_pass == b.1 && r.step < b.0) {
                        *b = candidate;
                    }
                })
                .or_insert(candidate);
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WerrReport {
    /// `(language, baseline, candidate, reduction)`; reduction is `None`
    /// when the baseline WER is zero.
    pub languages: Vec<(usize, f64, f64, Option<f64>)>,
    /// Macro average over languages with a defined reduction.
    pub average: Option<f64>,
}

impl WerrReport {
    pub fn reduction(&self, language: usize) -> Option<f64> {
        self.languages.iter().find(|l| l.0 == language).and_then(|l| l.3)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("language\tbaseline_wer\tcandidate_wer\trelative_reduction\n");
        let fmt = |r: Option<f64>| r.map_or("undefined".to_string(), |v| format!("{:.2}%", 100.0 * v));
        for (l, b, c, r) in &self.languages {
            let _ = writeln!(out, "{l}\t{b:.6}\t{c:.6}\t{}", fmt(*r));
        }
        let _ = writeln!(out, "average\t\t\t{}", fmt(self.average));
        out
    }
}

/// Relative cascaded-pass WER reduction `(base − cand) / base` per language.
/// Regressions stay negative.
pub fn report_werr(baseline: &EvalReport, candidate: &EvalReport) -> Result<WerrReport> {
    let langs = |r: &EvalReport| r.languages.iter().map(|l| l.language).collect::<Vec<_>>();
    if langs(baseline) != langs(candidate) {
        return Err(Error::Contract(format!(
            "reports cover different languages: {:?} vs {:?}",
            langs(baseline),
            langs(candidate)
        )));
    }
    let languages: Vec<_> = baseline
        .languages
        .iter()
        .zip(&candidate.languages)
        .map(|(b, c)| {
            let r = (b.second_pass != 0.0).then(|| (b.second_pass - c.second_pass) / b.second_pass);
            (b.language, b.second_pass, c.second_pass, r)
        })
        .collect();
    let defined: Vec<f64> = languages.iter().filter_map(|l| l.3).collect();
    let average = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(WerrReport { languages, average })
}
