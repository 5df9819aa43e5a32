use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::frontend::Token;
use crate::transducer::TokenLm;

/// Add-k smoothed n-gram model over `V` tokens plus an end marker.
/// Contexts are padded with a start marker; unseen contexts back off to
/// their longest observed suffix.
#[derive(Clone, Debug)]
pub struct NGramLm {
    order: usize,
    vocab: usize,
    smoothing: f64,
    /// context → (counts over V + 1 outcomes, total)
    counts: HashMap<Vec<Token>, (Vec<f64>, f64)>,
}

impl NGramLm {
    pub fn train(transcripts: &[Vec<Token>], vocab: usize, order: usize, smoothing: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("n-gram order must be at least 1".into()));
        }
        if transcripts.is_empty() {
            return Err(Error::Config("cannot train a language model on an empty corpus".into()));
        }
        if !(smoothing >= 0.0 && smoothing.is_finite()) {
            return Err(Error::Config(format!("smoothing {smoothing} must be finite and non-negative")));
        }
        let mut lm = Self {
            order,
            vocab,
            smoothing,
            counts: HashMap::new(),
        };
        for t in transcripts {
            if let Some(bad) = t.iter().find(|&&x| x >= vocab) {
                return Err(Error::Range(format!("token {bad} outside vocabulary of {vocab}")));
            }
            let padded: Vec<Token> = std::iter::repeat_n(lm.start(), order - 1).chain(t.iter().copied()).collect();
            for i in 0..=t.len() {
                let outcome = if i < t.len() { t[i] } else { lm.end() };
                let ctx = &padded[i..i + order - 1];
                for cut in 0..=ctx.len() {
                    let e = lm.counts.entry(ctx[cut..].to_vec()).or_insert_with(|| (vec![0.0; vocab + 1], 0.0));
                    e.0[outcome] += 1.0;
                    e.1 += 1.0;
                }
            }
        }
        Ok(lm)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Outcome index of the end-of-sequence marker.
    pub fn end(&self) -> Token {
        self.vocab
    }

    fn start(&self) -> Token {
        self.vocab + 1
    }

    /// Probability of `outcome` (a token or [`end`](Self::end)) after `context`.
    pub fn prob(&self, context: &[Token], outcome: Token) -> f64 {
        let n = self.order - 1;
        let pad = n.saturating_sub(context.len());
        let mut ctx: Vec<Token> = std::iter::repeat_n(self.start(), pad).collect();
        ctx.extend_from_slice(&context[context.len().saturating_sub(n)..]);
        let mut cut = 0;
        let (counts, total) = loop {
            if let Some(c) = self.counts.get(&ctx[cut..]) {
                break c;
            }
            cut += 1;
        };
        let k = self.smoothing;
        (counts[outcome] + k) / (total + k * (self.vocab + 1) as f64)
    }
}

impl TokenLm for NGramLm {
    fn log_prob(&self, context: &[Token], token: Token) -> f64 {
        self.prob(context, token).ln()
    }

    fn end_log_prob(&self, context: &[Token]) -> f64 {
        self.prob(context, self.end()).ln()
    }
}

/// Shallow-fusion score.
pub fn fused_score(am_logprob: f64, lm_logprob: f64, lm_weight: f64) -> f64 {
    am_logprob + lm_weight * lm_logprob
}
