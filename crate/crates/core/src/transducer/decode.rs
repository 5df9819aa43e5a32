use std::collections::HashSet;

use super::{hat_log_probs, HatLogProbs, PredictionState};
use crate::error::{Error, Result};
use crate::frontend::Token;
use crate::model_config::ModelConfig;
use crate::numerics::{layer_norm, lit, ParamStore, Scalar, Tensor};

/// Token-level language model used for shallow fusion.
pub trait TokenLm {
    /// `log P(token | context)`, `context` being all previously emitted tokens.
    fn log_prob(&self, context: &[Token], token: Token) -> f64;

    /// `log P(end | context)`; added once per finished hypothesis.
    fn end_log_prob(&self, _context: &[Token]) -> f64 {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<Token>,
    /// Accumulated HAT log-probability of the best alignment.
    pub am_score: f64,
    /// Accumulated language-model log-probability (unweighted).
    pub lm_score: f64,
    /// `am_score + lm_weight · lm_score`.
    pub score: f64,
}

/// Borrowed decoder and joint weights for step-wise inference.
pub struct DecoderView<'a, T> {
    cfg: &'a ModelConfig,
    embed1: &'a Tensor<T>,
    embed2: &'a Tensor<T>,
    ln_g: &'a Tensor<T>,
    ln_b: &'a Tensor<T>,
    proj: (&'a Tensor<T>, &'a Tensor<T>),
    enc: (&'a Tensor<T>, &'a Tensor<T>),
    pred: (&'a Tensor<T>, &'a Tensor<T>),
    out: (&'a Tensor<T>, &'a Tensor<T>),
}

fn affine<T: Scalar>(x: &[T], (w, b): (&Tensor<T>, &Tensor<T>)) -> Vec<T> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let mut y = b.data().to_vec();
    T::gemm(1, din, dout, x, (din, 1), w.data(), (dout, 1), &mut y, true);
    y
}

impl<'a, T: Scalar> DecoderView<'a, T> {
    pub fn new(cfg: &'a ModelConfig, store: &'a ParamStore<T>) -> Result<Self> {
        let pair = |n: &str| -> Result<(&'a Tensor<T>, &'a Tensor<T>)> {
            Ok((store.get(&format!("{n}_w"))?, store.get(&format!("{n}_b"))?))
        };
        Ok(Self {
            cfg,
            embed1: store.get("decoder/embed1")?,
            embed2: store.get("decoder/embed2")?,
            ln_g: store.get("decoder/ln_g")?,
            ln_b: store.get("decoder/ln_b")?,
            proj: pair("decoder/proj")?,
            enc: pair("joint/enc")?,
            pred: pair("joint/pred")?,
            out: pair("joint/out")?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.cfg
    }

    /// Projects encoder frames `[T, d]` into the joint space, one row each.
    pub fn project_encoder(&self, enc: &Tensor<T>) -> Result<Vec<Vec<T>>> {
        let d = self.cfg.d_model;
        if enc.rank() != 2 || enc.shape()[1] != d {
            return Err(Error::Dimension(format!("encoder frames {:?}, expected [T, {d}]", enc.shape())));
        }
        Ok(enc.data().chunks(d).map(|row| affine(row, self.enc)).collect())
    }

    /// Prediction network output for `state`, already in the joint space.
    pub fn prediction(&self, state: PredictionState) -> Result<Vec<T>> {
        let v = self.cfg.vocab_size;
        for t in [state.last, state.before_last] {
            if t > v {
                return Err(Error::Range(format!("token {t} outside vocabulary of {v}")));
            }
        }
        let h: Vec<T> = self.embed1.row(state.last).iter().zip(self.embed2.row(state.before_last)).map(|(a, b)| *a + *b).collect();
        let e = h.len();
        let h = layer_norm(&Tensor::new(vec![1, e], h)?, self.ln_g, self.ln_b, lit(1e-5))?;
        Ok(affine(&affine(h.data(), self.proj), self.pred))
    }

    /// HAT output distribution from projected encoder and prediction rows.
    pub fn joint(&self, enc: &[T], pred: &[T]) -> HatLogProbs {
        let h: Vec<T> = enc.iter().zip(pred).map(|(a, b)| (*a + *b).tanh()).collect();
        let z: Vec<f64> = affine(&h, self.out).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        hat_log_probs(&z)
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

fn check_cap(max_symbols: usize) -> Result<()> {
    if max_symbols == 0 {
        return Err(Error::Contract("at least one symbol per frame must be allowed".into()));
    }
    Ok(())
}

/// Frame-synchronous greedy search over encoder frames `[T, d]`. Blank wins
/// ties; after `max_symbols` labels on one frame the search moves on.
pub fn greedy_decode<T: Scalar>(view: &DecoderView<T>, enc: &Tensor<T>, max_symbols: usize) -> Result<Hypothesis> {
    check_cap(max_symbols)?;
    let frames = view.project_encoder(enc)?;
    let mut state = PredictionState::start(view.cfg);
    let mut pred = view.prediction(state)?;
    let (mut tokens, mut score) = (Vec::new(), 0.0);
    for f in &frames {
        for _ in 0..max_symbols {
            let h = view.joint(f, &pred);
            let k = argmax(&h.log_labels);
            if h.log_blank >= h.log_labels[k] {
                score += h.log_blank;
                break;
            }
            score += h.log_labels[k];
            tokens.push(k);
            state = state.advance(k);
            pred = view.prediction(state)?;
        }
    }
    Ok(Hypothesis {
        tokens,
        am_score: score,
        lm_score: 0.0,
        score,
    })
}

#[derive(Clone)]
struct Partial<T> {
    tokens: Vec<Token>,
    state: PredictionState,
    pred: Vec<T>,
    am: f64,
    lm: f64,
    score: f64,
}

fn keep_best<T>(mut pool: Vec<(Partial<T>, bool)>, width: usize) -> Vec<(Partial<T>, bool)> {
    // Stable: on equal scores earlier candidates (blank before labels,
    // lower label ids first) win, which keeps width 1 identical to greedy.
    pool.sort_by(|a, b| b.0.score.total_cmp(&a.0.score));
    let mut seen = HashSet::new();
    pool.into_iter()
        .filter(|(p, done)| seen.insert((p.tokens.clone(), *done)))
        .take(width)
        .collect()
}

/// Beam search over prediction-network histories with optional shallow
/// fusion; hypotheses sharing a token sequence keep their best alignment.
/// Returns up to `beam_width` hypotheses, best first.
pub fn beam_decode<T: Scalar>(
    view: &DecoderView<T>,
    enc: &Tensor<T>,
    beam_width: usize,
    max_symbols: usize,
    lm: Option<&dyn TokenLm>,
    lm_weight: f64,
) -> Result<Vec<Hypothesis>> {
    if beam_width == 0 {
        return Err(Error::Contract("beam width must be at least 1".into()));
    }
    check_cap(max_symbols)?;
    let frames = view.project_encoder(enc)?;
    let start = PredictionState::start(view.cfg);
    let mut beam = vec![Partial {
        tokens: Vec::new(),
        state: start,
        pred: view.prediction(start)?,
        am: 0.0,
        lm: 0.0,
        score: 0.0,
    }];
    for f in &frames {
        let mut done: Vec<Partial<T>> = Vec::new();
        let mut active = std::mem::take(&mut beam);
        for _ in 0..max_symbols {
            let mut pool: Vec<(Partial<T>, bool)> = done.drain(..).map(|p| (p, true)).collect();
            for hyp in &active {
                let h = view.joint(f, &hyp.pred);
                let mut blank = hyp.clone();
                blank.am += h.log_blank;
                blank.score += h.log_blank;
                pool.push((blank, true));
                for (k, lp) in h.log_labels.iter().enumerate() {
                    let lm_lp = lm.map_or(0.0, |m| m.log_prob(&hyp.tokens, k));
                    let mut tokens = hyp.tokens.clone();
                    tokens.push(k);
                    pool.push((
                        Partial {
                            tokens,
                            state: hyp.state.advance(k),
                            pred: Vec::new(),
                            am: hyp.am + lp,
                            lm: hyp.lm + lm_lp,
                            score: hyp.score + lp + lm_weight * lm_lp,
                        },
                        false,
                    ));
                }
            }
            active.clear();
            for (mut p, finished) in keep_best(pool, beam_width) {
                if finished {
                    done.push(p);
                } else {
                    p.pred = view.prediction(p.state)?;
                    active.push(p);
                }
            }
            if active.is_empty() {
                break;
            }
        }
        // Hypotheses still emitting when the cap is reached move on unscored.
        let pool = done.into_iter().chain(active).map(|p| (p, true)).collect();
        beam = keep_best(pool, beam_width).into_iter().map(|(p, _)| p).collect();
    }
    let finish = |tokens: Vec<Token>, am: f64, lm_acc: f64| {
        let lm_score = lm_acc + lm.map_or(0.0, |m| m.end_log_prob(&tokens));
        Hypothesis {
            score: am + lm_weight * lm_score,
            tokens,
            am_score: am,
            lm_score,
        }
    };
    let mut out: Vec<Hypothesis> = beam.into_iter().map(|p| finish(p.tokens, p.am, p.lm)).collect();
    let greedy = greedy_decode(view, enc, max_symbols)?;
    let greedy_lm = lm.map_or(0.0, |m| (0..greedy.tokens.len()).map(|i| m.log_prob(&greedy.tokens[..i], greedy.tokens[i])).sum());
    out.push(finish(greedy.tokens, greedy.am_score, greedy_lm));
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut seen = HashSet::new();
    out.retain(|h| seen.insert(h.tokens.clone()));
    out.truncate(beam_width);
    Ok(out)
}
