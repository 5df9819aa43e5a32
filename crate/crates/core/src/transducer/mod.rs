//! Prediction network over the last two labels, HAT-factorized joint
//! network, transducer loss and decoding.

mod decode;
mod lattice;

pub use decode::{beam_decode, greedy_decode, DecoderView, Hypothesis, TokenLm};
pub use lattice::{fastemit_adjust, hat_log_probs, node_logit_gradient, HatLogProbs, LatticeGrads, LossLattice};

use rand::Rng;

use crate::error::{Error, Result};
use crate::frontend::{Batch, Token};
use crate::model_config::ModelConfig;
use crate::numerics::{lit, ParamBinder, ParamStore, Scalar, Tape, Tensor, Var};

pub const DEFAULT_FASTEMIT: f64 = 5e-3;
const LN_EPS: f64 = 1e-5;

/// Embedding row shared by both tables for "no label yet".
pub fn start_marker(cfg: &ModelConfig) -> Token {
    cfg.vocab_size
}

pub fn is_decoder_param(name: &str) -> bool {
    name.starts_with("decoder/") || name.starts_with("joint/")
}

/// The two most recent labels, most recent first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PredictionState {
    pub last: Token,
    pub before_last: Token,
}

impl PredictionState {
    pub fn start(cfg: &ModelConfig) -> Self {
        let s = start_marker(cfg);
        Self { last: s, before_last: s }
    }

    pub fn advance(self, token: Token) -> Self {
        Self {
            last: token,
            before_last: self.last,
        }
    }

    /// State after teacher-forcing `prefix` (only its last two tokens matter).
    pub fn after(cfg: &ModelConfig, prefix: &[Token]) -> Self {
        prefix.iter().fold(Self::start(cfg), |s, &t| s.advance(t))
    }
}

pub fn init_transducer<T: Scalar, R: Rng>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) {
    let (v1, e, j, d) = (cfg.vocab_size + 1, cfg.embed_dim, cfg.joint_dim, cfg.d_model);
    store.insert("decoder/embed1", Tensor::randn(&[v1, e], 1.0, rng));
    store.insert("decoder/embed2", Tensor::randn(&[v1, e], 1.0, rng));
    store.insert("decoder/ln_g", Tensor::ones(&[e]));
    store.insert("decoder/ln_b", Tensor::zeros(&[e]));
    for (name, din, dout) in [("decoder/proj", e, j), ("joint/enc", d, j), ("joint/pred", j, j), ("joint/out", j, v1)] {
        store.insert(format!("{name}_w"), Tensor::randn(&[din, dout], 1.0 / (din as f64).sqrt(), rng));
        store.insert(format!("{name}_b"), Tensor::zeros(&[dout]));
    }
}

pub fn transducer_param_count(cfg: &ModelConfig) -> usize {
    let (v1, e, j, d) = (cfg.vocab_size + 1, cfg.embed_dim, cfg.joint_dim, cfg.d_model);
    2 * v1 * e + 2 * e + (e + 1) * j + (d + 1) * j + (j + 1) * j + (j + 1) * v1
}

fn linear<T: Scalar>(tape: &mut Tape<T>, p: &mut ParamBinder<T>, name: &str, x: Var) -> Result<Var> {
    let w = p.var(tape, &format!("{name}_w"))?;
    let b = p.var(tape, &format!("{name}_b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

fn check_token(cfg: &ModelConfig, t: Token) -> Result<()> {
    if t > cfg.vocab_size {
        return Err(Error::Range(format!("token {t} outside vocabulary of {}", cfg.vocab_size)));
    }
    Ok(())
}

/// Prediction outputs after the joint's prediction projection, `[N, j]`,
/// one row per state.
pub fn prediction_forward_var<T: Scalar>(
    tape: &mut Tape<T>,
    p: &mut ParamBinder<T>,
    cfg: &ModelConfig,
    states: &[PredictionState],
) -> Result<Var> {
    for s in states {
        check_token(cfg, s.last)?;
        check_token(cfg, s.before_last)?;
    }
    let t1 = p.var(tape, "decoder/embed1")?;
    let t2 = p.var(tape, "decoder/embed2")?;
    let e1 = tape.embedding(t1, states.iter().map(|s| s.last).collect())?;
    let e2 = tape.embedding(t2, states.iter().map(|s| s.before_last).collect())?;
    let h = tape.add(e1, e2)?;
    let g = p.var(tape, "decoder/ln_g")?;
    let b = p.var(tape, "decoder/ln_b")?;
    let h = tape.layer_norm(h, g, b, lit(LN_EPS))?;
    let h = linear(tape, p, "decoder/proj", h)?;
    linear(tape, p, "joint/pred", h)
}

/// Joint logits `[B, T, U+1, V+1]` (blank last) for every lattice node of a
/// padded batch. `enc` is `[B, T, d]`.
pub fn lattice_logits_var<T: Scalar>(
    tape: &mut Tape<T>,
    p: &mut ParamBinder<T>,
    cfg: &ModelConfig,
    enc: Var,
    batch: &Batch<T>,
) -> Result<Var> {
    let s = tape.value(enc).shape().to_vec();
    if s.len() != 3 || s[0] != batch.size() || s[2] != cfg.d_model {
        return Err(Error::Dimension(format!("encoder output {:?} for batch of {}", s, batch.size())));
    }
    let u1 = batch.max_target_len + 1;
    let mut states = Vec::with_capacity(batch.size() * u1);
    for b in 0..batch.size() {
        let y = batch.target(b);
        for t in y {
            if *t >= cfg.vocab_size {
                return Err(Error::Range(format!("target token {t} outside vocabulary of {}", cfg.vocab_size)));
            }
        }
        for u in 0..u1 {
            states.push(PredictionState::after(cfg, &y[..u.min(y.len())]));
        }
    }
    let pred = prediction_forward_var(tape, p, cfg, &states)?;
    let pred = tape.reshape(pred, &[batch.size(), u1, cfg.joint_dim])?;
    let enc = linear(tape, p, "joint/enc", enc)?;
    let h = tape.broadcast_join(enc, pred)?;
    let h = tape.tanh(h);
    linear(tape, p, "joint/out", h)
}

/// Per-utterance negative log-likelihoods from lattice logits, with the
/// gradient of their mean (FastEmit applied on label arcs).
pub fn lattice_losses<T: Scalar>(logits: &Tensor<T>, batch: &Batch<T>, fastemit: f64) -> Result<(Vec<f64>, Tensor<T>)> {
    let s = logits.shape();
    let u1 = batch.max_target_len + 1;
    if s.len() != 4 || s[0] != batch.size() || s[1] != batch.frames() || s[2] != u1 {
        return Err(Error::Dimension(format!("lattice logits {:?} for batch", s)));
    }
    if !logits.all_finite() {
        return Err(Error::Training("non-finite joint logits".into()));
    }
    let (t_max, v1) = (s[1], s[3]);
    let scale = 1.0 / batch.size() as f64;
    let mut grad = vec![0.0f64; logits.numel()];
    let mut losses = Vec::with_capacity(batch.size());
    let node = |b: usize, t: usize, u: usize| ((b * t_max + t) * u1 + u) * v1;
    for b in 0..batch.size() {
        let (frames, y) = (batch.feature_lengths[b], batch.target(b));
        let labels = y.len();
        let mut hats = Vec::with_capacity(frames * (labels + 1));
        let mut lb = Vec::with_capacity(frames * (labels + 1));
        let mut ll = Vec::with_capacity(frames * labels);
        for t in 0..frames {
            for u in 0..=labels {
                let o = node(b, t, u);
                let z: Vec<f64> = logits.data()[o..o + v1].iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
                let h = hat_log_probs(&z);
                lb.push(h.log_blank);
                if u < labels {
                    ll.push(h.log_labels[y[u]]);
                }
                hats.push(h);
            }
        }
        let lattice = LossLattice::new(frames, labels, lb, ll)?;
        losses.push(lattice.loss());
        let g = fastemit_adjust(&lattice.gradients(), fastemit);
        for t in 0..frames {
            for u in 0..=labels {
                let o = node(b, t, u);
                let label = (u < labels).then(|| (y[u], g.label[t * labels + u] * scale));
                node_logit_gradient(&hats[t * (labels + 1) + u], g.blank[t * (labels + 1) + u] * scale, label, &mut grad[o..o + v1]);
            }
        }
    }
    Ok((losses, Tensor::new(s.to_vec(), grad.into_iter().map(lit).collect())?))
}

/// Batch-mean transducer loss as a differentiable scalar node.
pub fn transducer_loss_var<T: Scalar>(
    tape: &mut Tape<T>,
    p: &mut ParamBinder<T>,
    cfg: &ModelConfig,
    enc: Var,
    batch: &Batch<T>,
    fastemit: f64,
) -> Result<(Var, Vec<f64>)> {
    let logits = lattice_logits_var(tape, p, cfg, enc, batch)?;
    let (losses, grad) = lattice_losses(tape.value(logits), batch, fastemit)?;
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok((tape.scalar_with_grad(logits, lit(mean), grad)?, losses))
}
