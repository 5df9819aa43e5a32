//! Transducer forward/backward recursions over a `T × (U+1)` lattice of
//! HAT log-probabilities, in double precision.

use crate::error::{Error, Result};

/// Numerically stable `log(1 + e^x)`.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// HAT-normalized output distribution at one lattice node.
#[derive(Clone, Debug, PartialEq)]
pub struct HatLogProbs {
    pub log_blank: f64,
    /// `log(1 − P(blank)) + log_softmax(label logits)`.
    pub log_labels: Vec<f64>,
    /// Softmax over the label logits alone.
    pub label_softmax: Vec<f64>,
    pub blank_prob: f64,
}

/// Splits `logits[V + 1]` (blank last) into a sigmoid blank probability and
/// a softmax over the `V` labels scaled by the non-blank mass.
pub fn hat_log_probs(logits: &[f64]) -> HatLogProbs {
    let v = logits.len() - 1;
    let blank_logit = logits[v];
    let log_blank = -softplus(-blank_logit);
    let log_not_blank = -softplus(blank_logit);
    let labels = &logits[..v];
    let max = labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = labels.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lse = max + sum.ln();
    HatLogProbs {
        log_blank,
        log_labels: labels.iter().map(|z| log_not_blank + z - lse).collect(),
        label_softmax: exps.iter().map(|e| e / sum).collect(),
        blank_prob: log_blank.exp(),
    }
}

/// Derivatives of a scalar objective with respect to the lattice arcs.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeGrads {
    pub frames: usize,
    pub labels: usize,
    /// `[T, U+1]`: d objective / d log P(blank | t, u).
    pub blank: Vec<f64>,
    /// `[T, U]`: d objective / d log P(y_{u+1} | t, u).
    pub label: Vec<f64>,
}

/// Scales every label-emission arc gradient by `1 + lambda`, leaving blank
/// arcs untouched (FastEmit).
pub fn fastemit_adjust(grads: &LatticeGrads, lambda: f64) -> LatticeGrads {
    LatticeGrads {
        label: grads.label.iter().map(|g| g * (1.0 + lambda)).collect(),
        ..grads.clone()
    }
}

/// Forward and backward variables of one utterance's lattice.
#[derive(Clone, Debug)]
pub struct LossLattice {
    frames: usize,
    labels: usize,
    log_blank: Vec<f64>,
    log_label: Vec<f64>,
    /// `[T, U+1]`
    pub log_alpha: Vec<f64>,
    /// `[T, U+1]`
    pub log_beta: Vec<f64>,
}

impl LossLattice {
    /// `log_blank[T·(U+1)]` and `log_label[T·U]`, row-major in `t`.
    pub fn new(frames: usize, labels: usize, log_blank: Vec<f64>, log_label: Vec<f64>) -> Result<Self> {
        if frames == 0 {
            return Err(Error::Contract("transducer lattice needs at least one frame".into()));
        }
        if log_blank.len() != frames * (labels + 1) || log_label.len() != frames * labels {
            return Err(Error::Dimension(format!(
                "lattice {frames}x{labels} with {} blank and {} label entries",
                log_blank.len(),
                log_label.len()
            )));
        }
        if log_blank.iter().chain(&log_label).any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Training("non-finite lattice log-probabilities".into()));
        }
        let (t_n, u1) = (frames, labels + 1);
        let lb = |t: usize, u: usize| log_blank[t * u1 + u];
        let ll = |t: usize, u: usize| log_label[t * labels + u];
        let mut alpha = vec![f64::NEG_INFINITY; t_n * u1];
        for t in 0..t_n {
            for u in 0..u1 {
                alpha[t * u1 + u] = if t == 0 && u == 0 {
                    0.0
                } else {
                    let from_blank = if t > 0 { alpha[(t - 1) * u1 + u] + lb(t - 1, u) } else { f64::NEG_INFINITY };
                    let from_label = if u > 0 { alpha[t * u1 + u - 1] + ll(t, u - 1) } else { f64::NEG_INFINITY };
                    log_add(from_blank, from_label)
                };
            }
        }
        let mut beta = vec![f64::NEG_INFINITY; t_n * u1];
        for t in (0..t_n).rev() {
            for u in (0..u1).rev() {
                beta[t * u1 + u] = if t == t_n - 1 && u == labels {
                    lb(t, u)
                } else {
                    let via_blank = if t + 1 < t_n { beta[(t + 1) * u1 + u] + lb(t, u) } else { f64::NEG_INFINITY };
                    let via_label = if u < labels { beta[t * u1 + u + 1] + ll(t, u) } else { f64::NEG_INFINITY };
                    log_add(via_blank, via_label)
                };
            }
        }
        Ok(Self {
            frames,
            labels,
            log_blank,
            log_label,
            log_alpha: alpha,
            log_beta: beta,
        })
    }

    pub fn log_likelihood(&self) -> f64 {
        let u1 = self.labels + 1;
        let last = (self.frames - 1) * u1 + self.labels;
        self.log_alpha[last] + self.log_blank[last]
    }

    /// Negative log-likelihood summed over all alignments.
    pub fn loss(&self) -> f64 {
        -self.log_likelihood()
    }

    /// Gradient of [`loss`](Self::loss) with respect to each arc.
    pub fn gradients(&self) -> LatticeGrads {
        let (t_n, u_n) = (self.frames, self.labels);
        let u1 = u_n + 1;
        let log_z = self.log_likelihood();
        let mut blank = vec![0.0; t_n * u1];
        let mut label = vec![0.0; t_n * u_n];
        for t in 0..t_n {
            for u in 0..u1 {
                let a = self.log_alpha[t * u1 + u];
                let next_blank = if t + 1 < t_n {
                    self.log_beta[(t + 1) * u1 + u]
                } else if u == u_n {
                    0.0
                } else {
                    f64::NEG_INFINITY
                };
                blank[t * u1 + u] = -(a + self.log_blank[t * u1 + u] + next_blank - log_z).exp();
                if u < u_n {
                    let next = self.log_beta[t * u1 + u + 1];
                    label[t * u_n + u] = -(a + self.log_label[t * u_n + u] + next - log_z).exp();
                }
            }
        }
        LatticeGrads {
            frames: t_n,
            labels: u_n,
            blank,
            label,
        }
    }
}

/// Backpropagates arc gradients at one node into its `V + 1` logits.
/// `label_grad` applies to label `target` (ignored when `None`).
pub fn node_logit_gradient(hat: &HatLogProbs, blank_grad: f64, label: Option<(usize, f64)>, out: &mut [f64]) {
    let v = hat.label_softmax.len();
    let b = hat.blank_prob;
    let g_label = label.map_or(0.0, |(_, g)| g);
    out[v] += blank_grad * (1.0 - b) - b * g_label;
    if let Some((k, g)) = label {
        for j in 0..v {
            out[j] -= hat.label_softmax[j] * g;
        }
        out[k] += g;
    }
}
