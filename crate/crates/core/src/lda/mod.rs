//! Language-dependent adapters.
//!
//! Each block holds the stacked down projection `D[K·d, h]`, up projection
//! `U[K·h, d]` and biases `D_b[K, h]`, `U_b[K, d]`; block `k` of each is the
//! slice owned by language `k`. An utterance of language `k` is transformed as
//! `x + U_k·relu(D_k·LN(x) + D_b[k]) + U_b[k]`, so only language `k`'s
//! slices ever see its gradient. The pre-norm is shared across languages and
//! stays frozen.

use rand::Rng;

use crate::backbone::Pass;
use crate::error::{Error, Result};
use crate::model_config::ModelConfig;
use crate::numerics::{lit, ParamBinder, ParamStore, Scalar, Tape, Tensor, Var};

pub const ADAPTER_ROOT: &str = "adapter/";
/// Tensors partitioned by language.
pub const LANGUAGE_TENSORS: [&str; 4] = ["D", "U", "D_b", "U_b"];

const LN_EPS: f64 = 1e-5;
const DOWN_INIT_STD: f64 = 0.05;

pub fn adapter_prefix(pass: Pass, layer: usize) -> String {
    format!("adapter/{}/{layer}", pass.name())
}

pub fn adapter_name(pass: Pass, layer: usize, tensor: &str) -> String {
    format!("{}/{tensor}", adapter_prefix(pass, layer))
}

pub fn is_adapter_param(name: &str) -> bool {
    name.starts_with(ADAPTER_ROOT)
}

/// Trainable during adapter finetuning: the per-language tensors only.
pub fn is_language_param(name: &str) -> bool {
    is_adapter_param(name) && LANGUAGE_TENSORS.iter().any(|t| name.ends_with(&format!("/{t}")))
}

/// `(pass, layer)` of every adapter block the configuration places.
pub fn adapter_slots(cfg: &ModelConfig) -> Vec<(Pass, usize)> {
    [Pass::First, Pass::Second]
        .into_iter()
        .flat_map(|pass| {
            let n = pass.layers(cfg);
            (0..n)
                .filter(move |l| l + 1 < n || cfg.adapter_after_last)
                .map(move |l| (pass, l))
        })
        .collect()
}

/// Identity-initialized adapters: `D` small random, `U` and biases zero.
pub fn init_adapters<T: Scalar, R: Rng>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) {
    let (k, d, h) = (cfg.num_languages, cfg.d_model, cfg.adapter_hidden);
    for (pass, l) in adapter_slots(cfg) {
        let name = |t: &str| adapter_name(pass, l, t);
        store.insert(name("D"), Tensor::randn(&[k * d, h], DOWN_INIT_STD, rng));
        store.insert(name("U"), Tensor::zeros(&[k * h, d]));
        if cfg.adapter_bias {
            store.insert(name("D_b"), Tensor::zeros(&[k, h]));
            store.insert(name("U_b"), Tensor::zeros(&[k, d]));
        }
        store.insert(name("ln_g"), Tensor::ones(&[d]));
        store.insert(name("ln_b"), Tensor::zeros(&[d]));
    }
}

/// Language index of each one-hot row of `onehot[B, K']`, checked against
/// `num_languages`.
pub fn language_indices<T: Scalar>(onehot: &Tensor<T>, num_languages: usize) -> Result<Vec<usize>> {
    if onehot.rank() != 2 {
        return Err(Error::Dimension(format!("language one-hot of shape {:?}", onehot.shape())));
    }
    let width = onehot.shape()[1];
    (0..onehot.shape()[0])
        .map(|b| {
            let row = onehot.row(b);
            let hot: Vec<usize> = (0..width).filter(|&k| row[k] == T::one()).collect();
            let rest_zero = row.iter().all(|&v| v == T::one() || v == T::zero());
            if hot.len() != 1 || !rest_zero {
                return Err(Error::Contract(format!("language row {b} is not one-hot")));
            }
            if hot[0] >= num_languages {
                return Err(Error::Range(format!(
                    "language {} >= {num_languages} adapter slices",
                    hot[0]
                )));
            }
            Ok(hot[0])
        })
        .collect()
}

/// One adapter block held as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterBlock<T> {
    pub down: Tensor<T>,
    pub up: Tensor<T>,
    pub down_bias: Option<Tensor<T>>,
    pub up_bias: Option<Tensor<T>>,
    pub ln_gamma: Tensor<T>,
    pub ln_beta: Tensor<T>,
}

/// Per-utterance weights picked out of a block.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectedWeights<T> {
    /// `[B, d, h]`
    pub down: Tensor<T>,
    /// `[B, h, d]`
    pub up: Tensor<T>,
    /// `[B, h]`
    pub down_bias: Option<Tensor<T>>,
    /// `[B, d]`
    pub up_bias: Option<Tensor<T>>,
}

impl<T: Scalar> AdapterBlock<T> {
    pub fn from_store(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let get = |t: &str| store.get(&format!("{prefix}/{t}")).cloned();
        let opt = |t: &str| store.get(&format!("{prefix}/{t}")).ok().cloned();
        let block = Self {
            down: get("D")?,
            up: get("U")?,
            down_bias: opt("D_b"),
            up_bias: opt("U_b"),
            ln_gamma: get("ln_g")?,
            ln_beta: get("ln_b")?,
        };
        block.check()?;
        Ok(block)
    }

    pub fn model_dim(&self) -> usize {
        self.up.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.down.shape()[1]
    }

    pub fn num_languages(&self) -> usize {
        self.down.shape()[0] / self.model_dim()
    }

    fn check(&self) -> Result<()> {
        let (d, h) = (self.model_dim(), self.hidden());
        let k = self.down.shape()[0] / d.max(1);
        let ok = self.down.shape() == [k * d, h]
            && self.up.shape() == [k * h, d]
            && self.down_bias.as_ref().is_none_or(|b| b.shape() == [k, h])
            && self.up_bias.as_ref().is_none_or(|b| b.shape() == [k, d])
            && self.ln_gamma.shape() == [d]
            && self.ln_beta.shape() == [d]
            && h >= 1
            && h < d;
        if !ok {
            return Err(Error::Dimension("inconsistent adapter block shapes".into()));
        }
        Ok(())
    }

    /// The language slices used by each row of `onehot[B, K]`.
    pub fn select_language_weights(&self, onehot: &Tensor<T>) -> Result<SelectedWeights<T>> {
        let (d, h) = (self.model_dim(), self.hidden());
        let langs = language_indices(onehot, self.num_languages())?;
        let gather = |t: &Tensor<T>, rows: usize| -> Vec<T> {
            langs
                .iter()
                .flat_map(|&k| t.data()[k * rows * t.last_dim()..(k + 1) * rows * t.last_dim()].iter().copied())
                .collect()
        };
        let b = langs.len();
        Ok(SelectedWeights {
            down: Tensor::new(vec![b, d, h], gather(&self.down, d))?,
            up: Tensor::new(vec![b, h, d], gather(&self.up, h))?,
            down_bias: match &self.down_bias {
                Some(t) => Some(Tensor::new(vec![b, h], gather(t, 1))?),
                None => None,
            },
            up_bias: match &self.up_bias {
                Some(t) => Some(Tensor::new(vec![b, d], gather(t, 1))?),
                None => None,
            },
        })
    }

    /// Adapter output for `x[B, T, d]` routed by `onehot[B, K]`.
    pub fn forward(&self, x: &Tensor<T>, onehot: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.model_dim() || s[0] != onehot.shape()[0] {
            return Err(Error::Dimension(format!(
                "adapter input {:?} for model dim {} and {} routes",
                s,
                self.model_dim(),
                onehot.shape()[0]
            )));
        }
        let langs = language_indices(onehot, self.num_languages())?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = BlockVars {
            down: tape.constant(self.down.clone()),
            up: tape.constant(self.up.clone()),
            down_bias: self.down_bias.clone().map(|t| tape.constant(t)),
            up_bias: self.up_bias.clone().map(|t| tape.constant(t)),
            ln_gamma: tape.constant(self.ln_gamma.clone()),
            ln_beta: tape.constant(self.ln_beta.clone()),
        };
        let y = apply_block(&mut tape, &vars, xv, &langs)?;
        Ok(tape.value(y).clone())
    }
}

struct BlockVars {
    down: Var,
    up: Var,
    down_bias: Option<Var>,
    up_bias: Option<Var>,
    ln_gamma: Var,
    ln_beta: Var,
}

fn apply_block<T: Scalar>(tape: &mut Tape<T>, v: &BlockVars, x: Var, langs: &[usize]) -> Result<Var> {
    let n = tape.layer_norm(x, v.ln_gamma, v.ln_beta, lit(LN_EPS))?;
    let mut h = tape.group_matmul(n, v.down, langs.to_vec())?;
    if let Some(db) = v.down_bias {
        h = tape.group_bias(h, db, langs.to_vec())?;
    }
    let h = tape.relu(h);
    let mut y = tape.group_matmul(h, v.up, langs.to_vec())?;
    if let Some(ub) = v.up_bias {
        y = tape.group_bias(y, ub, langs.to_vec())?;
    }
    tape.add(y, x)
}

/// Adapter block `prefix` applied on the tape.
pub fn adapter_forward_var<T: Scalar>(
    tape: &mut Tape<T>,
    p: &mut ParamBinder<T>,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    langs: &[usize],
) -> Result<Var> {
    if let Some(&bad) = langs.iter().find(|&&k| k >= cfg.num_languages) {
        return Err(Error::Range(format!("language {bad} >= {}", cfg.num_languages)));
    }
    let name = |t: &str| format!("{prefix}/{t}");
    let optional = |p: &mut ParamBinder<T>, tape: &mut Tape<T>, t: &str| -> Result<Option<Var>> {
        if p.store().contains(&name(t)) {
            Ok(Some(p.var(tape, &name(t))?))
        } else {
            Ok(None)
        }
    };
    let vars = BlockVars {
        down: p.var(tape, &name("D"))?,
        up: p.var(tape, &name("U"))?,
        down_bias: optional(p, tape, "D_b")?,
        up_bias: optional(p, tape, "U_b")?,
        ln_gamma: p.var(tape, &name("ln_g"))?,
        ln_beta: p.var(tape, &name("ln_b"))?,
    };
    apply_block(tape, &vars, x, langs)
}

/// Per-language adapter parameters as a fraction of the full model:
/// `layers·(2·d·h + h + d) / total`. The shared pre-norm is not counted.
pub fn adapter_param_budget(d: usize, h: usize, num_languages: usize, layers: usize, total: f64) -> f64 {
    debug_assert!(num_languages > 0);
    per_language_params(d, h, layers) as f64 / total
}

pub fn per_language_params(d: usize, h: usize, layers: usize) -> usize {
    layers * (2 * d * h + h + d)
}
