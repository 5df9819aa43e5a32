//! Cascaded Conformer encoder: a causal first pass followed by a non-causal
//! second pass, with an adapter slot after every layer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::lda;
use crate::model_config::ModelConfig;
use crate::numerics::{lit, ParamBinder, ParamStore, Scalar, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pass {
    /// Causal, streaming.
    First,
    /// Non-causal, consumes the first pass output.
    Second,
}

impl Pass {
    pub fn name(self) -> &'static str {
        match self {
            Pass::First => "first",
            Pass::Second => "second",
        }
    }

    pub fn layers(self, cfg: &ModelConfig) -> usize {
        match self {
            Pass::First => cfg.causal_layers,
            Pass::Second => cfg.noncausal_layers,
        }
    }

    pub fn causal(self) -> bool {
        self == Pass::First
    }
}

pub fn layer_prefix(pass: Pass, layer: usize) -> String {
    format!("backbone/{}/{layer}", pass.name())
}

fn linear_init<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize, gain: f64, rng: &mut R) {
    let std = gain / (din as f64).sqrt();
    store.insert(format!("{name}_w"), Tensor::randn(&[din, dout], std, rng));
    store.insert(format!("{name}_b"), Tensor::zeros(&[dout]));
}

fn norm_init<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) {
    store.insert(format!("{name}_g"), Tensor::ones(&[d]));
    store.insert(format!("{name}_b"), Tensor::zeros(&[d]));
}

/// Adds one Conformer layer's parameters under `prefix`.
pub fn init_conformer_layer<T: Scalar, R: Rng>(cfg: &ModelConfig, store: &mut ParamStore<T>, prefix: &str, rng: &mut R) {
    let d = cfg.d_model;
    let f = cfg.ff_mult * d;
    for ffn in ["ffn1", "ffn2"] {
        norm_init(store, &format!("{prefix}/{ffn}/ln"), d);
        linear_init(store, &format!("{prefix}/{ffn}/in"), d, f, 1.0, rng);
        linear_init(store, &format!("{prefix}/{ffn}/out"), f, d, 0.5, rng);
    }
    norm_init(store, &format!("{prefix}/mhsa/ln"), d);
    for p in ["q", "k", "v"] {
        linear_init(store, &format!("{prefix}/mhsa/{p}"), d, d, 1.0, rng);
    }
    linear_init(store, &format!("{prefix}/mhsa/out"), d, d, 0.5, rng);
    norm_init(store, &format!("{prefix}/conv/ln"), d);
    linear_init(store, &format!("{prefix}/conv/pw1"), d, 2 * d, 1.0, rng);
    let k = cfg.kernel_size;
    store.insert(
        format!("{prefix}/conv/dw_w"),
        Tensor::randn(&[k, d], 1.0 / (k as f64).sqrt(), rng),
    );
    store.insert(format!("{prefix}/conv/dw_b"), Tensor::zeros(&[d]));
    norm_init(store, &format!("{prefix}/conv/ln2"), d);
    linear_init(store, &format!("{prefix}/conv/pw2"), d, d, 0.5, rng);
    norm_init(store, &format!("{prefix}/final_ln"), d);
}

/// Input projection, position table and every encoder layer.
pub fn init_backbone<T: Scalar, R: Rng>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) {
    linear_init(store, "backbone/input", cfg.input_dim, cfg.d_model, 1.0, rng);
    store.insert("backbone/input_pos", Tensor::randn(&[cfg.max_positions, cfg.d_model], 0.02, rng));
    for pass in [Pass::First, Pass::Second] {
        for l in 0..pass.layers(cfg) {
            init_conformer_layer(cfg, store, &layer_prefix(pass, l), rng);
        }
    }
}

/// Scalar count of [`init_backbone`]'s parameters, in closed form:
/// `L·(4·m·d² + 7·d² + 2·m·d + K·d + 22·d) + d_in·d + d + P·d`
/// for `L` layers, FFN multiplier `m`, kernel `K` and `P` positions.
pub fn backbone_param_count(cfg: &ModelConfig) -> usize {
    let (d, m, k) = (cfg.d_model, cfg.ff_mult, cfg.kernel_size);
    let per_layer = 4 * m * d * d + 7 * d * d + 2 * m * d + k * d + 22 * d;
    cfg.total_layers() * per_layer + cfg.input_dim * d + d + cfg.max_positions * d
}

/// Additive attention mask `[B, T, T]`: 0 where query `t` may read key `s`,
/// `-inf` elsewhere. Keys beyond an utterance's length are always closed.
pub fn attention_mask<T: Scalar>(lengths: &[usize], frames: usize, causal: bool, left_context: Option<usize>) -> Tensor<T> {
    let mut m = Tensor::full(&[lengths.len(), frames, frames], T::neg_infinity());
    for (b, &len) in lengths.iter().enumerate() {
        for t in 0..frames {
            for s in 0..len.min(frames) {
                let open = if causal {
                    s <= t && left_context.is_none_or(|w| t - s <= w)
                } else {
                    true
                };
                if open || (s == 0 && t >= len) {
                    m.data_mut()[(b * frames + t) * frames + s] = T::zero();
                }
            }
        }
    }
    m
}

/// 1 for real frames, 0 for padding, flattened `[B·T]`.
pub fn frame_mask<T: Scalar>(lengths: &[usize], frames: usize) -> Vec<T> {
    lengths
        .iter()
        .flat_map(|&len| (0..frames).map(move |t| if t < len { T::one() } else { T::zero() }))
        .collect()
}

/// Masks shared by every layer of one pass.
pub struct PassContext<T> {
    pub attention_mask: Tensor<T>,
    pub frame_mask: Vec<T>,
    pub causal: bool,
}

impl<T: Scalar> PassContext<T> {
    pub fn new(cfg: &ModelConfig, lengths: &[usize], frames: usize, pass: Pass) -> Self {
        let causal = pass.causal();
        Self {
            attention_mask: attention_mask(lengths, frames, causal, if causal { cfg.left_context } else { None }),
            frame_mask: frame_mask(lengths, frames),
            causal,
        }
    }
}

fn linear<T: Scalar>(tape: &mut Tape<T>, p: &mut ParamBinder<T>, name: &str, x: Var) -> Result<Var> {
    let w = p.var(tape, &format!("{name}_w"))?;
    let b = p.var(tape, &format!("{name}_b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

fn norm<T: Scalar>(tape: &mut Tape<T>, p: &mut ParamBinder<T>, name: &str, x: Var) -> Result<Var> {
    let g = p.var(tape, &format!("{name}_g"))?;
    let b = p.var(tape, &format!("{name}_b"))?;
    tape.layer_norm(x, g, b, lit(LN_EPS))
}

fn feed_forward<T: Scalar>(tape: &mut Tape<T>, p: &mut ParamBinder<T>, prefix: &str, x: Var) -> Result<Var> {
    let h = norm(tape, p, &format!("{prefix}/ln"), x)?;
    let h = linear(tape, p, &format!("{prefix}/in"), h)?;
    let h = tape.silu(h);
    linear(tape, p, &format!("{prefix}/out"), h)
}

fn self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    p: &mut ParamBinder<T>,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    ctx: &PassContext<T>,
) -> Result<Var> {
    let heads = cfg.heads;
    let dh = cfg.d_model / heads;
    let h = norm(tape, p, &format!("{prefix}/ln"), x)?;
    let q = linear(tape, p, &format!("{prefix}/q"), h)?;
    let k = linear(tape, p, &format!("{prefix}/k"), h)?;
    let v = linear(tape, p, &format!("{prefix}/v"), h)?;
    let (q, k, v) = (
        tape.split_heads(q, heads)?,
        tape.split_heads(k, heads)?,
        tape.split_heads(v, heads)?,
    );
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, T::one() / lit::<T>(dh as f64).sqrt());
    let probs = tape.masked_softmax(scores, &ctx.attention_mask, heads)?;
    let ctxv = tape.bmm(probs, v, false)?;
    let merged = tape.merge_heads(ctxv, heads)?;
    linear(tape, p, &format!("{prefix}/out"), merged)
}

fn convolution<T: Scalar>(
    tape: &mut Tape<T>,
    p: &mut ParamBinder<T>,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    ctx: &PassContext<T>,
) -> Result<Var> {
    let h = norm(tape, p, &format!("{prefix}/ln"), x)?;
    let h = linear(tape, p, &format!("{prefix}/pw1"), h)?;
    let h = tape.glu(h)?;
    // Padding frames must not leak into real frames through the kernel.
    let h = tape.row_scale(h, ctx.frame_mask.clone())?;
    let w = p.var(tape, &format!("{prefix}/dw_w"))?;
    let b = p.var(tape, &format!("{prefix}/dw_b"))?;
    let k = cfg.kernel_size;
    let left = if ctx.causal { k - 1 } else { (k - 1) / 2 };
    let h = tape.depthwise_conv1d(h, w, b, left)?;
    let h = norm(tape, p, &format!("{prefix}/ln2"), h)?;
    let h = tape.silu(h);
    linear(tape, p, &format!("{prefix}/pw2"), h)
}

/// One Conformer block on `x[B, T, d]`: half FFN, self-attention,
/// convolution, half FFN, final layer norm, all residual.
pub fn conformer_layer<T: Scalar>(
    tape: &mut Tape<T>,
    p: &mut ParamBinder<T>,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    ctx: &PassContext<T>,
) -> Result<Var> {
    let s = tape.value(x).shape().to_vec();
    if s.len() != 3 || s[2] != cfg.d_model {
        return Err(Error::Dimension(format!("conformer input {:?}, d_model {}", s, cfg.d_model)));
    }
    let m = ctx.attention_mask.shape();
    if m[0] != s[0] || m[1] != s[1] || m[2] != s[1] {
        return Err(Error::Dimension(format!("attention mask {:?} for input {:?}", m, s)));
    }
    let half: T = lit(0.5);
    let f = feed_forward(tape, p, &format!("{prefix}/ffn1"), x)?;
    let f = tape.scale(f, half);
    let x = tape.add(x, f)?;
    let a = self_attention(tape, p, cfg, &format!("{prefix}/mhsa"), x, ctx)?;
    let x = tape.add(x, a)?;
    let c = convolution(tape, p, cfg, &format!("{prefix}/conv"), x, ctx)?;
    let x = tape.add(x, c)?;
    let f = feed_forward(tape, p, &format!("{prefix}/ffn2"), x)?;
    let f = tape.scale(f, half);
    let x = tape.add(x, f)?;
    norm(tape, p, &format!("{prefix}/final_ln"), x)
}

/// Runs both passes over `features[B, T, d_in]`. With `adapter_languages`,
/// every layer (except possibly the last of each pass) is followed by its
/// language-dependent adapter, routed by the per-utterance language ids.
pub fn encode_cascaded<T: Scalar>(
    tape: &mut Tape<T>,
    p: &mut ParamBinder<T>,
    cfg: &ModelConfig,
    features: Var,
    lengths: &[usize],
    adapter_languages: Option<&[usize]>,
) -> Result<(Var, Var)> {
    let s = tape.value(features).shape().to_vec();
    if s.len() != 3 || s[2] != cfg.input_dim || s[0] != lengths.len() {
        return Err(Error::Dimension(format!(
            "features {:?} with {} lengths, input_dim {}",
            s,
            lengths.len(),
            cfg.input_dim
        )));
    }
    if s[1] > cfg.max_positions {
        return Err(Error::Dimension(format!("{} frames exceed {} positions", s[1], cfg.max_positions)));
    }
    if let Some(langs) = adapter_languages {
        if langs.len() != s[0] {
            return Err(Error::Config(format!("{} adapter routes for batch of {}", langs.len(), s[0])));
        }
        let missing: Vec<_> = lda::adapter_slots(cfg)
            .into_iter()
            .filter(|(pass, l)| !p.store().contains(&lda::adapter_name(*pass, *l, "D")))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!("adapters missing for layers {missing:?}")));
        }
    }
    let frames = s[1];
    let x = linear(tape, p, "backbone/input", features)?;
    let pos = p.var(tape, "backbone/input_pos")?;
    let mut x = tape.add_positions(x, pos)?;
    let mut outputs = Vec::with_capacity(2);
    for pass in [Pass::First, Pass::Second] {
        let ctx = PassContext::new(cfg, lengths, frames, pass);
        let n = pass.layers(cfg);
        for l in 0..n {
            x = conformer_layer(tape, p, cfg, &layer_prefix(pass, l), x, &ctx)?;
            if let Some(langs) = adapter_languages {
                if l + 1 < n || cfg.adapter_after_last {
                    x = lda::adapter_forward_var(tape, p, cfg, &lda::adapter_prefix(pass, l), x, langs)?;
                }
            }
        }
        outputs.push(x);
    }
    Ok((outputs[0], outputs[1]))
}

#[cfg(test)]
mod tests;
