use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Architecture of the full transducer: cascaded encoder, adapters,
/// prediction network and joint network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Stacked input feature dimension.
    pub input_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub kernel_size: usize,
    pub causal_layers: usize,
    pub noncausal_layers: usize,
    /// Attention window into the past for causal layers; `None` is unlimited.
    pub left_context: Option<usize>,
    pub max_positions: usize,
    pub num_languages: usize,
    pub adapter_hidden: usize,
    pub adapter_bias: bool,
    /// Whether the last layer of each pass is followed by an adapter.
    pub adapter_after_last: bool,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub joint_dim: usize,
}

impl ModelConfig {
    /// CPU-sized defaults: 2+2 layers, d=128, 4 heads, kernel 7.
    pub fn desk_scale() -> Self {
        Self {
            input_dim: 128,
            d_model: 128,
            heads: 4,
            ff_mult: 4,
            kernel_size: 7,
            causal_layers: 2,
            noncausal_layers: 2,
            left_context: None,
            max_positions: 128,
            num_languages: 4,
            adapter_hidden: 8,
            adapter_bias: true,
            adapter_after_last: true,
            vocab_size: 32,
            embed_dim: 32,
            joint_dim: 32,
        }
    }

    /// Production dimensions: 10+7 layers at d=512, 8 heads, kernel 15,
    /// 4,096 wordpieces, 640-dim prediction and joint networks, 39 languages.
    pub fn full_scale() -> Self {
        Self {
            input_dim: 512,
            d_model: 512,
            heads: 8,
            ff_mult: 4,
            kernel_size: 15,
            causal_layers: 10,
            noncausal_layers: 7,
            left_context: None,
            max_positions: 4096,
            num_languages: 39,
            adapter_hidden: 45,
            adapter_bias: true,
            adapter_after_last: true,
            vocab_size: 4096,
            embed_dim: 640,
            joint_dim: 640,
        }
    }

    pub fn total_layers(&self) -> usize {
        self.causal_layers + self.noncausal_layers
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.causal_layers == 0 || self.noncausal_layers == 0 {
            return fail("each encoder pass needs at least one layer".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.kernel_size.is_multiple_of(2) {
            return fail(format!("kernel_size {} must be odd", self.kernel_size));
        }
        if self.adapter_hidden == 0 || self.adapter_hidden >= self.d_model {
            return fail(format!("adapter_hidden must be in [1, {})", self.d_model));
        }
        if self.num_languages == 0 || self.vocab_size == 0 || self.ff_mult == 0 {
            return fail("num_languages, vocab_size and ff_mult must be positive".into());
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let lc = self.left_context.map_or("unlimited".to_string(), |v| v.to_string());
        [
            ("input_dim", self.input_dim.to_string()),
            ("d_model", self.d_model.to_string()),
            ("heads", self.heads.to_string()),
            ("ff_mult", self.ff_mult.to_string()),
            ("kernel_size", self.kernel_size.to_string()),
            ("causal_layers", self.causal_layers.to_string()),
            ("noncausal_layers", self.noncausal_layers.to_string()),
            ("left_context", lc),
            ("max_positions", self.max_positions.to_string()),
            ("num_languages", self.num_languages.to_string()),
            ("adapter_hidden", self.adapter_hidden.to_string()),
            ("adapter_bias", self.adapter_bias.to_string()),
            ("adapter_after_last", self.adapter_after_last.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("joint_dim", self.joint_dim.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        fn get<V: std::str::FromStr>(p: &BTreeMap<String, String>, k: &str) -> Result<V> {
            p.get(k)
                .ok_or_else(|| Error::Config(format!("missing model key {k}")))?
                .parse()
                .map_err(|_| Error::Config(format!("bad value for model key {k}")))
        }
        let left_context = match p_str(pairs, "left_context")? {
            "unlimited" => None,
            v => Some(v.parse().map_err(|_| Error::Config("bad left_context".into()))?),
        };
        let cfg = Self {
            input_dim: get(pairs, "input_dim")?,
            d_model: get(pairs, "d_model")?,
            heads: get(pairs, "heads")?,
            ff_mult: get(pairs, "ff_mult")?,
            kernel_size: get(pairs, "kernel_size")?,
            causal_layers: get(pairs, "causal_layers")?,
            noncausal_layers: get(pairs, "noncausal_layers")?,
            left_context,
            max_positions: get(pairs, "max_positions")?,
            num_languages: get(pairs, "num_languages")?,
            adapter_hidden: get(pairs, "adapter_hidden")?,
            adapter_bias: get(pairs, "adapter_bias")?,
            adapter_after_last: get(pairs, "adapter_after_last")?,
            vocab_size: get(pairs, "vocab_size")?,
            embed_dim: get(pairs, "embed_dim")?,
            joint_dim: get(pairs, "joint_dim")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn p_str<'a>(p: &'a BTreeMap<String, String>, k: &str) -> Result<&'a str> {
    p.get(k)
        .map(String::as_str)
        .ok_or_else(|| Error::Config(format!("missing model key {k}")))
}
