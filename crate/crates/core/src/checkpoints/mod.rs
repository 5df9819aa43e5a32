//! Bit-exact model serialization, backbone fingerprints, and per-language
//! adapter extraction, merging and zeroing.

mod container;

pub use container::{Container, FORMAT_VERSION, MAGIC};

use std::collections::{BTreeMap, BTreeSet};
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;

use crate::error::{Error, LoadError, Result};
use crate::lda;
use crate::model::Model;
use crate::model_config::ModelConfig;
use crate::numerics::{AdamConfig, OptimizerState, ParamStore, Tensor};

const CONFIG_PREFIX: &str = "config.";

/// 64-bit FNV-1a over every non-adapter tensor (backbone, prediction and
/// joint networks) in name order: name, dimensions, then little-endian data.
pub fn fingerprint(params: &ParamStore<f32>) -> u64 {
    let mut h = FnvHasher::default();
    for (name, t) in params.iter().filter(|(n, _)| !lda::is_adapter_param(n)) {
        h.write(name.as_bytes());
        h.write(&[0]);
        for &d in t.shape() {
            h.write(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.write(&v.to_le_bytes());
        }
    }
    h.finish()
}

/// FNV-1a of the canonical `key=value` rendering of a model configuration.
pub fn config_digest(cfg: &ModelConfig) -> u64 {
    let mut h = FnvHasher::default();
    for (k, v) in cfg.to_pairs() {
        h.write(format!("{k}={v}\n").as_bytes());
    }
    h.finish()
}

fn hex(v: u64) -> String {
    format!("{v:016x}")
}

pub fn to_container(model: &Model<f32>, extra: &BTreeMap<String, String>) -> Container {
    let mut metadata = extra.clone();
    metadata.insert("step".into(), model.step.to_string());
    metadata.insert("config_digest".into(), hex(config_digest(&model.config)));
    metadata.insert("backbone_fingerprint".into(), hex(fingerprint(&model.params)));
    for (k, v) in model.config.to_pairs() {
        metadata.insert(format!("{CONFIG_PREFIX}{k}"), v);
    }
    Container {
        metadata,
        tensors: model.params.clone(),
    }
}

/// Rebuilds a model, verifying the stored digest and fingerprint.
pub fn from_container(c: Container) -> std::result::Result<(Model<f32>, BTreeMap<String, String>), LoadError> {
    let malformed = |m: String| LoadError::Malformed(m);
    let pairs: BTreeMap<String, String> = c
        .metadata
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(CONFIG_PREFIX).map(|k| (k.to_string(), v.clone())))
        .collect();
    let config = ModelConfig::from_pairs(&pairs).map_err(|e| malformed(e.to_string()))?;
    let field = |k: &str| c.metadata.get(k).ok_or_else(|| malformed(format!("missing metadata {k}")));
    let step: u64 = field("step")?.parse().map_err(|_| malformed("step is not an integer".into()))?;
    if *field("config_digest")? != hex(config_digest(&config)) {
        return Err(malformed("config digest does not match the stored configuration".into()));
    }
    if *field("backbone_fingerprint")? != hex(fingerprint(&c.tensors)) {
        return Err(malformed("backbone fingerprint does not match the stored tensors".into()));
    }
    let metadata = c.metadata.into_iter().filter(|(k, _)| !k.starts_with(CONFIG_PREFIX)).collect();
    Ok((
        Model {
            config,
            params: c.tensors,
            step,
        },
        metadata,
    ))
}

fn write_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_container(path: &Path) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Container::from_bytes(&bytes).map_err(|kind| Error::Load {
        path: path.to_path_buf(),
        kind,
    })
}

pub fn save(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    save_with_metadata(model, &BTreeMap::new(), path)
}

/// Saves with additional metadata lines (for example merge provenance).
pub fn save_with_metadata(model: &Model<f32>, extra: &BTreeMap<String, String>, path: impl AsRef<Path>) -> Result<()> {
    write_atomically(path.as_ref(), &to_container(model, extra).to_bytes())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model<f32>> {
    Ok(load_with_metadata(path)?.0)
}

pub fn load_with_metadata(path: impl AsRef<Path>) -> Result<(Model<f32>, BTreeMap<String, String>)> {
    let path = path.as_ref();
    from_container(read_container(path)?).map_err(|kind| Error::Load {
        path: path.to_path_buf(),
        kind,
    })
}

/// Where the optimizer state of the checkpoint at `path` is kept.
pub fn optimizer_path(path: impl AsRef<Path>) -> PathBuf {
    let mut p = path.as_ref().as_os_str().to_owned();
    p.push(".opt");
    PathBuf::from(p)
}

pub fn save_optimizer(state: &OptimizerState<f32>, path: impl AsRef<Path>) -> Result<()> {
    let c = &state.config;
    let mut metadata = BTreeMap::from([
        ("step".to_string(), state.step.to_string()),
        ("beta1".to_string(), c.beta1.to_string()),
        ("beta2".to_string(), c.beta2.to_string()),
        ("epsilon".to_string(), c.epsilon.to_string()),
        ("peak_lr".to_string(), c.peak_lr.to_string()),
        ("warmup_steps".to_string(), c.warmup_steps.to_string()),
    ]);
    if let Some(d) = c.ema_decay {
        metadata.insert("ema_decay".into(), d.to_string());
    }
    let mut tensors = ParamStore::new();
    for (prefix, map) in [("m/", Some(&state.first_moment)), ("v/", Some(&state.second_moment)), ("ema/", state.ema_shadow.as_ref())] {
        for (name, t) in map.into_iter().flatten() {
            tensors.insert(format!("{prefix}{name}"), t.clone());
        }
    }
    write_atomically(path.as_ref(), &Container { metadata, tensors }.to_bytes())
}

pub fn load_optimizer(path: impl AsRef<Path>) -> Result<OptimizerState<f32>> {
    let path = path.as_ref();
    let c = read_container(path)?;
    let bad = |m: String| Error::Load {
        path: path.to_path_buf(),
        kind: LoadError::Malformed(m),
    };
    let num = |k: &str| -> Result<f64> {
        c.metadata
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(format!("optimizer metadata {k}")))
    };
    let config = AdamConfig {
        beta1: num("beta1")?,
        beta2: num("beta2")?,
        epsilon: num("epsilon")?,
        peak_lr: num("peak_lr")?,
        warmup_steps: num("warmup_steps")? as u64,
        ema_decay: c.metadata.get("ema_decay").and_then(|v| v.parse().ok()),
    };
    let mut state = OptimizerState::new(config);
    state.step = num("step")? as u64;
    for (name, t) in c.tensors.iter() {
        let (map, key) = if let Some(k) = name.strip_prefix("m/") {
            (&mut state.first_moment, k)
        } else if let Some(k) = name.strip_prefix("v/") {
            (&mut state.second_moment, k)
        } else if let Some(k) = name.strip_prefix("ema/") {
            match state.ema_shadow.as_mut() {
                Some(s) => (s, k),
                None => return Err(bad(format!("EMA tensor {name} without EMA decay"))),
            }
        } else {
            return Err(bad(format!("unexpected tensor {name}")));
        };
        map.insert(key.to_string(), t.clone());
    }
    Ok(state)
}

/// One language's rows of every language-dependent adapter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSlice {
    pub language_id: usize,
    pub source_step: u64,
    /// Keyed by full tensor name; `[r, cols]` where `r` is the per-language
    /// row count (`d`, `h`, or 1 for biases).
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl AdapterSlice {
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

fn check_language(cfg: &ModelConfig, language: usize) -> Result<()> {
    if language >= cfg.num_languages {
        return Err(Error::Range(format!("language {language} outside the model's {}", cfg.num_languages)));
    }
    Ok(())
}

/// `(rows per language, columns)` of a language-stacked tensor.
fn language_block(t: &Tensor<f32>, k: usize, name: &str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 2 || !s[0].is_multiple_of(k) {
        return Err(Error::Dimension(format!("{name} {s:?} is not stacked over {k} languages")));
    }
    Ok((s[0] / k, s[1]))
}

fn language_tensor_names(params: &ParamStore<f32>) -> Vec<String> {
    params.names().filter(|n| lda::is_language_param(n)).cloned().collect()
}

pub fn extract_adapter(model: &Model<f32>, language: usize) -> Result<AdapterSlice> {
    check_language(&model.config, language)?;
    let k = model.config.num_languages;
    let mut tensors = BTreeMap::new();
    for name in language_tensor_names(&model.params) {
        let t = model.params.get(&name)?;
        let (r, c) = language_block(t, k, &name)?;
        let rows = t.data()[language * r * c..(language + 1) * r * c].to_vec();
        tensors.insert(name, Tensor::new(vec![r, c], rows)?);
    }
    if tensors.is_empty() {
        return Err(Error::Config("model has no language-dependent adapters".into()));
    }
    Ok(AdapterSlice {
        language_id: language,
        source_step: model.step,
        tensors,
    })
}

/// Overwrites the slice's language rows in `model`.
pub fn insert_adapter(model: &mut Model<f32>, slice: &AdapterSlice) -> Result<()> {
    check_language(&model.config, slice.language_id)?;
    let k = model.config.num_languages;
    let expected: BTreeSet<String> = language_tensor_names(&model.params).into_iter().collect();
    let given: BTreeSet<String> = slice.tensors.keys().cloned().collect();
    if expected != given {
        return Err(Error::Config(format!(
            "adapter slice covers {} tensors, model has {}",
            given.len(),
            expected.len()
        )));
    }
    for (name, part) in &slice.tensors {
        let t = model.params.get_mut(name)?;
        let (r, c) = language_block(t, k, name)?;
        if part.shape() != [r, c] {
            return Err(Error::Dimension(format!("slice {name} {:?}, expected [{r}, {c}]", part.shape())));
        }
        let l = slice.language_id;
        t.data_mut()[l * r * c..(l + 1) * r * c].copy_from_slice(part.data());
    }
    Ok(())
}

/// A checkpoint contributing one language's adapter to a merge.
pub struct MergeSource<'a> {
    pub language: usize,
    pub model: &'a Model<f32>,
    /// Shown in errors, usually the checkpoint path.
    pub label: String,
}

/// `base` with each assigned language's adapter rows taken from its source
/// checkpoint. Every source must share the base's frozen weights.
pub fn merge_adapters(base: &Model<f32>, sources: &[MergeSource]) -> Result<Model<f32>> {
    let base_fp = fingerprint(&base.params);
    let mut seen = BTreeSet::new();
    for s in sources {
        check_language(&base.config, s.language)?;
        if !seen.insert(s.language) {
            return Err(Error::Config(format!("language {} assigned more than once", s.language)));
        }
        if s.model.config != base.config {
            return Err(Error::Merge(format!("{}: model configuration differs from the base", s.label)));
        }
        let fp = fingerprint(&s.model.params);
        if fp != base_fp {
            return Err(Error::Merge(format!(
                "{}: backbone fingerprint {} differs from base {}",
                s.label,
                hex(fp),
                hex(base_fp)
            )));
        }
        for (name, t) in s.model.params.iter().filter(|(n, _)| lda::is_adapter_param(n) && !lda::is_language_param(n)) {
            if !base.params.get(name).is_ok_and(|b| b.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits())) {
                return Err(Error::Merge(format!("{}: shared adapter tensor {name} differs from the base", s.label)));
            }
        }
    }
    let mut merged = base.clone();
    for s in sources {
        insert_adapter(&mut merged, &extract_adapter(s.model, s.language)?)?;
    }
    Ok(merged)
}

/// Sets one language's adapter rows to zero, making its adapters exact
/// identities.
pub fn zero_adapter(model: &mut Model<f32>, language: usize) -> Result<()> {
    let mut slice = extract_adapter(model, language)?;
    for t in slice.tensors.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    insert_adapter(model, &slice)
}
