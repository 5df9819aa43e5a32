//! On-disk corpus: one directory per language holding one record file per
//! utterance, plus tab-separated manifests.
//!
//! Record layout: `T_raw: u32 LE`, `d_raw: u32 LE`, `T_raw·d_raw` f32 LE
//! values, then (labeled only) one UTF-8 line of space-separated token ids.
//! Manifest lines: `relative_path \t language_id \t supervised(0|1)`.

use std::fs;
use std::path::Path;

use super::corpus::{Corpus, Utterance};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MANIFEST: &str = "manifest.tsv";
pub const TEST_MANIFEST: &str = "manifest_test.tsv";

fn encode(utt: &Utterance<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + utt.features.numel() * 4);
    out.extend_from_slice(&(utt.frames() as u32).to_le_bytes());
    out.extend_from_slice(&(utt.dim() as u32).to_le_bytes());
    for v in utt.features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if !utt.transcript.is_empty() {
        let line: Vec<String> = utt.transcript.iter().map(|t| t.to_string()).collect();
        out.extend_from_slice(line.join(" ").as_bytes());
        out.push(b'\n');
    }
    out
}

fn decode(bytes: &[u8], id: usize, language_id: usize, supervised: bool, path: &Path) -> Result<Utterance<f32>> {
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("record shorter than header"));
    }
    let t = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let payload_end = 8 + t * d * 4;
    if bytes.len() < payload_end {
        return Err(bad("truncated feature payload"));
    }
    let data = bytes[8..payload_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let text = std::str::from_utf8(&bytes[payload_end..]).map_err(|_| bad("transcript not UTF-8"))?;
    let transcript = text
        .split_whitespace()
        .map(|tok| tok.parse().map_err(|_| bad("bad token id")))
        .collect::<Result<Vec<_>>>()?;
    if supervised == transcript.is_empty() {
        return Err(bad("supervised flag disagrees with transcript presence"));
    }
    Ok(Utterance {
        id,
        features: Tensor::new(vec![t, d], data)?,
        language_id,
        transcript,
        supervised,
    })
}

fn write_split(dir: &Path, manifest: &str, utts: &[&Utterance<f32>], prefix: &str) -> Result<()> {
    let mut lines = String::new();
    for u in utts {
        let rel = format!("lang{}/{prefix}_{:06}.utt", u.language_id, u.id);
        let path = dir.join(&rel);
        fs::create_dir_all(path.parent().unwrap()).map_err(|e| Error::io(&path, e))?;
        fs::write(&path, encode(u)).map_err(|e| Error::io(&path, e))?;
        lines.push_str(&format!("{rel}\t{}\t{}\n", u.language_id, u8::from(u.supervised)));
    }
    let mpath = dir.join(manifest);
    fs::write(&mpath, lines).map_err(|e| Error::io(&mpath, e))
}

pub fn write_corpus(dir: &Path, corpus: &Corpus<f32>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let train: Vec<_> = corpus.supervised.iter().chain(&corpus.unlabeled).collect();
    write_split(dir, MANIFEST, &train, "train")?;
    let test: Vec<_> = corpus.test.iter().collect();
    write_split(dir, TEST_MANIFEST, &test, "test")
}

fn read_split(dir: &Path, manifest: &str) -> Result<Vec<Utterance<f32>>> {
    let mpath = dir.join(manifest);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Data(format!("{}:{}: malformed manifest line", mpath.display(), lineno + 1));
        let mut cols = line.split('\t');
        let (Some(rel), Some(lang), Some(sup), None) = (cols.next(), cols.next(), cols.next(), cols.next())
        else {
            return Err(bad());
        };
        let lang: usize = lang.parse().map_err(|_| bad())?;
        let supervised = match sup {
            "1" => true,
            "0" => false,
            _ => return Err(bad()),
        };
        let id = rel
            .rsplit('_')
            .next()
            .and_then(|s| s.trim_end_matches(".utt").parse().ok())
            .ok_or_else(bad)?;
        let path = dir.join(rel);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        out.push(decode(&bytes, id, lang, supervised, &path)?);
    }
    Ok(out)
}

/// Loads a corpus written by [`write_corpus`]. Hidden references of
/// unlabeled utterances are not stored and come back empty.
pub fn read_corpus(dir: &Path) -> Result<Corpus<f32>> {
    let train = read_split(dir, MANIFEST)?;
    let (supervised, unlabeled): (Vec<_>, Vec<_>) = train.into_iter().partition(|u| u.supervised);
    Ok(Corpus {
        supervised,
        unlabeled,
        test: read_split(dir, TEST_MANIFEST)?,
        unlabeled_references: Vec::new(),
    })
}
