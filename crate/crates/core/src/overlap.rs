//! Overlapping-entity extraction: exact normalized-title matching followed by an
//! embedding-similarity filter.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{OverlapPair, UnifiedCatalog};
use crate::encoder::{cosine, encode, EncoderParams};
use crate::error::{Error, Result};
use crate::tokenizer::{encode_candidate, Vocab};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    pub max: f64,
    pub average: f64,
    pub min: f64,
    pub count: usize,
}

/// Lowercase and collapse runs of whitespace.
pub fn normalize_title(title: &str) -> String {
    title
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Every (a, b) with equal normalized titles, ordered by a-ordinal then b-ordinal.
pub fn fuzzy_title_match(catalog: &UnifiedCatalog, kb_a: &str, kb_b: &str) -> Vec<OverlapPair> {
    let mut b_by_title: HashMap<String, Vec<usize>> = HashMap::new();
    for ord in catalog.ordinals_in_kb(kb_b) {
        b_by_title
            .entry(normalize_title(&catalog.entities()[ord].title))
            .or_default()
            .push(ord);
    }
    let mut pairs = Vec::new();
    for a in catalog.ordinals_in_kb(kb_a) {
        if let Some(bs) = b_by_title.get(&normalize_title(&catalog.entities()[a].title)) {
            pairs.extend(bs.iter().map(|&b| OverlapPair::new(a, b)));
        }
    }
    pairs
}

/// Scores every pair by cosine of the two entity embeddings and keeps those at or
/// above `threshold`. The stats cover all input pairs.
pub fn semantic_filter(
    pairs: &[OverlapPair],
    encoder: &EncoderParams,
    catalog: &UnifiedCatalog,
    vocab: &Vocab,
    max_len: usize,
    threshold: f64,
) -> Result<(Vec<OverlapPair>, SimilarityStats)> {
    if threshold.is_nan() {
        return Err(Error::Config("threshold is NaN".into()));
    }
    let mut cache: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut embed = |ord: usize| -> Result<Vec<f64>> {
        if let Some(v) = cache.get(&ord) {
            return Ok(v.clone());
        }
        let v = encode(encoder, &encode_candidate(catalog.get(ord)?, vocab, max_len)?)?.0;
        cache.insert(ord, v.clone());
        Ok(v)
    };
    let mut scored = Vec::with_capacity(pairs.len());
    for p in pairs {
        let a = embed(p.general_ordinal)?;
        let b = embed(p.specific_ordinal)?;
        scored.push(OverlapPair {
            similarity: Some(cosine(&a, &b)),
            ..*p
        });
    }
    let stats = similarity_stats(scored.iter().filter_map(|p| p.similarity));
    let kept = scored
        .into_iter()
        .filter(|p| p.similarity.is_some_and(|s| s >= threshold))
        .collect();
    Ok((kept, stats))
}

pub fn similarity_stats(values: impl IntoIterator<Item = f64>) -> SimilarityStats {
    let mut v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return SimilarityStats {
            max: 0.0,
            average: 0.0,
            min: 0.0,
            count: 0,
        };
    }
    v.sort_by(f64::total_cmp);
    SimilarityStats {
        max: v[v.len() - 1],
        average: v.iter().sum::<f64>() / v.len() as f64,
        min: v[0],
        count: v.len(),
    }
}

/// Uniform sample without replacement of `min(n, len)` pairs.
pub fn sample_pairs(pairs: &[OverlapPair], n: usize, seed: u64) -> Result<Vec<OverlapPair>> {
    if n == 0 {
        return Err(Error::Config("sample size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = pairs.to_vec();
    out.shuffle(&mut rng);
    out.truncate(n);
    Ok(out)
}

/// `general_ordinal<TAB>specific_ordinal<TAB>similarity` with six decimals.
pub fn write_kept_pairs(path: impl AsRef<Path>, pairs: &[OverlapPair]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for p in pairs {
        out.push_str(&format!(
            "{}\t{}\t{:.6}\n",
            p.general_ordinal,
            p.specific_ordinal,
            p.similarity.unwrap_or(f64::NAN)
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_kept_pairs(path: impl AsRef<Path>) -> Result<Vec<OverlapPair>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(bad(format!("expected 3 columns, got {}", cols.len())));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|e| bad(e.to_string()));
            Ok(OverlapPair {
                general_ordinal: num(cols[0])?,
                specific_ordinal: num(cols[1])?,
                similarity: Some(cols[2].parse::<f64>().map_err(|e| bad(e.to_string()))?),
            })
        })
        .collect()
}
