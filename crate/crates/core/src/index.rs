//! Exact brute-force cosine index over entity embeddings.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::biencoder::BiEncoderModel;
use crate::corpus::UnifiedCatalog;
use crate::encoder::{encode, EmbeddingVec};
use crate::error::{Error, Result};
use crate::tokenizer::{encode_candidate, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredEntity {
    pub ordinal: usize,
    pub score: f64,
}

/// Candidates ordered by score descending, then ordinal ascending.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Ranking {
    pub entries: Vec<ScoredEntity>,
}

pub(crate) fn rank_order(a: &ScoredEntity, b: &ScoredEntity) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.ordinal.cmp(&b.ordinal))
}

impl Ranking {
    pub fn from_scores(mut entries: Vec<ScoredEntity>) -> Self {
        entries.sort_by(rank_order);
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ordinals(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.ordinal)
    }

    /// 1-based position of `ordinal`, if present.
    pub fn rank_of(&self, ordinal: usize) -> Option<usize> {
        self.entries.iter().position(|e| e.ordinal == ordinal).map(|p| p + 1)
    }
}

/// Unit-normalized entity embeddings, one row per catalog ordinal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityIndex {
    pub n: usize,
    pub d: usize,
    /// `n × d`, row-major
    pub vectors: Vec<f64>,
    pub ordinals: Vec<usize>,
}

fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|x| x / norm).collect())
}

impl EntityIndex {
    pub fn from_embeddings(ordinals: Vec<usize>, rows: &[Vec<f64>]) -> Result<Self> {
        if ordinals.len() != rows.len() {
            return Err(Error::LengthMismatch {
                left: ordinals.len(),
                right: rows.len(),
            });
        }
        let d = rows.first().map_or(0, Vec::len);
        let mut vectors = Vec::with_capacity(rows.len() * d);
        for (row, &ord) in rows.iter().zip(&ordinals) {
            if row.len() != d {
                return Err(Error::Shape(format!("row for ordinal {ord} has dimension {}", row.len())));
            }
            vectors.extend(normalize(row).ok_or(Error::ZeroNorm(ord))?);
        }
        Ok(Self {
            n: rows.len(),
            d,
            vectors,
            ordinals,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.d..(i + 1) * self.d]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string(self).expect("serializable")).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let idx: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if idx.vectors.len() != idx.n * idx.d || idx.ordinals.len() != idx.n {
            return Err(Error::Shape("index header does not match its payload".into()));
        }
        Ok(idx)
    }
}

/// Encodes every catalog entity with the candidate encoder and normalizes the rows.
pub fn build_index(
    model: &BiEncoderModel,
    catalog: &UnifiedCatalog,
    vocab: &Vocab,
    max_len: usize,
) -> Result<EntityIndex> {
    let rows = catalog
        .entities()
        .iter()
        .map(|e| Ok(encode(&model.candidate, &encode_candidate(e, vocab, max_len)?)?.0))
        .collect::<Result<Vec<_>>>()?;
    EntityIndex::from_embeddings((0..catalog.len()).collect(), &rows)
}

/// Top `min(k, n)` rows by cosine with `query`. A zero query scores every row 0.
pub fn search(index: &EntityIndex, query: &EmbeddingVec, k: usize) -> Result<Ranking> {
    if index.n == 0 {
        return Err(Error::EmptyIndex);
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if query.dim() != index.d {
        return Err(Error::Shape(format!(
            "query dimension {} vs index dimension {}",
            query.dim(),
            index.d
        )));
    }
    let q = normalize(query.as_slice()).unwrap_or_else(|| vec![0.0; index.d]);
    let mut scored: Vec<ScoredEntity> = (0..index.n)
        .map(|i| ScoredEntity {
            ordinal: index.ordinals[i],
            score: index.row(i).iter().zip(&q).map(|(a, b)| a * b).sum(),
        })
        .collect();
    let k = k.min(index.n);
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    Ok(Ranking::from_scores(scored))
}
