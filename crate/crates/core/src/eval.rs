//! Linking metrics (AP@k, MAP@k, AP@1) and intrinsic alignment metrics (MRR, ACS).
//!
//! There is exactly one gold entity per mention, so AP@k reduces to `1/rank`
//! when the gold is within the top `k` and 0 otherwise.

use serde::{Deserialize, Serialize};

use crate::biencoder::BiEncoderModel;
use crate::corpus::{MentionRecord, OverlapPair, UnifiedCatalog};
use crate::crossencoder::{rerank, CrossEncoderModel};
use crate::encoder::{cosine, encode, EncoderParams};
use crate::error::{Error, Result};
use crate::index::{search, EntityIndex, Ranking};
use crate::tokenizer::{encode_candidate, encode_context, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum EvalStage {
    #[default]
    #[serde(rename = "bi-encoder")]
    BiEncoder,
    #[serde(rename = "cross-encoder")]
    CrossEncoder,
}

impl std::str::FromStr for EvalStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bi-encoder" | "bi" => Ok(EvalStage::BiEncoder),
            "cross-encoder" | "cross" => Ok(EvalStage::CrossEncoder),
            _ => Err(Error::Config(format!("unknown stage {s:?}; expected bi-encoder or cross-encoder"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkOptions {
    pub k: usize,
    pub stage: EvalStage,
    pub context_max_len: usize,
    pub cross_max_len: usize,
}

impl Default for LinkOptions {
    fn default() -> Self {
        Self {
            k: 10,
            stage: EvalStage::BiEncoder,
            context_max_len: 128,
            cross_max_len: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_mention_ap10: Vec<f64>,
    pub per_mention_rel1: Vec<u8>,
    pub ap_at_1: f64,
    pub map_at_10: f64,
    pub k: usize,
    pub stage: EvalStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicReport {
    pub mrr: f64,
    pub acs: f64,
    pub pair_count: usize,
}

/// Mean over a sorted copy, so the result does not depend on input order.
fn order_free_mean(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum::<f64>() / sorted.len() as f64
}

pub fn ap_at_k(ranking: &Ranking, gold: usize, k: usize) -> f64 {
    match ranking.rank_of(gold) {
        Some(r) if r <= k => 1.0 / r as f64,
        _ => 0.0,
    }
}

pub fn map_at_k(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("per-mention AP values"));
    }
    Ok(order_free_mean(values))
}

pub fn ap_at_1(rel1: &[u8]) -> Result<f64> {
    if rel1.is_empty() {
        return Err(Error::Empty("rel@1 indicators"));
    }
    let hits = rel1.iter().filter(|&&r| r != 0).count();
    Ok(hits as f64 / rel1.len() as f64)
}

/// Retrieves the top `k` candidates for one mention, reranking them when the stage asks for it.
pub fn link_mention(
    model: &BiEncoderModel,
    index: &EntityIndex,
    mention: &MentionRecord,
    catalog: &UnifiedCatalog,
    vocab: &Vocab,
    opts: &LinkOptions,
    cross: Option<&CrossEncoderModel>,
) -> Result<Ranking> {
    let query = encode(&model.context, &encode_context(mention, vocab, opts.context_max_len)?)?;
    let ranking = search(index, &query, opts.k)?;
    match opts.stage {
        EvalStage::BiEncoder => Ok(ranking),
        EvalStage::CrossEncoder => {
            let cross = cross.ok_or_else(|| Error::Config("cross-encoder stage requested without a cross-encoder".into()))?;
            let cands: Vec<usize> = ranking.ordinals().collect();
            rerank(cross, mention, &cands, catalog, vocab, opts.cross_max_len)
        }
    }
}

pub fn evaluate_linking(
    model: &BiEncoderModel,
    index: &EntityIndex,
    mentions: &[MentionRecord],
    catalog: &UnifiedCatalog,
    vocab: &Vocab,
    opts: &LinkOptions,
    cross: Option<&CrossEncoderModel>,
) -> Result<EvalReport> {
    let golds = catalog.resolve_all(mentions)?;
    let mut ap = Vec::with_capacity(mentions.len());
    let mut rel1 = Vec::with_capacity(mentions.len());
    for (m, &gold) in mentions.iter().zip(&golds) {
        let ranking = link_mention(model, index, m, catalog, vocab, opts, cross)?;
        ap.push(ap_at_k(&ranking, gold, opts.k));
        rel1.push(u8::from(ranking.entries.first().is_some_and(|e| e.ordinal == gold)));
    }
    Ok(EvalReport {
        ap_at_1: ap_at_1(&rel1)?,
        map_at_10: map_at_k(&ap)?,
        per_mention_ap10: ap,
        per_mention_rel1: rel1,
        k: opts.k,
        stage: opts.stage,
    })
}

/// MRR and average cosine similarity over overlap pairs, embedded with the candidate encoder.
///
/// MRR runs general → specific: each pair's specific entity is ranked among the
/// specific entities of all given pairs by cosine to the general entity, ties by ordinal.
pub fn intrinsic_eval(
    candidate: &EncoderParams,
    pairs: &[OverlapPair],
    catalog: &UnifiedCatalog,
    vocab: &Vocab,
    max_len: usize,
) -> Result<IntrinsicReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("overlap pairs"));
    }
    let embed = |ord: usize| -> Result<Vec<f64>> {
        Ok(encode(candidate, &encode_candidate(catalog.get(ord)?, vocab, max_len)?)?.0)
    };
    let mut pool: Vec<usize> = pairs.iter().map(|p| p.specific_ordinal).collect();
    pool.sort_unstable();
    pool.dedup();
    let pool_vecs = pool.iter().map(|&o| embed(o)).collect::<Result<Vec<_>>>()?;

    let mut cosines = Vec::with_capacity(pairs.len());
    let mut reciprocal = Vec::with_capacity(pairs.len());
    for p in pairs {
        let g = embed(p.general_ordinal)?;
        let target = pool.binary_search(&p.specific_ordinal).expect("pool holds every specific ordinal");
        let sims: Vec<f64> = pool_vecs.iter().map(|v| cosine(&g, v)).collect();
        let own = sims[target];
        let rank = 1 + pool
            .iter()
            .zip(&sims)
            .filter(|(&o, &s)| s > own || (s == own && o < p.specific_ordinal))
            .count();
        cosines.push(own);
        reciprocal.push(1.0 / rank as f64);
    }
    Ok(IntrinsicReport {
        mrr: order_free_mean(&reciprocal),
        acs: order_free_mean(&cosines),
        pair_count: pairs.len(),
    })
}
